//! Grouped longitudinal datasets loaded from delimited text files.
//!
//! A [`Dataset`] holds one [`IndividualData`] per grouping level, preserving
//! within-group row order. Categorical columns are expanded to 0/1 indicator
//! columns against a declared reference level at load time, so downstream
//! code only ever sees numeric matrices.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observations of a single individual: responses plus one covariate row per
/// observation.
#[derive(Debug, Clone)]
pub struct IndividualData {
    pub id: String,
    pub responses: DVector<f64>,
    /// rows = observations, columns = covariates (same order as
    /// `Dataset::column_names`)
    pub covariates: DMatrix<f64>,
}

/// A dataset grouped by individual.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub individuals: Vec<IndividualData>,
    pub column_names: Vec<String>,
}

impl Dataset {
    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    pub fn n_obs(&self) -> usize {
        self.individuals.iter().map(|i| i.responses.len()).sum()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Replace all responses with the given per-individual vectors, keeping
    /// covariates. Used by the simulator.
    pub fn with_responses(&self, responses: Vec<DVector<f64>>) -> Result<Dataset> {
        if responses.len() != self.individuals.len() {
            return Err(Error::Validation(
                "response count does not match individual count".into(),
            ));
        }
        let individuals = self
            .individuals
            .iter()
            .zip(responses)
            .map(|(ind, y)| {
                if y.len() != ind.responses.len() {
                    return Err(Error::Validation(format!(
                        "individual {}: simulated response length mismatch",
                        ind.id
                    )));
                }
                Ok(IndividualData {
                    id: ind.id.clone(),
                    responses: y,
                    covariates: ind.covariates.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            individuals,
            column_names: self.column_names.clone(),
        })
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ind in &self.individuals {
            if !seen.insert(ind.id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate individual identifier '{}'",
                    ind.id
                )));
            }
            if ind.responses.is_empty() {
                return Err(Error::Validation(format!(
                    "individual '{}' has no observations",
                    ind.id
                )));
            }
            if ind.responses.len() != ind.covariates.nrows() {
                return Err(Error::Validation(format!(
                    "individual '{}': responses/covariate row count mismatch",
                    ind.id
                )));
            }
            if ind.covariates.ncols() != self.column_names.len() {
                return Err(Error::Validation(format!(
                    "individual '{}': covariate column count mismatch",
                    ind.id
                )));
            }
            let finite = ind.responses.iter().all(|v| v.is_finite())
                && ind.covariates.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!(
                    "individual '{}' contains non-finite values",
                    ind.id
                )));
            }
        }
        Ok(())
    }
}

/// A categorical column and its reference level.
#[derive(Debug, Clone)]
pub struct CategoricalSpec {
    pub column: String,
    pub reference: String,
}

/// Which CSV columns play which role.
#[derive(Debug, Clone)]
pub struct ColumnRoles {
    pub group: String,
    pub response: String,
    /// numeric covariate columns to load
    pub covariates: Vec<String>,
    /// categorical columns, expanded to indicator columns `col=level`
    pub categorical: Vec<CategoricalSpec>,
}

/// Load a CSV file (header row, comma delimiter, '.' decimal separator) and
/// group it by the declared grouping column.
///
/// Categorical columns are expanded to one indicator column per non-reference
/// level, named `column=level`, with levels ordered by first appearance.
/// Missing values are rejected.
pub fn load_csv<P: AsRef<Path>>(path: P, roles: &ColumnRoles) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();

    let col_idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found in CSV header")))
    };

    let group_idx = col_idx(&roles.group)?;
    let response_idx = col_idx(&roles.response)?;
    let covariate_idx: Vec<usize> = roles
        .covariates
        .iter()
        .map(|c| col_idx(c))
        .collect::<Result<Vec<_>>>()?;
    let categorical_idx: Vec<usize> = roles
        .categorical
        .iter()
        .map(|c| col_idx(&c.column))
        .collect::<Result<Vec<_>>>()?;

    // First pass: read all rows, collect categorical levels in appearance order.
    struct RawRow {
        group: String,
        response: f64,
        numeric: Vec<f64>,
        categorical: Vec<String>,
    }
    let mut rows: Vec<RawRow> = Vec::new();
    let mut levels: Vec<Vec<String>> = vec![Vec::new(); roles.categorical.len()];
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", row_no + 2)))?;
        let get = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Parse(format!("row {}: missing field", row_no + 2)))
        };
        let response_str = get(response_idx)?;
        let response: f64 = response_str.parse().map_err(|_| {
            Error::Parse(format!(
                "row {}: non-numeric response '{}'",
                row_no + 2,
                response_str
            ))
        })?;
        let numeric = covariate_idx
            .iter()
            .map(|&i| {
                let s = get(i)?;
                s.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "row {}: non-numeric value '{}' in column '{}'",
                        row_no + 2,
                        s,
                        headers[i]
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let categorical = categorical_idx
            .iter()
            .map(|&i| get(i).map(|s| s.to_string()))
            .collect::<Result<Vec<String>>>()?;
        for (lv, value) in levels.iter_mut().zip(&categorical) {
            if value.is_empty() {
                return Err(Error::Parse(format!(
                    "row {}: empty categorical value",
                    row_no + 2
                )));
            }
            if !lv.contains(value) {
                lv.push(value.clone());
            }
        }
        let group = get(group_idx)?.to_string();
        if group.is_empty() {
            return Err(Error::Validation(format!(
                "row {}: empty group identifier",
                row_no + 2
            )));
        }
        rows.push(RawRow {
            group,
            response,
            numeric,
            categorical,
        });
    }
    if rows.is_empty() {
        return Err(Error::Validation("dataset contains no rows".into()));
    }

    // Indicator columns against the reference level.
    let mut indicator_names: Vec<Vec<String>> = Vec::new();
    for (spec, lv) in roles.categorical.iter().zip(&levels) {
        if !lv.contains(&spec.reference) {
            return Err(Error::Config(format!(
                "reference level '{}' never appears in column '{}'",
                spec.reference, spec.column
            )));
        }
        indicator_names.push(
            lv.iter()
                .filter(|l| **l != spec.reference)
                .map(|l| format!("{}={}", spec.column, l))
                .collect(),
        );
    }

    let mut column_names: Vec<String> = roles.covariates.clone();
    for names in &indicator_names {
        column_names.extend(names.iter().cloned());
    }
    let n_cols = column_names.len();

    // Group rows preserving load order of both groups and rows within groups.
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.group) {
            order.push(r.group.clone());
        }
    }
    let mut individuals = Vec::with_capacity(order.len());
    for id in &order {
        let group_rows: Vec<&RawRow> = rows.iter().filter(|r| &r.group == id).collect();
        let n = group_rows.len();
        let responses = DVector::from_iterator(n, group_rows.iter().map(|r| r.response));
        let mut covariates = DMatrix::zeros(n, n_cols);
        for (i, r) in group_rows.iter().enumerate() {
            for (j, v) in r.numeric.iter().enumerate() {
                covariates[(i, j)] = *v;
            }
            let mut j = roles.covariates.len();
            for (c, (spec, lv)) in roles.categorical.iter().zip(&levels).enumerate() {
                for level in lv.iter().filter(|l| **l != spec.reference) {
                    covariates[(i, j)] = if &r.categorical[c] == level { 1.0 } else { 0.0 };
                    j += 1;
                }
            }
        }
        individuals.push(IndividualData {
            id: id.clone(),
            responses,
            covariates,
        });
    }

    let ds = Dataset {
        individuals,
        column_names,
    };
    ds.validate()?;
    Ok(ds)
}

/// A single model term referencing dataset columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Intercept,
    Column(String),
    /// elementwise product of two columns
    Interaction(String, String),
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Term::Intercept => write!(f, "(Intercept)"),
            Term::Column(c) => write!(f, "{c}"),
            Term::Interaction(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

fn term_column(ds: &Dataset, ind: &IndividualData, term: &Term) -> Result<DVector<f64>> {
    let n = ind.responses.len();
    let col = |name: &str| -> Result<DVector<f64>> {
        let j = ds
            .column_index(name)
            .ok_or_else(|| Error::Config(format!("unknown column '{name}' in model term")))?;
        Ok(ind.covariates.column(j).into_owned())
    };
    match term {
        Term::Intercept => Ok(DVector::from_element(n, 1.0)),
        Term::Column(name) => col(name),
        Term::Interaction(a, b) => {
            let ca = col(a)?;
            let cb = col(b)?;
            Ok(ca.component_mul(&cb))
        }
    }
}

/// Build per-individual fixed and random design matrices.
///
/// Column order follows term declaration order and is deterministic.
pub fn design_matrices(
    ds: &Dataset,
    fixed_terms: &[Term],
    random_terms: &[Term],
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let build = |ind: &IndividualData, terms: &[Term]| -> Result<DMatrix<f64>> {
        let n = ind.responses.len();
        let mut m = DMatrix::zeros(n, terms.len());
        for (j, t) in terms.iter().enumerate() {
            m.set_column(j, &term_column(ds, ind, t)?);
        }
        Ok(m)
    };
    ds.individuals
        .iter()
        .map(|ind| Ok((build(ind, fixed_terms)?, build(ind, random_terms)?)))
        .collect()
}
