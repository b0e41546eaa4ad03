//! Orchestration: take two nested models (fitted here or ingested as fit
//! summaries), compute the likelihood ratio statistic, build the cone,
//! obtain mixture weights and p-values, and assemble the final result.
//! Also hosts the bootstrap-coverage simulation study.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chibarsq::{
    draw_sample, estimate_weights, exact_weights, pvalue_bounds, pvalue_from_sample,
    pvalue_from_weights, WeightEstimate,
};
use crate::cone::Cone;
use crate::error::{Error, Result};
use crate::fim::{bootstrap_fim, extract_fim, load_fim, FimEstimate, FimKind};
use crate::lmm::{fit_ml, simulate, FitOptions, FitResult, LmmSpec};
use crate::structure::{
    infer_test, BlockTest, BlockTestKind, ConeDims, CovarianceLayout, TestStructure,
};

/// Which p-value computations to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PvalMode {
    Bounds,
    Approx,
    Both,
}

/// Where the Fisher information comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FimMode {
    Extract,
    Compute,
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TestOptions {
    pub pval_mode: PvalMode,
    pub fim_mode: FimMode,
    /// Monte Carlo sample size for weight estimation
    pub m: usize,
    /// bootstrap sample size for computed information matrices
    pub b: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            pval_mode: PvalMode::Bounds,
            fim_mode: FimMode::Extract,
            m: 5000,
            b: 1000,
            seed: 0,
            workers: 1,
        }
    }
}

/// Summary of one model fitted elsewhere. The alternative model's summary
/// also declares, per covariance block, which parameters the test touches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub loglik: f64,
    pub fixed: FixedSummary,
    pub blocks: Vec<BlockSummary>,
    pub residual_param_count: usize,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub fim: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub fim_is_inverse: Option<bool>,
    #[serde(default)]
    pub lrt_override: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSummary {
    pub count: usize,
    #[serde(default)]
    pub tested_indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSummary {
    pub size: usize,
    pub test: BlockTestTag,
    #[serde(default)]
    pub t: Option<usize>,
    #[serde(default)]
    pub s: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTestTag {
    Untested,
    CovariancesOnly,
    Full,
    Subblock,
}

impl FitSummary {
    /// total parameter dimension implied by the declared structure
    pub fn q(&self) -> usize {
        self.fixed.count
            + self
                .blocks
                .iter()
                .map(|b| b.size * (b.size + 1) / 2)
                .sum::<usize>()
            + self.residual_param_count
    }

    pub fn test_structure(&self) -> Result<TestStructure> {
        let layout = CovarianceLayout::new(self.blocks.iter().map(|b| b.size).collect())?;
        let block_tests = self
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let kind = match b.test {
                    BlockTestTag::Untested => BlockTestKind::Untested,
                    BlockTestTag::Full => BlockTestKind::Full,
                    BlockTestTag::CovariancesOnly => BlockTestKind::CovariancesOnly {
                        t: b.t.ok_or_else(|| {
                            Error::Validation(format!(
                                "blocks[{k}]: covariances_only requires field 't'"
                            ))
                        })?,
                        parts: None,
                    },
                    BlockTestTag::Subblock => BlockTestKind::SubBlock {
                        s: b.s.ok_or_else(|| {
                            Error::Validation(format!("blocks[{k}]: subblock requires field 's'"))
                        })?,
                    },
                };
                Ok(BlockTest {
                    block_index: k,
                    kind,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ts = TestStructure {
            b: self.fixed.count,
            tested_fixed: self.fixed.tested_indices.clone(),
            layout,
            block_tests,
            residual_param_count: self.residual_param_count,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        if let Some(theta) = &self.theta {
            if theta.len() != q {
                return Err(Error::Validation(format!(
                    "theta: expected {q} entries, found {}",
                    theta.len()
                )));
            }
        }
        if let Some(fim) = &self.fim {
            if fim.len() != q || fim.iter().any(|r| r.len() != q) {
                return Err(Error::Validation(format!(
                    "fim: expected a {q} x {q} matrix, found {} rows of lengths {:?}",
                    fim.len(),
                    fim.iter().map(|r| r.len()).collect::<Vec<_>>()
                )));
            }
        }
        Ok(())
    }

    fn fim_estimate(&self) -> Result<FimEstimate> {
        let fim = self.fim.as_ref().ok_or_else(|| {
            Error::Validation("fit summary carries no information matrix".into())
        })?;
        let q = self.q();
        let m = DMatrix::from_fn(q, q, |i, j| fim[i][j]);
        Ok(FimEstimate {
            matrix: m,
            kind: FimKind::UserProvided,
            is_inverse: self.fim_is_inverse.unwrap_or(false),
        })
    }
}

/// Parse and validate a fit-summary JSON file.
pub fn parse_fit_summary<P: AsRef<Path>>(path: P) -> Result<FitSummary> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let summary: FitSummary = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    summary.validate()?;
    match summary.test_structure() {
        // a null-model summary declares no tested components; nesting is
        // judged from the alternative model when the pair is tested
        Ok(_) | Err(Error::NotNested(_)) => Ok(summary),
        Err(e) => Err(e),
    }
}

/// One model entering the test: fitted here or summarized externally.
#[derive(Debug, Clone)]
pub enum TestInput {
    Fitted(Box<FittedModel>),
    Summary(FitSummary),
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: LmmSpec,
    pub fit: FitResult,
}

impl TestInput {
    pub fn fitted(spec: LmmSpec, fit: FitResult) -> TestInput {
        TestInput::Fitted(Box::new(FittedModel { spec, fit }))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Pvalues {
    pub from_weights: Option<f64>,
    pub from_sample: Option<f64>,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

/// The complete outcome of a variance-component test.
#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub lrt: f64,
    pub dims: ConeDims,
    pub weights: Option<WeightEstimate>,
    pub pvalues: Pvalues,
    pub warnings: Vec<String>,
    /// short phrase naming the tested components, e.g. "variance of age"
    pub tested_description: String,
    pub null_description: String,
    pub alternative_description: String,
}

/// Phrase naming what the test touches, from the dropped random-effect
/// names (fitted path) or generically (summary path).
fn tested_phrase(m1: &TestInput, m0: &TestInput, ts: &TestStructure) -> String {
    if let (TestInput::Fitted(f1), TestInput::Fitted(f0)) = (m1, m0) {
        let dropped: Vec<&String> = f1
            .spec
            .random_names
            .iter()
            .filter(|n| !f0.spec.random_names.contains(n))
            .collect();
        if dropped.len() == 1 {
            return format!("variance of {}", dropped[0]);
        } else if dropped.len() > 1 {
            let (last, head) = dropped.split_last().unwrap();
            let head: Vec<String> = head.iter().map(|s| s.to_string()).collect();
            return format!("variances of {} and {}", head.join(", "), last);
        }
        // only covariances are tested
        return "covariance(s) of the random effects".to_string();
    }
    let n_tested_blocks = ts
        .block_tests
        .iter()
        .filter(|bt| bt.kind != BlockTestKind::Untested)
        .count();
    if n_tested_blocks == 1 {
        "variance component of 1 declared block".to_string()
    } else {
        format!("variance components of {n_tested_blocks} declared blocks")
    }
}

/// Run the full variance-component test between two nested models.
pub fn var_comp_test(m1: &TestInput, m0: &TestInput, opts: &TestOptions) -> Result<TestResult> {
    if opts.m == 0 {
        return Err(Error::Validation("Monte Carlo sample size must be >= 1".into()));
    }
    let mut warnings: Vec<String> = Vec::new();

    let (ts, ll1, ll0, lrt_override) = match (m1, m0) {
        (TestInput::Fitted(f1), TestInput::Fitted(f0)) => {
            let ts = infer_test(&f1.spec.model_structure(), &f0.spec.model_structure(), 1)?;
            if !f1.fit.converged {
                warnings.push("alternative model fit did not fully converge".into());
            }
            if !f0.fit.converged {
                warnings.push("null model fit did not fully converge".into());
            }
            (ts, f1.fit.loglik, f0.fit.loglik, None)
        }
        (TestInput::Summary(s1), TestInput::Summary(s0)) => {
            s1.validate()?;
            s0.validate()?;
            let ts = s1.test_structure()?;
            let over = s1.lrt_override.or(s0.lrt_override);
            (ts, s1.loglik, s0.loglik, over)
        }
        _ => {
            return Err(Error::Validation(
                "both models must be of the same kind (two internal fits or two fit summaries)"
                    .into(),
            ))
        }
    };

    let mut lrt = 2.0 * (ll1 - ll0);
    if let Some(over) = lrt_override {
        warnings.push(format!(
            "using the declared test statistic {over} instead of the recomputed {lrt}"
        ));
        lrt = over;
    }
    if lrt < 0.0 {
        if lrt >= -1e-6 {
            warnings.push(format!("negative LRT statistic {lrt} clamped to 0"));
            lrt = 0.0;
        } else {
            return Err(Error::Eval(format!(
                "LRT statistic {lrt} is negative beyond tolerance; the alternative fit likely failed"
            )));
        }
    }

    let dims = ts.cone_dims();
    let sets = ts.tested_index_sets();
    let cone = Cone::from_index_sets(dims.q, &sets);
    let (lower_bound, upper_bound) = pvalue_bounds(lrt, &dims);

    // exact weights cost nothing and are reported even in bounds mode
    let mut weights = exact_weights(&cone, &dims);
    let mut from_sample = None;
    if weights.is_none() && opts.pval_mode != PvalMode::Bounds {
        let est = match (&opts.fim_mode, m1) {
            (FimMode::Extract, TestInput::Fitted(f1)) => extract_fim(&f1.spec, &f1.fit)?,
            (FimMode::Extract, TestInput::Summary(s1)) => s1.fim_estimate()?,
            (FimMode::Compute, TestInput::Fitted(f1)) => {
                bootstrap_fim(&f1.spec, &f1.fit, opts.b, opts.seed ^ 0x626f6f74, opts.workers)?
            }
            (FimMode::Compute, TestInput::Summary(_)) => {
                return Err(Error::Validation(
                    "cannot bootstrap an information matrix from a fit summary; \
                     supply one in the summary or via a file"
                        .into(),
                ))
            }
            (FimMode::File(path), _) => load_fim(path, dims.q, false)?,
        };
        if let FimKind::Bootstrap { failures, .. } = est.kind {
            if failures > 0 {
                warnings.push(format!("{failures} bootstrap refits failed and were dropped"));
            }
        }
        let v = est.to_v()?;
        let sample = draw_sample(&cone, &v, opts.m, opts.seed, opts.workers)?;
        let west = estimate_weights(&sample, &dims)?;
        if west.suspicious() {
            warnings.push(format!(
                "estimated weights {:?} fall outside [0, 1]; treat the p-value with caution",
                west.weights
            ));
        }
        let (ps, underflow) = pvalue_from_sample(&sample, lrt);
        if underflow {
            warnings.push(format!(
                "no Monte Carlo draw reached the observed statistic; \
                 the empirical p-value underflows below 1/{}",
                opts.m
            ));
        }
        from_sample = Some(ps);
        weights = Some(west);
    }

    let from_weights = weights.as_ref().map(|w| pvalue_from_weights(w, lrt));
    let tested = tested_phrase(m1, m0, &ts);

    Ok(TestResult {
        lrt,
        dims,
        weights,
        pvalues: Pvalues {
            from_weights,
            from_sample,
            lower_bound,
            upper_bound,
        },
        warnings,
        null_description: format!("{tested} = 0"),
        alternative_description: format!("{tested} > 0"),
        tested_description: tested,
    })
}

/// Configuration of the bootstrap-coverage simulation study: a random
/// slope/intercept model observed on a fixed time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub beta: Vec<f64>,
    /// 2 x 2 covariance of the random intercept and slope, row-major
    pub gamma: [[f64; 2]; 2],
    pub sigma2: f64,
    pub n_individuals: usize,
    pub timepoints: Vec<f64>,
    /// number of simulated datasets
    pub r: usize,
    /// bootstrap sample size per dataset
    pub b: usize,
    pub fim_modes: Vec<CoverageFimMode>,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageFimMode {
    Extract,
    Bootstrap,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageResult {
    pub param_names: Vec<String>,
    /// one row per FIM mode, one column per parameter
    pub modes: Vec<CoverageRow>,
    pub repetitions: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageRow {
    pub mode: CoverageFimMode,
    pub coverage: Vec<f64>,
}

/// Empirical coverage of the 95% Wald intervals built from each information
/// estimate, over `r` simulated datasets.
pub fn run_coverage_study(config: &CoverageConfig) -> Result<CoverageResult> {
    if config.sigma2 <= 0.0 {
        return Err(Error::Validation("simulation requires sigma^2 > 0".into()));
    }
    if config.r == 0 {
        return Err(Error::Validation("at least one repetition required".into()));
    }
    if config.beta.len() != 2 || config.timepoints.is_empty() || config.n_individuals == 0 {
        return Err(Error::Validation("coverage study needs 2 fixed effects, a non-empty time grid and individuals".into()));
    }
    if config.fim_modes.is_empty() {
        return Err(Error::Validation("no information-matrix modes requested".into()));
    }
    let gamma = DMatrix::from_fn(2, 2, |i, j| config.gamma[i][j]);
    if (gamma[(0, 1)] - gamma[(1, 0)]).abs() > 1e-12
        || nalgebra::Cholesky::new(gamma.clone()).is_none()
    {
        return Err(Error::Validation(
            "random-effect covariance must be symmetric positive definite".into(),
        ));
    }

    // the same design for every individual: intercept and time
    let j = config.timepoints.len();
    let x = DMatrix::from_fn(j, 2, |i, c| if c == 0 { 1.0 } else { config.timepoints[i] });
    let spec = LmmSpec::new(
        vec![x.clone(); config.n_individuals],
        vec![x; config.n_individuals],
        vec![DVector::zeros(j); config.n_individuals],
        CovarianceLayout::new(vec![2])?,
        vec!["(Intercept)".into(), "t".into()],
        vec!["(Intercept)".into(), "t".into()],
    )?;
    let truth = crate::lmm::ParamVector {
        beta: DVector::from_vec(config.beta.clone()),
        gamma: vec![gamma],
        sigma2: config.sigma2,
    };
    let theta_true = truth.flatten();
    let q = theta_true.len();

    // per repetition: hit indicator per mode per parameter, or None on
    // fit failure
    let one = |rep: usize| -> Option<Vec<Vec<bool>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(rep as u64);
        let ys = simulate(&spec, &truth, &mut rng);
        let sim = spec.with_responses(ys).ok()?;
        let fit = fit_ml(&sim, &FitOptions::default()).ok()?;
        let theta_hat = fit.theta();
        let mut rows = Vec::with_capacity(config.fim_modes.len());
        for mode in &config.fim_modes {
            let est = match mode {
                CoverageFimMode::Extract => extract_fim(&sim, &fit).ok()?,
                CoverageFimMode::Bootstrap => {
                    // nested bootstrap seed, distinct per repetition
                    let seed = config
                        .seed
                        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(rep as u64 + 1));
                    bootstrap_fim(&sim, &fit, config.b, seed, 1).ok()?
                }
            };
            let v = est.to_v().ok()?;
            let hits: Vec<bool> = (0..q)
                .map(|k| {
                    let half = 1.959963984540054 * v[(k, k)].max(0.0).sqrt();
                    (theta_hat[k] - theta_true[k]).abs() <= half
                })
                .collect();
            rows.push(hits);
        }
        Some(rows)
    };

    let results: Vec<Option<Vec<Vec<bool>>>> = if config.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Numerical(e.to_string()))?;
        pool.install(|| (0..config.r).into_par_iter().map(one).collect())
    } else {
        (0..config.r).map(one).collect()
    };

    let ok: Vec<Vec<Vec<bool>>> = results.into_iter().flatten().collect();
    let failures = config.r - ok.len();
    if failures * 10 > config.r {
        return Err(Error::Numerical(format!(
            "coverage study unstable: {failures} of {} repetitions failed",
            config.r
        )));
    }
    let n = ok.len() as f64;
    let modes = config
        .fim_modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let coverage = (0..q)
                .map(|k| ok.iter().filter(|rep| rep[mi][k]).count() as f64 / n)
                .collect();
            CoverageRow { mode, coverage }
        })
        .collect();

    Ok(CoverageResult {
        param_names: vec![
            "beta_1".into(),
            "beta_2".into(),
            "gamma_11".into(),
            "gamma_12".into(),
            "gamma_22".into(),
            "sigma2".into(),
        ],
        modes,
        repetitions: ok.len(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_csv, CategoricalSpec, ColumnRoles, Term};
    use approx::assert_relative_eq;
    use std::io::Write;

    fn orthodont_inputs(random: &[Term], blocks: &[usize]) -> TestInput {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/orthodont.csv");
        let ds = load_csv(
            path,
            &ColumnRoles {
                group: "Subject".into(),
                response: "distance".into(),
                covariates: vec!["age".into()],
                categorical: vec![CategoricalSpec {
                    column: "Sex".into(),
                    reference: "Male".into(),
                }],
            },
        )
        .unwrap();
        let fixed = vec![
            Term::Intercept,
            Term::Column("Sex=Female".into()),
            Term::Column("age".into()),
            Term::Interaction("Sex=Female".into(), "age".into()),
        ];
        let spec = LmmSpec::from_dataset(
            &ds,
            &fixed,
            random,
            CovarianceLayout::new(blocks.to_vec()).unwrap(),
        )
        .unwrap();
        let fit = fit_ml(&spec, &FitOptions::default()).unwrap();
        TestInput::fitted(spec, fit)
    }

    fn cbpp_summary(loglik: f64, with_lrt: bool) -> FitSummary {
        FitSummary {
            loglik,
            fixed: FixedSummary {
                count: 4,
                tested_indices: vec![],
            },
            blocks: vec![BlockSummary {
                size: 1,
                test: BlockTestTag::Full,
                t: None,
                s: None,
            }],
            residual_param_count: 1,
            theta: None,
            fim: None,
            fim_is_inverse: None,
            lrt_override: with_lrt.then_some(14.00527),
        }
    }

    fn null_summary(loglik: f64) -> FitSummary {
        FitSummary {
            loglik,
            fixed: FixedSummary {
                count: 4,
                tested_indices: vec![],
            },
            blocks: vec![],
            residual_param_count: 1,
            theta: None,
            fim: None,
            fim_is_inverse: None,
            lrt_override: None,
        }
    }

    #[test]
    fn case1_fitted_end_to_end() {
        let m1 = orthodont_inputs(&[Term::Intercept, Term::Column("age".into())], &[2]);
        let m0 = orthodont_inputs(&[Term::Intercept], &[1]);
        let r = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap();
        assert_relative_eq!(r.lrt, 0.8326426, epsilon = 1e-2);
        assert_eq!(r.dims.dfs(), vec![1, 2]);
        let w = r.weights.as_ref().unwrap();
        assert!(w.exact);
        assert_eq!(w.weights, vec![0.5, 0.5]);
        let p = r.pvalues.from_weights.unwrap();
        assert_relative_eq!(p, 0.5104889, epsilon = 5e-3);
        // exact two-component mixture: bounds collapse onto the p-value
        assert_relative_eq!(p, r.pvalues.lower_bound, epsilon = 1e-12);
        assert_relative_eq!(p, r.pvalues.upper_bound, epsilon = 1e-12);
        assert_eq!(r.tested_description, "variance of age");
    }

    #[test]
    fn case3_fitted_bounds() {
        let m1 = orthodont_inputs(&[Term::Intercept, Term::Column("age".into())], &[1, 1]);
        let m0 = orthodont_inputs(&[], &[]);
        let r = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap();
        assert_relative_eq!(r.lrt, 50.13311, epsilon = 1e-2);
        assert_eq!(r.dims.dfs(), vec![0, 1, 2]);
        assert!(r.pvalues.upper_bound < 1e-10);
        assert!(r.pvalues.lower_bound <= r.pvalues.upper_bound);
        assert_eq!(r.tested_description, "variances of (Intercept) and age");
    }

    #[test]
    fn case3_monte_carlo_weights() {
        let m1 = orthodont_inputs(&[Term::Intercept, Term::Column("age".into())], &[1, 1]);
        let m0 = orthodont_inputs(&[], &[]);
        let opts = TestOptions {
            pval_mode: PvalMode::Both,
            m: 5000,
            seed: 7,
            ..TestOptions::default()
        };
        let r = var_comp_test(&m1, &m0, &opts).unwrap();
        let w = r.weights.as_ref().unwrap();
        assert!(!w.exact);
        assert_eq!(w.dfs, vec![0, 1, 2]);
        // middle weight is pinned at 1/2 by the parity constraint
        assert_relative_eq!(w.weights[1], 0.5, epsilon = 1e-9);
        let p = r.pvalues.from_weights.unwrap();
        assert!(p >= r.pvalues.lower_bound - 1e-12 && p <= r.pvalues.upper_bound + 1e-12);
    }

    #[test]
    fn cbpp_summary_reproduces_printed_pvalue() {
        let m1 = TestInput::Summary(cbpp_summary(-92.0, true));
        let m0 = TestInput::Summary(null_summary(-99.0));
        let r = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap();
        assert_relative_eq!(r.lrt, 14.00527, epsilon = 1e-9);
        assert!(r.warnings.iter().any(|w| w.contains("declared test statistic")));
        assert_eq!(r.dims.dfs(), vec![0, 1]);
        let p = r.pvalues.from_weights.unwrap();
        // the reference statistic is rounded to 7 significant digits, which
        // moves this tail probability at the 2e-6 relative level
        assert_relative_eq!(p, 9.114967e-05, max_relative = 1e-5);
        assert_relative_eq!(r.pvalues.lower_bound, p, epsilon = 1e-15);
        assert_relative_eq!(r.pvalues.upper_bound, p, epsilon = 1e-15);
    }

    fn loblolly_summary() -> FitSummary {
        let block = |tag| BlockSummary {
            size: 1,
            test: tag,
            t: None,
            s: None,
        };
        FitSummary {
            loglik: -238.0,
            fixed: FixedSummary {
                count: 3,
                tested_indices: vec![],
            },
            blocks: vec![
                block(BlockTestTag::Untested),
                block(BlockTestTag::Full),
                block(BlockTestTag::Full),
            ],
            residual_param_count: 1,
            theta: None,
            fim: None,
            fim_is_inverse: None,
            lrt_override: Some(2.519869),
        }
    }

    #[test]
    fn loblolly_summary_reproduces_printed_bounds() {
        let m1 = TestInput::Summary(loblolly_summary());
        let m0 = TestInput::Summary(FitSummary {
            blocks: vec![BlockSummary {
                size: 1,
                test: BlockTestTag::Untested,
                t: None,
                s: None,
            }],
            fixed: FixedSummary {
                count: 3,
                tested_indices: vec![],
            },
            ..null_summary(-239.2599345)
        });
        let r = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap();
        assert_eq!(r.dims.dfs(), vec![0, 1, 2]);
        assert_relative_eq!(r.pvalues.lower_bound, 0.05620995, max_relative = 1e-6);
        assert_relative_eq!(r.pvalues.upper_bound, 0.1980462, max_relative = 1e-6);
    }

    #[test]
    fn mixed_input_kinds_rejected() {
        let m1 = orthodont_inputs(&[Term::Intercept], &[1]);
        let m0 = TestInput::Summary(null_summary(-99.0));
        let err = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn model_against_itself_rejected() {
        let m1 = orthodont_inputs(&[Term::Intercept], &[1]);
        let err = var_comp_test(&m1, &m1.clone(), &TestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotNested(_)));
    }

    #[test]
    fn negative_lrt_beyond_tolerance_errors() {
        let m1 = TestInput::Summary(cbpp_summary(-100.0, false));
        let m0 = TestInput::Summary(null_summary(-99.0));
        let err = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Eval(_)));
    }

    #[test]
    fn tiny_negative_lrt_clamped_with_warning() {
        let m1 = TestInput::Summary(cbpp_summary(-99.0 - 2.5e-7, false));
        let m0 = TestInput::Summary(null_summary(-99.0));
        let r = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap();
        assert_eq!(r.lrt, 0.0);
        assert!(r.warnings.iter().any(|w| w.contains("clamped")));
    }

    #[test]
    fn pvalues_monotone_in_lrt() {
        let mut prev: Option<(f64, f64, f64)> = None;
        for lrt in [0.1, 0.5, 1.0, 2.0, 5.0, 14.0] {
            let mut s = cbpp_summary(-92.0, false);
            s.lrt_override = Some(lrt);
            let m1 = TestInput::Summary(s);
            let m0 = TestInput::Summary(null_summary(-99.0));
            let r = var_comp_test(&m1, &m0, &TestOptions::default()).unwrap();
            let cur = (
                r.pvalues.from_weights.unwrap(),
                r.pvalues.lower_bound,
                r.pvalues.upper_bound,
            );
            if let Some(p) = prev {
                assert!(cur.0 <= p.0 && cur.1 <= p.1 && cur.2 <= p.2);
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn determinism_across_runs_and_workers() {
        let m1 = TestInput::Summary(FitSummary {
            fim: Some(vec![
                vec![1.0, 0.2, 0.0],
                vec![0.2, 1.5, 0.1],
                vec![0.0, 0.1, 0.9],
            ]),
            ..{
                // two tested size-1 blocks, one fixed effect: q = 3
                FitSummary {
                    loglik: -10.0,
                    fixed: FixedSummary {
                        count: 0,
                        tested_indices: vec![],
                    },
                    blocks: vec![
                        BlockSummary {
                            size: 1,
                            test: BlockTestTag::Full,
                            t: None,
                            s: None,
                        },
                        BlockSummary {
                            size: 1,
                            test: BlockTestTag::Full,
                            t: None,
                            s: None,
                        },
                    ],
                    residual_param_count: 1,
                    theta: None,
                    fim: None,
                    fim_is_inverse: None,
                    lrt_override: None,
                }
            }
        });
        let m0 = TestInput::Summary(FitSummary {
            loglik: -11.3,
            fixed: FixedSummary {
                count: 0,
                tested_indices: vec![],
            },
            blocks: vec![],
            residual_param_count: 1,
            theta: None,
            fim: None,
            fim_is_inverse: None,
            lrt_override: None,
        });
        let opts = |workers| TestOptions {
            pval_mode: PvalMode::Both,
            seed: 42,
            workers,
            ..TestOptions::default()
        };
        let a = var_comp_test(&m1, &m0, &opts(1)).unwrap();
        let b = var_comp_test(&m1, &m0, &opts(1)).unwrap();
        let c = var_comp_test(&m1, &m0, &opts(4)).unwrap();
        let key = |r: &TestResult| {
            (
                r.lrt,
                r.weights.as_ref().unwrap().weights.clone(),
                r.pvalues.from_weights,
                r.pvalues.from_sample,
            )
        };
        assert_eq!(key(&a), key(&b));
        assert_eq!(key(&a), key(&c));
    }

    #[test]
    fn parse_fit_summary_files() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            r#"{{
  "loglik": -92.0,
  "fixed": {{"count": 4, "tested_indices": []}},
  "blocks": [{{"size": 1, "test": "full"}}],
  "residual_param_count": 1,
  "lrt_override": 14.00527
}}"#
        )
        .unwrap();
        let s = parse_fit_summary(f.path()).unwrap();
        assert_eq!(s.q(), 6);
        assert_eq!(s.lrt_override, Some(14.00527));

        // unknown field rejected
        let mut g = tempfile::NamedTempFile::new().unwrap();
        write!(
            g,
            r#"{{"loglik": 0, "fixed": {{"count": 1}}, "blocks": [], "residual_param_count": 1, "surprise": 1}}"#
        )
        .unwrap();
        assert!(matches!(parse_fit_summary(g.path()), Err(Error::Parse(_))));

        // fim dimension mismatch
        let mut h = tempfile::NamedTempFile::new().unwrap();
        write!(
            h,
            r#"{{
  "loglik": 0.0,
  "fixed": {{"count": 4}},
  "blocks": [{{"size": 1, "test": "full"}}],
  "residual_param_count": 1,
  "fim": [[1.0]]
}}"#
        )
        .unwrap();
        assert!(matches!(parse_fit_summary(h.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn coverage_smoke_run() {
        let cfg = CoverageConfig {
            beta: vec![5.0, 7.0],
            gamma: [[0.64, 0.4], [0.4, 1.0]],
            sigma2: 1.44,
            n_individuals: 20,
            timepoints: (1..=5).map(|t| t as f64).collect(),
            r: 2,
            b: 10,
            fim_modes: vec![CoverageFimMode::Extract, CoverageFimMode::Bootstrap],
            seed: 3,
            workers: 2,
        };
        let res = run_coverage_study(&cfg).unwrap();
        assert_eq!(res.param_names.len(), 6);
        assert_eq!(res.modes.len(), 2);
        for row in &res.modes {
            assert_eq!(row.coverage.len(), 6);
            for &c in &row.coverage {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn coverage_rejects_degenerate_noise() {
        let cfg = CoverageConfig {
            beta: vec![5.0, 7.0],
            gamma: [[0.64, 0.4], [0.4, 1.0]],
            sigma2: 0.0,
            n_individuals: 10,
            timepoints: vec![1.0, 2.0],
            r: 2,
            b: 10,
            fim_modes: vec![CoverageFimMode::Extract],
            seed: 3,
            workers: 1,
        };
        assert!(matches!(run_coverage_study(&cfg), Err(Error::Validation(_))));
    }
}
