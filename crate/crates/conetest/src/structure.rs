//! Which parameters a test touches, nestedness checking, and the dimension
//! bookkeeping of the limiting chi-bar-square mixture.
//!
//! The canonical parameter flattening used throughout is: fixed effects
//! first, then for each covariance block its lower-triangular half in
//! column-major order, then the residual parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block sizes of the block-diagonal random-effect covariance matrix.
/// Every block is full: all within-block covariances are free parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovarianceLayout {
    pub blocks: Vec<usize>,
}

impl CovarianceLayout {
    pub fn new(blocks: Vec<usize>) -> Result<Self> {
        if blocks.iter().any(|&r| r == 0) {
            return Err(Error::Validation("covariance block of size 0".into()));
        }
        Ok(CovarianceLayout { blocks })
    }

    /// total number of random effects
    pub fn p(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// number of free covariance parameters
    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|&r| r * (r + 1) / 2).sum()
    }
}

/// How a single covariance block is tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockTestKind {
    Untested,
    /// `t` covariances set to zero while keeping all variances. When the
    /// null splits the block into sub-blocks, `parts` holds their sizes and
    /// pins down exactly which covariance coordinates are tested; without
    /// `parts` the trailing `t` off-diagonal coordinates are assumed.
    CovariancesOnly { t: usize, parts: Option<Vec<usize>> },
    /// the whole block is zero under the null
    Full,
    /// the trailing s x s diagonal sub-block (and its cross covariances)
    /// are zero under the null
    SubBlock { s: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTest {
    pub block_index: usize,
    pub kind: BlockTestKind,
}

/// Full description of a nested-model test: which fixed effects and which
/// covariance parameters are null under H0, relative to the H1 layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStructure {
    /// fixed-effect count of the alternative model
    pub b: usize,
    /// indices (into 0..b) of fixed effects tested equal to zero
    pub tested_fixed: Vec<usize>,
    pub layout: CovarianceLayout,
    pub block_tests: Vec<BlockTest>,
    pub residual_param_count: usize,
}

/// Dimension summary of the limiting mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConeDims {
    /// total parameter dimension
    pub q: usize,
    /// untested parameter count (size of the zero factor)
    pub a: usize,
    /// dimension of the largest linear subspace inside the cone
    pub d1: usize,
    /// largest degree of freedom in the mixture (= q - a)
    pub df_max: usize,
    /// number of mixture components (df_max - d1 + 1)
    pub n_weights: usize,
}

impl ConeDims {
    /// degrees of freedom d1..=df_max
    pub fn dfs(&self) -> Vec<usize> {
        (self.d1..=self.df_max).collect()
    }
}

/// Coordinate index maps into the canonical parameter flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSets {
    pub zero: Vec<usize>,
    pub linear: Vec<usize>,
    pub half_lines: Vec<usize>,
    pub psd: Vec<PsdFactorDesc>,
}

/// A tested sub-block of size >= 2 kept positive semidefinite in the cone.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactorDesc {
    pub size: usize,
    /// offsets of the size*(size+1)/2 half-vectorized entries (column-major
    /// lower triangle)
    pub entry_offsets: Vec<usize>,
    /// offsets of the paired free rectangle (cross covariances with the
    /// untested part of the block); these also appear in `linear`
    pub rectangle_offsets: Vec<usize>,
}

/// Offset of entry (i, j), i >= j, inside the column-major lower-triangular
/// half-vectorization of an r x r symmetric matrix.
pub fn halfvec_offset(r: usize, i: usize, j: usize) -> usize {
    debug_assert!(j <= i && i < r);
    (0..j).map(|c| r - c).sum::<usize>() + (i - j)
}

impl TestStructure {
    pub fn validate(&self) -> Result<()> {
        if self.block_tests.len() != self.layout.blocks.len() {
            return Err(Error::Validation(
                "block test count does not match layout".into(),
            ));
        }
        if self.residual_param_count == 0 {
            return Err(Error::Validation(
                "residual_param_count must be positive".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &self.tested_fixed {
            if i >= self.b {
                return Err(Error::Validation(format!(
                    "tested fixed-effect index {i} out of range (b = {})",
                    self.b
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Validation(
                    "duplicate tested fixed-effect index".into(),
                ));
            }
        }
        let mut anything_tested = !self.tested_fixed.is_empty();
        for bt in &self.block_tests {
            let r = self.layout.blocks[bt.block_index];
            match &bt.kind {
                BlockTestKind::Untested => {}
                BlockTestKind::CovariancesOnly { t, parts } => {
                    let max_t = r * (r - 1) / 2;
                    if *t < 1 || *t > max_t {
                        return Err(Error::Validation(format!(
                            "block {}: tested covariance count {t} outside 1..={max_t}",
                            bt.block_index
                        )));
                    }
                    if let Some(parts) = parts {
                        if parts.iter().sum::<usize>() != r || parts.iter().any(|&p| p == 0) {
                            return Err(Error::Validation(format!(
                                "block {}: sub-block partition does not sum to {r}",
                                bt.block_index
                            )));
                        }
                        let t_from_parts =
                            max_t - parts.iter().map(|&p| p * (p - 1) / 2).sum::<usize>();
                        if t_from_parts != *t {
                            return Err(Error::Validation(format!(
                                "block {}: partition implies {t_from_parts} tested covariances, got {t}",
                                bt.block_index
                            )));
                        }
                    }
                    anything_tested = true;
                }
                BlockTestKind::Full => anything_tested = true,
                BlockTestKind::SubBlock { s } => {
                    if *s < 1 || *s >= r {
                        return Err(Error::Validation(format!(
                            "block {}: sub-block size {s} outside 1..{r}",
                            bt.block_index
                        )));
                    }
                    anything_tested = true;
                }
            }
        }
        if !anything_tested {
            return Err(Error::NotNested("nothing is tested".into()));
        }
        Ok(())
    }

    /// Offset of the first half-vectorized entry of block `k`.
    fn block_offset(&self, k: usize) -> usize {
        self.b
            + self.layout.blocks[..k]
                .iter()
                .map(|&r| r * (r + 1) / 2)
                .sum::<usize>()
    }

    pub fn cone_dims(&self) -> ConeDims {
        let q = self.b + self.layout.n_params() + self.residual_param_count;
        let mut tested = self.tested_fixed.len();
        let mut d1 = self.tested_fixed.len();
        for bt in &self.block_tests {
            let r = self.layout.blocks[bt.block_index];
            match &bt.kind {
                BlockTestKind::Untested => {}
                BlockTestKind::CovariancesOnly { t, .. } => {
                    tested += t;
                    d1 += t;
                }
                BlockTestKind::Full => tested += r * (r + 1) / 2,
                BlockTestKind::SubBlock { s } => {
                    tested += s * (s + 1) / 2 + s * (r - s);
                    d1 += s * (r - s);
                }
            }
        }
        ConeDims {
            q,
            a: q - tested,
            d1,
            df_max: tested,
            n_weights: tested - d1 + 1,
        }
    }

    /// Partition all q coordinates into zero / linear / half-line / PSD sets.
    pub fn tested_index_sets(&self) -> IndexSets {
        let mut zero = Vec::new();
        let mut linear = Vec::new();
        let mut half_lines = Vec::new();
        let mut psd = Vec::new();

        for i in 0..self.b {
            if self.tested_fixed.contains(&i) {
                linear.push(i);
            } else {
                zero.push(i);
            }
        }

        for bt in &self.block_tests {
            let k = bt.block_index;
            let r = self.layout.blocks[k];
            let base = self.block_offset(k);
            let coord = |i: usize, j: usize| base + halfvec_offset(r, i, j);
            match &bt.kind {
                BlockTestKind::Untested => {
                    for j in 0..r {
                        for i in j..r {
                            zero.push(coord(i, j));
                        }
                    }
                }
                BlockTestKind::CovariancesOnly { t, parts } => {
                    let tested_pairs: Vec<(usize, usize)> = match parts {
                        Some(parts) => {
                            // part index of each coordinate within the block
                            let mut part_of = Vec::with_capacity(r);
                            for (pi, &p) in parts.iter().enumerate() {
                                part_of.extend(std::iter::repeat(pi).take(p));
                            }
                            let mut pairs = Vec::new();
                            for j in 0..r {
                                for i in (j + 1)..r {
                                    if part_of[i] != part_of[j] {
                                        pairs.push((i, j));
                                    }
                                }
                            }
                            pairs
                        }
                        None => {
                            // trailing t off-diagonal coordinates in canonical order
                            let mut offdiag = Vec::new();
                            for j in 0..r {
                                for i in (j + 1)..r {
                                    offdiag.push((i, j));
                                }
                            }
                            offdiag.sort_by_key(|&(i, j)| halfvec_offset(r, i, j));
                            offdiag.split_off(offdiag.len() - t)
                        }
                    };
                    for j in 0..r {
                        for i in j..r {
                            if tested_pairs.contains(&(i, j)) {
                                linear.push(coord(i, j));
                            } else {
                                zero.push(coord(i, j));
                            }
                        }
                    }
                }
                BlockTestKind::Full => {
                    if r == 1 {
                        half_lines.push(coord(0, 0));
                    } else {
                        let mut entry_offsets = Vec::new();
                        for j in 0..r {
                            for i in j..r {
                                entry_offsets.push(coord(i, j));
                            }
                        }
                        psd.push(PsdFactorDesc {
                            size: r,
                            entry_offsets,
                            rectangle_offsets: Vec::new(),
                        });
                    }
                }
                BlockTestKind::SubBlock { s } => {
                    let keep = r - s;
                    // untested leading sub-block
                    for j in 0..keep {
                        for i in j..keep {
                            zero.push(coord(i, j));
                        }
                    }
                    // cross covariances: free rectangle
                    let mut rectangle_offsets = Vec::new();
                    for j in 0..keep {
                        for i in keep..r {
                            rectangle_offsets.push(coord(i, j));
                        }
                    }
                    linear.extend(rectangle_offsets.iter().copied());
                    // tested trailing sub-block
                    if *s == 1 {
                        half_lines.push(coord(r - 1, r - 1));
                    } else {
                        let mut entry_offsets = Vec::new();
                        for j in keep..r {
                            for i in j..r {
                                entry_offsets.push(coord(i, j));
                            }
                        }
                        psd.push(PsdFactorDesc {
                            size: *s,
                            entry_offsets,
                            rectangle_offsets,
                        });
                    }
                }
            }
        }

        let q = self.b + self.layout.n_params() + self.residual_param_count;
        for i in (q - self.residual_param_count)..q {
            zero.push(i);
        }

        IndexSets {
            zero,
            linear,
            half_lines,
            psd,
        }
    }
}

/// Structural description of a fitted model's parameter space, used to infer
/// the test between two nested models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStructure {
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub layout: CovarianceLayout,
}

/// Infer the unique [`TestStructure`] mapping the alternative model `m1` to
/// the null model `m0`, matching terms by name.
///
/// Dropped random terms must be trailing within their block; the surviving
/// part of a partially tested block must form a single full block of the
/// null layout.
pub fn infer_test(
    m1: &ModelStructure,
    m0: &ModelStructure,
    residual_param_count: usize,
) -> Result<TestStructure> {
    for t in &m0.fixed_names {
        if !m1.fixed_names.contains(t) {
            return Err(Error::NotNested(format!(
                "null model fixed term '{t}' is absent from the alternative model"
            )));
        }
    }
    let tested_fixed: Vec<usize> = m1
        .fixed_names
        .iter()
        .enumerate()
        .filter(|(_, t)| !m0.fixed_names.contains(t))
        .map(|(i, _)| i)
        .collect();

    if m1.random_names.len() != m1.layout.p() {
        return Err(Error::Validation(
            "alternative model: random term count does not match layout".into(),
        ));
    }
    if m0.random_names.len() != m0.layout.p() {
        return Err(Error::Validation(
            "null model: random term count does not match layout".into(),
        ));
    }
    for t in &m0.random_names {
        if !m1.random_names.contains(t) {
            return Err(Error::NotNested(format!(
                "null model random term '{t}' is absent from the alternative model"
            )));
        }
    }

    // m0 block boundaries over its own random-term list
    let mut m0_block_of = Vec::new();
    for (bi, &p) in m0.layout.blocks.iter().enumerate() {
        m0_block_of.extend(std::iter::repeat(bi).take(p));
    }

    let mut block_tests = Vec::new();
    let mut lo = 0usize;
    let mut m0_cursor = 0usize; // next unconsumed m0 block index
    for (k, &r) in m1.layout.blocks.iter().enumerate() {
        let names = &m1.random_names[lo..lo + r];
        let survives: Vec<bool> = names.iter().map(|t| m0.random_names.contains(t)).collect();
        let n_survive = survives.iter().filter(|&&s| s).count();
        if survives[..n_survive].iter().any(|&s| !s) {
            return Err(Error::NotNested(format!(
                "block {k}: dropped random terms must be trailing within the block"
            )));
        }
        let kind = if n_survive == 0 {
            BlockTestKind::Full
        } else {
            // m0 positions of the survivors, must be contiguous and in order
            let positions: Vec<usize> = names[..n_survive]
                .iter()
                .map(|t| m0.random_names.iter().position(|u| u == t).unwrap())
                .collect();
            for (a, w) in positions.windows(2).enumerate() {
                if w[1] != w[0] + 1 {
                    return Err(Error::NotNested(format!(
                        "block {k}: surviving random terms are reordered or interleaved in the null model (terms '{}', '{}')",
                        names[a], names[a + 1]
                    )));
                }
            }
            let first_block = m0_block_of[positions[0]];
            let last_block = m0_block_of[*positions.last().unwrap()];
            if first_block != m0_cursor {
                return Err(Error::NotNested(format!(
                    "block {k}: null-model block ordering does not follow the alternative model"
                )));
            }
            // surviving terms must cover whole m0 blocks
            let covered: usize = m0.layout.blocks[first_block..=last_block].iter().sum();
            if covered != n_survive {
                return Err(Error::NotNested(format!(
                    "block {k}: surviving random terms straddle a null-model block boundary"
                )));
            }
            m0_cursor = last_block + 1;
            let parts: Vec<usize> = m0.layout.blocks[first_block..=last_block].to_vec();
            if n_survive < r {
                if parts.len() > 1 {
                    return Err(Error::NotNested(format!(
                        "block {k}: combined sub-block and covariance test is not supported"
                    )));
                }
                BlockTestKind::SubBlock { s: r - n_survive }
            } else if parts.len() == 1 {
                BlockTestKind::Untested
            } else {
                let t = r * (r - 1) / 2 - parts.iter().map(|&p| p * (p - 1) / 2).sum::<usize>();
                BlockTestKind::CovariancesOnly {
                    t,
                    parts: Some(parts),
                }
            }
        };
        block_tests.push(BlockTest {
            block_index: k,
            kind,
        });
        lo += r;
    }
    if m0_cursor != m0.layout.blocks.len() {
        return Err(Error::NotNested(
            "null model has covariance blocks not matched by the alternative model".into(),
        ));
    }

    let ts = TestStructure {
        b: m1.fixed_names.len(),
        tested_fixed,
        layout: m1.layout.clone(),
        block_tests,
        residual_param_count,
    };
    ts.validate()?;
    Ok(ts)
}
