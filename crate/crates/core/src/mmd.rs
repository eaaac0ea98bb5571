//! Squared maximum mean discrepancy estimators over Gram-matrix blocks and a
//! permutation two-sample test.
//!
//! The distance-derived kernel is defined only relative to a sample set, so
//! two-sample statistics always build one pooled Gram over the concatenation
//! X followed by Y and slice the within- and cross-sample blocks out of it.
//! Permutations reuse that fixed pooled Gram and only re-slice it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kernels::{KernelMatrix, Provenance};
use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum MmdError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sample too small: {0}")]
    SampleTooSmall(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

pub type Result<T> = std::result::Result<T, MmdError>;

/// Within- and cross-sample slices of a pooled Gram matrix.
#[derive(Debug, Clone)]
pub struct GramBlocks {
    pub kxx: Mat,
    pub kyy: Mat,
    pub kxy: Mat,
    pub pooled_provenance: Provenance,
}

impl GramBlocks {
    pub fn new(kxx: Mat, kyy: Mat, kxy: Mat, pooled_provenance: Provenance) -> Result<Self> {
        if !kxx.is_square() || !kyy.is_square() {
            return Err(MmdError::DimensionMismatch(format!(
                "within-sample blocks must be square, got {}x{} and {}x{}",
                kxx.rows, kxx.cols, kyy.rows, kyy.cols
            )));
        }
        if kxy.rows != kxx.rows || kxy.cols != kyy.rows {
            return Err(MmdError::DimensionMismatch(format!(
                "cross block is {}x{}, expected {}x{}",
                kxy.rows, kxy.cols, kxx.rows, kyy.rows
            )));
        }
        for (name, m) in [("Kxx", &kxx), ("Kyy", &kyy)] {
            let asym = m.max_asymmetry();
            if asym > 1e-10 {
                return Err(MmdError::InvalidParam(format!(
                    "{name} asymmetric by {asym:.3e}"
                )));
            }
        }
        Ok(GramBlocks { kxx, kyy, kxy, pooled_provenance })
    }

    pub fn n_x(&self) -> usize {
        self.kxx.rows
    }

    pub fn n_y(&self) -> usize {
        self.kyy.rows
    }

    /// Slice blocks out of a pooled Gram over X followed by Y.
    pub fn from_pooled(pooled: &KernelMatrix, n_x: usize, n_y: usize) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(MmdError::SampleTooSmall("both samples must be non-empty".into()));
        }
        if n_x + n_y != pooled.n {
            return Err(MmdError::DimensionMismatch(format!(
                "pooled Gram is {}x{}, but n_x + n_y = {}",
                pooled.n,
                pooled.n,
                n_x + n_y
            )));
        }
        let idx: Vec<usize> = (0..pooled.n).collect();
        Ok(Self::slice(pooled, &idx, n_x, n_y))
    }

    /// Slice blocks assigning the first `n_x` entries of `order` to X and the
    /// rest to Y.
    pub fn from_pooled_order(
        pooled: &KernelMatrix,
        order: &[usize],
        n_x: usize,
        n_y: usize,
    ) -> Result<Self> {
        if order.len() != pooled.n || n_x + n_y != pooled.n {
            return Err(MmdError::DimensionMismatch(format!(
                "order length {} vs pooled size {} with n_x + n_y = {}",
                order.len(),
                pooled.n,
                n_x + n_y
            )));
        }
        Ok(Self::slice(pooled, order, n_x, n_y))
    }

    fn slice(pooled: &KernelMatrix, order: &[usize], n_x: usize, n_y: usize) -> Self {
        let mut kxx = Mat::zeros(n_x, n_x);
        let mut kyy = Mat::zeros(n_y, n_y);
        let mut kxy = Mat::zeros(n_x, n_y);
        for i in 0..n_x {
            for j in 0..n_x {
                kxx.set(i, j, pooled.entries.at(order[i], order[j]));
            }
            for j in 0..n_y {
                kxy.set(i, j, pooled.entries.at(order[i], order[n_x + j]));
            }
        }
        for i in 0..n_y {
            for j in 0..n_y {
                kyy.set(i, j, pooled.entries.at(order[n_x + i], order[n_x + j]));
            }
        }
        GramBlocks { kxx, kyy, kxy, pooled_provenance: pooled.provenance }
    }

    /// The same statistic with the roles of X and Y exchanged.
    pub fn swapped(&self) -> GramBlocks {
        GramBlocks {
            kxx: self.kyy.clone(),
            kyy: self.kxx.clone(),
            kxy: self.kxy.transpose(),
            pooled_provenance: self.pooled_provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdResult {
    pub mmd2: f64,
    pub estimator: Estimator,
    /// True when a raw value in `[-1e-10, 0)` was reported as 0.
    pub clamped: bool,
}

fn mat_sum(m: &Mat) -> f64 {
    m.data.iter().sum()
}

fn mat_trace(m: &Mat) -> f64 {
    (0..m.rows.min(m.cols)).map(|i| m.at(i, i)).sum()
}

/// V-statistic estimate: all pairs, diagonals included,
/// `sum(Kxx)/n_x^2 + sum(Kyy)/n_y^2 - 2 sum(Kxy)/(n_x n_y)`.
/// Nonnegative up to rounding on a positive-semidefinite pooled Gram; tiny
/// negatives clamp to zero.
pub fn mmd2_biased(blocks: &GramBlocks) -> MmdResult {
    let (nx, ny) = (blocks.n_x() as f64, blocks.n_y() as f64);
    let raw = mat_sum(&blocks.kxx) / (nx * nx) + mat_sum(&blocks.kyy) / (ny * ny)
        - 2.0 * mat_sum(&blocks.kxy) / (nx * ny);
    if raw < 0.0 && raw >= -1e-10 {
        MmdResult { mmd2: 0.0, estimator: Estimator::Biased, clamped: true }
    } else {
        MmdResult { mmd2: raw, estimator: Estimator::Biased, clamped: false }
    }
}

/// U-statistic estimate: within-sample diagonals excluded with `n(n-1)`
/// denominators. With equal sample sizes the cross diagonal pairs off too,
/// so two identical samples give exactly zero; with unequal sizes the full
/// cross sum is used. May legitimately be negative.
pub fn mmd2_unbiased(blocks: &GramBlocks) -> Result<MmdResult> {
    let (nx, ny) = (blocks.n_x(), blocks.n_y());
    if nx < 2 || ny < 2 {
        return Err(MmdError::SampleTooSmall(format!(
            "unbiased estimate needs n_x >= 2 and n_y >= 2, got {nx} and {ny}"
        )));
    }
    let (nxf, nyf) = (nx as f64, ny as f64);
    let t_x = (mat_sum(&blocks.kxx) - mat_trace(&blocks.kxx)) / (nxf * (nxf - 1.0));
    let t_y = (mat_sum(&blocks.kyy) - mat_trace(&blocks.kyy)) / (nyf * (nyf - 1.0));
    let t_cross = if nx == ny {
        2.0 * (mat_sum(&blocks.kxy) - mat_trace(&blocks.kxy)) / (nxf * (nxf - 1.0))
    } else {
        2.0 * mat_sum(&blocks.kxy) / (nxf * nyf)
    };
    Ok(MmdResult { mmd2: t_x + t_y - t_cross, estimator: Estimator::Unbiased, clamped: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTestResult {
    pub observed_mmd2: f64,
    /// `(1 + #{permuted >= observed}) / (B + 1)`.
    pub p_value: f64,
    pub permutations: usize,
    pub seed: u64,
}

impl PermutationTestResult {
    /// Report as a CSV header plus one row.
    pub fn to_csv(&self, kernel: &str, n_x: usize, n_y: usize) -> String {
        format!(
            "observed_mmd2,p_value,permutations,seed,kernel,n_x,n_y\n{},{},{},{},{kernel},{n_x},{n_y}\n",
            self.observed_mmd2, self.p_value, self.permutations, self.seed
        )
    }
}

/// Two-sample permutation test on a pooled Gram. The observed statistic is
/// the biased estimate on the (X, Y) split; each of the `b` permutations
/// shuffles the pooled indices with its own substream of `seed` (stream
/// `index + 1`) and re-slices the same Gram. Schedule-independent: every
/// permutation's draw depends only on (seed, index).
pub fn permutation_test(
    pooled: &KernelMatrix,
    n_x: usize,
    n_y: usize,
    b: usize,
    seed: u64,
) -> Result<PermutationTestResult> {
    if b < 19 {
        return Err(MmdError::InvalidParam(format!("need at least 19 permutations, got {b}")));
    }
    let observed = mmd2_biased(&GramBlocks::from_pooled(pooled, n_x, n_y)?).mmd2;
    let exceed = (0..b)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64 + 1);
            let mut order: Vec<usize> = (0..pooled.n).collect();
            order.shuffle(&mut rng);
            let blocks = GramBlocks::slice(pooled, &order, n_x, n_y);
            u64::from(mmd2_biased(&blocks).mmd2 >= observed)
        })
        .sum::<u64>();
    Ok(PermutationTestResult {
        observed_mmd2: observed,
        p_value: (1.0 + exceed as f64) / (b as f64 + 1.0),
        permutations: b,
        seed,
    })
}
