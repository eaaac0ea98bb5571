//! Pairwise distance matrices over datasets, the double-centered kernel built
//! from them, an RBF baseline, a dense symmetric eigensolver, and
//! positive-semidefinite diagnostics and repair.

use rayon::prelude::*;
use thiserror::Error;

use crate::imgio::Dataset;
use crate::mat::Mat;
use crate::ssim::{distance_map, DistMode, SsimError};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Ssim(#[from] SsimError),
    #[error("matrix not symmetric: max |m_ij - m_ji| = {0:.3e}")]
    NotSymmetric(f64),
    #[error("eigensolver did not converge in {sweeps} sweeps (off-diagonal {offdiag:.3e})")]
    NoConvergence { sweeps: usize, offdiag: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Symmetric pairwise distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub entries: Mat,
    pub mode: DistMode,
    pub window: usize,
    pub stride: usize,
}

impl DistanceMatrix {
    /// Validate symmetry (1e-12), zero diagonal, and nonnegativity, then
    /// normalize to exact symmetry.
    pub fn new(entries: Mat, mode: DistMode, window: usize, stride: usize) -> Result<Self> {
        if !entries.is_square() {
            return Err(KernelError::InvalidParam(format!(
                "distance matrix must be square, got {}x{}",
                entries.rows, entries.cols
            )));
        }
        let asym = entries.max_asymmetry();
        if asym > 1e-12 {
            return Err(KernelError::NotSymmetric(asym));
        }
        let n = entries.rows;
        for i in 0..n {
            if entries.at(i, i).abs() > 1e-12 {
                return Err(KernelError::InvalidParam(format!(
                    "nonzero diagonal entry {} at ({i},{i})",
                    entries.at(i, i)
                )));
            }
            for j in 0..n {
                if entries.at(i, j) < 0.0 && (i != j || entries.at(i, j) < -1e-12) {
                    return Err(KernelError::InvalidParam(format!(
                        "negative distance {} at ({i},{j})",
                        entries.at(i, j)
                    )));
                }
            }
        }
        let mut entries = entries;
        for i in 0..n {
            entries.set(i, i, 0.0);
        }
        entries.symmetrize_upper();
        Ok(DistanceMatrix { n, entries, mode, window, stride })
    }

    /// Same matrix with every entry squared.
    pub fn squared(&self) -> DistanceMatrix {
        let mut entries = self.entries.clone();
        entries.data.iter_mut().for_each(|v| *v = *v * *v);
        DistanceMatrix {
            n: self.n,
            entries,
            mode: self.mode,
            window: self.window,
            stride: self.stride,
        }
    }

    pub fn from_csv(text: &str, mode: DistMode, window: usize, stride: usize) -> Result<Self> {
        let entries = Mat::from_csv(text)
            .ok_or_else(|| KernelError::InvalidParam("unparseable distance CSV".into()))?;
        DistanceMatrix::new(entries, mode, window, stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Ssim,
    Rbf,
}

/// Symmetric kernel (Gram) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub n: usize,
    pub entries: Mat,
    pub provenance: Provenance,
    pub psd_fixed: bool,
}

impl KernelMatrix {
    pub fn new(entries: Mat, provenance: Provenance, psd_fixed: bool) -> Result<Self> {
        if !entries.is_square() {
            return Err(KernelError::InvalidParam(format!(
                "kernel matrix must be square, got {}x{}",
                entries.rows, entries.cols
            )));
        }
        let asym = entries.max_asymmetry();
        if asym > 1e-10 {
            return Err(KernelError::NotSymmetric(asym));
        }
        let mut entries = entries;
        entries.symmetrize_upper();
        Ok(KernelMatrix { n: entries.rows, entries, provenance, psd_fixed })
    }

    pub fn from_csv(text: &str, provenance: Provenance, psd_fixed: bool) -> Result<Self> {
        let entries = Mat::from_csv(text)
            .ok_or_else(|| KernelError::InvalidParam("unparseable kernel CSV".into()))?;
        KernelMatrix::new(entries, provenance, psd_fixed)
    }

    /// Largest absolute row sum; near zero for double-centered kernels.
    pub fn max_abs_row_sum(&self) -> f64 {
        (0..self.n)
            .map(|i| self.entries.row(i).iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

/// Eigenvalues sorted descending, plus any spectral mass removed by
/// [`psd_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub clipped_mass: f64,
}

impl Spectrum {
    /// One eigenvalue per line, then a `# clipped_mass=` footer comment.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for v in &self.eigenvalues {
            let _ = writeln!(out, "{v}");
        }
        let _ = writeln!(out, "# clipped_mass={}", self.clipped_mass);
        out
    }
}

/// Distance between every unordered pair of images: the Frobenius norm of
/// their patchwise distance map. Pairs are evaluated in parallel and mirrored,
/// so the result is exactly symmetric with an exactly zero diagonal.
pub fn pairwise_distance_matrix(
    data: &Dataset,
    window: usize,
    stride: usize,
    mode: DistMode,
) -> Result<DistanceMatrix> {
    let n = data.len();
    if n < 2 {
        return Err(KernelError::InvalidParam(format!("need at least 2 images, got {n}")));
    }
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| {
            let map = distance_map(&data.images[i], &data.images[j], window, stride, mode)?;
            Ok(map.frobenius())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut entries = Mat::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        entries.set(i, j, v);
        entries.set(j, i, v);
    }
    Ok(DistanceMatrix { n, entries, mode, window, stride })
}

/// `K = -1/2 H D H` with `H = I - (1/n) 11^T`. Rows and columns of the result
/// sum to zero: H sends the constant vector to zero.
pub fn double_center(d: &DistanceMatrix) -> KernelMatrix {
    let n = d.n;
    let nf = n as f64;
    let row_means: Vec<f64> =
        (0..n).map(|i| d.entries.row(i).iter().sum::<f64>() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut entries = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = -0.5 * (d.entries.at(i, j) - row_means[i] - row_means[j] + grand);
            entries.set(i, j, v);
        }
    }
    entries.symmetrize_upper();
    KernelMatrix { n, entries, provenance: Provenance::Ssim, psd_fixed: false }
}

/// Gaussian kernel `exp(-gamma |x_i - x_j|^2)` over row vectors.
pub fn rbf_kernel(rows: &[Vec<f64>], gamma: f64) -> Result<KernelMatrix> {
    if !(gamma > 0.0) {
        return Err(KernelError::InvalidParam(format!("gamma must be positive, got {gamma}")));
    }
    let n = rows.len();
    if n < 2 {
        return Err(KernelError::InvalidParam(format!("need at least 2 vectors, got {n}")));
    }
    let dim = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
        return Err(KernelError::InvalidParam(format!(
            "vector {i} has length {}, expected {dim}",
            r.len()
        )));
    }
    let mut entries = Mat::zeros(n, n);
    for i in 0..n {
        entries.set(i, i, 1.0);
        for j in (i + 1)..n {
            let d2: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            entries.set(i, j, (-gamma * d2).exp());
        }
    }
    entries.symmetrize_upper();
    Ok(KernelMatrix { n, entries, provenance: Provenance::Rbf, psd_fixed: false })
}

/// [`rbf_kernel`] on flattened image pixels.
pub fn rbf_kernel_images(data: &Dataset, gamma: f64) -> Result<KernelMatrix> {
    let rows: Vec<Vec<f64>> = data.images.iter().map(|im| im.pixels.clone()).collect();
    rbf_kernel(&rows, gamma)
}

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors-as-columns), unsorted.
pub fn jacobi_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = m.rows;
    let mut a = m.clone();
    a.symmetrize_upper();
    let mut v = Mat::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let max_offdiag = |a: &Mat| -> f64 {
        let mut worst = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                worst = worst.max(a.at(p, q).abs());
            }
        }
        worst
    };
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if max_offdiag(&a) < JACOBI_TOL {
            let eigenvalues = (0..n).map(|i| a.at(i, i)).collect();
            return Ok((eigenvalues, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let (app, aqq) = (a.at(p, p), a.at(q, q));
                a.set(p, p, c * c * app - 2.0 * s * c * apq + s * s * aqq);
                a.set(q, q, s * s * app + 2.0 * s * c * apq + c * c * aqq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a.at(k, p);
                        let akq = a.at(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(p, k, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                        a.set(q, k, s * akp + c * akq);
                    }
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(KernelError::NoConvergence { sweeps: JACOBI_MAX_SWEEPS, offdiag: max_offdiag(&a) })
}

/// Eigenvalues of a kernel matrix, sorted descending.
pub fn eigen_sym(k: &KernelMatrix) -> Result<Spectrum> {
    let asym = k.entries.max_asymmetry();
    if asym > 1e-10 {
        return Err(KernelError::NotSymmetric(asym));
    }
    let (mut eigenvalues, _) = jacobi_eigen(&k.entries)?;
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(Spectrum { eigenvalues, clipped_mass: 0.0 })
}

/// Clip negative eigenvalues to zero and reconstruct. Returns the repaired
/// kernel and its (clipped) spectrum with the removed mass recorded.
pub fn psd_project(k: &KernelMatrix) -> Result<(KernelMatrix, Spectrum)> {
    let asym = k.entries.max_asymmetry();
    if asym > 1e-10 {
        return Err(KernelError::NotSymmetric(asym));
    }
    let (eigenvalues, q) = jacobi_eigen(&k.entries)?;
    let clipped_mass: f64 = eigenvalues.iter().filter(|&&l| l < 0.0).map(|l| l.abs()).sum();
    let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let n = k.n;
    // Q diag(clipped) Q^T, upper triangle then mirror.
    let mut entries = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (m, &lam) in clipped.iter().enumerate() {
                if lam != 0.0 {
                    acc += lam * q.at(i, m) * q.at(j, m);
                }
            }
            entries.set(i, j, acc);
        }
    }
    entries.symmetrize_upper();
    let mut sorted = clipped;
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok((
        KernelMatrix { n, entries, provenance: k.provenance, psd_fixed: true },
        Spectrum { eigenvalues: sorted, clipped_mass },
    ))
}
