//! Grayscale image metrics and small generative models built on structural
//! similarity: block-wise SSIM distances, distance-derived kernels, maximum
//! mean discrepancy two-sample tests, a reverse-mode autodiff tape, and
//! MLP-based generative training loops (moment matching, VAE, adversarial).

pub mod autodiff;
pub mod imgio;
pub mod kernels;
pub mod mat;
pub mod mmd;
pub mod models;
pub mod ssim;
