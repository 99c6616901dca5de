//! Structured-covariance Gaussian kernels and class-conditional mixtures.
//!
//! A kernel's covariance has eigenvalue `sigma_d2` on the `q + 1` dimensional
//! span of `[U, x_tilde]` and `sigma_o2` on its orthogonal complement. The
//! complement is never formed: its energy is the residual `‖d‖² - e_d`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::distortion::DistortionBasis;
use crate::error::{Error, Result};

/// The two global variances of every kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceParams {
    sigma_d2: f64,
    sigma_o2: f64,
}

impl VarianceParams {
    pub fn new(sigma_d2: f64, sigma_o2: f64) -> Result<Self> {
        if !(sigma_d2 > 0.0 && sigma_d2.is_finite() && sigma_o2 > 0.0 && sigma_o2.is_finite()) {
            return Err(Error::Config(format!(
                "variances must be positive and finite (sigma_d2 = {sigma_d2}, sigma_o2 = {sigma_o2})"
            )));
        }
        Ok(Self { sigma_d2, sigma_o2 })
    }

    /// Both variances equal: the isotropic Gaussian.
    pub fn isotropic(sigma2: f64) -> Result<Self> {
        Self::new(sigma2, sigma2)
    }

    pub fn sigma_d2(&self) -> f64 {
        self.sigma_d2
    }

    pub fn sigma_o2(&self) -> f64 {
        self.sigma_o2
    }

    /// `sigma_d2 / sigma_o2`.
    pub fn ratio(&self) -> f64 {
        self.sigma_d2 / self.sigma_o2
    }
}

/// Squared norms of a displacement split between the explained subspace
/// (distortion plus amplitude) and the orthogonal remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySplit {
    pub explained: f64,
    /// Residual before clamping; may be slightly negative from rounding.
    pub orthogonal_raw: f64,
    pub total: f64,
}

impl EnergySplit {
    pub fn orthogonal(&self) -> f64 {
        self.orthogonal_raw.max(0.0)
    }
}

pub fn energy_split(x: &[f64], basis: &DistortionBasis) -> Result<EnergySplit> {
    let dim = basis.dimension();
    if x.len() != dim {
        return Err(Error::Shape {
            expected: dim,
            got: x.len(),
        });
    }
    let d = DVector::from_iterator(dim, x.iter().zip(basis.center().iter()).map(|(a, b)| a - b));
    let total = d.norm_squared();
    let along_u: f64 = basis.u().tr_mul(&d).norm_squared();
    let along_x = basis.x_tilde().dot(&d);
    let explained = along_u + along_x * along_x;
    Ok(EnergySplit {
        explained,
        orthogonal_raw: total - explained,
        total,
    })
}

/// `ln |R| + N² ln 2π` for a kernel of subspace dimension `q`.
fn log_normalizer(dim: usize, q: usize, v: &VarianceParams) -> f64 {
    let explained = (q + 1) as f64;
    let orthogonal = dim as f64 - explained;
    explained * v.sigma_d2.ln() + orthogonal * v.sigma_o2.ln() + dim as f64 * (2.0 * PI).ln()
}

/// Log-density of `x` under the kernel described by `basis`.
pub fn log_kernel_density(x: &[f64], basis: &DistortionBasis, v: &VarianceParams) -> Result<f64> {
    let e = energy_split(x, basis)?;
    Ok(-0.5
        * (e.explained / v.sigma_d2
            + e.orthogonal() / v.sigma_o2
            + log_normalizer(basis.dimension(), basis.q(), v)))
}

/// The full `N² × N²` covariance
/// `sigma_d2 (UUᵀ + x̃x̃ᵀ) + sigma_o2 (I - UUᵀ - x̃x̃ᵀ)`.
/// Only meant for small images in tests and diagnostics.
pub fn dense_covariance_oracle(basis: &DistortionBasis, v: &VarianceParams) -> DMatrix<f64> {
    let dim = basis.dimension();
    let u = basis.u();
    let xt = basis.x_tilde();
    let explained = u * u.transpose() + xt * xt.transpose();
    let orthogonal = DMatrix::<f64>::identity(dim, dim) - &explained;
    explained * v.sigma_d2 + orthogonal * v.sigma_o2
}

/// One mixture component of a class model.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    /// Index of the center within the class's training samples.
    pub sample_id: usize,
    pub basis: DistortionBasis,
    pub weight: f64,
}

/// Kernel mixture for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    class_index: usize,
    kernels: Vec<Kernel>,
    variances: VarianceParams,
    dimension: usize,
}

impl ClassModel {
    /// Checks weights (nonnegative, summing to 1 within 1e-9) and that every
    /// basis shares one `q` and dimension.
    pub fn new(class_index: usize, kernels: Vec<Kernel>, variances: VarianceParams) -> Result<Self> {
        let first = kernels
            .first()
            .ok_or_else(|| Error::Model(format!("class {class_index} has no kernels")))?;
        let (dimension, q) = (first.basis.dimension(), first.basis.q());
        for (k, kernel) in kernels.iter().enumerate() {
            if kernel.basis.dimension() != dimension || kernel.basis.q() != q {
                return Err(Error::Model(format!(
                    "class {class_index} kernel {k}: basis {}x{} differs from {dimension}x{q}",
                    kernel.basis.dimension(),
                    kernel.basis.q()
                )));
            }
            if !(kernel.weight >= 0.0 && kernel.weight.is_finite()) {
                return Err(Error::Model(format!(
                    "class {class_index} kernel {k}: invalid weight {}",
                    kernel.weight
                )));
            }
        }
        let total: f64 = kernels.iter().map(|k| k.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Model(format!(
                "class {class_index}: kernel weights sum to {total}"
            )));
        }
        Ok(Self {
            class_index,
            kernels,
            variances,
            dimension,
        })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn variances(&self) -> &VarianceParams {
        &self.variances
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn subspace_dim(&self) -> usize {
        self.kernels[0].basis.q()
    }

    /// Same kernels and weights under different variances.
    pub fn with_variances(&self, variances: VarianceParams) -> Self {
        Self {
            variances,
            ..self.clone()
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.weight).collect()
    }
}

/// Max-shifted `ln Σ exp(terms)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(terms: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.into_iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `ln Σ_k w_k p_k(x)` over kernels with positive weight.
pub fn log_mixture(x: &[f64], model: &ClassModel) -> Result<f64> {
    let mut terms = Vec::with_capacity(model.kernels.len());
    for kernel in model.kernels.iter().filter(|k| k.weight > 0.0) {
        terms.push(kernel.weight.ln() + log_kernel_density(x, &kernel.basis, &model.variances)?);
    }
    if terms.is_empty() {
        return Err(Error::Model(format!(
            "class {} has no kernel with positive weight",
            model.class_index
        )));
    }
    Ok(log_sum_exp(terms.iter().copied()))
}
