//! Axis-aligned Normal densities and latent-space diagnostics.
//!
//! The diagnostics consume *variances* (the diagonal of the covariance of an
//! axis-aligned Normal), not standard deviations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Range that emitted `log_std` values are clamped to.
pub const LOG_STD_MIN: f64 = -8.0;
pub const LOG_STD_MAX: f64 = 4.0;

/// `N(mean, diag(exp(log_std)^2))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != log_std.len() {
            return Err(Error::invalid(format!(
                "gaussian needs equal non-zero lengths, got mean {} and log_std {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian parameters must be finite"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| (2.0 * s).exp()).collect()
    }

    /// Reparameterized draw `mean + std ⊙ noise` for standard-Normal `noise`.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::invalid(format!(
                "noise length {} does not match dimension {}",
                noise.len(),
                self.dim()
            )));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::invalid("point dimension mismatch"));
        }
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(z)
            .map(|((m, s), x)| {
                let u = (x - m) / s.exp();
                -0.5 * u * u - s - half_ln_2pi
            })
            .sum())
    }
}

/// Closed-form `KL[q || p]` between axis-aligned Normals.
pub fn kl_divergence(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::invalid(format!(
            "kl between dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let ratio = (2.0 * (q.log_std[i] - p.log_std[i])).exp();
        let dm = p.mean[i] - q.mean[i];
        let shift = dm * dm * (-2.0 * p.log_std[i]).exp();
        total += ratio + shift - 1.0 + 2.0 * (p.log_std[i] - q.log_std[i]);
    }
    Ok((0.5 * total).max(0.0))
}

fn check_spectrum(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("empty variance vector"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("variances must be finite and non-negative"));
    }
    let l1: f64 = values.iter().sum();
    if l1 == 0.0 {
        return Err(Error::invalid("all-zero variance vector"));
    }
    Ok(l1)
}

/// Gini sparsity index of a non-negative vector.
///
/// 0 for a constant vector, `1 - 1/d` for a one-hot vector.
pub fn gini_index(variances: &[f64]) -> Result<f64> {
    let l1 = check_spectrum(variances)?;
    let mut sorted = variances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let d = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let k = (i + 1) as f64;
            v / l1 * ((d - k + 0.5) / d)
        })
        .sum();
    Ok(1.0 - 2.0 * weighted)
}

/// Entropy-based effective rank `exp(H(p))` with `p = v / ||v||_1`.
pub fn effective_rank(variances: &[f64]) -> Result<f64> {
    let l1 = check_spectrum(variances)?;
    let entropy: f64 = variances
        .iter()
        .map(|v| v / l1)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// Summary of a variance vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    pub gini: f64,
    pub effective_rank: f64,
    pub variance_vector: Vec<f64>,
}

impl LatentDiagnostics {
    pub fn from_variances(variances: Vec<f64>) -> Result<Self> {
        Ok(Self {
            gini: gini_index(&variances)?,
            effective_rank: effective_rank(&variances)?,
            variance_vector: variances,
        })
    }

    pub fn of(density: &DiagonalGaussian) -> Result<Self> {
        Self::from_variances(density.variances())
    }
}

pub const DEFAULT_PROBE_DELTA: f64 = 1e-3;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Finite-difference estimate of the relative condition number of `decoder`
/// with respect to each latent coordinate at `z`.
pub fn sensitivity_probe<F>(mut decoder: F, z: &[f64], delta: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(delta > 0.0) {
        return Err(Error::invalid("probe delta must be positive"));
    }
    let z_norm = l2(z);
    if z_norm == 0.0 {
        return Err(Error::invalid("sensitivity probe at z = 0"));
    }
    let base = decoder(z)?;
    let f_norm = l2(&base);
    if f_norm == 0.0 {
        return Err(Error::invalid("decoder output has zero norm"));
    }
    let mut out = Vec::with_capacity(z.len());
    let mut shifted = z.to_vec();
    for i in 0..z.len() {
        shifted[i] = z[i] + delta;
        let f = decoder(&shifted)?;
        shifted[i] = z[i];
        if f.len() != base.len() {
            return Err(Error::invalid("decoder output length changed"));
        }
        let diff: Vec<f64> = f.iter().zip(&base).map(|(a, b)| a - b).collect();
        out.push((l2(&diff) / f_norm) / (delta / z_norm));
    }
    Ok(out)
}

/// `max / min` of a probe vector; infinite when the minimum is zero.
pub fn sensitivity_spread(zeta: &[f64]) -> f64 {
    let max = zeta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = zeta.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}
