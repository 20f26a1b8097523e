//! Independent oracles: finite differences, flatness probes, a designed
//! two-basin landscape with a brute-force quadrature oracle, and a
//! randomized gradient-check suite.

mod gradcheck;
mod landscape;

pub use gradcheck::{gradient_check_suite, GradCase};
pub use landscape::{grid_oracle, LandscapeSpec, OracleResult, Well};

use rand::Rng;

use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params` with step `h`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(
            "finite_diff_grad",
            format!("step must be positive, got {h}"),
        ));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                phase: "finite difference",
                iter: i,
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `||a - b||_2 / max(||a||_2, ||b||_2)`, or the absolute difference norm
/// when both vectors are below `1e-12`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Monte-Carlo statistics of a loss under bounded uniform perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatnessReport {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub max: f64,
}

/// Evaluates `f` at `point` with the coordinates in `block` perturbed by
/// `U(-b, b)` noise, `k` times.
pub fn flatness_probe<R: Rng + ?Sized>(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    block: &[usize],
    b: f64,
    k: usize,
    rng: &mut R,
) -> Result<FlatnessReport> {
    if k < 2 {
        return Err(Error::invalid(
            "flatness_probe",
            format!("need at least 2 draws, got {k}"),
        ));
    }
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::invalid(
            "flatness_probe",
            format!("bound must be non-negative, got {b}"),
        ));
    }
    if let Some(&i) = block.iter().find(|&&i| i >= point.len()) {
        return Err(Error::invalid(
            "flatness_probe",
            format!("coordinate {i} out of range"),
        ));
    }
    let mut x = point.to_vec();
    // Welford updates keep the mean exact when every draw is identical
    let (mut mean, mut m2, mut max) = (0.0, 0.0, f64::NEG_INFINITY);
    for i in 0..k {
        x.copy_from_slice(point);
        if b > 0.0 {
            for &c in block {
                x[c] += rng.random_range(-b..=b);
            }
        }
        let v = f(&x)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                phase: "flatness probe",
                iter: i,
            });
        }
        let prev = mean;
        mean += (v - prev) / (i + 1) as f64;
        m2 += (v - prev) * (v - mean);
        max = max.max(v);
    }
    let variance = m2 / (k - 1) as f64;
    Ok(FlatnessReport {
        mean,
        variance,
        max,
    })
}
