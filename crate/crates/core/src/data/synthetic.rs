use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Two classification tasks over a shared Gaussian latent.
///
/// Generative process, per sample:
///
/// ```text
/// z  ~ N(0, I_k)
/// x  = A z + noise * xi,   xi ~ N(0, I_d)
/// y_t = argmax_c (W_t z)_c
/// ```
///
/// `A` (d x k) and `W_t` (C x k) have i.i.d. standard normal entries drawn
/// from the seed. Both tasks read the same latent, so features useful for
/// one are useful for the other. Each task gets its own samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTwoTask {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub noise: f64,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

impl Default for SyntheticTwoTask {
    fn default() -> Self {
        SyntheticTwoTask {
            input_dim: 16,
            latent_dim: 4,
            classes: 4,
            noise: 1.0,
            train_per_task: 200,
            test_per_task: 2000,
            seed: 0,
        }
    }
}

/// Generated sets plus the generator matrices (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<LabeledSet>,
    pub test: Vec<LabeledSet>,
    /// `A`, shape `(input_dim, latent_dim)`.
    pub mixing: Vec<f64>,
    /// `W_t`, shape `(classes, latent_dim)` per task.
    pub readouts: Vec<Vec<f64>>,
    /// Latents of the training samples, per task, shape `(n, latent_dim)`.
    pub train_latents: Vec<Vec<f64>>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        )
        .0
}

/// `(W z)` argmax for a `(rows, k)` matrix `w`.
fn readout_class(w: &[f64], z: &[f64]) -> usize {
    let k = z.len();
    let scores: Vec<f64> = w
        .chunks(k)
        .map(|r| r.iter().zip(z).map(|(a, b)| a * b).sum())
        .collect();
    argmax(&scores)
}

impl SyntheticTwoTask {
    /// Checks parameter ranges; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(k, m));
        if self.input_dim == 0 {
            return bad("input_dim", "must be >= 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be >= 1");
        }
        if self.latent_dim > self.input_dim {
            return bad("latent_dim", "must not exceed input_dim");
        }
        if self.classes < 2 {
            return bad("classes", "must be >= 2");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be finite and >= 0");
        }
        if self.train_per_task == 0 {
            return bad("train_per_task", "must be >= 1");
        }
        if self.test_per_task == 0 {
            return bad("test_per_task", "must be >= 1");
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng, a: &[f64], w: &[f64], n: usize) -> (LabeledSet, Vec<f64>) {
        let (d, k) = (self.input_dim, self.latent_dim);
        let mut xs = Vec::with_capacity(n * d);
        let mut zs = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z = normals(rng, k);
            let xi = normals(rng, d);
            for r in 0..d {
                let az: f64 = a[r * k..(r + 1) * k]
                    .iter()
                    .zip(&z)
                    .map(|(p, q)| p * q)
                    .sum();
                xs.push(az + self.noise * xi[r]);
            }
            labels.push(readout_class(w, &z));
            zs.extend(z);
        }
        let set = LabeledSet {
            images: Tensor::from_parts(vec![n, d], xs),
            labels,
            classes: self.classes,
        };
        (set, zs)
    }

    pub fn generate(&self) -> Result<SyntheticData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mixing = normals(&mut rng, self.input_dim * self.latent_dim);
        let readouts: Vec<Vec<f64>> = (0..2)
            .map(|_| normals(&mut rng, self.classes * self.latent_dim))
            .collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut train_latents = Vec::new();
        for w in &readouts {
            let (s, z) = self.draw(&mut rng, &mixing, w, self.train_per_task);
            train.push(s);
            train_latents.push(z);
            test.push(self.draw(&mut rng, &mixing, w, self.test_per_task).0);
        }
        Ok(SyntheticData {
            train,
            test,
            mixing,
            readouts,
            train_latents,
        })
    }
}

/// Lower Cholesky factor of a symmetric positive definite `n x n` matrix.
fn cholesky(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i * n + p] * l[j * n + p]).sum();
            if i == j {
                let d = m[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::invalid(
                        "cholesky",
                        "matrix is not positive definite",
                    ));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (m[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix through its Cholesky factor.
fn spd_inverse(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky(m, n)?;
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        // solve L y = e_c, then L^T x = y
        let mut y = vec![0.0; n];
        for i in 0..n {
            let rhs = if i == c { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|p| l[i * n + p] * y[p]).sum();
            y[i] = (rhs - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|p| l[p * n + i] * inv[p * n + c]).sum();
            inv[i * n + c] = (y[i] - s) / l[i * n + i];
        }
    }
    Ok(inv)
}

impl SyntheticData {
    /// Monte-Carlo estimate of the Bayes error of `task` under the known
    /// generator. The posterior `z | x` is `N(S A^T x / s2, S)` with
    /// `S = (I + A^T A / s2)^-1`; the Bayes rule picks the most probable
    /// readout class under that posterior, estimated from `posterior_draws`
    /// samples per input. Requires `noise > 0`.
    pub fn bayes_error(
        &self,
        params: &SyntheticTwoTask,
        task: usize,
        inputs: usize,
        posterior_draws: usize,
        seed: u64,
    ) -> Result<f64> {
        if params.noise <= 0.0 {
            return Err(Error::invalid("bayes_error", "noise must be positive"));
        }
        if inputs == 0 || posterior_draws == 0 {
            return Err(Error::invalid(
                "bayes_error",
                "sample counts must be positive",
            ));
        }
        let (d, k, c) = (params.input_dim, params.latent_dim, params.classes);
        let s2 = params.noise * params.noise;
        let a = &self.mixing;
        let w = &self.readouts[task];
        let mut prec = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let ata: f64 = (0..d).map(|r| a[r * k + i] * a[r * k + j]).sum();
                prec[i * k + j] = ata / s2 + if i == j { 1.0 } else { 0.0 };
            }
        }
        let cov = spd_inverse(&prec, k)?;
        let chol = cholesky(&cov, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut errors = 0.0;
        for _ in 0..inputs {
            let z = normals(&mut rng, k);
            let xi = normals(&mut rng, d);
            let x: Vec<f64> = (0..d)
                .map(|r| (0..k).map(|j| a[r * k + j] * z[j]).sum::<f64>() + params.noise * xi[r])
                .collect();
            let truth = readout_class(w, &z);
            let atx: Vec<f64> = (0..k)
                .map(|j| (0..d).map(|r| a[r * k + j] * x[r]).sum::<f64>() / s2)
                .collect();
            let mean: Vec<f64> = (0..k)
                .map(|i| (0..k).map(|j| cov[i * k + j] * atx[j]).sum())
                .collect();
            let mut votes = vec![0usize; c];
            for _ in 0..posterior_draws {
                let e = normals(&mut rng, k);
                let zs: Vec<f64> = (0..k)
                    .map(|i| mean[i] + (0..=i).map(|j| chol[i * k + j] * e[j]).sum::<f64>())
                    .collect();
                votes[readout_class(w, &zs)] += 1;
            }
            let guess = votes
                .iter()
                .enumerate()
                .fold((0, 0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            if guess != truth {
                errors += 1.0;
            }
        }
        Ok(errors / inputs as f64)
    }
}
