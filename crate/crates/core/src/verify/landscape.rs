use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coop::{Objective, TaskOutput};
use crate::error::{Error, Result};
use crate::network::{Param, ParamRole, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// An isotropic Gaussian well `-amp * exp(-|x - center|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Well {
    pub center: Vec<f64>,
    pub amp: f64,
    pub sigma: f64,
}

/// A low-dimensional loss shared by all tasks: a sum of Gaussian wells.
/// Task `i` owns coordinate `i`; the task count equals the dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSpec {
    pub wells: Vec<Well>,
    /// Search box per coordinate, `(lo, hi)`.
    pub domain: Vec<(f64, f64)>,
    pub resolution: usize,
    /// Noise radius used when smoothing.
    pub bound: f64,
    /// Quadrature nodes per noise dimension.
    pub nodes: usize,
}

impl LandscapeSpec {
    /// Wide well at the origin (sigma 1) and a narrow well (sigma 0.1) at
    /// distance 1 along the diagonal, with the narrow amplitude solved so
    /// both minima have equal depth. Smoothing radius `b = 0.5`.
    pub fn flat_vs_sharp() -> Result<Self> {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let mut spec = LandscapeSpec {
            wells: vec![
                Well {
                    center: vec![0.0, 0.0],
                    amp: 1.0,
                    sigma: 1.0,
                },
                Well {
                    center: vec![d, d],
                    amp: 0.4,
                    sigma: 0.1,
                },
            ],
            domain: vec![(-1.5, 2.0), (-1.5, 2.0)],
            resolution: 141,
            bound: 0.5,
            nodes: 64,
        };
        spec.calibrate(1)?;
        Ok(spec)
    }

    /// Two identical wells placed symmetrically: a guaranteed tie.
    pub fn symmetric_double_well() -> Self {
        let well = |c: f64| Well {
            center: vec![c, c],
            amp: 1.0,
            sigma: 0.3,
        };
        LandscapeSpec {
            wells: vec![well(-1.0), well(1.0)],
            domain: vec![(-2.0, 2.0), (-2.0, 2.0)],
            resolution: 81,
            bound: 0.2,
            nodes: 64,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.wells
            .iter()
            .map(|w| {
                let r2: f64 = x
                    .iter()
                    .zip(&w.center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum();
                -w.amp * (-r2 / (2.0 * w.sigma * w.sigma)).exp()
            })
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for w in &self.wells {
            let s2 = w.sigma * w.sigma;
            let r2: f64 = x
                .iter()
                .zip(&w.center)
                .map(|(a, c)| (a - c) * (a - c))
                .sum();
            let e = w.amp * (-r2 / (2.0 * s2)).exp();
            for (gi, (a, c)) in g.iter_mut().zip(x.iter().zip(&w.center)) {
                *gi += e * (a - c) / s2;
            }
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut h = vec![0.0; n * n];
        for w in &self.wells {
            let s2 = w.sigma * w.sigma;
            let d: Vec<f64> = x.iter().zip(&w.center).map(|(a, c)| a - c).collect();
            let r2: f64 = d.iter().map(|v| v * v).sum();
            let e = w.amp * (-r2 / (2.0 * s2)).exp();
            for i in 0..n {
                for j in 0..n {
                    let delta = if i == j { 1.0 / s2 } else { 0.0 };
                    h[i * n + j] += e * (delta - d[i] * d[j] / (s2 * s2));
                }
            }
        }
        h
    }

    /// Newton iterations from `start` to a nearby stationary point.
    pub fn local_min(&self, start: &[f64]) -> Result<Vec<f64>> {
        let n = start.len();
        let mut x = start.to_vec();
        for _ in 0..100 {
            let g = self.gradient(&x);
            if g.iter().all(|v| v.abs() < 1e-15) {
                break;
            }
            let step = solve(self.hessian(&x), g, n).ok_or_else(|| Error::Oracle {
                msg: format!("singular Hessian near {x:?}"),
            })?;
            for (xi, s) in x.iter_mut().zip(&step) {
                *xi -= s;
            }
        }
        Ok(x)
    }

    /// Depth of the local minimum nearest each well center.
    pub fn basin_minima(&self) -> Result<Vec<(Vec<f64>, f64)>> {
        self.wells
            .iter()
            .map(|w| {
                let m = self.local_min(&w.center)?;
                let v = self.value(&m);
                Ok((m, v))
            })
            .collect()
    }

    /// Solves for the amplitude of well `which` that equalizes the depths of
    /// the first two basins (bisection to machine precision).
    pub fn calibrate(&mut self, which: usize) -> Result<()> {
        let other = 1 - which;
        let gap = |s: &mut Self, amp: f64| -> Result<f64> {
            s.wells[which].amp = amp;
            let m = s.basin_minima()?;
            Ok(m[which].1 - m[other].1)
        };
        let (mut lo, mut hi) = (0.2 * self.wells[other].amp, 2.0 * self.wells[other].amp);
        let (glo, ghi) = (gap(self, lo)?, gap(self, hi)?);
        if glo.signum() == ghi.signum() {
            return Err(Error::Oracle {
                msg: "cannot bracket an equal-depth amplitude".into(),
            });
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if gap(self, mid)?.signum() == glo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let best = if gap(self, lo)?.abs() <= gap(self, hi)?.abs() {
            lo
        } else {
            hi
        };
        self.wells[which].amp = best;
        Ok(())
    }

    /// Smoothed objective: for every task `i`, the loss averaged over
    /// uniform noise in `[-b, b]` on all coordinates other than `i`
    /// (midpoint rule, `nodes` points per dimension), summed over tasks.
    pub fn smoothed(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let q = self.nodes;
        let offsets: Vec<f64> = (0..q)
            .map(|k| -self.bound + (k as f64 + 0.5) * 2.0 * self.bound / q as f64)
            .collect();
        let mut total = 0.0;
        let mut y = x.to_vec();
        for i in 0..n {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let count = q.pow(others.len() as u32);
            let mut acc = 0.0;
            for flat in 0..count {
                let mut r = flat;
                for &j in &others {
                    y[j] = x[j] + offsets[r % q];
                    r /= q;
                }
                acc += self.value(&y);
            }
            y.copy_from_slice(x);
            total += acc / count as f64;
        }
        total
    }

    /// Starting point inside the narrowest well, jittered by up to
    /// `0.2 sigma` per coordinate.
    pub fn sharp_start(&self, seed: u64) -> Vec<f64> {
        let w = self
            .wells
            .iter()
            .min_by(|a, b| a.sigma.total_cmp(&b.sigma))
            .expect("landscape has wells");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.center
            .iter()
            .map(|c| c + rng.random_range(-0.2 * w.sigma..=0.2 * w.sigma))
            .collect()
    }

    /// A trainable objective starting at `start`.
    pub fn objective(&self, start: &[f64]) -> Result<LandscapeObjective> {
        if start.len() != self.dim() {
            return Err(Error::invalid(
                "landscape",
                "start point has the wrong dimension",
            ));
        }
        let mut store = ParamStore::new(self.dim());
        for (t, &v) in start.iter().enumerate() {
            store.push(Param {
                name: format!("theta.t{t}"),
                task: t,
                role: ParamRole::Encoder,
                tensor: Tensor::from_parts(vec![1], vec![v]),
            });
        }
        Ok(LandscapeObjective {
            spec: self.clone(),
            store,
        })
    }
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv =
            (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
        }
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

/// Landscape coordinates as trainable parameters, one per task.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeObjective {
    pub spec: LandscapeSpec,
    store: ParamStore,
}

impl LandscapeObjective {
    pub fn point(&self) -> Vec<f64> {
        self.store.iter().map(|p| p.tensor.values()[0]).collect()
    }
}

impl Objective for LandscapeObjective {
    type Batch = ();

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn task_output(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        _task: usize,
        _batch: &(),
    ) -> Result<TaskOutput> {
        let x = g.concat(leaves, 0)?;
        let mut terms = Vec::with_capacity(self.spec.wells.len());
        for w in &self.spec.wells {
            let c = g.constant(Tensor::from_vec(w.center.clone()));
            let d = g.sub(x, c)?;
            let d2 = g.mul(d, d)?;
            let r2 = g.sum(d2)?;
            let z = g.scale(r2, -1.0 / (2.0 * w.sigma * w.sigma))?;
            let e = g.exp(z)?;
            terms.push(g.scale(e, -w.amp)?);
        }
        Ok(TaskOutput {
            loss: g.add_all(&terms)?,
            probs: None,
        })
    }

    fn coordinates(&self) -> Option<Vec<f64>> {
        Some(self.point())
    }
}

/// Outcome of the brute-force grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Grid point minimizing the smoothed objective.
    pub argmin: Vec<f64>,
    pub value: f64,
    /// Other grid-local minima of the smoothed objective within `1e-9` of
    /// the best value. Non-empty means the argmin is ambiguous.
    pub ties: Vec<Vec<f64>>,
    /// Every local minimum of the smoothed objective on the grid.
    pub smoothed_minima: Vec<(Vec<f64>, f64)>,
    /// Newton-polished local minima of the raw loss whose value is within
    /// `1e-9` of the lowest one.
    pub raw_argmin_set: Vec<(Vec<f64>, f64)>,
    pub spacing: f64,
}

impl OracleResult {
    pub fn is_tie(&self) -> bool {
        !self.ties.is_empty()
    }
}

fn grid_local_minima(values: &[f64], res: usize, dim: usize) -> Vec<usize> {
    let idx =
        |flat: usize| -> Vec<usize> { (0..dim).map(|d| flat / res.pow(d as u32) % res).collect() };
    (0..values.len())
        .filter(|&flat| {
            let p = idx(flat);
            (0..dim).all(|d| {
                let stride = res.pow(d as u32);
                let lower_ok = p[d] == 0 || values[flat] <= values[flat - stride];
                let upper_ok = p[d] + 1 == res || values[flat] <= values[flat + stride];
                lower_ok && upper_ok
            })
        })
        .collect()
}

/// Evaluates the smoothed objective on a `resolution^dim` grid over the
/// domain and returns its minimizer. Rejects grids whose spacing exceeds
/// the narrowest well width, which could step over a basin entirely.
pub fn grid_oracle(spec: &LandscapeSpec, resolution: usize) -> Result<OracleResult> {
    let dim = spec.dim();
    if dim == 0 || dim > 3 {
        return Err(Error::Oracle {
            msg: format!("grid oracle supports 1 to 3 dimensions, got {dim}"),
        });
    }
    let narrow = spec
        .wells
        .iter()
        .map(|w| w.sigma)
        .fold(f64::INFINITY, f64::min);
    let spacing = spec
        .domain
        .iter()
        .map(|(lo, hi)| (hi - lo) / (resolution.max(2) - 1) as f64)
        .fold(0.0, f64::max);
    if resolution < 3 || spacing > narrow {
        return Err(Error::Oracle {
            msg: format!(
                "resolution {resolution} gives spacing {spacing:.4}, coarser than the narrowest basin width {narrow:.4}"
            ),
        });
    }
    let point = |flat: usize| -> Vec<f64> {
        (0..dim)
            .map(|d| {
                let (lo, hi) = spec.domain[d];
                let k = flat / resolution.pow(d as u32) % resolution;
                lo + (hi - lo) * k as f64 / (resolution - 1) as f64
            })
            .collect()
    };
    let total = resolution.pow(dim as u32);
    let smooth: Vec<f64> = (0..total).map(|f| spec.smoothed(&point(f))).collect();
    let raw: Vec<f64> = (0..total).map(|f| spec.value(&point(f))).collect();

    let mut minima: Vec<(Vec<f64>, f64)> = grid_local_minima(&smooth, resolution, dim)
        .into_iter()
        .map(|f| (point(f), smooth[f]))
        .collect();
    minima.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (argmin, value) = minima.first().cloned().ok_or_else(|| Error::Oracle {
        msg: "no grid minimum found".into(),
    })?;
    let ties = minima[1..]
        .iter()
        .filter(|(_, v)| (v - value).abs() <= 1e-9)
        .map(|(p, _)| p.clone())
        .collect();

    let mut polished: Vec<(Vec<f64>, f64)> = Vec::new();
    for f in grid_local_minima(&raw, resolution, dim) {
        let m = spec.local_min(&point(f))?;
        if !polished
            .iter()
            .any(|(q, _)| q.iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-6))
        {
            let v = spec.value(&m);
            polished.push((m, v));
        }
    }
    let best = polished.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let raw_argmin_set = polished
        .into_iter()
        .filter(|p| p.1 - best <= 1e-9)
        .collect();
    Ok(OracleResult {
        argmin,
        value,
        ties,
        smoothed_minima: minima,
        raw_argmin_set,
        spacing,
    })
}
