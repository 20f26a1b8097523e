//! Cooperative alternating optimization with flat-minima search.
//!
//! A training run has two phases. The warm-up takes `warmup_iters` joint
//! SGD steps of size `alpha` on the sum of task losses, with every task's
//! encoder perturbed by the same sample index. The outer loop then visits
//! the tasks in ascending order; each task takes `inner_iters` SGD steps of
//! size `beta` on its own parameters while the other tasks' encoders are
//! held fixed under fresh uniform noise, and its encoder is clamped into an
//! infinity-norm box of radius `b` around the value it had at the start of
//! the outer iteration.

mod config;
mod noise;

pub use config::{KlMode, TrainConfig, UpdateMode};
pub use noise::{clamp_to_snapshot, sample_noise, NoiseSample, ParamSnapshot};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Graph-level outputs of one task evaluated on one batch.
#[derive(Debug, Clone, Copy)]
pub struct TaskOutput {
    /// Scalar task loss.
    pub loss: Var,
    /// Class probabilities, required by the KL regularizer.
    pub probs: Option<Var>,
}

/// Anything trainable by [`train`]: a parameter store whose entries are
/// owned by tasks, and a way to record each task's loss on a graph.
pub trait Objective {
    type Batch;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    /// Records task `task`'s loss on `g`, reading parameters from `leaves`
    /// (one per [`ParamId`]).
    fn task_output(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        task: usize,
        batch: &Self::Batch,
    ) -> Result<TaskOutput>;

    /// Low-dimensional coordinates worth logging (landscapes only).
    fn coordinates(&self) -> Option<Vec<f64>> {
        None
    }
}

/// Supplies per-task training batches.
pub trait BatchSource<B> {
    fn next_batch(&mut self, task: usize) -> B;

    /// Fixed data on which negative transfer onto `task` is measured. When
    /// `None`, the task's first inner batch of the iteration is used.
    fn probe_batch(&self, _task: usize) -> Option<B> {
        None
    }
}

impl BatchSource<crate::data::Batch> for crate::data::TaskData {
    fn next_batch(&mut self, task: usize) -> crate::data::Batch {
        crate::data::TaskData::next_batch(self, task)
    }

    fn probe_batch(&self, task: usize) -> Option<crate::data::Batch> {
        crate::data::TaskData::probe_batch(self, task)
    }
}

/// Source for objectives that need no data.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoData;

impl BatchSource<()> for NoData {
    fn next_batch(&mut self, _task: usize) {}
}

/// Records a leaf for every parameter of `store`. Leaves for which
/// `trainable` returns true require gradients. Noise samples are added to
/// the copied values; the store is never modified.
pub fn push_leaves(
    g: &mut Graph,
    store: &ParamStore,
    trainable: &dyn Fn(ParamId) -> bool,
    noise: &[&NoiseSample],
) -> Result<Vec<Var>> {
    let mut delta: Vec<Option<&[f64]>> = vec![None; store.len()];
    for n in noise {
        if n.ids.len() != n.values.len() {
            return Err(Error::invalid(
                "perturbation",
                "ids and values differ in length",
            ));
        }
        for (&id, v) in n.ids.iter().zip(&n.values) {
            if id >= store.len() {
                return Err(Error::invalid(
                    "perturbation",
                    format!("unknown parameter {id}"),
                ));
            }
            let t = &store.get(id).tensor;
            if v.len() != t.len() {
                return Err(Error::Shape {
                    op: "perturbation",
                    lhs: vec![v.len()],
                    rhs: t.shape().to_vec(),
                });
            }
            if delta[id].replace(v).is_some() {
                return Err(Error::invalid(
                    "perturbation",
                    format!("parameter `{}` perturbed twice", store.get(id).name),
                ));
            }
        }
    }
    Ok(store
        .iter()
        .zip(delta)
        .enumerate()
        .map(|(id, (p, d))| {
            let values = match d {
                Some(d) => p
                    .tensor
                    .values()
                    .iter()
                    .zip(d)
                    .map(|(a, e)| a + e)
                    .collect(),
                None => p.tensor.values().to_vec(),
            };
            let t = Tensor::from_parts(p.tensor.shape().to_vec(), values);
            g.leaf(t.with_grad(trainable(id)))
        })
        .collect())
}

/// Sums the gradients of `ids` over several leaf sets, in set order.
fn gather_grads(g: &Graph, sets: &[Vec<Var>], ids: &[ParamId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            let mut acc = g.grad(sets[0][id]).to_vec();
            for s in &sets[1..] {
                for (a, v) in acc.iter_mut().zip(g.grad(s[id])) {
                    *a += v;
                }
            }
            acc
        })
        .collect()
}

/// A recorded loss together with the leaf sets it reads.
struct Recorded {
    graph: Graph,
    loss: Var,
    sets: Vec<Vec<Var>>,
}

impl Recorded {
    fn value(&self) -> f64 {
        self.graph.scalar(self.loss).unwrap_or(f64::NAN)
    }

    fn grads(mut self, ids: &[ParamId]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.graph.backward(self.loss)?;
        let v = self.value();
        Ok((v, gather_grads(&self.graph, &self.sets, ids)))
    }
}

fn record_flat_loss<O: Objective>(
    obj: &O,
    batch: &O::Batch,
    task: usize,
    noises: &[Vec<NoiseSample>],
    lambda: f64,
    kl_mode: KlMode,
) -> Result<Recorded> {
    let store = obj.store();
    if task >= store.task_count() {
        return Err(Error::invalid(
            "flat loss",
            format!("task {task} out of range"),
        ));
    }
    if noises.is_empty() {
        return Err(Error::invalid(
            "flat loss",
            "at least one noise sample (M >= 1) is required",
        ));
    }
    for n in noises.iter().flatten() {
        if n.task == task {
            return Err(Error::invalid(
                "flat loss",
                format!("task {task} cannot be perturbed in its own objective"),
            ));
        }
    }
    let mut g = Graph::new();
    let own = |id: ParamId| store.get(id).task == task;
    let mut sets = Vec::with_capacity(noises.len() + 1);
    let mut outs = Vec::with_capacity(noises.len());
    for sample in noises {
        let refs: Vec<&NoiseSample> = sample.iter().collect();
        let leaves = push_leaves(&mut g, store, &own, &refs)?;
        outs.push(obj.task_output(&mut g, &leaves, task, batch)?);
        sets.push(leaves);
    }
    let m = noises.len() as f64;
    let losses: Vec<Var> = outs.iter().map(|o| o.loss).collect();
    let sum = g.add_all(&losses)?;
    let mut loss = g.scale(sum, 1.0 / m)?;
    if lambda > 0.0 {
        let probs: Vec<Var> = outs
            .iter()
            .map(|o| {
                o.probs.ok_or_else(|| {
                    Error::invalid("flat loss", "objective has no probabilities for KL")
                })
            })
            .collect::<Result<_>>()?;
        let reference = match kl_mode {
            KlMode::Literal => {
                let s = g.add_all(&probs)?;
                g.scale(s, 1.0 / m)?
            }
            KlMode::VsClean => {
                let leaves = push_leaves(&mut g, store, &own, &[])?;
                let clean = obj.task_output(&mut g, &leaves, task, batch)?;
                sets.push(leaves);
                clean.probs.ok_or_else(|| {
                    Error::invalid("flat loss", "objective has no probabilities for KL")
                })?
            }
        };
        let kls: Vec<Var> = probs
            .iter()
            .map(|&p| g.kl_divergence(p, reference))
            .collect::<Result<_>>()?;
        let s = g.add_all(&kls)?;
        let kl = g.scale(s, lambda / m)?;
        loss = g.add(loss, kl)?;
    }
    Ok(Recorded {
        graph: g,
        loss,
        sets,
    })
}

/// Per-task flat objective: the task loss averaged over the `M` noise
/// samples (each a list of perturbations of other tasks' encoders), plus
/// `lambda` times the averaged KL between each perturbed prediction and the
/// reference picked by `kl_mode`.
pub fn empirical_flat_loss<O: Objective>(
    obj: &O,
    batch: &O::Batch,
    task: usize,
    noises: &[Vec<NoiseSample>],
    lambda: f64,
    kl_mode: KlMode,
) -> Result<f64> {
    Ok(record_flat_loss(obj, batch, task, noises, lambda, kl_mode)?.value())
}

/// [`empirical_flat_loss`] and its gradient with respect to every parameter
/// of `task`, ordered as `store.ids(task, false)`.
pub fn flat_loss_grad<O: Objective>(
    obj: &O,
    batch: &O::Batch,
    task: usize,
    noises: &[Vec<NoiseSample>],
    lambda: f64,
    kl_mode: KlMode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let ids = obj.store().ids(task, false)?;
    record_flat_loss(obj, batch, task, noises, lambda, kl_mode)?.grads(&ids)
}

fn record_warmup_loss<O: Objective>(
    obj: &O,
    batches: &[O::Batch],
    noises: &[Vec<NoiseSample>],
) -> Result<Recorded> {
    let store = obj.store();
    if batches.len() != store.task_count() {
        return Err(Error::invalid(
            "warm-up",
            format!("{} batches for {} tasks", batches.len(), store.task_count()),
        ));
    }
    if noises.is_empty() {
        return Err(Error::invalid(
            "warm-up",
            "at least one noise sample (M >= 1) is required",
        ));
    }
    let mut g = Graph::new();
    let mut sets = Vec::with_capacity(noises.len());
    let mut terms = Vec::with_capacity(noises.len());
    for sample in noises {
        let refs: Vec<&NoiseSample> = sample.iter().collect();
        let leaves = push_leaves(&mut g, store, &|_| true, &refs)?;
        let losses: Vec<Var> = batches
            .iter()
            .enumerate()
            .map(|(t, b)| obj.task_output(&mut g, &leaves, t, b).map(|o| o.loss))
            .collect::<Result<_>>()?;
        terms.push(g.add_all(&losses)?);
        sets.push(leaves);
    }
    let s = g.add_all(&terms)?;
    let loss = g.scale(s, 1.0 / noises.len() as f64)?;
    Ok(Recorded {
        graph: g,
        loss,
        sets,
    })
}

/// Value of [`warmup_loss_grad`] without the backward pass.
pub fn warmup_loss<O: Objective>(
    obj: &O,
    batches: &[O::Batch],
    noises: &[Vec<NoiseSample>],
) -> Result<f64> {
    Ok(record_warmup_loss(obj, batches, noises)?.value())
}

/// Joint objective: the sum of all task losses with every task's encoder
/// perturbed by the same sample `j`, averaged over samples. Returns the
/// value and the gradient of every parameter in store order.
pub fn warmup_loss_grad<O: Objective>(
    obj: &O,
    batches: &[O::Batch],
    noises: &[Vec<NoiseSample>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let ids: Vec<ParamId> = (0..obj.store().len()).collect();
    record_warmup_loss(obj, batches, noises)?.grads(&ids)
}

/// Unperturbed loss of one task.
pub fn clean_loss<O: Objective>(obj: &O, batch: &O::Batch, task: usize) -> Result<f64> {
    let mut g = Graph::new();
    let leaves = push_leaves(&mut g, obj.store(), &|_| false, &[])?;
    let out = obj.task_output(&mut g, &leaves, task, batch)?;
    Ok(g.scalar(out.loss).unwrap_or(f64::NAN))
}

/// Plain SGD update `p -= lr * g` for the given parameters.
pub fn sgd_step(store: &mut ParamStore, ids: &[ParamId], grads: &[Vec<f64>], lr: f64) {
    for (&id, g) in ids.iter().zip(grads) {
        for (v, d) in store.get_mut(id).tensor.values_mut().iter_mut().zip(g) {
            *v -= lr * d;
        }
    }
}

fn noise_for<R: rand::Rng>(
    store: &ParamStore,
    tasks: impl Iterator<Item = usize> + Clone,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Vec<NoiseSample>>> {
    if !cfg.inject_noise {
        return Ok(vec![Vec::new()]);
    }
    (0..cfg.samples)
        .map(|_| {
            tasks
                .clone()
                .map(|k| sample_noise(store, k, cfg.bound, rng))
                .collect()
        })
        .collect()
}

/// One warm-up step: draws `M` paired noise samples over all encoders and
/// takes an SGD step of size `lr` on every parameter. Returns the loss
/// before the step.
pub fn warmup_step<O: Objective, R: rand::Rng>(
    obj: &mut O,
    batches: &[O::Batch],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let store = obj.store();
    let noises = noise_for(store, 0..store.task_count(), cfg, rng)?;
    let (loss, grads) = warmup_loss_grad(obj, batches, &noises)?;
    if loss.is_finite() {
        let ids: Vec<ParamId> = (0..obj.store().len()).collect();
        sgd_step(obj.store_mut(), &ids, &grads, lr);
    }
    Ok(loss)
}

/// Metrics of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub iter: usize,
    /// Objective value of each task's last inner step (joint loss per task
    /// in simultaneous mode).
    pub loss: Vec<f64>,
    pub accuracy: Option<Vec<f64>>,
    /// Whether task 0's updates raised task 1's clean loss on a fixed batch.
    pub negative_transfer: Option<bool>,
    /// Coordinates clamped during the iteration, per task.
    pub clamped: Vec<usize>,
    /// `max |theta_i - snapshot_i|` at the end of the iteration, per task.
    pub max_shift: Vec<f64>,
    pub coordinates: Option<Vec<f64>>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub warmup_losses: Vec<f64>,
    pub records: Vec<RunRecord>,
}

/// Evaluation hook: returns per-task accuracies for the current parameters.
pub type Evaluator<'a, O> = &'a mut dyn FnMut(&O) -> Result<Vec<f64>>;

fn finite(v: f64, phase: &'static str, iter: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { phase, iter })
    }
}

/// Runs warm-up and the outer loop. `eval`, if given, is called every
/// `eval_every` outer iterations and after the last one.
pub fn train<O: Objective>(
    obj: &mut O,
    data: &mut dyn BatchSource<O::Batch>,
    cfg: &TrainConfig,
    mut eval: Option<Evaluator<'_, O>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tasks = obj.store().task_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();

    let mut warmup_losses = Vec::with_capacity(cfg.warmup_iters);
    for s in 0..cfg.warmup_iters {
        let batches: Vec<O::Batch> = (0..tasks).map(|t| data.next_batch(t)).collect();
        let loss = warmup_step(obj, &batches, cfg, cfg.warmup_lr, &mut rng)?;
        warmup_losses.push(finite(loss, "warm-up", s)?);
    }

    let probe = if cfg.track_negative_transfer && tasks >= 2 {
        data.probe_batch(1)
    } else {
        None
    };
    let mut records = Vec::with_capacity(cfg.outer_iters);
    for t in 0..cfg.outer_iters {
        let snaps: Vec<ParamSnapshot> = (0..tasks)
            .map(|i| ParamSnapshot::take(obj.store(), i))
            .collect::<Result<_>>()?;
        let mut clamped = vec![0; tasks];
        let mut negative_transfer = None;
        let loss = match cfg.update {
            UpdateMode::Simultaneous => {
                let batches: Vec<O::Batch> = (0..tasks).map(|i| data.next_batch(i)).collect();
                let per_task = (0..tasks)
                    .map(|i| clean_loss(obj, &batches[i], i))
                    .collect::<Result<Vec<_>>>()?;
                let total = warmup_step(obj, &batches, cfg, cfg.inner_lr, &mut rng)?;
                finite(total, "outer", t)?;
                per_task
            }
            UpdateMode::Alternating => {
                let batches: Vec<Vec<O::Batch>> = (0..tasks)
                    .map(|i| (0..cfg.inner_iters).map(|_| data.next_batch(i)).collect())
                    .collect();
                let probe = (cfg.track_negative_transfer && tasks >= 2)
                    .then(|| probe.as_ref().unwrap_or(&batches[1][0]));
                let before = probe.map(|b| clean_loss(obj, b, 1)).transpose()?;
                let mut last = vec![f64::NAN; tasks];
                for i in 0..tasks {
                    let ids = obj.store().ids(i, false)?;
                    for batch in &batches[i] {
                        let noises =
                            noise_for(obj.store(), (0..tasks).filter(|&k| k != i), cfg, &mut rng)?;
                        let (l, grads) =
                            flat_loss_grad(obj, batch, i, &noises, cfg.kl_weight, cfg.kl_mode)?;
                        last[i] = finite(l, "outer", t)?;
                        sgd_step(obj.store_mut(), &ids, &grads, cfg.inner_lr);
                        if cfg.clamp {
                            clamped[i] += clamp_to_snapshot(obj.store_mut(), &snaps[i], cfg.bound)?;
                        }
                    }
                    if i == 0 {
                        if let (Some(b), Some(p)) = (before, probe) {
                            let after = clean_loss(obj, p, 1)?;
                            negative_transfer = Some(after > b);
                        }
                    }
                }
                last
            }
        };
        let max_shift: Vec<f64> = snaps.iter().map(|s| s.max_shift(obj.store())).collect();
        if cfg.clamp && cfg.update == UpdateMode::Alternating {
            if let Some((i, &d)) = max_shift
                .iter()
                .enumerate()
                .find(|(_, &d)| d.is_nan() || d > cfg.bound)
            {
                return Err(Error::Invariant(format!(
                    "outer iteration {t}: task {i} moved {d:e} > b = {:e}",
                    cfg.bound
                )));
            }
        }
        let due = cfg.eval_every > 0 && ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.outer_iters);
        let accuracy = match (&mut eval, due) {
            (Some(f), true) => Some(f(obj)?),
            _ => None,
        };
        records.push(RunRecord {
            iter: t,
            loss,
            accuracy,
            negative_transfer,
            clamped,
            max_shift,
            coordinates: obj.coordinates(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome {
        warmup_losses,
        records,
    })
}
