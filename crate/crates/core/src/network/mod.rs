//! Split-encoder multi-task network.
//!
//! Every parametric encoder layer is divided evenly among the tasks. Each
//! task's slice consumes the concatenation of all slices from the previous
//! layer (task order ascending) and the slice outputs are concatenated again
//! before the next layer. Task heads read the full concatenated feature.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coop::{push_leaves, NoiseSample, Objective, TaskOutput};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// One entry of an encoder architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Stride-1 convolution producing `width` channels in total.
    Conv {
        width: usize,
        kernel: usize,
        padding: usize,
    },
    /// Fully connected layer with `width` outputs in total.
    Dense {
        width: usize,
    },
    MaxPool2,
    Relu,
    Flatten,
}

/// Architecture of the shared encoder plus the per-task head size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    /// Per-sample input shape, `[C, H, W]` for images or `[D]` for vectors.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub head_classes: usize,
}

impl NetSpec {
    /// The MNIST network: two 5x5 conv blocks (10 and 20 channels) with
    /// 2x2 max pooling, a 50-unit dense layer, and a 5-way head per task.
    pub fn lenet() -> Self {
        use LayerSpec::*;
        NetSpec {
            input: vec![1, 28, 28],
            layers: vec![
                Conv {
                    width: 10,
                    kernel: 5,
                    padding: 0,
                },
                MaxPool2,
                Relu,
                Conv {
                    width: 20,
                    kernel: 5,
                    padding: 0,
                },
                MaxPool2,
                Relu,
                Flatten,
                Dense { width: 50 },
                Relu,
            ],
            head_classes: 5,
        }
    }

    /// Dense ReLU encoder over vector inputs.
    pub fn mlp(input_dim: usize, hidden: &[usize], head_classes: usize) -> Self {
        let mut layers = Vec::new();
        for &w in hidden {
            layers.push(LayerSpec::Dense { width: w });
            layers.push(LayerSpec::Relu);
        }
        NetSpec {
            input: vec![input_dim],
            layers,
            head_classes,
        }
    }

    /// Stable textual form used for hashing.
    pub fn canonical(&self) -> String {
        let mut s = format!("in={:?};", self.input);
        for l in &self.layers {
            match l {
                LayerSpec::Conv {
                    width,
                    kernel,
                    padding,
                } => s += &format!("conv({width},{kernel},{padding});"),
                LayerSpec::Dense { width } => s += &format!("dense({width});"),
                LayerSpec::MaxPool2 => s += "pool2;",
                LayerSpec::Relu => s += "relu;",
                LayerSpec::Flatten => s += "flatten;",
            }
        }
        s += &format!("head={}", self.head_classes);
        s
    }

    /// 64-bit FNV-1a of [`NetSpec::canonical`].
    pub fn hash(&self) -> u64 {
        self.canonical()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325, |h, b| {
                (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
            })
    }
}

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Part of a task's encoder slice (theta).
    Encoder,
    /// Part of a task's prediction head (phi).
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub task: usize,
    pub role: ParamRole,
    pub tensor: Tensor,
}

/// Flat list of named parameters, each owned by exactly one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    task_count: usize,
}

impl ParamStore {
    pub fn new(task_count: usize) -> Self {
        ParamStore {
            params: Vec::new(),
            task_count,
        }
    }

    pub fn push(&mut self, param: Param) -> ParamId {
        assert!(param.task < self.task_count);
        self.params.push(param);
        self.params.len() - 1
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Ids of the parameters owned by `task`, optionally restricted to the
    /// encoder slices.
    pub fn ids(&self, task: usize, encoder_only: bool) -> Result<Vec<ParamId>> {
        if task >= self.task_count {
            return Err(Error::invalid(
                "parameters",
                format!("task {task} out of range for {} tasks", self.task_count),
            ));
        }
        Ok(self
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.task == task && (!encoder_only || p.role == ParamRole::Encoder))
            .map(|(i, _)| i)
            .collect())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Number of scalars in the given ids.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&i| self.params[i].tensor.len()).sum()
    }

    /// Copies the values of the given parameters into one flat vector.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&i| self.params[i].tensor.values().iter().copied())
            .collect()
    }
}

/// Kind of a parametric encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Conv { padding: usize },
    Dense,
}

/// One parametric encoder layer split into per-task slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    pub kind: PartitionKind,
    /// `(weight, bias)` per task, in task order.
    pub slices: Vec<(ParamId, ParamId)>,
    /// Output width contributed by each task.
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EncoderStage {
    Partition(LayerPartition),
    MaxPool2,
    Relu,
    Flatten,
}

/// Shared split encoder plus task-specific heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    spec: NetSpec,
    store: ParamStore,
    stages: Vec<EncoderStage>,
    heads: Vec<(ParamId, ParamId)>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape, values)
}

impl MultiTaskModel {
    /// Builds and initializes a model. Every parametric width must be
    /// divisible by `task_count`. Initialization is fan-in scaled uniform,
    /// deterministic in `seed`.
    pub fn build(spec: &NetSpec, task_count: usize, seed: u64) -> Result<Self> {
        if task_count == 0 {
            return Err(Error::invalid("build", "task count must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(task_count);
        let mut stages = Vec::new();
        let mut shape = spec.input.clone();
        for (li, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    width,
                    kernel,
                    padding,
                } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(Error::invalid(
                            "build",
                            format!("layer {li}: conv needs a [C, H, W] input, got {shape:?}"),
                        ));
                    };
                    let per = split_width(li, width, task_count)?;
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::invalid(
                            "build",
                            format!("layer {li}: kernel {kernel} larger than input {h}x{w}"),
                        ));
                    }
                    let fan_in = c * kernel * kernel;
                    let mut slices = Vec::new();
                    for t in 0..task_count {
                        let wt = uniform_tensor(&mut rng, vec![per, c, kernel, kernel], fan_in);
                        let bt = uniform_tensor(&mut rng, vec![per], fan_in);
                        slices.push(push_pair(
                            &mut store,
                            format!("enc{li}.t{t}"),
                            t,
                            ParamRole::Encoder,
                            wt,
                            bt,
                        ));
                    }
                    stages.push(EncoderStage::Partition(LayerPartition {
                        kind: PartitionKind::Conv { padding },
                        slices,
                        widths: vec![per; task_count],
                    }));
                    shape = vec![
                        width,
                        h + 2 * padding - kernel + 1,
                        w + 2 * padding - kernel + 1,
                    ];
                }
                LayerSpec::Dense { width } => {
                    let &[d] = shape.as_slice() else {
                        return Err(Error::invalid(
                            "build",
                            format!("layer {li}: dense needs a flat input, got {shape:?}"),
                        ));
                    };
                    let per = split_width(li, width, task_count)?;
                    let mut slices = Vec::new();
                    for t in 0..task_count {
                        let wt = uniform_tensor(&mut rng, vec![d, per], d);
                        let bt = uniform_tensor(&mut rng, vec![per], d);
                        slices.push(push_pair(
                            &mut store,
                            format!("enc{li}.t{t}"),
                            t,
                            ParamRole::Encoder,
                            wt,
                            bt,
                        ));
                    }
                    stages.push(EncoderStage::Partition(LayerPartition {
                        kind: PartitionKind::Dense,
                        slices,
                        widths: vec![per; task_count],
                    }));
                    shape = vec![width];
                }
                LayerSpec::MaxPool2 => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(Error::invalid(
                            "build",
                            format!("layer {li}: pooling needs [C, H, W]"),
                        ));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::invalid(
                            "build",
                            format!("layer {li}: cannot pool {h}x{w}"),
                        ));
                    }
                    stages.push(EncoderStage::MaxPool2);
                    shape = vec![c, h / 2, w / 2];
                }
                LayerSpec::Relu => stages.push(EncoderStage::Relu),
                LayerSpec::Flatten => {
                    stages.push(EncoderStage::Flatten);
                    shape = vec![shape.iter().product()];
                }
            }
        }
        let &[feat] = shape.as_slice() else {
            return Err(Error::invalid(
                "build",
                format!("encoder must end with a flat feature, got {shape:?}"),
            ));
        };
        let mut heads = Vec::new();
        for t in 0..task_count {
            let wt = uniform_tensor(&mut rng, vec![feat, spec.head_classes], feat);
            let bt = uniform_tensor(&mut rng, vec![spec.head_classes], feat);
            heads.push(push_pair(
                &mut store,
                format!("head.t{t}"),
                t,
                ParamRole::Head,
                wt,
                bt,
            ));
        }
        Ok(MultiTaskModel {
            spec: spec.clone(),
            store,
            stages,
            heads,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn task_count(&self) -> usize {
        self.store.task_count()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter ids of `task` (theta and phi, or theta only).
    pub fn parameters(&self, task: usize, encoder_only: bool) -> Result<Vec<ParamId>> {
        self.store.ids(task, encoder_only)
    }

    pub fn partitions(&self) -> impl Iterator<Item = &LayerPartition> {
        self.stages.iter().filter_map(|s| match s {
            EncoderStage::Partition(p) => Some(p),
            _ => None,
        })
    }

    /// Records the forward pass for `task` on `g`, reading parameter values
    /// from `leaves` (indexed by [`ParamId`]). Returns the logits.
    pub fn forward_graph(&self, g: &mut Graph, leaves: &[Var], x: Var, task: usize) -> Result<Var> {
        if task >= self.task_count() {
            return Err(Error::invalid(
                "forward",
                format!("task {task} out of range"),
            ));
        }
        if leaves.len() != self.store.len() {
            return Err(Error::invalid(
                "forward",
                format!(
                    "{} leaves for {} parameters",
                    leaves.len(),
                    self.store.len()
                ),
            ));
        }
        let batch = g.shape(x).first().copied().unwrap_or(0);
        let mut want = vec![batch];
        want.extend_from_slice(&self.spec.input);
        if g.shape(x) != want.as_slice() {
            return Err(Error::Shape {
                op: "forward",
                lhs: g.shape(x).to_vec(),
                rhs: want,
            });
        }
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                EncoderStage::Partition(p) => {
                    // Concatenating the slice weights along the output axis
                    // yields the concatenated slice outputs in one kernel.
                    let (ws, bs): (Vec<Var>, Vec<Var>) = p
                        .slices
                        .iter()
                        .map(|&(w, b)| (leaves[w], leaves[b]))
                        .unzip();
                    let (w, b) = if ws.len() == 1 {
                        (ws[0], bs[0])
                    } else {
                        let axis = match p.kind {
                            PartitionKind::Conv { .. } => 0,
                            PartitionKind::Dense => 1,
                        };
                        (g.concat(&ws, axis)?, g.concat(&bs, 0)?)
                    };
                    let y = match p.kind {
                        PartitionKind::Conv { padding } => g.conv2d(h, w, padding)?,
                        PartitionKind::Dense => g.matmul(h, w)?,
                    };
                    g.add_bias(y, b)?
                }
                EncoderStage::MaxPool2 => g.max_pool2(h)?,
                EncoderStage::Relu => g.relu(h)?,
                EncoderStage::Flatten => g.flatten(h)?,
            };
        }
        let (w, b) = self.heads[task];
        let logits = g.matmul(h, leaves[w])?;
        g.add_bias(logits, leaves[b])
    }

    /// Logits for `task` with the given encoder perturbations applied to
    /// transient copies of the parameters. Stored values are not touched.
    pub fn forward(&self, x: &Tensor, task: usize, perturbation: &[NoiseSample]) -> Result<Tensor> {
        let mut g = Graph::new();
        let noise: Vec<&NoiseSample> = perturbation.iter().collect();
        let leaves = push_leaves(&mut g, &self.store, &|_| false, &noise)?;
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &leaves, xv, task)?;
        Ok(g.tensor(out).clone())
    }

    /// Predicted class per row for `task`, evaluated in chunks.
    pub fn predict(&self, images: &Tensor, task: usize, chunk: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let per: usize = images.shape()[1..].iter().product();
        let mut preds = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let x = Tensor::from_parts(shape, images.values()[start * per..end * per].to_vec());
            let logits = self.forward(&x, task, &[])?;
            let c = logits.shape()[1];
            for row in logits.values().chunks(c) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
                preds.push(best.0);
            }
            start = end;
        }
        Ok(preds)
    }

    /// Fraction of rows whose predicted class equals the label.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize], task: usize) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::invalid("accuracy", "empty evaluation set"));
        }
        let preds = self.predict(images, task, 256)?;
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub(crate) fn from_parts(spec: NetSpec, store: ParamStore) -> Result<Self> {
        let fresh = Self::build(&spec, store.task_count(), 0)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (a, b) in fresh.store.iter().zip(store.iter()) {
            if a.name != b.name
                || a.tensor.shape() != b.tensor.shape()
                || a.task != b.task
                || a.role != b.role
            {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape()
                )));
            }
        }
        Ok(MultiTaskModel { store, ..fresh })
    }
}

fn split_width(layer: usize, width: usize, tasks: usize) -> Result<usize> {
    if width == 0 || !width.is_multiple_of(tasks) {
        return Err(Error::invalid(
            "build",
            format!("layer {layer}: width {width} is not divisible by {tasks} tasks"),
        ));
    }
    Ok(width / tasks)
}

fn push_pair(
    store: &mut ParamStore,
    prefix: String,
    task: usize,
    role: ParamRole,
    w: Tensor,
    b: Tensor,
) -> (ParamId, ParamId) {
    let wi = store.push(Param {
        name: format!("{prefix}.w"),
        task,
        role,
        tensor: w,
    });
    let bi = store.push(Param {
        name: format!("{prefix}.b"),
        task,
        role,
        tensor: b,
    });
    (wi, bi)
}

impl Objective for MultiTaskModel {
    type Batch = Batch;

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
        task: usize,
        batch: &Batch,
    ) -> Result<TaskOutput> {
        let x = g.constant(batch.images.clone());
        let logits = self.forward_graph(g, leaves, x, task)?;
        let loss = g.cross_entropy(logits, &batch.labels)?;
        let probs = g.softmax(logits)?;
        Ok(TaskOutput {
            loss,
            probs: Some(probs),
        })
    }
}

/// Closed-form scalar parameter count of a model built from `spec`.
pub fn analytic_param_count(spec: &NetSpec, task_count: usize) -> usize {
    let mut shape = spec.input.clone();
    let mut total = 0;
    for l in &spec.layers {
        match *l {
            LayerSpec::Conv {
                width,
                kernel,
                padding,
            } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                // every task slice sees all input channels
                total += width * c * kernel * kernel + width;
                shape = vec![
                    width,
                    h + 2 * padding - kernel + 1,
                    w + 2 * padding - kernel + 1,
                ];
            }
            LayerSpec::Dense { width } => {
                total += shape[0] * width + width;
                shape = vec![width];
            }
            LayerSpec::MaxPool2 => shape = vec![shape[0], shape[1] / 2, shape[2] / 2],
            LayerSpec::Relu => {}
            LayerSpec::Flatten => shape = vec![shape.iter().product()],
        }
    }
    total + task_count * (shape[0] * spec.head_classes + spec.head_classes)
}
