use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_grad, relative_error};
use crate::coop::{self, sample_noise, KlMode, NoiseSample};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::network::{LayerSpec, MultiTaskModel, NetSpec, ParamId};
use crate::tensor::{Graph, OpKind, Tensor, Var};

/// One autodiff-versus-finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub params: usize,
    pub rel_error: f64,
    /// Op kinds recorded on the graph of this case.
    pub ops: Vec<OpKind>,
    /// Random points discarded because they sat on a non-smooth kink.
    pub redraws: usize,
}

const STEP: f64 = 1e-5;

type Build<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Values bounded away from zero, so ReLU kinks are out of reach of the
/// finite-difference step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                u
            } else {
                -u
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), v)
}

fn record(
    inputs: &[Tensor],
    flat: Option<&[f64]>,
    build: Build,
    weights: Option<&Tensor>,
) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let mut offset = 0;
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let values = match flat {
                Some(f) => f[offset..offset + t.len()].to_vec(),
                None => t.values().to_vec(),
            };
            offset += t.len();
            g.param(Tensor::from_parts(t.shape().to_vec(), values))
        })
        .collect();
    let y = build(&mut g, &leaves)?;
    let loss = match weights {
        Some(w) => {
            let r = g.constant(w.clone());
            let p = g.mul(y, r)?;
            g.sum(p)?
        }
        None => y,
    };
    Ok((g, leaves, loss))
}

/// Checks `sum(build(inputs) * R)` for a random fixed `R`, or `build`
/// itself when it already yields a scalar.
fn op_case(
    name: &str,
    inputs: Vec<Tensor>,
    build: Build,
    rng: &mut ChaCha8Rng,
) -> Result<GradCase> {
    let (g0, _, y0) = record(&inputs, None, build, None)?;
    let weights = if g0.tensor(y0).len() == 1 {
        None
    } else {
        Some(random_tensor(rng, g0.shape(y0)))
    };
    let (mut g, leaves, loss) = record(&inputs, None, build, weights.as_ref())?;
    g.backward(loss)?;
    let auto: Vec<f64> = leaves.iter().flat_map(|&l| g.grad(l).to_vec()).collect();
    let ops = g.op_kinds();
    let x0: Vec<f64> = inputs.iter().flat_map(|t| t.values().to_vec()).collect();
    let fd = finite_diff_grad(
        &mut |x| {
            let (g, _, l) = record(&inputs, Some(x), build, weights.as_ref())?;
            Ok(g.scalar(l).unwrap_or(f64::NAN))
        },
        &x0,
        STEP,
    )?;
    Ok(GradCase {
        name: name.to_string(),
        params: x0.len(),
        rel_error: relative_error(&auto, &fd),
        ops,
        redraws: 0,
    })
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn tiny_net() -> NetSpec {
    NetSpec {
        input: vec![1, 6, 6],
        layers: vec![
            LayerSpec::Conv {
                width: 4,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::MaxPool2,
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 4 },
            LayerSpec::Relu,
        ],
        head_classes: 3,
    }
}

fn tiny_batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
    Batch {
        images: random_tensor(rng, &[n, 1, 6, 6]),
        labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
    }
}

fn set_params(model: &mut MultiTaskModel, ids: &[ParamId], flat: &[f64]) {
    let mut off = 0;
    for &id in ids {
        let t = &mut model.store_mut().get_mut(id).tensor;
        let n = t.len();
        t.values_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn model_case(
    name: &str,
    model: &MultiTaskModel,
    ids: &[ParamId],
    value: &dyn Fn(&MultiTaskModel) -> Result<f64>,
    grad: &dyn Fn(&MultiTaskModel) -> Result<Vec<f64>>,
    ops: Vec<OpKind>,
) -> Result<Option<GradCase>> {
    let x0 = model.store().flatten(ids);
    let auto = grad(model)?;
    let mut work = model.clone();
    let mut f = |x: &[f64]| {
        set_params(&mut work, ids, x);
        value(&work)
    };
    let fd = finite_diff_grad(&mut f, &x0, STEP)?;
    // a ReLU or max-pool kink inside the stencil makes the difference
    // quotient depend on the step; such points have no gradient to check
    let half = finite_diff_grad(&mut f, &x0, STEP / 2.0)?;
    if relative_error(&fd, &half) > KINK_TOL {
        return Ok(None);
    }
    Ok(Some(GradCase {
        name: name.to_string(),
        params: x0.len(),
        rel_error: relative_error(&auto, &fd),
        ops,
        redraws: 0,
    }))
}

/// Step sensitivity above which a sampled point is treated as non-smooth.
const KINK_TOL: f64 = 1e-6;

/// Most fresh draws attempted for a composite case before giving up.
const MAX_REDRAWS: usize = 20;

fn redraw(
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Option<GradCase>>,
) -> Result<GradCase> {
    for redraws in 0..MAX_REDRAWS {
        if let Some(mut c) = draw(rng)? {
            c.redraws = redraws;
            return Ok(c);
        }
    }
    Err(Error::Oracle {
        msg: format!("no smooth point found in {MAX_REDRAWS} draws"),
    })
}

fn noises_for(
    model: &MultiTaskModel,
    others: &[usize],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<NoiseSample>>> {
    (0..m)
        .map(|_| {
            others
                .iter()
                .map(|&k| sample_noise(model.store(), k, 0.05, rng))
                .collect()
        })
        .collect()
}

fn flat_case(
    name: &str,
    task: usize,
    m: usize,
    lambda: f64,
    mode: KlMode,
    rng: &mut ChaCha8Rng,
) -> Result<GradCase> {
    redraw(rng, |rng| {
        let model = MultiTaskModel::build(&tiny_net(), 2, rng.random())?;
        let batch = tiny_batch(rng, 3);
        let noises = noises_for(&model, &[1 - task], m, rng)?;
        let ids = model.parameters(task, false)?;
        model_case(
            name,
            &model,
            &ids,
            &|mm| coop::empirical_flat_loss(mm, &batch, task, &noises, lambda, mode),
            &|mm| {
                Ok(
                    coop::flat_loss_grad(mm, &batch, task, &noises, lambda, mode)?
                        .1
                        .concat(),
                )
            },
            vec![OpKind::KlDivergence, OpKind::CrossEntropy, OpKind::Conv2d],
        )
    })
}

fn warmup_case(name: &str, m: usize, rng: &mut ChaCha8Rng) -> Result<GradCase> {
    redraw(rng, |rng| {
        let model = MultiTaskModel::build(&tiny_net(), 2, rng.random())?;
        let batches = vec![tiny_batch(rng, 2), tiny_batch(rng, 2)];
        let noises = noises_for(&model, &[0, 1], m, rng)?;
        let ids: Vec<ParamId> = (0..model.store().len()).collect();
        model_case(
            name,
            &model,
            &ids,
            &|mm| coop::warmup_loss(mm, &batches, &noises),
            &|mm| Ok(coop::warmup_loss_grad(mm, &batches, &noises)?.1.concat()),
            vec![OpKind::CrossEntropy, OpKind::Conv2d],
        )
    })
}

fn mlp_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (n, d, h, c) = (
        dims(rng, 2, 4),
        dims(rng, 2, 5),
        dims(rng, 2, 6),
        dims(rng, 2, 4),
    );
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let inputs = vec![
        random_tensor(rng, &[n, d]),
        random_tensor(rng, &[d, h]),
        random_tensor(rng, &[h]),
        random_tensor(rng, &[h, c]),
        random_tensor(rng, &[c]),
    ];
    op_case(
        "two-layer net cross-entropy",
        inputs,
        &move |g, v| {
            let z = g.matmul(v[0], v[1])?;
            let z = g.add_bias(z, v[2])?;
            let z = g.relu(z)?;
            let z = g.matmul(z, v[3])?;
            let z = g.add_bias(z, v[4])?;
            g.cross_entropy(z, &labels)
        },
        rng,
    )
}

fn case(k: usize, rng: &mut ChaCha8Rng) -> Result<GradCase> {
    match k {
        0 => {
            let (m, k2, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            let ins = vec![random_tensor(rng, &[m, k2]), random_tensor(rng, &[k2, n])];
            op_case("matmul", ins, &|g, v| g.matmul(v[0], v[1]), rng)
        }
        1 | 2 => {
            let pad = k - 1;
            let (b, c, o) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let (kh, kw) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let (h, w) = (dims(rng, kh.max(2), 5), dims(rng, kw.max(2), 5));
            let ins = vec![
                random_tensor(rng, &[b, c, h, w]),
                random_tensor(rng, &[o, c, kh, kw]),
            ];
            let name = format!("conv2d pad {pad}");
            op_case(&name, ins, &move |g, v| g.conv2d(v[0], v[1], pad), rng)
        }
        3 => {
            let (n, c, h) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 3));
            let ins = vec![random_tensor(rng, &[n, c, h, h]), random_tensor(rng, &[c])];
            op_case("add_bias", ins, &|g, v| g.add_bias(v[0], v[1]), rng)
        }
        4 => {
            let n = dims(rng, 2, 20);
            op_case("relu", vec![off_kink(rng, &[n])], &|g, v| g.relu(v[0]), rng)
        }
        5 => {
            let (n, c, h, w) = (
                dims(rng, 1, 2),
                dims(rng, 1, 3),
                2 * dims(rng, 1, 3),
                2 * dims(rng, 1, 3),
            );
            op_case(
                "max_pool2",
                vec![random_tensor(rng, &[n, c, h, w])],
                &|g, v| g.max_pool2(v[0]),
                rng,
            )
        }
        6 => {
            let (n, c, h) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
            op_case(
                "flatten and reshape",
                vec![random_tensor(rng, &[n, c, h])],
                &move |g, v| {
                    let f = g.flatten(v[0])?;
                    g.reshape(f, vec![n * c * h])
                },
                rng,
            )
        }
        7 => {
            let (n, a, b, h) = (
                dims(rng, 1, 3),
                dims(rng, 1, 3),
                dims(rng, 1, 3),
                dims(rng, 1, 3),
            );
            let ins = vec![
                random_tensor(rng, &[n, a, h]),
                random_tensor(rng, &[n, b, h]),
            ];
            op_case("concat", ins, &|g, v| g.concat(v, 1), rng)
        }
        8 => {
            let (n, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
            op_case(
                "softmax",
                vec![random_tensor(rng, &[n, c])],
                &|g, v| g.softmax(v[0]),
                rng,
            )
        }
        9 => {
            let (r, c) = (dims(rng, 2, 5), dims(rng, 1, 4));
            let rows: Vec<usize> = (0..dims(rng, 1, 6))
                .map(|_| rng.random_range(0..r))
                .collect();
            op_case(
                "gather_rows",
                vec![random_tensor(rng, &[r, c])],
                &move |g, v| g.gather_rows(v[0], &rows),
                rng,
            )
        }
        10 => {
            let (n, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            op_case(
                "cross_entropy",
                vec![random_tensor(rng, &[n, c])],
                &move |g, v| g.cross_entropy(v[0], &labels),
                rng,
            )
        }
        11 => {
            let (n, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
            let ins = vec![random_tensor(rng, &[n, c]), random_tensor(rng, &[n, c])];
            op_case(
                "kl_divergence",
                ins,
                &|g, v| {
                    let p = g.softmax(v[0])?;
                    let q = g.softmax(v[1])?;
                    g.kl_divergence(p, q)
                },
                rng,
            )
        }
        12 => {
            let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
            let ins = vec![
                random_tensor(rng, &s),
                random_tensor(rng, &s),
                random_tensor(rng, &s),
            ];
            op_case(
                "add, sub and mul",
                ins,
                &|g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.sub(a, v[2])?;
                    g.mul(b, v[0])
                },
                rng,
            )
        }
        13 => {
            let n = dims(rng, 1, 8);
            let f = rng.random_range(-2.0..2.0);
            op_case(
                "scale, exp, mean and sum",
                vec![random_tensor(rng, &[n])],
                &move |g, v| {
                    let a = g.scale(v[0], f)?;
                    let e = g.exp(a)?;
                    let m = g.mean(e)?;
                    let s = g.sum(v[0])?;
                    g.mul(m, s)
                },
                rng,
            )
        }
        14 => mlp_case(rng),
        15 => flat_case(
            "flat loss, task 1, literal KL, M=3",
            0,
            3,
            0.5,
            KlMode::Literal,
            rng,
        ),
        16 => flat_case(
            "flat loss, task 2, literal KL, M=2",
            1,
            2,
            1.0,
            KlMode::Literal,
            rng,
        ),
        17 => flat_case(
            "flat loss, task 1, clean-reference KL, M=1",
            0,
            1,
            0.7,
            KlMode::VsClean,
            rng,
        ),
        18 => flat_case(
            "flat loss, task 2, clean-reference KL, M=2",
            1,
            2,
            0.3,
            KlMode::VsClean,
            rng,
        ),
        _ => warmup_case("warm-up loss, M=2", 2, rng),
    }
}

/// Number of distinct case generators; the suite cycles through them.
const KINDS: usize = 20;

/// Runs `count` randomized gradient checks, cycling through every op and
/// composite objective with fresh shapes and values each round.
pub fn gradient_check_suite(seed: u64, count: usize) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| case(i % KINDS, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_round_passes_and_covers_every_op() {
        let cases = gradient_check_suite(3, KINDS).unwrap();
        for c in &cases {
            assert!(c.rel_error < 1e-5, "{}: {:e}", c.name, c.rel_error);
        }
        let kinds = [
            OpKind::MatMul,
            OpKind::Conv2d,
            OpKind::AddBias,
            OpKind::Relu,
            OpKind::MaxPool2,
            OpKind::Reshape,
            OpKind::Concat,
            OpKind::Softmax,
            OpKind::GatherRows,
            OpKind::CrossEntropy,
            OpKind::KlDivergence,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::Sum,
            OpKind::Exp,
        ];
        assert!(cases.iter().all(|c| c.redraws < MAX_REDRAWS));
        for k in kinds {
            assert!(
                cases.iter().any(|c| c.ops.contains(&k)),
                "{k:?} not covered"
            );
        }
    }
}
