mod common;

use common::{bits, store_bits, toy_setup};
use mtcool::baselines::{train_method, Method};
use mtcool::coop::{Objective, TrainConfig, TrainOutcome, UpdateMode};
use mtcool::data::TaskData;
use mtcool::network::MultiTaskModel;
use mtcool::tensor::Graph;

const STEPS: usize = 50;

fn base() -> TrainConfig {
    TrainConfig {
        warmup_iters: 5,
        outer_iters: STEPS,
        eval_every: 10,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn eval(m: &MultiTaskModel) -> mtcool::Result<Vec<f64>> {
    let d = common::toy_task_data(32, 6, 3, 99);
    (0..2)
        .map(|t| m.accuracy(&d[t].images, &d[t].labels, t))
        .collect()
}

fn run(method: Method, cfg: &TrainConfig, seed: u64) -> (TrainOutcome, MultiTaskModel) {
    let (mut model, mut data) = toy_setup(seed);
    let mut ev = eval;
    let out = train_method(method, &mut model, &mut data, cfg, Some(&mut ev)).unwrap();
    (out, model)
}

fn assert_same_stream(a: &TrainOutcome, b: &TrainOutcome) {
    assert_eq!(bits(&a.warmup_losses), bits(&b.warmup_losses));
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(bits(&x.loss), bits(&y.loss), "iteration {}", x.iter);
        assert_eq!(x.accuracy, y.accuracy, "iteration {}", x.iter);
    }
}

#[test]
fn vanishing_box_simultaneous_mtcool_is_joint_bit_for_bit() {
    for seed in [1, 2, 3] {
        let mut cool = base();
        cool.bound = 1e-300;
        cool.kl_weight = 0.0;
        cool.update = UpdateMode::Simultaneous;
        assert!(cool.inject_noise);
        let (a, ma) = run(Method::MtCool, &cool, seed);
        let (b, mb) = run(Method::Joint, &base(), seed);
        assert_eq!(a.records.len(), STEPS);
        assert_same_stream(&a, &b);
        assert_eq!(store_bits(&ma), store_bits(&mb));
    }
}

#[test]
fn vanilla_is_mtcool_with_noise_clamp_and_kl_off() {
    for seed in [1, 2, 3] {
        let mut cool = base();
        cool.inject_noise = false;
        cool.clamp = false;
        cool.kl_weight = 0.0;
        let (a, ma) = run(Method::MtCool, &cool, seed);
        let (b, mb) = run(Method::Vanilla, &base(), seed);
        assert_same_stream(&a, &b);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.negative_transfer, y.negative_transfer);
        }
        assert_eq!(store_bits(&ma), store_bits(&mb));
    }
}

/// Cross-entropy gradients of the listed tasks' summed losses, taken with
/// respect to `trainable` parameters, written directly against the graph.
fn summed_loss_grads(
    m: &MultiTaskModel,
    batches: &[(usize, &mtcool::data::Batch)],
    trainable: &dyn Fn(usize) -> bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let leaves: Vec<_> = m
        .store()
        .iter()
        .enumerate()
        .map(|(id, p)| g.leaf(p.tensor.clone().with_grad(trainable(id))))
        .collect();
    let losses: Vec<_> = batches
        .iter()
        .map(|&(t, b)| m.task_output(&mut g, &leaves, t, b).unwrap().loss)
        .collect();
    let total = g.add_all(&losses).unwrap();
    g.backward(total).unwrap();
    let grads = leaves.iter().map(|&l| g.grad(l).to_vec()).collect();
    (g.scalar(total).unwrap(), grads)
}

fn step(m: &mut MultiTaskModel, grads: &[Vec<f64>], ids: &[usize], lr: f64) {
    for &id in ids {
        for (v, d) in m
            .store_mut()
            .get_mut(id)
            .tensor
            .values_mut()
            .iter_mut()
            .zip(&grads[id])
        {
            *v -= lr * d;
        }
    }
}

#[test]
fn vanilla_matches_hand_written_alternating_sgd() {
    let cfg = base();
    let (b, mb) = run(Method::Vanilla, &cfg, 5);

    let (mut m, mut data): (MultiTaskModel, TaskData) = toy_setup(5);
    let all: Vec<usize> = (0..m.store().len()).collect();
    for s in 0..cfg.warmup_iters {
        let b0 = data.next_batch(0);
        let b1 = data.next_batch(1);
        let (loss, grads) = summed_loss_grads(&m, &[(0, &b0), (1, &b1)], &|_| true);
        assert_eq!(loss.to_bits(), b.warmup_losses[s].to_bits(), "warm-up {s}");
        step(&mut m, &grads, &all, cfg.warmup_lr);
    }
    for rec in &b.records {
        let batches: Vec<_> = (0..2).map(|t| data.next_batch(t)).collect();
        for (t, batch) in batches.iter().enumerate() {
            let own: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&id| m.store().get(id).task == t)
                .collect();
            let (loss, grads) = summed_loss_grads(&m, &[(t, batch)], &|id| own.contains(&id));
            assert_eq!(
                loss.to_bits(),
                rec.loss[t].to_bits(),
                "iteration {} task {t}",
                rec.iter
            );
            step(&mut m, &grads, &own, cfg.inner_lr);
        }
    }
    assert_eq!(store_bits(&m), store_bits(&mb));
    assert_eq!(b.records.len(), STEPS);
}
