//! Evaluates one task's flat objective: its loss averaged over noise drawn
//! on the other task's encoder slice, with and without the KL term, next
//! to the clean loss. Also shows one clamped inner step.
//!
//! cargo run --release --example flat_objective

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtcool::coop::{
    clamp_to_snapshot, clean_loss, empirical_flat_loss, flat_loss_grad, sample_noise, sgd_step,
    KlMode, ParamSnapshot,
};
use mtcool::data::{SyntheticTwoTask, TaskData};
use mtcool::network::{MultiTaskModel, NetSpec};

fn main() -> mtcool::Result<()> {
    let gen = SyntheticTwoTask::default();
    let d = gen.generate()?;
    let mut model = MultiTaskModel::build(&NetSpec::mlp(gen.input_dim, &[16], gen.classes), 2, 0)?;
    let mut data = TaskData::new(d.train, 32, 0)?;
    let batch = data.next_batch(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = 0.05;

    let noises: Vec<Vec<_>> = (0..8)
        .map(|_| sample_noise(model.store(), 1, b, &mut rng).map(|n| vec![n]))
        .collect::<mtcool::Result<_>>()?;
    println!(
        "clean task-1 loss             {:.6}",
        clean_loss(&model, &batch, 0)?
    );
    println!(
        "flat loss, M = 8              {:.6}",
        empirical_flat_loss(&model, &batch, 0, &noises, 0.0, KlMode::Literal)?
    );
    println!(
        "flat loss + 0.1 KL (literal)  {:.6}",
        empirical_flat_loss(&model, &batch, 0, &noises, 0.1, KlMode::Literal)?
    );
    println!(
        "flat loss + 0.1 KL (vs clean) {:.6}",
        empirical_flat_loss(&model, &batch, 0, &noises, 0.1, KlMode::VsClean)?
    );

    let snap = ParamSnapshot::take(model.store(), 0)?;
    let ids = model.store().ids(0, false)?;
    let (_, grads) = flat_loss_grad(&model, &batch, 0, &noises, 0.1, KlMode::Literal)?;
    sgd_step(model.store_mut(), &ids, &grads, 5.0);
    println!(
        "max shift after a large step  {:.4}",
        snap.max_shift(model.store())
    );
    let clamped = clamp_to_snapshot(model.store_mut(), &snap, b)?;
    println!(
        "clamped {clamped} coordinates; max shift now {:.4} (b = {b})",
        snap.max_shift(model.store())
    );
    Ok(())
}
