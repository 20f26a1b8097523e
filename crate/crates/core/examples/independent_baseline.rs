//! Trains one full-width single-task model per task and compares its
//! accuracy and size with a shared two-task model trained by MT-COOL.
//!
//! cargo run --release --example independent_baseline

use mtcool::baselines::{independent_param_ratio, train_independent, train_method, Method};
use mtcool::coop::{KlMode, TrainConfig};
use mtcool::data::{SyntheticTwoTask, TaskData};
use mtcool::network::{MultiTaskModel, NetSpec};

fn main() -> mtcool::Result<()> {
    let gen = SyntheticTwoTask::default();
    let d = gen.generate()?;
    let spec = NetSpec::mlp(gen.input_dim, &[16], gen.classes);
    let cfg = TrainConfig {
        kl_mode: KlMode::VsClean,
        eval_every: 0,
        ..TrainConfig::default()
    };

    let (models, _) = train_independent(&spec, &d.train, 32, 0, 0, &cfg, None)?;
    let mut shared = MultiTaskModel::build(&spec, 2, 0)?;
    train_method(
        Method::MtCool,
        &mut shared,
        &mut TaskData::new(d.train.clone(), 32, 0)?,
        &cfg,
        None,
    )?;

    for (t, (test, single)) in d.test.iter().zip(&models).enumerate() {
        println!(
            "task {}: independent {:.4}, MT-COOL {:.4}",
            t + 1,
            single.accuracy(&test.images, &test.labels, 0)?,
            shared.accuracy(&test.images, &test.labels, t)?
        );
    }
    println!(
        "independent models use {:.2}x the parameters",
        independent_param_ratio(&spec, 2)
    );
    Ok(())
}
