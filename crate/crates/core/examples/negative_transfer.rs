//! Counts how often a task-1 update raises task 2's training loss, under
//! MT-COOL and under Vanilla alternating training, on one synthetic draw.
//!
//! cargo run --release --example negative_transfer

use mtcool::baselines::{train_method, Method};
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
    for method in [Method::MtCool, Method::Vanilla] {
        let mut model = MultiTaskModel::build(&spec, 2, 1)?;
        let mut data = TaskData::new(d.train.clone(), 32, 2)?.with_probe(gen.train_per_task);
        let out = train_method(method, &mut model, &mut data, &cfg, None)?;
        let events: Vec<bool> = out
            .records
            .iter()
            .filter_map(|r| r.negative_transfer)
            .collect();
        let hits = events.iter().filter(|&&e| e).count();
        let late = &events[events.len() / 2..];
        println!(
            "{method:<8} negative transfer in {hits}/{} iterations ({:.3}); second half {:.3}",
            events.len(),
            hits as f64 / events.len() as f64,
            late.iter().filter(|&&e| e).count() as f64 / late.len() as f64
        );
    }
    Ok(())
}
