//! Runs the ablation ladder (MT-COOL, without the KL term, Vanilla, Joint,
//! Independent) on the synthetic two-task benchmark and prints the summary
//! with paired comparisons.
//!
//! cargo run --release --example synthetic_ablation -- [repeats] [output]

use mtcool::baselines::Method;
use mtcool::coop::KlMode;
use mtcool::data::SyntheticTwoTask;
use mtcool::harness::config::{DatasetConfig, SyntheticDataset};
use mtcool::harness::{run_experiment, ExperimentConfig};

fn main() -> mtcool::Result<()> {
    let mut args = std::env::args().skip(1);
    let repeats = args.next().map_or(5, |s| s.parse().expect("repeats"));
    let output = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("mtcool-synthetic"), Into::into);
    let gen = SyntheticTwoTask::default();
    let mut cfg = ExperimentConfig {
        methods: Method::ALL.to_vec(),
        repeats,
        seed: 0,
        output,
        workers: 1,
        lambda_sweep: vec![],
        dataset: DatasetConfig::Synthetic(SyntheticDataset {
            batch_size: 32,
            hidden: vec![16],
            probe_size: Some(gen.train_per_task),
            generator: gen,
        }),
        train: Default::default(),
    };
    cfg.train.kl_mode = KlMode::VsClean;
    cfg.train.eval_every = 100;
    let summary = run_experiment(&cfg, None)?;
    for r in &summary.rows {
        println!(
            "{:<18} {:<12} task {} mean {:.4} std {:.4}",
            r.metric,
            r.method.name(),
            r.task,
            r.mean,
            r.std
        );
    }
    for c in summary.comparisons.iter().filter(|c| c.a == Method::MtCool) {
        println!(
            "{} vs {} ({} task {}): wins {}/{}, p(>) {:.3}",
            c.a, c.b, c.metric, c.task, c.test.wins, c.test.n, c.test.p_greater
        );
    }
    println!("results in {}", cfg.output.display());
    Ok(())
}
