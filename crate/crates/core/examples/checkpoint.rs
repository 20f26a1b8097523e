//! Trains a small two-task model briefly, saves a checkpoint, reloads it
//! and checks that predictions and parameters are identical.
//!
//! cargo run --release --example checkpoint

use mtcool::coop::{train, TrainConfig};
use mtcool::data::{SyntheticTwoTask, TaskData};
use mtcool::network::{load_checkpoint, save_checkpoint, MultiTaskModel, NetSpec};

fn main() -> mtcool::Result<()> {
    let gen = SyntheticTwoTask::default();
    let d = gen.generate()?;
    let spec = NetSpec::mlp(gen.input_dim, &[16], gen.classes);
    let mut model = MultiTaskModel::build(&spec, 2, 0)?;
    let mut data = TaskData::new(d.train.clone(), 32, 0)?;
    let cfg = TrainConfig {
        warmup_iters: 50,
        outer_iters: 100,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(&mut model, &mut data, &cfg, None)?;

    let dir = std::env::temp_dir().join("mtcool-checkpoint-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("model.ckpt");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path, &spec)?;
    for t in 0..2 {
        let a = model.predict(&d.test[t].images, t, 256)?;
        let b = back.predict(&d.test[t].images, t, 256)?;
        println!(
            "task {}: accuracy {:.4}, predictions identical: {}",
            t + 1,
            model.accuracy(&d.test[t].images, &d.test[t].labels, t)?,
            a == b
        );
    }
    println!("parameters identical: {}", model.store() == back.store());
    println!("wrote {}", path.display());
    Ok(())
}
