//! Experiment driver: config files, repeat orchestration, CSV artifacts,
//! summary statistics and SVG plots.

pub mod config;
pub mod plot;
pub mod records;
pub mod stats;

pub use config::{
    mnist_dir, DatasetConfig, ExperimentConfig, LandscapeDataset, LandscapePreset, MnistDataset,
    SyntheticDataset,
};
pub use records::{read_csv, RunTable, SCHEMA_VERSION};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::baselines::{self, Method};
use crate::coop::{self, NoData, TrainConfig, TrainOutcome};
use crate::data::{load_mnist, split_even_odd, LabeledSet, TaskData};
use crate::error::{Error, Result};
use crate::network::{save_checkpoint, MultiTaskModel, NetSpec};
use crate::verify::LandscapeSpec;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeds of one repeat. Every method of a repeat shares them, so
/// comparisons across methods are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepeatSeeds {
    pub model: u64,
    pub loader: u64,
    pub train: u64,
    pub data: u64,
}

/// Seeds for `repeat`, a pure function of `(master, repeat)`.
pub fn repeat_seeds(master: u64, repeat: usize) -> RepeatSeeds {
    let base = splitmix64(master ^ splitmix64(repeat as u64));
    let stream = |k: u64| splitmix64(base.wrapping_add(k));
    RepeatSeeds {
        model: stream(1),
        loader: stream(2),
        train: stream(3),
        data: stream(4),
    }
}

/// Loaded data shared by every job of an experiment.
enum Prepared {
    Labeled {
        spec: NetSpec,
        batch_size: usize,
        probe: Option<usize>,
        train: Vec<LabeledSet>,
        test: Vec<LabeledSet>,
    },
    /// Synthetic data is regenerated per repeat from the repeat's seed.
    Synthetic {
        spec: NetSpec,
        batch_size: usize,
        probe: Option<usize>,
        generator: crate::data::SyntheticTwoTask,
    },
    Landscape {
        spec: LandscapeSpec,
        start: Option<Vec<f64>>,
    },
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    Ok(match &cfg.dataset {
        DatasetConfig::MnistEvenOdd(MnistDataset {
            dir,
            batch_size,
            train_subset,
            test_subset,
            probe_size,
        }) => {
            let d = mnist_dir(dir.as_deref());
            let train = load_mnist(&d, true)?.head(*train_subset);
            let test = load_mnist(&d, false)?.head(*test_subset);
            Prepared::Labeled {
                spec: NetSpec::lenet(),
                batch_size: *batch_size,
                probe: *probe_size,
                train: split_even_odd(&train)?.tasks,
                test: split_even_odd(&test)?.tasks,
            }
        }
        DatasetConfig::Synthetic(SyntheticDataset {
            generator,
            batch_size,
            hidden,
            probe_size,
        }) => Prepared::Synthetic {
            spec: NetSpec::mlp(generator.input_dim, hidden, generator.classes),
            batch_size: *batch_size,
            probe: *probe_size,
            generator: generator.clone(),
        },
        DatasetConfig::Landscape(LandscapeDataset { preset, start }) => Prepared::Landscape {
            spec: match preset {
                LandscapePreset::FlatVsSharp => LandscapeSpec::flat_vs_sharp()?,
                LandscapePreset::SymmetricDoubleWell => LandscapeSpec::symmetric_double_well(),
            },
            start: start.clone(),
        },
    })
}

/// One training run of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub lambda: Option<f64>,
    pub method: Method,
    pub repeat: usize,
}

impl Job {
    fn dir(&self, root: &Path) -> PathBuf {
        match self.lambda {
            Some(l) => root.join(format!("lambda_{l}")).join(self.method.name()),
            None => root.join(self.method.name()),
        }
    }

    pub fn csv_path(&self, root: &Path) -> PathBuf {
        self.dir(root).join(format!("run_{}.csv", self.repeat))
    }
}

/// Every job of `cfg`, in a fixed order.
pub fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let lambdas: Vec<Option<f64>> = if cfg.lambda_sweep.is_empty() {
        vec![None]
    } else {
        cfg.lambda_sweep.iter().map(|&l| Some(l)).collect()
    };
    let mut out = Vec::new();
    for lambda in lambdas {
        for &method in &cfg.methods {
            for repeat in 0..cfg.repeats {
                out.push(Job {
                    lambda,
                    method,
                    repeat,
                });
            }
        }
    }
    out
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn accuracy_eval<'a>(
    test: &'a [LabeledSet],
) -> impl FnMut(&MultiTaskModel) -> Result<Vec<f64>> + 'a {
    move |m| {
        test.iter()
            .enumerate()
            .map(|(t, s)| m.accuracy(&s.images, &s.labels, t))
            .collect()
    }
}

/// Trains one model pair (or independent models) on labelled data and
/// writes a checkpoint next to the CSV.
#[allow(clippy::too_many_arguments)]
fn run_labeled(
    job: &Job,
    cfg: &TrainConfig,
    seeds: RepeatSeeds,
    spec: &NetSpec,
    batch_size: usize,
    probe: Option<usize>,
    train: &[LabeledSet],
    test: &[LabeledSet],
    ckpt: &Path,
) -> Result<TrainOutcome> {
    if job.method == Method::Independent {
        let mut ev = |t: usize, m: &MultiTaskModel| m.accuracy(&test[t].images, &test[t].labels, 0);
        let (models, outcome) = baselines::train_independent(
            spec,
            train,
            batch_size,
            seeds.loader,
            seeds.model,
            cfg,
            Some(&mut ev),
        )?;
        for (t, m) in models.iter().enumerate() {
            save_checkpoint(m, &ckpt.with_extension(format!("task{}.ckpt", t + 1)))?;
        }
        return Ok(outcome);
    }
    let mut model = MultiTaskModel::build(spec, train.len(), seeds.model)?;
    let mut data = TaskData::new(train.to_vec(), batch_size, seeds.loader)?;
    if let Some(n) = probe {
        data = data.with_probe(n);
    }
    let mut ev = accuracy_eval(test);
    let outcome = baselines::train_method(job.method, &mut model, &mut data, cfg, Some(&mut ev))?;
    save_checkpoint(&model, ckpt)?;
    Ok(outcome)
}

fn run_job(cfg: &ExperimentConfig, prepared: &Prepared, job: &Job) -> Result<TrainOutcome> {
    let seeds = repeat_seeds(cfg.seed, job.repeat);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seeds.train;
    if let Some(l) = job.lambda {
        train_cfg.kl_weight = l;
    }
    let csv = job.csv_path(&cfg.output);
    let ckpt = csv.with_extension("ckpt");
    let dir = job.dir(&cfg.output);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))?;
    let outcome = match prepared {
        Prepared::Labeled {
            spec,
            batch_size,
            probe,
            train,
            test,
        } => run_labeled(
            job,
            &train_cfg,
            seeds,
            spec,
            *batch_size,
            *probe,
            train,
            test,
            &ckpt,
        )?,
        Prepared::Synthetic {
            spec,
            batch_size,
            probe,
            generator,
        } => {
            let mut g = generator.clone();
            g.seed = generator.seed ^ seeds.data;
            let d = g.generate()?;
            run_labeled(
                job,
                &train_cfg,
                seeds,
                spec,
                *batch_size,
                *probe,
                &d.train,
                &d.test,
                &ckpt,
            )?
        }
        Prepared::Landscape { spec, start } => {
            let start = start
                .clone()
                .unwrap_or_else(|| spec.sharp_start(seeds.data));
            let mut obj = spec.objective(&start)?;
            baselines::train_method(job.method, &mut obj, &mut NoData, &train_cfg, None)?
        }
    };
    let tasks = outcome.records.first().map_or(0, |r| r.loss.len());
    write(&csv, records::to_csv(&outcome.records, tasks)?)?;
    write(
        &csv.with_file_name(format!("timing_{}.csv", job.repeat)),
        records::timing_csv(&outcome.records),
    )?;
    Ok(outcome)
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub lambda: Option<f64>,
    pub metric: String,
    pub method: Method,
    /// 1-based task index; 0 for run-level metrics.
    pub task: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// One row of `comparisons.csv`: paired test of `a` against `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub lambda: Option<f64>,
    pub metric: String,
    pub task: usize,
    pub a: Method,
    pub b: Method,
    pub test: stats::PairedTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub comparisons: Vec<ComparisonRow>,
}

impl Summary {
    pub fn find(
        &self,
        lambda: Option<f64>,
        metric: &str,
        method: Method,
        task: usize,
    ) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.lambda == lambda && r.metric == metric && r.method == method && r.task == task
        })
    }

    pub fn to_csv(&self) -> String {
        let lam = |l: Option<f64>| l.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("lambda,metric,method,task,n,mean,std\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                lam(r.lambda),
                r.metric,
                r.method,
                r.task,
                r.values.len(),
                r.mean,
                r.std
            );
        }
        s
    }

    pub fn comparisons_csv(&self) -> String {
        let lam = |l: Option<f64>| l.map(|v| v.to_string()).unwrap_or_default();
        let mut s =
            String::from("lambda,metric,task,a,b,n,mean_diff,wins,t,p_greater,p_two_sided\n");
        for c in &self.comparisons {
            let t = &c.test;
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                lam(c.lambda),
                c.metric,
                c.task,
                c.a,
                c.b,
                t.n,
                t.mean_diff,
                t.wins,
                t.t,
                t.p_greater,
                t.p_two_sided
            );
        }
        s
    }
}

/// Per-run metrics read back from a CSV: final accuracy (or final loss when
/// no accuracy was recorded) per task and the negative-transfer rate.
fn run_metrics(table: &RunTable) -> Vec<(String, usize, f64)> {
    let mut out = Vec::new();
    match table.final_accuracy() {
        Some(acc) => out.extend(
            acc.iter()
                .enumerate()
                .map(|(t, &a)| ("accuracy".to_string(), t + 1, a)),
        ),
        None => {
            if let Some(last) = table.rows.last() {
                out.extend(
                    last.loss
                        .iter()
                        .enumerate()
                        .map(|(t, &l)| ("final_loss".to_string(), t + 1, l)),
                );
            }
        }
    }
    if let Some(r) = table.negative_transfer_rate() {
        out.push(("negative_transfer".to_string(), 0, r));
    }
    out
}

/// Recomputes the summary of a finished experiment from its CSV files.
pub fn summarize(cfg: &ExperimentConfig) -> Result<Summary> {
    let mut metrics = Vec::new();
    for job in jobs(cfg) {
        let table = read_csv(&job.csv_path(&cfg.output))?;
        metrics.push((job, run_metrics(&table)));
    }
    let mut rows: Vec<SummaryRow> = Vec::new();
    for (job, ms) in &metrics {
        for (metric, task, v) in ms {
            match rows.iter_mut().find(|r| {
                r.lambda == job.lambda
                    && &r.metric == metric
                    && r.method == job.method
                    && r.task == *task
            }) {
                Some(r) => r.values.push(*v),
                None => rows.push(SummaryRow {
                    lambda: job.lambda,
                    metric: metric.clone(),
                    method: job.method,
                    task: *task,
                    values: vec![*v],
                    mean: 0.0,
                    std: 0.0,
                }),
            }
        }
    }
    for r in &mut rows {
        (r.mean, r.std) = stats::mean_std(&r.values);
    }
    let mut comparisons = Vec::new();
    for (i, x) in rows.iter().enumerate() {
        for y in &rows[i + 1..] {
            if x.lambda == y.lambda
                && x.metric == y.metric
                && x.task == y.task
                && x.values.len() == y.values.len()
            {
                comparisons.push(ComparisonRow {
                    lambda: x.lambda,
                    metric: x.metric.clone(),
                    task: x.task,
                    a: x.method,
                    b: y.method,
                    test: stats::paired_t_test(&x.values, &y.values),
                });
            }
        }
    }
    Ok(Summary { rows, comparisons })
}

/// Progress callback: receives one line per finished job.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

/// Runs every job of `cfg` on `cfg.workers` threads, writes per-run CSVs,
/// timing sidecars, checkpoints, `experiment.toml`, `summary.csv` and
/// `comparisons.csv` under `cfg.output`, and returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig, progress: Option<Progress<'_>>) -> Result<Summary> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    write(&cfg.output.join("experiment.toml"), cfg.to_toml())?;
    if let Prepared::Landscape { spec, .. } = &prepared {
        write(
            &cfg.output.join("landscape.csv"),
            plot::landscape_grid_csv(spec, 101),
        )?;
    }
    let all = jobs(cfg);
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(all.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= all.len() || failure.lock().expect("lock").is_some() {
                    break;
                }
                let job = &all[k];
                match run_job(cfg, &prepared, job) {
                    Ok(o) => {
                        if let Some(p) = progress {
                            let acc = o.records.iter().rev().find_map(|r| r.accuracy.clone());
                            let wall = o.records.last().map_or(0.0, |r| r.wall_ms / 1e3);
                            p(&format!(
                                "{} repeat {}{}: final accuracy {:?}, {wall:.1}s",
                                job.method,
                                job.repeat,
                                job.lambda
                                    .map(|l| format!(" (lambda {l})"))
                                    .unwrap_or_default(),
                                acc.unwrap_or_default(),
                            ));
                        }
                    }
                    Err(e) => {
                        failure.lock().expect("lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let summary = summarize(cfg)?;
    write(&cfg.output.join("summary.csv"), summary.to_csv())?;
    write(
        &cfg.output.join("comparisons.csv"),
        summary.comparisons_csv(),
    )?;
    Ok(summary)
}

/// Convenience for tests and examples: a single training run on the
/// landscape, returning the outcome without touching the filesystem.
pub fn train_landscape(
    spec: &LandscapeSpec,
    method: Method,
    start: &[f64],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, TrainOutcome)> {
    let mut obj = spec.objective(start)?;
    let out = coop::train(&mut obj, &mut NoData, &method.config(cfg), None)?;
    Ok((obj.point(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_pure_and_distinct() {
        assert_eq!(repeat_seeds(7, 3), repeat_seeds(7, 3));
        assert_ne!(repeat_seeds(7, 3), repeat_seeds(7, 4));
        assert_ne!(repeat_seeds(7, 3), repeat_seeds(8, 3));
        let s = repeat_seeds(0, 0);
        assert!(s.model != s.loader && s.loader != s.train);
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference generator seeded with 0
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn job_grid_covers_sweep() {
        let cfg = ExperimentConfig::from_toml(
            "methods = [\"mt_cool\", \"no_reg\"]\nrepeats = 3\noutput = \"o\"\nlambda_sweep = [0.01, 0.1, 1.0]\n[dataset]\nkind = \"landscape\"\n",
        )
        .unwrap();
        let js = jobs(&cfg);
        assert_eq!(js.len(), 18);
        assert_eq!(
            js[0].csv_path(Path::new("o")),
            Path::new("o/lambda_0.01/mt_cool/run_0.csv")
        );
    }
}
