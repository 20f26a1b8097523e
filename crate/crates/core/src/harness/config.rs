use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::coop::TrainConfig;
use crate::data::SyntheticTwoTask;
use crate::error::{Error, Result};

/// Which landscape a landscape experiment trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapePreset {
    FlatVsSharp,
    SymmetricDoubleWell,
}

/// The even/odd MNIST split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistDataset {
    /// Directory holding the four IDX files. Defaults to
    /// `$MTCOOL_MNIST_DIR`, then `data/mnist`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Leading training images kept before the split.
    #[serde(default = "full_train")]
    pub train_subset: usize,
    /// Leading test images kept before the split.
    #[serde(default = "full_test")]
    pub test_subset: usize,
    /// Leading task-2 training samples on which negative transfer is
    /// measured; omitted means the iteration's first task-2 batch.
    #[serde(default)]
    pub probe_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    #[serde(default)]
    pub generator: SyntheticTwoTask,
    #[serde(default = "default_synthetic_batch")]
    pub batch_size: usize,
    /// Total hidden widths of the shared encoder.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// As for [`MnistDataset::probe_size`].
    #[serde(default)]
    pub probe_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeDataset {
    #[serde(default = "default_preset")]
    pub preset: LandscapePreset,
    /// Start point; omitted means a seeded jitter inside the sharp well.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
}

/// Where an experiment's data comes from, selected by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    MnistEvenOdd(MnistDataset),
    Synthetic(SyntheticDataset),
    Landscape(LandscapeDataset),
}

fn default_batch() -> usize {
    128
}
fn full_train() -> usize {
    60_000
}
fn full_test() -> usize {
    10_000
}
fn default_synthetic_batch() -> usize {
    32
}
fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_preset() -> LandscapePreset {
    LandscapePreset::FlatVsSharp
}

impl DatasetConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::MnistEvenOdd(_) => "mnist_even_odd",
            DatasetConfig::Synthetic(_) => "synthetic",
            DatasetConfig::Landscape(_) => "landscape",
        }
    }

    /// Re-reads a `[dataset]` table against the struct its `kind` selects,
    /// so that errors carry the full key path. The tagged enum alone only
    /// reports `dataset`.
    fn diagnose(table: &toml::Table) -> Option<Error> {
        fn check<T: serde::de::DeserializeOwned>(t: toml::Table) -> Option<Error> {
            let value = toml::Value::Table(t);
            serde_path_to_error::deserialize::<_, T>(value)
                .err()
                .map(|e| {
                    let key = format!("dataset.{}", e.path());
                    let msg = e.into_inner().message().trim().to_string();
                    Error::config(key, msg)
                })
        }
        let mut t = table.clone();
        let kind = t.remove("kind")?;
        match kind.as_str()? {
            "mnist_even_odd" => check::<MnistDataset>(t),
            "synthetic" => check::<SyntheticDataset>(t),
            "landscape" => check::<LandscapeDataset>(t),
            _ => None,
        }
    }
}

/// Resolved MNIST directory: explicit path, then `$MTCOOL_MNIST_DIR`,
/// then `data/mnist` relative to the working directory.
pub fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os("MTCOOL_MNIST_DIR") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from("data/mnist"),
    }
}

/// A complete experiment: methods, data, optimizer settings, repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub repeats: usize,
    /// Master seed; per-repeat seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    /// Concurrent repeat slots.
    #[serde(default = "one")]
    pub workers: usize,
    /// Optional KL weights to sweep; each value gets its own subdirectory.
    #[serde(default)]
    pub lambda_sweep: Vec<f64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// Parses TOML, reporting the full key path of any type error or
    /// unknown key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("", e.to_string().trim().to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            if key == "dataset" {
                let dataset = toml::from_str::<toml::Table>(text)
                    .ok()
                    .and_then(|t| t.get("dataset").and_then(|d| d.as_table()).cloned());
                if let Some(found) = dataset.as_ref().and_then(DatasetConfig::diagnose) {
                    return found;
                }
            }
            let msg = e.into_inner().message().trim().to_string();
            Error::config(if key == "." { String::new() } else { key }, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Range checks, cross-field constraints and path existence.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::config("methods", format!("`{m}` listed twice")));
            }
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        for (i, &l) in self.lambda_sweep.iter().enumerate() {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config(format!("lambda_sweep[{i}]"), "lambda >= 0"));
            }
        }
        self.train.validate()?;
        for &l in &self.lambda_sweep {
            let mut t = self.train.clone();
            t.kl_weight = l;
            t.validate()?;
        }
        match &self.dataset {
            DatasetConfig::MnistEvenOdd(MnistDataset {
                dir,
                batch_size,
                train_subset,
                test_subset,
                probe_size,
            }) => {
                let d = mnist_dir(dir.as_deref());
                if !d.is_dir() {
                    return Err(Error::config(
                        "dataset.dir",
                        format!("{} does not exist", d.display()),
                    ));
                }
                for (f, _) in crate::data::fetch::MNIST_FILES {
                    if !d.join(f).is_file() {
                        return Err(Error::config(
                            "dataset.dir",
                            format!("{} is missing", d.join(f).display()),
                        ));
                    }
                }
                if *batch_size == 0 {
                    return Err(Error::config("dataset.batch_size", "must be >= 1"));
                }
                if !(1..=60_000).contains(train_subset) {
                    return Err(Error::config(
                        "dataset.train_subset",
                        "must be in 1..=60000",
                    ));
                }
                if !(1..=10_000).contains(test_subset) {
                    return Err(Error::config("dataset.test_subset", "must be in 1..=10000"));
                }
                if *probe_size == Some(0) {
                    return Err(Error::config("dataset.probe_size", "must be >= 1"));
                }
            }
            DatasetConfig::Synthetic(SyntheticDataset {
                generator,
                batch_size,
                hidden,
                probe_size,
            }) => {
                generator.validate().map_err(|e| match e {
                    Error::Config { key, msg } => {
                        Error::config(format!("dataset.generator.{key}"), msg)
                    }
                    other => other,
                })?;
                if *batch_size == 0 || *batch_size > generator.train_per_task {
                    return Err(Error::config(
                        "dataset.batch_size",
                        "must be in 1..=dataset.generator.train_per_task",
                    ));
                }
                if *probe_size == Some(0) {
                    return Err(Error::config("dataset.probe_size", "must be >= 1"));
                }
                if hidden.is_empty() {
                    return Err(Error::config(
                        "dataset.hidden",
                        "at least one hidden layer is required",
                    ));
                }
                if let Some(i) = hidden.iter().position(|&w| w == 0 || w % 2 != 0) {
                    return Err(Error::config(
                        format!("dataset.hidden[{i}]"),
                        "widths must be positive and divisible by the task count (2)",
                    ));
                }
            }
            DatasetConfig::Landscape(LandscapeDataset { start, .. }) => {
                if self.methods.contains(&Method::Independent) {
                    return Err(Error::config(
                        "methods",
                        "`independent` is not defined on a landscape",
                    ));
                }
                if let Some(s) = start {
                    if s.len() != 2 || s.iter().any(|v| !v.is_finite()) {
                        return Err(Error::config(
                            "dataset.start",
                            "must be two finite coordinates",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
