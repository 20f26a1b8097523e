//! Reference training regimes for the ablation ladder. Every regime except
//! `Independent` is a reparameterization of [`coop::train`]; `Independent`
//! trains one full-width single-task model per task through the same loop.

use serde::{Deserialize, Serialize};

use crate::coop::{self, Objective, RunRecord, TrainConfig, TrainOutcome, UpdateMode};
use crate::data::{LabeledSet, TaskData};
use crate::error::{Error, Result};
use crate::network::{analytic_param_count, MultiTaskModel, NetSpec};

/// Training regime selected by an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MtCool,
    Vanilla,
    NoReg,
    Joint,
    Independent,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::MtCool,
        Method::Vanilla,
        Method::NoReg,
        Method::Joint,
        Method::Independent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MtCool => "mt_cool",
            Method::Vanilla => "vanilla",
            Method::NoReg => "no_reg",
            Method::Joint => "joint",
            Method::Independent => "independent",
        }
    }

    /// The [`TrainConfig`] this regime runs with, derived from `base`.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Method::MtCool => {}
            Method::NoReg => c.kl_weight = 0.0,
            Method::Vanilla | Method::Independent => {
                c.inject_noise = false;
                c.clamp = false;
                c.kl_weight = 0.0;
                c.update = UpdateMode::Alternating;
            }
            Method::Joint => {
                c.inject_noise = false;
                c.clamp = false;
                c.kl_weight = 0.0;
                c.update = UpdateMode::Simultaneous;
            }
        }
        c
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Trains `obj` under `method`. `Independent` needs separate models and is
/// rejected here; use [`train_independent`].
pub fn train_method<O: Objective>(
    method: Method,
    obj: &mut O,
    data: &mut dyn coop::BatchSource<O::Batch>,
    base: &TrainConfig,
    eval: Option<coop::Evaluator<'_, O>>,
) -> Result<TrainOutcome> {
    if method == Method::Independent {
        return Err(Error::invalid(
            "train_method",
            "independent training needs one model per task",
        ));
    }
    coop::train(obj, data, &method.config(base), eval)
}

/// Per-task evaluation hook for independent models: `(task, model)`.
pub type TaskEvaluator<'a> = &'a mut dyn FnMut(usize, &MultiTaskModel) -> Result<f64>;

/// Trains one single-task model of full nominal width per task. Task `t`
/// uses model seed `model_seed + t` and the same loader seed a multi-task
/// [`TaskData`] would give it, so it sees exactly the batches it would see
/// in a joint run and nothing from the other tasks.
pub fn train_independent(
    spec: &NetSpec,
    sets: &[LabeledSet],
    batch_size: usize,
    loader_seed: u64,
    model_seed: u64,
    base: &TrainConfig,
    mut eval: Option<TaskEvaluator<'_>>,
) -> Result<(Vec<MultiTaskModel>, TrainOutcome)> {
    let cfg = Method::Independent.config(base);
    let mut models = Vec::with_capacity(sets.len());
    let mut outcomes = Vec::with_capacity(sets.len());
    for (t, set) in sets.iter().enumerate() {
        let mut model = MultiTaskModel::build(spec, 1, model_seed.wrapping_add(t as u64))?;
        let mut data = TaskData::new(
            vec![set.clone()],
            batch_size,
            loader_seed.wrapping_add(t as u64),
        )?;
        let outcome = match eval.as_mut() {
            Some(f) => {
                let mut single = |m: &MultiTaskModel| Ok(vec![f(t, m)?]);
                coop::train(&mut model, &mut data, &cfg, Some(&mut single))?
            }
            None => coop::train(&mut model, &mut data, &cfg, None)?,
        };
        models.push(model);
        outcomes.push(outcome);
    }
    Ok((models, merge_outcomes(&outcomes)))
}

/// Zips per-task single-model outcomes into one multi-task stream. Wall
/// time is cumulative because the models train one after another.
pub fn merge_outcomes(parts: &[TrainOutcome]) -> TrainOutcome {
    let Some(first) = parts.first() else {
        return TrainOutcome {
            warmup_losses: Vec::new(),
            records: Vec::new(),
        };
    };
    let warmup_losses = (0..first.warmup_losses.len())
        .map(|s| parts.iter().map(|p| p.warmup_losses[s]).sum())
        .collect();
    let mut offset = vec![0.0; parts.len()];
    for i in 1..parts.len() {
        offset[i] = offset[i - 1] + parts[i - 1].records.last().map_or(0.0, |r| r.wall_ms);
    }
    let records = (0..first.records.len())
        .map(|k| {
            let rs: Vec<&RunRecord> = parts.iter().map(|p| &p.records[k]).collect();
            let accuracy = rs
                .iter()
                .map(|r| r.accuracy.as_ref().map(|a| a[0]))
                .collect::<Option<Vec<f64>>>();
            RunRecord {
                iter: rs[0].iter,
                loss: rs.iter().map(|r| r.loss[0]).collect(),
                accuracy,
                negative_transfer: None,
                clamped: rs.iter().map(|r| r.clamped[0]).collect(),
                max_shift: rs.iter().map(|r| r.max_shift[0]).collect(),
                coordinates: None,
                wall_ms: offset[parts.len() - 1] + rs[parts.len() - 1].wall_ms,
            }
        })
        .collect();
    TrainOutcome {
        warmup_losses,
        records,
    }
}

/// Scalar parameters of `tasks` independent full-width models divided by
/// those of one shared multi-task model.
pub fn independent_param_ratio(spec: &NetSpec, tasks: usize) -> f64 {
    (tasks * analytic_param_count(spec, 1)) as f64 / analytic_param_count(spec, tasks) as f64
}
