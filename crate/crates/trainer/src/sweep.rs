use lglab_core::rng::stream_rng;
use lglab_core::tasks::TaskSpec;
use lglab_core::{Error, Result};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, TrainConfig};
use crate::model::TrainModel;
use crate::train::{eval_curve, train};

/// One row of a length-generalization curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: String,
    pub param: f64,
    pub train_len: usize,
    pub test_len: usize,
    pub seed: u64,
    pub test_loss: f64,
}

pub const CSV_HEADER: [&str; 6] = ["task", "param", "train_len", "test_len", "seed", "test_loss"];

/// The task's swept parameter: `omega`, the period, or the vocabulary size.
pub fn task_param(task: &TaskSpec) -> f64 {
    match *task {
        TaskSpec::SimpleTask { omega } => omega,
        TaskSpec::ModPTask { period, .. } => period as f64,
        TaskSpec::KGram { s_vocab, .. } => s_vocab as f64,
    }
}

/// `task` with its swept parameter set to `value`.
pub fn with_param(task: &TaskSpec, value: f64) -> Result<TaskSpec> {
    let as_int = || {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(Error::Precondition(format!("parameter {value} must be a positive integer for {}", task.name())))
        }
    };
    let t = match *task {
        TaskSpec::SimpleTask { .. } => TaskSpec::SimpleTask { omega: value },
        TaskSpec::ModPTask { k, .. } => {
            let period = as_int()?;
            TaskSpec::ModPTask { period, k: k.min(period.saturating_sub(1)) }
        }
        TaskSpec::KGram { k, .. } => TaskSpec::KGram { k, s_vocab: as_int()? },
    };
    t.validate()?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub task: TaskSpec,
    pub params: Vec<f64>,
    pub train_lens: Vec<usize>,
    pub test_lens: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template for every run; `arch.pe`, `train_len` and `seed` are set per run.
    pub base: TrainConfig,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
}

/// Result of one `(param, train_len, seed)` run.
pub struct RunOutcome {
    pub task: TaskSpec,
    pub train_len: usize,
    pub seed: u64,
    pub model: TrainModel,
    pub steps: usize,
    pub final_loss: f64,
    pub rows: Vec<CurveRow>,
}

/// Trains and evaluates one configuration. Training uses stream 0 of the
/// seed and evaluation stream 1, so a run is a function of its inputs only.
pub fn run_one(spec: &SweepSpec, task: &TaskSpec, train_len: usize, seed: u64) -> Result<RunOutcome> {
    let mut cfg = spec.base;
    cfg.arch = ArchConfig { pe: ArchConfig::for_task(task, cfg.arch.d).pe, ..cfg.arch };
    if let TaskSpec::KGram { k, .. } = *task {
        cfg.arch.heads_l1 = k;
        cfg.arch.depth = 2;
    }
    cfg.train_len = train_len;
    cfg.seed = seed;
    let result = train(&cfg, task, &mut stream_rng(seed, 0))?;
    let curve =
        eval_curve(&result.model, task, &spec.test_lens, spec.eval_batches, spec.eval_batch_size, &mut stream_rng(seed, 1))?;
    let final_loss = result.log.last().map_or(f64::NAN, |r| r.loss);
    info!(
        "{} param {} train_len {train_len} seed {seed}: {} steps, final loss {final_loss:.3e}",
        task.name(),
        task_param(task),
        result.log.len()
    );
    let rows = curve
        .iter()
        .map(|c| CurveRow {
            task: task.name().to_string(),
            param: task_param(task),
            train_len,
            test_len: c.test_len,
            seed,
            test_loss: c.test_loss,
        })
        .collect();
    Ok(RunOutcome { task: task.clone(), train_len, seed, steps: result.log.len(), final_loss, model: result.model, rows })
}

/// Every `(param, train_len, seed)` run, in parallel on the current rayon
/// pool. Outcomes come back in grid order regardless of scheduling.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<RunOutcome>> {
    let mut jobs = Vec::new();
    for &p in &spec.params {
        let task = with_param(&spec.task, p)?;
        for &n in &spec.train_lens {
            for &s in &spec.seeds {
                jobs.push((task.clone(), n, s));
            }
        }
    }
    jobs.par_iter().map(|(task, n, s)| run_one(spec, task, *n, *s)).collect()
}
