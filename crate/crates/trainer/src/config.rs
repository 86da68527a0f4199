use lglab_core::tasks::TaskSpec;
use lglab_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// How position enters a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeKind {
    /// No positional information.
    None,
    /// Learned embedding table with `delta` rows, row `(i - 1) mod delta`.
    Periodic { delta: usize },
    /// Learned additive logit bias per head for offsets `0..=tau`.
    RelativeLocal { tau: usize },
}

impl PeKind {
    pub fn delta(self) -> usize {
        match self {
            PeKind::Periodic { delta } => delta,
            _ => 1,
        }
    }

    pub fn tau(self) -> usize {
        match self {
            PeKind::RelativeLocal { tau } => tau,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub depth: usize,
    pub heads_l1: usize,
    pub d: usize,
    pub mlp_width: usize,
    pub pe: PeKind,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.depth) {
            return Err(Error::Precondition(format!("depth must be 1 or 2, got {}", self.depth)));
        }
        if self.heads_l1 == 0 || self.d == 0 || self.mlp_width == 0 {
            return Err(Error::Precondition("heads, d and mlp_width must be positive".into()));
        }
        if let PeKind::Periodic { delta: 0 } = self.pe {
            return Err(Error::Precondition("periodic delta must be positive".into()));
        }
        Ok(())
    }

    /// Defaults per task: no positions for the simple task, a periodic table
    /// for mod-p, and relative biases over `k` offsets for k-gram.
    pub fn for_task(task: &TaskSpec, d: usize) -> Self {
        match *task {
            TaskSpec::SimpleTask { .. } => ArchConfig { depth: 1, heads_l1: 1, d, mlp_width: 4 * d, pe: PeKind::None },
            TaskSpec::ModPTask { period, .. } => {
                ArchConfig { depth: 1, heads_l1: 1, d, mlp_width: 4 * d, pe: PeKind::Periodic { delta: period } }
            }
            TaskSpec::KGram { k, .. } => {
                ArchConfig { depth: 2, heads_l1: k, d, mlp_width: 4 * d, pe: PeKind::RelativeLocal { tau: k } }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub train_len: usize,
    pub batch: usize,
    pub max_steps: usize,
    pub stop_loss: f64,
    pub lr_hidden: f64,
    pub lr_embed: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// `lr_hidden = 1e-2 / d`, `lr_embed = 1e-2`, batch 1024.
    pub fn new(arch: ArchConfig, train_len: usize, seed: u64) -> Self {
        TrainConfig {
            arch,
            train_len,
            batch: 1024,
            max_steps: 20_000,
            stop_loss: 1e-5,
            lr_hidden: 1e-2 / arch.d as f64,
            lr_embed: 1e-2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.train_len == 0 || self.batch == 0 || self.max_steps == 0 {
            return Err(Error::Precondition("train_len, batch and max_steps must be positive".into()));
        }
        if !(self.stop_loss > 0.0) {
            return Err(Error::Precondition("stop_loss must be positive".into()));
        }
        if !(self.lr_hidden >= 0.0 && self.lr_embed >= 0.0) {
            return Err(Error::Precondition("learning rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Shortest sequence length drawn for `task` under positional scheme `pe`.
pub fn min_len(task: &TaskSpec, pe: PeKind) -> usize {
    let task_min = match *task {
        TaskSpec::SimpleTask { .. } => 1,
        TaskSpec::ModPTask { period, .. } => period,
        TaskSpec::KGram { k, .. } => k + 2,
    };
    task_min.max(pe.tau() + 1).max(4)
}
