use lglab_core::tasks::TaskSpec;
use lglab_core::{Error, Result, TokenSeq};
use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{min_len, TrainConfig};
use crate::model::{init_model, Group, TrainModel};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction and one learning rate per parameter group.
pub struct Adam {
    m: TrainModel,
    v: TrainModel,
    t: i32,
}

impl Adam {
    pub fn new(model: &TrainModel) -> Self {
        Adam { m: model.zeros_like(), v: model.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, model: &mut TrainModel, grad: &TrainModel, lr_hidden: f64, lr_embed: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let grads = grad.tensors();
        for (((group, p), (_, m)), ((_, v), (_, g))) in
            model.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut().into_iter().zip(grads))
        {
            let lr = match group {
                Group::Hidden => lr_hidden,
                Group::Embed => lr_embed,
            };
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// `n` fresh `(sequence, target)` pairs of length `len`; draws with an
/// undefined target are replaced.
pub fn sample_batch<R: Rng + ?Sized>(task: &TaskSpec, len: usize, n: usize, rng: &mut R) -> Result<Vec<(TokenSeq, Vec<f64>)>> {
    let mut out = Vec::with_capacity(n);
    let mut rejected = 0usize;
    while out.len() < n {
        let x = task.generate(len, rng)?;
        match task.target(&x) {
            Ok(t) => out.push((x, t)),
            Err(Error::UndefinedTarget(msg)) => {
                rejected += 1;
                if rejected > 1000 * n {
                    return Err(Error::UndefinedTarget(format!("length {len} rarely admits a target: {msg}")));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub len: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: TrainModel,
    pub log: Vec<StepRecord>,
    /// True when training stopped because the loss fell below `stop_loss`.
    pub converged: bool,
}

/// Online training: each step draws a length uniformly from
/// `[min_len, train_len]` and a fresh batch, records its loss, and stops
/// before updating once the loss is below `stop_loss`.
pub fn train<R: Rng + ?Sized>(cfg: &TrainConfig, task: &TaskSpec, rng: &mut R) -> Result<TrainResult> {
    cfg.validate()?;
    task.validate()?;
    let lo = min_len(task, cfg.arch.pe);
    if cfg.train_len < lo {
        return Err(Error::Precondition(format!("train_len {} is below the minimum length {lo}", cfg.train_len)));
    }
    let mut model = init_model(cfg.arch, task.s_vocab(), task.out_dim(), rng)?;
    let mut adam = Adam::new(&model);
    let mut log = Vec::new();
    for step in 0..cfg.max_steps {
        let len = rng.random_range(lo..=cfg.train_len);
        let batch = sample_batch(task, len, cfg.batch, rng)?;
        let (loss, grad) = model.loss_and_grad(&batch).map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { step, loss },
            e => e,
        })?;
        log.push(StepRecord { step, len, loss });
        if step % 500 == 0 {
            debug!("step {step}: len {len}, loss {loss:.3e}");
        }
        if loss < cfg.stop_loss {
            return Ok(TrainResult { model, log, converged: true });
        }
        adam.step(&mut model, &grad, cfg.lr_hidden, cfg.lr_embed);
    }
    Ok(TrainResult { model, log, converged: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthLoss {
    pub test_len: usize,
    pub test_loss: f64,
    /// Standard error of the mean over individual sequences.
    pub std_err: f64,
}

/// Mean squared test loss at each length over `eval_batches` fresh batches.
pub fn eval_curve<R: Rng + ?Sized>(
    model: &TrainModel,
    task: &TaskSpec,
    test_lens: &[usize],
    eval_batches: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<LengthLoss>> {
    if eval_batches == 0 || batch_size == 0 {
        return Err(Error::Precondition("eval_batches and batch_size must be positive".into()));
    }
    let lo = min_len(task, model.arch.pe);
    test_lens
        .iter()
        .map(|&len| {
            if len < lo {
                return Err(Error::Precondition(format!("test length {len} is below the minimum length {lo}")));
            }
            let mut losses = Vec::with_capacity(eval_batches * batch_size);
            for _ in 0..eval_batches {
                for pair in sample_batch(task, len, batch_size, rng)? {
                    losses.push(model.loss(std::slice::from_ref(&pair))?);
                }
            }
            let n = losses.len() as f64;
            let mean = losses.iter().sum::<f64>() / n;
            let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            Ok(LengthLoss { test_len: len, test_loss: mean, std_err: (var / n).sqrt() })
        })
        .collect()
}
