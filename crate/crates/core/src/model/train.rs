use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward, Decoder, ForwardInput, ModelError, Result};
use crate::numkernel::{adam_step, lr_schedule, AdamConfig, AdamState, Graph, KernelError, ScheduleConfig, Tensor};
use crate::pipeline::DataPoint;
use crate::rng::{self, salt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Datapoints per optimizer step.
    pub batch_size: usize,
    /// When set, a batch instead grows until it holds at least this many
    /// trained positions, so models fed short and long datapoints see the
    /// same amount of signal per step.
    pub batch_tokens: Option<usize>,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3500,
            batch_size: 64,
            batch_tokens: None,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<LossRecord>,
    /// Number of epochs requested from the source.
    pub epochs: u64,
}

impl TrainOutcome {
    /// The loss trace as CSV with a header row.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
        }
        s
    }
}

struct Contribution {
    /// Loss summed over the datapoint's trained positions.
    loss_sum: f64,
    count: usize,
    grads: Vec<Tensor>,
}

fn contribution(decoder: &Decoder, dp: &DataPoint, dropout_seed: (u64, u64, u64)) -> Result<Contribution> {
    let input = ForwardInput::from_datapoint(dp, &decoder.config)?;
    let mut g = Graph::new(&decoder.params);
    let (seed, step, slot) = dropout_seed;
    let mut rng = rng::stream(seed, &[salt::DROPOUT, step, slot]);
    let out = forward(&mut g, &decoder.config, &input, Some(&mut rng))?;
    let loss = g.cross_entropy_masked(out.logits, &dp.targets(), &dp.loss_mask)?;
    let count = dp.loss_mask.iter().filter(|&&m| m).count();
    let loss_sum = g.value(loss).item() as f64 * count as f64;
    let scale = count as f32;
    let mut grads = g.backward(loss)?.into_param_grads(&decoder.params);
    for t in &mut grads {
        t.scale_assign(scale);
    }
    Ok(Contribution { loss_sum, count, grads })
}

/// Minimizes the next-token loss over the loss-masked positions.
///
/// `source(epoch)` supplies the datapoints of one pass; a batch never spans
/// two epochs' shuffles except when one epoch runs out mid-batch. The loss
/// of a step is the mean over all trained positions of its batch, so long
/// datapoints weigh more than short ones. Per-datapoint work runs in
/// parallel and is reduced in batch order, which keeps results independent
/// of thread scheduling.
pub fn train<F>(decoder: &mut Decoder, cfg: &TrainConfig, mut source: F) -> Result<TrainOutcome>
where
    F: FnMut(u64) -> std::result::Result<Vec<DataPoint>, String>,
{
    cfg.schedule.validate()?;
    if cfg.steps > cfg.schedule.total_steps {
        return Err(ModelError::Config(format!(
            "{} steps exceed the schedule's {} total steps",
            cfg.steps, cfg.schedule.total_steps
        )));
    }
    if cfg.batch_size == 0 || cfg.batch_tokens == Some(0) {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    let mut state = AdamState::new(&decoder.params, cfg.adam);
    let mut queue: VecDeque<DataPoint> = VecDeque::new();
    let mut epochs = 0u64;
    let mut trace = Vec::with_capacity(cfg.steps as usize);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut positions = 0usize;
        let full = |n: usize, positions: usize| match cfg.batch_tokens {
            Some(budget) => positions >= budget,
            None => n >= cfg.batch_size,
        };
        while !full(batch.len(), positions) {
            if queue.is_empty() {
                let mut dps: Vec<DataPoint> = source(epochs).map_err(ModelError::Source)?;
                dps.retain(DataPoint::has_loss);
                if dps.is_empty() {
                    return Err(ModelError::Source(format!("epoch {epochs} has no trainable positions")));
                }
                dps.shuffle(&mut rng::stream(cfg.seed, &[salt::BATCH, epochs]));
                queue.extend(dps);
                epochs += 1;
            }
            let dp = queue.pop_front().expect("refilled above");
            positions += dp.loss_mask.iter().filter(|&&m| m).count();
            batch.push(dp);
        }
        let lr = lr_schedule(step, &cfg.schedule)?;

        let parts: Vec<Result<Contribution>> = {
            let dec: &Decoder = decoder;
            batch
                .par_iter()
                .enumerate()
                .map(|(slot, dp)| contribution(dec, dp, (cfg.seed, step, slot as u64)))
                .collect()
        };
        let diverged = |trace: &Vec<LossRecord>| ModelError::Diverged {
            step,
            loss: f64::NAN,
            trace: trace.clone(),
        };
        let mut total: Option<Vec<Tensor>> = None;
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for part in parts {
            let part = match part {
                Err(ModelError::Kernel(KernelError::NonFinite(_))) => return Err(diverged(&trace)),
                other => other?,
            };
            loss_sum += part.loss_sum;
            count += part.count;
            match &mut total {
                None => total = Some(part.grads),
                Some(acc) => acc.iter_mut().zip(&part.grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let mut grads = total.expect("non-empty batch");
        let loss = loss_sum / count as f64;
        if !loss.is_finite() {
            return Err(ModelError::Diverged {
                step,
                loss,
                trace,
            });
        }
        let inv = 1.0 / count as f32;
        grads.iter_mut().for_each(|g| g.scale_assign(inv));
        if let Some(limit) = cfg.clip_norm {
            let norm = grads.iter().map(|g| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
            if norm > limit {
                let k = (limit / norm) as f32;
                grads.iter_mut().for_each(|g| g.scale_assign(k));
            }
        }
        match adam_step(&mut decoder.params, &grads, &mut state, lr) {
            Err(KernelError::PoisonedGradient { .. }) => return Err(diverged(&trace)),
            other => other?,
        }
        trace.push(LossRecord { step, lr, loss });
        if step % 100 == 0 {
            log::debug!("step {step} lr {lr:.6} loss {loss:.4}");
        }
    }
    Ok(TrainOutcome { trace, epochs })
}
