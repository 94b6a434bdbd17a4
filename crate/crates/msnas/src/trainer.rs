//! Supernet training for dynamic inference: sample one multi-stage
//! sub-network per iteration, sum per-stage classification losses with
//! knowledge distillation against the maximal architecture's final stage,
//! and step SGD with Nesterov momentum under a cosine learning-rate decay.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{resize_bilinear, Dataset};
use crate::error::{Error, Result};
use crate::ms_ops::{ExecCtx, MsNetwork};
use crate::nn::optim::Sgd;
use crate::nn::NodeId;
use crate::supernet::{sample_arch, MultiStageArch, Supernet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Nesterov momentum.
    pub momentum: f64,
    /// Applied to convolution/linear weights only.
    pub weight_decay: f64,
    pub initial_lr: f64,
    /// Distillation weight (0 disables the teacher pass entirely).
    pub kd_weight: f64,
    pub kd_temperature: f64,
    pub seed: u64,
    /// Data-parallel chunks per step; fixed in the config so results are
    /// reproducible regardless of the host's thread count.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 3e-5,
            initial_lr: 0.05,
            kd_weight: 1.0,
            kd_temperature: 1.0,
            seed: 0,
            shards: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.kd_weight >= 0.0) || !(self.kd_temperature > 0.0) {
            return Err(Error::Config("bad distillation settings".into()));
        }
        if self.shards == 0 {
            return Err(Error::Config("need at least one shard".into()));
        }
        Ok(())
    }
}

/// Cosine decay to zero: `lr0 * 0.5 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(initial: f64, step: usize, total_steps: usize) -> f64 {
    let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
    initial * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// The teacher: maximal depth, kernel and width at the sampled resolution.
pub fn teacher_arch(supernet: &Supernet, resolution: usize) -> MultiStageArch {
    let mut arch = MultiStageArch::maximal(&supernet.config);
    arch.resolution = resolution;
    arch
}

/// Build the total training loss on `ctx`: for each stage s,
/// `CE(logits_s, labels) + kd_weight * tau^2 * KL(softmax(logits_s / tau) ||
/// softmax(teacher / tau))`, summed over stages. Returns the total node, the
/// per-stage loss nodes, and the per-stage logits nodes.
pub fn stage_losses(
    ctx: &mut ExecCtx,
    net: &MsNetwork,
    images: &Tensor,
    labels: &[usize],
    teacher_logits: Option<&Tensor>,
    kd_weight: f64,
    kd_temperature: f64,
) -> Result<(NodeId, Vec<NodeId>, Vec<NodeId>)> {
    let teacher_node = teacher_logits.map(|t| ctx.tape.constant(t.clone()));
    let mut per_stage = Vec::new();
    let mut logits_nodes = Vec::new();
    for s in 1..=net.stages {
        let out = net.forward_stage(ctx, s, images)?;
        let ce = ctx.tape.softmax_ce(out.logits, labels);
        let loss = match teacher_node {
            Some(t) if kd_weight > 0.0 => {
                let kl = ctx.tape.kd_kl(out.logits, t, kd_temperature);
                let scaled = ctx.tape.scale(kl, kd_weight * kd_temperature * kd_temperature);
                ctx.tape.sum_scalars(&[ce, scaled])
            }
            _ => ce,
        };
        if !ctx.tape.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss { stage: s });
        }
        per_stage.push(loss);
        logits_nodes.push(out.logits);
    }
    let total = ctx.tape.sum_scalars(&per_stage);
    Ok((total, per_stage, logits_nodes))
}

/// Final-stage logits of the maximal architecture, computed without
/// gradients (the teacher path carries none).
pub fn teacher_logits(supernet: &Supernet, net: &MsNetwork, images: &Tensor) -> Result<Tensor> {
    let mut ctx = ExecCtx::new(false, Some(&supernet.store));
    let mut last = None;
    for s in 1..=net.stages {
        last = Some(net.forward_stage(&mut ctx, s, images)?);
    }
    Ok(ctx.tape.value(last.unwrap().logits).clone())
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub total_loss: f64,
    pub stage_losses: Vec<f64>,
    pub lr: f64,
    pub arch: MultiStageArch,
    pub final_stage_accuracy: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    sgd: Sgd,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
}

struct ShardOutput {
    grads: Vec<(usize, Tensor)>,
    total: f64,
    per_stage: Vec<f64>,
    correct_final: usize,
}

impl Trainer {
    pub fn new(supernet: &Supernet, config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            sgd: Sgd::new(&supernet.store, config.momentum, config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            total_steps,
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.initial_lr, self.step, self.total_steps)
    }

    /// One iteration: sample a sub-network, compute summed per-stage losses
    /// with distillation on sharded chunks of the batch, apply one SGD step.
    pub fn train_step(
        &mut self,
        supernet: &mut Supernet,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<StepOutcome> {
        let lr = self.current_lr();
        let batch = images.shape()[0];
        if batch == 0 || labels.len() != batch {
            return Err(Error::Data("bad batch".into()));
        }
        let arch = sample_arch(&supernet.config, &mut self.rng);
        let resized = resize_bilinear(images, arch.resolution);
        let student = supernet.materialize(&arch)?;
        let teacher = if self.config.kd_weight > 0.0 {
            Some(supernet.materialize(&teacher_arch(supernet, arch.resolution))?)
        } else {
            None
        };

        let chunk = batch.div_ceil(self.config.shards);
        let ranges: Vec<(usize, usize)> =
            (0..batch).step_by(chunk).map(|lo| (lo, (lo + chunk).min(batch))).collect();

        let kd_weight = self.config.kd_weight;
        let kd_tau = self.config.kd_temperature;
        let sn: &Supernet = supernet;
        let shard_results: Vec<Result<ShardOutput>> = ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let imgs = resized.slice_outer(lo, hi);
                let lbls = &labels[lo..hi];
                let t_logits = match &teacher {
                    Some(tn) => Some(teacher_logits(sn, tn, &imgs)?),
                    None => None,
                };
                let mut ctx = ExecCtx::new(true, Some(&sn.store));
                let (total, per_stage, logits) = stage_losses(
                    &mut ctx,
                    &student,
                    &imgs,
                    lbls,
                    t_logits.as_ref(),
                    kd_weight,
                    kd_tau,
                )?;
                let grads = ctx.tape.backward(total);
                let lv = ctx.tape.value(*logits.last().unwrap());
                let k = lv.shape()[1];
                let correct_final = lbls
                    .iter()
                    .enumerate()
                    .filter(|(i, &label)| {
                        let row = &lv.data()[i * k..(i + 1) * k];
                        let mut best = 0;
                        for j in 1..k {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        best == label
                    })
                    .count();
                Ok(ShardOutput {
                    grads,
                    total: ctx.tape.value(total).item(),
                    per_stage: per_stage.iter().map(|&n| ctx.tape.value(n).item()).collect(),
                    correct_final,
                })
            })
            .collect();

        supernet.store.zero_grads();
        let stages = supernet.config.stages;
        let mut total_loss = 0.0;
        let mut per_stage = vec![0.0; stages];
        let mut correct = 0usize;
        for (&(lo, hi), shard) in ranges.iter().zip(shard_results) {
            let shard = shard?;
            let w = (hi - lo) as f64 / batch as f64;
            total_loss += w * shard.total;
            for (s, v) in shard.per_stage.iter().enumerate() {
                per_stage[s] += w * v;
            }
            correct += shard.correct_final;
            for (id, g) in shard.grads {
                let mut scaled = g;
                for v in scaled.data_mut() {
                    *v *= w;
                }
                supernet.store.accumulate_grad(id, &scaled);
            }
        }
        self.sgd.step(&mut supernet.store, lr);
        self.step += 1;
        Ok(StepOutcome {
            total_loss,
            stage_losses: per_stage,
            lr,
            arch,
            final_stage_accuracy: correct as f64 / batch as f64,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub steps: usize,
}

/// Train for `config.epochs` passes over `data`, batching at the dataset's
/// native resolution and resizing per sampled architecture. Appends one CSV
/// row per step to `log` when given: `epoch,step,lr,total,stage losses...`.
pub fn train_supernet(
    supernet: &mut Supernet,
    data: &Dataset,
    config: &TrainConfig,
    log: Option<&mut dyn std::io::Write>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let batch = config.batch_size.min(data.len());
    let total_steps = (data.len() / batch).max(1) * config.epochs;
    let mut trainer = Trainer::new(supernet, config.clone(), total_steps)?;
    train_supernet_with(&mut trainer, supernet, data, log)
}

/// Like `train_supernet` but on a caller-owned `Trainer`, so the rng state
/// survives for checkpointing.
pub fn train_supernet_with(
    trainer: &mut Trainer,
    supernet: &mut Supernet,
    data: &Dataset,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<TrainReport> {
    let config = trainer.config.clone();
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let batch = config.batch_size.min(data.len());
    let steps_per_epoch = (data.len() / batch).max(1);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    if let Some(w) = log.as_deref_mut() {
        let stage_cols: Vec<String> =
            (1..=supernet.config.stages).map(|s| format!("stage{s}_loss")).collect();
        writeln!(w, "epoch,step,lr,total_loss,{}", stage_cols.join(","))
            .map_err(Error::Io)?;
    }

    let mut report = TrainReport { epoch_loss: Vec::new(), epoch_accuracy: Vec::new(), steps: 0 };
    for epoch in 0..config.epochs {
        let order = data.sample_indices(data.len(), &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..(step + 1) * batch];
            let (images, labels) = data.batch(idx);
            let out = trainer.train_step(supernet, &images, &labels)?;
            loss_sum += out.total_loss;
            acc_sum += out.final_stage_accuracy;
            report.steps += 1;
            if let Some(w) = log.as_deref_mut() {
                let stages: Vec<String> =
                    out.stage_losses.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(
                    w,
                    "{epoch},{},{:.6e},{:.6},{}",
                    report.steps,
                    out.lr,
                    out.total_loss,
                    stages.join(",")
                )
                .map_err(Error::Io)?;
            }
        }
        report.epoch_loss.push(loss_sum / steps_per_epoch as f64);
        report.epoch_accuracy.push(acc_sum / steps_per_epoch as f64);
    }
    Ok(report)
}
