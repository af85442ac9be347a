//! Batch-size-1 training with Adam and a cosine-annealed learning rate.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, Bag};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Decoding};
use crate::exec::Exec;
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::{backward, forward, ModelConfig, ModelParams};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Keep the parameters of the epoch with the highest validation fine
    /// macro-F1 (earliest on ties).
    BestValFineF1,
    Last,
    /// Snapshot every k epochs; the final checkpoint is the last epoch.
    EveryK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    PerStep,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    pub checkpoint_policy: CheckpointPolicy,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle_each_epoch: true,
            checkpoint_policy: CheckpointPolicy::BestValFineF1,
            schedule: Schedule::PerStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite()) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_final ({}) ≤ lr_initial ({})",
                self.lr_final, self.lr_initial
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("adam eps must be > 0".into());
        }
        if self.checkpoint_policy == CheckpointPolicy::EveryK(0) {
            return bad("every_k needs k ≥ 1".into());
        }
        Ok(())
    }
}

/// `lr_final + ½(lr_initial − lr_final)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_initial: f64, lr_final: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "cosine schedule step {step} outside [0, {total_steps}]"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + phase.cos()))
}

/// Adam moments, laid out like [`ModelParams::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.num_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
    }
    if grads.num_params() != state.m.len() || params.num_params() != state.m.len() {
        return Err(Error::DimensionMismatch {
            context: "optimizer state",
            expected: state.m.len(),
            got: grads.num_params(),
        });
    }
    for (name, g) in grads.blocks() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let mut offset = 0;
    for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        let n = p.len();
        let m = &mut state.m[offset..offset + n];
        let v = &mut state.v[offset..offset + n];
        for (((theta, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        offset += n;
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_ce_coarse: f64,
    pub mean_ce_fine: f64,
    pub mean_con: f64,
    pub mean_int: f64,
    pub mean_gce: f64,
    pub mean_total: f64,
    pub lr_last: f64,
    pub val_acc_coarse: f64,
    pub val_f1_coarse: f64,
    pub val_acc_fine: f64,
    pub val_f1_fine: f64,
    pub val_consistency: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters chosen by the checkpoint policy.
    pub params: ModelParams,
    pub selected_epoch: usize,
    pub last: ModelParams,
    pub log: Vec<EpochRecord>,
    /// `(epoch, params)` snapshots taken under [`CheckpointPolicy::EveryK`].
    pub snapshots: Vec<(usize, ModelParams)>,
    pub steps: u64,
    pub lr_history: Vec<f64>,
}

const TAG_INIT: u64 = 0x1717;
const TAG_SHUFFLE: u64 = 0x5AFF;

pub fn train(
    train_bags: &[Bag],
    val_bags: &[Bag],
    taxonomy: &Taxonomy,
    model_config: &ModelConfig,
    loss_config: &LossConfig,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    config.validate()?;
    loss_config.validate()?;
    model_config.validate()?;
    if train_bags.is_empty() {
        return Err(Error::Empty("training split"));
    }
    for bag in train_bags.iter().chain(val_bags) {
        model_config.check_compatible(bag.dim(), taxonomy)?;
        bag.check_labels(taxonomy)?;
    }

    let mut params = ModelParams::init(model_config, derive_seed(config.seed, &[TAG_INIT]))?;
    let mut state = OptimizerState::new(&params);
    let hyper = AdamHyper::from(config);
    let n = train_bags.len();
    let total_steps = config.epochs * n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut lr_history = Vec::with_capacity(total_steps);
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..config.epochs {
        if config.shuffle_each_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SHUFFLE, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut sums = LossBreakdown::default();
        let mut lr = config.lr_initial;
        for (i, &idx) in order.iter().enumerate() {
            let bag = &train_bags[idx];
            let step = epoch * n + i;
            lr = match config.schedule {
                Schedule::PerStep => cosine_lr(step, (total_steps - 1).max(1), config.lr_initial, config.lr_final)?,
                Schedule::PerEpoch => cosine_lr(epoch, (config.epochs - 1).max(1), config.lr_initial, config.lr_final)?,
            };
            let trace = forward(bag, &params)?;
            let (loss, seeds) = total_loss(&trace, bag.coarse_label, bag.fine_label, taxonomy, loss_config)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss(bag.slide_id.clone()));
            }
            let grads = backward(&trace, &seeds, &params)?;
            adam_step(&mut params, &grads.params, &mut state, lr, hyper)?;
            lr_history.push(lr);
            sums.ce_coarse += loss.ce_coarse;
            sums.ce_fine += loss.ce_fine;
            sums.con += loss.con;
            sums.int += loss.int;
            sums.gce += loss.gce;
            sums.total += loss.total;
        }

        let (va, vf1, vaf, vff1, vcons) = if val_bags.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&params, val_bags, taxonomy, Decoding::Unrestricted, exec)?;
            (r.acc_coarse, r.f1_macro_coarse, r.acc_fine, r.f1_macro_fine, r.consistency_rate)
        };
        let nf = n as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_ce_coarse: sums.ce_coarse / nf,
            mean_ce_fine: sums.ce_fine / nf,
            mean_con: sums.con / nf,
            mean_int: sums.int / nf,
            mean_gce: sums.gce / nf,
            mean_total: sums.total / nf,
            lr_last: lr,
            val_acc_coarse: va,
            val_f1_coarse: vf1,
            val_acc_fine: vaf,
            val_f1_fine: vff1,
            val_consistency: vcons,
        };
        log::info!(
            "epoch {}/{}: loss {:.5} val fine f1 {:.4}",
            epoch + 1,
            config.epochs,
            record.mean_total,
            record.val_f1_fine
        );
        log.push(record);

        match config.checkpoint_policy {
            CheckpointPolicy::BestValFineF1 if !val_bags.is_empty() => {
                if best.as_ref().is_none_or(|(score, _, _)| vff1 > *score) {
                    best = Some((vff1, epoch + 1, params.clone()));
                }
            }
            CheckpointPolicy::EveryK(k) if (epoch + 1) % k == 0 => {
                snapshots.push((epoch + 1, params.clone()));
            }
            _ => {}
        }
    }

    let (selected, selected_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params.clone(), config.epochs),
    };
    Ok(TrainOutcome {
        params: selected,
        selected_epoch,
        last: params,
        log,
        snapshots,
        steps: state.step,
        lr_history,
    })
}

pub fn log_csv(log: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_log_csv(log: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, log_csv(log)?).map_err(|e| Error::io(path, e))
}
