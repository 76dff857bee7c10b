//! Two-stage training: extractor warm start on paired data, then joint training
//! of the whole model on mixed clean, paired and unpaired data.

mod optim;

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, learning_rate, Adam, AdamConfig};

use crate::corpus::{ConditionClass, Utterance};
use crate::error::{config, Result};
use crate::model::{ForwardOptions, Model, CTC_HEAD, EXTRACTOR};
use crate::nn::layers::{apply_bn_updates, BnUpdate, Ctx};
use crate::params::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub extractor: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            duration: 1.0,
            pitch: 1.0,
            extractor: 1.0,
            adversarial: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub extractor_steps: usize,
    pub joint_steps: usize,
    pub peak_learning_rate: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub weights: LossWeights,
    pub lambda_grl: f64,
    pub fix_extractor: bool,
    pub use_adversarial_ctc: bool,
    pub bn_momentum: f64,
    pub validate_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            extractor_steps: 1000,
            joint_steps: 2000,
            peak_learning_rate: 1e-3,
            warmup_steps: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip_norm: 1.0,
            weights: LossWeights::default(),
            lambda_grl: 1.0,
            fix_extractor: false,
            use_adversarial_ctc: true,
            bn_momentum: 0.1,
            validate_every: 100,
            checkpoint_every: 500,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("train.batch_size must be positive"));
        }
        let w = &self.weights;
        if [w.mel, w.duration, w.pitch, w.extractor, w.adversarial, self.lambda_grl]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(config("loss weights and lambda_grl must be finite and non-negative"));
        }
        if !(self.peak_learning_rate > 0.0) || !(self.grad_clip_norm >= 0.0) {
            return Err(config("learning rate must be positive and the clip norm non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(config("bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            use_adversarial_ctc: self.use_adversarial_ctc,
            lambda_grl: Some(self.lambda_grl),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Extractor only, on paired data.
    Extractor,
    /// All modules on mixed data.
    Joint,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Extractor => "extractor",
            Stage::Joint => "joint",
        }
    }

    fn seed_salt(self) -> u64 {
        match self {
            Stage::Extractor => 0x5354_4147_4531,
            Stage::Joint => 0x5354_4147_4532,
        }
    }
}

/// Batch-mean loss terms. `None` marks a term that is switched off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mel_mae: Option<f64>,
    pub mel_mssim: Option<f64>,
    pub duration: Option<f64>,
    pub pitch: Option<f64>,
    pub extractor: Option<f64>,
    pub adversarial: Option<f64>,
    /// Unpaired utterances whose transcript could not fit their frame count.
    pub adversarial_skipped: usize,
}

impl LossBreakdown {
    /// `(term, value)` pairs in a fixed order, total first.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("total", self.total)];
        for (name, val) in [
            ("mel_mae", self.mel_mae),
            ("mel_mssim", self.mel_mssim),
            ("duration", self.duration),
            ("pitch", self.pitch),
            ("extractor", self.extractor),
            ("adversarial", self.adversarial),
        ] {
            if let Some(x) = val {
                v.push((name, x));
            }
        }
        v
    }

    /// The weighted sum the total is made of.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let z = |x: Option<f64>| x.unwrap_or(0.0);
        w.mel * (z(self.mel_mae) + z(self.mel_mssim))
            + w.duration * z(self.duration)
            + w.pitch * z(self.pitch)
            + w.extractor * z(self.extractor)
            + w.adversarial * z(self.adversarial)
    }
}

/// One line of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    pub step: usize,
    pub term: String,
    pub value: f64,
}

/// Everything besides the parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed optimizer steps in this stage.
    pub step: usize,
    pub adam: Adam,
    pub best_validation: Option<f64>,
}

impl TrainState {
    pub fn new(stage: Stage, model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            stage,
            step: 0,
            adam: Adam::new(cfg.adam(), &model.store),
            best_validation: None,
        }
    }
}

/// Receives loss records and checkpoint opportunities from a training run.
pub trait TrainObserver {
    fn record(&mut self, _rec: &LossRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps, at the end of the stage, and with
    /// `best == true` whenever validation improves.
    fn checkpoint(&mut self, _model: &Model, _state: &TrainState, _best: bool) -> Result<()> {
        Ok(())
    }
}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct RecordCollector {
    pub records: Vec<LossRecord>,
}

impl TrainObserver for RecordCollector {
    fn record(&mut self, rec: &LossRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// Per-utterance dropout seed; independent of batch position.
fn utterance_seed(step_seed: u64, id: &str) -> u64 {
    let h = id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    mix(step_seed, h)
}

fn step_seed(cfg: &TrainConfig, stage: Stage, step: usize) -> u64 {
    mix(mix(cfg.seed, stage.seed_salt()), step as u64)
}

/// Indices of the batch drawn at `step`; every utterance when the pool is small.
fn batch_indices(cfg: &TrainConfig, stage: Stage, step: usize, pool: usize) -> Vec<usize> {
    if cfg.batch_size >= pool {
        return (0..pool).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg, stage, step));
    let mut idx = sample(&mut rng, pool, cfg.batch_size).into_vec();
    idx.sort_unstable();
    idx
}

/// Parameters the optimizer may change in `stage`.
pub fn trainable_mask(model: &Model, stage: Stage, cfg: &TrainConfig) -> Vec<bool> {
    model
        .store
        .iter()
        .map(|(_, p)| {
            p.trainable
                && match stage {
                    Stage::Extractor => p.name.starts_with(EXTRACTOR),
                    Stage::Joint => {
                        !(cfg.fix_extractor && p.name.starts_with(EXTRACTOR)
                            || !cfg.use_adversarial_ctc && p.name.starts_with(CTC_HEAD))
                    }
                }
        })
        .collect()
}

struct Accumulated {
    breakdown: LossBreakdown,
    grads: Vec<(ParamId, Tensor)>,
    bn_updates: Vec<BnUpdate>,
}

/// Forward (and optionally backward) one batch; every term is `(1/B) Σ` over its eligible utterances.
fn run_batch(
    model: &Model,
    stage: Stage,
    batch: &[&Utterance],
    cfg: &TrainConfig,
    seed: u64,
    with_grads: bool,
) -> Result<Accumulated> {
    let b = batch.len() as f64;
    let w = &cfg.weights;
    let opts = cfg.forward_options();
    let mut sums: HashMap<&'static str, f64> = HashMap::new();
    let mut skipped = 0;
    let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut bn_updates = Vec::new();
    let mut total = 0.0;
    for u in batch {
        let mut ctx = Ctx::new(&model.store, true, utterance_seed(seed, &u.id));
        ctx.frozen_bn = stage == Stage::Joint && cfg.fix_extractor;
        let mut parts: Vec<(&'static str, f64, crate::graph::Var)> = Vec::new();
        match stage {
            Stage::Extractor => {
                let mel = ctx.g.constant(u.mel.values.clone());
                let target = ctx.g.constant(u.noise_mel.as_ref().expect("paired utterance").values.clone());
                let e = model.extractor.forward(&mut ctx, mel);
                parts.push(("extractor", 1.0, ctx.g.mae(e, target, None)));
            }
            Stage::Joint => {
                let t = model.utterance_terms(&mut ctx, u, opts)?;
                parts.push(("mel_mae", w.mel, t.mel_mae));
                parts.push(("mel_mssim", w.mel, t.mel_mssim));
                parts.push(("duration", w.duration, t.duration));
                parts.push(("pitch", w.pitch, t.pitch));
                if let Some(e) = t.extractor {
                    parts.push(("extractor", w.extractor, e));
                }
                if let Some(a) = t.adversarial {
                    parts.push(("adversarial", w.adversarial, a));
                }
                skipped += t.adversarial_skipped as usize;
            }
        }
        let mut weighted = Vec::with_capacity(parts.len());
        for &(name, weight, var) in &parts {
            *sums.entry(name).or_default() += ctx.g.value(var).item() / b;
            weighted.push(ctx.g.scale(var, weight / b));
        }
        let mut obj = weighted[0];
        for &v in &weighted[1..] {
            obj = ctx.g.add(obj, v);
        }
        total += ctx.g.value(obj).item();
        if with_grads {
            for (id, g) in ctx.g.backward(obj).into_param_grads() {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        bn_updates.append(&mut ctx.bn_updates);
    }
    let get = |k: &str| Some(sums.get(k).copied().unwrap_or(0.0));
    let breakdown = match stage {
        Stage::Extractor => LossBreakdown {
            total,
            extractor: get("extractor"),
            ..Default::default()
        },
        Stage::Joint => LossBreakdown {
            total,
            mel_mae: get("mel_mae"),
            mel_mssim: get("mel_mssim"),
            duration: get("duration"),
            pitch: get("pitch"),
            extractor: get("extractor"),
            adversarial: if cfg.use_adversarial_ctc { get("adversarial") } else { None },
            adversarial_skipped: skipped,
        },
    };
    Ok(Accumulated {
        breakdown,
        grads: grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
            .collect(),
        bn_updates,
    })
}

/// Training-mode loss of a batch, without updating anything.
pub fn total_loss(model: &Model, stage: Stage, batch: &[&Utterance], cfg: &TrainConfig, seed: u64) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(crate::error::invalid("empty batch"));
    }
    Ok(run_batch(model, stage, batch, cfg, seed, false)?.breakdown)
}

/// Mean absolute extractor error (eval mode) over paired utterances.
pub fn extractor_mae(model: &Model, utts: &[&Utterance]) -> Option<f64> {
    let paired: Vec<_> = utts.iter().filter(|u| u.class == ConditionClass::PairedNoisy).collect();
    if paired.is_empty() {
        return None;
    }
    let s: f64 = paired
        .iter()
        .map(|u| {
            let e = model.extractor.extract(&model.store, &u.mel);
            let n = u.noise_mel.as_ref().unwrap();
            e.values.zip_map(&n.values, |a, b| (a - b).abs()).mean()
        })
        .sum();
    Some(s / paired.len() as f64)
}

/// Mean teacher-forced mel MAE (eval mode).
pub fn teacher_forced_mel_mae(model: &Model, utts: &[&Utterance]) -> Result<f64> {
    let mut s = 0.0;
    for u in utts {
        let tf = model.teacher_forced(u)?;
        s += tf.mel.values.zip_map(&u.mel.values, |a, b| (a - b).abs()).mean();
    }
    Ok(s / utts.len() as f64)
}

fn validation_metric(model: &Model, stage: Stage, val: &[&Utterance]) -> Result<(&'static str, f64)> {
    Ok(match stage {
        Stage::Extractor => ("val_extractor_mae", extractor_mae(model, val).unwrap_or(f64::NAN)),
        Stage::Joint => ("val_mel_mae", teacher_forced_mel_mae(model, val)?),
    })
}

/// Run `stage` from `state.step` up to its configured budget.
///
/// The batch and dropout randomness of step `n` depend only on `(seed, stage, n)`,
/// so stopping after any step and resuming from a checkpoint reproduces the same
/// trajectory.
pub fn train_stage(
    model: &mut Model,
    state: &mut TrainState,
    train: &[Utterance],
    val: &[Utterance],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    cfg.validate()?;
    let stage = state.stage;
    let pool: Vec<&Utterance> = match stage {
        Stage::Extractor => train.iter().filter(|u| u.class == ConditionClass::PairedNoisy).collect(),
        Stage::Joint => train.iter().collect(),
    };
    if pool.is_empty() {
        return Err(config(match stage {
            Stage::Extractor => "extractor training needs paired noisy utterances",
            Stage::Joint => "joint training needs at least one utterance",
        }));
    }
    let val: Vec<&Utterance> = val.iter().collect();
    let val_ok = match stage {
        Stage::Extractor => val.iter().any(|u| u.class == ConditionClass::PairedNoisy),
        Stage::Joint => !val.is_empty(),
    };
    let budget = match stage {
        Stage::Extractor => cfg.extractor_steps,
        Stage::Joint => cfg.joint_steps,
    };
    let mask = trainable_mask(model, stage, cfg);

    let validate = |model: &Model, state: &mut TrainState, observer: &mut dyn TrainObserver| -> Result<()> {
        if !val_ok {
            return Ok(());
        }
        let (term, value) = validation_metric(model, stage, &val)?;
        observer.record(&LossRecord {
            stage,
            step: state.step,
            term: term.into(),
            value,
        })?;
        if state.step > 0 && state.best_validation.map_or(true, |b| value < b) {
            state.best_validation = Some(value);
            observer.checkpoint(model, state, true)?;
        }
        Ok(())
    };

    if state.step == 0 {
        validate(model, state, observer)?;
    }
    while state.step < budget {
        let step = state.step;
        let seed = step_seed(cfg, stage, step);
        let batch: Vec<&Utterance> = batch_indices(cfg, stage, step, pool.len()).into_iter().map(|i| pool[i]).collect();
        let acc = run_batch(model, stage, &batch, cfg, seed, true)?;
        if !acc.breakdown.total.is_finite() {
            return Err(crate::Error::Diverged(format!("non-finite loss at {} step {step}", stage.label())));
        }
        let mut grads: Vec<(ParamId, Tensor)> = acc.grads.into_iter().filter(|(id, _)| mask[id.0]).collect();
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let lr = learning_rate(cfg.peak_learning_rate, cfg.warmup_steps, step);
        state.adam.step(&mut model.store, &grads, lr);
        let bn: Vec<BnUpdate> = acc.bn_updates.into_iter().filter(|u| mask_allows_buffer(model, &mask, u)).collect();
        apply_bn_updates(&mut model.store, &bn, cfg.bn_momentum);
        state.step += 1;

        for (term, value) in acc.breakdown.terms() {
            observer.record(&LossRecord {
                stage,
                step: state.step,
                term: term.into(),
                value,
            })?;
        }
        observer.record(&LossRecord {
            stage,
            step: state.step,
            term: "grad_norm".into(),
            value: grad_norm,
        })?;
        if acc.breakdown.adversarial_skipped > 0 {
            observer.record(&LossRecord {
                stage,
                step: state.step,
                term: "adversarial_skipped".into(),
                value: acc.breakdown.adversarial_skipped as f64,
            })?;
        }
        if cfg.validate_every > 0 && state.step % cfg.validate_every == 0 || state.step == budget {
            validate(model, state, observer)?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step != budget {
            observer.checkpoint(model, state, false)?;
        }
    }
    observer.checkpoint(model, state, false)
}

/// Running statistics move only with the module that owns them.
fn mask_allows_buffer(model: &Model, mask: &[bool], u: &BnUpdate) -> bool {
    let name = &model.store.get(u.running_mean).name;
    let owner = name.rsplit_once('.').map_or(name.as_str(), |(p, _)| p);
    model
        .store
        .iter()
        .any(|(id, p)| mask[id.0] && p.name.rsplit_once('.').map(|(q, _)| q) == Some(owner))
}

/// Step 1: warm-start the extractor on paired data with everything else fixed.
pub fn pretrain_extractor(
    model: &mut Model,
    train: &[Utterance],
    val: &[Utterance],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    let mut state = TrainState::new(Stage::Extractor, model, cfg);
    train_stage(model, &mut state, train, val, cfg, observer)?;
    Ok(state)
}

/// Step 2: train every module jointly.
pub fn joint_train(
    model: &mut Model,
    train: &[Utterance],
    val: &[Utterance],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    let mut state = TrainState::new(Stage::Joint, model, cfg);
    train_stage(model, &mut state, train, val, cfg, observer)?;
    Ok(state)
}

#[cfg(test)]
mod tests;
