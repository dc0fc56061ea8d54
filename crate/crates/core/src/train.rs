//! Masked fine-tuning, baselines, AdamW and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Precision};
use crate::data::Split;
use crate::model::{ClassPromptBank, DualEncoder, FlatParams};
use crate::select::{Mask, Scope, Strategy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn lr(self, step: usize, total: usize, max_lr: f64) -> Result<f64> {
        match self {
            Schedule::Constant => Ok(max_lr),
            Schedule::Cosine => cosine_lr(step, total, max_lr),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

/// `η_max · ½ · (1 + cos(π t / T))`.
pub fn cosine_lr(step: usize, total: usize, max_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule needs T > 0"));
    }
    if step >= total {
        return Err(Error::invalid(format!("step {step} outside [0, {total})")));
    }
    Ok(max_lr * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub strategy: Strategy,
    pub scope: Scope,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            strategy: Strategy::GradMean,
            scope: Scope::All,
            steps: 500,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "eps={}", self.eps);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "schedule={}", self.schedule.as_str());
        let _ = writeln!(s, "scope={}", self.scope.as_str());
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "strategy={}", self.strategy);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        s
    }

    pub fn hash(&self) -> u64 {
        crate::store::checksum64(self.canonical().as_bytes())
    }
}

/// AdamW moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(len: usize, config: &TrainConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        }
    }
}

/// One AdamW step with decoupled decay `θ ← θ(1 − η_t λ)` applied before the
/// moment update. With a mask, indices outside it are left untouched (no
/// decay, moments stay zero).
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr_t: f64,
    mask: Option<&Mask>,
    precision: Precision,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: grads.len().min(state.m.len()).min(state.v.len()),
        });
    }
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: mask.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr_t * state.weight_decay;
    let r = |x: f64| precision.round(x);
    for k in 0..n {
        if let Some(mask) = mask {
            if !mask.get(k) {
                continue;
            }
        }
        let g = grads[k];
        let theta = r(params[k] * decay);
        let m = r(b1 * state.m[k] + (1.0 - b1) * g);
        let v = r(b2 * state.v[k] + (1.0 - b2) * g * g);
        let update = (m / bc1) / ((v / bc2).sqrt() + state.eps);
        let next = r(theta - lr_t * update);
        if !(next.is_finite() && m.is_finite() && v.is_finite()) {
            return Err(Error::Divergence {
                step: state.step as usize,
                last_good_step: (state.step as usize).checked_sub(1),
            });
        }
        state.m[k] = m;
        state.v[k] = v;
        params[k] = next;
    }
    Ok(())
}

/// `m ⊙ current + (1 − m) ⊙ pretrained`.
pub fn reset_unmasked(current: &FlatParams, pretrained: &FlatParams, mask: &Mask) -> Result<FlatParams> {
    let mut out = current.clone();
    reset_unmasked_in_place(out.values_mut(), pretrained.values(), mask)?;
    Ok(out)
}

fn reset_unmasked_in_place(current: &mut [f64], pretrained: &[f64], mask: &Mask) -> Result<()> {
    if current.len() != pretrained.len() || current.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: current.len(),
            got: if pretrained.len() != current.len() {
                pretrained.len()
            } else {
                mask.len()
            },
        });
    }
    for (k, (c, p)) in current.iter_mut().zip(pretrained).enumerate() {
        if !mask.get(k) {
            *c = *p;
        }
    }
    Ok(())
}

/// `(1 − λ)·pretrained + λ·finetuned`.
pub fn wise_interpolate(pretrained: &FlatParams, finetuned: &FlatParams, lambda: f64) -> Result<FlatParams> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "interpolation weight must lie in [0, 1], got {lambda}"
        )));
    }
    if pretrained.layout() != finetuned.layout() && **pretrained.layout() != **finetuned.layout() {
        return Err(Error::Layout("interpolation endpoints have different layouts".into()));
    }
    let values = pretrained
        .values()
        .iter()
        .zip(finetuned.values())
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    pretrained.with_values(values)
}

/// Outcome of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub loss_curve: Vec<f64>,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

impl RunRecord {
    pub fn new(method: impl Into<String>, config_hash: u64, seed: u64) -> Self {
        Self {
            method: method.into(),
            config_hash: format!("{config_hash:016x}"),
            seed,
            metrics: BTreeMap::new(),
            loss_curve: Vec::new(),
            artifacts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: FlatParams,
    pub state: OptimizerState,
    pub record: RunRecord,
}

/// Epoch-wise shuffled mini-batches; a batch may straddle an epoch boundary.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Shared fine-tuning loop. With a mask, unmasked parameters are reset to
/// their pre-trained values after every step. `observer` sees the parameters
/// and optimizer state after each step.
#[allow(clippy::too_many_arguments)]
pub fn finetune_observed(
    model: &DualEncoder,
    pretrained: &FlatParams,
    mask: Option<&Mask>,
    data: &Split,
    bank: &ClassPromptBank,
    config: &TrainConfig,
    method: &str,
    mut observer: impl FnMut(usize, &FlatParams, &OptimizerState),
) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("fine-tuning data is empty"));
    }
    if let Some(mask) = mask {
        if mask.len() != pretrained.len() {
            return Err(Error::LengthMismatch {
                expected: pretrained.len(),
                got: mask.len(),
            });
        }
    }
    let mut current = pretrained.clone();
    let mut state = OptimizerState::new(pretrained.len(), config);
    let mut record = RunRecord::new(method, config.hash(), config.seed);
    let mut sampler = BatchSampler::new(data.len(), config.seed);

    for step in 0..config.steps {
        let rows = sampler.next(config.batch_size);
        let batch = bank.batch(data, &rows)?;
        let diverged = || Error::Divergence {
            step,
            last_good_step: step.checked_sub(1),
        };
        let (loss, grads) = match model.loss_and_grad(&current, &batch, bank, config.precision) {
            Ok(v) => v,
            Err(Error::Autodiff(AutodiffError::NumericOverflow { .. })) => return Err(diverged()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged());
        }
        record.loss_curve.push(loss);
        let lr_t = config.schedule.lr(step, config.steps, config.lr)?;
        adamw_step(current.values_mut(), &grads, &mut state, lr_t, mask, config.precision)?;
        if let Some(mask) = mask {
            reset_unmasked_in_place(current.values_mut(), pretrained.values(), mask)?;
        }
        observer(step, &current, &state);
    }

    let d = mask.map_or(pretrained.len(), Mask::count);
    record.metrics.insert("learnable".into(), d as f64);
    record.metrics.insert("params".into(), pretrained.len() as f64);
    if let Some(last) = record.loss_curve.last() {
        record.metrics.insert("final_loss".into(), *last);
    }
    Ok(TrainOutput {
        params: current,
        state,
        record,
    })
}

/// Masked fine-tuning with a reset of every unmasked parameter after each step.
pub fn saft_finetune(
    model: &DualEncoder,
    pretrained: &FlatParams,
    mask: &Mask,
    data: &Split,
    bank: &ClassPromptBank,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    finetune_observed(model, pretrained, Some(mask), data, bank, config, "saft", |_, _, _| {})
}

/// Updates every parameter.
pub fn full_finetune(
    model: &DualEncoder,
    pretrained: &FlatParams,
    data: &Split,
    bank: &ClassPromptBank,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    finetune_observed(model, pretrained, None, data, bank, config, "ft", |_, _, _| {})
}

/// Mask covering exactly the final image layer (weight and bias).
pub fn linear_probe_mask(model: &DualEncoder) -> Result<Mask> {
    let [w, b] = model.image_head_segments();
    Mask::for_segments(model.layout(), &[&w, &b])
}

/// Trains only the final image layer.
pub fn linear_probe(
    model: &DualEncoder,
    pretrained: &FlatParams,
    data: &Split,
    bank: &ClassPromptBank,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let mask = linear_probe_mask(model)?;
    finetune_observed(model, pretrained, Some(&mask), data, bank, config, "lp", |_, _, _| {})
}
