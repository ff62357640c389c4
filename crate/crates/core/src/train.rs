//! Training loop with complete, modal-switch and fixed-ratio regimes.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pixel_cross_entropy, Model, ModelParams, TuningMode};
use crate::data::SyntheticScene;
use crate::error::{Error, Result};
use crate::fpt::SpectralMode;
use crate::modality::{
    apply_modality_dropout, assign_fixed_missing_ratio, condition_for_mask, enumerate_conditions, sample_switch_mask,
    DropoutMode, MultiModalSample, SwitchMask,
};

/// How modality presence is chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Regime {
    /// Every modality is always present.
    Complete,
    /// One random switch mask per batch.
    Mms,
    /// A fixed per-sample condition assigned once before training.
    FixedRatio(f64),
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Complete => f.write_str("complete"),
            Regime::Mms => f.write_str("mms"),
            Regime::FixedRatio(r) => write!(f, "fixed_ratio:{r}"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Regime::Complete),
            "mms" => Ok(Regime::Mms),
            _ => {
                let ratio = s
                    .strip_prefix("fixed_ratio:")
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))?;
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::Config(format!("missing ratio {ratio} outside [0, 1]")));
                }
                Ok(Regime::FixedRatio(ratio))
            }
        }
    }
}

impl TryFrom<String> for Regime {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> String {
        r.to_string()
    }
}

/// Training hyper-parameters. There is no default seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub tuning: TuningMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warmup length in optimizer steps; constant rate afterwards.
    pub warmup_steps: usize,
    pub seed: u64,
    pub spectral: SpectralMode,
    pub dropout: DropoutMode,
}

impl TrainConfig {
    /// Toy-scale defaults.
    pub fn new(seed: u64) -> Self {
        Self {
            regime: Regime::Mms,
            tuning: TuningMode::PlusFpt,
            epochs: 30,
            batch_size: 2,
            lr: 2e-3,
            weight_decay: 1e-4,
            warmup_steps: 50,
            seed,
            spectral: SpectralMode::default(),
            dropout: DropoutMode::ZeroFill,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Decay is applied to matrices only, not
/// to bias rows, norm parameters or the adapter scale.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Updates tensors accepted by `tunable`; all others are left untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, tunable: &dyn Fn(&str) -> bool, lr: f64) {
        let mut gs = Vec::new();
        grads.visit(&mut |_, g| gs.push(g.to_owned()));
        if self.moments.is_empty() {
            self.moments = vec![None; gs.len()];
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut i = 0;
        params.visit_mut(&mut |name, mut p| {
            let idx = i;
            i += 1;
            if !tunable(name) {
                return;
            }
            let g = &gs[idx];
            let (m, v) = self.moments[idx]
                .get_or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
            let decay = if p.nrows() > 1 && p.ncols() > 1 { wd } else { 0.0 };
            ndarray::Zip::from(&mut p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + decay * *p);
            });
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Switch mask bits per sample in the batch, `;`-separated.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub steps: usize,
    /// Switch masks drawn from the random source.
    pub masks_sampled: usize,
    /// How often each condition of `enumerate_conditions` was trained on.
    pub condition_visits: Vec<usize>,
}

/// Trains `model` in place on `scenes`.
pub fn train(model: &mut Model, scenes: &[SyntheticScene], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.mode != config.spectral {
        return Err(Error::Config("model spectral mode differs from the training config".into()));
    }
    let spec = model.spec.clone();
    let samples: Vec<(MultiModalSample, &Array2<u8>)> = scenes
        .iter()
        .map(|s| Ok((s.to_sample(&spec)?, &s.labels)))
        .collect::<Result<_>>()?;
    let conditions = enumerate_conditions(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fixed = match config.regime {
        Regime::FixedRatio(r) => Some(assign_fixed_missing_ratio(samples.len(), r, &spec, &mut rng)?),
        _ => None,
    };
    let groups = config.tuning.groups();
    let tunable = |n: &str| groups.contains(n);
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut report = TrainReport {
        condition_visits: vec![0; conditions.len()],
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let complete = SwitchMask::all_present(&spec);
    let mut grads = model.params.zeros_like();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let step = report.steps;
            let batch_mask = match config.regime {
                Regime::Mms => {
                    report.masks_sampled += 1;
                    Some(sample_switch_mask(&spec, &mut rng))
                }
                _ => None,
            };
            grads.visit_mut(&mut |_, mut g| g.fill(0.0));
            let mut loss_sum = 0.0;
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch {
                let mask = match (&batch_mask, &fixed) {
                    (Some(m), _) => m.clone(),
                    (None, Some(assign)) => conditions[assign[i]].to_mask(&spec)?,
                    (None, None) => complete.clone(),
                };
                if let Some(c) = condition_for_mask(&conditions, &mask) {
                    report.condition_visits[c] += 1;
                }
                let (sample, labels) = &samples[i];
                let input = if mask.is_complete() {
                    sample.clone()
                } else {
                    apply_modality_dropout(sample, &mask, config.dropout)?
                };
                let (logits, cache) = model.forward(&input)?;
                let (loss, mut d_logits) = pixel_cross_entropy(&logits, labels)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                d_logits /= batch.len() as f64;
                model.backward(&cache, &d_logits, &mut grads, groups)?;
                loss_sum += loss;
                masks.push(mask.to_string());
            }
            let loss = loss_sum / batch.len() as f64;
            let lr = if config.warmup_steps > 0 && step < config.warmup_steps {
                config.lr * (step + 1) as f64 / config.warmup_steps as f64
            } else {
                config.lr
            };
            opt.step(&mut model.params, &grads, &tunable, lr);
            report.losses.push(LossRecord {
                step,
                loss,
                mask: masks.join(";"),
            });
            report.steps += 1;
        }
    }
    Ok(report)
}

/// Writes `step,loss,mask` rows preceded by a provenance comment line.
pub fn write_loss_csv(path: &Path, losses: &[LossRecord], config_hash: &str) -> Result<()> {
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(out, "# config_hash={config_hash} tool_version={}", env!("CARGO_PKG_VERSION")).map_err(io)?;
    writeln!(out, "step,loss,mask").map_err(io)?;
    for r in losses {
        writeln!(out, "{},{:.12},{}", r.step, r.loss, r.mask).map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}
