//! Central finite-difference checks of the analytic backward pass.

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::backbone::{pixel_cross_entropy, BackboneConfig, Model, ModelParams, TunableGroups, TuningMode};
use crate::error::{Error, Result};
use crate::fpt::SpectralMode;
use crate::modality::{ModalitySpec, MultiModalSample};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Outcome for one tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|)` over the tensor.
    pub relative_error: f64,
    pub analytic_max: f64,
    pub numeric_max: f64,
}

/// Mean cross-entropy of the model on one labelled sample.
pub fn sample_loss(model: &Model, sample: &MultiModalSample, labels: &Array2<u8>) -> Result<f64> {
    let (logits, _) = model.forward(sample)?;
    Ok(pixel_cross_entropy(&logits, labels)?.0)
}

/// Analytic gradients of [`sample_loss`] for the given groups.
pub fn analytic_gradients(
    model: &Model,
    sample: &MultiModalSample,
    labels: &Array2<u8>,
    groups: TunableGroups,
) -> Result<(f64, ModelParams)> {
    let (logits, cache) = model.forward(sample)?;
    let (loss, d_logits) = pixel_cross_entropy(&logits, labels)?;
    let mut grads = model.params.zeros_like();
    model.backward(&cache, &d_logits, &mut grads, groups)?;
    Ok((loss, grads))
}

/// Perturbs each entry of every tensor selected by `select` and compares the
/// central difference with `analytic`.
pub fn compare_with_finite_differences(
    model: &Model,
    sample: &MultiModalSample,
    labels: &Array2<u8>,
    analytic: &ModelParams,
    select: &dyn Fn(&str) -> bool,
    step: f64,
) -> Result<Vec<TensorCheck>> {
    let analytic = analytic.tensor_map();
    let mut names = Vec::new();
    model.params.visit(&mut |n, _| {
        if select(n) {
            names.push(n.to_string());
        }
    });
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let a = &analytic[&name];
        let mut numeric = Array2::<f64>::zeros(a.raw_dim());
        for idx in 0..a.len() {
            let mut plus = model.clone();
            perturb(&mut plus.params, &name, idx, step);
            let mut minus = model.clone();
            perturb(&mut minus.params, &name, idx, -step);
            let lp = sample_loss(&plus, sample, labels)?;
            let lm = sample_loss(&minus, sample, labels)?;
            numeric.as_slice_mut().expect("standard layout")[idx] = (lp - lm) / (2.0 * step);
        }
        let diff = a.iter().zip(numeric.iter()).fold(0f64, |m, (x, y)| m.max((x - y).abs()));
        let analytic_max = a.iter().fold(0f64, |m, v| m.max(v.abs()));
        let numeric_max = numeric.iter().fold(0f64, |m, v| m.max(v.abs()));
        let denom = analytic_max.max(numeric_max);
        let relative_error = if denom == 0.0 { 0.0 } else { diff / denom };
        if !relative_error.is_finite() {
            return Err(Error::Numeric(format!("gradient check of {name} is not finite")));
        }
        out.push(TensorCheck {
            name,
            relative_error,
            analytic_max,
            numeric_max,
        });
    }
    Ok(out)
}

fn perturb(params: &mut ModelParams, name: &str, idx: usize, delta: f64) {
    params.visit_mut(&mut |n, mut t| {
        if n == name {
            let (r, c) = t.dim();
            t[[idx / c, idx % c]] += delta;
            debug_assert!(idx < r * c);
        }
    });
}

/// Moves every tensor away from its initialization so that no gradient is
/// degenerate (zero `w_up` and a zero head make most gradients vanish).
/// Backbone weights are drawn at `0.3 / sqrt(fan_in)`; tunable tensors are O(1).
pub fn randomize_for_check(model: &mut Model, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    model.params.visit_mut(&mut |name, mut t| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let bound = match leaf {
            "scale" => {
                t.mapv_inplace(|_| rng.random_range(0.5..1.5));
                return;
            }
            "gamma" => {
                t.mapv_inplace(|_| rng.random_range(0.5..1.5));
                return;
            }
            "w_q" | "w_k" | "w_down" | "w_up" | "prompts" => 1.0,
            _ if name.starts_with("decoder.") => 1.0,
            _ if t.nrows() > 1 => 0.3 / (t.nrows() as f64).sqrt() * 3f64.sqrt(),
            _ => 0.3,
        };
        t.mapv_inplace(|_| rng.random_range(-bound..bound));
    });
}

/// Largest relative error of one tensor across all checked seeds.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub variant: String,
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub entries: Vec<SuiteEntry>,
    /// Frozen tensors that received a nonzero gradient.
    pub frozen_with_gradient: Vec<String>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.max_relative_error.is_nan() || e.max_relative_error >= self.tolerance)
            .map(|e| format!("{}:{}", e.variant, e.name))
            .collect();
        out.extend(self.frozen_with_gradient.iter().cloned());
        out
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// The two suite models: prompts with the Fourier module, and adapters only.
pub fn suite_variants() -> Vec<(&'static str, BackboneConfig, TuningMode)> {
    vec![
        ("plus_fpt", BackboneConfig::micro(), TuningMode::PlusFpt),
        ("plus_adapter", BackboneConfig::micro().without_prompts(), TuningMode::PlusAdapter),
    ]
}

/// Random micro-batch for a micro model.
pub fn random_sample(config: &BackboneConfig, spec: &ModalitySpec, seed: u64) -> (MultiModalSample, Array2<u8>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = config.image_size;
    let arrays = spec
        .entries()
        .iter()
        .map(|e| Array3::from_shape_fn((h, w, e.channels), |_| rng.random_range(0.0..1.0)))
        .collect();
    let k = config.num_classes as u8;
    let labels = Array2::from_shape_fn((h, w), |_| rng.random_range(0..k));
    (MultiModalSample::new(arrays), labels)
}

/// Checks every tunable tensor of each suite variant on each seed.
pub fn gradcheck_suite(seeds: &[u64], tolerance: f64) -> Result<GradcheckReport> {
    gradcheck_suite_with(seeds, tolerance, &|_| {})
}

/// As [`gradcheck_suite`], with `tamper` applied to the analytic gradients
/// before comparison. Used to confirm the suite catches broken gradients.
pub fn gradcheck_suite_with(
    seeds: &[u64],
    tolerance: f64,
    tamper: &dyn Fn(&mut ModelParams),
) -> Result<GradcheckReport> {
    let spec = ModalitySpec::rgb_depth();
    let mut entries: Vec<SuiteEntry> = Vec::new();
    let mut frozen_with_gradient = Vec::new();
    for (variant, config, tuning) in suite_variants() {
        let groups = tuning.groups();
        for &seed in seeds {
            let mut model = Model::new(config.clone(), spec.clone(), SpectralMode::default(), seed)?;
            randomize_for_check(&mut model, seed);
            let (sample, labels) = random_sample(&config, &spec, seed);
            let (_, mut grads) = analytic_gradients(&model, &sample, &labels, groups)?;
            grads.visit(&mut |name, g| {
                if !groups.contains(name) && g.iter().any(|&v| v != 0.0) {
                    frozen_with_gradient.push(format!("{variant}:{name}"));
                }
            });
            tamper(&mut grads);
            let checks = compare_with_finite_differences(
                &model,
                &sample,
                &labels,
                &grads,
                &|n| groups.contains(n),
                DEFAULT_STEP,
            )?;
            for c in checks {
                match entries.iter_mut().find(|e| e.variant == variant && e.name == c.name) {
                    Some(e) => e.max_relative_error = e.max_relative_error.max(c.relative_error),
                    None => entries.push(SuiteEntry {
                        variant: variant.to_string(),
                        name: c.name,
                        max_relative_error: c.relative_error,
                    }),
                }
            }
        }
    }
    frozen_with_gradient.dedup();
    Ok(GradcheckReport {
        tolerance,
        seeds: seeds.to_vec(),
        entries,
        frozen_with_gradient,
    })
}
