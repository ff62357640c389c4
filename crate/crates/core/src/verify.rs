//! Self-test suite run by `mmfpt verify`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::backbone::{BackboneConfig, Model, TuningMode};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::data::{read_dataset, write_dataset, Dataset, SceneConfig};
use crate::error::Result;
use crate::fpt::{
    fourier_prompt_forward, inverse_fft_roundtrip, parameter_free_prompt_attention, prompt_attention,
    real_fft, FourierPromptParams, SpectralMode, TokenBundle,
};
use crate::gradcheck::{gradcheck_suite, gradcheck_suite_with, DEFAULT_TOLERANCE};
use crate::modality::{count_missing_conditions, sample_switch_mask, ModalitySpec};
use crate::train::{train, Regime, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

pub fn check_condition_counts() -> CheckOutcome {
    let mut bad = Vec::new();
    for n in 1..=5usize {
        for m in 0..=5usize {
            let k = n + m;
            let brute = (0u64..1 << k).filter(|w| w & ((1 << n) - 1) != 0).count() as u64;
            if count_missing_conditions(n, m).ok() != Some(brute) {
                bad.push(format!("({n},{m})"));
            }
        }
    }
    let c = count_missing_conditions(2, 2).unwrap_or(0);
    outcome("condition counts", bad.is_empty() && c == 12, format!("C(2,2)={c}, mismatches {bad:?}"))
}

pub fn check_mask_distribution(draws: usize, seed: u64) -> CheckOutcome {
    let spec = ModalitySpec::quad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = [0usize; 4];
    let mut sparse = [0usize; 2];
    for _ in 0..draws {
        let m = sample_switch_mask(&spec, &mut rng);
        let b = m.bits();
        dense[usize::from(b[0]) << 1 | usize::from(b[1])] += 1;
        sparse[0] += usize::from(b[2]);
        sparse[1] += usize::from(b[3]);
    }
    let f = |c: usize| c as f64 / draws as f64;
    let dev = [
        (f(dense[3]) - 0.5).abs(),
        (f(dense[2]) - 0.25).abs(),
        (f(dense[1]) - 0.25).abs(),
        (f(sparse[0]) - 0.5).abs(),
        (f(sparse[1]) - 0.5).abs(),
    ];
    let worst = dev.iter().cloned().fold(0.0, f64::max);
    outcome(
        "switch mask distribution",
        dense[0] == 0 && worst <= 0.01,
        format!("P(11)={:.4} P(10)={:.4} P(01)={:.4} max dev {worst:.4}", f(dense[3]), f(dense[2]), f(dense[1])),
    )
}

fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (j, &v)| {
                let angle = -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                acc + Complex64::from_polar(v, angle)
            })
        })
        .collect()
}

pub fn check_fft(vectors: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..vectors {
        let n = rng.random_range(1..=64);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let oracle = naive_dft(&x);
        let got = real_fft(&x).expect("nonempty");
        for k in 0..n {
            worst = worst.max((got[k] - oracle[k].re).abs());
            // Conjugate symmetry of a real signal: X[N-k] = conj(X[k]).
            let mirror = oracle[(n - k) % n];
            worst = worst.max((mirror.re - oracle[k].re).abs()).max((mirror.im + oracle[k].im).abs());
        }
        let back = inverse_fft_roundtrip(&x);
        worst = x.iter().zip(&back).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    outcome("fft oracle", worst <= 1e-10, format!("max abs error {worst:.2e}"))
}

pub fn check_prompt_structure(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_row = 0f64;
    let mut ok = true;
    for _ in 0..20 {
        let (nq, nkv, d) = (rng.random_range(1..6), rng.random_range(1..12), rng.random_range(1..10));
        let mut rand = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let bundle = TokenBundle::new(rand(nq, d), rand(nkv, d), Some(rand(1, d)), 0).expect("valid");
        let params = FourierPromptParams {
            w_q: rand(d, d),
            w_k: rand(d, d),
        };
        let mode = SpectralMode::default();
        let out = fourier_prompt_forward(&bundle, &params, mode).expect("forward");
        ok &= out.prompts.dim() == bundle.prompts.dim() && out.features == bundle.features && out.cls == bundle.cls;
        let (_, cache) = prompt_attention(bundle.prompts.view(), bundle.features.view(), &params, mode).expect("attn");
        for row in cache.attention.rows() {
            worst_row = worst_row.max((row.sum() - 1.0).abs());
        }
        let free = parameter_free_prompt_attention(&bundle, mode).expect("free");
        let ident = fourier_prompt_forward(&bundle, &FourierPromptParams::identity(d), mode).expect("ident");
        ok &= free.prompts.iter().zip(ident.prompts.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(
        "prompt attention structure",
        ok && worst_row <= 1e-9,
        format!("max |row sum - 1| {worst_row:.2e}"),
    )
}

pub fn check_gradients(seeds: &[u64]) -> Result<CheckOutcome> {
    let report = gradcheck_suite(seeds, DEFAULT_TOLERANCE)?;
    let worst = report.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
    Ok(outcome(
        "finite-difference gradients",
        report.passed(),
        format!("{} tensors, worst {worst:.2e}, failing {:?}", report.entries.len(), report.failures()),
    ))
}

/// A sign-flipped prompt-query gradient must be reported.
pub fn check_mutation_detected() -> Result<CheckOutcome> {
    let report = gradcheck_suite_with(&[0], DEFAULT_TOLERANCE, &|g| {
        g.visit_mut(&mut |n, mut t| {
            if n == "fpt.block0.w_q" {
                t.mapv_inplace(|v| -v);
            }
        })
    })?;
    let failures = report.failures();
    Ok(outcome(
        "wrong-sign gradient detected",
        failures == ["plus_fpt:fpt.block0.w_q"],
        format!("flagged {failures:?}"),
    ))
}

fn micro_scene_setup() -> (BackboneConfig, Dataset) {
    let mut cfg = BackboneConfig::micro();
    cfg.image_size = (16, 16);
    cfg.num_classes = 5;
    let scene = SceneConfig {
        height: 16,
        width: 16,
        patch_size: 4,
        radius: (3.0, 6.0),
        ..SceneConfig::default()
    };
    (cfg, Dataset::generate(&scene, 1, 10).expect("valid scene config"))
}

pub fn check_frozen_contract() -> Result<CheckOutcome> {
    let (cfg, ds) = micro_scene_setup();
    let mut ok = true;
    let mut detail = Vec::new();
    for tuning in [TuningMode::DecoderOnly, TuningMode::PlusFpt, TuningMode::PlusAdapter] {
        let config = if tuning == TuningMode::PlusAdapter { cfg.clone().without_prompts() } else { cfg.clone() };
        let init = Model::new(config, ModalitySpec::rgb_depth(), SpectralMode::default(), 3)?;
        let mut model = init.clone();
        let tc = TrainConfig {
            tuning,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::new(3)
        };
        train(&mut model, &ds.scenes, &tc)?;
        let groups = tuning.groups();
        let before = init.params.tensor_map();
        for (name, t) in model.params.tensor_map() {
            if !groups.contains(&name) && t.iter().zip(before[&name].iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                ok = false;
                detail.push(format!("{tuning}:{name}"));
            }
        }
    }
    let mut model = Model::new(cfg, ModalitySpec::rgb_depth(), SpectralMode::default(), 3)?;
    let tc = TrainConfig {
        regime: Regime::Complete,
        epochs: 2,
        ..TrainConfig::new(3)
    };
    let masks = train(&mut model, &ds.scenes, &tc)?.masks_sampled;
    ok &= masks == 0;
    Ok(outcome(
        "frozen tensors untouched",
        ok,
        format!("changed frozen {detail:?}, masks under complete {masks}"),
    ))
}

pub fn check_round_trips() -> Result<CheckOutcome> {
    let dir = std::env::temp_dir().join(format!("mmfpt-verify-{}", std::process::id()));
    let (cfg, ds) = micro_scene_setup();
    let mut model = Model::new(cfg, ModalitySpec::quad(), SpectralMode::default(), 5)?;
    crate::gradcheck::randomize_for_check(&mut model, 5);
    let ck = Checkpoint {
        model,
        tuning: TuningMode::PlusFpt,
        config_hash: "verify".into(),
    };
    let ck_dir = dir.join("checkpoint");
    let ds_dir = dir.join("dataset");
    write_checkpoint(&ck_dir, &ck)?;
    write_dataset(&ds_dir, &ds, "verify")?;
    let ck_ok = read_checkpoint(&ck_dir)? == ck;
    let ds_ok = read_dataset(&ds_dir)?.0 == ds;
    let blob = ds_dir.join(crate::data::DATA_FILE);
    let bytes = std::fs::read(&blob).map_err(|e| crate::Error::io(&blob, e))?;
    std::fs::write(&blob, &bytes[..bytes.len() - 1]).map_err(|e| crate::Error::io(&blob, e))?;
    let truncation_caught = matches!(read_dataset(&ds_dir), Err(crate::Error::Integrity(_)));
    let _ = std::fs::remove_dir_all(&dir);
    Ok(outcome(
        "checkpoint and dataset round trips",
        ck_ok && ds_ok && truncation_caught,
        format!("checkpoint {ck_ok}, dataset {ds_ok}, truncation detected {truncation_caught}"),
    ))
}

/// Runs every check in order.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let seeds: Vec<u64> = (0..20).collect();
    Ok(vec![
        check_condition_counts(),
        check_mask_distribution(100_000, 17),
        check_fft(1000, 3),
        check_prompt_structure(5),
        check_gradients(&seeds)?,
        check_mutation_detected()?,
        check_frozen_contract()?,
        check_round_trips()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_checks_pass() {
        for c in [
            check_condition_counts(),
            check_mask_distribution(100_000, 1),
            check_fft(50, 2),
            check_prompt_structure(3),
        ] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(check_mutation_detected().unwrap().passed);
        assert!(check_round_trips().unwrap().passed);
    }
}
