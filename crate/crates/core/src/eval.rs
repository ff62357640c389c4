//! Missing-condition and sensor-failure evaluation, plus the prompt-space ablation.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{BackboneConfig, Model};
use crate::checkpoint::TOOL_VERSION;
use crate::data::{inject_failure, scene_seed, FailureKind, FailureSpec, SyntheticScene};
use crate::error::{Error, Result};
use crate::fpt::{PromptSpace, SpectralMode};
use crate::metrics::{compute_miou, ConfusionMatrix};
use crate::modality::{
    apply_modality_dropout, enumerate_conditions, DropoutMode, MissingCondition, ModalityKind,
    ModalitySpec,
};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Condition,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub label: String,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

impl ReportRow {
    fn from_matrix(kind: RowKind, label: String, cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            kind,
            label,
            miou: compute_miou(cm)?,
            per_class_iou: cm.per_class_iou(),
            pixels: cm.total(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Arithmetic mean of the row mIoUs.
    pub mean_miou: f64,
    pub config_hash: String,
    pub tool_version: String,
}

impl EvalReport {
    pub fn new(rows: Vec<ReportRow>, config_hash: &str) -> Self {
        let mean_miou = if rows.is_empty() {
            f64::NAN
        } else {
            rows.iter().map(|r| r.miou).sum::<f64>() / rows.len() as f64
        };
        Self {
            rows,
            mean_miou,
            config_hash: config_hash.to_string(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    fn num_classes(&self) -> usize {
        self.rows.first().map_or(0, |r| r.per_class_iou.len())
    }

    /// `kind,label,miou,iou_0..iou_{K-1}`; empty cells for zero-union classes.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# config_hash={} tool_version={}\nkind,label,miou",
            self.config_hash, self.tool_version
        );
        for k in 0..self.num_classes() {
            let _ = write!(s, ",iou_{k}");
        }
        s.push('\n');
        for r in &self.rows {
            let kind = match r.kind {
                RowKind::Condition => "condition",
                RowKind::Failure => "failure",
            };
            let _ = write!(s, "{kind},\"{}\",{:.6}", r.label, r.miou);
            for iou in &r.per_class_iou {
                match iou {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "mean,\"mean\",{:.6}", self.mean_miou);
        s
    }

    /// Aligned text table with mIoU in percent.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(9);
        let mut s = format!("{:<width$}  {:>7}", "condition", "mIoU");
        for k in 0..self.num_classes() {
            let _ = write!(s, "  {:>6}", format!("c{k}"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}  {:>7.2}", r.label, 100.0 * r.miou);
            for iou in &r.per_class_iou {
                match iou {
                    Some(v) => {
                        let _ = write!(s, "  {:>6.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, "  {:>6}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "{:<width$}  {:>7.2}", "mean", 100.0 * self.mean_miou);
        let _ = writeln!(s, "config {} / v{}", self.config_hash, self.tool_version);
        s
    }

    /// Writes `report.csv`, `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        crate::store::write_json(&dir.join("report.json"), self)
    }
}

/// Evaluation settings shared by all rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalOptions {
    pub severity: f64,
    pub dropout: DropoutMode,
    /// Seeds the per-scene failure random sources.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            severity: 0.5,
            dropout: DropoutMode::ZeroFill,
            seed: 0,
        }
    }
}

/// Confusion matrix of the model on `scenes` with the absent modalities of
/// `condition` dropped.
pub fn evaluate_condition(
    model: &Model,
    scenes: &[SyntheticScene],
    condition: &MissingCondition,
    dropout: DropoutMode,
) -> Result<ConfusionMatrix> {
    let mask = condition.to_mask(&model.spec).map_err(|_| {
        Error::UnknownCondition(format!("{} does not fit the model's modalities", condition.label()))
    })?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for scene in scenes {
        let sample = scene.to_sample(&model.spec)?;
        let input = if mask.is_complete() {
            sample
        } else {
            apply_modality_dropout(&sample, &mask, dropout)?
        };
        cm.add(&scene.labels, &model.predict(&input)?.classes)?;
    }
    Ok(cm)
}

/// Confusion matrix with all modalities present and `failure` injected into every scene.
pub fn evaluate_failure(
    model: &Model,
    scenes: &[SyntheticScene],
    failure: &FailureSpec,
    seed: u64,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, i));
        let corrupted = inject_failure(scene, failure, &model.spec, &mut rng)?;
        cm.add(&corrupted.labels, &model.predict(&corrupted.to_sample(&model.spec)?)?.classes)?;
    }
    Ok(cm)
}

/// Failure kinds with a compatible target in `spec`.
pub fn applicable_failures(spec: &ModalitySpec, severity: f64) -> Vec<FailureSpec> {
    FailureKind::ALL
        .iter()
        .filter_map(|&k| FailureSpec::for_spec(k, severity, spec).ok())
        .collect()
}

/// One row per missing condition followed by one row per applicable failure kind.
pub fn evaluate_matrix(
    model: &Model,
    scenes: &[SyntheticScene],
    options: &EvalOptions,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for c in enumerate_conditions(&model.spec) {
        let cm = evaluate_condition(model, scenes, &c, options.dropout)?;
        rows.push(ReportRow::from_matrix(RowKind::Condition, c.label(), &cm)?);
    }
    rows.extend(failure_rows(model, scenes, options)?);
    Ok(EvalReport::new(rows, config_hash))
}

pub fn failure_rows(model: &Model, scenes: &[SyntheticScene], options: &EvalOptions) -> Result<Vec<ReportRow>> {
    applicable_failures(&model.spec, options.severity)
        .iter()
        .map(|f| {
            let cm = evaluate_failure(model, scenes, f, options.seed)?;
            ReportRow::from_matrix(RowKind::Failure, f.label(), &cm)
        })
        .collect()
}

/// Complete condition followed by each single-dense-missing condition (all
/// other modalities present).
pub fn ablation_conditions(spec: &ModalitySpec) -> Vec<MissingCondition> {
    let all = enumerate_conditions(spec);
    let mut out = vec![all[0].clone()];
    for (i, e) in spec.entries().iter().enumerate() {
        if e.kind != ModalityKind::Dense || spec.n_dense() < 2 {
            continue;
        }
        if let Some(c) = all
            .iter()
            .find(|c| spec.entries().iter().enumerate().all(|(j, e)| c.is_present(&e.name) == (j != i)))
        {
            out.push(c.clone());
        }
    }
    out
}

/// mIoU under each of [`ablation_conditions`].
pub fn ablation_scores(model: &Model, scenes: &[SyntheticScene], dropout: DropoutMode) -> Result<Vec<f64>> {
    ablation_conditions(&model.spec)
        .iter()
        .map(|c| compute_miou(&evaluate_condition(model, scenes, c, dropout)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: PromptSpace,
    pub seeds: Vec<u64>,
    /// `per_seed[s][column]`.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AblationRow {
    pub fn new(variant: PromptSpace, seeds: Vec<u64>, per_seed: Vec<Vec<f64>>) -> Self {
        let cols = per_seed.first().map_or(0, Vec::len);
        let n = per_seed.len() as f64;
        let mean: Vec<f64> = (0..cols).map(|c| per_seed.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let std = (0..cols)
            .map(|c| {
                if per_seed.len() < 2 {
                    return 0.0;
                }
                let ss: f64 = per_seed.iter().map(|r| (r[c] - mean[c]).powi(2)).sum();
                (ss / (n - 1.0)).sqrt()
            })
            .collect();
        Self {
            variant,
            seeds,
            per_seed,
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: PromptSpace) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Rows are prompt spaces; columns are complete and each dense modality
    /// missing, as `mean ± std` in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<18}", "prompt space");
        for c in &self.columns {
            let _ = write!(s, "  {:>16}", c);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<18}", r.variant.label());
            for (m, sd) in r.mean.iter().zip(&r.std) {
                let _ = write!(s, "  {:>16}", format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd));
            }
            s.push('\n');
        }
        s
    }
}

/// Column headers for [`ablation_conditions`]: the complete condition label,
/// then `"{name} missing"`.
pub fn ablation_columns(spec: &ModalitySpec) -> Vec<String> {
    ablation_conditions(spec)
        .iter()
        .map(|c| {
            if c.is_complete() {
                c.label()
            } else {
                let missing: Vec<&str> = spec.names().filter(|n| !c.is_present(n)).collect();
                format!("{} missing", missing.join(","))
            }
        })
        .collect()
}

/// Trains one model per prompt-space variant and seed, identical otherwise,
/// and scores each on [`ablation_conditions`]. Model initialization and
/// training both use the seed.
pub fn run_ablation(
    backbone: &BackboneConfig,
    spec: &ModalitySpec,
    train_scenes: &[SyntheticScene],
    eval_scenes: &[SyntheticScene],
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for variant in PromptSpace::ALL {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let spectral = SpectralMode {
                variant,
                ..base.spectral
            };
            let config = TrainConfig {
                seed,
                spectral,
                ..base.clone()
            };
            let mut model = Model::new(backbone.clone(), spec.clone(), spectral, seed)?;
            train(&mut model, train_scenes, &config)?;
            per_seed.push(ablation_scores(&model, eval_scenes, config.dropout)?);
        }
        rows.push(AblationRow::new(variant, seeds.to_vec(), per_seed));
    }
    Ok(AblationReport {
        columns: ablation_columns(spec),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SceneConfig};

    fn setup(spec: ModalitySpec) -> (Model, Dataset) {
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
        let mut m = Model::new(cfg, spec, SpectralMode::default(), 4).unwrap();
        crate::gradcheck::randomize_for_check(&mut m, 4);
        (m, Dataset::generate(&scene, 3, 4).unwrap())
    }

    #[test]
    fn quad_matrix_has_seventeen_rows() {
        let (m, ds) = setup(ModalitySpec::quad());
        let r = evaluate_matrix(&m, &ds.scenes, &EvalOptions::default(), "x").unwrap();
        assert_eq!(r.rows.len(), 17);
        assert_eq!(r.rows.iter().filter(|r| r.kind == RowKind::Failure).count(), 5);
        let mean = r.rows.iter().map(|r| r.miou).sum::<f64>() / 17.0;
        assert!((r.mean_miou - mean).abs() < 1e-12);
        let complete = evaluate_condition(&m, &ds.scenes, &enumerate_conditions(&m.spec)[0], DropoutMode::ZeroFill)
            .unwrap();
        assert_eq!(r.rows[0].miou.to_bits(), compute_miou(&complete).unwrap().to_bits());
        assert!(r.rows.iter().all(|r| (0.0..=1.0).contains(&r.miou)));
        assert_eq!(r.to_csv().lines().count(), 2 + 17 + 1);
        assert!(r.to_table().contains("R,D,L,E"));
    }

    #[test]
    fn rgb_depth_ablation_columns() {
        let spec = ModalitySpec::rgb_depth();
        assert_eq!(ablation_columns(&spec), vec!["R,D", "R missing", "D missing"]);
        let (m, ds) = setup(spec);
        assert_eq!(ablation_scores(&m, &ds.scenes, DropoutMode::ZeroFill).unwrap().len(), 3);
        let r = evaluate_matrix(&m, &ds.scenes, &EvalOptions::default(), "x").unwrap();
        // 3 conditions plus the three image failures.
        assert_eq!(r.rows.len(), 6);
    }

    #[test]
    fn ablation_row_statistics() {
        let row = AblationRow::new(PromptSpace::SpectrumOnly, vec![1, 2, 3], vec![vec![0.1], vec![0.2], vec![0.3]]);
        assert!((row.mean[0] - 0.2).abs() < 1e-15);
        assert!((row.std[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mismatched_condition_rejected() {
        let (m, ds) = setup(ModalitySpec::rgb_depth());
        let quad = enumerate_conditions(&ModalitySpec::quad());
        assert!(matches!(
            evaluate_condition(&m, &ds.scenes, &quad[0], DropoutMode::ZeroFill),
            Err(Error::UnknownCondition(_))
        ));
    }
}
