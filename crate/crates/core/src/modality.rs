//! Modality configuration, missing conditions and the missing-aware modal switch.
//!
//! A [`ModalitySpec`] lists `n` dense and `m` sparse modalities. Training under
//! the modal switch draws one [`SwitchMask`] of `n + m` independent bits per
//! batch; when every dense bit comes up `0` the dense bits are read as all `1`,
//! since dense prediction needs at least one dense input. Evaluation sweeps the
//! full list of legal [`MissingCondition`]s instead.

use std::fmt;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical names used by the synthetic generator and the default specs.
pub const RGB: &str = "R";
pub const DEPTH: &str = "D";
pub const LIDAR: &str = "L";
pub const EVENT: &str = "E";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialLayout {
    #[default]
    Grid,
    Pointset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub name: String,
    pub kind: ModalityKind,
    pub channels: usize,
    #[serde(default)]
    pub spatial: SpatialLayout,
}

impl ModalityEntry {
    pub fn new(name: &str, kind: ModalityKind, channels: usize, spatial: SpatialLayout) -> Self {
        Self {
            name: name.to_string(),
            kind,
            channels,
            spatial,
        }
    }
}

/// Ordered modality list. Entry order is the bit order of [`SwitchMask`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModalityEntry>", into = "Vec<ModalityEntry>")]
pub struct ModalitySpec {
    entries: Vec<ModalityEntry>,
}

impl TryFrom<Vec<ModalityEntry>> for ModalitySpec {
    type Error = Error;

    fn try_from(entries: Vec<ModalityEntry>) -> Result<Self> {
        ModalitySpec::new(entries)
    }
}

impl From<ModalitySpec> for Vec<ModalityEntry> {
    fn from(spec: ModalitySpec) -> Self {
        spec.entries
    }
}

impl ModalitySpec {
    pub fn new(entries: Vec<ModalityEntry>) -> Result<Self> {
        if !entries.iter().any(|e| e.kind == ModalityKind::Dense) {
            return Err(Error::InvalidSpec(
                "at least one dense modality is required".into(),
            ));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.name.is_empty() || e.name.contains([',', '|']) {
                return Err(Error::InvalidSpec(format!("bad modality name {:?}", e.name)));
            }
            if e.channels == 0 {
                return Err(Error::InvalidSpec(format!("modality {} has zero channels", e.name)));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::InvalidSpec(format!("duplicate modality name {}", e.name)));
            }
            // Mask strings print dense bits, then `|`, then sparse bits.
            if e.kind == ModalityKind::Dense && entries[..i].iter().any(|o| o.kind == ModalityKind::Sparse) {
                return Err(Error::InvalidSpec(format!("dense modality {} listed after a sparse one", e.name)));
            }
        }
        Ok(Self { entries })
    }

    /// RGB + depth.
    pub fn rgb_depth() -> Self {
        Self::new(vec![
            ModalityEntry::new(RGB, ModalityKind::Dense, 3, SpatialLayout::Grid),
            ModalityEntry::new(DEPTH, ModalityKind::Dense, 1, SpatialLayout::Grid),
        ])
        .expect("static spec")
    }

    /// RGB, depth, LiDAR and event: two dense, two sparse.
    pub fn quad() -> Self {
        Self::new(vec![
            ModalityEntry::new(RGB, ModalityKind::Dense, 3, SpatialLayout::Grid),
            ModalityEntry::new(DEPTH, ModalityKind::Dense, 1, SpatialLayout::Grid),
            ModalityEntry::new(LIDAR, ModalityKind::Sparse, 1, SpatialLayout::Pointset),
            ModalityEntry::new(EVENT, ModalityKind::Sparse, 1, SpatialLayout::Grid),
        ])
        .expect("static spec")
    }

    pub fn entries(&self) -> &[ModalityEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_dense(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ModalityKind::Dense).count()
    }

    pub fn m_sparse(&self) -> usize {
        self.len() - self.n_dense()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    fn dense_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ModalityKind::Dense)
            .map(|(i, _)| i)
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of legal modality combinations: at least one of `n_dense` present,
/// any subset of `m_sparse`. Equals `(2^n - 1) * 2^m`.
pub fn count_missing_conditions(n_dense: usize, m_sparse: usize) -> Result<u64> {
    if n_dense == 0 {
        return Err(Error::InvalidSpec(
            "dense prediction requires at least one dense modality".into(),
        ));
    }
    let (n, m) = (n_dense as u64, m_sparse as u64);
    let dense: u64 = (1..=n).map(|i| binomial(n, i)).sum();
    let sparse: u64 = (0..=m).map(|j| binomial(m, j)).sum();
    Ok(dense * sparse)
}

/// One bit per modality, aligned with [`ModalitySpec`] order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SwitchMask {
    bits: Vec<bool>,
    n_dense: usize,
}

impl SwitchMask {
    /// Builds a mask from raw bits without remapping. Fails if no dense modality is on.
    pub fn from_bits(spec: &ModalitySpec, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != spec.len() {
            return Err(Error::Alignment(format!(
                "mask has {} bits, spec has {} modalities",
                bits.len(),
                spec.len()
            )));
        }
        if !spec.dense_indices().any(|i| bits[i]) {
            return Err(Error::InvalidSpec("mask turns off every dense modality".into()));
        }
        Ok(Self {
            bits,
            n_dense: spec.n_dense(),
        })
    }

    /// Applies the dense remap to a raw draw: all-off dense bits become all-on.
    /// Sparse bits are left alone.
    pub fn from_raw_draw(spec: &ModalitySpec, mut bits: Vec<bool>) -> Result<Self> {
        if bits.len() != spec.len() {
            return Err(Error::Alignment(format!(
                "raw draw has {} bits, spec has {} modalities",
                bits.len(),
                spec.len()
            )));
        }
        if !spec.dense_indices().any(|i| bits[i]) {
            for i in spec.dense_indices() {
                bits[i] = true;
            }
        }
        Self::from_bits(spec, bits)
    }

    pub fn all_present(spec: &ModalitySpec) -> Self {
        Self {
            bits: vec![true; spec.len()],
            n_dense: spec.n_dense(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_present(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn is_complete(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Packs the mask into an integer, bit `i` = modality `i`.
    pub fn to_word(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .fold(0u64, |w, (i, &b)| w | (u64::from(b) << i))
    }
}

/// Dense bits, a `|`, then sparse bits, e.g. `11|10`. Assumes dense entries come first.
impl fmt::Display for SwitchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &b) in self.bits.iter().enumerate() {
            if i == self.n_dense {
                f.write_str("|")?;
            }
            f.write_str(if b { "1" } else { "0" })?;
        }
        if self.n_dense == self.bits.len() {
            f.write_str("|")?;
        }
        Ok(())
    }
}

/// Draws one switch mask: every bit uniform and independent, then the dense remap.
pub fn sample_switch_mask<R: Rng + ?Sized>(spec: &ModalitySpec, rng: &mut R) -> SwitchMask {
    let raw: Vec<bool> = (0..spec.len()).map(|_| rng.random::<bool>()).collect();
    SwitchMask::from_raw_draw(spec, raw).expect("remapped draw always has a dense bit")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingCondition {
    present: Vec<bool>,
    names: Vec<String>,
    canonical_id: usize,
}

impl MissingCondition {
    pub fn canonical_id(&self) -> usize {
        self.canonical_id
    }

    pub fn present_names(&self) -> Vec<&str> {
        self.names
            .iter()
            .zip(&self.present)
            .filter(|(_, &p)| p)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn is_present(&self, name: &str) -> bool {
        self.names
            .iter()
            .zip(&self.present)
            .any(|(n, &p)| p && n == name)
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// Comma-joined present names, e.g. `R,D`.
    pub fn label(&self) -> String {
        self.present_names().join(",")
    }

    pub fn to_mask(&self, spec: &ModalitySpec) -> Result<SwitchMask> {
        SwitchMask::from_bits(spec, self.present.clone())
    }
}

impl fmt::Display for MissingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Every legal condition, complete first, then by descending presence count,
/// ties broken lexicographically on the spec indices of present modalities.
pub fn enumerate_conditions(spec: &ModalitySpec) -> Vec<MissingCondition> {
    let k = spec.len();
    let dense: Vec<usize> = spec.dense_indices().collect();
    let mut subsets: Vec<Vec<bool>> = (0u64..(1u64 << k))
        .map(|word| (0..k).map(|i| word >> i & 1 == 1).collect::<Vec<bool>>())
        .filter(|bits| dense.iter().any(|&i| bits[i]))
        .collect();
    let key = |bits: &Vec<bool>| -> (std::cmp::Reverse<usize>, Vec<usize>) {
        let idx: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
        (std::cmp::Reverse(idx.len()), idx)
    };
    subsets.sort_by_key(key);
    let names: Vec<String> = spec.names().map(str::to_string).collect();
    subsets
        .into_iter()
        .enumerate()
        .map(|(canonical_id, present)| MissingCondition {
            present,
            names: names.clone(),
            canonical_id,
        })
        .collect()
}

/// Finds the condition matching a mask.
pub fn condition_for_mask(conditions: &[MissingCondition], mask: &SwitchMask) -> Option<usize> {
    conditions.iter().position(|c| c.present == mask.bits())
}

/// Parses `"R,D"` style lists of present modality names.
pub fn parse_condition(spec: &ModalitySpec, text: &str) -> Result<MissingCondition> {
    let mut present = vec![false; spec.len()];
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let idx = spec
            .index_of(part)
            .ok_or_else(|| Error::UnknownCondition(format!("no modality named {part:?}")))?;
        present[idx] = true;
    }
    enumerate_conditions(spec)
        .into_iter()
        .find(|c| c.present == present)
        .ok_or_else(|| {
            Error::UnknownCondition(format!("{text:?} keeps no dense modality"))
        })
}

/// How an absent modality is represented at the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Replace the array with zeros; token count stays fixed.
    #[default]
    ZeroFill,
    /// Omit the modality's tokens from the stream.
    DropTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityInput {
    /// `H x W x C`.
    pub data: Array3<f64>,
    /// Set when the modality's tokens must be left out of the stream.
    pub omitted: bool,
}

/// Input arrays aligned with a [`ModalitySpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub inputs: Vec<ModalityInput>,
}

impl MultiModalSample {
    pub fn new(arrays: Vec<Array3<f64>>) -> Self {
        Self {
            inputs: arrays
                .into_iter()
                .map(|data| ModalityInput {
                    data,
                    omitted: false,
                })
                .collect(),
        }
    }

    pub fn height_width(&self) -> (usize, usize) {
        let d = self.inputs[0].data.dim();
        (d.0, d.1)
    }
}

pub fn apply_modality_dropout(
    sample: &MultiModalSample,
    mask: &SwitchMask,
    mode: DropoutMode,
) -> Result<MultiModalSample> {
    if sample.inputs.len() != mask.len() {
        return Err(Error::Alignment(format!(
            "sample has {} modalities, mask has {} bits",
            sample.inputs.len(),
            mask.len()
        )));
    }
    let inputs = sample
        .inputs
        .iter()
        .zip(mask.bits())
        .map(|(input, &on)| {
            if on {
                input.clone()
            } else {
                ModalityInput {
                    data: Array3::zeros(input.data.raw_dim()),
                    omitted: input.omitted || mode == DropoutMode::DropTokens,
                }
            }
        })
        .collect();
    Ok(MultiModalSample { inputs })
}

/// Static baseline assignment: `round(ratio * dataset_size)` samples get a
/// non-complete condition drawn uniformly, the rest stay complete. Returns
/// indices into [`enumerate_conditions`].
pub fn assign_fixed_missing_ratio<R: Rng + ?Sized>(
    dataset_size: usize,
    ratio: f64,
    spec: &ModalitySpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(Error::Config(format!("missing ratio {ratio} outside [0, 1]")));
    }
    let total = enumerate_conditions(spec).len();
    let mut assignment = vec![0usize; dataset_size];
    if total == 1 {
        return Ok(assignment);
    }
    let incomplete = (ratio * dataset_size as f64).round() as usize;
    let mut order: Vec<usize> = (0..dataset_size).collect();
    order.shuffle(rng);
    for &i in &order[..incomplete.min(dataset_size)] {
        assignment[i] = rng.random_range(1..total);
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(n: usize, m: usize) -> u64 {
        let k = n + m;
        (0u64..1 << k)
            .filter(|w| (0..n).any(|i| w >> i & 1 == 1))
            .count() as u64
    }

    #[test]
    fn counts_match_enumeration() {
        assert_eq!(count_missing_conditions(2, 2).unwrap(), 12);
        assert_eq!(count_missing_conditions(1, 0).unwrap(), 1);
        assert_eq!(count_missing_conditions(3, 2).unwrap(), 28);
        assert_eq!(brute_force(3, 2), 28);
        for n in 1..=5 {
            for m in 0..=5 {
                assert_eq!(count_missing_conditions(n, m).unwrap(), brute_force(n, m));
            }
        }
    }

    #[test]
    fn zero_dense_is_rejected() {
        assert!(matches!(count_missing_conditions(0, 3), Err(Error::InvalidSpec(_))));
        let bad = ModalitySpec::new(vec![ModalityEntry::new(
            "L",
            ModalityKind::Sparse,
            1,
            SpatialLayout::Pointset,
        )]);
        assert!(bad.is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let dup = ModalitySpec::new(vec![
            ModalityEntry::new("R", ModalityKind::Dense, 3, SpatialLayout::Grid),
            ModalityEntry::new("R", ModalityKind::Dense, 1, SpatialLayout::Grid),
        ]);
        assert!(dup.is_err());
    }

    #[test]
    fn enumeration_order() {
        let conds = enumerate_conditions(&ModalitySpec::rgb_depth());
        let labels: Vec<String> = conds.iter().map(|c| c.label()).collect();
        assert_eq!(labels, ["R,D", "R", "D"]);

        let one_one = ModalitySpec::new(vec![
            ModalityEntry::new("R", ModalityKind::Dense, 3, SpatialLayout::Grid),
            ModalityEntry::new("L", ModalityKind::Sparse, 1, SpatialLayout::Pointset),
        ])
        .unwrap();
        assert_eq!(enumerate_conditions(&one_one).len(), 2);

        let quad = enumerate_conditions(&ModalitySpec::quad());
        assert_eq!(quad.len(), 12);
        assert!(quad[0].is_complete());
        for (i, c) in quad.iter().enumerate() {
            assert_eq!(c.canonical_id(), i);
            assert!(c.is_present(RGB) || c.is_present(DEPTH));
            for d in &quad[..i] {
                assert_ne!(d.present, c.present);
                assert!(d.present_count() >= c.present_count());
            }
        }
    }

    #[test]
    fn remap_examples() {
        let spec = ModalitySpec::quad();
        let m = SwitchMask::from_raw_draw(&spec, vec![false, false, true, false]).unwrap();
        assert_eq!(m.bits(), &[true, true, true, false]);
        assert_eq!(m.to_string(), "11|10");
        let raw = vec![true, false, true, true];
        let m = SwitchMask::from_raw_draw(&spec, raw.clone()).unwrap();
        assert_eq!(m.bits(), raw.as_slice());
        let none = SwitchMask::from_raw_draw(&spec, vec![false; 4]).unwrap();
        assert_eq!(none.to_string(), "11|00");
    }

    #[test]
    fn mask_display_without_sparse() {
        let m = SwitchMask::all_present(&ModalitySpec::rgb_depth());
        assert_eq!(m.to_string(), "11|");
    }

    #[test]
    fn mask_state_is_n_plus_m_bits() {
        let spec = ModalitySpec::quad();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = sample_switch_mask(&spec, &mut rng);
            assert_eq!(m.len(), 4);
            assert!(m.to_word() < 1 << 4);
        }
    }

    #[test]
    fn parse_condition_names() {
        let spec = ModalitySpec::rgb_depth();
        assert!(parse_condition(&spec, "R,D").unwrap().is_complete());
        let d = parse_condition(&spec, "D").unwrap();
        assert!(!d.is_present(RGB));
        assert_eq!(d.canonical_id(), 2);
        assert!(matches!(parse_condition(&spec, "X"), Err(Error::UnknownCondition(_))));
        let quad = ModalitySpec::quad();
        assert!(parse_condition(&quad, "L,E").is_err());
    }

    fn toy_sample() -> MultiModalSample {
        MultiModalSample::new(vec![
            Array3::from_shape_fn((4, 4, 3), |(i, j, c)| (i + j + c) as f64 + 0.5),
            Array3::from_shape_fn((4, 4, 1), |(i, j, _)| (i * j) as f64 + 0.25),
        ])
    }

    #[test]
    fn dropout_identity_and_zeroing() {
        let spec = ModalitySpec::rgb_depth();
        let s = toy_sample();
        let all = SwitchMask::all_present(&spec);
        assert_eq!(apply_modality_dropout(&s, &all, DropoutMode::ZeroFill).unwrap(), s);

        let no_depth = SwitchMask::from_bits(&spec, vec![true, false]).unwrap();
        let once = apply_modality_dropout(&s, &no_depth, DropoutMode::ZeroFill).unwrap();
        assert!(once.inputs[1].data.iter().all(|&v| v == 0.0));
        assert_eq!(once.inputs[0], s.inputs[0]);
        let twice = apply_modality_dropout(&once, &no_depth, DropoutMode::ZeroFill).unwrap();
        assert_eq!(once, twice);

        let dropped = apply_modality_dropout(&s, &no_depth, DropoutMode::DropTokens).unwrap();
        assert!(dropped.inputs[1].omitted);
        assert!(!dropped.inputs[0].omitted);
    }

    #[test]
    fn dropout_alignment_error() {
        let quad = ModalitySpec::quad();
        let mask = SwitchMask::all_present(&quad);
        assert!(matches!(
            apply_modality_dropout(&toy_sample(), &mask, DropoutMode::ZeroFill),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn fixed_ratio_counts() {
        let spec = ModalitySpec::quad();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zero = assign_fixed_missing_ratio(100, 0.0, &spec, &mut rng).unwrap();
        assert!(zero.iter().all(|&c| c == 0));
        let a = assign_fixed_missing_ratio(1000, 0.7, &spec, &mut rng).unwrap();
        let incomplete = a.iter().filter(|&&c| c != 0).count();
        assert!((699..=701).contains(&incomplete));
        assert!(assign_fixed_missing_ratio(10, 1.5, &spec, &mut rng).is_err());
    }

    #[test]
    fn fixed_ratio_histogram_is_uniform() {
        // Chi-square over the 11 non-complete quad conditions, 10 dof.
        let spec = ModalitySpec::quad();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = assign_fixed_missing_ratio(10_000, 1.0, &spec, &mut rng).unwrap();
        let mut hist = [0f64; 12];
        for &c in &a {
            hist[c] += 1.0;
        }
        assert_eq!(hist[0], 0.0);
        let expected = 10_000.0 / 11.0;
        let chi2: f64 = hist[1..].iter().map(|&o| (o - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 10 dof.
        assert!(chi2 < 29.59, "chi2 = {chi2}");
    }
}
