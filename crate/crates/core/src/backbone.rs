//! One-stream multi-modal transformer with prompt tokens, bottleneck adapters
//! and a linear segmentation head.
//!
//! Token stream layout is `[prompts, features of each present modality, cls]`.
//! Each block is pre-norm self-attention followed by an MLP, with the adapter
//! running in parallel to the MLP. The first `fpt_blocks` adapters carry the
//! learnable Fourier prompt module; later adapters apply the parameter-free
//! prompt attention. The head averages feature tokens of all modalities in the
//! stream at each patch position, classifies them linearly and upsamples the
//! scores bilinearly to pixels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpt::{
    adapter_backward, adapter_forward_cached, AdapterCache, AdapterParams,
    PromptMixer, PromptSpace, SpectralMode, TokenBundle, TokenSplit,
};
use crate::modality::{ModalitySpec, MultiModalSample};
use crate::ops::{
    all_finite, gelu_backward, gelu_forward, layer_norm, layer_norm_backward, linear,
    linear_backward, softmax_rows, softmax_rows_backward, LayerNormCache,
};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub prompt_count: usize,
    pub bottleneck: usize,
    /// Blocks hosting the learnable Fourier prompt module; `None` means `ceil(depth / 3)`.
    pub fpt_blocks: Option<usize>,
    pub adapters: bool,
    /// Whether the parameter-free prompt attention keeps the spectral transform.
    pub parameter_free_fft: bool,
    pub num_classes: usize,
    pub image_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            depth: 4,
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            prompt_count: 8,
            bottleneck: 48,
            fpt_blocks: None,
            adapters: true,
            parameter_free_fft: true,
            num_classes: 5,
            image_size: (64, 64),
        }
    }

    /// ViT-B sized: 12 blocks of width 768, 200 prompts, 768x768 inputs with
    /// 16-pixel patches.
    pub fn paper_scale() -> Self {
        Self {
            depth: 12,
            d_model: 768,
            heads: 12,
            mlp_ratio: 4,
            patch_size: 16,
            prompt_count: 200,
            bottleneck: 48,
            fpt_blocks: None,
            adapters: true,
            parameter_free_fft: true,
            num_classes: 25,
            image_size: (768, 768),
        }
    }

    /// Two-block, width-8 model on 8x8 inputs used by gradient checks.
    pub fn micro() -> Self {
        Self {
            depth: 2,
            d_model: 8,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            prompt_count: 2,
            bottleneck: 4,
            fpt_blocks: Some(1),
            adapters: true,
            parameter_free_fft: true,
            num_classes: 3,
            image_size: (8, 8),
        }
    }

    /// Adapter-only variant: no prompts and no Fourier prompt module.
    pub fn without_prompts(mut self) -> Self {
        self.prompt_count = 0;
        self.fpt_blocks = Some(0);
        self
    }

    pub fn fpt_block_count(&self) -> usize {
        if !self.adapters || self.prompt_count == 0 {
            return 0;
        }
        self.fpt_blocks.unwrap_or(self.depth.div_ceil(3))
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size,
            self.image_size.1 / self.patch_size,
        )
    }

    pub fn tokens_per_modality(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.d_model == 0 || self.heads == 0 || self.patch_size == 0 {
            return bad("depth, d_model, heads and patch_size must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.fpt_blocks.is_some_and(|f| f > self.depth) {
            return bad("fpt_blocks exceeds depth".into());
        }
        if self.adapters && (self.bottleneck == 0 || self.bottleneck >= self.d_model) {
            return bad(format!(
                "bottleneck {} must lie in [1, d_model)",
                self.bottleneck
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible into {p}x{p} patches",
                p = self.patch_size
            )));
        }
        Ok(())
    }

    fn mixer_for(&self, block: usize) -> PromptMixer {
        if !self.adapters || self.prompt_count == 0 {
            PromptMixer::Off
        } else if block < self.fpt_block_count() {
            PromptMixer::Learnable
        } else {
            PromptMixer::ParameterFree
        }
    }

    fn mode_for(&self, block: usize, mode: SpectralMode) -> SpectralMode {
        if self.mixer_for(block) == PromptMixer::ParameterFree && !self.parameter_free_fft {
            SpectralMode::new(PromptSpace::SpatialOnly, mode.fft_axis)
        } else {
            mode
        }
    }

    /// Every tensor the model would hold, by name, without allocating it.
    pub fn layout(&self, spec: &ModalitySpec) -> ModelLayout {
        let d = self.d_model;
        let r = self.bottleneck;
        let t = self.tokens_per_modality();
        let p2 = self.patch_size * self.patch_size;
        let mut shapes = Vec::new();
        for e in spec.entries() {
            shapes.push((format!("embed.{}.w_patch", e.name), (p2 * e.channels, d)));
            shapes.push((format!("embed.{}.b_patch", e.name), (1, d)));
            shapes.push((format!("embed.{}.pos", e.name), (t, d)));
            shapes.push((format!("embed.{}.modality", e.name), (1, d)));
        }
        shapes.push(("prompts".into(), (self.prompt_count, d)));
        shapes.push(("cls".into(), (1, d)));
        for l in 0..self.depth {
            let hidden = d * self.mlp_ratio;
            for (n, shape) in [
                ("ln1.gamma", (1, d)),
                ("ln1.beta", (1, d)),
                ("attn.w_qkv", (d, 3 * d)),
                ("attn.b_qkv", (1, 3 * d)),
                ("attn.w_o", (d, d)),
                ("attn.b_o", (1, d)),
                ("ln2.gamma", (1, d)),
                ("ln2.beta", (1, d)),
                ("mlp.w_fc1", (d, hidden)),
                ("mlp.b_fc1", (1, hidden)),
                ("mlp.w_fc2", (hidden, d)),
                ("mlp.b_fc2", (1, d)),
            ] {
                shapes.push((format!("block{l}.{n}"), shape));
            }
            if self.adapters {
                shapes.push((format!("adapter.block{l}.w_down"), (d, r)));
                shapes.push((format!("adapter.block{l}.w_up"), (r, d)));
                shapes.push((format!("adapter.block{l}.scale"), (1, 1)));
                if self.mixer_for(l) == PromptMixer::Learnable {
                    shapes.push((format!("fpt.block{l}.w_q"), (r, r)));
                    shapes.push((format!("fpt.block{l}.w_k"), (r, r)));
                }
            }
        }
        shapes.push(("norm.gamma".into(), (1, d)));
        shapes.push(("norm.beta".into(), (1, d)));
        shapes.push(("decoder.w".into(), (d, self.num_classes)));
        shapes.push(("decoder.b".into(), (1, self.num_classes)));
        ModelLayout { shapes }
    }
}

/// Names and shapes of every parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    pub shapes: Vec<(String, (usize, usize))>,
}

impl ModelLayout {
    pub fn total(&self) -> usize {
        self.shapes.iter().map(|(_, (r, c))| r * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    pub name: String,
    pub w_patch: Array2<f64>,
    pub b_patch: Array2<f64>,
    pub pos: Array2<f64>,
    pub modality: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array2<f64>,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
    pub w_fc1: Array2<f64>,
    pub b_fc1: Array2<f64>,
    pub w_fc2: Array2<f64>,
    pub b_fc2: Array2<f64>,
    pub adapter: Option<AdapterParams>,
}

/// All model tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embeds: Vec<EmbedParams>,
    pub prompts: Array2<f64>,
    pub cls: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Array2<f64>,
    pub norm_beta: Array2<f64>,
    pub decoder_w: Array2<f64>,
    pub decoder_b: Array2<f64>,
}

fn scalar_view(x: &f64) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, 1), std::slice::from_ref(x)).expect("1x1")
}

fn scalar_view_mut(x: &mut f64) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((1, 1), std::slice::from_mut(x)).expect("1x1")
}

impl ModelParams {
    /// Zero tensors laid out for `config`.
    pub fn zeros(config: &BackboneConfig, spec: &ModalitySpec) -> Self {
        let d = config.d_model;
        let z = |r: usize, c: usize| Array2::zeros((r, c));
        let t = config.tokens_per_modality();
        let p2 = config.patch_size * config.patch_size;
        let hidden = d * config.mlp_ratio;
        Self {
            embeds: spec
                .entries()
                .iter()
                .map(|e| EmbedParams {
                    name: e.name.clone(),
                    w_patch: z(p2 * e.channels, d),
                    b_patch: z(1, d),
                    pos: z(t, d),
                    modality: z(1, d),
                })
                .collect(),
            prompts: z(config.prompt_count, d),
            cls: z(1, d),
            blocks: (0..config.depth)
                .map(|l| BlockParams {
                    ln1_gamma: z(1, d),
                    ln1_beta: z(1, d),
                    w_qkv: z(d, 3 * d),
                    b_qkv: z(1, 3 * d),
                    w_o: z(d, d),
                    b_o: z(1, d),
                    ln2_gamma: z(1, d),
                    ln2_beta: z(1, d),
                    w_fc1: z(d, hidden),
                    b_fc1: z(1, hidden),
                    w_fc2: z(hidden, d),
                    b_fc2: z(1, d),
                    adapter: config.adapters.then(|| {
                        AdapterParams::zeros(
                            d,
                            config.bottleneck,
                            config.mixer_for(l) == PromptMixer::Learnable,
                        )
                    }),
                })
                .collect(),
            norm_gamma: z(1, d),
            norm_beta: z(1, d),
            decoder_w: z(d, config.num_classes),
            decoder_b: z(1, config.num_classes),
        }
    }

    /// Random frozen backbone, small tunable tensors, zero `w_up` and zero head.
    pub fn init(config: &BackboneConfig, spec: &ModalitySpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut p = Self::zeros(config, spec);
        p.visit_mut(&mut |name, mut t| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if name.starts_with("decoder.") || leaf == "w_up" || leaf.starts_with("b_") || leaf == "beta" {
                return;
            }
            if leaf == "gamma" || leaf == "scale" {
                t.fill(1.0);
            } else if leaf == "w_down" || leaf == "w_q" || leaf == "w_k" {
                let bound = 1.0 / (t.nrows() as f64).sqrt();
                t.mapv_inplace(|_| rng.random_range(-bound..bound));
            } else if name == "prompts" {
                t.mapv_inplace(|_| rng.random_range(-INIT_STD..INIT_STD));
            } else {
                t.mapv_inplace(|_| normal.sample(&mut rng));
            }
        });
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, mut t| t.fill(0.0));
        z
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, ArrayView2<'_, f64>)) {
        for e in &self.embeds {
            let p = &e.name;
            f(&format!("embed.{p}.w_patch"), e.w_patch.view());
            f(&format!("embed.{p}.b_patch"), e.b_patch.view());
            f(&format!("embed.{p}.pos"), e.pos.view());
            f(&format!("embed.{p}.modality"), e.modality.view());
        }
        f("prompts", self.prompts.view());
        f("cls", self.cls.view());
        for (l, b) in self.blocks.iter().enumerate() {
            f(&format!("block{l}.ln1.gamma"), b.ln1_gamma.view());
            f(&format!("block{l}.ln1.beta"), b.ln1_beta.view());
            f(&format!("block{l}.attn.w_qkv"), b.w_qkv.view());
            f(&format!("block{l}.attn.b_qkv"), b.b_qkv.view());
            f(&format!("block{l}.attn.w_o"), b.w_o.view());
            f(&format!("block{l}.attn.b_o"), b.b_o.view());
            f(&format!("block{l}.ln2.gamma"), b.ln2_gamma.view());
            f(&format!("block{l}.ln2.beta"), b.ln2_beta.view());
            f(&format!("block{l}.mlp.w_fc1"), b.w_fc1.view());
            f(&format!("block{l}.mlp.b_fc1"), b.b_fc1.view());
            f(&format!("block{l}.mlp.w_fc2"), b.w_fc2.view());
            f(&format!("block{l}.mlp.b_fc2"), b.b_fc2.view());
            if let Some(a) = &b.adapter {
                f(&format!("adapter.block{l}.w_down"), a.w_down.view());
                f(&format!("adapter.block{l}.w_up"), a.w_up.view());
                f(&format!("adapter.block{l}.scale"), scalar_view(&a.scale));
                if let Some(fp) = &a.fpt {
                    f(&format!("fpt.block{l}.w_q"), fp.w_q.view());
                    f(&format!("fpt.block{l}.w_k"), fp.w_k.view());
                }
            }
        }
        f("norm.gamma", self.norm_gamma.view());
        f("norm.beta", self.norm_beta.view());
        f("decoder.w", self.decoder_w.view());
        f("decoder.b", self.decoder_b.view());
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMut2<'_, f64>)) {
        for e in &mut self.embeds {
            let p = e.name.clone();
            f(&format!("embed.{p}.w_patch"), e.w_patch.view_mut());
            f(&format!("embed.{p}.b_patch"), e.b_patch.view_mut());
            f(&format!("embed.{p}.pos"), e.pos.view_mut());
            f(&format!("embed.{p}.modality"), e.modality.view_mut());
        }
        f("prompts", self.prompts.view_mut());
        f("cls", self.cls.view_mut());
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{l}.ln1.gamma"), b.ln1_gamma.view_mut());
            f(&format!("block{l}.ln1.beta"), b.ln1_beta.view_mut());
            f(&format!("block{l}.attn.w_qkv"), b.w_qkv.view_mut());
            f(&format!("block{l}.attn.b_qkv"), b.b_qkv.view_mut());
            f(&format!("block{l}.attn.w_o"), b.w_o.view_mut());
            f(&format!("block{l}.attn.b_o"), b.b_o.view_mut());
            f(&format!("block{l}.ln2.gamma"), b.ln2_gamma.view_mut());
            f(&format!("block{l}.ln2.beta"), b.ln2_beta.view_mut());
            f(&format!("block{l}.mlp.w_fc1"), b.w_fc1.view_mut());
            f(&format!("block{l}.mlp.b_fc1"), b.b_fc1.view_mut());
            f(&format!("block{l}.mlp.w_fc2"), b.w_fc2.view_mut());
            f(&format!("block{l}.mlp.b_fc2"), b.b_fc2.view_mut());
            if let Some(a) = &mut b.adapter {
                f(&format!("adapter.block{l}.w_down"), a.w_down.view_mut());
                f(&format!("adapter.block{l}.w_up"), a.w_up.view_mut());
                f(&format!("adapter.block{l}.scale"), scalar_view_mut(&mut a.scale));
                if let Some(fp) = &mut a.fpt {
                    f(&format!("fpt.block{l}.w_q"), fp.w_q.view_mut());
                    f(&format!("fpt.block{l}.w_k"), fp.w_k.view_mut());
                }
            }
        }
        f("norm.gamma", self.norm_gamma.view_mut());
        f("norm.beta", self.norm_beta.view_mut());
        f("decoder.w", self.decoder_w.view_mut());
        f("decoder.b", self.decoder_b.view_mut());
    }

    pub fn layout(&self) -> ModelLayout {
        let mut shapes = Vec::new();
        self.visit(&mut |n, t| shapes.push((n.to_string(), t.dim())));
        ModelLayout { shapes }
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Array2<f64>> {
        let mut map = BTreeMap::new();
        self.visit(&mut |n, t| {
            map.insert(n.to_string(), t.to_owned());
        });
        map
    }
}


/// Which tensors a regime trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    Full,
    DecoderOnly,
    PlusFpt,
    PlusAdapter,
}

impl TuningMode {
    pub fn groups(self) -> TunableGroups {
        let (backbone, prompts, adapters) = match self {
            TuningMode::Full => (true, true, true),
            TuningMode::DecoderOnly => (false, false, false),
            TuningMode::PlusFpt => (false, true, true),
            TuningMode::PlusAdapter => (false, false, true),
        };
        TunableGroups {
            backbone,
            prompts,
            adapters,
            decoder: true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Full => "full",
            TuningMode::DecoderOnly => "decoder_only",
            TuningMode::PlusFpt => "plus_fpt",
            TuningMode::PlusAdapter => "plus_adapter",
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TuningMode::Full),
            "decoder_only" => Ok(TuningMode::DecoderOnly),
            "plus_fpt" => Ok(TuningMode::PlusFpt),
            "plus_adapter" => Ok(TuningMode::PlusAdapter),
            other => Err(Error::Config(format!("unknown tuning mode {other:?}"))),
        }
    }
}

/// Parameter groups that receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TunableGroups {
    pub backbone: bool,
    pub prompts: bool,
    pub adapters: bool,
    pub decoder: bool,
}

impl TunableGroups {
    pub const ALL: TunableGroups = TunableGroups {
        backbone: true,
        prompts: true,
        adapters: true,
        decoder: true,
    };

    pub fn contains(&self, name: &str) -> bool {
        if name.starts_with("decoder.") {
            self.decoder
        } else if name == "prompts" {
            self.prompts
        } else if name.starts_with("adapter.") || name.starts_with("fpt.") {
            self.adapters
        } else {
            self.backbone
        }
    }
}

/// Disjoint frozen/tunable split, name to element count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterPartition {
    pub mode: TuningMode,
    pub frozen: BTreeMap<String, usize>,
    pub tunable: BTreeMap<String, usize>,
}

impl ParameterPartition {
    pub fn is_tunable(&self, name: &str) -> bool {
        self.tunable.contains_key(name)
    }
}

pub fn partition_parameters(layout: &ModelLayout, mode: TuningMode) -> ParameterPartition {
    let groups = mode.groups();
    let mut frozen = BTreeMap::new();
    let mut tunable = BTreeMap::new();
    for (name, (r, c)) in &layout.shapes {
        let target = if groups.contains(name) {
            &mut tunable
        } else {
            &mut frozen
        };
        target.insert(name.clone(), r * c);
    }
    ParameterPartition {
        mode,
        frozen,
        tunable,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterCounts {
    pub frozen_count: usize,
    pub tunable_count: usize,
    pub tunable_fraction: f64,
}

pub fn count_parameters(partition: &ParameterPartition) -> ParameterCounts {
    let frozen_count: usize = partition.frozen.values().sum();
    let tunable_count: usize = partition.tunable.values().sum();
    ParameterCounts {
        frozen_count,
        tunable_count,
        tunable_fraction: tunable_count as f64 / (frozen_count + tunable_count) as f64,
    }
}

/// Per-pixel class indices, `H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub classes: Array2<u8>,
}

/// Argmax over the last axis; ties go to the lowest class index.
pub fn argmax_classes(scores: &Array3<f64>) -> SegmentationMap {
    let (h, w, _) = scores.dim();
    let classes = Array2::from_shape_fn((h, w), |(y, x)| {
        let lane = scores.slice(s![y, x, ..]);
        let mut best = 0usize;
        for (k, &v) in lane.iter().enumerate() {
            if v > lane[best] {
                best = k;
            }
        }
        best as u8
    });
    SegmentationMap { classes }
}

/// Half-pixel-centred bilinear interpolation from a patch grid to pixels,
/// clamped at the borders.
#[derive(Debug, Clone)]
pub struct Upsampler {
    height: usize,
    width: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl Upsampler {
    pub fn new(grid: (usize, usize), image: (usize, usize)) -> Self {
        let (gh, gw) = grid;
        let (h, w) = image;
        let axis = |out: usize, src_len: usize, i: usize| -> (usize, usize, f64) {
            let scale = src_len as f64 / out as f64;
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        };
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            let (y0, y1, fy) = axis(h, gh, y);
            for x in 0..w {
                let (x0, x1, fx) = axis(w, gw, x);
                taps.push([
                    (y0 * gw + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * gw + x1, (1.0 - fy) * fx),
                    (y1 * gw + x0, fy * (1.0 - fx)),
                    (y1 * gw + x1, fy * fx),
                ]);
            }
        }
        Self {
            height: h,
            width: w,
            taps,
        }
    }

    /// `grid_values` is `(gh * gw) x K`; returns `(H * W) x K`.
    pub fn forward(&self, grid_values: &Array2<f64>) -> Array2<f64> {
        let k = grid_values.ncols();
        let mut out = Array2::zeros((self.taps.len(), k));
        for (mut row, taps) in out.rows_mut().into_iter().zip(&self.taps) {
            for &(src, wgt) in taps {
                if wgt != 0.0 {
                    row.scaled_add(wgt, &grid_values.row(src));
                }
            }
        }
        out
    }

    pub fn backward(&self, grad: &Array2<f64>, grid_len: usize) -> Array2<f64> {
        let mut out = Array2::zeros((grid_len, grad.ncols()));
        for (row, taps) in grad.rows().into_iter().zip(&self.taps) {
            for &(src, wgt) in taps {
                if wgt != 0.0 {
                    out.row_mut(src).scaled_add(wgt, &row);
                }
            }
        }
        out
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Which spec modalities occupy the feature slice, in stream order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamLayout {
    pub split: TokenSplit,
    pub modalities: Vec<usize>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    ln1: LayerNormCache,
    normed1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads_out: Array2<f64>,
    adapter: Option<AdapterCache>,
    ln2: LayerNormCache,
    normed2: Array2<f64>,
    fc1: Array2<f64>,
    act: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layout: StreamLayout,
    patches: Vec<Option<Array2<f64>>>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    pooled: Array2<f64>,
    upsampler: Upsampler,
}

/// Configured backbone plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub spec: ModalitySpec,
    pub mode: SpectralMode,
    pub params: ModelParams,
}

/// Per-modality patch matrices; `None` for omitted modalities.
type PatchInputs = Vec<Option<Array2<f64>>>;

fn patchify(data: &Array3<f64>, p: usize) -> Array2<f64> {
    let (h, w, c) = data.dim();
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, p * p * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut j = 0;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        row[j] = data[[gy * p + py, gx * p + px, ch]];
                        j += 1;
                    }
                }
            }
        }
    }
    out
}

impl Model {
    pub fn new(config: BackboneConfig, spec: ModalitySpec, mode: SpectralMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, &spec, seed);
        Ok(Self {
            config,
            spec,
            mode,
            params,
        })
    }

    pub fn layout(&self) -> ModelLayout {
        self.params.layout()
    }

    fn check_sample(&self, sample: &MultiModalSample) -> Result<()> {
        if sample.inputs.len() != self.spec.len() {
            return Err(Error::Alignment(format!(
                "sample has {} modalities, spec has {}",
                sample.inputs.len(),
                self.spec.len()
            )));
        }
        let (h, w) = self.config.image_size;
        for (input, entry) in sample.inputs.iter().zip(self.spec.entries()) {
            let (ih, iw, ic) = input.data.dim();
            if ih % self.config.patch_size != 0 || iw % self.config.patch_size != 0 {
                return Err(Error::Shape(format!(
                    "{} is {ih}x{iw}, not divisible by patch size {}",
                    entry.name, self.config.patch_size
                )));
            }
            if (ih, iw) != (h, w) || ic != entry.channels {
                return Err(Error::Shape(format!(
                    "{} is {ih}x{iw}x{ic}, expected {h}x{w}x{}",
                    entry.name, entry.channels
                )));
            }
        }
        if sample.inputs.iter().all(|i| i.omitted) {
            return Err(Error::Shape("every modality is omitted".into()));
        }
        Ok(())
    }

    fn embed(&self, sample: &MultiModalSample) -> Result<(Array2<f64>, StreamLayout, PatchInputs)> {
        self.check_sample(sample)?;
        let p = self.config.patch_size;
        let mut parts = vec![self.params.prompts.clone()];
        let mut modalities = Vec::new();
        let mut patches = Vec::new();
        for (i, (input, emb)) in sample.inputs.iter().zip(&self.params.embeds).enumerate() {
            if input.omitted {
                patches.push(None);
                continue;
            }
            let x = patchify(&input.data, p);
            let tokens = linear(x.view(), &emb.w_patch, &emb.b_patch) + &emb.pos + &emb.modality;
            parts.push(tokens);
            patches.push(Some(x));
            modalities.push(i);
        }
        parts.push(self.params.cls.clone());
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        let tokens = ndarray::concatenate(Axis(0), &views).expect("shared width");
        let split = TokenSplit {
            n_prompts: self.config.prompt_count,
            n_features: modalities.len() * self.config.tokens_per_modality(),
            has_cls: true,
        };
        Ok((tokens, StreamLayout { split, modalities }, patches))
    }

    /// Patch tokens of every non-omitted modality with prompts prepended and
    /// the class token appended.
    pub fn patch_embed(&self, sample: &MultiModalSample) -> Result<(TokenBundle, StreamLayout)> {
        let (tokens, layout, _) = self.embed(sample)?;
        Ok((TokenBundle::from_tokens(&tokens, layout.split, 0)?, layout))
    }

    fn block_forward(&self, l: usize, x: &Array2<f64>, split: TokenSplit) -> Result<(Array2<f64>, BlockCache)> {
        let b = &self.params.blocks[l];
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let (normed1, ln1) = layer_norm(x.view(), &b.ln1_gamma, &b.ln1_beta);
        let qkv = linear(normed1.view(), &b.w_qkv, &b.b_qkv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads_out = Array2::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = softmax_rows(&(q.dot(&k.t()) * scale));
            heads_out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let x1 = x + &linear(heads_out.view(), &b.w_o, &b.b_o);
        let (normed2, ln2) = layer_norm(x1.view(), &b.ln2_gamma, &b.ln2_beta);
        let fc1 = linear(normed2.view(), &b.w_fc1, &b.b_fc1);
        let act = gelu_forward(&fc1);
        let mlp = linear(act.view(), &b.w_fc2, &b.b_fc2);
        let (base, adapter) = match &b.adapter {
            Some(a) => {
                let mode = self.config.mode_for(l, self.mode);
                let (out, cache) = adapter_forward_cached(&x1, a, split, self.config.mixer_for(l), mode)?;
                (out, Some(cache))
            }
            None => (x1, None),
        };
        let out = base + &mlp;
        if !all_finite(&out) {
            return Err(Error::NonFiniteActivation {
                block: l,
                what: "block output".into(),
            });
        }
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                ln1,
                normed1,
                qkv,
                probs,
                heads_out,
                adapter,
                ln2,
                normed2,
                fc1,
                act,
            },
        ))
    }

    fn block_backward(
        &self,
        l: usize,
        cache: &BlockCache,
        split: TokenSplit,
        grad: &Array2<f64>,
        grads: &mut BlockParams,
        groups: TunableGroups,
    ) -> Result<Array2<f64>> {
        let b = &self.params.blocks[l];
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let bb = groups.backbone;

        // MLP branch.
        let d_act = linear_backward(
            cache.act.view(),
            &b.w_fc2,
            grad,
            bb.then_some((&mut grads.w_fc2, &mut grads.b_fc2)),
        );
        let d_fc1 = gelu_backward(&cache.fc1, &d_act);
        let d_normed2 = linear_backward(
            cache.normed2.view(),
            &b.w_fc1,
            &d_fc1,
            bb.then_some((&mut grads.w_fc1, &mut grads.b_fc1)),
        );
        let mut d_x1 = layer_norm_backward(
            &cache.ln2,
            &b.ln2_gamma,
            &d_normed2,
            bb.then_some((&mut grads.ln2_gamma, &mut grads.ln2_beta)),
        );
        // Adapter branch, including the residual path.
        match (&b.adapter, &cache.adapter) {
            (Some(a), Some(ac)) => {
                let mode = self.config.mode_for(l, self.mode);
                let ag = if groups.adapters { grads.adapter.as_mut() } else { None };
                d_x1 += &adapter_backward(ac, a, split, self.config.mixer_for(l), mode, grad, ag)?;
            }
            _ => d_x1 += grad,
        }
        // Attention branch.
        let d_heads = linear_backward(
            cache.heads_out.view(),
            &b.w_o,
            &d_x1,
            bb.then_some((&mut grads.w_o, &mut grads.b_o)),
        );
        let scale = 1.0 / (dh as f64).sqrt();
        let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = cache.qkv.slice(s![.., qs..qs + dh]);
            let k = cache.qkv.slice(s![.., ks..ks + dh]);
            let v = cache.qkv.slice(s![.., vs..vs + dh]);
            let d_o = d_heads.slice(s![.., qs..qs + dh]);
            let d_p = d_o.dot(&v.t());
            d_qkv.slice_mut(s![.., vs..vs + dh]).assign(&p.t().dot(&d_o));
            let d_s = softmax_rows_backward(p, &d_p) * scale;
            d_qkv.slice_mut(s![.., qs..qs + dh]).assign(&d_s.dot(&k));
            d_qkv.slice_mut(s![.., ks..ks + dh]).assign(&d_s.t().dot(&q));
        }
        let d_normed1 = linear_backward(
            cache.normed1.view(),
            &b.w_qkv,
            &d_qkv,
            bb.then_some((&mut grads.w_qkv, &mut grads.b_qkv)),
        );
        let d_x = layer_norm_backward(
            &cache.ln1,
            &b.ln1_gamma,
            &d_normed1,
            bb.then_some((&mut grads.ln1_gamma, &mut grads.ln1_beta)),
        );
        debug_assert_eq!(d_x.dim(), cache.input.dim());
        Ok(d_x + &d_x1)
    }

    fn encode_tokens(&self, tokens: Array2<f64>, split: TokenSplit) -> Result<(Array2<f64>, Vec<BlockCache>)> {
        let mut x = tokens;
        let mut caches = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            let (out, cache) = self.block_forward(l, &x, split)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    /// Runs every transformer block over the bundle's token stream.
    pub fn encode(&self, bundle: &TokenBundle) -> Result<TokenBundle> {
        let split = bundle.split();
        if split.n_prompts != self.config.prompt_count || !split.has_cls {
            return Err(Error::Shape("bundle layout does not match the model".into()));
        }
        let (out, _) = self.encode_tokens(bundle.to_tokens(), split)?;
        TokenBundle::from_tokens(&out, split, self.config.depth)
    }

    fn head(&self, tokens: &Array2<f64>, layout: &StreamLayout) -> Result<(Array2<f64>, LayerNormCache, Array2<f64>, Upsampler)> {
        let t = self.config.tokens_per_modality();
        let n_mod = layout.modalities.len();
        if layout.split.n_features != n_mod * t || n_mod == 0 {
            return Err(Error::Shape(format!(
                "{} feature tokens do not tile a {}-token grid",
                layout.split.n_features, t
            )));
        }
        let features = tokens.slice(s![layout.split.feature_range(), ..]);
        let (normed, norm) = layer_norm(features, &self.params.norm_gamma, &self.params.norm_beta);
        let mut pooled = Array2::zeros((t, self.config.d_model));
        for k in 0..n_mod {
            pooled += &normed.slice(s![k * t..(k + 1) * t, ..]);
        }
        pooled /= n_mod as f64;
        let logits = linear(pooled.view(), &self.params.decoder_w, &self.params.decoder_b);
        let up = Upsampler::new(self.config.grid(), self.config.image_size);
        Ok((up.forward(&logits), norm, pooled, up))
    }

    /// Per-pixel class scores `H x W x K` from an encoded bundle.
    pub fn decode(&self, bundle: &TokenBundle, layout: &StreamLayout) -> Result<Array3<f64>> {
        let (scores, ..) = self.head(&bundle.to_tokens(), layout)?;
        let (h, w) = self.config.image_size;
        Ok(scores
            .into_shape_with_order((h, w, self.config.num_classes))
            .expect("pixel-major scores"))
    }

    /// Pixel logits as `(H * W) x K` plus the cache for [`Model::backward`].
    pub fn forward(&self, sample: &MultiModalSample) -> Result<(Array2<f64>, ForwardCache)> {
        let (tokens, layout, patches) = self.embed(sample)?;
        let (encoded, blocks) = self.encode_tokens(tokens, layout.split)?;
        let (logits, norm, pooled, upsampler) = self.head(&encoded, &layout)?;
        Ok((
            logits,
            ForwardCache {
                layout,
                patches,
                blocks,
                norm,
                pooled,
                upsampler,
            },
        ))
    }

    pub fn predict(&self, sample: &MultiModalSample) -> Result<SegmentationMap> {
        let (logits, _) = self.forward(sample)?;
        let (h, w) = self.config.image_size;
        let scores = logits
            .into_shape_with_order((h, w, self.config.num_classes))
            .expect("pixel-major scores");
        Ok(argmax_classes(&scores))
    }

    /// Accumulates parameter gradients of a scalar loss whose gradient with
    /// respect to the pixel logits is `d_logits`. Only `groups` receive gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Array2<f64>,
        grads: &mut ModelParams,
        groups: TunableGroups,
    ) -> Result<()> {
        let t = self.config.tokens_per_modality();
        let layout = &cache.layout;
        let split = layout.split;
        let d_grid = cache.upsampler.backward(d_logits, t);
        let d_pooled = linear_backward(
            cache.pooled.view(),
            &self.params.decoder_w,
            &d_grid,
            groups
                .decoder
                .then_some((&mut grads.decoder_w, &mut grads.decoder_b)),
        );
        let need_tokens = groups.backbone || groups.prompts || groups.adapters;
        if !need_tokens {
            return Ok(());
        }
        let n_mod = layout.modalities.len();
        let share = &d_pooled / n_mod as f64;
        let mut d_normed = Array2::zeros((split.n_features, self.config.d_model));
        for k in 0..n_mod {
            d_normed.slice_mut(s![k * t..(k + 1) * t, ..]).assign(&share);
        }
        let d_features = layer_norm_backward(
            &cache.norm,
            &self.params.norm_gamma,
            &d_normed,
            groups
                .backbone
                .then_some((&mut grads.norm_gamma, &mut grads.norm_beta)),
        );
        let mut d_x = Array2::zeros((split.total(), self.config.d_model));
        d_x.slice_mut(s![split.feature_range(), ..]).assign(&d_features);
        for l in (0..self.config.depth).rev() {
            d_x = self.block_backward(l, &cache.blocks[l], split, &d_x, &mut grads.blocks[l], groups)?;
        }
        if groups.prompts {
            grads.prompts += &d_x.slice(s![split.prompt_range(), ..]);
        }
        if groups.backbone {
            grads.cls += &d_x.slice(s![split.total() - 1.., ..]);
            for (k, &m) in layout.modalities.iter().enumerate() {
                let rows = split.n_prompts + k * t..split.n_prompts + (k + 1) * t;
                let d_tok = d_x.slice(s![rows, ..]).to_owned();
                let g = &mut grads.embeds[m];
                let x = cache.patches[m].as_ref().expect("present modality has patches");
                g.w_patch += &x.t().dot(&d_tok);
                g.b_patch += &d_tok.sum_axis(Axis(0)).insert_axis(Axis(0));
                g.pos += &d_tok;
                g.modality += &d_tok.sum_axis(Axis(0)).insert_axis(Axis(0));
            }
        }
        Ok(())
    }
}

/// Mean pixel cross-entropy and its gradient with respect to `logits`.
pub fn pixel_cross_entropy(logits: &Array2<f64>, labels: &Array2<u8>) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} label pixels for {} logit rows",
            labels.len(),
            n
        )));
    }
    let k = logits.ncols();
    let mut probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (mut row, &y) in probs.rows_mut().into_iter().zip(labels.iter()) {
        let y = y as usize;
        if y >= k {
            return Err(Error::Shape(format!("label {y} outside {k} classes")));
        }
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
    }
    probs /= n as f64;
    Ok((loss / n as f64, probs))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::fpt::FftAxis;
    use crate::gradcheck::{analytic_gradients, compare_with_finite_differences};
    use crate::modality::{ModalityEntry, ModalityKind, SpatialLayout};

    pub(crate) fn tiny_config() -> BackboneConfig {
        BackboneConfig::micro()
    }

    pub(crate) fn tiny_sample(seed: u64, spec: &ModalitySpec, hw: (usize, usize)) -> (MultiModalSample, Array2<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = spec
            .entries()
            .iter()
            .map(|e| Array3::from_shape_fn((hw.0, hw.1, e.channels), |_| rng.random_range(0.0..1.0)))
            .collect();
        let labels = Array2::from_shape_fn(hw, |_| rng.random_range(0..3u8));
        (MultiModalSample::new(arrays), labels)
    }

    fn randomize(model: &mut Model, seed: u64) {
        crate::gradcheck::randomize_for_check(model, seed);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let spec = ModalitySpec::rgb_depth();
        for (seed, axis) in [(1, FftAxis::Channel), (2, FftAxis::Token), (3, FftAxis::Both)] {
            for variant in PromptSpace::ALL {
                let mut m = Model::new(tiny_config(), spec.clone(), SpectralMode::new(variant, axis), seed).unwrap();
                randomize(&mut m, seed);
                let (x, y) = tiny_sample(seed, &spec, (8, 8));
                let (_, g) = analytic_gradients(&m, &x, &y, TunableGroups::ALL).unwrap();
                let checks =
                    compare_with_finite_differences(&m, &x, &y, &g, &|_| true, 1e-6).unwrap();
                for c in checks {
                    assert!(c.relative_error < 1e-5, "{variant:?}/{axis:?} {}: {} {} {}", c.name, c.relative_error, c.analytic_max, c.numeric_max);
                }
            }
        }
    }

    #[test]
    fn frozen_groups_get_exact_zero_gradients() {
        let spec = ModalitySpec::rgb_depth();
        let mut m = Model::new(tiny_config(), spec.clone(), SpectralMode::default(), 4).unwrap();
        randomize(&mut m, 4);
        let (x, y) = tiny_sample(4, &spec, (8, 8));
        let groups = TuningMode::PlusFpt.groups();
        let (_, g) = analytic_gradients(&m, &x, &y, groups).unwrap();
        let mut nonzero_tunable = 0;
        g.visit(&mut |name, t| {
            if groups.contains(name) {
                nonzero_tunable += usize::from(t.iter().any(|&v| v != 0.0));
            } else {
                assert!(t.iter().all(|&v| v == 0.0), "{name} has gradient");
            }
        });
        assert!(nonzero_tunable > 0);
    }

    #[test]
    fn layout_matches_allocated_params() {
        for cfg in [tiny_config(), BackboneConfig::toy(), BackboneConfig::toy().without_prompts()] {
            let spec = ModalitySpec::quad();
            let m = Model::new(cfg.clone(), spec.clone(), SpectralMode::default(), 0).unwrap();
            assert_eq!(m.layout(), cfg.layout(&spec));
        }
    }

    #[test]
    fn token_counts() {
        let spec = ModalitySpec::rgb_depth();
        let m = Model::new(BackboneConfig::toy(), spec.clone(), SpectralMode::default(), 0).unwrap();
        let (x, _) = tiny_sample(0, &spec, (64, 64));
        let (bundle, layout) = m.patch_embed(&x).unwrap();
        assert_eq!(bundle.features.nrows(), 128);
        assert_eq!(bundle.prompts.nrows(), 8);
        assert_eq!(layout.modalities, vec![0, 1]);

        let mut dropped = x.clone();
        dropped.inputs[0].omitted = true;
        let (bundle, layout) = m.patch_embed(&dropped).unwrap();
        assert_eq!(bundle.features.nrows(), 64);
        assert_eq!(layout.modalities, vec![1]);
        let enc = m.encode(&bundle).unwrap();
        assert_eq!(enc.features.dim(), bundle.features.dim());
    }

    #[test]
    fn zero_filled_modality_embeds_to_bias_and_positions() {
        let spec = ModalitySpec::rgb_depth();
        let m = Model::new(tiny_config(), spec.clone(), SpectralMode::default(), 2).unwrap();
        let (mut x, _) = tiny_sample(0, &spec, (8, 8));
        x.inputs[1].data.fill(0.0);
        let (bundle, _) = m.patch_embed(&x).unwrap();
        let e = &m.params.embeds[1];
        let expect = &e.pos + &e.b_patch + &e.modality;
        let got = bundle.features.slice(s![4..8, ..]);
        assert!((&got - &expect).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let spec = ModalitySpec::rgb_depth();
        let m = Model::new(tiny_config(), spec.clone(), SpectralMode::default(), 0).unwrap();
        let (x, _) = tiny_sample(0, &spec, (10, 8));
        assert!(matches!(m.patch_embed(&x), Err(Error::Shape(_))));
        let mut cfg = tiny_config();
        cfg.image_size = (10, 8);
        assert!(Model::new(cfg, spec, SpectralMode::default(), 0).is_err());
    }

    #[test]
    fn zero_scale_adapters_reproduce_plain_backbone() {
        let spec = ModalitySpec::rgb_depth();
        let mut with = Model::new(tiny_config(), spec.clone(), SpectralMode::default(), 9).unwrap();
        randomize(&mut with, 9);
        for b in &mut with.params.blocks {
            b.adapter.as_mut().unwrap().scale = 0.0;
        }
        let mut plain_cfg = tiny_config();
        plain_cfg.adapters = false;
        let mut plain = with.clone();
        plain.config = plain_cfg;
        for b in &mut plain.params.blocks {
            b.adapter = None;
        }
        let (x, _) = tiny_sample(1, &spec, (8, 8));
        let (b0, _) = with.patch_embed(&x).unwrap();
        assert_eq!(with.encode(&b0).unwrap(), plain.encode(&b0).unwrap());
    }

    #[test]
    fn encode_is_equivariant_to_modality_order() {
        let spec = ModalitySpec::rgb_depth();
        let m = Model::new(tiny_config(), spec.clone(), SpectralMode::default(), 5).unwrap();
        let (x, _) = tiny_sample(2, &spec, (8, 8));
        let (bundle, _) = m.patch_embed(&x).unwrap();
        let mut swapped = bundle.clone();
        let f = &bundle.features;
        swapped.features = ndarray::concatenate(Axis(0), &[f.slice(s![4..8, ..]), f.slice(s![0..4, ..])]).unwrap();
        let a = m.encode(&bundle).unwrap();
        let b = m.encode(&swapped).unwrap();
        assert!((&a.prompts - &b.prompts).iter().all(|v| v.abs() < 1e-12));
        assert!((&a.features.slice(s![0..4, ..]) - &b.features.slice(s![4..8, ..])).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_class_and_ties() {
        let scores = Array3::<f64>::zeros((2, 3, 1));
        assert!(argmax_classes(&scores).classes.iter().all(|&c| c == 0));
        let flat = Array3::<f64>::from_elem((2, 2, 4), 0.3);
        assert!(argmax_classes(&flat).classes.iter().all(|&c| c == 0));
        let mut s2 = Array3::<f64>::zeros((1, 1, 3));
        s2[[0, 0, 1]] = 1.0;
        s2[[0, 0, 2]] = 1.0;
        assert_eq!(argmax_classes(&s2).classes[[0, 0]], 1);
    }

    #[test]
    fn upsampling_matches_hand_computation() {
        // 1x2 grid to 2x4 pixels: column centres at 0.25, 0.75, 1.25, 1.75
        // grid units minus 0.5 -> positions clamp(-0.25)=0, 0.25, 0.75, clamp(1.25)=1.
        let up = Upsampler::new((1, 2), (2, 4));
        let grid = ndarray::array![[0.0, 10.0], [4.0, -2.0]];
        let out = up.forward(&grid);
        let want_row = |a: f64, b: f64| [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
        let c0 = want_row(0.0, 4.0);
        let c1 = want_row(10.0, -2.0);
        for y in 0..2 {
            for x in 0..4 {
                assert!((out[[y * 4 + x, 0]] - c0[x]).abs() < 1e-12);
                assert!((out[[y * 4 + x, 1]] - c1[x]).abs() < 1e-12);
            }
        }
        let g = Array2::from_shape_fn((8, 2), |(i, j)| (i * 2 + j) as f64);
        let back = up.backward(&g, 2);
        let lhs = (&out * &g).sum();
        let rhs = (&back * &grid).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn two_class_decoder_oracle() {
        let mut cfg = tiny_config();
        cfg.num_classes = 2;
        let spec = ModalitySpec::new(vec![ModalityEntry::new("R", ModalityKind::Dense, 1, SpatialLayout::Grid)]).unwrap();
        let mut m = Model::new(cfg, spec.clone(), SpectralMode::default(), 1).unwrap();
        m.params.decoder_w.column_mut(0).fill(1.0);
        m.params.decoder_b[[0, 1]] = 0.2;
        let (x, _) = tiny_sample(3, &spec, (8, 8));
        let (bundle, layout) = m.patch_embed(&x).unwrap();
        let enc = m.encode(&bundle).unwrap();
        let scores = m.decode(&enc, &layout).unwrap();
        // Oracle: normalise each feature token, sum channels for class 0, 0.2 for class 1,
        // then interpolate on the 2x2 grid.
        let (normed, _) = layer_norm(enc.features.view(), &m.params.norm_gamma, &m.params.norm_beta);
        let cell: Vec<f64> = normed.rows().into_iter().map(|r| r.sum()).collect();
        let pos = |i: usize| (((i as f64 + 0.5) / 4.0) - 0.5).clamp(0.0, 1.0);
        for y in 0..8 {
            for x in 0..8 {
                let (fy, fx) = (pos(y), pos(x));
                let v = cell[0] * (1.0 - fy) * (1.0 - fx)
                    + cell[1] * (1.0 - fy) * fx
                    + cell[2] * fy * (1.0 - fx)
                    + cell[3] * fy * fx;
                assert!((scores[[y, x, 0]] - v).abs() < 1e-12);
                assert!((scores[[y, x, 1]] - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initial_loss_is_log_k() {
        let spec = ModalitySpec::rgb_depth();
        let m = Model::new(tiny_config(), spec.clone(), SpectralMode::default(), 0).unwrap();
        let (x, y) = tiny_sample(0, &spec, (8, 8));
        let (logits, _) = m.forward(&x).unwrap();
        let (loss, _) = pixel_cross_entropy(&logits, &y).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn partitions() {
        let layout = tiny_config().layout(&ModalitySpec::rgb_depth());
        let full = partition_parameters(&layout, TuningMode::Full);
        assert!(full.frozen.is_empty());
        assert_eq!(count_parameters(&full).tunable_fraction, 1.0);
        let dec = partition_parameters(&layout, TuningMode::DecoderOnly);
        assert_eq!(dec.tunable.keys().collect::<Vec<_>>(), ["decoder.b", "decoder.w"]);
        let fpt = partition_parameters(&layout, TuningMode::PlusFpt);
        for name in fpt.tunable.keys() {
            assert!(!fpt.frozen.contains_key(name));
        }
        assert_eq!(fpt.frozen.len() + fpt.tunable.len(), layout.shapes.len());
        assert!(fpt.is_tunable("fpt.block0.w_q"));
        assert!(!fpt.is_tunable("fpt.block1.w_q"));
        assert!("half".parse::<TuningMode>().is_err());
    }

    #[test]
    fn toy_counts_match_shape_sum() {
        // d=8, p=4, r=4, K=3, two dense modalities (3 and 1 channels), 4 tokens each.
        let embed = (48 * 8 + 8 + 4 * 8 + 8) + (16 * 8 + 8 + 4 * 8 + 8);
        let block = 2 * 8 + (8 * 24 + 24) + (64 + 8) + 2 * 8 + (8 * 16 + 16) + (16 * 8 + 8);
        let adapter = 8 * 4 + 4 * 8 + 1;
        let fpt = 2 * 16;
        let prompts = 2 * 8;
        let rest = 8 + 16 + (8 * 3 + 3);
        let layout = tiny_config().layout(&ModalitySpec::rgb_depth());
        assert_eq!(layout.total(), embed + 2 * block + 2 * adapter + fpt + prompts + rest);
        let c = count_parameters(&partition_parameters(&layout, TuningMode::PlusFpt));
        assert_eq!(c.tunable_count, 2 * adapter + fpt + prompts + 27);
    }
}
