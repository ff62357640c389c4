//! Fourier prompt tuning.
//!
//! Prompt tokens are mapped to the real part of their discrete Fourier
//! spectrum, then rectified by cross-attention against the feature tokens:
//!
//! ```text
//! Q = P, K = V = Z
//! Qf = Re(FFT(Q))
//! P' = softmax((Qf Wq)(K Wk)^T / sqrt(r)) V
//! ```
//!
//! `P'` replaces the prompt slice; features and the class token pass through
//! untouched. The module lives inside an adapter bottleneck of width `r`.
//! Blocks past the learnable ones run the same attention with identity
//! channel mixers, which has no parameters.
//!
//! `Re(FFT(.))` along any axis is a real symmetric linear map, so its
//! backward pass is the same transform applied to the upstream gradient.

use std::cell::RefCell;

use ndarray::{s, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, gelu_backward, gelu_forward, softmax_rows, softmax_rows_backward};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let plan = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

/// Real part of the forward DFT, `Re(sum_n x_n exp(-2 pi i n k / N))`.
pub fn real_fft(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Shape("real_fft of an empty vector".into()));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    Ok(buf.into_iter().map(|c| c.re).collect())
}

/// Full complex FFT followed by the normalized inverse; returns the real part.
/// Verification helper only, never used on the forward path.
pub fn inverse_fft_roundtrip(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    fft_in_place(&mut buf, true);
    let n = x.len() as f64;
    buf.into_iter().map(|c| c.re / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FftAxis {
    /// Along each token's channels.
    #[default]
    Channel,
    /// Along the prompt-token axis, per channel.
    Token,
    /// Two-dimensional transform over tokens and channels.
    Both,
}

/// Prompt-space ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSpace {
    /// Spectral prompts rectified by spatial feature tokens.
    #[default]
    SpectrumSpatial,
    /// Both prompts and keys moved to the spectral domain.
    SpectrumOnly,
    /// No transform: plain cross-attention prompt update.
    SpatialOnly,
}

impl PromptSpace {
    pub const ALL: [PromptSpace; 3] = [
        PromptSpace::SpectrumSpatial,
        PromptSpace::SpectrumOnly,
        PromptSpace::SpatialOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PromptSpace::SpectrumSpatial => "spectrum+spatial",
            PromptSpace::SpectrumOnly => "spectrum",
            PromptSpace::SpatialOnly => "spatial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralMode {
    #[serde(default)]
    pub variant: PromptSpace,
    #[serde(default)]
    pub fft_axis: FftAxis,
}

impl SpectralMode {
    pub fn new(variant: PromptSpace, fft_axis: FftAxis) -> Self {
        Self { variant, fft_axis }
    }

    fn transforms_queries(self) -> bool {
        self.variant != PromptSpace::SpatialOnly
    }

    fn transforms_keys(self) -> bool {
        self.variant == PromptSpace::SpectrumOnly
    }
}

/// `Re(FFT(x))` of a token matrix along `axis`. Self-adjoint.
pub fn real_spectrum(x: ArrayView2<f64>, axis: FftAxis) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let transform_rows = |buf: &mut Vec<Complex64>| {
        for row in buf.chunks_mut(cols) {
            fft_in_place(row, false);
        }
    };
    let transform_cols = |buf: &mut Vec<Complex64>| {
        let mut col = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                col[r] = buf[r * cols + c];
            }
            fft_in_place(&mut col, false);
            for r in 0..rows {
                buf[r * cols + c] = col[r];
            }
        }
    };
    match axis {
        FftAxis::Channel => transform_rows(&mut buf),
        FftAxis::Token => transform_cols(&mut buf),
        FftAxis::Both => {
            transform_rows(&mut buf);
            transform_cols(&mut buf);
        }
    }
    Array2::from_shape_vec((rows, cols), buf.into_iter().map(|c| c.re).collect())
        .expect("shape preserved")
}

/// Layer token stream split into prompts, features and an optional class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    pub prompts: Array2<f64>,
    pub features: Array2<f64>,
    pub cls: Option<Array2<f64>>,
    pub layer_index: usize,
}

impl TokenBundle {
    pub fn new(
        prompts: Array2<f64>,
        features: Array2<f64>,
        cls: Option<Array2<f64>>,
        layer_index: usize,
    ) -> Result<Self> {
        let b = Self {
            prompts,
            features,
            cls,
            layer_index,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn split(&self) -> TokenSplit {
        TokenSplit {
            n_prompts: self.prompts.nrows(),
            n_features: self.features.nrows(),
            has_cls: self.cls.is_some(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.features.ncols();
        if self.prompts.ncols() != d || self.cls.as_ref().is_some_and(|c| c.dim() != (1, d)) {
            return Err(Error::Shape(format!(
                "bundle parts disagree on width (features have {d})"
            )));
        }
        Ok(())
    }

    /// Concatenates `[prompts, features, cls]`.
    pub fn to_tokens(&self) -> Array2<f64> {
        let mut parts = vec![self.prompts.view(), self.features.view()];
        if let Some(c) = &self.cls {
            parts.push(c.view());
        }
        ndarray::concatenate(Axis(0), &parts).expect("widths validated")
    }

    pub fn from_tokens(tokens: &Array2<f64>, split: TokenSplit, layer_index: usize) -> Result<Self> {
        if tokens.nrows() != split.total() {
            return Err(Error::Shape(format!(
                "{} tokens do not match split of {}",
                tokens.nrows(),
                split.total()
            )));
        }
        Ok(Self {
            prompts: tokens.slice(s![split.prompt_range(), ..]).to_owned(),
            features: tokens.slice(s![split.feature_range(), ..]).to_owned(),
            cls: split
                .has_cls
                .then(|| tokens.slice(s![split.total() - 1.., ..]).to_owned()),
            layer_index,
        })
    }
}

/// Row layout of a token stream: prompts, then features, then the class token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSplit {
    pub n_prompts: usize,
    pub n_features: usize,
    pub has_cls: bool,
}

impl TokenSplit {
    pub fn total(&self) -> usize {
        self.n_prompts + self.n_features + usize::from(self.has_cls)
    }

    pub fn prompt_range(&self) -> std::ops::Range<usize> {
        0..self.n_prompts
    }

    pub fn feature_range(&self) -> std::ops::Range<usize> {
        self.n_prompts..self.n_prompts + self.n_features
    }
}

/// Learnable channel mixers for queries and keys, both `r x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierPromptParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
}

impl FourierPromptParams {
    pub fn identity(r: usize) -> Self {
        Self {
            w_q: Array2::eye(r),
            w_k: Array2::eye(r),
        }
    }

    pub fn zeros(r: usize) -> Self {
        Self {
            w_q: Array2::zeros((r, r)),
            w_k: Array2::zeros((r, r)),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.nrows()
    }

    fn validate(&self, width: usize) -> Result<()> {
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k)] {
            if w.dim() != (width, width) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, tokens have width {width}",
                    w.dim()
                )));
            }
            if !ops::all_finite(w) {
                return Err(Error::Numeric(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PromptAttentionCache {
    q_spec: Array2<f64>,
    k_spec: Array2<f64>,
    q_mixed: Array2<f64>,
    k_mixed: Array2<f64>,
    pub attention: Array2<f64>,
}

/// Cross-attention of prompts against features at width `r`.
pub fn prompt_attention(
    prompts: ArrayView2<f64>,
    features: ArrayView2<f64>,
    params: &FourierPromptParams,
    mode: SpectralMode,
) -> Result<(Array2<f64>, PromptAttentionCache)> {
    let width = features.ncols();
    if prompts.ncols() != width {
        return Err(Error::Shape(format!(
            "prompts have width {}, features {width}",
            prompts.ncols()
        )));
    }
    if prompts.nrows() == 0 || features.nrows() == 0 {
        return Err(Error::Shape("prompt attention needs N_q >= 1 and N_kv >= 1".into()));
    }
    params.validate(width)?;
    if !prompts.iter().chain(features.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite prompt or feature tokens".into()));
    }
    let q_spec = if mode.transforms_queries() {
        real_spectrum(prompts, mode.fft_axis)
    } else {
        prompts.to_owned()
    };
    let k_spec = if mode.transforms_keys() {
        real_spectrum(features, mode.fft_axis)
    } else {
        features.to_owned()
    };
    let q_mixed = q_spec.dot(&params.w_q);
    let k_mixed = k_spec.dot(&params.w_k);
    let scale = 1.0 / (width as f64).sqrt();
    let scores = q_mixed.dot(&k_mixed.t()) * scale;
    let attention = softmax_rows(&scores);
    let out = attention.dot(&features);
    Ok((
        out,
        PromptAttentionCache {
            q_spec,
            k_spec,
            q_mixed,
            k_mixed,
            attention,
        },
    ))
}

/// Gradients of a prompt attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptAttentionGrads {
    pub prompts: Array2<f64>,
    pub features: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
}

pub fn prompt_attention_backward(
    cache: &PromptAttentionCache,
    features: ArrayView2<f64>,
    params: &FourierPromptParams,
    mode: SpectralMode,
    upstream: &Array2<f64>,
) -> Result<PromptAttentionGrads> {
    if upstream.dim() != (cache.attention.nrows(), features.ncols()) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match prompts {:?}",
            upstream.dim(),
            cache.q_spec.dim()
        )));
    }
    let scale = 1.0 / (features.ncols() as f64).sqrt();
    let d_attention = upstream.dot(&features.t());
    let mut d_features = cache.attention.t().dot(upstream);
    let d_scores = softmax_rows_backward(&cache.attention, &d_attention) * scale;
    let d_q_mixed = d_scores.dot(&cache.k_mixed);
    let d_k_mixed = d_scores.t().dot(&cache.q_mixed);
    let w_q = cache.q_spec.t().dot(&d_q_mixed);
    let w_k = cache.k_spec.t().dot(&d_k_mixed);
    let d_q_spec = d_q_mixed.dot(&params.w_q.t());
    let d_k_spec = d_k_mixed.dot(&params.w_k.t());
    let prompts = if mode.transforms_queries() {
        real_spectrum(d_q_spec.view(), mode.fft_axis)
    } else {
        d_q_spec
    };
    if mode.transforms_keys() {
        d_features += &real_spectrum(d_k_spec.view(), mode.fft_axis);
    } else {
        d_features += &d_k_spec;
    }
    Ok(PromptAttentionGrads {
        prompts,
        features: d_features,
        w_q,
        w_k,
    })
}

/// Replaces the prompt slice of `bundle` with its Fourier prompt; features and
/// class token are returned unchanged.
pub fn fourier_prompt_forward(
    bundle: &TokenBundle,
    params: &FourierPromptParams,
    mode: SpectralMode,
) -> Result<TokenBundle> {
    bundle.validate()?;
    let (prompts, _) = prompt_attention(bundle.prompts.view(), bundle.features.view(), params, mode)?;
    Ok(TokenBundle {
        prompts,
        features: bundle.features.clone(),
        cls: bundle.cls.clone(),
        layer_index: bundle.layer_index,
    })
}

/// Gradients of `<upstream, fourier_prompt_forward(bundle).prompts>` with
/// respect to the input prompts, features and both channel mixers.
pub fn fourier_prompt_backward(
    bundle: &TokenBundle,
    params: &FourierPromptParams,
    mode: SpectralMode,
    upstream: &Array2<f64>,
) -> Result<PromptAttentionGrads> {
    bundle.validate()?;
    let (_, cache) = prompt_attention(bundle.prompts.view(), bundle.features.view(), params, mode)?;
    prompt_attention_backward(&cache, bundle.features.view(), params, mode, upstream)
}

/// The learnable forward pass with identity mixers.
pub fn parameter_free_prompt_attention(bundle: &TokenBundle, mode: SpectralMode) -> Result<TokenBundle> {
    fourier_prompt_forward(bundle, &FourierPromptParams::identity(bundle.width()), mode)
}

/// Residual bottleneck adapter, optionally hosting a Fourier prompt module.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `d x r`.
    pub w_down: Array2<f64>,
    /// `r x d`.
    pub w_up: Array2<f64>,
    pub scale: f64,
    pub fpt: Option<FourierPromptParams>,
}

impl AdapterParams {
    pub fn zeros(d: usize, r: usize, with_fpt: bool) -> Self {
        Self {
            w_down: Array2::zeros((d, r)),
            w_up: Array2::zeros((r, d)),
            scale: 0.0,
            fpt: with_fpt.then(|| FourierPromptParams::zeros(r)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w_down.nrows(), self.w_down.ncols(), self.fpt.is_some())
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.ncols()
    }
}

/// What the adapter does with the prompt rows of its bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMixer {
    /// Plain adapter.
    Off,
    /// Learnable Fourier prompt module (requires `AdapterParams::fpt`).
    Learnable,
    /// Identity-mixer attention, no parameters.
    ParameterFree,
}

#[derive(Debug, Clone)]
pub struct AdapterCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
    branch: Array2<f64>,
    prompt_input: Option<(Array2<f64>, PromptAttentionCache)>,
}

/// `tokens + scale * act(mix(tokens W_down)) W_up`, where `mix` swaps the
/// prompt rows of the bottleneck for their attention output.
pub fn adapter_forward(
    tokens: &Array2<f64>,
    params: &AdapterParams,
    split: TokenSplit,
    mixer: PromptMixer,
    mode: SpectralMode,
) -> Result<Array2<f64>> {
    adapter_forward_cached(tokens, params, split, mixer, mode).map(|(out, _)| out)
}

pub fn adapter_forward_cached(
    tokens: &Array2<f64>,
    params: &AdapterParams,
    split: TokenSplit,
    mixer: PromptMixer,
    mode: SpectralMode,
) -> Result<(Array2<f64>, AdapterCache)> {
    let (n, d) = tokens.dim();
    let r = params.bottleneck();
    if params.w_down.nrows() != d || params.w_up.dim() != (r, d) {
        return Err(Error::Shape(format!(
            "adapter {:?}/{:?} does not fit tokens of width {d}",
            params.w_down.dim(),
            params.w_up.dim()
        )));
    }
    if split.total() != n {
        return Err(Error::Shape(format!(
            "split covers {} tokens, stream has {n}",
            split.total()
        )));
    }
    let mut pre_activation = tokens.dot(&params.w_down);
    let prompt_input = match mixer {
        PromptMixer::Off => None,
        PromptMixer::Learnable | PromptMixer::ParameterFree => {
            let identity;
            let fpt = match mixer {
                PromptMixer::Learnable => params.fpt.as_ref().ok_or_else(|| {
                    Error::Shape("learnable prompt mixer without Fourier prompt params".into())
                })?,
                _ => {
                    identity = FourierPromptParams::identity(r);
                    &identity
                }
            };
            let prompts = pre_activation.slice(s![split.prompt_range(), ..]).to_owned();
            let (mixed, cache) = prompt_attention(
                prompts.view(),
                pre_activation.slice(s![split.feature_range(), ..]),
                fpt,
                mode,
            )?;
            pre_activation
                .slice_mut(s![split.prompt_range(), ..])
                .assign(&mixed);
            Some((prompts, cache))
        }
    };
    let activation = gelu_forward(&pre_activation);
    let branch = activation.dot(&params.w_up);
    let out = tokens + &(&branch * params.scale);
    Ok((
        out,
        AdapterCache {
            input: tokens.clone(),
            pre_activation,
            activation,
            branch,
            prompt_input,
        },
    ))
}

/// Returns the gradient with respect to the adapter input. Parameter gradients
/// are accumulated into `grads` when given.
pub fn adapter_backward(
    cache: &AdapterCache,
    params: &AdapterParams,
    split: TokenSplit,
    mixer: PromptMixer,
    mode: SpectralMode,
    upstream: &Array2<f64>,
    grads: Option<&mut AdapterParams>,
) -> Result<Array2<f64>> {
    let d_activation = upstream.dot(&params.w_up.t()) * params.scale;
    let mut d_pre = gelu_backward(&cache.pre_activation, &d_activation);
    let mut fpt_grads = None;
    if let Some((_, attn_cache)) = &cache.prompt_input {
        let identity;
        let fpt = match mixer {
            PromptMixer::Learnable => params.fpt.as_ref().expect("checked in forward"),
            _ => {
                identity = FourierPromptParams::identity(params.bottleneck());
                &identity
            }
        };
        let d_mixed = d_pre.slice(s![split.prompt_range(), ..]).to_owned();
        // Feature rows of the bottleneck are never rewritten by the mixer.
        let features = cache.pre_activation.slice(s![split.feature_range(), ..]);
        let g = prompt_attention_backward(attn_cache, features, fpt, mode, &d_mixed)?;
        d_pre.slice_mut(s![split.prompt_range(), ..]).assign(&g.prompts);
        let mut feat = d_pre.slice_mut(s![split.feature_range(), ..]);
        feat += &g.features;
        fpt_grads = Some((g.w_q, g.w_k));
    }
    if let Some(grads) = grads {
        grads.w_up.scaled_add(params.scale, &cache.activation.t().dot(upstream));
        grads.scale += (&cache.branch * upstream).sum();
        grads.w_down += &cache.input.t().dot(&d_pre);
        if mixer == PromptMixer::Learnable {
            if let (Some(g), Some((dq, dk))) = (grads.fpt.as_mut(), fpt_grads) {
                g.w_q += &dq;
                g.w_k += &dk;
            }
        }
    }
    Ok(upstream + &d_pre.dot(&params.w_down.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft_re(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| v * (2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64).cos())
                    .sum()
            })
            .collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn impulse_and_constant() {
        assert_eq!(real_fft(&[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![1.0; 4]);
        let y = real_fft(&[2.5; 6]).unwrap();
        assert!((y[0] - 15.0).abs() < 1e-12);
        assert!(y[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(real_fft(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = real_fft(&x).unwrap();
        for (a, b) in fast.iter().zip(naive_dft_re(&x)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn roundtrip_examples() {
        let back = inverse_fft_roundtrip(&[1.0, 2.0, 3.0, 4.0]);
        for (a, b) in back.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(inverse_fft_roundtrip(&[0.0; 5]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectrum_axes_agree_with_vector_fft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 3, 5);
        let ch = real_spectrum(x.view(), FftAxis::Channel);
        for (row, out) in x.rows().into_iter().zip(ch.rows()) {
            let want = naive_dft_re(&row.to_vec());
            for (a, b) in out.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let tok = real_spectrum(x.view(), FftAxis::Token);
        let tok_t = real_spectrum(x.t().to_owned().view(), FftAxis::Channel);
        assert!((&tok - &tok_t.t()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_feature_token_copies_it() {
        let bundle = TokenBundle::new(
            array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]],
            array![[4.0, 5.0, 6.0]],
            Some(array![[9.0, 9.0, 9.0]]),
            0,
        )
        .unwrap();
        let params = FourierPromptParams {
            w_q: array![[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [3.0, 0.0, 1.0]],
            w_k: Array2::eye(3),
        };
        for variant in PromptSpace::ALL {
            let mode = SpectralMode::new(variant, FftAxis::Channel);
            let (_, cache) =
                prompt_attention(bundle.prompts.view(), bundle.features.view(), &params, mode).unwrap();
            assert!(cache.attention.iter().all(|&a| a == 1.0));
            let out = fourier_prompt_forward(&bundle, &params, mode).unwrap();
            for row in out.prompts.rows() {
                assert_eq!(row, bundle.features.row(0));
            }
            assert_eq!(out.cls, bundle.cls);
        }
    }

    #[test]
    fn width_mismatch_and_non_finite() {
        let b = TokenBundle {
            prompts: Array2::zeros((1, 3)),
            features: Array2::zeros((2, 4)),
            cls: None,
            layer_index: 0,
        };
        let p = FourierPromptParams::identity(4);
        assert!(matches!(
            fourier_prompt_forward(&b, &p, SpectralMode::default()),
            Err(Error::Shape(_))
        ));
        let mut b = TokenBundle::new(Array2::zeros((1, 4)), Array2::zeros((2, 4)), None, 0).unwrap();
        b.prompts[[0, 1]] = f64::NAN;
        assert!(matches!(
            fourier_prompt_forward(&b, &p, SpectralMode::default()),
            Err(Error::Numeric(_))
        ));
        let bad = FourierPromptParams::identity(3);
        b.prompts[[0, 1]] = 0.0;
        assert!(fourier_prompt_forward(&b, &bad, SpectralMode::default()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bundle =
            TokenBundle::new(random_matrix(&mut rng, 2, 4), random_matrix(&mut rng, 3, 4), None, 0).unwrap();
        let params = FourierPromptParams {
            w_q: random_matrix(&mut rng, 4, 4),
            w_k: random_matrix(&mut rng, 4, 4),
        };
        let g = fourier_prompt_backward(&bundle, &params, SpectralMode::default(), &Array2::zeros((2, 4)))
            .unwrap();
        assert!(g.w_q.iter().chain(g.w_k.iter()).all(|&v| v == 0.0));
        assert!(g.prompts.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_residual_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens = random_matrix(&mut rng, 4, 6);
        let split = TokenSplit {
            n_prompts: 1,
            n_features: 2,
            has_cls: true,
        };
        let mut params = AdapterParams {
            w_down: random_matrix(&mut rng, 6, 3),
            w_up: Array2::zeros((3, 6)),
            scale: 0.7,
            fpt: Some(FourierPromptParams {
                w_q: random_matrix(&mut rng, 3, 3),
                w_k: random_matrix(&mut rng, 3, 3),
            }),
        };
        let mode = SpectralMode::default();
        let out = adapter_forward(&tokens, &params, split, PromptMixer::Learnable, mode).unwrap();
        assert_eq!(out, tokens);
        params.w_up = random_matrix(&mut rng, 3, 6);
        params.scale = 0.0;
        let out = adapter_forward(&tokens, &params, split, PromptMixer::Learnable, mode).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn adapter_rejects_bad_split() {
        let params = AdapterParams::zeros(6, 3, false);
        let split = TokenSplit {
            n_prompts: 1,
            n_features: 1,
            has_cls: false,
        };
        let r = adapter_forward(&Array2::zeros((3, 6)), &params, split, PromptMixer::Off, SpectralMode::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn bundle_token_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_matrix(&mut rng, 6, 3);
        let split = TokenSplit {
            n_prompts: 2,
            n_features: 3,
            has_cls: true,
        };
        let b = TokenBundle::from_tokens(&t, split, 1).unwrap();
        assert_eq!(b.split(), split);
        assert_eq!(b.to_tokens(), t);
    }
}
