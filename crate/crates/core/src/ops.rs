//! Dense kernels with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
pub const LN_EPS: f64 = 1e-6;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// `grad * gelu'(pre)` elementwise.
pub fn gelu_backward(pre: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    Zip::from(&mut out).and(pre).for_each(|g, &x| *g *= gelu_grad(x));
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of a row softmax given its output `probs`.
pub fn softmax_rows_backward(probs: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut o, p), g) in out.rows_mut().into_iter().zip(probs.rows()).zip(grad.rows()) {
        let dot = p.dot(&g);
        Zip::from(&mut o)
            .and(&p)
            .and(&g)
            .for_each(|o, &p, &g| *o = p * (g - dot));
    }
    out
}

/// Cached statistics for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-row layer norm with affine `gamma`, `beta` (both `1 x d`).
pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let out = &normalized * gamma + beta;
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `dx` and accumulates parameter gradients when requested.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array2<f64>,
    grad: &Array2<f64>,
    param_grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = param_grads {
        *dg += &(grad * &cache.normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
        *db += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let d = grad.ncols() as f64;
    let dn = grad * gamma;
    let mut dx = Array2::zeros(grad.raw_dim());
    for (((mut out, dn), n), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dn.rows())
        .zip(cache.normalized.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_dn = dn.sum() / d;
        let mean_dn_n = dn.dot(&n) / d;
        Zip::from(&mut out)
            .and(&dn)
            .and(&n)
            .for_each(|o, &g, &nv| *o = s * (g - mean_dn - nv * mean_dn_n));
    }
    dx
}

/// `x @ w + b` with `b` broadcast from `1 x out`.
pub fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Accumulates `dW += x^T g`, `db += sum_rows(g)` and returns `g W^T`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    grad: &Array2<f64>,
    param_grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) -> Array2<f64> {
    if let Some((dw, db)) = param_grads {
        *dw += &x.t().dot(grad);
        *db += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    grad.dot(&w.t())
}

pub fn all_finite(x: &Array2<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}
