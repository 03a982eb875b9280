//! Forward and backward passes of the building blocks: layer norm, linear
//! maps, multi-head attention and the pre-norm attention + feed-forward layer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::LayerParams;

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let k = *inv;
        row.mapv_inplace(|v| v * k);
    }
    let out = &xhat * g + b;
    (out, LnCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dg`, `db`.
pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    g: &Array1<f64>,
    dy: &Array2<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dh), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        for ((o, &a), &b) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
            *o = inv * (a - mean_dh - b * mean_dh_xh);
        }
    }
    dx
}

pub(crate) fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Returns `dx`; accumulates into `dw`, `db`.
pub(crate) fn linear_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Backward of a row softmax given its output `p` and upstream `dp`.
pub(crate) fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&prow, |v, &pv| *v -= pv * dot);
    }
    ds
}

#[derive(Debug, Clone)]
pub(crate) struct MhaCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, `r x s`.
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MhaCache {
    pub(crate) fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }
}

/// Multi-head attention of `xq` rows over `xkv` rows, including the output projection.
pub(crate) fn mha_forward(p: &LayerParams, heads: usize, xq: &Array2<f64>, xkv: &Array2<f64>) -> (Array2<f64>, MhaCache) {
    let q = linear(&xq.view(), &p.wq, &p.bq);
    let k = linear(&xkv.view(), &p.wk, &p.bk);
    let v = linear(&xkv.view(), &p.wv, &p.bv);
    let dim = q.ncols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::zeros((xq.nrows(), dim));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut a);
        concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        weights.push(a);
    }
    let out = linear(&concat.view(), &p.wo, &p.bo);
    (out, MhaCache { q, k, v, weights, concat })
}

/// Returns `(d_xq, d_xkv)`; accumulates projection gradients into `g`.
pub(crate) fn mha_backward(
    p: &LayerParams,
    cache: &MhaCache,
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    d_out: &Array2<f64>,
    g: &mut LayerParams,
) -> (Array2<f64>, Array2<f64>) {
    let heads = cache.weights.len();
    let dim = cache.q.ncols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_concat = linear_backward(&cache.concat.view(), &p.wo, d_out, &mut g.wo, &mut g.bo);

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, a) in cache.weights.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_concat.slice(cols);
        let da = d_oh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&d_oh));
        let ds = softmax_rows_backward(a, &da) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let d_xq = linear_backward(&xq.view(), &p.wq, &dq, &mut g.wq, &mut g.bq);
    let d_xkv = linear_backward(&xkv.view(), &p.wk, &dk, &mut g.wk, &mut g.bk)
        + linear_backward(&xkv.view(), &p.wv, &dv, &mut g.wv, &mut g.bv);
    (d_xq, d_xkv)
}

/// Activations of one layer application, enough to replay its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    ln_x: LnCache,
    xn: Array2<f64>,
    /// Present for cross attention: normalized source rows and their cache.
    source: Option<(LnCache, Array2<f64>)>,
    mha: MhaCache,
    ln2: LnCache,
    x1n: Array2<f64>,
    hidden_pre: Array2<f64>,
}

impl LayerCache {
    pub(crate) fn attention_weights(&self) -> &[Array2<f64>] {
        self.mha.weights()
    }
}

/// `x + Attn(LN1(x), LN1(src))` followed by `+ FFN(LN2(.))`; `src = x` when `None`.
pub(crate) fn layer_forward(
    p: &LayerParams,
    heads: usize,
    x: &Array2<f64>,
    source: Option<&Array2<f64>>,
) -> (Array2<f64>, LayerCache) {
    let (xn, ln_x) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let source = source.map(|y| {
        let (yn, ln_y) = layer_norm(y, &p.ln1_g, &p.ln1_b);
        (ln_y, yn)
    });
    let kv = source.as_ref().map_or(&xn, |(_, yn)| yn);
    let (z, mha) = mha_forward(p, heads, &xn, kv);
    let x1 = x + &z;
    let (x1n, ln2) = layer_norm(&x1, &p.ln2_g, &p.ln2_b);
    let hidden_pre = linear(&x1n.view(), &p.w1, &p.b1);
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let out = x1 + linear(&hidden.view(), &p.w2, &p.b2);
    (
        out,
        LayerCache {
            ln_x,
            xn,
            source,
            mha,
            ln2,
            x1n,
            hidden_pre,
        },
    )
}

/// Returns `(dx, d_source)`; `d_source` is `None` for self attention.
pub(crate) fn layer_backward(
    p: &LayerParams,
    cache: &LayerCache,
    d_out: &Array2<f64>,
    g: &mut LayerParams,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let hidden = cache.hidden_pre.mapv(|v| v.max(0.0));
    let mut d_hidden = linear_backward(&hidden.view(), &p.w2, d_out, &mut g.w2, &mut g.b2);
    d_hidden.zip_mut_with(&cache.hidden_pre, |d, &pre| {
        if pre <= 0.0 {
            *d = 0.0;
        }
    });
    let d_x1n = linear_backward(&cache.x1n.view(), &p.w1, &d_hidden, &mut g.w1, &mut g.b1);
    let d_x1 = d_out + &layer_norm_backward(&cache.ln2, &p.ln2_g, &d_x1n, &mut g.ln2_g, &mut g.ln2_b);

    match &cache.source {
        None => {
            let (d_q, d_kv) = mha_backward(p, &cache.mha, &cache.xn, &cache.xn, &d_x1, g);
            let d_xn = d_q + d_kv;
            let dx = &d_x1 + &layer_norm_backward(&cache.ln_x, &p.ln1_g, &d_xn, &mut g.ln1_g, &mut g.ln1_b);
            (dx, None)
        }
        Some((ln_y, yn)) => {
            let (d_q, d_kv) = mha_backward(p, &cache.mha, &cache.xn, yn, &d_x1, g);
            let dx = &d_x1 + &layer_norm_backward(&cache.ln_x, &p.ln1_g, &d_q, &mut g.ln1_g, &mut g.ln1_b);
            let dy = layer_norm_backward(ln_y, &p.ln1_g, &d_kv, &mut g.ln1_g, &mut g.ln1_b);
            (dx, Some(dy))
        }
    }
}

/// Row-wise L2 normalization; also returns the row norms.
pub(crate) fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let out = x / &norms.view().insert_axis(Axis(1));
    (out, norms)
}

pub(crate) fn l2_normalize_rows_backward(out: &Array2<f64>, norms: &Array1<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    let mut dx = d_out.clone();
    for ((mut row, o), &n) in dx.rows_mut().into_iter().zip(out.rows()).zip(norms.iter()) {
        let dot = row.dot(&o);
        row.zip_mut_with(&o, |d, &ov| *d = (*d - ov * dot) / n);
    }
    dx
}
