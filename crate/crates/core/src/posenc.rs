//! Geometric positional encoding of area centers.
//!
//! Each area is summarised by the mean, over every other area in the same
//! image, of `[d, sin θ, cos θ]` where `d` is the center distance and `θ` the
//! direction from the other center to this one. A small ReLU MLP lifts the
//! 3-vector to descriptor width and the result is added to the area features.

use ndarray::{Array1, Array2, Axis};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::AreaSet;

pub const GEOMETRY_DIM: usize = 3;

/// Per-area mean relative geometry, one `[d, sin θ, cos θ]` row per area.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryFeatures(Array2<f64>);

impl GeometryFeatures {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Mean relative geometry per area.
///
/// With `normalize` set, distances are divided by the image diagonal so they
/// fall in `[0, 1]`. A lone area gets the zero vector; coincident centers
/// contribute `θ = atan2(0, 0) = 0`.
pub fn pairwise_geometry(set: &AreaSet, normalize: bool) -> GeometryFeatures {
    let centers: Vec<(f64, f64)> = set.areas().iter().map(|a| a.center()).collect();
    let scale = if normalize { set.diagonal() } else { 1.0 };
    geometry_from_centers(&centers, scale)
}

/// Same as [`pairwise_geometry`] on raw centers, dividing distances by `scale`.
pub fn geometry_from_centers(centers: &[(f64, f64)], scale: f64) -> GeometryFeatures {
    let m = centers.len();
    let mut out = Array2::zeros((m, GEOMETRY_DIM));
    if m < 2 {
        return GeometryFeatures(out);
    }
    let denom = (m - 1) as f64;
    for (i, &(xi, yi)) in centers.iter().enumerate() {
        let (mut d, mut s, mut c) = (0.0, 0.0, 0.0);
        for (l, &(xl, yl)) in centers.iter().enumerate() {
            if l == i {
                continue;
            }
            let (dx, dy) = (xi - xl, yi - yl);
            let theta = dy.atan2(dx);
            d += dx.hypot(dy) / scale;
            s += theta.sin();
            c += theta.cos();
        }
        out[[i, 0]] = d / denom;
        out[[i, 1]] = s / denom;
        out[[i, 2]] = c / denom;
    }
    GeometryFeatures(out)
}

/// Two-layer MLP `3 -> hidden -> dim` with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct PeMlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl PeMlpParams {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            w1: Array2::zeros((GEOMETRY_DIM, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, dim)),
            b2: Array1::zeros(dim),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn dim(&self) -> usize {
        self.b2.len()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        let d = self.dim();
        if self.w1.dim() != (GEOMETRY_DIM, h) {
            return Err(shape_mismatch("pe w1", &[GEOMETRY_DIM, h], self.w1.shape()));
        }
        if self.w2.dim() != (h, d) {
            return Err(shape_mismatch("pe w2", &[h, d], self.w2.shape()));
        }
        Ok(())
    }
}

/// Hidden pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PeCache {
    hidden_pre: Array2<f64>,
}

pub fn positional_embed(geom: &GeometryFeatures, params: &PeMlpParams) -> Result<Array2<f64>> {
    Ok(positional_embed_cached(geom, params)?.0)
}

pub(crate) fn positional_embed_cached(
    geom: &GeometryFeatures,
    params: &PeMlpParams,
) -> Result<(Array2<f64>, PeCache)> {
    params.check()?;
    if geom.0.ncols() != GEOMETRY_DIM {
        return Err(shape_mismatch("geometry features", &[geom.len(), GEOMETRY_DIM], geom.0.shape()));
    }
    let hidden_pre = geom.0.dot(&params.w1) + &params.b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let out = hidden.dot(&params.w2) + &params.b2;
    Ok((out, PeCache { hidden_pre }))
}

/// Accumulates parameter gradients of the embedding into `grads`.
pub(crate) fn positional_embed_backward(
    geom: &GeometryFeatures,
    params: &PeMlpParams,
    cache: &PeCache,
    d_out: &Array2<f64>,
    grads: &mut PeMlpParams,
) {
    let hidden = cache.hidden_pre.mapv(|v| v.max(0.0));
    grads.w2 += &hidden.t().dot(d_out);
    grads.b2 += &d_out.sum_axis(Axis(0));
    let mut d_hidden = d_out.dot(&params.w2.t());
    d_hidden.zip_mut_with(&cache.hidden_pre, |g, &pre| {
        if pre <= 0.0 {
            *g = 0.0;
        }
    });
    grads.w1 += &geom.0.t().dot(&d_hidden);
    grads.b1 += &d_hidden.sum_axis(Axis(0));
}

/// `features + pe`, elementwise.
pub fn add_pe(features: &Array2<f64>, pe: &Array2<f64>) -> Result<Array2<f64>> {
    if features.dim() != pe.dim() {
        return Err(shape_mismatch("add_pe", features.shape(), pe.shape()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("area features".into()));
    }
    Ok(features + pe)
}
