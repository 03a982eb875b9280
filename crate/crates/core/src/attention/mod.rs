//! Attention descriptor network.
//!
//! `blocks` repetitions of: self attention within A and within B, then cross
//! attention A←B and B←A computed from the same pre-cross states. Every layer
//! is a pre-norm residual attention sublayer followed by a pre-norm residual
//! ReLU feed-forward sublayer. One parameter set is shared by both images.
//! Output rows are optionally L2-normalized.

mod layers;
mod params;

use ndarray::{Array2, Axis};

pub use params::{init_params, BlockParams, LayerParams, NetworkConfig, NetworkParams};

use crate::error::{shape_mismatch, Error, Result};
use layers::{l2_normalize_rows, l2_normalize_rows_backward, layer_backward, layer_forward, LayerCache};

/// Per-area feature vectors, one row per area.
pub type FeatureMatrix = Array2<f64>;
/// Output descriptors, one row per area.
pub type DescriptorMatrix = Array2<f64>;

#[derive(Debug, Clone)]
struct BlockCache {
    self_a: LayerCache,
    self_b: LayerCache,
    cross_a: LayerCache,
    cross_b: LayerCache,
}

/// Everything [`backward`] needs from a forward call.
#[derive(Debug, Clone)]
pub struct GradientTape {
    fingerprint: u64,
    input_a: FeatureMatrix,
    input_b: FeatureMatrix,
    blocks: Vec<BlockCache>,
    /// Pre-normalization outputs and their row norms, when normalizing.
    final_norm: Option<[(Array2<f64>, ndarray::Array1<f64>); 2]>,
    output_a: DescriptorMatrix,
    output_b: DescriptorMatrix,
}

impl GradientTape {
    pub fn inputs(&self) -> (&FeatureMatrix, &FeatureMatrix) {
        (&self.input_a, &self.input_b)
    }

    pub fn outputs(&self) -> (&DescriptorMatrix, &DescriptorMatrix) {
        (&self.output_a, &self.output_b)
    }

    /// Attention weights of every head for block `block`, in the order
    /// self A, self B, cross A←B, cross B←A.
    pub fn attention_weights(&self, block: usize) -> [&[Array2<f64>]; 4] {
        let b = &self.blocks[block];
        [
            b.self_a.attention_weights(),
            b.self_b.attention_weights(),
            b.cross_a.attention_weights(),
            b.cross_b.attention_weights(),
        ]
    }
}

fn check_input(name: &'static str, x: &FeatureMatrix, dim: usize) -> Result<()> {
    if x.ncols() != dim {
        return Err(shape_mismatch(name, &[x.nrows(), dim], x.shape()));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidConfig(format!("{name} has no areas")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

/// Runs the descriptor network on position-encoded features of both images.
pub fn forward(
    fa: &FeatureMatrix,
    fb: &FeatureMatrix,
    params: &NetworkParams,
) -> Result<(DescriptorMatrix, DescriptorMatrix, GradientTape)> {
    let cfg = &params.config;
    check_input("features A", fa, cfg.dim)?;
    check_input("features B", fb, cfg.dim)?;

    let mut xa = fa.clone();
    let mut xb = fb.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (sa, self_a) = layer_forward(&block.self_attn, cfg.heads, &xa, None);
        let (sb, self_b) = layer_forward(&block.self_attn, cfg.heads, &xb, None);
        let (ca, cross_a) = layer_forward(&block.cross_attn, cfg.heads, &sa, Some(&sb));
        let (cb, cross_b) = layer_forward(&block.cross_attn, cfg.heads, &sb, Some(&sa));
        xa = ca;
        xb = cb;
        caches.push(BlockCache {
            self_a,
            self_b,
            cross_a,
            cross_b,
        });
    }

    let (out_a, out_b, final_norm) = if cfg.l2_normalize {
        let (na, norms_a) = l2_normalize_rows(&xa);
        let (nb, norms_b) = l2_normalize_rows(&xb);
        (na.clone(), nb.clone(), Some([(na, norms_a), (nb, norms_b)]))
    } else {
        (xa, xb, None)
    };
    if out_a.iter().chain(out_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("descriptor output".into()));
    }

    let tape = GradientTape {
        fingerprint: params.fingerprint(),
        input_a: fa.clone(),
        input_b: fb.clone(),
        blocks: caches,
        final_norm,
        output_a: out_a.clone(),
        output_b: out_b.clone(),
    };
    Ok((out_a, out_b, tape))
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct NetworkGradients {
    pub params: NetworkParams,
    pub input_a: FeatureMatrix,
    pub input_b: FeatureMatrix,
}

/// Exact gradients of `<d_out_a, D_A> + <d_out_b, D_B>` w.r.t. parameters and inputs.
///
/// The PE parameters in the result are left at zero; the positional embedding
/// sits outside this network and is differentiated by the caller.
pub fn backward(
    tape: &GradientTape,
    params: &NetworkParams,
    d_out_a: &DescriptorMatrix,
    d_out_b: &DescriptorMatrix,
) -> Result<NetworkGradients> {
    if tape.fingerprint != params.fingerprint() || tape.blocks.len() != params.blocks.len() {
        return Err(Error::StaleTape);
    }
    if d_out_a.dim() != tape.output_a.dim() {
        return Err(shape_mismatch("upstream gradient A", tape.output_a.shape(), d_out_a.shape()));
    }
    if d_out_b.dim() != tape.output_b.dim() {
        return Err(shape_mismatch("upstream gradient B", tape.output_b.shape(), d_out_b.shape()));
    }

    let (mut da, mut db) = match &tape.final_norm {
        Some([(na, norms_a), (nb, norms_b)]) => (
            l2_normalize_rows_backward(na, norms_a, d_out_a),
            l2_normalize_rows_backward(nb, norms_b, d_out_b),
        ),
        None => (d_out_a.clone(), d_out_b.clone()),
    };

    let mut grads = params.zeros_like();
    for ((block, cache), g) in params
        .blocks
        .iter()
        .zip(&tape.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        let (d_sa, d_sb_from_a) = layer_backward(&block.cross_attn, &cache.cross_a, &da, &mut g.cross_attn);
        let (d_sb, d_sa_from_b) = layer_backward(&block.cross_attn, &cache.cross_b, &db, &mut g.cross_attn);
        let d_sa = d_sa + d_sa_from_b.expect("cross layer has a source");
        let d_sb = d_sb + d_sb_from_a.expect("cross layer has a source");
        da = layer_backward(&block.self_attn, &cache.self_a, &d_sa, &mut g.self_attn).0;
        db = layer_backward(&block.self_attn, &cache.self_b, &d_sb, &mut g.self_attn).0;
    }
    Ok(NetworkGradients {
        params: grads,
        input_a: da,
        input_b: db,
    })
}

/// Mean of per-patch feature vectors (rows) into one area feature.
pub fn average_pool(patches: &Array2<f64>) -> Result<ndarray::Array1<f64>> {
    patches
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidConfig("cannot pool an empty patch set".into()))
}
