//! The full differentiable path of one image pair: positional encoding,
//! attention descriptors, scores and dual-softmax probabilities, plus the
//! loss gradient with respect to every network parameter.

use ndarray::Array2;

use crate::attention::{self, DescriptorMatrix, GradientTape, NetworkParams};
use crate::error::{shape_mismatch, Result};
use crate::geometry::{binarize_gt, AreaSet, GtMatrix};
use crate::matcher::{dual_softmax, dual_softmax_backward, score_matrix, MatcherConfig, ProbMatrix};
use crate::posenc::{pairwise_geometry, positional_embed_backward, positional_embed_cached, GeometryFeatures, PeCache};
use crate::supervision::{total_loss, LossReport, SupervisionConfig};

/// One image: its areas and pooled per-area features.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub areas: &'a AreaSet,
    pub features: &'a Array2<f64>,
}

struct PeState {
    geom: GeometryFeatures,
    cache: PeCache,
}

/// Activations of a forward pass, kept for [`PairForward::backward`].
pub struct PairForward {
    pe: Option<[PeState; 2]>,
    tape: GradientTape,
    descriptors: [DescriptorMatrix; 2],
    tau: f64,
    prob: ProbMatrix,
}

fn encode(params: &NetworkParams, img: ImageInput<'_>) -> Result<(Array2<f64>, Option<PeState>)> {
    let cfg = &params.config;
    if img.features.nrows() != img.areas.len() {
        return Err(shape_mismatch(
            "features per area",
            &[img.areas.len(), cfg.dim],
            img.features.shape(),
        ));
    }
    if !cfg.use_pe {
        return Ok((img.features.clone(), None));
    }
    let geom = pairwise_geometry(img.areas, cfg.normalize_distances);
    let (pe, cache) = positional_embed_cached(&geom, &params.pe)?;
    let f_hat = crate::posenc::add_pe(img.features, &pe)?;
    Ok((f_hat, Some(PeState { geom, cache })))
}

/// Position-encoded features of one image, as fed to the attention network.
pub fn encode_features(params: &NetworkParams, img: ImageInput<'_>) -> Result<Array2<f64>> {
    Ok(encode(params, img)?.0)
}

impl PairForward {
    pub fn run(params: &NetworkParams, a: ImageInput<'_>, b: ImageInput<'_>, matcher: &MatcherConfig) -> Result<Self> {
        let (fa, pe_a) = encode(params, a)?;
        let (fb, pe_b) = encode(params, b)?;
        let (da, db, tape) = attention::forward(&fa, &fb, params)?;
        let s = score_matrix(&da, &db, matcher)?;
        let prob = dual_softmax(&s)?;
        let pe = match (pe_a, pe_b) {
            (Some(x), Some(y)) => Some([x, y]),
            _ => None,
        };
        Ok(Self {
            pe,
            tape,
            descriptors: [da, db],
            tau: matcher.tau,
            prob,
        })
    }

    pub fn prob(&self) -> &ProbMatrix {
        &self.prob
    }

    pub fn descriptors(&self) -> (&DescriptorMatrix, &DescriptorMatrix) {
        (&self.descriptors[0], &self.descriptors[1])
    }

    /// Parameter gradient of a scalar loss given its gradient `d_prob` with respect to `P`.
    pub fn backward(&self, params: &NetworkParams, d_prob: &Array2<f64>) -> Result<NetworkParams> {
        if d_prob.dim() != self.prob.dim() {
            let (m, n) = self.prob.dim();
            return Err(shape_mismatch("probability gradient", &[m, n], d_prob.shape()));
        }
        let d_s = dual_softmax_backward(&self.prob, d_prob) / self.tau;
        let [da, db] = &self.descriptors;
        let d_da = d_s.dot(db);
        let d_db = d_s.t().dot(da);
        let mut g = attention::backward(&self.tape, params, &d_da, &d_db)?;
        if let Some([pa, pb]) = &self.pe {
            positional_embed_backward(&pa.geom, &params.pe, &pa.cache, &g.input_a, &mut g.params.pe);
            positional_embed_backward(&pb.geom, &params.pe, &pb.cache, &g.input_b, &mut g.params.pe);
        }
        Ok(g.params)
    }
}

/// Matching probabilities for one pair.
pub fn predict(params: &NetworkParams, a: ImageInput<'_>, b: ImageInput<'_>, matcher: &MatcherConfig) -> Result<ProbMatrix> {
    Ok(PairForward::run(params, a, b, matcher)?.prob)
}

/// Loss of one pair against its ground truth.
pub fn pair_loss(
    params: &NetworkParams,
    a: ImageInput<'_>,
    b: ImageInput<'_>,
    gt: &GtMatrix,
    matcher: &MatcherConfig,
    sup: &SupervisionConfig,
) -> Result<LossReport> {
    let fwd = PairForward::run(params, a, b, matcher)?;
    Ok(total_loss(&fwd.prob, gt, &binarize_gt(gt, sup.lambda_gt), sup)?.0)
}

/// Loss of one pair and its gradient with respect to every parameter.
pub fn pair_loss_and_grad(
    params: &NetworkParams,
    a: ImageInput<'_>,
    b: ImageInput<'_>,
    gt: &GtMatrix,
    matcher: &MatcherConfig,
    sup: &SupervisionConfig,
) -> Result<(LossReport, NetworkParams)> {
    let fwd = PairForward::run(params, a, b, matcher)?;
    let (report, d_prob) = total_loss(&fwd.prob, gt, &binarize_gt(gt, sup.lambda_gt), sup)?;
    Ok((report, fwd.backward(params, &d_prob)?))
}
