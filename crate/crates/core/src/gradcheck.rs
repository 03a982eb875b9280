//! Central finite-difference audit of the analytic parameter gradients.

use ndarray::{Array2, ArrayViewD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{init_params, NetworkConfig, NetworkParams};
use crate::error::Result;
use crate::geometry::{Area, AreaSet, GtMatrix};
use crate::matcher::MatcherConfig;
use crate::model::{pair_loss, pair_loss_and_grad, ImageInput};
use crate::supervision::SupervisionConfig;

/// Norms below this count as zero when forming a relative error.
///
/// Some tensors have an identically zero gradient (a key bias shifts every
/// attention logit of a row equally); their difference quotients are pure
/// rounding noise around 1e-11.
pub const NORM_FLOOR: f64 = 1e-5;

/// `||a - n|| / max(||a||, ||n||, NORM_FLOOR)`.
pub fn relative_error(a: &ArrayViewD<'_, f64>, n: &ArrayViewD<'_, f64>) -> f64 {
    let norm = |x: &ArrayViewD<'_, f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.iter().zip(n.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(n)).max(NORM_FLOOR)
}

fn scalar_mut(p: &mut NetworkParams, tensor: usize, k: usize) -> &mut f64 {
    let view = p.tensors_mut().swap_remove(tensor);
    &mut view.into_slice().expect("parameters are contiguous")[k]
}

/// Central differences of `loss` with respect to every parameter scalar.
pub fn numeric_gradient(
    params: &NetworkParams,
    eps: f64,
    loss: impl Fn(&NetworkParams) -> Result<f64>,
) -> Result<NetworkParams> {
    let mut work = params.clone();
    let mut grad = params.zeros_like();
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let original = *scalar_mut(&mut work, ti, k);
            *scalar_mut(&mut work, ti, k) = original + eps;
            let plus = loss(&work)?;
            *scalar_mut(&mut work, ti, k) = original - eps;
            let minus = loss(&work)?;
            *scalar_mut(&mut work, ti, k) = original;
            *scalar_mut(&mut grad, ti, k) = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

pub fn compare(seed: u64, analytic: &NetworkParams, numeric: &NetworkParams) -> GradcheckReport {
    let norm = |x: &ArrayViewD<'_, f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tensors: Vec<TensorCheck> = analytic
        .named_tensors()
        .into_iter()
        .zip(numeric.named_tensors())
        .map(|((name, a), (_, n))| TensorCheck {
            rel_err: relative_error(&a, &n),
            analytic_norm: norm(&a),
            numeric_norm: norm(&n),
            name,
        })
        .collect();
    let max_rel_err = tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    GradcheckReport {
        seed,
        tensors,
        max_rel_err,
    }
}

/// A small random pair with random parameters and ground truth.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: NetworkParams,
    pub areas_a: AreaSet,
    pub areas_b: AreaSet,
    pub features_a: Array2<f64>,
    pub features_b: Array2<f64>,
    pub gt: GtMatrix,
}

fn random_set(rng: &mut ChaCha8Rng, count: usize) -> Result<AreaSet> {
    let rects = (0..count).map(|_| {
        let x0 = rng.random_range(0.0..70.0);
        let y0 = rng.random_range(0.0..70.0);
        let w = rng.random_range(5.0..30.0);
        let h = rng.random_range(5.0..30.0);
        Area { x0, y0, x1: x0 + w, y1: y0 + h, id: 0 }
    });
    AreaSet::new(100.0, 100.0, rects.collect::<Vec<_>>())
}

impl Instance {
    /// Random parameters, areas, features and a ground truth with at least one positive per row.
    pub fn random(seed: u64, cfg: NetworkConfig, m: usize, n: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&NetworkConfig { seed, ..cfg })?;
        let areas_a = random_set(&mut rng, m)?;
        let areas_b = random_set(&mut rng, n)?;
        let mut feat = |rows: usize| Array2::from_shape_fn((rows, cfg.dim), |_| rng.random_range(-1.0..1.0));
        let features_a = feat(m);
        let features_b = feat(n);
        let mut gt = Array2::from_shape_fn((m, n), |_| rng.random_range(0.0..0.3));
        for i in 0..m {
            let j = rng.random_range(0..n);
            gt[[i, j]] = rng.random_range(0.5..1.0);
        }
        Ok(Self {
            params,
            areas_a,
            areas_b,
            features_a,
            features_b,
            gt: GtMatrix::new(gt)?,
        })
    }

    fn inputs(&self) -> (ImageInput<'_>, ImageInput<'_>) {
        (
            ImageInput { areas: &self.areas_a, features: &self.features_a },
            ImageInput { areas: &self.areas_b, features: &self.features_b },
        )
    }

    /// Compares the analytic gradient of `L_cls + L_rank` against central differences.
    pub fn check(&self, seed: u64, eps: f64, matcher: &MatcherConfig, sup: &SupervisionConfig) -> Result<GradcheckReport> {
        let (a, b) = self.inputs();
        let (_, analytic) = pair_loss_and_grad(&self.params, a, b, &self.gt, matcher, sup)?;
        let numeric = numeric_gradient(&self.params, eps, |p| Ok(pair_loss(p, a, b, &self.gt, matcher, sup)?.l_total))?;
        Ok(compare(seed, &analytic, &numeric))
    }
}

/// The desk-scale audit: `dim` 8, 2 blocks, 2 heads, three areas per image.
pub fn audit_config() -> NetworkConfig {
    NetworkConfig {
        dim: 8,
        blocks: 2,
        heads: 2,
        ..NetworkConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_only_matters_near_zero() {
        let a = ndarray::arr1(&[1.0, 2.0]).into_dyn();
        let n = ndarray::arr1(&[1.0, 2.0 + 1e-6]).into_dyn();
        let e = relative_error(&a.view(), &n.view());
        assert!((e - 1e-6 / 5f64.sqrt()).abs() < 1e-12);
        let z = ndarray::arr1(&[0.0, 0.0]).into_dyn();
        let tiny = ndarray::arr1(&[1e-11, -1e-11]).into_dyn();
        assert!(relative_error(&z.view(), &tiny.view()) < 1e-5);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let inst = Instance::random(1, audit_config(), 3, 3).unwrap();
        let report = inst
            .check(1, 1e-5, &MatcherConfig::default(), &SupervisionConfig::default())
            .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:#?}");
        assert!(report.tensors.iter().any(|t| t.name == "pe.w1" && t.analytic_norm > 0.0));
    }
}
