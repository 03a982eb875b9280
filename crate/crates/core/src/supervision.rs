//! Focal classification loss and ListMLE ranking loss on the probability
//! matrix, with exact gradients with respect to its entries.

use ndarray::{Array2, ArrayView1};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::GtMatrix;
use crate::matcher::ProbMatrix;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Ranking term added to the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RankLoss {
    #[default]
    ListMle,
    /// Margin loss between the best ground-truth column and the hardest negative.
    Triplet { margin: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionConfig {
    /// IoU above which a ground-truth entry is a positive.
    pub lambda_gt: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub rank: RankLoss,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            lambda_gt: 0.2,
            alpha: 0.25,
            gamma: 2.0,
            rank: RankLoss::ListMle,
        }
    }
}

impl SupervisionConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.lambda_gt) || !open_unit(self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "lambda_gt and alpha must lie in (0, 1), got {} and {}",
                self.lambda_gt, self.alpha
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if let RankLoss::Triplet { margin } = self.rank {
            if !(margin >= 0.0) {
                return Err(Error::InvalidConfig(format!("triplet margin must be non-negative, got {margin}")));
            }
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the probability entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_shape(context: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(shape_mismatch(context, &[expected.0, expected.1], &[actual.0, actual.1]));
    }
    Ok(())
}

/// Focal loss of one entry and its derivative in `p`.
fn focal_entry(p: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let clamped = !(EPS..=1.0 - EPS).contains(&p);
    let p = p.clamp(EPS, 1.0 - EPS);
    let (loss, d) = if positive {
        let q = 1.0 - p;
        let w = q.powf(gamma);
        let loss = -alpha * w * p.ln();
        let dw = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
        (loss, -alpha * (dw * p.ln() + w / p))
    } else {
        let q = 1.0 - p;
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * q.ln();
        let dw = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        (loss, -(1.0 - alpha) * (dw * q.ln() - w / q))
    };
    (loss, if clamped { 0.0 } else { d })
}

/// Mean focal loss over every entry of `p` against binary labels.
pub fn focal_loss(p: &ProbMatrix, gt_bin: &Array2<bool>, cfg: &SupervisionConfig) -> Result<LossGrad> {
    check_shape("focal labels", p.dim(), gt_bin.dim())?;
    let count = p.values().len().max(1) as f64;
    let mut grad = Array2::zeros(p.dim());
    let mut total = 0.0;
    for ((g, &pv), &pos) in grad.iter_mut().zip(p.values().iter()).zip(gt_bin.iter()) {
        let (l, d) = focal_entry(pv, pos, cfg.alpha, cfg.gamma);
        total += l;
        *g = d / count;
    }
    Ok(LossGrad { value: total / count, grad })
}

/// Indices of `row` sorted by descending value; equal values keep index order.
fn descending_order(row: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

/// Negative Plackett-Luce log-likelihood of the first `top` places of
/// `order` under scores `t`, with its gradient. Items after `top` still
/// compete in every normalizer but are not ranked among themselves.
fn listmle_row(t: ArrayView1<f64>, order: &[usize], top: usize) -> (f64, Vec<f64>) {
    let n = order.len();
    let top = top.min(n);
    let s: Vec<f64> = order.iter().map(|&k| t[k]).collect();
    // suffix log-sum-exp: lse[k] = log sum_{l >= k} exp(s[l])
    let mut lse = vec![0.0; n];
    let mut acc = f64::NEG_INFINITY;
    for k in (0..n).rev() {
        let (hi, lo) = if acc > s[k] { (acc, s[k]) } else { (s[k], acc) };
        acc = hi + (lo - hi).exp().ln_1p();
        lse[k] = acc;
    }
    let loss: f64 = (0..top).map(|k| lse[k] - s[k]).sum();
    // d/ds_l = sum_{j <= l, j < top} exp(s_l - lse_j) - [l < top], accumulated
    // relative to lse of the last contributing place so no term overflows
    let mut grad = vec![0.0; n];
    let mut c = 0.0;
    for l in 0..n {
        let last = l.min(top.saturating_sub(1));
        if l < top {
            c = if l == 0 { 1.0 } else { c * (lse[l] - lse[l - 1]).exp() + 1.0 };
        }
        let indicator = if l < top { 1.0 } else { 0.0 };
        grad[order[l]] = if top == 0 { 0.0 } else { (s[l] - lse[last]).exp() * c - indicator };
    }
    (loss, grad)
}

/// ListMLE over the rows of `p` that have a ground-truth entry above `lambda_gt`.
///
/// Scores are log-probabilities, clamped below at `EPS` (zero gradient there).
/// Each row ranks its columns with nonzero ground truth in descending order
/// (equal values by index); zero-overlap columns only appear in the
/// normalizers. Returns the loss averaged over contributing rows and their count.
pub fn listmle_loss(p: &ProbMatrix, gt: &GtMatrix, cfg: &SupervisionConfig) -> Result<(LossGrad, usize)> {
    check_shape("ranking ground truth", p.dim(), gt.dim())?;
    let mut grad = Array2::zeros(p.dim());
    let mut total = 0.0;
    let mut rows = Vec::new();
    for (i, g_row) in gt.values().rows().into_iter().enumerate() {
        if g_row.iter().any(|&v| v > cfg.lambda_gt) {
            rows.push(i);
            let order = descending_order(g_row);
            let top = g_row.iter().filter(|&&v| v > 0.0).count();
            let row = p.values().row(i);
            let t = row.mapv(|v| v.clamp(EPS, 1.0).ln());
            let (l, d) = listmle_row(t.view(), &order, top);
            total += l;
            for (j, (&v, dt)) in row.iter().zip(d).enumerate() {
                grad[[i, j]] = if v > EPS && v < 1.0 { dt / v } else { 0.0 };
            }
        }
    }
    if rows.is_empty() {
        return Ok((LossGrad { value: 0.0, grad }, 0));
    }
    let k = rows.len() as f64;
    grad /= k;
    Ok((LossGrad { value: total / k, grad }, rows.len()))
}

/// Hinge between the ground-truth best column and the most confident negative, per row.
pub fn triplet_loss(
    p: &ProbMatrix,
    gt: &GtMatrix,
    gt_bin: &Array2<bool>,
    margin: f64,
    lambda_gt: f64,
) -> Result<(LossGrad, usize)> {
    check_shape("triplet ground truth", p.dim(), gt.dim())?;
    check_shape("triplet labels", p.dim(), gt_bin.dim())?;
    let mut grad = Array2::zeros(p.dim());
    let mut total = 0.0;
    let mut rows = 0usize;
    for (i, g_row) in gt.values().rows().into_iter().enumerate() {
        let pos = descending_order(g_row)[0];
        if !(g_row[pos] > lambda_gt) {
            continue;
        }
        let p_row = p.values().row(i);
        let neg = (0..p_row.len())
            .filter(|&j| !gt_bin[[i, j]])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if p_row[b] >= p_row[j] => Some(b),
                _ => Some(j),
            });
        let Some(neg) = neg else { continue };
        rows += 1;
        let h = margin - p_row[pos] + p_row[neg];
        if h > 0.0 {
            total += h;
            grad[[i, pos]] -= 1.0;
            grad[[i, neg]] += 1.0;
        }
    }
    if rows == 0 {
        return Ok((LossGrad { value: 0.0, grad }, 0));
    }
    grad /= rows as f64;
    Ok((LossGrad { value: total / rows as f64, grad }, rows))
}

/// Decomposed loss of one pair or the mean over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_rank: f64,
    pub l_total: f64,
    pub rows_ranked: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_cls,l_rank,l_total,rows_ranked";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.l_cls, self.l_rank, self.l_total, self.rows_ranked)
    }

    pub fn is_finite(&self) -> bool {
        self.l_cls.is_finite() && self.l_rank.is_finite() && self.l_total.is_finite()
    }

    /// Mean of the losses, total of the ranked rows.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let k = reports.len().max(1) as f64;
        let l_cls = reports.iter().map(|r| r.l_cls).sum::<f64>() / k;
        let l_rank = reports.iter().map(|r| r.l_rank).sum::<f64>() / k;
        LossReport {
            l_cls,
            l_rank,
            l_total: l_cls + l_rank,
            rows_ranked: reports.iter().map(|r| r.rows_ranked).sum(),
        }
    }
}

/// `L = L_cls + L_rank` and its gradient with respect to the entries of `p`.
pub fn total_loss(
    p: &ProbMatrix,
    gt: &GtMatrix,
    gt_bin: &Array2<bool>,
    cfg: &SupervisionConfig,
) -> Result<(LossReport, Array2<f64>)> {
    let cls = focal_loss(p, gt_bin, cfg)?;
    let (rank, rows) = match cfg.rank {
        RankLoss::ListMle => listmle_loss(p, gt, cfg)?,
        RankLoss::Triplet { margin } => triplet_loss(p, gt, gt_bin, margin, cfg.lambda_gt)?,
        RankLoss::None => (
            LossGrad {
                value: 0.0,
                grad: Array2::zeros(p.dim()),
            },
            0,
        ),
    };
    let report = LossReport {
        l_cls: cls.value,
        l_rank: rank.value,
        l_total: cls.value + rank.value,
        rows_ranked: rows,
    };
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss {report:?}")));
    }
    Ok((report, cls.grad + rank.grad))
}
