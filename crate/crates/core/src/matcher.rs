//! Score matrix, dual-softmax probabilities and mutual-nearest-neighbour selection.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::DescriptorMatrix;
use crate::error::{shape_mismatch, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    /// Temperature dividing descriptor inner products.
    pub tau: f64,
    /// Minimum probability for a mutual nearest neighbour to count as a match.
    pub lambda_pr: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_pr: 0.2,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.lambda_pr) {
            return Err(Error::InvalidConfig(format!("lambda_pr must lie in [0, 1), got {}", self.lambda_pr)));
        }
        Ok(())
    }
}

/// `S(i, j) = <D_A^i, D_B^j> / tau`.
pub fn score_matrix(da: &DescriptorMatrix, db: &DescriptorMatrix, cfg: &MatcherConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if da.ncols() != db.ncols() {
        return Err(shape_mismatch("descriptor width", &[da.ncols()], &[db.ncols()]));
    }
    Ok(da.dot(&db.t()) / cfg.tau)
}

/// Dual-softmax matching probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    values: Array2<f64>,
    row_softmax: Array2<f64>,
    col_softmax: Array2<f64>,
}

impl ProbMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Softmax of each row of the score matrix.
    pub fn row_factor(&self) -> &Array2<f64> {
        &self.row_softmax
    }

    /// Softmax of each column of the score matrix.
    pub fn col_factor(&self) -> &Array2<f64> {
        &self.col_softmax
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Wraps precomputed probabilities (e.g. from a file) without factors.
    ///
    /// Factors are set to the probabilities themselves, so [`dual_softmax_backward`]
    /// must not be used on the result.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format {
                what: "probability matrix",
                reason: "entries must lie in [0, 1]".into(),
            });
        }
        Ok(Self {
            row_softmax: values.clone(),
            col_softmax: values.clone(),
            values,
        })
    }
}

fn softmax_along(s: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = s.clone();
    for mut lane in out.lanes_mut(axis) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

/// `P(i, j) = softmax(S(i, .))_j * softmax(S(., j))_i`, max-subtracted.
pub fn dual_softmax(s: &Array2<f64>) -> Result<ProbMatrix> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score matrix".into()));
    }
    let row_softmax = softmax_along(s, Axis(1));
    let col_softmax = softmax_along(s, Axis(0));
    Ok(ProbMatrix {
        values: &row_softmax * &col_softmax,
        row_softmax,
        col_softmax,
    })
}

/// Gradient w.r.t. the score matrix given `dL/dP`.
pub fn dual_softmax_backward(p: &ProbMatrix, d_p: &Array2<f64>) -> Array2<f64> {
    let d_row = d_p * &p.col_softmax;
    let d_col = d_p * &p.row_softmax;

    let mut ds = &d_row * &p.row_softmax;
    let row_dots = ds.sum_axis(Axis(1));
    for (mut row, (prow, dot)) in ds.rows_mut().into_iter().zip(p.row_softmax.rows().into_iter().zip(row_dots)) {
        row.zip_mut_with(&prow, |v, &pv| *v -= pv * dot);
    }

    let mut dc = &d_col * &p.col_softmax;
    let col_dots = dc.sum_axis(Axis(0));
    for (mut col, (pcol, dot)) in dc.columns_mut().into_iter().zip(p.col_softmax.columns().into_iter().zip(col_dots)) {
        col.zip_mut_with(&pcol, |v, &pv| *v -= pv * dot);
    }
    ds + dc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub p: f64,
}

/// One-to-one matches between image A (`i`) and image B (`j`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet(pub Vec<Match>);

impl MatchSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Match> {
        self.0.iter()
    }

    /// One `{"i":..,"j":..,"p":..}` object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.0 {
            serde_json::to_writer(&mut out, m)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads match lines, skipping blank lines and records without `i`/`j`
    /// (such as filter summaries).
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut out = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)?;
            if value.get("i").is_some() && value.get("j").is_some() {
                out.push(serde_json::from_value(value)?);
            }
        }
        Ok(MatchSet(out))
    }
}

fn argmax_lowest<'a>(values: impl Iterator<Item = &'a f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Mutual nearest neighbours of `p` whose probability is at least `lambda_pr`.
/// Ties in either argmax go to the lowest index.
pub fn select_matches(p: &ProbMatrix, cfg: &MatcherConfig) -> MatchSet {
    let values = &p.values;
    let col_best: Array1<usize> = values
        .columns()
        .into_iter()
        .map(|c| argmax_lowest(c.iter()).unwrap_or(usize::MAX))
        .collect();
    let mut matches = Vec::new();
    for (i, row) in values.rows().into_iter().enumerate() {
        let Some(j) = argmax_lowest(row.iter()) else {
            continue;
        };
        let prob = row[j];
        if col_best[j] == i && prob >= cfg.lambda_pr {
            matches.push(Match { i, j, p: prob });
        }
    }
    MatchSet(matches)
}
