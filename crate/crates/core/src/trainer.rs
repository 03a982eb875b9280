//! Training loop over streamed synthetic pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::{init_params, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::eval::{auc_area_matching, AucReport, THRESHOLDS};
use crate::matcher::MatcherConfig;
use crate::model::{pair_loss_and_grad, predict, ImageInput};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::supervision::{LossReport, SupervisionConfig};
use crate::synth::{generate_indexed, SceneConfig, SyntheticPair, HELD_OUT_OFFSET};
use crate::tensorio::save_params;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    pub batch_pairs: usize,
    pub steps: usize,
    pub eval_every: usize,
    /// Size of the held-out split.
    pub eval_pairs: usize,
    /// Seeds both the parameter initialization and the data stream.
    pub seed: u64,
    pub matcher: MatcherConfig,
    pub supervision: SupervisionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::default(),
            batch_pairs: 4,
            steps: 2000,
            eval_every: 250,
            eval_pairs: 64,
            seed: 0,
            matcher: MatcherConfig::default(),
            supervision: SupervisionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.matcher.validate()?;
        self.supervision.validate()?;
        if self.batch_pairs == 0 || self.eval_every == 0 || self.eval_pairs == 0 {
            return Err(Error::InvalidConfig("batch_pairs, eval_every and eval_pairs must be positive".into()));
        }
        Ok(())
    }
}

fn inputs(pair: &SyntheticPair) -> (ImageInput<'_>, ImageInput<'_>) {
    (
        ImageInput {
            areas: &pair.areas_a,
            features: &pair.features_a,
        },
        ImageInput {
            areas: &pair.areas_b,
            features: &pair.features_b,
        },
    )
}

/// Mean loss and mean parameter gradient over `batch`.
///
/// Pairs are processed in parallel; the reduction runs in batch order so the
/// result does not depend on scheduling.
pub fn batch_gradient(
    params: &NetworkParams,
    batch: &[SyntheticPair],
    matcher: &MatcherConfig,
    sup: &SupervisionConfig,
) -> Result<(LossReport, NetworkParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let per_pair: Vec<(LossReport, NetworkParams)> = batch
        .par_iter()
        .map(|pair| {
            let (a, b) = inputs(pair);
            pair_loss_and_grad(params, a, b, &pair.gt, matcher, sup)
        })
        .collect::<Result<_>>()?;
    let mut grad = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    for (_, g) in &per_pair {
        grad.add_scaled(g, scale);
    }
    let reports: Vec<LossReport> = per_pair.iter().map(|(r, _)| *r).collect();
    Ok((LossReport::mean(&reports), grad))
}

/// One optimizer update on `batch`; returns the batch loss before the update.
pub fn train_step(
    params: &mut NetworkParams,
    opt: &mut OptimizerState,
    batch: &[SyntheticPair],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let (report, grad) = batch_gradient(params, batch, &cfg.matcher, &cfg.supervision)?;
    if !report.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "training step {}: losses {report:?}, gradient finite: {}, parameter norm {:e}",
            opt.step + 1,
            grad.is_finite(),
            params.l2_norm()
        )));
    }
    opt.update(params, &grad, &cfg.optim);
    Ok(report)
}

/// Held-out AUC of `params` on `pairs`.
pub fn evaluate(params: &NetworkParams, pairs: &[SyntheticPair], matcher: &MatcherConfig) -> Result<AucReport> {
    let probs: Vec<ndarray::Array2<f64>> = pairs
        .par_iter()
        .map(|p| {
            let (a, b) = inputs(p);
            predict(params, a, b, matcher).map(|pm| pm.values().clone())
        })
        .collect::<Result<_>>()?;
    let prob_refs: Vec<_> = probs.iter().collect();
    let gt_refs: Vec<_> = pairs.iter().map(|p| &p.gt).collect();
    auc_area_matching(&prob_refs, &gt_refs, &THRESHOLDS)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricRow {
    pub step: usize,
    /// Mean training losses since the previous row.
    pub loss: LossReport,
    pub auc: AucReport,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "step,l_cls,l_rank,auc@0.2,auc@0.3,auc@0.4,auc@0.5";

    pub fn csv_row(&self) -> String {
        let aucs: Vec<String> = THRESHOLDS.iter().map(|&t| self.auc.auc_at(t).to_string()).collect();
        format!("{},{},{},{}", self.step, self.loss.l_cls, self.loss.l_rank, aucs.join(","))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<MetricRow>,
    pub losses: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn final_auc(&self) -> Option<&AucReport> {
        self.history.last().map(|r| &r.auc)
    }
}

/// Training pair number `index` of the stream.
pub fn training_pair(scene: &SceneConfig, index: u64) -> Result<SyntheticPair> {
    generate_indexed(scene, index)
}

/// The held-out split: `count` pairs from a disjoint index range.
pub fn held_out(scene: &SceneConfig, count: usize) -> Result<Vec<SyntheticPair>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_indexed(scene, HELD_OUT_OFFSET + k))
        .collect()
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

/// Trains from a fresh initialization.
///
/// `cfg.seed` replaces the seeds of `scene` and `net`. With `out_dir` set,
/// checkpoints are written at every evaluation (`checkpoint_NNNNNN.bin`) and
/// at the end (`params.bin`), together with `metrics.csv` and `loss.csv`.
pub fn train(cfg: &TrainConfig, scene: &SceneConfig, net: &NetworkConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scene = SceneConfig {
        seed: cfg.seed,
        ..scene.clone()
    };
    let net = NetworkConfig { seed: cfg.seed, ..*net };
    scene.validate()?;
    if scene.feature_dim != net.dim {
        return Err(Error::InvalidConfig(format!(
            "scene feature_dim {} must equal network dim {}",
            scene.feature_dim, net.dim
        )));
    }
    let mut params = init_params(&net)?;
    let mut opt = OptimizerState::new(&params);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut outcome = TrainOutcome {
        params: params.clone(),
        history: Vec::new(),
        losses: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok(outcome);
    }

    let eval_set = held_out(&scene, cfg.eval_pairs)?;
    let batch_len = cfg.batch_pairs as u64;
    let mut window: Vec<LossReport> = Vec::new();
    for step in 1..=cfg.steps {
        let first = (step as u64 - 1) * batch_len;
        let batch: Vec<SyntheticPair> = (first..first + batch_len)
            .into_par_iter()
            .map(|i| training_pair(&scene, i))
            .collect::<Result<_>>()?;
        let report = match train_step(&mut params, &mut opt, &batch, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    save_params(&dir.join(format!("failed_step_{step:06}.bin")), &params)?;
                }
                return Err(e);
            }
        };
        outcome.losses.push(report);
        window.push(report);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let auc = evaluate(&params, &eval_set, &cfg.matcher)?;
            outcome.history.push(MetricRow {
                step,
                loss: LossReport::mean(&window),
                auc,
            });
            window.clear();
            if let Some(dir) = out_dir {
                save_params(&dir.join(format!("checkpoint_{step:06}.bin")), &params)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_params(&dir.join("params.bin"), &params)?;
        write_lines(
            &dir.join("metrics.csv"),
            MetricRow::CSV_HEADER,
            outcome.history.iter().map(MetricRow::csv_row),
        )?;
        write_lines(
            &dir.join("loss.csv"),
            LossReport::CSV_HEADER,
            outcome.losses.iter().enumerate().map(|(k, r)| r.csv_row(k + 1)),
        )?;
    }
    outcome.params = params;
    Ok(outcome)
}
