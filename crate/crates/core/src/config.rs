//! Flat `key = value` run configuration shared by every command.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.
//! `dim` also sets the synthetic feature width unless `feature_dim` is given.

use std::path::Path;
use std::str::FromStr;

use crate::attention::NetworkConfig;
use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::hcrf::HcrfConfig;
use crate::supervision::RankLoss;
use crate::synth::SceneConfig;
use crate::trainer::TrainConfig;

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seeds scene generation, parameter init and the training stream"),
    ("image_w", "synthetic image width, pixels"),
    ("image_h", "synthetic image height, pixels"),
    ("n_areas", "matchable areas per synthetic image A"),
    ("nesting_prob", "chance a new area nests inside a top-level one"),
    ("min_side", "smallest top-level side, fraction of image side"),
    ("max_side", "largest top-level side, fraction of image side"),
    ("max_rotation_deg", "homography rotation range, degrees"),
    ("max_scale", "homography scale range [1/s, s]"),
    ("max_translation", "homography translation range, fraction of image side"),
    ("max_perspective", "homography projective terms, per pixel"),
    ("min_visible", "visible fraction needed for a B counterpart"),
    ("feature_dim", "synthetic feature width (defaults to dim)"),
    ("sigma", "feature noise standard deviation"),
    ("distractors", "unmatched areas per image"),
    ("repetition", "top-level areas sharing one latent"),
    ("containment_mixing", "parents mix in their children's latents"),
    ("dim", "descriptor width D"),
    ("blocks", "attention blocks N_tr"),
    ("heads", "attention heads"),
    ("ffn_mult", "feed-forward width multiplier"),
    ("pe_hidden", "positional MLP hidden width"),
    ("use_pe", "add the positional embedding"),
    ("normalize_distances", "divide center distances by the image diagonal"),
    ("l2_normalize", "unit-length descriptors"),
    ("tau", "score temperature"),
    ("lambda_pr", "match probability threshold"),
    ("delta_contain", "containment threshold of the filter"),
    ("delta_cover", "coverage threshold of the filter"),
    ("lambda_gt", "IoU above which a pair is positive"),
    ("alpha", "focal positive weight"),
    ("gamma", "focal focusing exponent"),
    ("rank", "ranking term: listmle, triplet or none"),
    ("triplet_margin", "margin of the triplet ranking term"),
    ("lr", "learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("adam_eps", "optimizer denominator epsilon"),
    ("batch_pairs", "pairs per step"),
    ("steps", "training steps"),
    ("eval_every", "steps between held-out evaluations"),
    ("eval_pairs", "held-out pairs"),
    ("bench_repetitions", "timed repetitions per bench size"),
    ("bench_warmup", "untimed passes per bench size"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub hcrf: HcrfConfig,
    pub bench_repetitions: usize,
    pub bench_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            net: NetworkConfig {
                dim: 32,
                ..NetworkConfig::default()
            },
            train: TrainConfig::default(),
            hcrf: HcrfConfig::default(),
            bench_repetitions: BenchConfig::default().repetitions,
            bench_warmup: BenchConfig::default().warmup,
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key} = {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key} expects true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut feature_dim = None;
        let mut rank = "listmle".to_string();
        let mut margin = 0.2;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let s = &mut cfg.scene;
            let n = &mut cfg.net;
            let t = &mut cfg.train;
            match k {
                "seed" => cfg.set_seed(value(k, v)?),
                "image_w" => s.image_w = value(k, v)?,
                "image_h" => s.image_h = value(k, v)?,
                "n_areas" => s.n_areas = value(k, v)?,
                "nesting_prob" => s.nesting_prob = value(k, v)?,
                "min_side" => s.min_side = value(k, v)?,
                "max_side" => s.max_side = value(k, v)?,
                "max_rotation_deg" => s.max_rotation = value::<f64>(k, v)?.to_radians(),
                "max_scale" => s.max_scale = value(k, v)?,
                "max_translation" => s.max_translation = value(k, v)?,
                "max_perspective" => s.max_perspective = value(k, v)?,
                "min_visible" => s.min_visible = value(k, v)?,
                "feature_dim" => feature_dim = Some(value(k, v)?),
                "sigma" => s.feature_noise_sigma = value(k, v)?,
                "distractors" => s.distractor_count = value(k, v)?,
                "repetition" => s.repetition = value(k, v)?,
                "containment_mixing" => s.containment_mixing = flag(k, v)?,
                "dim" => n.dim = value(k, v)?,
                "blocks" => n.blocks = value(k, v)?,
                "heads" => n.heads = value(k, v)?,
                "ffn_mult" => n.ffn_mult = value(k, v)?,
                "pe_hidden" => n.pe_hidden = value(k, v)?,
                "use_pe" => n.use_pe = flag(k, v)?,
                "normalize_distances" => n.normalize_distances = flag(k, v)?,
                "l2_normalize" => n.l2_normalize = flag(k, v)?,
                "tau" => t.matcher.tau = value(k, v)?,
                "lambda_pr" => t.matcher.lambda_pr = value(k, v)?,
                "delta_contain" => cfg.hcrf.delta_contain = value(k, v)?,
                "delta_cover" => cfg.hcrf.delta_cover = value(k, v)?,
                "lambda_gt" => t.supervision.lambda_gt = value(k, v)?,
                "alpha" => t.supervision.alpha = value(k, v)?,
                "gamma" => t.supervision.gamma = value(k, v)?,
                "rank" => rank = v.to_ascii_lowercase(),
                "triplet_margin" => margin = value(k, v)?,
                "lr" => t.optim.lr = value(k, v)?,
                "weight_decay" => t.optim.weight_decay = value(k, v)?,
                "beta1" => t.optim.beta1 = value(k, v)?,
                "beta2" => t.optim.beta2 = value(k, v)?,
                "adam_eps" => t.optim.eps = value(k, v)?,
                "batch_pairs" => t.batch_pairs = value(k, v)?,
                "steps" => t.steps = value(k, v)?,
                "eval_every" => t.eval_every = value(k, v)?,
                "eval_pairs" => t.eval_pairs = value(k, v)?,
                "bench_repetitions" => cfg.bench_repetitions = value(k, v)?,
                "bench_warmup" => cfg.bench_warmup = value(k, v)?,
                _ => return Err(Error::InvalidConfig(format!("line {}: unknown key {k:?}", lineno + 1))),
            }
        }
        cfg.scene.feature_dim = feature_dim.unwrap_or(cfg.net.dim);
        cfg.train.supervision.rank = match rank.as_str() {
            "listmle" => RankLoss::ListMle,
            "triplet" => RankLoss::Triplet { margin },
            "none" => RankLoss::None,
            other => return Err(Error::InvalidConfig(format!("rank must be listmle, triplet or none, got {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.net.seed = seed;
        self.train.seed = seed;
    }

    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            repetitions: self.bench_repetitions,
            warmup: self.bench_warmup,
            seed: self.train.seed,
            matcher: self.train.matcher,
            hcrf: self.hcrf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.hcrf.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig { scene: SceneConfig { feature_dim: 32, ..SceneConfig::default() }, ..RunConfig::default() });
    }

    #[test]
    fn dim_carries_feature_width() {
        let cfg = RunConfig::parse("dim = 16\nheads = 2").unwrap();
        assert_eq!((cfg.net.dim, cfg.scene.feature_dim), (16, 16));
        let cfg = RunConfig::parse("dim = 16\nheads = 2\nfeature_dim = 8").unwrap();
        assert_eq!(cfg.scene.feature_dim, 8);
    }

    #[test]
    fn every_documented_key_parses() {
        let sample = |k: &str| match k {
            "rank" => "triplet",
            "containment_mixing" | "use_pe" | "normalize_distances" | "l2_normalize" => "false",
            "max_rotation_deg" => "5",
            "dim" | "feature_dim" => "16",
            "heads" | "blocks" | "ffn_mult" | "repetition" => "2",
            "bench_repetitions" => "4",
            "seed" | "distractors" | "bench_warmup" => "3",
            "max_scale" => "1.1",
            "min_side" => "0.05",
            "max_side" => "0.15",
            "beta1" | "beta2" => "0.5",
            "image_w" | "image_h" | "n_areas" | "pe_hidden" | "steps" | "eval_every" | "eval_pairs" | "batch_pairs" => "10",
            _ => "0.3",
        };
        let text: String = KEYS.iter().map(|(k, _)| format!("{k} = {}  # note\n", sample(k))).collect();
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.train.supervision.rank, RankLoss::Triplet { margin: 0.3 });
        assert!(!cfg.net.use_pe && !cfg.scene.containment_mixing);
        assert!((cfg.scene.max_rotation - 5f64.to_radians()).abs() < 1e-15);
        assert_eq!(cfg.bench_repetitions, 4);
    }

    #[test]
    fn seed_reaches_every_component() {
        let cfg = RunConfig::parse("seed = 9").unwrap();
        assert_eq!((cfg.scene.seed, cfg.net.seed, cfg.train.seed), (9, 9, 9));
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in ["dims = 3", "dim 3", "dim = x", "use_pe = maybe", "rank = pairwise", "tau = -1", "dim = 10\nheads = 3"] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
