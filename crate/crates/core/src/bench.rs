//! Stage timings of the inference path on random inputs.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{self, init_params, NetworkConfig};
use crate::error::{Error, Result};
use crate::geometry::{Area, AreaSet};
use crate::hcrf::{filter_matches, FilterSide, HcrfConfig};
use crate::matcher::{dual_softmax, score_matrix, select_matches, MatcherConfig};
use crate::model::{encode_features, ImageInput};

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub m: usize,
    pub n: usize,
    pub dim: usize,
    pub blocks: usize,
    pub repetitions: usize,
    /// Median seconds per stage.
    pub encode_s: f64,
    pub attend_s: f64,
    pub match_s: f64,
    pub filter_s: f64,
    /// Median of the per-repetition totals.
    pub total_s: f64,
    pub matches: usize,
    pub filtered: usize,
}

impl BenchRecord {
    pub fn attend_match_s(&self) -> f64 {
        self.attend_s + self.match_s
    }

    pub fn table(records: &[BenchRecord]) -> String {
        let mut out = String::from("    m     n    D  reps   encode_s   attend_s    match_s   filter_s    total_s\n");
        for r in records {
            out.push_str(&format!(
                "{:>5} {:>5} {:>4} {:>5} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e}\n",
                r.m, r.n, r.dim, r.repetitions, r.encode_s, r.attend_s, r.match_s, r.filter_s, r.total_s
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub matcher: MatcherConfig,
    pub hcrf: HcrfConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 5,
            warmup: 1,
            seed: 0,
            matcher: MatcherConfig::default(),
            hcrf: HcrfConfig::default(),
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Random rectangles with a share of them nested inside earlier ones.
fn random_areas(rng: &mut ChaCha8Rng, count: usize) -> Result<AreaSet> {
    let (w, h) = (640.0, 480.0);
    let mut rects: Vec<Area> = Vec::with_capacity(count);
    while rects.len() < count {
        let r = if !rects.is_empty() && rng.random_bool(0.3) {
            let p = rects[rng.random_range(0..rects.len())];
            let cw = p.width() * rng.random_range(0.3..0.8);
            let ch = p.height() * rng.random_range(0.3..0.8);
            let x0 = p.x0 + rng.random_range(0.0..=p.width() - cw);
            let y0 = p.y0 + rng.random_range(0.0..=p.height() - ch);
            Area { x0, y0, x1: x0 + cw, y1: y0 + ch, id: 0 }
        } else {
            let cw = rng.random_range(30.0..160.0);
            let ch = rng.random_range(30.0..160.0);
            let x0 = rng.random_range(0.0..w - cw);
            let y0 = rng.random_range(0.0..h - ch);
            Area { x0, y0, x1: x0 + cw, y1: y0 + ch, id: 0 }
        };
        rects.push(r);
    }
    AreaSet::new(w, h, rects)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Times encode, attend, match and filter for every `(m, n)` in `sizes`.
///
/// Each size runs `warmup` untimed passes, then `repetitions` timed ones;
/// stage times are medians. Inputs are generated before any timer starts.
pub fn bench_scaling(net: &NetworkConfig, sizes: &[(usize, usize)], cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repetitions < 3 {
        return Err(Error::InvalidConfig(format!("need at least 3 repetitions, got {}", cfg.repetitions)));
    }
    if sizes.windows(2).any(|w| w[0].0 * w[0].1 > w[1].0 * w[1].1) {
        return Err(Error::InvalidConfig("bench sizes must be ascending".into()));
    }
    let params = init_params(&NetworkConfig { seed: cfg.seed, ..*net })?;
    let mut records = Vec::with_capacity(sizes.len());
    for (k, &(m, n)) in sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64 + 1);
        let areas_a = random_areas(&mut rng, m)?;
        let areas_b = random_areas(&mut rng, n)?;
        let feat_a = gaussian(&mut rng, m, net.dim);
        let feat_b = gaussian(&mut rng, n, net.dim);
        let a = ImageInput { areas: &areas_a, features: &feat_a };
        let b = ImageInput { areas: &areas_b, features: &feat_b };

        let mut times = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        let (mut matches, mut filtered) = (0, 0);
        for rep in 0..cfg.warmup + cfg.repetitions {
            let t0 = Instant::now();
            let fa = encode_features(&params, a)?;
            let fb = encode_features(&params, b)?;
            let t1 = Instant::now();
            let (da, db, _) = attention::forward(&fa, &fb, &params)?;
            let t2 = Instant::now();
            let p = dual_softmax(&score_matrix(&da, &db, &cfg.matcher)?)?;
            let found = select_matches(&p, &cfg.matcher);
            let t3 = Instant::now();
            let kept = filter_matches(&found, &areas_a, FilterSide::A, &cfg.hcrf);
            let t4 = Instant::now();
            if rep >= cfg.warmup {
                let stages = [t1 - t0, t2 - t1, t3 - t2, t4 - t3, t4 - t0];
                for (acc, d) in times.iter_mut().zip(stages) {
                    acc.push(secs(d));
                }
            }
            matches = found.len();
            filtered = kept.len();
        }
        let [enc, att, mat, fil, tot] = &mut times;
        records.push(BenchRecord {
            m,
            n,
            dim: net.dim,
            blocks: net.blocks,
            repetitions: cfg.repetitions,
            encode_s: median(enc),
            attend_s: median(att),
            match_s: median(mat),
            filter_s: median(fil),
            total_s: median(tot),
            matches,
            filtered,
        });
    }
    Ok(records)
}

/// Slope of attend + match time against `m * n`.
pub fn attend_match_slope(records: &[BenchRecord]) -> f64 {
    let x: Vec<f64> = records.iter().map(|r| (r.m * r.n) as f64).collect();
    let y: Vec<f64> = records.iter().map(BenchRecord::attend_match_s).collect();
    loglog_slope(&x, &y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let x = [16.0, 64.0, 256.0, 1024.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.7)).collect();
        assert!((loglog_slope(&x, &y) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn records_are_positive_and_ordered() {
        let net = NetworkConfig { dim: 16, blocks: 1, heads: 2, ..NetworkConfig::default() };
        let r = bench_scaling(&net, &[(4, 4), (8, 6)], &BenchConfig::default()).unwrap();
        assert_eq!(r.len(), 2);
        for rec in &r {
            assert!(rec.encode_s > 0.0 && rec.attend_s > 0.0 && rec.match_s > 0.0 && rec.total_s > 0.0);
            assert!(rec.filtered <= rec.matches);
            assert_eq!(rec.repetitions, 5);
        }
        assert!(BenchRecord::table(&r).lines().count() == 3);
    }

    #[test]
    fn too_few_repetitions_rejected() {
        let net = NetworkConfig { dim: 8, blocks: 1, heads: 1, ..NetworkConfig::default() };
        let cfg = BenchConfig { repetitions: 2, ..BenchConfig::default() };
        assert!(bench_scaling(&net, &[(3, 3)], &cfg).is_err());
        assert!(bench_scaling(&net, &[(5, 5), (3, 3)], &BenchConfig::default()).is_err());
    }
}
