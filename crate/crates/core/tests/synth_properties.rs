use ndarray::Array2;
use sgad::geometry::{gt_matrix, project_area, rect_iou, DEFAULT_GRID_K};
use sgad::synth::{dataset, generate_indexed, SceneConfig, SyntheticPair};

fn nearest(features_b: &Array2<f64>, query: ndarray::ArrayView1<f64>) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (j, row) in features_b.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(query.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn gt_argmax(pair: &SyntheticPair, i: usize) -> Option<usize> {
    let row = pair.gt.values().row(i);
    let (j, &v) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
    (v > 0.5).then_some(j)
}

/// Correct raw nearest neighbours and the number of rows scored.
/// With `inside_only`, rows whose projection leaves image B are skipped:
/// they have no counterpart, yet a neighbour's clipped counterpart can
/// still overlap them above 0.5.
fn nn_hits(pair: &SyntheticPair, inside_only: bool) -> (usize, usize) {
    let mut hits = 0;
    let mut rows = 0;
    for (i, a) in pair.areas_a.areas().iter().enumerate() {
        if inside_only {
            let inside = project_area(a, &pair.field, DEFAULT_GRID_K)
                .is_some_and(|p| p.x0 >= 0.0 && p.y0 >= 0.0 && p.x1 <= pair.areas_b.image_width() && p.y1 <= pair.areas_b.image_height());
            if !inside {
                continue;
            }
        }
        if let Some(j) = gt_argmax(pair, i) {
            rows += 1;
            if nearest(&pair.features_b, pair.features_a.row(i)) == j {
                hits += 1;
            }
        }
    }
    (hits, rows)
}

#[test]
fn noise_free_features_recover_the_assignment() {
    let cfg = SceneConfig {
        feature_noise_sigma: 0.0,
        distractor_count: 0,
        seed: 21,
        ..SceneConfig::default()
    };
    let mut total = 0;
    for pair in dataset(&cfg, 0, 100) {
        let (hits, rows) = nn_hits(&pair.unwrap(), true);
        assert_eq!(hits, rows);
        total += rows;
    }
    assert!(total > 1000);
}

#[test]
fn noise_degrades_nearest_neighbour_accuracy() {
    let sigmas = [0.0, 0.5, 1.0, 2.0, 4.0];
    let accuracy: Vec<f64> = sigmas
        .iter()
        .map(|&s| {
            let cfg = SceneConfig {
                feature_noise_sigma: s,
                seed: 4,
                ..SceneConfig::default()
            };
            let (mut hits, mut rows) = (0, 0);
            for pair in dataset(&cfg, 0, 100) {
                let (h, r) = nn_hits(&pair.unwrap(), false);
                hits += h;
                rows += r;
            }
            hits as f64 / rows as f64
        })
        .collect();
    assert!(accuracy.windows(2).all(|w| w[1] <= w[0]), "{accuracy:?}");
    assert!(accuracy[0] > 0.99 && accuracy[4] < 0.5, "{accuracy:?}");
}

#[test]
fn every_pair_is_valid_and_consistent() {
    let cfg = SceneConfig::repetitive();
    for k in 0..50 {
        let pair = generate_indexed(&cfg, k).unwrap();
        assert!(pair.gt.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(pair.gt, gt_matrix(&pair.areas_a, &pair.areas_b, &pair.field));
        for a in pair.areas_a.areas().iter().chain(pair.areas_b.areas()) {
            assert!(a.x0 >= 0.0 && a.y0 >= 0.0 && a.x1 <= cfg.image_w && a.y1 <= cfg.image_h);
        }
        let b = pair.areas_b.areas();
        for (x, y) in b.iter().zip(b.iter().skip(1)) {
            assert!(rect_iou(x, y) < 1.0);
        }
    }
}
