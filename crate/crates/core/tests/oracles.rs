//! Library results checked against naive re-implementations.

use icpmon::nonconformity::{mean_nll, softmax};
use icpmon::synthetic::{gaussian_mixture, tempered_logits, MixtureConfig};
use icpmon::{
    CalibratedMonitor, Dataset, LabelId, LogitVector, NonconformityFunction, NonconformityKind, Role,
};

fn mixture(n: usize, seed: u64, role: Role) -> Dataset {
    let cfg = MixtureConfig {
        classes: 3,
        dim: 5,
        separation: 2.0,
    };
    gaussian_mixture(&cfg, n, seed, role).unwrap()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]).powi(2);
    }
    acc
}

fn emb(ds: &Dataset, i: usize) -> &[f64] {
    ds.examples[i].features.embedding.as_ref().unwrap().as_slice()
}

/// Brute-force scores straight from the definitions.
fn naive_score(kind: NonconformityKind, train: &Dataset, x: &[f64], y: usize, k: usize) -> f64 {
    let mut by_dist: Vec<(f64, usize, usize)> = train
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| (squared_distance(emb(train, i), x), i, e.label.0))
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ratio = |a: f64, b: f64| if b == 0.0 { f64::INFINITY } else { a / b };
    match kind {
        NonconformityKind::Knn => by_dist[..k].iter().filter(|h| h.2 != y).count() as f64,
        NonconformityKind::OneNn => {
            let same = by_dist.iter().find(|h| h.2 == y).unwrap().0.sqrt();
            let other = by_dist.iter().find(|h| h.2 != y).unwrap().0.sqrt();
            ratio(same, other)
        }
        NonconformityKind::NearestCentroid => {
            let dists: Vec<f64> = (0..train.classes())
                .map(|c| {
                    let members: Vec<&[f64]> = (0..train.len())
                        .filter(|&i| train.examples[i].label.0 == c)
                        .map(|i| emb(train, i))
                        .collect();
                    let mean: Vec<f64> = (0..x.len())
                        .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                        .collect();
                    squared_distance(&mean, x).sqrt()
                })
                .collect();
            let other = (0..dists.len()).filter(|&c| c != y).map(|c| dists[c]).fold(f64::INFINITY, f64::min);
            ratio(dists[y], other)
        }
        _ => unreachable!(),
    }
}

#[test]
fn embedding_scores_match_brute_force() {
    let train = mixture(300, 1, Role::ProperTraining);
    let probe = mixture(60, 2, Role::Test);
    for kind in [NonconformityKind::Knn, NonconformityKind::OneNn, NonconformityKind::NearestCentroid] {
        let f = NonconformityFunction::fit(kind, Some(&train), None, 7).unwrap();
        for (i, ex) in probe.examples.iter().enumerate() {
            let got = f.score_all(&ex.features, 3).unwrap();
            for (y, score) in got.iter().enumerate() {
                let want = naive_score(kind, &train, emb(&probe, i), y, 7);
                let g = score.value();
                assert!(
                    (g - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "{kind} probe {i} label {y}: {g} vs {want}"
                );
            }
        }
    }
}

#[test]
fn p_values_match_counting_definition() {
    let train = mixture(200, 3, Role::ProperTraining);
    let calib = mixture(150, 4, Role::Calibration);
    let probe = mixture(40, 5, Role::Test);
    for kind in [NonconformityKind::Knn, NonconformityKind::Margin, NonconformityKind::OneNn] {
        let f = NonconformityFunction::fit(kind, Some(&train), None, 15).unwrap();
        let raw: Vec<f64> = calib
            .examples
            .iter()
            .map(|e| f.score(&e.features, e.label, 3).unwrap().value())
            .collect();
        let m = CalibratedMonitor::calibrate(f, &calib).unwrap();
        for ex in &probe.examples {
            let p = m.p_values(&ex.features).unwrap();
            for (y, pj) in p.iter().enumerate() {
                let s = m.function().score(&ex.features, LabelId(y), 3).unwrap().value();
                let count = raw.iter().filter(|a| **a >= s).count();
                assert_eq!(*pj, count as f64 / raw.len() as f64);
            }
        }
    }
}

#[test]
fn fitted_temperature_agrees_with_grid_scan() {
    for (t0, seed) in [(0.5, 10), (2.0, 11), (4.0, 12)] {
        let val = tempered_logits(5, 3000, t0, 1.0, seed).unwrap();
        let samples: Vec<(&LogitVector, LabelId)> = val
            .examples
            .iter()
            .map(|e| (e.features.logits.as_ref().unwrap(), e.label))
            .collect();
        // 1000-point log-spaced scan over the search range.
        let (lo, hi) = icpmon::nonconformity::TEMPERATURE_RANGE;
        let (best_t, best_nll) = (0..1000)
            .map(|i| {
                let t = lo * (hi / lo).powf(i as f64 / 999.0);
                (t, mean_nll(&samples, t))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let fitted = icpmon::nonconformity::fit_temperature(&val).unwrap();
        assert!(mean_nll(&samples, fitted) <= best_nll + 1e-9, "T0 = {t0}");
        assert!((fitted - best_t).abs() / best_t < 0.01, "{fitted} vs scan {best_t}");
    }
}

#[test]
fn mean_nll_matches_definition() {
    let val = tempered_logits(3, 50, 1.5, 0.7, 3).unwrap();
    let samples: Vec<(&LogitVector, LabelId)> = val
        .examples
        .iter()
        .map(|e| (e.features.logits.as_ref().unwrap(), e.label))
        .collect();
    let t = 1.3;
    let want = val
        .examples
        .iter()
        .map(|e| {
            let z: Vec<f64> = e.features.logits.as_ref().unwrap().0.iter().map(|v| v / t).collect();
            -softmax(&z).0[e.label.0].ln()
        })
        .sum::<f64>()
        / 50.0;
    assert!((mean_nll(&samples, t) - want).abs() < 1e-12);
}
