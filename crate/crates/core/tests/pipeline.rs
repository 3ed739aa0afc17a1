use icpmon::evaluation::{calibration_curve, evaluate};
use icpmon::io;
use icpmon::synthetic::{gaussian_mixture, MixtureConfig};
use icpmon::{
    CalibratedMonitor, Dataset, EpsilonGrid, InclusionRule, NonconformityFunction, NonconformityKind,
    Role, SignificanceLevel, Verdict,
};

const CFG: MixtureConfig = MixtureConfig {
    classes: 4,
    dim: 8,
    separation: 2.5,
};

struct Data {
    train: Dataset,
    calib: Dataset,
    validation: Dataset,
    test: Dataset,
}

fn data() -> Data {
    Data {
        train: gaussian_mixture(&CFG, 800, 1, Role::ProperTraining).unwrap(),
        calib: gaussian_mixture(&CFG, 400, 2, Role::Calibration).unwrap(),
        validation: gaussian_mixture(&CFG, 300, 3, Role::Validation).unwrap(),
        test: gaussian_mixture(&CFG, 2000, 4, Role::Test).unwrap(),
    }
}

fn monitor(d: &Data, kind: NonconformityKind) -> CalibratedMonitor {
    let f = NonconformityFunction::fit(kind, Some(&d.train), Some(&d.validation), 15).unwrap();
    CalibratedMonitor::calibrate(f, &d.calib).unwrap()
}

fn eps(v: f64) -> SignificanceLevel {
    SignificanceLevel::new(v).unwrap()
}

#[test]
fn every_function_is_valid_on_a_mixture() {
    let d = data();
    let levels = [eps(0.05), eps(0.1), eps(0.2)];
    for kind in NonconformityKind::ALL {
        let m = monitor(&d, kind);
        let report = evaluate(&m, &d.test, &levels).unwrap();
        for row in &report.rows {
            let e = row.epsilon;
            let bound = e + 3.0 * (e * (1.0 - e) / d.test.len() as f64).sqrt();
            assert!(row.error_rate <= bound, "{kind} at {e}: {}", row.error_rate);
            let total = row.empty_rate + row.single_rate + row.multiple_rate;
            assert!((total - 1.0).abs() < 1e-12);
        }
        let last = report.cumulative_errors.last().unwrap();
        assert_eq!(last.errors.len(), d.test.len());
        assert_eq!(
            *last.errors.last().unwrap() as f64 / d.test.len() as f64,
            report.rows.last().unwrap().error_rate
        );
    }
}

#[test]
fn estimated_epsilon_removes_rejects_on_validation() {
    let d = data();
    for kind in NonconformityKind::ALL {
        let m = monitor(&d, kind);
        let e = m.estimate_epsilon(&d.validation).unwrap();
        let rejects = d
            .validation
            .examples
            .iter()
            .filter(|ex| m.predict_set(&ex.features, e).unwrap().verdict == Verdict::Reject)
            .count();
        assert_eq!(rejects, 0, "{kind}");
        let lower = e.value() - 1.0 / m.calibration_size() as f64;
        if lower > 0.0 {
            let rejects = d
                .validation
                .examples
                .iter()
                .filter(|ex| m.predict_set(&ex.features, eps(lower)).unwrap().verdict == Verdict::Reject)
                .count();
            assert!(rejects >= 1, "{kind}");
        }
    }
}

#[test]
fn curve_is_monotone() {
    let d = data();
    let m = monitor(&d, NonconformityKind::Knn);
    let curve = calibration_curve(&m, &d.test, &EpsilonGrid::default()).unwrap();
    assert_eq!(curve.len(), 100);
    for w in curve.windows(2) {
        assert!(w[1].multiple_rate <= w[0].multiple_rate);
        assert!(w[1].error_rate >= w[0].error_rate);
    }
}

#[test]
fn persisted_monitors_agree_bit_for_bit() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    for kind in NonconformityKind::ALL {
        let m = monitor(&d, kind).with_inclusion(InclusionRule::Weak);
        let path = dir.path().join(format!("{kind}.bin"));
        io::save_monitor(&m, &path).unwrap();
        let back = io::load_monitor(&path).unwrap();
        assert_eq!(back.inclusion(), InclusionRule::Weak);
        for ex in d.test.examples.iter().take(200) {
            let a = m.p_values(&ex.features).unwrap();
            let b = back.p_values(&ex.features).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{kind}");
        }
    }
}

#[test]
fn csv_round_trip_preserves_calibration() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = ["train", "calib"].iter().map(|n| dir.path().join(format!("{n}.csv"))).collect();
    io::write_feature_file(&d.train, &paths[0]).unwrap();
    io::write_feature_file(&d.calib, &paths[1]).unwrap();
    let train = io::load_feature_file(&paths[0], Role::ProperTraining).unwrap();
    let calib = io::load_feature_file(&paths[1], Role::Calibration).unwrap();
    assert_eq!(train.len(), d.train.len());
    // Values survive to 9 significant digits.
    for (a, b) in train.examples.iter().zip(&d.train.examples) {
        let (x, y) = (a.features.embedding.as_ref().unwrap(), b.features.embedding.as_ref().unwrap());
        for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((u - v).abs() <= 5e-9 * v.abs());
        }
    }
    let f = NonconformityFunction::fit(NonconformityKind::Knn, Some(&train), None, 15).unwrap();
    let m = CalibratedMonitor::calibrate(f, &calib).unwrap();
    assert_eq!(m.calibration_size(), 400);
}

#[test]
fn wrong_feature_kind_is_reported() {
    let d = data();
    let m = monitor(&d, NonconformityKind::Knn);
    let logits_only = icpmon::Features::from_logits(vec![0.0; 4]);
    assert!(matches!(
        m.p_values(&logits_only),
        Err(icpmon::Error::FeatureMissing(icpmon::FeatureKind::Embedding))
    ));
}
