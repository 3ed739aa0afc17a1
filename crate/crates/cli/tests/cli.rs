use std::path::{Path, PathBuf};

use icpmon::synthetic::{gaussian_mixture, MixtureConfig};
use icpmon::{io, Role, SignificanceLevel};
use icpmon_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str], stdin: &str) -> Out {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut input = stdin.as_bytes();
    let code = run(std::iter::once("icpmon").chain(args.iter().copied()), &mut input, &mut out, &mut err);
    Out {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = MixtureConfig {
        classes: 3,
        dim: 4,
        separation: 2.0,
    };
    for (name, n, seed) in [("train", 300, 1), ("calib", 120, 2), ("validation", 100, 3), ("test", 80, 4)] {
        let ds = gaussian_mixture(&cfg, n, seed, Role::Test).unwrap();
        io::write_feature_file(&ds, root.join(format!("{name}.csv"))).unwrap();
    }
    Fixture { _dir: dir, root }
}

fn calibrate(f: &Fixture, kind: &str) -> String {
    let out = f.path(&format!("{kind}.bin"));
    let r = cli(
        &[
            "calibrate", "--fn", kind, "--train", &f.path("train.csv"), "--calib", &f.path("calib.csv"),
            "--validation", &f.path("validation.csv"), "--out", &out,
        ],
        "",
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    out
}

#[test]
fn calibrate_writes_artifact() {
    let f = fixture();
    let r = cli(
        &["calibrate", "--fn", "knn", "--k", "15", "--train", &f.path("train.csv"), "--calib", &f.path("calib.csv"), "--out", &f.path("m.bin")],
        "",
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(Path::new(&f.path("m.bin")).exists());
    let summary: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(summary["calibration_size"], 120);
    assert_eq!(summary["k"], 15);
    let m = io::load_monitor(f.path("m.bin")).unwrap();
    assert_eq!(m.function().index().unwrap().len(), 300);
}

#[test]
fn predict_matches_library() {
    let f = fixture();
    let m = calibrate(&f, "centroid");
    let r = cli(&["predict", "--monitor", &m, "--input", &f.path("test.csv"), "--epsilon", "0.1"], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);

    let monitor = io::load_monitor(&m).unwrap();
    let test = io::load_feature_file(f.path("test.csv"), Role::Test).unwrap();
    let mut lines = r.stdout.lines();
    assert_eq!(lines.next().unwrap(), "id,verdict,set,p0,p1,p2");
    for (line, ex) in lines.zip(&test.examples) {
        let want = monitor.predict_set(&ex.features, SignificanceLevel::new(0.1).unwrap()).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], ex.id);
        assert_eq!(fields[1], want.verdict.to_string());
        let set: Vec<usize> = fields[2].split(';').filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect();
        assert_eq!(set, want.set.iter().map(|l| l.0).collect::<Vec<_>>());
        let p: Vec<f64> = fields[3..].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(p, want.p_values);
    }
}

#[test]
fn estimate_epsilon_matches_library() {
    let f = fixture();
    for kind in ["knn", "ts-brier"] {
        let m = calibrate(&f, kind);
        let r = cli(&["estimate-epsilon", "--monitor", &m, "--validation", &f.path("validation.csv")], "");
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
        let printed: f64 = r.stdout.trim().parse().unwrap();
        let monitor = io::load_monitor(&m).unwrap();
        let val = io::load_feature_file(f.path("validation.csv"), Role::Validation).unwrap();
        assert_eq!(printed, monitor.estimate_epsilon(&val).unwrap().value());
    }
}

#[test]
fn auto_epsilon_needs_validation() {
    let f = fixture();
    let m = calibrate(&f, "hinge");
    let r = cli(&["predict", "--monitor", &m, "--input", &f.path("test.csv"), "--epsilon", "auto"], "");
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("--validation"));
    let r = cli(
        &["predict", "--monitor", &m, "--input", &f.path("test.csv"), "--epsilon", "auto", "--validation", &f.path("validation.csv")],
        "",
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
}

#[test]
fn usage_errors_exit_2() {
    let f = fixture();
    for args in [
        vec!["calibrate", "--fn", "knn", "--bogus"],
        vec!["calibrate", "--fn", "nope", "--calib", "x", "--out", "y"],
        vec!["predict", "--monitor", "m", "--input", "i", "--epsilon", "1.5"],
        vec!["frobnicate"],
    ] {
        assert_eq!(cli(&args, "").code, EXIT_USAGE, "{args:?}");
    }
    let calib = f.path("calib.csv");
    let out = f.path("x.bin");
    let r = cli(&["calibrate", "--fn", "knn", "--calib", &calib, "--out", &out], "");
    assert_eq!(r.code, EXIT_USAGE);
    let r = cli(&["calibrate", "--fn", "margin", "--k", "3", "--calib", &calib, "--out", &out], "");
    assert_eq!(r.code, EXIT_USAGE);
    assert_eq!(cli(&["--help"], "").code, EXIT_OK);
}

#[test]
fn data_errors_exit_1() {
    let f = fixture();
    let r = cli(&["estimate-epsilon", "--monitor", &f.path("missing.bin"), "--validation", &f.path("validation.csv")], "");
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.stderr.contains("missing.bin"));

    std::fs::write(f.root.join("bad.bin"), b"not a monitor").unwrap();
    let r = cli(&["estimate-epsilon", "--monitor", &f.path("bad.bin"), "--validation", &f.path("validation.csv")], "");
    assert_eq!(r.code, EXIT_DATA);

    std::fs::write(f.root.join("nan.csv"), "id,label,e0,e1,e2,e3\na,0,1,2,NaN,4\n").unwrap();
    let m = calibrate(&f, "knn");
    let r = cli(&["predict", "--monitor", &m, "--input", &f.path("nan.csv"), "--epsilon", "0.1"], "");
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.stderr.contains("nan.csv: line 2"), "{}", r.stderr);
}

#[test]
fn monitor_streams_and_isolates_bad_rows() {
    let f = fixture();
    let m = calibrate(&f, "1nn");
    let stdin = "id,label,e0,e1,e2,e3\n\
                 a,,2,0,0,0\n\
                 b,,1,2\n\
                 c,,0,0,2,0\n\
                 d,,0,inf,0,0\n";
    let r = cli(&["monitor", "--monitor", &m, "--epsilon", "0.05"], stdin);
    assert_eq!(r.code, EXIT_DATA);
    let rows: Vec<&str> = r.stdout.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("a,"));
    assert!(rows[2].starts_with("c,"));
    assert_eq!(r.stderr.lines().count(), 2);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);

    let clean = "id,label,e0,e1,e2,e3\na,,2,0,0,0\n";
    assert_eq!(cli(&["monitor", "--monitor", &m, "--epsilon", "0.05"], clean).code, EXIT_OK);
}

#[test]
fn evaluate_writes_tables() {
    let f = fixture();
    let m = calibrate(&f, "margin");
    let out = f.path("eval");
    let r = cli(
        &["evaluate", "--monitor", &m, "--test", &f.path("test.csv"), "--validation", &f.path("validation.csv"), "--out-dir", &out],
        "",
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let per = std::fs::read_to_string(f.root.join("eval/per_epsilon.csv")).unwrap();
    assert_eq!(per.lines().count(), 5);
    let curve = std::fs::read_to_string(f.root.join("eval/calibration_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 101);
    let cumulative = std::fs::read_to_string(f.root.join("eval/cumulative_error.csv")).unwrap();
    assert_eq!(cumulative.lines().count(), 1 + 4 * 80);
    let summary: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert!(summary["estimated_epsilon"]["epsilon"].as_f64().unwrap() > 0.0);
    assert!(summary["latency"].is_null());
}

#[test]
fn train_ref_and_extract() {
    let dir = tempfile::tempdir().unwrap();
    let raw: String = (0..120)
        .map(|i| {
            let c = ["Move-Forward", "Slight-Right-Turn", "Sharp-Right-Turn"][i % 3];
            let x = (i % 3) as f64;
            format!("{},{},{},{c}\n", x + (i as f64 * 0.37).sin() * 0.2, 1.0 - x, (i as f64).cos())
        })
        .collect();
    let data = dir.path().join("robot.data");
    std::fs::write(&data, raw).unwrap();
    let out = dir.path().join("ref");
    let r = cli(
        &["train-ref", "--data", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--epochs", "50", "--hidden", "6"],
        "",
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let summary: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(summary["labels"][0], "Move-Forward");
    assert_eq!(summary["hidden"], 6);
    let r = cli(
        &[
            "extract", "--model", out.join("model.bin").to_str().unwrap(), "--input",
            out.join("test.raw.csv").to_str().unwrap(),
        ],
        "",
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("#labels=[\"Move-Forward\""));
    let header = r.stdout.lines().find(|l| l.starts_with("id,")).unwrap();
    assert_eq!(header, "id,label,e0,e1,e2,e3,e4,e5,z0,z1,z2,p0,p1,p2");
}
