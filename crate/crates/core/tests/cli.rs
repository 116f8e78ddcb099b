use std::path::Path;

use usnn::cli::{main_with_args, EXIT_DATA, EXIT_OK, EXIT_USAGE};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("usnn").chain(args.iter().copied());
    let code = main_with_args(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: [&str; 14] = [
    "--repetitions", "2", "--passes", "8", "--epochs", "4", "--meta-epochs", "4", "--base-hidden", "12", "--meta-hidden", "6",
    "--seed", "5",
];

fn synth(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("d.csv");
    let r = run(&["synth", "--n", "240", "--d", "4", "--sep", "1.5", "--seed", "2", "--out", p(&data)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    data
}

#[test]
fn synth_writes_features_plus_label() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let r = run(&["synth", "--n", "2000", "--d", "16", "--sep", "2.0", "--seed", "7", "--out", p(&data)]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.out.starts_with("config:") && r.out.contains("master seed: 7"));
    let mut rd = csv::Reader::from_path(&data).unwrap();
    assert_eq!(rd.headers().unwrap().len(), 17);
    assert_eq!(&rd.headers().unwrap()[16], "label");
    assert_eq!(rd.records().count(), 2000);
}

#[test]
fn help_and_version_exit_zero() {
    for sub in ["synth", "train", "evaluate", "sweep", "ablate", "report"] {
        let r = run(&[sub, "--help"]);
        assert_eq!(r.code, EXIT_OK, "{sub}");
        assert!(r.out.contains("--out") || r.out.contains("--model"), "{sub}: {}", r.out);
    }
    let r = run(&["sweep", "--help"]);
    for flag in ["--config", "--data", "--uq", "--passes", "--taus", "--threads", "--no-pe", "--format", "--evaluation-tau"] {
        assert!(r.out.contains(flag), "sweep help lacks {flag}");
    }
    let r = run(&["--version"]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.out.starts_with("usnn "));
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["frobnicate"][..], &["sweep", "--bogus", "x"], &["sweep"], &[], &["sweep", "--uq", "bayes", "--out", "x"]] {
        let r = run(args);
        assert_eq!(r.code, EXIT_USAGE, "{args:?}");
        assert!(!r.err.is_empty());
    }
}

#[test]
fn data_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.json");
    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["sweep", "--config", p(&missing), "--out", p(&out)]).code, EXIT_DATA);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"taus":[0.4,0.1]}"#).unwrap();
    let r = run(&["sweep", "--config", p(&bad), "--out", p(&out)]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("increasing"));

    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "a,label\n1.0,0\n2.0,7\n").unwrap();
    let r = run(&["sweep", "--data", p(&csv), "--out", p(&out)]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("label"));
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let model = dir.path().join("m.json");
    let mut args = vec!["train", "--data", p(&data), "--tau", "0.8", "--out", p(&model)];
    args.extend(FAST);
    let r = run(&args);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("config:") && r.out.contains("master seed: 5"));
    let first = std::fs::read(&model).unwrap();
    assert_eq!(run(&args).code, EXIT_OK);
    assert_eq!(std::fs::read(&model).unwrap(), first);

    let outputs = dir.path().join("o.csv");
    let r = run(&["evaluate", "--model", p(&model), "--data", p(&data), "--out", p(&outputs)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    for needle in ["TT", "FU", "CAR", "RAR", "FRR"] {
        assert!(r.out.contains(needle), "missing {needle} in\n{}", r.out);
    }
    assert_eq!(csv::Reader::from_path(&outputs).unwrap().records().count(), 240);
}

#[test]
fn sweep_ablate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let sweep = dir.path().join("s.json");
    let mut args = vec!["sweep", "--data", p(&data), "--out", p(&sweep)];
    args.extend(FAST);
    assert_eq!(run(&args).code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sweep).unwrap()).unwrap();
    let taus: Vec<f64> = v["reports"].as_array().unwrap().iter().map(|r| r["config"]["taus"][0].as_f64().unwrap()).collect();
    assert_eq!(taus, vec![0.05, 0.1, 0.2, 0.3, 0.4]);

    let csv_out = dir.path().join("s.csv");
    assert_eq!(run(&["report", "--input", p(&sweep), "--out", p(&csv_out)]).code, EXIT_OK);
    assert_eq!(csv::Reader::from_path(&csv_out).unwrap().records().count(), 2 * 5);

    let ablate = dir.path().join("a.csv");
    let mut args = vec!["ablate", "--data", p(&data), "--taus", "0.3", "--format", "csv", "--out", p(&ablate)];
    args.extend(FAST);
    assert_eq!(run(&args).code, EXIT_OK);
    let mut rd = csv::Reader::from_path(&ablate).unwrap();
    let arms: Vec<String> = rd.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(arms, ["with_pe", "with_pe", "without_pe", "without_pe"]);
}
