use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fuzzboost::cli::{ExperimentConfig, ModelArtifact};

const SMALL: &[&str] = &[
    "synthetic_count=300",
    "synthetic_min=0",
    "synthetic_max=20",
    "clusters=2,3",
    "fuzzifiers=1.5,2.0",
    "max_stages=4",
];

fn fuzzboost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuzzboost"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fit_small(dir: &Path, extra: &[&str]) -> Output {
    let out = format!("output_dir={}", dir.display());
    let mut args = vec!["fit", "--set", &out];
    for s in SMALL.iter().chain(extra) {
        args.push("--set");
        args.push(s);
    }
    fuzzboost(&args)
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) {
    let mut text = format!("{header}\n");
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn parse_column(text: &str, column: usize) -> Vec<f64> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(column).unwrap().parse().unwrap())
        .collect()
}

fn probe_points(n: usize) -> Vec<f64> {
    (0..n).map(|i| -2.0 + 24.0 * i as f64 / (n - 1) as f64).collect()
}

#[test]
fn fit_then_predict_matches_the_in_memory_model_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit_small(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("stages accepted"));

    let model = dir.path().join("model.json");
    let artifact = ModelArtifact::load(&model).unwrap();
    assert!(!artifact.ensemble.stages.is_empty());

    let xs = probe_points(1000);
    let input = dir.path().join("probe.csv");
    write_csv(&input, "x", &xs.iter().map(|&x| vec![x]).collect::<Vec<_>>());
    let out = fuzzboost(&["predict", "--model", model.to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert!(out.status.success());
    let predicted = parse_column(&String::from_utf8(out.stdout).unwrap(), 0);
    assert_eq!(predicted.len(), 1000);
    for (x, p) in xs.iter().zip(&predicted) {
        assert_eq!(artifact.ensemble.predict(&[*x]).unwrap().to_bits(), p.to_bits());
    }

    let resaved = dir.path().join("again.json");
    artifact.save(&resaved).unwrap();
    assert_eq!(fs::read(&model).unwrap(), fs::read(&resaved).unwrap());
}

#[test]
fn columns_are_matched_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let a = i as f64 / 20.0;
            let b = ((i * 37) % 200) as f64 / 40.0;
            vec![a, b, a.sin() + 0.5 * b]
        })
        .collect();
    write_csv(&data, "a,b,target", &rows);
    let out = fuzzboost(&[
        "fit",
        "--set",
        &format!("dataset={}", data.display()),
        "--set",
        &format!("output_dir={}", dir.path().display()),
        "--set",
        "clusters=2,3",
        "--set",
        "fuzzifiers=2.0",
        "--set",
        "max_stages=3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = dir.path().join("model.json");

    let ordered = dir.path().join("ordered.csv");
    let swapped = dir.path().join("swapped.csv");
    write_csv(&ordered, "a,b", &rows.iter().map(|r| vec![r[0], r[1]]).collect::<Vec<_>>());
    write_csv(&swapped, "extra,b,a", &rows.iter().map(|r| vec![9.0, r[1], r[0]]).collect::<Vec<_>>());
    let run = |p: &PathBuf| fuzzboost(&["predict", "--model", model.to_str().unwrap(), "--input", p.to_str().unwrap()]);
    let first = run(&ordered);
    let second = run(&swapped);
    assert!(first.status.success() && second.status.success());
    assert_eq!(first.stdout, second.stdout);

    let eval = fuzzboost(&["evaluate", "--model", model.to_str().unwrap(), "--input", data.to_str().unwrap()]);
    assert!(eval.status.success());
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["raw"]["n"], 200);
    assert!(report["standardized"]["rmse"].as_f64().unwrap() < 1.0);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(fit_small(a.path(), &["seed=3"]).status.success());
    assert!(fit_small(b.path(), &["seed=3"]).status.success());
    for file in ["model.json", "trace.csv"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
    }
}

#[test]
fn zero_stages_predict_the_training_mean() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fit_small(dir.path(), &["max_stages=0"]).status.success());
    let artifact = ModelArtifact::load(&dir.path().join("model.json")).unwrap();
    assert!(artifact.ensemble.stages.is_empty());

    let config = ExperimentConfig::parse(&SMALL.join("\n"), &[]).unwrap();
    let data = config.load_dataset().unwrap();
    let train = &artifact.splits.unwrap().train;
    let mean = train.iter().map(|&i| data.targets()[i]).sum::<f64>() / train.len() as f64;
    for x in [-5.0, 3.0, 40.0] {
        assert!((artifact.ensemble.predict(&[x]).unwrap() - mean).abs() < 1e-9);
    }
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn explain_columns_decompose_the_stage_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fit_small(dir.path(), &[]).status.success());
    let model = dir.path().join("model.json");
    let artifact = ModelArtifact::load(&model).unwrap();
    let ens = &artifact.ensemble;
    let stage = ens.largest_lambda_stage().unwrap();
    let rules = ens.stages[stage].model.rules();

    let input = dir.path().join("probe.csv");
    let xs = probe_points(25);
    write_csv(&input, "x", &xs.iter().map(|&x| vec![x]).collect::<Vec<_>>());
    let out = fuzzboost(&["predict", "--model", model.to_str().unwrap(), "--input", input.to_str().unwrap(), "--explain"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), 1 + 3 * rules);
    let mut z = vec![0.0];
    for (line, x) in text.lines().skip(1).zip(&xs) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let memberships: f64 = (0..rules).map(|r| cells[1 + 3 * r]).sum();
        let contributions: f64 = (0..rules).map(|r| cells[3 + 3 * r]).sum();
        ens.scaler.transform_point(&[*x], &mut z);
        assert!((memberships - 1.0).abs() < 1e-9);
        assert!((contributions - ens.stages[stage].model.predict(&z)).abs() < 1e-9);
    }
}

#[test]
fn header_only_input_gives_header_only_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fit_small(dir.path(), &[]).status.success());
    let input = dir.path().join("empty.csv");
    fs::write(&input, "x\n").unwrap();
    let model = dir.path().join("model.json");
    let out = fuzzboost(&["predict", "--model", model.to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "prediction\n");
}

#[test]
fn input_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fit_small(dir.path(), &[]).status.success());
    let model = dir.path().join("model.json");
    let model = model.to_str().unwrap();

    let missing = fuzzboost(&["predict", "--model", model, "--input", "/nonexistent/in.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/in.csv"));

    let wrong = dir.path().join("wrong.csv");
    fs::write(&wrong, "u,v\n1,2\n").unwrap();
    let out = fuzzboost(&["predict", "--model", model, "--input", wrong.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x\n1\nabc\n").unwrap();
    let out = fuzzboost(&["predict", "--model", model, "--input", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(fuzzboost(&["fit", "--set", "colour=red"]).status.code(), Some(2));
    assert_eq!(fuzzboost(&["fit", "--set", "clusters"]).status.code(), Some(2));

    let tampered = dir.path().join("tampered.json");
    let text = fs::read_to_string(model).unwrap().replacen("\"target_name\": \"y\"", "\"target_name\": \"q\"", 1);
    fs::write(&tampered, text).unwrap();
    let out = fuzzboost(&["predict", "--model", tampered.to_str().unwrap(), "--input", wrong.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = fit_small(&blocker.join("sub"), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fixed_lambda_experiment_writes_one_trace_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.conf");
    fs::write(
        &config,
        format!(
            "# fixed versus dynamic\nmode = fixed\n{}\nfixed_lambdas = 0.5,1.0\noutput_dir = {}\n",
            SMALL.join("\n"),
            dir.path().display()
        ),
    )
    .unwrap();
    let out = fuzzboost(&["experiment", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["trace_fixed_0.5.csv", "trace_fixed_1.csv", "trace_dynamic.csv", "summary.json"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let fixed = fs::read_to_string(dir.path().join("trace_fixed_0.5.csv")).unwrap();
    assert_eq!(fixed.lines().count(), 1 + 1 + 4);
    assert!(fixed.lines().skip(2).all(|l| l.split(',').nth(5) == Some("0.5")));
}

#[test]
fn sweep_experiment_reports_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = fuzzboost(&[
        "experiment",
        "--set",
        "mode=sweep",
        "--set",
        "synthetic_count=200",
        "--set",
        "synthetic_max=20",
        "--set",
        "sweep_clusters=2:3",
        "--set",
        "sweep_fuzzifiers=1.5,2.5",
        "--set",
        "max_stages=3",
        "--set",
        &format!("output_dir={}", dir.path().display()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("clusters,fuzzifier,method,test_rmse"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 2 * 2);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "sweep");
    assert_eq!(summary["improvement"]["cells"], 4);
}

#[test]
fn synth_writes_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("nested/synth.csv");
    let out = fuzzboost(&["synth", "--count", "5", "--min", "1", "--max", "5", "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 6);
    let x = parse_column(&text, 0);
    let y = parse_column(&text, 1);
    assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    for (x, y) in x.iter().zip(&y) {
        let expected = x.sin() + (x / 2.0).sqrt() + (x / 15.0).exp();
        assert!((y - expected).abs() < 1e-12);
    }
}
