use std::path::Path;
use std::process::{Command, Output};

use momentflow::linear::AffineLayer;
use momentflow::network::{
    load_moments, load_network, save_moments, save_network, LayerSpec, NetworkMeta, NetworkSpec,
};
use momentflow::GaussianMoments;
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momentflow"))
        .args(args)
        .output()
        .unwrap()
}

fn run_threads(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momentflow"))
        .args(args)
        .env("MOMENTFLOW_THREADS", threads)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cov_zero_correlation_is_zero() {
    let v = json(&run(&[
        "cov", "--kind", "relu", "--mu", "0", "0", "--sigma", "1", "1", "--rho", "0", "--order", "4", "--json",
    ]));
    assert_eq!(v["schema"], "momentflow-cli/1");
    assert_eq!(v["series"].as_f64().unwrap(), 0.0);
}

#[test]
fn cov_heaviside_with_oracle() {
    let v = json(&run(&[
        "cov",
        "--kind",
        "heaviside",
        "--mu",
        "0",
        "0",
        "--sigma",
        "1",
        "1",
        "--rho",
        "0.5",
        "--order",
        "12",
        "--oracle",
        "--json",
    ]));
    let series = v["series"].as_f64().unwrap();
    let oracle = v["oracle"].as_f64().unwrap();
    assert!((oracle - 1.0 / 12.0).abs() <= 1e-6);
    assert!((series - 1.0 / 12.0).abs() <= 2e-4);
    assert!(v["abs_error"].as_f64().unwrap() <= 2e-4);
}

#[test]
fn domain_and_usage_errors_exit_2() {
    assert_eq!(code(&run(&["cov", "--kind", "relu", "--rho", "1.5"])), 2);
    assert_eq!(code(&run(&["cov", "--kind", "swish", "--rho", "0.5"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["error-grid", "--orders", "4,2"])), 2);
    assert_eq!(code(&run_threads(&["cov", "--rho", "0.1"], "zero")), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_or_corrupt_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.mfm");
    let missing = dir.path().join("missing.mfn");
    let input = dir.path().join("in.mfm");
    assert_eq!(code(&run(&["gen-input", "--dim", "3", "--output", s(&input)])), 0);
    assert_eq!(
        code(&run(&[
            "propagate",
            "--net",
            s(&missing),
            "--input",
            s(&input),
            "--output",
            s(&out)
        ])),
        3
    );
    // An input-moments file is not a network.
    assert_eq!(
        code(&run(&[
            "propagate",
            "--net",
            s(&input),
            "--input",
            s(&input),
            "--output",
            s(&out)
        ])),
        3
    );
}

fn identity_net(n: usize) -> NetworkSpec {
    let eye = LayerSpec::Dense(AffineLayer::new(DMatrix::identity(n, n), DVector::zeros(n)).unwrap());
    NetworkSpec::new(n, vec![eye], NetworkMeta::default())
}

#[test]
fn cholesky_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("id.mfn");
    let input = dir.path().join("in.mfm");
    save_network(&identity_net(2), &net).unwrap();
    let indefinite =
        GaussianMoments::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 1.1, 1.1, 1.0])).unwrap();
    save_moments(&indefinite, &input).unwrap();
    let out = dir.path().join("out.mfm");
    let base = [
        "propagate",
        "--net",
        s(&net),
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--mc",
        "100",
    ];
    assert_eq!(code(&run(&[&base[..], &["--mc-repair", "none"]].concat())), 4);
    assert_eq!(code(&run(&base)), 0);
}

#[test]
fn identity_network_output_equals_input() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("id.mfn");
    let input = dir.path().join("in.mfm");
    let out = dir.path().join("out.mfm");
    save_network(&identity_net(5), &net).unwrap();
    assert_eq!(
        code(&run(&["gen-input", "--dim", "5", "--seed", "3", "--output", s(&input)])),
        0
    );
    let v = json(&run(&[
        "propagate",
        "--net",
        s(&net),
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--json",
    ]));
    assert_eq!(v["command"], "propagate");
    assert_eq!(load_moments(&out).unwrap(), load_moments(&input).unwrap());
}

#[test]
fn gen_net_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mfn");
    let b = dir.path().join("b.mfn");
    for p in [&a, &b] {
        let v = json(&run(&[
            "gen-net",
            "--family",
            "fc",
            "--depth",
            "4",
            "--seed",
            "7",
            "--output",
            s(p),
            "--json",
        ]));
        assert_eq!(v["schema"], "momentflow-cli/1");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let net = load_network(&a).unwrap();
    assert_eq!(
        net.layers.iter().filter(|l| matches!(l, LayerSpec::Dense(_))).count(),
        4
    );
    assert_eq!(net.input_dim, 100);
    assert_eq!(
        code(&run(&["gen-net", "--family", "fc", "--depth", "0", "--output", s(&a)])),
        2
    );
}

#[test]
fn every_command_reports_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("n.mfn");
    let input = dir.path().join("i.mfm");
    let out = dir.path().join("o.mfm");
    let runs: Vec<Vec<String>> = vec![
        vec!["cov".into(), "--rho".into(), "0.3".into()],
        vec![
            "error-grid".into(),
            "--orders".into(),
            "1".into(),
            "--step".into(),
            "1".into(),
        ],
        vec![
            "gen-net".into(),
            "--family".into(),
            "cnn".into(),
            "--depth".into(),
            "1".into(),
            "--width".into(),
            "2".into(),
            "--output".into(),
            s(&net).into(),
        ],
        vec![
            "gen-input".into(),
            "--dim".into(),
            "400".into(),
            "--output".into(),
            s(&input).into(),
        ],
        vec![
            "propagate".into(),
            "--net".into(),
            s(&net).into(),
            "--input".into(),
            s(&input).into(),
            "--output".into(),
            s(&out).into(),
        ],
        vec![
            "tightness".into(),
            "--net".into(),
            s(&net).into(),
            "--trials".into(),
            "2".into(),
            "--samples".into(),
            "200".into(),
        ],
    ];
    for args in runs {
        let mut args: Vec<&str> = args.iter().map(String::as_str).collect();
        args.push("--json");
        let v = json(&run(&args));
        assert_eq!(v["schema"], "momentflow-cli/1", "{args:?}");
        assert_eq!(v["command"], args[0]);
    }
}

#[test]
fn tightness_records_budget_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let js = dir.path().join("t.json");
    let v = json(&run(&[
        "tightness",
        "--preset",
        "fc4",
        "--trials",
        "3",
        "--samples",
        "500",
        "--seed",
        "5",
        "--csv",
        s(&csv),
        "--json-out",
        s(&js),
        "--json",
    ]));
    assert_eq!(v["meta"]["trials"], 3);
    assert_eq!(v["meta"]["samples"], 500);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("output_index,q_mu_mean,q_mu_std,q_var_mean,q_var_std,excluded_trials"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&js).unwrap()).unwrap();
    assert_eq!(report["schema"], "momentflow-tightness/1");
}

fn run_all_seeded(dir: &Path, threads: &str) {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "gen-net",
            "--family",
            "fc",
            "--depth",
            "4",
            "--width",
            "20",
            "--seed",
            "11",
            "--output",
            &p("net.mfn"),
        ],
        vec!["gen-input", "--dim", "20", "--seed", "4", "--output", &p("in.mfm")],
        vec![
            "propagate",
            "--net",
            &p("net.mfn"),
            "--input",
            &p("in.mfm"),
            "--output",
            &p("out.mfm"),
            "--trace",
            &p("trace.mft"),
        ],
        vec![
            "tightness",
            "--preset",
            "fc4",
            "--trials",
            "4",
            "--samples",
            "3000",
            "--seed",
            "9",
            "--csv",
            &p("t.csv"),
            "--json-out",
            &p("t.json"),
        ],
        vec![
            "error-grid",
            "--kind",
            "gelu",
            "--orders",
            "1,3",
            "--step",
            "0.5",
            "--csv",
            &p("grid.csv"),
            "--cells-dir",
            &p("cells"),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(|a| a.to_string()).collect())
    .collect();
    for args in steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = run_threads(&args, threads);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut all = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("cells")] {
        let mut names: Vec<_> = std::fs::read_dir(&sub)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for n in names {
            all.push((
                n.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&n).unwrap(),
            ));
        }
    }
    all
}

#[test]
fn seeded_outputs_are_bit_identical_across_runs_and_thread_counts() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    run_all_seeded(dirs[0].path(), "4");
    run_all_seeded(dirs[1].path(), "4");
    run_all_seeded(dirs[2].path(), "1");
    let a = files(dirs[0].path());
    assert_eq!(a.len(), 9);
    assert_eq!(a, files(dirs[1].path()));
    assert_eq!(a, files(dirs[2].path()));
}
