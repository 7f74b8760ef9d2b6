//! End-to-end runs of the `hmt` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hmt_flood::eval::MetricsReport;
use hmt_flood::raster_io::read_ascii_grid;
use hmt_flood::ModelParams;

fn hmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hmt(args);
    assert!(
        out.status.success(),
        "hmt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 40x40 single-modal scene written by `synth`.
fn scene(dir: &Path) -> PathBuf {
    let config = dir.join("scene.txt");
    fs::write(
        &config,
        "rows = 40\ncols = 40\nterrain = ridged\nobserve_fraction = 0.15\nseed = 3\n",
    )
    .unwrap();
    let out = dir.join("scene");
    ok(&["synth", "--config", p(&config), "--out-dir", p(&out)]);
    out
}

fn inputs(scene: &Path) -> Vec<String> {
    let s = |n: &str| scene.join(n).to_str().unwrap().to_string();
    vec![
        "--elevation".into(),
        s("elevation.asc"),
        "--features".into(),
        s("feature_1.asc"),
        "--features".into(),
        s("feature_2.asc"),
        "--features".into(),
        s("feature_3.asc"),
        "--train".into(),
        s("train.csv"),
        "--truth".into(),
        s("truth.asc"),
    ]
}

#[test]
fn synth_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path());
    for name in [
        "elevation.asc",
        "feature_1.asc",
        "feature_2.asc",
        "feature_3.asc",
        "truth.asc",
        "mask.asc",
        "train.csv",
        "planted_params.txt",
    ] {
        assert!(s.join(name).is_file(), "{name} missing");
    }
    let planted = ModelParams::read(&s.join("planted_params.txt")).unwrap();
    assert_eq!(planted.dim(), 3);
    let truth = read_ascii_grid(s.join("truth.asc")).unwrap();
    assert_eq!((truth.rows, truth.cols), (40, 40));
}

#[test]
fn run_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["run".to_string()];
    args.extend(inputs(&s));
    args.extend(["--out-dir".into(), p(&out).into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let stdout = ok(&argv);
    assert!(stdout.contains("avg F"));
    for name in ["classes.asc", "params.txt", "em_trace.csv", "metrics.txt", "metrics.csv", "manifest.txt"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let trace = fs::read_to_string(out.join("em_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,rho,pi,LL,max_delta"));

    let run_f = MetricsReport::parse_average_f(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    let eval_dir = dir.path().join("eval");
    ok(&[
        "eval",
        "--pred",
        p(&out.join("classes.asc")),
        "--truth",
        p(&s.join("truth.asc")),
        "--out-dir",
        p(&eval_dir),
    ]);
    let eval_f = MetricsReport::parse_average_f(&fs::read_to_string(eval_dir.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(run_f, eval_f);
    assert!(run_f > 0.9, "average F {run_f}");
}

#[test]
fn train_then_infer_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path());
    let base = inputs(&s);
    let call = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(base.iter().cloned());
        args.extend(extra.iter().map(|a| a.to_string()));
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&argv)
    };
    let run_dir = dir.path().join("run");
    let train_dir = dir.path().join("train");
    let infer_dir = dir.path().join("infer");
    call("run", &["--out-dir", p(&run_dir)]);
    call("train", &["--out-dir", p(&train_dir)]);
    let params = train_dir.join("params.txt");
    call("infer", &["--params", p(&params), "--out-dir", p(&infer_dir)]);
    assert_eq!(
        fs::read(run_dir.join("params.txt")).unwrap(),
        fs::read(&params).unwrap()
    );
    assert_eq!(
        fs::read(run_dir.join("classes.asc")).unwrap(),
        fs::read(infer_dir.join("classes.asc")).unwrap()
    );
}

#[test]
fn baselines_and_build_tree_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path());
    for method in ["em-iid", "lp-mlc"] {
        let out = dir.path().join(method);
        let mut args = vec!["baseline".to_string()];
        args.extend(inputs(&s));
        args.extend(["--method".into(), method.into(), "--out-dir".into(), p(&out).into()]);
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&argv);
        let classes = read_ascii_grid(out.join("classes.asc")).unwrap();
        assert!((0..classes.len()).all(|n| classes.class_at(n).is_some()));
    }
    let tree_dir = dir.path().join("tree");
    let stdout = ok(&["build-tree", "--elevation", p(&s.join("elevation.asc")), "--out-dir", p(&tree_dir)]);
    assert!(stdout.starts_with("nodes 1600 "));
    assert!(tree_dir.join("tree.txt").is_file());
}

#[test]
fn config_file_paths_are_relative_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path());
    let config = s.join("run.txt");
    fs::write(
        &config,
        "elevation = elevation.asc\nfeatures = feature_1.asc, feature_2.asc, feature_3.asc\n\
         train = train.csv\ntruth = truth.asc\nmax_iter = 1\nmethod = structure-single\n",
    )
    .unwrap();
    let out = dir.path().join("cfg");
    ok(&["run", "--config", p(&config), "--max-iter", "3", "--out-dir", p(&out)]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("max_iter = 3"), "{manifest}");
}

#[test]
fn k_flags_with_single_method_warn() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path());
    let mut args = vec!["run".to_string()];
    args.extend(inputs(&s));
    args.extend(["--k0".into(), "3".into(), "--out-dir".into(), p(&dir.path().join("w")).into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = hmt(&argv);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning:"));
}

#[test]
fn bad_invocations_fail_cleanly() {
    let out = hmt(&["run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = hmt(&["build-tree", "--elevation", "/nonexistent/dem.asc"]);
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path());
    let mut args = vec!["run".to_string()];
    args.extend(inputs(&s));
    args.extend(["--method".into(), "kmeans".into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(!hmt(&argv).status.success());
}
