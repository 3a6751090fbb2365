use std::ffi::OsStr;
use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"schema_version = 1
seed = 3

[synth]
dims = [32, 32, 32]
n_scenes = 8
n_true_lesions = 3
n_false_lesions = 2
t_samples = 6

[train]
epochs = 3
"#;

fn lesionuq<S: AsRef<OsStr>>(dir: &Path, args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionuq"))
        .current_dir(dir)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<OsStr> + Debug>(dir: &Path, args: &[S]) {
    let out = lesionuq(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    d
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    assert_same_tree_except(a, b, &[]);
}

fn assert_same_tree_except(a: &Path, b: &Path, skip: &[&str]) {
    let fa: Vec<PathBuf> = files_under(a)
        .into_iter()
        .filter(|f| !skip.iter().any(|s| f == Path::new(s)))
        .collect();
    let fb: Vec<PathBuf> = files_under(b)
        .into_iter()
        .filter(|f| !skip.iter().any(|s| f == Path::new(s)))
        .collect();
    assert_eq!(fa, fb);
    assert!(!fa.is_empty());
    for f in fa {
        assert!(
            fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(),
            "{} differs",
            f.display()
        );
    }
}

fn run_stages(dir: &Path, tag: &str) {
    let o = |s: &str| format!("{tag}/{s}");
    let cfg = ["--config", "tiny.toml"];
    let with =
        |rest: &[&str]| -> Vec<String> { cfg.iter().chain(rest).map(|a| a.to_string()).collect() };
    ok(dir, &with(&["--out", &o("data"), "synth"]));
    ok(
        dir,
        &with(&["--out", &o("maps"), "maps", "--data", &o("data")]),
    );
    ok(
        dir,
        &with(&[
            "--out",
            &o("ex"),
            "extract",
            "--data",
            &o("data"),
            "--maps",
            &o("maps"),
        ]),
    );
    ok(
        dir,
        &with(&[
            "--out",
            &o("g"),
            "graphs",
            "--data",
            &o("data"),
            "--maps",
            &o("maps"),
        ]),
    );
    ok(
        dir,
        &with(&["--out", &o("m"), "train", "--graphs", &o("g/graphs.jsonl")]),
    );
    ok(
        dir,
        &with(&[
            "--out",
            &o("m"),
            "train",
            "--graphs",
            &o("g/graphs.jsonl"),
            "--variant",
            "regression",
        ]),
    );
    ok(
        dir,
        &[
            "--out",
            &o("s"),
            "score",
            "--model",
            &o("m/gcnn_classification.model"),
            "--graphs",
            &o("g/graphs.jsonl"),
        ],
    );
    ok(
        dir,
        &[
            "--out",
            &o("s"),
            "score",
            "--model",
            &o("m/gcnn_regression.model"),
            "--graphs",
            &o("g/graphs.jsonl"),
        ],
    );
    ok(
        dir,
        &with(&[
            "--out",
            &o("b"),
            "baselines",
            "--data",
            &o("data"),
            "--maps",
            &o("maps"),
            "--metaseg-train",
            "scene_0000,scene_0001,scene_0002",
        ]),
    );
    ok(
        dir,
        &[
            "--out",
            &o("e"),
            "eval",
            "--svg",
            "--scores",
            &o("b/baselines.csv"),
            &o("s/scores_classification.csv"),
            &o("s/scores_regression.csv"),
        ],
    );
}

#[test]
fn every_stage_is_byte_reproducible() {
    let d = workdir();
    run_stages(d.path(), "a");
    run_stages(d.path(), "b");
    for stage in ["data", "maps", "ex", "g", "m", "s", "b", "e"] {
        assert_same_tree(
            &d.path().join("a").join(stage),
            &d.path().join("b").join(stage),
        );
    }
    let report = fs::read_to_string(d.path().join("a/e/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 12);
    assert!(d.path().join("a/e/curves.svg").is_file());
}

#[test]
fn run_reports_eleven_methods_reproducibly() {
    let d = workdir();
    ok(d.path(), &["--config", "tiny.toml", "--out", "r1", "run"]);
    ok(d.path(), &["--config", "tiny.toml", "--out", "r2", "run"]);
    let a = fs::read_to_string(d.path().join("r1/report.csv")).unwrap();
    let b = fs::read_to_string(d.path().join("r2/report.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 12);
    assert!(a.starts_with("method,auc_percent,spearman_rho\nGCNN_Classif,"));
    // config.toml records the output path itself
    assert_same_tree_except(&d.path().join("r1"), &d.path().join("r2"), &["config.toml"]);
}

#[test]
fn seed_flag_overrides_config() {
    let d = workdir();
    ok(
        d.path(),
        &[
            "--config",
            "tiny.toml",
            "--out",
            "s3",
            "synth",
            "--n-scenes",
            "2",
        ],
    );
    ok(
        d.path(),
        &[
            "--config",
            "tiny.toml",
            "--seed",
            "4",
            "--out",
            "s4",
            "synth",
            "--n-scenes",
            "2",
        ],
    );
    let a = fs::read(d.path().join("s3/scene_0000/gt.npy")).unwrap();
    let b = fs::read(d.path().join("s4/scene_0000/gt.npy")).unwrap();
    assert_ne!(a, b);
    assert_eq!(
        files_under(&d.path().join("s4"))
            .iter()
            .filter(|p| p.ends_with("gt.npy"))
            .count(),
        2
    );
}

#[test]
fn maps_from_sample_files() {
    let d = workdir();
    ok(
        d.path(),
        &[
            "--config",
            "tiny.toml",
            "--out",
            "data",
            "synth",
            "--n-scenes",
            "1",
        ],
    );
    let samples: Vec<String> = (0..6)
        .map(|t| format!("data/scene_0000/samples/sample_{t:03}.npy"))
        .collect();
    let mut args = vec!["--out", "m", "maps", "--samples"];
    args.extend(samples.iter().map(String::as_str));
    ok(d.path(), &args);
    for f in [
        "mean_prob.npy",
        "entropy.npy",
        "variance.npy",
        "pcs_uncertainty.npy",
        "mask.npy",
    ] {
        assert!(d.path().join("m").join(f).is_file(), "{f}");
    }
    ok(
        d.path(),
        &[
            "--out",
            "x",
            "extract",
            "--pred",
            "m/mask.npy",
            "--gt",
            "data/scene_0000/gt.npy",
        ],
    );
    let table = fs::read_to_string(d.path().join("x/lesions.csv")).unwrap();
    assert!(table.starts_with("id,size,iou_adj,tp\n"));
}

#[test]
fn exit_codes_follow_error_class() {
    let d = workdir();
    let code = |args: &[&str]| lesionuq(d.path(), args).status.code();
    assert_eq!(code(&["--config", "missing.toml", "synth"]), Some(2));
    fs::write(d.path().join("bad.toml"), "schema_version = 1\nfolds = 1\n").unwrap();
    assert_eq!(
        code(&["--config", "bad.toml", "--out", "o", "run"]),
        Some(2)
    );
    fs::write(
        d.path().join("unknown.toml"),
        "schema_version = 1\nnope = 1\n",
    )
    .unwrap();
    assert_eq!(code(&["--config", "unknown.toml", "synth"]), Some(2));

    assert_eq!(
        code(&[
            "--out",
            "o",
            "score",
            "--model",
            "missing.model",
            "--graphs",
            "missing.jsonl"
        ]),
        Some(3)
    );
    fs::write(d.path().join("garbage.npy"), b"not an npy file").unwrap();
    assert_eq!(
        code(&[
            "--out",
            "o",
            "maps",
            "--samples",
            "garbage.npy",
            "garbage.npy"
        ]),
        Some(3)
    );

    // one-class graph set: training cannot proceed
    ok(
        d.path(),
        &[
            "--config",
            "tiny.toml",
            "--out",
            "data",
            "synth",
            "--n-scenes",
            "1",
        ],
    );
    ok(
        d.path(),
        &[
            "--config",
            "tiny.toml",
            "--out",
            "g",
            "graphs",
            "--data",
            "data",
        ],
    );
    let text = fs::read_to_string(d.path().join("g/graphs.jsonl")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let tp: Vec<&str> = lines.filter(|l| l.contains("\"tp\":true")).collect();
    fs::write(
        d.path().join("one.jsonl"),
        format!("{header}\n{}\n", tp.join("\n")),
    )
    .unwrap();
    assert_eq!(
        code(&[
            "--config",
            "tiny.toml",
            "--out",
            "o",
            "train",
            "--graphs",
            "one.jsonl"
        ]),
        Some(4)
    );
}
