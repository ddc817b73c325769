use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cotseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

/// Trains the desk model for one step on a single generated case.
fn tiny_run(dir: &Path, name: &str) -> PathBuf {
    fs::write(dir.join("tiny.toml"), "[data]\nfolds = 1\n[train]\nepochs = 1\n").unwrap();
    let out = cotseg(dir, &["train", "--config", "tiny.toml", "--synthetic", "1", "--run-dir", name]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    dir.join(name)
}

#[test]
fn train_writes_three_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = cotseg(tmp.path(), &["train", "--synthetic", "4", "--epochs", "2", "--run-dir", "run"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let run = tmp.path().join("run");
    for f in ["config.toml", "train_log.jsonl", "checkpoint.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    // 4 cases in 3 folds leaves 2 for training, over 2 epochs
    assert_eq!(log.lines().count(), 4);

    // the echoed configuration reproduces the run
    let again = cotseg(tmp.path(), &["train", "--config", "run/config.toml", "--run-dir", "run2"]);
    assert_eq!(code(&again), 0, "{}", text(&again));
}

#[test]
fn default_run_dir_is_timestamped() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("tiny.toml"), "tag = \"smoke\"\n[data]\nfolds = 1\n[train]\nepochs = 1\n").unwrap();
    let out = cotseg(tmp.path(), &["train", "--config", "tiny.toml", "--synthetic", "1"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let runs: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].to_string_lossy().ends_with("-smoke"), "{runs:?}");
}

#[test]
fn existing_run_dir_is_not_overwritten() {
    let tmp = TempDir::new().unwrap();
    tiny_run(tmp.path(), "run");
    let out = cotseg(tmp.path(), &["train", "--config", "tiny.toml", "--synthetic", "1", "--run-dir", "run"]);
    assert_eq!(code(&out), 1, "{}", text(&out));
}

#[test]
fn bad_alpha_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[loss]\nalpha = 1.5\n").unwrap();
    let out = cotseg(tmp.path(), &["train", "--config", "bad.toml", "--synthetic", "2", "--run-dir", "r"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("alpha"), "{}", text(&out));
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn unknown_key_and_bad_flag_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("typo.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = cotseg(tmp.path(), &["train", "--config", "typo.toml", "--synthetic", "2"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("learning_rate"), "{}", text(&out));
    assert_eq!(code(&cotseg(tmp.path(), &["train", "--no-such-flag"])), 1);
    assert_eq!(code(&cotseg(tmp.path(), &["--help"])), 0);
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = cotseg(tmp.path(), &["train", "--data", "nowhere", "--run-dir", "r"]);
    assert_eq!(code(&out), 2, "{}", text(&out));
}

fn validation_cases(config: &Path) -> BTreeSet<String> {
    let text = fs::read_to_string(config).unwrap();
    let value: toml::Value = toml::from_str(&text).unwrap();
    value["data"]["validation_cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn folds_partition_the_cases() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("small.toml"),
        "[data]\nsynthetic_extent = [8, 8, 8]\n[train]\nepochs = 1\npatch = [8, 8, 8]\n",
    ).unwrap();
    let mut seen = BTreeSet::new();
    for fold in 0..3 {
        let dir = format!("fold{fold}");
        let f = fold.to_string();
        let out = cotseg(
            tmp.path(),
            &["train", "--config", "small.toml", "--synthetic", "6", "--fold", &f, "--run-dir", &dir],
        );
        assert_eq!(code(&out), 0, "{}", text(&out));
        let held = validation_cases(&tmp.path().join(&dir).join("config.toml"));
        assert_eq!(held.len(), 2);
        assert!(seen.is_disjoint(&held), "fold {fold} overlaps: {held:?}");
        seen.extend(held);
    }
    assert_eq!(seen.len(), 6);
    let out = cotseg(tmp.path(), &["train", "--config", "small.toml", "--synthetic", "6", "--fold", "3"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn predict_writes_labels_and_is_repeatable() {
    let tmp = TempDir::new().unwrap();
    let run = tiny_run(tmp.path(), "run");
    let ck = run.join("checkpoint.ckpt");
    let ck = ck.to_str().unwrap();
    assert_eq!(code(&cotseg(tmp.path(), &["synth", "--count", "1", "--out", "data", "--extent", "24"])), 0);
    let mut bytes = Vec::new();
    for name in ["p1", "p2"] {
        let out = cotseg(tmp.path(), &["predict", "--checkpoint", ck, "--input", "data", "--run-dir", name]);
        assert_eq!(code(&out), 0, "{}", text(&out));
        let path = tmp.path().join(name).join("predictions").join("synth-000.nii.gz");
        let vol = cotseg::nifti::read_nifti(&path).unwrap();
        assert_eq!(vol.dims, vec![24, 24, 24]);
        assert!(vol.data.iter().all(|&v| [0.0, 1.0, 2.0, 4.0].contains(&v)));
        bytes.push(fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn evaluate_truth_against_itself() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&cotseg(tmp.path(), &["synth", "--count", "2", "--out", "data", "--extent", "16"])), 0);
    let out = cotseg(tmp.path(), &["evaluate", "--pred", "data", "--truth", "data", "--run-dir", "ev"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let json = fs::read_to_string(tmp.path().join("ev/eval_report.json")).unwrap();
    let report = cotseg::metrics::EvalReport::from_json(&json).unwrap();
    assert_eq!(report.cases.len(), 2);
    for c in &report.cases {
        assert!(c.dice.iter().all(|&d| d == 1.0), "{:?}", c.dice);
        assert!(c.hd95.iter().all(|&h| h == 0.0), "{:?}", c.hd95);
    }
    assert!(tmp.path().join("ev/eval_report.txt").is_file());
}

#[test]
fn evaluate_lists_unmatched_cases() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&cotseg(tmp.path(), &["synth", "--count", "2", "--out", "a", "--extent", "16"])), 0);
    assert_eq!(code(&cotseg(tmp.path(), &["synth", "--count", "1", "--out", "b", "--extent", "16"])), 0);
    let out = cotseg(tmp.path(), &["evaluate", "--pred", "b", "--truth", "a", "--run-dir", "ev"]);
    assert_eq!(code(&out), 2);
    assert!(text(&out).contains("synth-001"), "{}", text(&out));
}

#[test]
fn ablate_tags_the_kept_modalities() {
    let tmp = TempDir::new().unwrap();
    let run = tiny_run(tmp.path(), "run");
    let ck = run.join("checkpoint.ckpt");
    let out = cotseg(
        tmp.path(),
        &["ablate", "--checkpoint", ck.to_str().unwrap(), "--drop", "t1c", "--synthetic", "1", "--run-dir", "ab"],
    );
    assert_eq!(code(&out), 0, "{}", text(&out));
    let json = fs::read_to_string(tmp.path().join("ab/ablation_report.json")).unwrap();
    let report = cotseg::metrics::EvalReport::from_json(&json).unwrap();
    assert_eq!(report.tag, "Flair,T1,T2");
    let bad = cotseg(tmp.path(), &["ablate", "--checkpoint", ck.to_str().unwrap(), "--drop", "adc", "--synthetic", "1"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn checkpoint_config_mismatch_exits_4() {
    let tmp = TempDir::new().unwrap();
    let run = tiny_run(tmp.path(), "run");
    let ck = run.join("checkpoint.ckpt");
    fs::write(tmp.path().join("wide.toml"), "[model]\nbase_channels = 4\n").unwrap();
    let out = cotseg(
        tmp.path(),
        &["predict", "--checkpoint", ck.to_str().unwrap(), "--config", "wide.toml", "--synthetic", "1"],
    );
    assert_eq!(code(&out), 4, "{}", text(&out));

    fs::write(tmp.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = cotseg(tmp.path(), &["inspect", "--checkpoint", "junk.ckpt"]);
    assert_eq!(code(&out), 4, "{}", text(&out));
}

#[test]
fn resume_continues_the_step_count() {
    let tmp = TempDir::new().unwrap();
    let run = tiny_run(tmp.path(), "run");
    let ck = run.join("checkpoint.ckpt");
    fs::write(tmp.path().join("two.toml"), "[data]\nfolds = 1\n[train]\nepochs = 2\n").unwrap();
    let out = cotseg(
        tmp.path(),
        &["train", "--config", "two.toml", "--synthetic", "1", "--resume", ck.to_str().unwrap(), "--run-dir", "run"],
    );
    assert_eq!(code(&out), 0, "{}", text(&out));
    let log = cotseg::trainer::read_log(&run.join("train_log.jsonl")).unwrap();
    let steps: Vec<_> = log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2]);
}

#[test]
fn inspect_reports_counts() {
    let tmp = TempDir::new().unwrap();
    let out = cotseg(tmp.path(), &["inspect", "--preset", "full"]);
    assert_eq!(code(&out), 0);
    let t = text(&out);
    assert!(t.contains("total parameters: 2323460"), "{t}");
    assert!(t.contains("without CoT: 1605380"), "{t}");
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let tmp = TempDir::new().unwrap();
    let ok = cotseg(tmp.path(), &["verify", "--quick"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    let bad = cotseg(tmp.path(), &["verify", "--quick", "--inject-fault", "conv3d"]);
    assert_eq!(code(&bad), 5);
    assert!(text(&bad).contains("FAIL   gradient/conv3d"), "{}", text(&bad));
}

#[test]
fn echoed_f64_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("f64.toml"),
        "precision = \"f64\"\n[model]\nbase_channels = 2\n[data]\nfolds = 1\nsynthetic_extent = [8, 8, 8]\n[train]\nepochs = 2\npatch = [8, 8, 8]\n",
    )
    .unwrap();
    let out = cotseg(tmp.path(), &["train", "--config", "f64.toml", "--synthetic", "2", "--run-dir", "a"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let out = cotseg(tmp.path(), &["train", "--config", "a/config.toml", "--run-dir", "b"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(fs::read(a.join("config.toml")).unwrap(), fs::read(b.join("config.toml")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.ckpt")).unwrap(), fs::read(b.join("checkpoint.ckpt")).unwrap());
    let (la, lb) = (
        cotseg::trainer::read_log(a.join("train_log.jsonl")).unwrap(),
        cotseg::trainer::read_log(b.join("train_log.jsonl")).unwrap(),
    );
    assert_eq!(la.len(), 4);
    assert!(la.iter().zip(&lb).all(|(x, y)| x.same_values(y)));
}

#[test]
fn ablate_without_drop_equals_predict_then_evaluate() {
    let tmp = TempDir::new().unwrap();
    let run = tiny_run(tmp.path(), "run");
    let ck = run.join("checkpoint.ckpt");
    let ck = ck.to_str().unwrap();
    assert_eq!(code(&cotseg(tmp.path(), &["synth", "--count", "2", "--out", "data", "--extent", "16"])), 0);
    let steps: [&[&str]; 3] = [
        &["ablate", "--checkpoint", ck, "--data", "data", "--run-dir", "ab"],
        &["predict", "--checkpoint", ck, "--input", "data", "--run-dir", "pr"],
        &["evaluate", "--pred", "pr/predictions", "--truth", "data", "--run-dir", "ev"],
    ];
    for args in steps {
        let out = cotseg(tmp.path(), args);
        assert_eq!(code(&out), 0, "{}", text(&out));
    }
    let read = |p: &str| cotseg::metrics::EvalReport::from_json(&fs::read_to_string(tmp.path().join(p)).unwrap()).unwrap();
    let (ab, ev) = (read("ab/ablation_report.json"), read("ev/eval_report.json"));
    assert_eq!(ab.tag, "Flair,T1,T1c,T2");
    assert_eq!(ab.cases, ev.cases);

    let out = cotseg(tmp.path(), &["ablate", "--checkpoint", ck, "--data", "data", "--drop", "flair", "--run-dir", "ab2"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let dropped = read("ab2/ablation_report.json");
    assert_eq!(dropped.tag, "T1,T1c,T2");
    assert_ne!(dropped.cases, ab.cases);

    // aggregates survive a re-parse and recomputation
    let again = ev.recomputed();
    for (x, y) in ev.aggregates.iter().zip(&again.aggregates) {
        assert!((x.mean - y.mean).abs() < 1e-9 || (x.mean.is_nan() && y.mean.is_nan()));
        assert!((x.std - y.std).abs() < 1e-9 || (x.std.is_nan() && y.std.is_nan()));
    }
}
