use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ksvqe(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksvqe"))
        .args(args)
        .env("KSVQE_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn report(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is a run report")
}

fn metric(r: &Value, k: &str) -> f64 {
    r["metrics"][k].as_f64().unwrap_or_else(|| panic!("metric {k} missing in {r}"))
}

fn small_corpus(out: &Path) {
    report(&ksvqe(out, &["gen-data", "--n-refs", "10", "--seed", "5"]));
}

#[test]
fn gen_data_rejects_zero_references() {
    let dir = tempfile::tempdir().unwrap();
    let o = ksvqe(dir.path(), &["gen-data", "--n-refs", "0"]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

/// Structural check of the manifest JSON written independently of the
/// serde types.
fn check_manifest_schema(m: &Value) {
    for key in ["version", "seed", "config", "qp_per_interval", "references", "clips", "pairs_file"] {
        assert!(m.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(m["qp_per_interval"].as_array().unwrap().len(), 6);
    for c in m["clips"].as_array().unwrap() {
        let id = c["clip_id"].as_str().unwrap();
        assert!(c["reference_id"].is_string());
        assert!(matches!(c["split"].as_str(), Some("train" | "test")), "{c}");
        assert!(matches!(c["group"].as_u64(), Some(1..=3)));
        let mos = c["pseudo_mos"].as_f64().unwrap();
        assert!((1.0..=5.0).contains(&mos));
        assert_eq!(c["path"].as_str().unwrap(), format!("clips/{id}.kvt"));
        assert!(c["seed"].is_u64());
        let shape: Vec<u64> = ["frames", "height", "width", "channels"].iter().map(|k| c["shape"][k].as_u64().unwrap()).collect();
        assert_eq!(shape, vec![8, 64, 64, 3]);
        assert!(c["recipe"]["pattern_label"].is_string());
    }
}

#[test]
fn default_corpus_has_300_clips_and_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let r = report(&ksvqe(a.path(), &["gen-data", "--seed", "11"]));
    assert_eq!(metric(&r, "clips"), 300.0);
    assert_eq!(metric(&r, "train_clips"), 240.0);
    assert_eq!(metric(&r, "test_clips"), 60.0);
    assert_eq!(metric(&r, "trends_hold"), 1.0);
    let ma = fs::read(a.path().join("corpus/manifest.json")).unwrap();
    check_manifest_schema(&serde_json::from_slice(&ma).unwrap());
    assert_eq!(fs::read_dir(a.path().join("corpus/clips")).unwrap().count(), 300);
    let r2 = report(&ksvqe(b.path(), &["gen-data", "--seed", "11"]));
    assert_eq!(ma, fs::read(b.path().join("corpus/manifest.json")).unwrap());
    assert_eq!(r["config_hash"], r2["config_hash"]);
    let r3 = report(&ksvqe(b.path(), &["gen-data", "--seed", "12", "--n-refs", "10"]));
    assert_ne!(r["config_hash"], r3["config_hash"]);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = ksvqe(&blocker, &["gen-data", "--n-refs", "4"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn eval_needs_a_checkpoint_unless_oracle() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    assert_eq!(code(&ksvqe(dir.path(), &["eval"])), 2);
    assert_eq!(code(&ksvqe(dir.path(), &["eval", "--checkpoint", "nope.kvt"])), 2);
    let r = report(&ksvqe(dir.path(), &["eval", "--oracle"]));
    for k in ["srocc", "plcc", "rank_accuracy_all", "rank_accuracy_homogeneous", "rank_accuracy_non_homogeneous"] {
        assert_eq!(metric(&r, k), 1.0, "{k}");
    }
    let eval: Value = serde_json::from_slice(&fs::read(dir.path().join("eval/eval.json")).unwrap()).unwrap();
    for k in ["srocc", "plcc", "predictions", "targets"] {
        assert!(eval.get(k).is_some());
    }
    for class in ["all", "homogeneous", "non_homogeneous"] {
        for f in ["correct", "total", "accuracy"] {
            assert!(eval["rank"][class].get(f).is_some(), "rank.{class}.{f}");
        }
    }
    assert!(r["config_hash"].as_str().unwrap().len() == 64);
    assert!(r["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn eval_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let t = report(&ksvqe(dir.path(), &["train", "--epochs", "1"]));
    let e = report(&ksvqe(dir.path(), &["eval"]));
    assert_eq!(metric(&t, "srocc"), metric(&e, "srocc"));
    assert_eq!(metric(&t, "plcc"), metric(&e, "plcc"));
    let traces = dir.path().join("eval/traces.json");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for out in [&a, &b] {
        report(&ksvqe(dir.path(), &["plot", "selection-map", traces.to_str().unwrap(), "--output", out.to_str().unwrap()]));
    }
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    let rank = report(&ksvqe(dir.path(), &["rank-eval", "--predictions", dir.path().join("eval/eval.json").to_str().unwrap()]));
    assert_eq!(metric(&rank, "rank_accuracy_all"), metric(&e, "rank_accuracy_all"));
}

#[test]
fn trained_model_beats_untrained_on_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    report(&ksvqe(dir.path(), &["gen-data"]));
    let untrained = report(&ksvqe(dir.path(), &["train", "--epochs", "0"]));
    let trained = report(&ksvqe(dir.path(), &["train"]));
    for k in ["srocc", "plcc", "rank_accuracy_all", "rank_accuracy_homogeneous", "rank_accuracy_non_homogeneous"] {
        assert!(metric(&trained, k) > metric(&untrained, k), "{k}: {} vs {}", metric(&trained, k), metric(&untrained, k));
    }
}

#[test]
fn plot_errors_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&ksvqe(dir.path(), &["plot", "pie", corpus.to_str().unwrap()])), 2);
    let empty = dir.path().join("empty.json");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&ksvqe(dir.path(), &["plot", "scatter", empty.to_str().unwrap()])), 2);
    fs::write(&empty, "[]").unwrap();
    assert_eq!(code(&ksvqe(dir.path(), &["plot", "selection-map", empty.to_str().unwrap()])), 2);
    for kind in ["qp-trend", "mos-hist"] {
        let a = dir.path().join(format!("{kind}-a.png"));
        let b = dir.path().join(format!("{kind}-b.png"));
        report(&ksvqe(dir.path(), &["plot", kind, corpus.to_str().unwrap(), "--output", a.to_str().unwrap()]));
        report(&ksvqe(dir.path(), &["plot", kind, corpus.to_str().unwrap(), "--output", b.to_str().unwrap()]));
        let (a, b) = (fs::read(a).unwrap(), fs::read(b).unwrap());
        assert_eq!(a, b);
        assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
    }
    report(&ksvqe(dir.path(), &["eval", "--oracle"]));
    let r = report(&ksvqe(dir.path(), &["plot", "scatter", dir.path().join("eval/eval.json").to_str().unwrap()]));
    assert!(Path::new(r["artifacts"][0].as_str().unwrap()).ends_with("plots/scatter.png"));
}

/// Five observers on six videos. Observer o5 agrees in ordering but sits
/// one point high on `v_app`, where the panel reads {3, 3, 3, 3, 5}.
fn ratings_csv(extra: &str) -> String {
    let mut s = String::from("observer_id,video_id,score\n");
    let base: [f64; 5] = [1.5, 2.0, 3.0, 3.5, 4.5];
    for o in 1..=5 {
        for (v, b) in base.iter().enumerate() {
            let jitter: f64 = [0.0, 0.5, -0.5, 0.0, 0.5][(o + v) % 5];
            s += &format!("o{o},v{v},{}\n", (b + jitter).clamp(1.0, 5.0));
        }
        s += &format!("o{o},v_app,{}\n", if o == 5 { 5 } else { 3 });
    }
    s + extra
}

#[test]
fn clean_scores_pipeline_outputs_reconcile() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ratings.csv");
    fs::write(&csv, ratings_csv("")).unwrap();
    let r = report(&ksvqe(dir.path(), &["clean-scores", csv.to_str().unwrap()]));
    let input = metric(&r, "input_ratings");
    assert_eq!(input, 30.0);
    assert_eq!(input, metric(&r, "kept_ratings") + metric(&r, "screened_out") + metric(&r, "ci_removed"));
    let screening: Value = serde_json::from_slice(&fs::read(dir.path().join("clean/screening.json")).unwrap()).unwrap();
    let removals = screening["removals"].as_array().unwrap();
    assert!(removals.iter().any(|x| x["video"] == "v_app" && x["observer"] == "o5" && x["score"] == 5.0));
    assert!(!removals.iter().any(|x| x["video"] == "v_app" && x["score"] == 3.0));
    let kept = fs::read_to_string(dir.path().join("clean/cleaned.csv")).unwrap();
    assert_eq!(kept.lines().count() - 1, metric(&r, "kept_ratings") as usize);
    let mos = fs::read_to_string(dir.path().join("clean/mos.csv")).unwrap();
    assert!(mos.lines().any(|l| l.starts_with("v_app,3,")), "{mos}");
}

#[test]
fn clean_scores_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ratings.csv");
    fs::write(&csv, "").unwrap();
    assert_eq!(code(&ksvqe(dir.path(), &["clean-scores", csv.to_str().unwrap()])), 2);
    fs::write(&csv, "observer_id,video_id,score\n").unwrap();
    assert_eq!(code(&ksvqe(dir.path(), &["clean-scores", csv.to_str().unwrap()])), 2);
    assert_eq!(code(&ksvqe(dir.path(), &["clean-scores", "missing.csv"])), 2);
    // 2 of 32 rows malformed: above the 1% budget
    fs::write(&csv, ratings_csv("o1,v9,banana\no2,v9,7\n")).unwrap();
    let o = ksvqe(dir.path(), &["clean-scores", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let errors: Value = serde_json::from_slice(&fs::read(dir.path().join("clean/row_errors.json")).unwrap()).unwrap();
    let lines: Vec<u64> = errors.as_array().unwrap().iter().map(|e| e["line"].as_u64().unwrap()).collect();
    assert_eq!(lines, vec![32, 33]);
}

#[test]
fn clean_scores_tolerates_one_percent_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ratings.csv");
    let mut body = ratings_csv("");
    // pad to 120 valid rows so one bad row is under 1%
    for o in 1..=5 {
        for v in 10..28 {
            body += &format!("o{o},w{v},{}\n", 1.0 + ((o * 7 + v * 3) % 9) as f64 * 0.5);
        }
    }
    body += "o1,w99,not-a-score\n";
    fs::write(&csv, body).unwrap();
    let r = report(&ksvqe(dir.path(), &["clean-scores", csv.to_str().unwrap()]));
    assert_eq!(metric(&r, "malformed_rows"), 1.0);
    assert_eq!(metric(&r, "input_ratings"), 120.0);
}

#[test]
fn config_file_overrides_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"worksim": {"n_refs": 5, "clips_per_ref": 6}}"#).unwrap();
    let r = report(&ksvqe(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]));
    assert_eq!(metric(&r, "clips"), 30.0);
    fs::write(&cfg, r#"{"worksim": {"n_reefs": 5}}"#).unwrap();
    assert_eq!(code(&ksvqe(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()])), 2);
    fs::write(&cfg, r#"{"trainer": {}}"#).unwrap();
    assert_eq!(code(&ksvqe(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()])), 2);
    fs::write(&cfg, r#"{"train": {"batch_size": 1}}"#).unwrap();
    small_corpus(dir.path());
    assert_eq!(code(&ksvqe(dir.path(), &["train", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ksvqe(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&ksvqe(dir.path(), &["train", "--profile", "huge"])), 2);
    assert_eq!(code(&ksvqe(dir.path(), &["train"])), 2, "no corpus yet");
    assert_eq!(code(&ksvqe(dir.path(), &["--help"])), 0);
}
