use std::fs;
use std::path::{Path, PathBuf};

use lrmr_cli::{run, EXIT_INVALID, EXIT_JUDGE_LIMIT, EXIT_OK};
use lrmr_core::report::ReportMode;
use lrmr_core::simulation::generate_cohort;
use serde_json::Value;

fn lrmr(out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["lrmr".to_string(), "--out".into(), out.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn write_reports(dir: &Path, m: usize, seed: u64) -> Vec<String> {
    fs::create_dir_all(dir).unwrap();
    let cohort = generate_cohort(m, 1..=6, seed).unwrap();
    for (id, r) in cohort.reports(ReportMode::Structured).unwrap() {
        fs::write(dir.join(format!("{id}.json")), r.to_canonical_json()).unwrap();
    }
    cohort.ids()
}

#[test]
fn noiseless_simulation_has_perfect_rho() {
    let tmp = tempfile::tempdir().unwrap();
    let code = lrmr(tmp.path(), &["simulate", "--patients", "12", "--opponents", "11", "--noiseless", "--seed", "0"]);
    assert_eq!(code, EXIT_OK);
    let summary = json(tmp.path().join("default/summary.json"));
    assert_eq!(summary["spearman_rho"], 1.0);
    assert_eq!(summary["auc"], 1.0);
    let csv = fs::read_to_string(tmp.path().join("default/simulation.csv")).unwrap();
    assert!(csv.starts_with("patient_id,latent_risk,label,net\n"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn rank_117_reports_gives_702_comparisons() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = tmp.path().join("reports");
    write_reports(&reports, 117, 2);
    let code = lrmr(tmp.path(), &["rank", "--opponents", "6", "--reports", reports.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let lines = fs::read_to_string(tmp.path().join("default/comparisons.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 702);
    let journal = fs::read_to_string(tmp.path().join("default/comparisons.journal.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 702);
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["task_id", "initiator", "opponent", "position_map", "choice", "analysis"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let scores = fs::read_to_string(tmp.path().join("default/scores.csv")).unwrap();
    assert!(scores.starts_with("patient_id,wins,losses,comparables,invalids,net\n"));
    assert_eq!(scores.lines().count(), 118);
    let manifest = json(tmp.path().join("default/manifest.rank.json"));
    assert_eq!(manifest["counts"]["tasks"], 702);
}

#[test]
fn evaluate_names_unlabelled_patient_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("scores.csv"), "patient_id,net\na,3\nb,1\nc,-4\n").unwrap();
    fs::write(tmp.path().join("labels.csv"), "patient_id,label\na,1\nc,0\n").unwrap();
    fs::write(tmp.path().join("split.json"), r#"{"train_ids":["a","c"],"test_ids":["b"],"seed":0}"#).unwrap();
    let out = tmp.path().join("out");
    let code = lrmr(
        &out,
        &[
            "evaluate",
            "--scores",
            tmp.path().join("scores.csv").to_str().unwrap(),
            "--labels",
            tmp.path().join("labels.csv").to_str().unwrap(),
            "--split",
            tmp.path().join("split.json").to_str().unwrap(),
        ],
    );
    assert_eq!(code, EXIT_INVALID);
    assert!(!out.exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lrmr(tmp.path(), &["rank", "--bogus"]), EXIT_INVALID);
    assert_eq!(lrmr(tmp.path(), &["frobnicate"]), EXIT_INVALID);
    assert_eq!(run(["lrmr", "--help"]), EXIT_OK);
}

#[test]
fn bad_settings_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lrmr(tmp.path(), &["simulate", "--train-frac", "1.5"]), EXIT_INVALID);
    assert_eq!(lrmr(tmp.path(), &["simulate", "--backend", "smoke-signals"]), EXIT_INVALID);
    assert_eq!(lrmr(tmp.path(), &["simulate", "--patients", "1"]), EXIT_INVALID);
    assert!(!tmp.path().join("default").exists());
}

#[test]
fn unreachable_judge_exceeds_invalid_limit() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = tmp.path().join("reports");
    write_reports(&reports, 4, 1);
    let code = lrmr(
        tmp.path(),
        &[
            "rank",
            "--opponents",
            "1",
            "--reports",
            reports.to_str().unwrap(),
            "--backend",
            "http",
            "--endpoint",
            "http://127.0.0.1:9/v1/chat/completions",
            "--max-retries",
            "0",
            "--no-cache",
        ],
    );
    assert_eq!(code, EXIT_JUDGE_LIMIT);
    let scores = fs::read_to_string(tmp.path().join("default/scores.csv")).unwrap();
    let invalids: u32 = scores.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse::<u32>().unwrap()).sum();
    assert_eq!(invalids, 8);
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = tmp.path().join("reports");
    write_reports(&reports, 10, 3);
    let conf = tmp.path().join("run.conf");
    fs::write(&conf, "opponents = 3\nrun_id = fromfile\ncredit_opponent = false\n").unwrap();
    let r = reports.to_str().unwrap();
    assert_eq!(lrmr(tmp.path(), &["rank", "--config", conf.to_str().unwrap(), "--reports", r]), EXIT_OK);
    assert_eq!(fs::read_to_string(tmp.path().join("fromfile/comparisons.jsonl")).unwrap().lines().count(), 30);
    let scores = fs::read_to_string(tmp.path().join("fromfile/scores.csv")).unwrap();
    let counted: u32 = scores
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).take(3).map(|x| x.parse::<u32>().unwrap()).sum::<u32>())
        .sum();
    assert_eq!(counted, 30);
    assert_eq!(
        lrmr(tmp.path(), &["rank", "--config", conf.to_str().unwrap(), "--opponents", "2", "--reports", r]),
        EXIT_OK
    );
    assert_eq!(fs::read_to_string(tmp.path().join("fromfile/comparisons.jsonl")).unwrap().lines().count(), 20);
    fs::write(&conf, "opponets = 3\n").unwrap();
    assert_eq!(lrmr(tmp.path(), &["rank", "--config", conf.to_str().unwrap(), "--reports", r]), EXIT_INVALID);
}

#[test]
fn split_117_with_39_positives() {
    let tmp = tempfile::tempdir().unwrap();
    let mut labels = String::from("patient_id,label\n");
    for i in 0..117 {
        labels.push_str(&format!("P{i:03},{}\n", u8::from(i % 3 == 0)));
    }
    fs::write(tmp.path().join("labels.csv"), labels).unwrap();
    let path = tmp.path().join("labels.csv");
    assert_eq!(lrmr(tmp.path(), &["split", "--labels", path.to_str().unwrap()]), EXIT_OK);
    let split = json(tmp.path().join("default/split.json"));
    assert_eq!(split["train_ids"].as_array().unwrap().len(), 81);
    assert_eq!(split["test_ids"].as_array().unwrap().len(), 36);
}

#[test]
fn run_all_structured_and_freeform() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(lrmr(tmp.path(), &["simulate", "--patients", "24", "--emit-dataset", ds.to_str().unwrap()]), EXIT_OK);

    assert_eq!(lrmr(tmp.path(), &["run-all", "--dataset", ds.to_str().unwrap(), "--run-id", "s"]), EXIT_OK);
    let run = tmp.path().join("s");
    for f in ["metrics.json", "metrics_rule.json", "rule_scores.csv", "split.json", "scores.csv", "montages/s000.montage.png", "montages/s000.montage.json", "reports/s000.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = json(run.join("metrics.json"));
    for k in ["accuracy", "precision", "recall", "f1", "auc", "confusion_matrix"] {
        assert!(metrics["test"].get(k).is_some(), "{k}");
    }
    let manifest = json(run.join("manifest.run-all.json"));
    for rel in manifest["artifacts"].as_array().unwrap() {
        assert!(run.join(rel.as_str().unwrap()).is_file());
    }
    assert_eq!(manifest["counts"]["tasks"], 24 * 6);

    let code = lrmr(tmp.path(), &["run-all", "--dataset", ds.to_str().unwrap(), "--run-id", "f", "--prompt-mode", "freeform"]);
    assert_eq!(code, EXIT_OK);
    let report = json(tmp.path().join("f/reports/s000.json"));
    assert_eq!(report["mode"], "freeform");
    assert!(!tmp.path().join("f/rule_scores.csv").exists());
}

#[test]
fn run_all_validates_labels_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(lrmr(tmp.path(), &["simulate", "--patients", "10", "--emit-dataset", ds.to_str().unwrap()]), EXIT_OK);
    let labels = fs::read_to_string(ds.join("labels.csv")).unwrap();
    let trimmed: String = labels.lines().filter(|l| !l.starts_with("s004")).map(|l| format!("{l}\n")).collect();
    fs::write(ds.join("labels.csv"), trimmed).unwrap();
    let out = tmp.path().join("out2");
    assert_eq!(lrmr(&out, &["run-all", "--dataset", ds.to_str().unwrap()]), EXIT_INVALID);
    assert!(!out.exists());
}

#[test]
fn ablation_and_evaluate_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(lrmr(tmp.path(), &["simulate", "--patients", "20", "--emit-dataset", ds.to_str().unwrap()]), EXIT_OK);
    let d = ds.to_str().unwrap();
    let labels = ds.join("labels.csv");
    let l = labels.to_str().unwrap();
    assert_eq!(lrmr(tmp.path(), &["montage", "--dataset", d, "--run-id", "c"]), EXIT_OK);
    assert_eq!(lrmr(tmp.path(), &["report", "--dataset", d, "--run-id", "c"]), EXIT_OK);
    assert_eq!(lrmr(tmp.path(), &["rank", "--run-id", "c", "--opponents", "4"]), EXIT_OK);
    assert_eq!(lrmr(tmp.path(), &["split", "--labels", l, "--run-id", "c"]), EXIT_OK);
    assert_eq!(lrmr(tmp.path(), &["evaluate", "--labels", l, "--run-id", "c"]), EXIT_OK);
    assert_eq!(lrmr(tmp.path(), &["ablate-rule-score", "--labels", l, "--run-id", "c", "--split", tmp.path().join("c/split.json").to_str().unwrap()]), EXIT_OK);
    let m = json(tmp.path().join("c/metrics.json"));
    let cm = &m["test"]["confusion_matrix"];
    let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| cm[k].as_u64().unwrap()).sum();
    assert_eq!(total, 6);
    assert!(tmp.path().join("c/metrics_rule.json").is_file());
    for cmd in ["montage", "report", "rank", "split", "evaluate", "ablate-rule-score"] {
        assert!(tmp.path().join(format!("c/manifest.{cmd}.json")).is_file(), "{cmd}");
    }
}
