//! Subcommand bodies. Each one loads and validates all of its inputs before
//! it writes anything under the run directory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use lrmr_core::canonical::to_canonical_json;
use lrmr_core::evaluation::{
    auc_for, calibrate_threshold_with, classify_with_threshold, compute_metrics, stratified_split, ConfusionMatrix,
    Labels, Scores, Split, ThresholdObjective,
};
use lrmr_core::judge::mock::MockOptions;
use lrmr_core::judge::{make_backend, map_bounded, JudgeClient, JudgeRequest, ResponseCache};
use lrmr_core::montage::{build_montage, load_patches, MontageConfig, MontageImage};
use lrmr_core::prompting::{parse_report, PromptTemplates};
use lrmr_core::report::{PatientRecord, ReportMode, StructuredReport};
use lrmr_core::simulation::{run_simulation, OracleConfig};
use lrmr_core::tournament::{
    aggregate_scores_with, rule_based_score, run_tournament, schedule_pairs, ComparisonOutcome, RuleWeights,
    SchedulerConfig,
};
use lrmr_core::{Error, Result};
use serde_json::{json, Value};

use crate::files::{
    dataset_patients, read_labels, read_reports, read_scores, read_split, rows_csv, scores_csv, Artifacts,
};
use crate::settings::Settings;

/// What a command hands back to the runner: manifest fields, a one-line
/// summary, and whether the judge failure limit was exceeded.
#[derive(Debug)]
pub struct Finished {
    pub manifest: Value,
    pub summary: String,
    pub limit_exceeded: Option<String>,
}

impl Finished {
    fn ok(manifest: Value, summary: String) -> Self {
        Finished {
            manifest,
            summary,
            limit_exceeded: None,
        }
    }
}

pub struct Context {
    pub settings: Settings,
    pub templates: PromptTemplates,
    pub weights: RuleWeights,
}

impl Context {
    pub fn new(settings: Settings) -> Result<Self> {
        settings.validate()?;
        let templates = match &settings.prompts_dir {
            Some(dir) => PromptTemplates::from_dir(dir)?,
            None => PromptTemplates::default(),
        };
        let weights = match &settings.rule_weights {
            Some(path) => RuleWeights::parse(
                &fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
            )?,
            None => RuleWeights::default(),
        };
        Ok(Context {
            settings,
            templates,
            weights,
        })
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(self.settings.run_dir())
    }

    fn montage_config(&self) -> MontageConfig {
        MontageConfig {
            tile_px: self.settings.tile_px,
            ..MontageConfig::default()
        }
    }

    fn client(&self) -> Result<JudgeClient> {
        let config = self.settings.backend_config();
        let options = MockOptions {
            weights: self.weights.clone(),
            oracle: self.settings.oracle(),
        };
        let backend = make_backend(&config, &options)?;
        let cache = self.settings.cache_root().map(ResponseCache::new).transpose()?;
        JudgeClient::new(backend, config, cache)
    }

    /// Shared manifest fields.
    fn manifest_base(&self) -> Value {
        let s = &self.settings;
        let api_key = std::env::var(lrmr_core::judge::http::API_KEY_ENV).ok().map(|_| "<redacted>");
        json!({
            "run_id": s.run_id,
            "prompt_version": self.templates.version(),
            "backend": {
                "kind": s.backend.to_string(),
                "model_id": s.model,
                "temperature": s.temperature,
                "endpoint_url": s.endpoint,
                "max_retries": s.max_retries,
                "max_in_flight": s.max_in_flight,
                "timeout_s": s.timeout_s,
                "api_key": api_key,
            },
            "seeds": { "seed": s.seed },
            "settings": {
                "opponents": s.opponents,
                "train_frac": s.train_frac,
                "prompt_mode": s.prompt_mode.to_string(),
                "credit_opponent": s.credit_opponent,
                "invalid_limit": s.invalid_limit,
                "threshold_objective": s.threshold_objective.to_string(),
                "tile_px": s.tile_px,
            },
        })
    }
}

fn load_patients(dataset: &Path, labels: Option<&Labels>) -> Result<Vec<PatientRecord>> {
    dataset_patients(dataset)?
        .into_iter()
        .map(|(id, nodes)| {
            let images = load_patches(&nodes)?;
            if images.is_empty() {
                return Err(Error::Input(format!("{}: no node patches", nodes.display())));
            }
            PatientRecord::new(id.clone(), labels.and_then(|l| l.get(&id).copied()), images)
        })
        .collect()
}

fn build_montages(ctx: &Context, patients: &[PatientRecord]) -> Result<Vec<MontageImage>> {
    let config = ctx.montage_config();
    config.validate()?;
    patients.iter().map(|p| build_montage(p, &config)).collect()
}

fn write_montages(art: &mut Artifacts, montages: &[MontageImage]) -> Result<()> {
    for m in montages {
        art.write(&format!("montages/{}.montage.png", m.patient_id), &m.png_bytes())?;
        let mut sidecar = m.sidecar_json();
        sidecar.push('\n');
        art.write(&format!("montages/{}.montage.json", m.patient_id), sidecar.as_bytes())?;
    }
    Ok(())
}

struct ReportBatch {
    reports: BTreeMap<String, StructuredReport>,
    failures: Vec<(String, String)>,
}

fn describe_patients(ctx: &Context, client: &JudgeClient, montages: &[MontageImage]) -> Result<ReportBatch> {
    let mode = ctx.settings.prompt_mode;
    let mut requests = Vec::with_capacity(montages.len());
    for m in montages {
        let k = m.tile_map.len() as u32;
        let prompt = ctx.templates.stage1(k, mode)?;
        requests.push((m.patient_id.clone(), k, JudgeRequest::stage_one(prompt, m.png_bytes(), client.config())?));
    }
    let results = map_bounded(&requests, client.config().max_in_flight, |_, (pid, k, request)| {
        client
            .invoke(request, |raw| parse_report(raw, pid, *k, mode))
            .map(|(report, _)| report)
    });
    let mut batch = ReportBatch {
        reports: BTreeMap::new(),
        failures: Vec::new(),
    };
    for ((pid, _, _), result) in requests.iter().zip(results) {
        match result {
            Ok(report) => {
                batch.reports.insert(pid.clone(), report);
            }
            Err(e) => {
                log::warn!("no report for {pid}: {e}");
                batch.failures.push((pid.clone(), e.to_string()));
            }
        }
    }
    Ok(batch)
}

fn write_reports(art: &mut Artifacts, reports: &BTreeMap<String, StructuredReport>) -> Result<()> {
    for (pid, r) in reports {
        let mut text = r.to_canonical_json();
        text.push('\n');
        art.write(&format!("reports/{pid}.json"), text.as_bytes())?;
    }
    Ok(())
}

fn exceeds(ctx: &Context, failed: usize, total: usize) -> bool {
    total > 0 && failed as f64 / total as f64 > ctx.settings.invalid_limit
}

struct RankResult {
    tasks: usize,
    invalids: usize,
}

fn check_opponents(ctx: &Context, patients: usize) -> Result<()> {
    if ctx.settings.opponents >= patients {
        return Err(Error::config(format!(
            "--opponents {} needs at least {} patients, have {patients}",
            ctx.settings.opponents,
            ctx.settings.opponents + 1
        )));
    }
    Ok(())
}

fn check_modes(reports: &BTreeMap<String, StructuredReport>) -> Result<ReportMode> {
    let mut modes = reports.values().map(|r| r.mode);
    let first = modes.next().expect("non-empty");
    if modes.any(|m| m != first) {
        return Err(Error::validation("reports mix structured and freeform modes"));
    }
    Ok(first)
}

fn rank_reports(
    ctx: &Context,
    client: &JudgeClient,
    reports: &BTreeMap<String, StructuredReport>,
    art: &mut Artifacts,
) -> Result<RankResult> {
    let ids: Vec<String> = reports.keys().cloned().collect();
    let tasks = schedule_pairs(
        &ids,
        &SchedulerConfig {
            n_opponents: ctx.settings.opponents,
            seed: ctx.settings.seed,
            randomize_position: true,
        },
    )?;
    let by_id: HashMap<String, StructuredReport> = reports.clone().into_iter().collect();

    fs::create_dir_all(art.root())?;
    let journal_rel = "comparisons.journal.jsonl";
    let journal = Mutex::new(File::create(art.path(journal_rel))?);
    art.record(journal_rel);
    let on_complete = |o: &ComparisonOutcome| {
        let line = to_canonical_json(&o.to_record(true)).expect("record serializes");
        let mut f = journal.lock().expect("journal lock");
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("journal write failed: {e}");
        }
    };
    let outcomes = run_tournament(&tasks, &by_id, client, &ctx.templates, Some(&on_complete))?;

    let mut lines = String::new();
    for o in &outcomes {
        lines.push_str(&to_canonical_json(&o.to_record(false))?);
        lines.push('\n');
    }
    art.write("comparisons.jsonl", lines.as_bytes())?;
    let scores = aggregate_scores_with(&outcomes, &ids, ctx.settings.credit_opponent)?;
    art.write("scores.csv", &scores_csv(&scores)?)?;
    Ok(RankResult {
        tasks: outcomes.len(),
        invalids: outcomes.iter().filter(|o| o.is_invalid()).count(),
    })
}

fn rule_scores(ctx: &Context, reports: &BTreeMap<String, StructuredReport>) -> Result<Scores> {
    reports
        .iter()
        .map(|(pid, r)| Ok((pid.clone(), rule_based_score(r, &ctx.weights)? as f64)))
        .collect()
}

fn rule_scores_csv(scores: &Scores) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = scores
        .iter()
        .map(|(pid, s)| vec![pid.clone(), format!("{}", *s as i64)])
        .collect();
    rows_csv(&["patient_id", "score"], &rows)
}

fn ratio_text(r: num_rational::Ratio<u64>) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

fn set_metrics(cm: &ConfusionMatrix, scores: &Scores, labels: &Labels, ids: &[String]) -> Value {
    let m = compute_metrics(cm);
    let auc = match auc_for(scores, labels, ids) {
        Ok(a) => Some(a),
        Err(e) => {
            log::warn!("AUC undefined: {e}");
            None
        }
    };
    let m = match auc {
        Some(a) => m.with_auc(a),
        None => m,
    };
    let r = m.rounded(4);
    json!({
        "n": ids.len(),
        "accuracy": r.accuracy,
        "precision": r.precision,
        "recall": r.recall,
        "f1": r.f1,
        "auc": r.auc,
        "confusion_matrix": cm,
        "exact": {
            "accuracy": ratio_text(m.accuracy),
            "precision": ratio_text(m.precision),
            "recall": ratio_text(m.recall),
            "f1": ratio_text(m.f1),
            "auc": m.auc.map(ratio_text),
        },
    })
}

/// Checks that labels cover every scored patient and that every split
/// patient has a score.
pub fn check_coverage(scores: &Scores, labels: &Labels, split: &Split) -> Result<()> {
    if let Some(id) = scores.keys().find(|id| !labels.contains_key(*id)) {
        return Err(Error::validation(format!("labels file has no entry for scored patient {id}")));
    }
    for id in split.train_ids.iter().chain(&split.test_ids) {
        if !scores.contains_key(id) {
            return Err(Error::validation(format!("split patient {id} has no score")));
        }
    }
    Ok(())
}

/// Calibrates on the training ids and reports both sets.
pub fn evaluate_scores(scores: &Scores, labels: &Labels, split: &Split, objective: ThresholdObjective) -> Result<Value> {
    check_coverage(scores, labels, split)?;
    let threshold = calibrate_threshold_with(scores, labels, &split.train_ids, objective)?;
    let predictions = classify_with_threshold(scores, threshold.value);
    let train_cm = ConfusionMatrix::tally(&predictions, labels, &split.train_ids)?;
    let test_cm = ConfusionMatrix::tally(&predictions, labels, &split.test_ids)?;
    Ok(json!({
        "threshold": threshold,
        "train": set_metrics(&train_cm, scores, labels, &split.train_ids),
        "test": set_metrics(&test_cm, scores, labels, &split.test_ids),
        "split_seed": split.seed,
    }))
}

fn split_json(split: &Split) -> Value {
    json!({
        "train_ids": split.train_ids,
        "test_ids": split.test_ids,
        "seed": split.seed,
        "train_frac": split.train_frac,
    })
}

fn stats_json(client: &JudgeClient) -> Value {
    let s = client.stats();
    json!({ "backend_calls": s.backend_calls, "cache_hits": s.cache_hits, "judge_failures": s.failures })
}

fn with_fields(mut base: Value, fields: Value) -> Value {
    if let (Some(b), Value::Object(f)) = (base.as_object_mut(), fields) {
        b.extend(f);
    }
    base
}

pub fn montage(ctx: &Context, dataset: &Path, art: &mut Artifacts) -> Result<Finished> {
    let patients = load_patients(dataset, None)?;
    let montages = build_montages(ctx, &patients)?;
    write_montages(art, &montages)?;
    Ok(Finished::ok(
        with_fields(ctx.manifest_base(), json!({ "counts": { "patients": patients.len() } })),
        format!("montage: {} patients", patients.len()),
    ))
}

pub fn report(ctx: &Context, dataset: &Path, art: &mut Artifacts) -> Result<Finished> {
    let patients = load_patients(dataset, None)?;
    let montages = build_montages(ctx, &patients)?;
    let client = ctx.client()?;
    write_montages(art, &montages)?;
    let batch = describe_patients(ctx, &client, &montages)?;
    write_reports(art, &batch.reports)?;
    let manifest = with_fields(
        ctx.manifest_base(),
        json!({
            "counts": { "patients": patients.len(), "reports": batch.reports.len(), "report_failures": batch.failures.len() },
            "judge": stats_json(&client),
            "report_failures": batch.failures,
        }),
    );
    let mut finished = Finished::ok(
        manifest,
        format!("report: {} of {} patients described", batch.reports.len(), patients.len()),
    );
    if exceeds(ctx, batch.failures.len(), patients.len()) {
        finished.limit_exceeded = Some(format!("{} of {} reports failed", batch.failures.len(), patients.len()));
    }
    Ok(finished)
}

pub fn rank(ctx: &Context, reports_dir: &Path, art: &mut Artifacts) -> Result<Finished> {
    let reports = read_reports(reports_dir)?;
    check_modes(&reports)?;
    check_opponents(ctx, reports.len())?;
    let client = ctx.client()?;
    let r = rank_reports(ctx, &client, &reports, art)?;
    let manifest = with_fields(
        ctx.manifest_base(),
        json!({
            "counts": { "patients": reports.len(), "tasks": r.tasks, "invalids": r.invalids },
            "judge": stats_json(&client),
        }),
    );
    let mut finished = Finished::ok(manifest, format!("rank: {} comparisons, {} invalid", r.tasks, r.invalids));
    if exceeds(ctx, r.invalids, r.tasks) {
        finished.limit_exceeded = Some(format!("{} of {} comparisons invalid", r.invalids, r.tasks));
    }
    Ok(finished)
}

pub fn ablate_rule_score(
    ctx: &Context,
    reports_dir: &Path,
    labels: Option<&Path>,
    split: Option<&Path>,
    art: &mut Artifacts,
) -> Result<Finished> {
    let reports = read_reports(reports_dir)?;
    let scores = rule_scores(ctx, &reports)?;
    let evaluation = match labels {
        Some(path) => {
            let labels = read_labels(path)?;
            let split = match split {
                Some(p) => read_split(p)?,
                None => stratified_split(&restrict(&labels, &scores), ctx.settings.train_frac, ctx.settings.seed)?,
            };
            Some(evaluate_scores(&scores, &labels, &split, ctx.settings.threshold_objective)?)
        }
        None => None,
    };
    art.write("rule_scores.csv", &rule_scores_csv(&scores)?)?;
    if let Some(m) = &evaluation {
        art.write_json("metrics_rule.json", m)?;
    }
    Ok(Finished::ok(
        with_fields(
            ctx.manifest_base(),
            json!({ "counts": { "patients": scores.len() }, "rule_weights": ctx.weights }),
        ),
        format!("ablate-rule-score: {} patients scored", scores.len()),
    ))
}

fn restrict(labels: &Labels, keep: &Scores) -> Labels {
    labels
        .iter()
        .filter(|(id, _)| keep.contains_key(*id))
        .map(|(id, l)| (id.clone(), *l))
        .collect()
}

pub fn split(ctx: &Context, labels: &Path, art: &mut Artifacts) -> Result<Finished> {
    let labels = read_labels(labels)?;
    let s = stratified_split(&labels, ctx.settings.train_frac, ctx.settings.seed)?;
    art.write_json("split.json", &split_json(&s))?;
    Ok(Finished::ok(
        with_fields(
            ctx.manifest_base(),
            json!({ "counts": { "train": s.train_ids.len(), "test": s.test_ids.len() } }),
        ),
        format!("split: {} train, {} test", s.train_ids.len(), s.test_ids.len()),
    ))
}

pub fn evaluate(ctx: &Context, scores: &Path, labels: &Path, split: &Path, art: &mut Artifacts) -> Result<Finished> {
    let scores_map = read_scores(scores)?;
    let labels_map = read_labels(labels)?;
    let split_v = read_split(split)?;
    let mut metrics = evaluate_scores(&scores_map, &labels_map, &split_v, ctx.settings.threshold_objective)?;
    metrics["inputs"] = json!({
        "scores": scores.display().to_string(),
        "labels": labels.display().to_string(),
        "split": split.display().to_string(),
    });
    art.write_json("metrics.json", &metrics)?;
    Ok(Finished::ok(
        with_fields(ctx.manifest_base(), json!({ "counts": { "patients": scores_map.len() } })),
        format!("evaluate: test F1 {}, AUC {}", metrics["test"]["f1"], metrics["test"]["auc"]),
    ))
}

fn extended(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn simulate(
    ctx: &Context,
    patients: usize,
    noiseless: bool,
    emit_dataset: Option<&Path>,
    art: &mut Artifacts,
) -> Result<Finished> {
    let s = &ctx.settings;
    let oracle = if noiseless {
        OracleConfig {
            seed: s.seed,
            ..OracleConfig::noiseless()
        }
    } else {
        s.oracle()
    };
    let result = run_simulation(patients, s.opponents, &oracle, s.seed)?;
    let rows: Vec<Vec<String>> = result
        .cohort
        .patients
        .iter()
        .zip(&result.scores)
        .map(|(p, sc)| vec![p.patient_id.clone(), p.latent_risk.to_string(), p.label.to_string(), sc.net.to_string()])
        .collect();
    art.write("simulation.csv", &rows_csv(&["patient_id", "latent_risk", "label", "net"], &rows)?)?;
    let summary = json!({
        "spearman_rho": result.spearman_rho,
        "auc": lrmr_core::evaluation::round_half_up(result.auc, 4),
        "auc_exact": ratio_text(result.auc),
        "tasks": result.tasks,
        "config": {
            "patients": patients,
            "opponents": s.opponents,
            "beta": extended(oracle.noise_scale),
            "epsilon": oracle.comparable_band,
            "seed": s.seed,
            "noiseless": noiseless,
            "labeling": "median",
        },
    });
    art.write_json("summary.json", &summary)?;
    if let Some(dir) = emit_dataset {
        fs::create_dir_all(dir)?;
        result.cohort.write_dataset(dir)?;
    }
    Ok(Finished::ok(
        with_fields(
            ctx.manifest_base(),
            json!({ "counts": { "patients": patients, "tasks": result.tasks }, "dataset": emit_dataset.map(|d| d.display().to_string()) }),
        ),
        format!("simulate: rho {:.4}, AUC {}", result.spearman_rho, ratio_text(result.auc)),
    ))
}

pub fn run_all(ctx: &Context, dataset: &Path, labels_path: Option<&Path>, art: &mut Artifacts) -> Result<Finished> {
    let labels_path: PathBuf = labels_path.map(Path::to_path_buf).unwrap_or_else(|| dataset.join("labels.csv"));
    let labels = read_labels(&labels_path)?;
    let patients = load_patients(dataset, Some(&labels))?;
    if let Some(p) = patients.iter().find(|p| p.label.is_none()) {
        return Err(Error::validation(format!("{}: no label for patient {}", labels_path.display(), p.patient_id)));
    }
    check_opponents(ctx, patients.len())?;
    let montages = build_montages(ctx, &patients)?;
    let client = ctx.client()?;

    write_montages(art, &montages)?;
    let batch = describe_patients(ctx, &client, &montages)?;
    write_reports(art, &batch.reports)?;
    let mut counts = json!({
        "patients": patients.len(),
        "reports": batch.reports.len(),
        "report_failures": batch.failures.len(),
    });
    let report_fail = exceeds(ctx, batch.failures.len(), patients.len());
    if report_fail || batch.reports.len() <= ctx.settings.opponents {
        let manifest = with_fields(
            ctx.manifest_base(),
            json!({ "counts": counts, "judge": stats_json(&client), "report_failures": batch.failures }),
        );
        let reason = format!("{} of {} reports failed", batch.failures.len(), patients.len());
        return Ok(Finished {
            manifest,
            summary: format!("run-all: stopped after stage one, {reason}"),
            limit_exceeded: Some(reason),
        });
    }

    let ranked = rank_reports(ctx, &client, &batch.reports, art)?;
    counts["tasks"] = json!(ranked.tasks);
    counts["invalids"] = json!(ranked.invalids);
    if exceeds(ctx, ranked.invalids, ranked.tasks) {
        let reason = format!("{} of {} comparisons invalid", ranked.invalids, ranked.tasks);
        return Ok(Finished {
            manifest: with_fields(ctx.manifest_base(), json!({ "counts": counts, "judge": stats_json(&client) })),
            summary: format!("run-all: stopped after ranking, {reason}"),
            limit_exceeded: Some(reason),
        });
    }

    let scores = read_scores(&art.path("scores.csv"))?;
    let labels = restrict(&labels, &scores);
    let split = stratified_split(&labels, ctx.settings.train_frac, ctx.settings.seed)?;
    art.write_json("split.json", &split_json(&split))?;
    let mut metrics = evaluate_scores(&scores, &labels, &split, ctx.settings.threshold_objective)?;
    metrics["inputs"] = json!({ "scores": "scores.csv", "labels": labels_path.display().to_string(), "split": "split.json" });
    art.write_json("metrics.json", &metrics)?;

    if check_modes(&batch.reports)? == ReportMode::Structured {
        let rule = rule_scores(ctx, &batch.reports)?;
        art.write("rule_scores.csv", &rule_scores_csv(&rule)?)?;
        let mut m = evaluate_scores(&rule, &labels, &split, ctx.settings.threshold_objective)?;
        m["inputs"] = json!({ "scores": "rule_scores.csv", "labels": labels_path.display().to_string(), "split": "split.json" });
        art.write_json("metrics_rule.json", &m)?;
    } else {
        log::info!("freeform reports: skipping the rule-based ablation");
    }

    let summary = format!(
        "run-all: {} patients, {} comparisons, test F1 {}, AUC {}",
        patients.len(),
        ranked.tasks,
        metrics["test"]["f1"],
        metrics["test"]["auc"]
    );
    Ok(Finished::ok(
        with_fields(ctx.manifest_base(), json!({ "counts": counts, "judge": stats_json(&client) })),
        summary,
    ))
}
