use std::collections::HashMap;
use std::sync::Arc;

use lrmr_core::canonical::{sha256_hex, to_canonical_json};
use lrmr_core::judge::mock::{MockJudge, MockOptions};
use lrmr_core::judge::{BackendConfig, JudgeClient, JudgeRequest, ResponseCache};
use lrmr_core::montage::{build_montage, MontageConfig};
use lrmr_core::prompting::{parse_report, PromptTemplates};
use lrmr_core::report::{PatientRecord, ReportMode};
use lrmr_core::simulation::{generate_cohort, run_simulation, OracleConfig};
use lrmr_core::tournament::{
    aggregate_scores, rank_patients, rule_based_score, run_tournament, schedule_pairs, RuleWeights, SchedulerConfig,
};
use num_rational::Ratio;
use serde_json::Value;

fn golden() -> Value {
    serde_json::from_str(include_str!("data/golden.json")).unwrap()
}

fn parse_ratio(s: &str) -> Ratio<u64> {
    let (n, d) = s.split_once('/').unwrap();
    Ratio::new(n.parse().unwrap(), d.parse().unwrap())
}

#[test]
fn simulation_auc_matches_golden() {
    let g = &golden()["simulation"];
    let oracle = OracleConfig {
        noise_scale: g["beta"].as_f64().unwrap(),
        comparable_band: g["epsilon"].as_f64().unwrap(),
        seed: 0,
    };
    let r = run_simulation(
        g["patients"].as_u64().unwrap() as usize,
        g["opponents"].as_u64().unwrap() as usize,
        &oracle,
        g["seed"].as_u64().unwrap(),
    )
    .unwrap();
    assert_eq!(r.auc, parse_ratio(g["auc"].as_str().unwrap()));
}

#[test]
fn schedule_digest_matches_golden() {
    let g = &golden()["schedule"];
    let ids: Vec<String> = (1..=117).map(|i| format!("P{i:03}")).collect();
    let tasks = schedule_pairs(&ids, &SchedulerConfig::default()).unwrap();
    assert_eq!(tasks.len() as u64, g["tasks"].as_u64().unwrap());
    assert_eq!(sha256_hex(to_canonical_json(&tasks).unwrap().as_bytes()), g["sha256"].as_str().unwrap());
}

/// Synthetic patches → montage → mock judge → reports that cite exactly the
/// generating flags → tournament whose ranking follows the rule score.
#[test]
fn mock_pipeline_recovers_generated_reports() {
    let cohort = generate_cohort(14, 1..=9, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cohort.write_dataset(dir.path()).unwrap();
    let expected = cohort.reports(ReportMode::Structured).unwrap();

    let config = BackendConfig::default();
    let cache = ResponseCache::new(dir.path().join("cache")).unwrap();
    let client = JudgeClient::new(Arc::new(MockJudge::new(MockOptions::default())), config, Some(cache)).unwrap();
    let templates = PromptTemplates::default();

    let mut reports = HashMap::new();
    for p in &cohort.patients {
        let images = lrmr_core::montage::load_patches(&dir.path().join(&p.patient_id).join("nodes")).unwrap();
        let record = PatientRecord::new(p.patient_id.clone(), Some(p.label), images).unwrap();
        let montage = build_montage(&record, &MontageConfig::default()).unwrap();
        let k = record.node_count();
        let prompt = templates.stage1(k, ReportMode::Structured).unwrap();
        let request = JudgeRequest::stage_one(prompt, montage.png_bytes(), client.config()).unwrap();
        let (report, _) = client
            .invoke(&request, |raw| parse_report(raw, &p.patient_id, k, ReportMode::Structured))
            .unwrap();
        assert_eq!(report, expected[&p.patient_id], "{}", p.patient_id);
        reports.insert(p.patient_id.clone(), report);
    }

    let ids = cohort.ids();
    let tasks = schedule_pairs(&ids, &SchedulerConfig { n_opponents: ids.len() - 1, seed: 1, randomize_position: true }).unwrap();
    let outcomes = run_tournament(&tasks, &reports, &client, &templates, None).unwrap();
    assert!(outcomes.iter().all(|o| !o.is_invalid()));
    let ranking = rank_patients(&aggregate_scores(&outcomes, &ids).unwrap());
    let weights = RuleWeights::default();
    let rule: Vec<i64> = ranking.iter().map(|id| rule_based_score(&reports[id], &weights).unwrap()).collect();
    assert!(rule.windows(2).all(|w| w[0] >= w[1]), "{rule:?}");

    let before = client.stats();
    let again = run_tournament(&tasks, &reports, &client, &templates, None).unwrap();
    assert_eq!(client.stats().backend_calls, before.backend_calls);
    assert_eq!((client.stats().cache_hits - before.cache_hits) as usize, tasks.len());
    assert!(again.iter().all(|o| o.cache_hit));
}
