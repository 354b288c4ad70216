//! Synthetic cohorts with known latent risk, a Bradley–Terry comparator, and
//! an end-to-end harness measuring how well net-wins ranking recovers the
//! latent order.

use std::collections::HashMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::compute_auc;
use crate::judge::mock::{encode_flag_patch, mock_describe, mock_describe_freeform, FeatureFlags};
use crate::montage::encode_png;
use crate::prompting::{parse_report, Choice};
use crate::report::{ReportMode, StructuredReport};
use crate::tournament::{aggregate_scores, schedule_pairs, ComparisonOutcome, RiskScore, SchedulerConfig};

/// Per-feature scale on the probability that a node shows the feature:
/// `p = latent_risk * salience`.
pub const FEATURE_SALIENCE: [f64; 10] = [0.5, 0.45, 0.4, 0.4, 0.35, 0.3, 0.5, 0.3, 0.25, 0.2];

pub const DEFAULT_NODES: RangeInclusive<u32> = 1..=8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub latent_risk: f64,
    pub label: u8,
    pub flags: Vec<FeatureFlags>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohort {
    pub patients: Vec<SyntheticPatient>,
    pub seed: u64,
}

pub fn generate_cohort(m: usize, nodes_per_patient: RangeInclusive<u32>, seed: u64) -> Result<SyntheticCohort> {
    if m < 2 {
        return Err(Error::config(format!("cohort size must be >= 2, got {m}")));
    }
    if *nodes_per_patient.start() == 0 || nodes_per_patient.is_empty() {
        return Err(Error::config("nodes per patient must be a non-empty range starting at >= 1"));
    }
    let width = m.to_string().len().max(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patients = Vec::with_capacity(m);
    for i in 0..m {
        let latent_risk: f64 = rng.random();
        let k = rng.random_range(*nodes_per_patient.start() as u64..=*nodes_per_patient.end() as u64);
        let flags = (0..k)
            .map(|_| {
                let mut f = [false; 10];
                for (slot, salience) in f.iter_mut().zip(FEATURE_SALIENCE) {
                    *slot = rng.random::<f64>() < latent_risk * salience;
                }
                f
            })
            .collect();
        patients.push(SyntheticPatient {
            patient_id: format!("s{i:0width$}"),
            latent_risk,
            label: 0,
            flags,
        });
    }
    let mut sorted: Vec<f64> = patients.iter().map(|p| p.latent_risk).collect();
    sorted.sort_by(f64::total_cmp);
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    };
    for p in &mut patients {
        p.label = u8::from(p.latent_risk >= median);
    }
    Ok(SyntheticCohort { patients, seed })
}

impl SyntheticCohort {
    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    /// Stage-one reports as the mock judge would write them.
    pub fn reports(&self, mode: ReportMode) -> Result<HashMap<String, StructuredReport>> {
        self.patients
            .iter()
            .map(|p| {
                let raw = match mode {
                    ReportMode::Structured => mock_describe(&p.flags),
                    ReportMode::Freeform => mock_describe_freeform(&p.flags),
                };
                let report = parse_report(&raw, &p.patient_id, p.flags.len() as u32, mode)?;
                Ok((p.patient_id.clone(), report))
            })
            .collect()
    }

    /// Writes `{dir}/{id}/nodes/{001..}.png` band-encoded patches and `{dir}/labels.csv`.
    pub fn write_dataset(&self, dir: &Path) -> Result<()> {
        let mut labels = String::from("patient_id,label\n");
        for p in &self.patients {
            let nodes = dir.join(&p.patient_id).join("nodes");
            fs::create_dir_all(&nodes)?;
            for (i, f) in p.flags.iter().enumerate() {
                let width = 48 + (i as u32 * 13) % 32;
                fs::write(nodes.join(format!("{:03}.png", i + 1)), encode_png(&encode_flag_patch(f, width, 60)))?;
            }
            labels.push_str(&format!("{},{}\n", p.patient_id, p.label));
        }
        fs::write(dir.join("labels.csv"), labels)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Logistic slope β; `f64::INFINITY` gives the deterministic sign rule.
    pub noise_scale: f64,
    /// Risk differences below ε are judged Comparable.
    pub comparable_band: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            noise_scale: 8.0,
            comparable_band: 0.02,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn noiseless() -> Self {
        OracleConfig {
            noise_scale: f64::INFINITY,
            comparable_band: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale > 0.0) {
            return Err(Error::config(format!("noise scale must be > 0, got {}", self.noise_scale)));
        }
        if !(self.comparable_band >= 0.0) {
            return Err(Error::config(format!("comparable band must be >= 0, got {}", self.comparable_band)));
        }
        Ok(())
    }
}

/// `σ(β (a − b))`.
pub fn bt_win_probability(risk_a: f64, risk_b: f64, noise_scale: f64) -> f64 {
    1.0 / (1.0 + (-noise_scale * (risk_a - risk_b)).exp())
}

/// Mixes a run seed and a task id into an independent stream seed.
pub fn task_seed(run_seed: u64, task_id: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"lrmr-task");
    h.update(run_seed.to_le_bytes());
    h.update(task_id.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn bt_judge(risk_a: f64, risk_b: f64, config: &OracleConfig, task_seed: u64) -> Choice {
    let diff = risk_a - risk_b;
    if diff.abs() < config.comparable_band || (diff == 0.0 && config.noise_scale.is_infinite()) {
        return Choice::Comparable;
    }
    let p = bt_win_probability(risk_a, risk_b, config.noise_scale);
    let u: f64 = ChaCha8Rng::seed_from_u64(task_seed).random();
    if u < p {
        Choice::A
    } else {
        Choice::B
    }
}

/// Spearman correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub spearman_rho: f64,
    pub auc: Ratio<u64>,
    pub scores: Vec<RiskScore>,
    pub cohort: SyntheticCohort,
    pub tasks: usize,
}

/// Cohort → schedule → Bradley–Terry verdicts → net wins → AUC against the
/// median labels and Spearman ρ against latent risk.
pub fn run_simulation(m: usize, n_opponents: usize, oracle: &OracleConfig, seed: u64) -> Result<SimulationResult> {
    oracle.validate()?;
    let cohort = generate_cohort(m, DEFAULT_NODES, seed)?;
    let ids = cohort.ids();
    let risk: HashMap<&str, f64> = cohort
        .patients
        .iter()
        .map(|p| (p.patient_id.as_str(), p.latent_risk))
        .collect();
    let tasks = schedule_pairs(
        &ids,
        &SchedulerConfig {
            n_opponents,
            seed,
            randomize_position: true,
        },
    )?;
    let stream = seed ^ oracle.seed.rotate_left(32);
    let outcomes: Vec<ComparisonOutcome> = tasks
        .iter()
        .map(|t| {
            let choice = bt_judge(
                risk[t.patient_a()],
                risk[t.patient_b()],
                oracle,
                task_seed(stream, t.task_id as u64),
            );
            ComparisonOutcome::decided(t.clone(), choice)
        })
        .collect();
    let scores = aggregate_scores(&outcomes, &ids)?;
    let nets: Vec<f64> = scores.iter().map(|s| s.net as f64).collect();
    let latents: Vec<f64> = cohort.patients.iter().map(|p| p.latent_risk).collect();
    let labels: Vec<u8> = cohort.patients.iter().map(|p| p.label).collect();
    Ok(SimulationResult {
        spearman_rho: spearman_rho(&nets, &latents),
        auc: compute_auc(&nets, &labels)?,
        scores,
        tasks: tasks.len(),
        cohort,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tournament::{rank_patients, rule_based_score, RuleWeights};

    #[test]
    fn cohort_deterministic_and_median_labelled() {
        let a = generate_cohort(40, DEFAULT_NODES, 7).unwrap();
        assert_eq!(a, generate_cohort(40, DEFAULT_NODES, 7).unwrap());
        let c = generate_cohort(100, DEFAULT_NODES, 3).unwrap();
        assert_eq!(c.patients.iter().filter(|p| p.label == 1).count(), 50);
        assert!(generate_cohort(1, DEFAULT_NODES, 0).is_err());
        assert!(c.patients.iter().all(|p| (1..=8).contains(&(p.flags.len() as u32))));
    }

    #[test]
    fn zero_risk_has_no_flags() {
        let mut c = generate_cohort(5, 3..=3, 1).unwrap();
        // regenerate flags through the same rule with latent risk 0
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        c.patients[0].latent_risk = 0.0;
        c.patients[0].flags = (0..3)
            .map(|_| {
                let mut f = [false; 10];
                for (slot, s) in f.iter_mut().zip(FEATURE_SALIENCE) {
                    *slot = rng.random::<f64>() < 0.0 * s;
                }
                f
            })
            .collect();
        let reports = c.reports(ReportMode::Structured).unwrap();
        assert_eq!(rule_based_score(&reports[&c.patients[0].patient_id], &RuleWeights::default()).unwrap(), 0);
    }

    #[test]
    fn label_coherence() {
        for seed in 0..10 {
            let c = generate_cohort(31 + seed as usize, DEFAULT_NODES, seed).unwrap();
            let lat: Vec<f64> = c.patients.iter().map(|p| p.latent_risk).collect();
            let lab: Vec<u8> = c.patients.iter().map(|p| p.label).collect();
            assert_eq!(compute_auc(&lat, &lab).unwrap(), Ratio::from_integer(1));
        }
    }

    #[test]
    fn bt_examples() {
        let cfg = OracleConfig { comparable_band: 0.05, ..Default::default() };
        assert_eq!(bt_judge(0.3, 0.3, &cfg, 1), Choice::Comparable);
        let sharp = OracleConfig { noise_scale: 1e9, comparable_band: 0.01, seed: 0 };
        for s in 0..200 {
            assert_eq!(bt_judge(0.6, 0.5, &sharp, s), Choice::A);
        }
        for d in [-2.0, -0.3, 0.0, 0.1, 1.5] {
            let p = bt_win_probability(0.5 + d, 0.5, 3.0);
            let q = bt_win_probability(0.5, 0.5 + d, 3.0);
            assert!((p + q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bt_frequency_matches_probability() {
        let cfg = OracleConfig { noise_scale: 2.0, comparable_band: 0.0, seed: 0 };
        let n = 20_000;
        let wins = (0..n).filter(|&s| bt_judge(0.8, 0.3, &cfg, task_seed(9, s)) == Choice::A).count();
        let p = bt_win_probability(0.8, 0.3, 2.0);
        assert!((wins as f64 / n as f64 - p).abs() < 0.015);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman_rho(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), 0.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn noiseless_round_robin_recovers_latent_order() {
        let r = run_simulation(12, 11, &OracleConfig::noiseless(), 0).unwrap();
        assert_eq!(r.spearman_rho, 1.0);
        assert_eq!(r.auc, Ratio::from_integer(1));
        let mut by_latent = r.cohort.patients.clone();
        by_latent.sort_by(|a, b| b.latent_risk.total_cmp(&a.latent_risk));
        let expected: Vec<String> = by_latent.into_iter().map(|p| p.patient_id).collect();
        assert_eq!(rank_patients(&r.scores), expected);
    }

    #[test]
    fn wide_band_gives_all_ties() {
        let cfg = OracleConfig { noise_scale: 8.0, comparable_band: 2.0, seed: 0 };
        let r = run_simulation(20, 5, &cfg, 4).unwrap();
        assert!(r.scores.iter().all(|s| s.net == 0 && s.comparables > 0));
        assert_eq!(r.auc, Ratio::new(1, 2));
    }

    #[test]
    fn dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(3, 2..=2, 5).unwrap();
        c.write_dataset(dir.path()).unwrap();
        let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        assert_eq!(labels.lines().count(), 4);
        assert!(dir.path().join("s000/nodes/002.png").exists());
    }
}
