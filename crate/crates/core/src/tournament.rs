//! Pairwise comparison scheduling, execution through a judge, net-wins
//! aggregation and ranking, plus the rule-based scorer used when the
//! comparison stage is ablated.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::judge::{map_bounded, JudgeClient, JudgeRequest};
use crate::prompting::{parse_comparison, Choice, ComparisonVerdict, PromptTemplates};
use crate::report::{FeatureId, ReportMode, StructuredReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub n_opponents: usize,
    pub seed: u64,
    pub randomize_position: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            n_opponents: 6,
            seed: 0,
            randomize_position: true,
        }
    }
}

/// Which side of a task is shown to the judge as "Patient A".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    InitiatorA,
    OpponentA,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Position::InitiatorA => "initiator_a",
            Position::OpponentA => "opponent_a",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComparisonTask {
    pub task_id: usize,
    pub initiator: String,
    pub opponent: String,
    pub position_map: Position,
}

impl ComparisonTask {
    pub fn patient_a(&self) -> &str {
        match self.position_map {
            Position::InitiatorA => &self.initiator,
            Position::OpponentA => &self.opponent,
        }
    }

    pub fn patient_b(&self) -> &str {
        match self.position_map {
            Position::InitiatorA => &self.opponent,
            Position::OpponentA => &self.initiator,
        }
    }
}

/// For every patient in order, draws `n_opponents` distinct other patients
/// from a ChaCha8 stream seeded with `config.seed`, then (optionally) a coin
/// for the A/B presentation of each pair.
pub fn schedule_pairs(patient_ids: &[String], config: &SchedulerConfig) -> Result<Vec<ComparisonTask>> {
    let m = patient_ids.len();
    if m < 2 {
        return Err(Error::config(format!("need at least 2 patients to schedule, got {m}")));
    }
    if config.n_opponents == 0 || config.n_opponents >= m {
        return Err(Error::config(format!(
            "n_opponents must be in 1..={} for a cohort of {m}, got {}",
            m - 1,
            config.n_opponents
        )));
    }
    let mut seen = HashSet::with_capacity(m);
    if let Some(dup) = patient_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::validation(format!("duplicate patient id {dup}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tasks = Vec::with_capacity(m * config.n_opponents);
    for (i, initiator) in patient_ids.iter().enumerate() {
        let mut pool: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        for slot in 0..config.n_opponents {
            let pick = rng.random_range(slot as u64..pool.len() as u64) as usize;
            pool.swap(slot, pick);
        }
        for &j in &pool[..config.n_opponents] {
            let position_map = if config.randomize_position && rng.random_range(0..2u64) == 1 {
                Position::OpponentA
            } else {
                Position::InitiatorA
            };
            tasks.push(ComparisonTask {
                task_id: tasks.len(),
                initiator: initiator.clone(),
                opponent: patient_ids[j].clone(),
                position_map,
            });
        }
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonOutcome {
    pub task: ComparisonTask,
    /// `None` when the judge failed after all retries.
    pub verdict: Option<ComparisonVerdict>,
    pub cache_hit: bool,
    pub failure: Option<String>,
}

impl ComparisonOutcome {
    pub fn decided(task: ComparisonTask, choice: Choice) -> Self {
        ComparisonOutcome {
            task,
            verdict: Some(ComparisonVerdict {
                choice,
                analysis: String::new(),
            }),
            cache_hit: false,
            failure: None,
        }
    }

    pub fn invalid(task: ComparisonTask, cause: impl Into<String>) -> Self {
        ComparisonOutcome {
            task,
            verdict: None,
            cache_hit: false,
            failure: Some(cause.into()),
        }
    }

    pub fn is_invalid(&self) -> bool {
        self.verdict.is_none()
    }

    pub fn winner(&self) -> Option<&str> {
        match self.verdict.as_ref()?.choice {
            Choice::A => Some(self.task.patient_a()),
            Choice::B => Some(self.task.patient_b()),
            Choice::Comparable => None,
        }
    }

    pub fn loser(&self) -> Option<&str> {
        match self.verdict.as_ref()?.choice {
            Choice::A => Some(self.task.patient_b()),
            Choice::B => Some(self.task.patient_a()),
            Choice::Comparable => None,
        }
    }

    pub fn choice_label(&self) -> String {
        match &self.verdict {
            Some(v) => v.choice.to_string(),
            None => "Invalid".into(),
        }
    }

    /// One line of `comparisons.jsonl`. The completion journal adds `cache_hit`.
    pub fn to_record(&self, with_cache_hit: bool) -> Value {
        let analysis = match (&self.verdict, &self.failure) {
            (Some(v), _) => v.analysis.clone(),
            (None, Some(cause)) => cause.clone(),
            (None, None) => String::new(),
        };
        let mut v = json!({
            "task_id": self.task.task_id,
            "initiator": self.task.initiator,
            "opponent": self.task.opponent,
            "position_map": self.task.position_map,
            "choice": self.choice_label(),
            "analysis": analysis,
        });
        if with_cache_hit {
            v["cache_hit"] = json!(self.cache_hit);
        }
        v
    }
}

/// Judges every task, each through its own stage-two prompt, with up to
/// `max_in_flight` calls at once. Failed tasks become Invalid outcomes. The
/// result is ordered by task id regardless of completion order.
pub fn run_tournament(
    tasks: &[ComparisonTask],
    reports: &HashMap<String, StructuredReport>,
    judge: &JudgeClient,
    templates: &PromptTemplates,
    on_complete: Option<&(dyn Fn(&ComparisonOutcome) + Sync)>,
) -> Result<Vec<ComparisonOutcome>> {
    let mut mode: Option<ReportMode> = None;
    for task in tasks {
        for id in [&task.initiator, &task.opponent] {
            let report = reports
                .get(id)
                .ok_or_else(|| Error::validation(format!("no report for patient {id}")))?;
            match mode {
                None => mode = Some(report.mode),
                Some(m) if m != report.mode => {
                    return Err(Error::validation("reports mix structured and freeform modes"));
                }
                _ => {}
            }
        }
    }

    let mut outcomes = map_bounded(tasks, judge.config().max_in_flight, |_, task| {
        let a = &reports[task.patient_a()];
        let b = &reports[task.patient_b()];
        let outcome = templates
            .stage2(a, b)
            .and_then(|prompt| JudgeRequest::stage_two(prompt, judge.config()))
            .map_err(|e| e.to_string())
            .and_then(|request| judge.invoke(&request, parse_comparison).map_err(|e| e.to_string()));
        let outcome = match outcome {
            Ok((verdict, response)) => ComparisonOutcome {
                task: task.clone(),
                verdict: Some(verdict),
                cache_hit: response.cache_hit,
                failure: None,
            },
            Err(cause) => {
                log::warn!("task {} invalid: {cause}", task.task_id);
                ComparisonOutcome::invalid(task.clone(), cause)
            }
        };
        if let Some(cb) = on_complete {
            cb(&outcome);
        }
        outcome
    });
    outcomes.sort_by_key(|o| o.task.task_id);
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskScore {
    pub patient_id: String,
    pub wins: u32,
    pub losses: u32,
    pub comparables: u32,
    pub invalids: u32,
    pub net: i64,
}

impl RiskScore {
    pub fn zero(patient_id: impl Into<String>) -> Self {
        RiskScore {
            patient_id: patient_id.into(),
            wins: 0,
            losses: 0,
            comparables: 0,
            invalids: 0,
            net: 0,
        }
    }
}

/// Tallies outcomes into per-patient scores, in `patient_ids` order. With
/// `credit_opponent` every comparison counts for both participants;
/// otherwise only the initiator's side is tallied.
pub fn aggregate_scores_with(
    outcomes: &[ComparisonOutcome],
    patient_ids: &[String],
    credit_opponent: bool,
) -> Result<Vec<RiskScore>> {
    let index: HashMap<&str, usize> = patient_ids.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut scores: Vec<RiskScore> = patient_ids.iter().map(RiskScore::zero).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("outcome references unknown patient {id}")))
    };
    for o in outcomes {
        let ini = lookup(&o.task.initiator)?;
        let opp = lookup(&o.task.opponent)?;
        let mut sides = vec![ini];
        if credit_opponent {
            sides.push(opp);
        }
        for side in sides {
            let id = patient_ids[side].as_str();
            let s = &mut scores[side];
            match &o.verdict {
                None => s.invalids += 1,
                Some(v) if v.choice == Choice::Comparable => s.comparables += 1,
                Some(_) if o.winner() == Some(id) => s.wins += 1,
                Some(_) => s.losses += 1,
            }
        }
    }
    for s in &mut scores {
        s.net = s.wins as i64 - s.losses as i64;
    }
    Ok(scores)
}

pub fn aggregate_scores(outcomes: &[ComparisonOutcome], patient_ids: &[String]) -> Result<Vec<RiskScore>> {
    aggregate_scores_with(outcomes, patient_ids, true)
}

/// Net descending, then wins descending, then patient id ascending.
pub fn rank_patients(scores: &[RiskScore]) -> Vec<String> {
    let mut sorted: Vec<&RiskScore> = scores.iter().collect();
    sorted.sort_by(|a, b| {
        b.net
            .cmp(&a.net)
            .then(b.wins.cmp(&a.wins))
            .then_with(|| a.patient_id.cmp(&b.patient_id))
    });
    sorted.into_iter().map(|s| s.patient_id.clone()).collect()
}

/// Per-feature integer weights for [`rule_based_score`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleWeights(pub BTreeMap<FeatureId, i64>);

impl Default for RuleWeights {
    fn default() -> Self {
        RuleWeights(
            FeatureId::ALL
                .into_iter()
                .map(|f| {
                    let w = match f {
                        FeatureId::Necrosis => 3,
                        FeatureId::BorderContour | FeatureId::BorderClarity | FeatureId::FattyHilumAbsence => 2,
                        _ => 1,
                    };
                    (f, w)
                })
                .collect(),
        )
    }
}

impl RuleWeights {
    pub fn get(&self, feature: FeatureId) -> i64 {
        self.0.get(&feature).copied().unwrap_or(0)
    }

    /// Parses `feature = weight` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut weights = RuleWeights::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("weights line {}: expected feature = weight", n + 1)))?;
            let feature = FeatureId::from_name(k)
                .ok_or_else(|| Error::config(format!("weights line {}: unknown feature {:?}", n + 1, k.trim())))?;
            let w: i64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("weights line {}: {:?} is not an integer", n + 1, v.trim())))?;
            weights.0.insert(feature, w);
        }
        Ok(weights)
    }
}

/// Σ over features of weight × number of cited abnormal nodes.
pub fn rule_based_score(report: &StructuredReport, weights: &RuleWeights) -> Result<i64> {
    if report.mode != ReportMode::Structured {
        return Err(Error::validation(format!(
            "rule-based scoring needs a structured report; {} is freeform",
            report.patient_id
        )));
    }
    Ok(report
        .findings
        .iter()
        .map(|f| weights.get(f.feature) * f.abnormal_nodes.len() as i64)
        .sum())
}
