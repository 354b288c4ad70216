//! Deterministic offline judges.
//!
//! The mock multimodal judge reads synthetic patches in which each of the ten
//! checklist features is painted as a horizontal band (bright = abnormal), so
//! a montage of such patches can be "described" without a model. The mock
//! text judge scores the two embedded reports with a fixed rule.

use image::{GrayImage, Luma};
use serde_json::{json, Map, Value};

use super::{JudgeBackend, JudgeRequest, TransportError};
use crate::error::{Error, Result};
use crate::montage::{decode_gray, layout_grid};
use crate::prompting::{Choice, Stage, PATIENT_A_HEADER, PATIENT_B_HEADER};
use crate::report::{FeatureId, ReportMode, StructuredReport};
use crate::simulation::{bt_judge, task_seed, OracleConfig};
use crate::tournament::{rule_based_score, RuleWeights};

/// Per-node abnormality flags indexed by [`FeatureId::ordinal`].
pub type FeatureFlags = [bool; 10];

const BAND_ON: u8 = 220;
const BAND_OFF: u8 = 30;

/// Stage-one structured reply whose citations mirror `flags` exactly.
pub fn mock_describe(flags: &[FeatureFlags]) -> String {
    let n = flags.len();
    let mut out = Map::new();
    for feature in FeatureId::ALL {
        let cited: Vec<String> = flags
            .iter()
            .enumerate()
            .filter(|(_, f)| f[feature.ordinal()])
            .map(|(i, _)| format!("N{}", i + 1))
            .collect();
        let summary = if cited.is_empty() {
            format!("No abnormality across {n} node(s).")
        } else {
            format!("Abnormal in {} of {n} node(s).", cited.len())
        };
        out.insert(feature.as_str().into(), json!({"summary": summary, "abnormal_nodes": cited}));
    }
    serde_json::to_string(&Value::Object(out)).expect("json")
}

/// Stage-one free-form reply: only the number of nodes with any finding
/// survives, not which feature or how many features.
pub fn mock_describe_freeform(flags: &[FeatureFlags]) -> String {
    let suspicious = flags.iter().filter(|f| f.iter().any(|&b| b)).count();
    format!(
        "Across the {} visible nodes, {} appear suspicious for metastatic involvement.",
        flags.len(),
        suspicious
    )
}

/// Score a free-form report by the second integer in its text (the
/// suspicious-node count written by [`mock_describe_freeform`]).
pub fn freeform_score(report: &StructuredReport) -> i64 {
    let text = report.freeform_text.as_deref().unwrap_or("");
    let numbers: Vec<i64> = text
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
        .collect();
    numbers.get(1).or(numbers.first()).copied().unwrap_or(0)
}

/// The mock text judge's scoring rule for either report mode.
pub fn mock_rule(weights: &RuleWeights) -> impl Fn(&StructuredReport) -> i64 + '_ {
    move |r| match r.mode {
        ReportMode::Structured => rule_based_score(r, weights).unwrap_or(0),
        ReportMode::Freeform => freeform_score(r),
    }
}

/// Stage-two reply choosing the report with the higher `rule` score.
pub fn mock_compare(
    report_a: &StructuredReport,
    report_b: &StructuredReport,
    rule: impl Fn(&StructuredReport) -> i64,
) -> String {
    let (a, b) = (rule(report_a), rule(report_b));
    let choice = match a.cmp(&b) {
        std::cmp::Ordering::Greater => Choice::A,
        std::cmp::Ordering::Less => Choice::B,
        std::cmp::Ordering::Equal => Choice::Comparable,
    };
    json!({
        "analysis": format!("Rule score {a} for patient A versus {b} for patient B."),
        "choice": choice.to_string(),
    })
    .to_string()
}

/// Synthetic patch with one horizontal band per feature.
pub fn encode_flag_patch(flags: &FeatureFlags, width: u32, height: u32) -> GrayImage {
    GrayImage::from_fn(width, height, |_, y| {
        let band = ((y * 10) / height) as usize;
        Luma([if flags[band.min(9)] { BAND_ON } else { BAND_OFF }])
    })
}

/// Reads back the band flags of every tile in a montage of `node_count`
/// band-encoded patches. Samples the right half of each tile, clear of the label.
pub fn decode_montage_flags(png: &[u8], node_count: u32) -> Result<Vec<FeatureFlags>> {
    let img = decode_gray(png)?;
    let (rows, cols) = layout_grid(node_count)?;
    let tile = img.width() / cols;
    if tile == 0 || img.height() != rows * tile || img.width() != cols * tile {
        return Err(Error::Input(format!(
            "montage {}x{} does not fit a {rows}x{cols} grid",
            img.width(),
            img.height()
        )));
    }
    let mut flags = Vec::with_capacity(node_count as usize);
    for i in 0..node_count {
        let (r, c) = (i / cols, i % cols);
        let mut f = [false; 10];
        for (band, slot) in f.iter_mut().enumerate() {
            let y = r * tile + ((2 * band as u32 + 1) * tile) / 20;
            let xs = (c * tile + tile * 5 / 8)..(c * tile + tile * 7 / 8);
            let n = xs.len() as u32;
            let sum: u32 = xs.map(|x| img.get_pixel(x, y).0[0] as u32).sum();
            *slot = sum / n.max(1) >= 128;
        }
        flags.push(f);
    }
    Ok(flags)
}

/// Largest `N{i}` label mentioned in `text`.
pub fn max_node_label_in(text: &str) -> u32 {
    let bytes = text.as_bytes();
    let mut best = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'N' || (i > 0 && bytes[i - 1].is_ascii_alphanumeric()) {
            continue;
        }
        let digits: String = text[i + 1..].chars().take_while(char::is_ascii_digit).collect();
        if let Ok(v) = digits.parse::<u32>() {
            best = best.max(v);
        }
    }
    best
}

/// Recovers the two blinded reports embedded in a stage-two prompt. Each
/// sits on the line after its header.
pub fn embedded_reports(prompt: &str) -> Result<(StructuredReport, StructuredReport)> {
    let after = |header: &str| -> Result<StructuredReport> {
        let mut lines = prompt.lines();
        lines
            .by_ref()
            .find(|l| l.trim() == header)
            .ok_or_else(|| Error::Input(format!("prompt lacks {header:?}")))?;
        let body = lines.next().ok_or_else(|| Error::Input(format!("nothing after {header:?}")))?;
        StructuredReport::from_blinded_json(body)
    };
    Ok((after(PATIENT_A_HEADER)?, after(PATIENT_B_HEADER)?))
}

#[derive(Debug, Clone, Default)]
pub struct MockOptions {
    pub weights: RuleWeights,
    pub oracle: OracleConfig,
}

fn describe(request: &JudgeRequest) -> std::result::Result<String, TransportError> {
    let png = request
        .image
        .as_ref()
        .ok_or_else(|| TransportError("stage-one request without image".into()))?;
    let k = max_node_label_in(&request.prompt.text);
    let flags = decode_montage_flags(png, k.max(1)).map_err(|e| TransportError(e.to_string()))?;
    Ok(match request.prompt.mode {
        ReportMode::Structured => mock_describe(&flags),
        ReportMode::Freeform => mock_describe_freeform(&flags),
    })
}

/// Fully deterministic judge for both stages.
#[derive(Debug, Clone, Default)]
pub struct MockJudge {
    options: MockOptions,
}

impl MockJudge {
    pub fn new(options: MockOptions) -> Self {
        MockJudge { options }
    }
}

impl JudgeBackend for MockJudge {
    fn complete(&self, request: &JudgeRequest) -> std::result::Result<String, TransportError> {
        match request.prompt.stage {
            Stage::One => describe(request),
            Stage::Two => {
                let (a, b) = embedded_reports(&request.prompt.text).map_err(|e| TransportError(e.to_string()))?;
                Ok(mock_compare(&a, &b, mock_rule(&self.options.weights)))
            }
        }
    }
}

/// Stage one as [`MockJudge`]; stage two is a seeded Bradley–Terry comparator
/// over the rule scores of the two reports. The per-request seed comes from
/// the prompt text, so replies are reproducible and cacheable.
#[derive(Debug, Clone, Default)]
pub struct OracleJudge {
    options: MockOptions,
}

impl OracleJudge {
    pub fn new(options: MockOptions) -> Self {
        OracleJudge { options }
    }
}

impl JudgeBackend for OracleJudge {
    fn complete(&self, request: &JudgeRequest) -> std::result::Result<String, TransportError> {
        match request.prompt.stage {
            Stage::One => describe(request),
            Stage::Two => {
                let (a, b) = embedded_reports(&request.prompt.text).map_err(|e| TransportError(e.to_string()))?;
                let rule = mock_rule(&self.options.weights);
                let (ra, rb) = (rule(&a) as f64, rule(&b) as f64);
                let digest = crate::canonical::sha256_hex(request.prompt.text.as_bytes());
                let prompt_seed = u64::from_str_radix(&digest[..16], 16).expect("hex");
                let choice = bt_judge(ra, rb, &self.options.oracle, task_seed(self.options.oracle.seed, prompt_seed));
                Ok(json!({
                    "analysis": format!("Bradley-Terry draw on rule scores {ra} vs {rb}."),
                    "choice": choice.to_string(),
                })
                .to_string())
            }
        }
    }
}
