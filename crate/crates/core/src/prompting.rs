//! Prompt construction for both judge stages and parsing of judge replies.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::canonical::sha256_hex;
use crate::error::{Error, Result};
use crate::report::{
    validate_report, FeatureFinding, FeatureId, NodeLabel, ReportMode, StructuredReport, ValidationResult,
    Violation,
};

/// Sentence every stage-one structured template must contain.
pub const JSON_INSTRUCTION: &str = "Respond with a single JSON object and nothing else.";

/// Header lines under which stage-two prompts embed each report.
pub const PATIENT_A_HEADER: &str = "Patient A report:";
pub const PATIENT_B_HEADER: &str = "Patient B report:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub stage: Stage,
    pub mode: ReportMode,
}

/// Why a judge reply could not be turned into a domain object.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    /// Malformed or missing JSON; the caller may re-ask.
    #[error("parse error: {0}")]
    Parse(String),
    /// Well-formed JSON that breaks the report schema.
    #[error("schema violation: {0}")]
    Schema(ValidationResult),
}

impl ResponseError {
    pub fn is_recoverable(&self) -> bool {
        matches!(self, ResponseError::Parse(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    Comparable,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Choice::A => "A",
            Choice::B => "B",
            Choice::Comparable => "Comparable",
        })
    }
}

impl Choice {
    pub fn swapped(self) -> Choice {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
            Choice::Comparable => Choice::Comparable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonVerdict {
    pub choice: Choice,
    pub analysis: String,
}

impl ComparisonVerdict {
    pub fn to_json(&self) -> String {
        crate::canonical::to_canonical_json(self).expect("verdict serializes")
    }
}

/// The three prompt templates, loaded from the repository's `prompts/`
/// directory at build time or from a directory at run time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub stage1_structured: String,
    pub stage1_freeform: String,
    pub stage2: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            stage1_structured: include_str!("../prompts/stage1_structured.txt").to_string(),
            stage1_freeform: include_str!("../prompts/stage1_freeform.txt").to_string(),
            stage2: include_str!("../prompts/stage2.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|e| Error::Input(format!("{}: {e}", dir.join(name).display())))
        };
        Ok(PromptTemplates {
            stage1_structured: read("stage1_structured.txt")?,
            stage1_freeform: read("stage1_freeform.txt")?,
            stage2: read("stage2.txt")?,
        })
    }

    /// `v1-` followed by a content hash of all three templates.
    pub fn version(&self) -> String {
        let joined = [&self.stage1_structured, &self.stage1_freeform, &self.stage2]
            .iter()
            .map(|s| format!("{}:{}", s.len(), s))
            .collect::<String>();
        format!("v1-{}", &sha256_hex(joined.as_bytes())[..12])
    }

    pub fn stage1(&self, node_count: u32, mode: ReportMode) -> Result<PromptText> {
        if node_count == 0 {
            return Err(Error::validation("node_count must be >= 1"));
        }
        let labels = (1..=node_count).map(|i| format!("N{i}")).collect::<Vec<_>>().join(", ");
        let template = match mode {
            ReportMode::Structured => &self.stage1_structured,
            ReportMode::Freeform => &self.stage1_freeform,
        };
        Ok(PromptText {
            text: render(template, &[("node_labels", &labels)])?,
            stage: Stage::One,
            mode,
        })
    }

    pub fn stage2(&self, report_a: &StructuredReport, report_b: &StructuredReport) -> Result<PromptText> {
        if report_a.mode != report_b.mode {
            return Err(Error::validation(format!(
                "cannot compare a {} report with a {} report",
                report_a.mode, report_b.mode
            )));
        }
        let a = report_a.blinded_json();
        let b = report_b.blinded_json();
        Ok(PromptText {
            text: render(&self.stage2, &[("report_a", &a), ("report_b", &b)])?,
            stage: Stage::Two,
            mode: report_a.mode,
        })
    }
}

/// Single-pass `{{name}}` substitution; substituted text is not re-scanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| Error::config("unterminated placeholder in prompt template"))?;
        let name = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::config(format!("unknown placeholder {{{{{name}}}}} in prompt template")))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn build_stage1_prompt(node_count: u32, mode: ReportMode) -> Result<PromptText> {
    PromptTemplates::default().stage1(node_count, mode)
}

pub fn build_stage2_prompt(report_a: &StructuredReport, report_b: &StructuredReport) -> Result<PromptText> {
    PromptTemplates::default().stage2(report_a, report_b)
}

/// Returns the object opened by the first `{` after dropping code-fence lines.
pub fn extract_json_payload(raw: &str) -> std::result::Result<String, ResponseError> {
    let unfenced: String = if raw.contains("```") {
        raw.lines()
            .filter(|l| !l.trim_start().starts_with("```"))
            .collect::<Vec<_>>()
            .join("\n")
    } else {
        raw.to_string()
    };
    // An opening brace that never closes encloses everything after it, so
    // no maximal object exists; truncated replies land here.
    let start = unfenced
        .find('{')
        .ok_or_else(|| ResponseError::Parse("no JSON object found in judge output".into()))?;
    match balanced_end(&unfenced.as_bytes()[start..]) {
        Some(end) => Ok(unfenced[start..start + end].to_string()),
        None => Err(ResponseError::Parse("unterminated JSON object in judge output".into())),
    }
}

/// Length of the balanced object starting at `bytes[0] == b'{'`, honouring
/// string literals and escapes.
fn balanced_end(bytes: &[u8]) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn decode_object(raw: &str) -> std::result::Result<Map<String, Value>, ResponseError> {
    let payload = extract_json_payload(raw)?;
    match serde_json::from_str::<Value>(&payload) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ResponseError::Parse("judge output is not a JSON object".into())),
        Err(e) => Err(ResponseError::Parse(format!("malformed JSON: {e}"))),
    }
}

fn get_ci<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key)
        .or_else(|| map.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
}

/// Parses a stage-one structured reply. Findings may be given as an object
/// keyed by feature name (top level or under `findings`) or as a `findings`
/// array of `{feature, summary, abnormal_nodes}`.
pub fn parse_structured_report(
    raw: &str,
    patient_id: &str,
    node_count: u32,
) -> std::result::Result<StructuredReport, ResponseError> {
    let root = decode_object(raw)?;
    let mut entries: Vec<(String, &Value)> = Vec::new();
    match get_ci(&root, "findings") {
        Some(Value::Array(items)) => {
            for item in items {
                let name = item
                    .get("feature")
                    .and_then(Value::as_str)
                    .ok_or_else(|| ResponseError::Parse("findings entry without a feature name".into()))?;
                entries.push((name.to_string(), item));
            }
        }
        Some(Value::Object(map)) => entries.extend(map.iter().map(|(k, v)| (k.clone(), v))),
        Some(_) => return Err(ResponseError::Parse("findings must be an array or object".into())),
        None => entries.extend(root.iter().map(|(k, v)| (k.clone(), v))),
    }

    let mut slots: [Option<FeatureFinding>; 10] = Default::default();
    let mut violations = Vec::new();
    for (name, value) in entries {
        let Some(feature) = FeatureId::from_name(&name) else { continue };
        let Value::Object(body) = value else {
            return Err(ResponseError::Parse(format!("feature {feature} must map to an object")));
        };
        let summary = match get_ci(body, "summary") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
        };
        let mut abnormal_nodes = std::collections::BTreeSet::new();
        match get_ci(body, "abnormal_nodes") {
            None | Some(Value::Null) => {}
            Some(Value::Array(items)) => {
                for item in items {
                    let text = item.as_str().map(str::to_string).unwrap_or_else(|| item.to_string());
                    let norm = text.trim().to_ascii_uppercase();
                    match norm.parse::<NodeLabel>() {
                        Ok(label) => {
                            abnormal_nodes.insert(label);
                        }
                        Err(_) => violations.push(Violation::UnknownNodeLabel {
                            feature: Some(feature),
                            label: text,
                        }),
                    }
                }
            }
            Some(_) => {
                return Err(ResponseError::Parse(format!("abnormal_nodes of {feature} must be an array")));
            }
        }
        let slot = &mut slots[feature.ordinal()];
        if slot.is_some() {
            violations.push(Violation::DuplicateFeature(feature));
        }
        *slot = Some(FeatureFinding {
            feature,
            summary,
            abnormal_nodes,
        });
    }

    let findings: Vec<FeatureFinding> = slots.into_iter().flatten().collect();
    let report = StructuredReport::structured(patient_id, node_count, findings);
    violations.extend(validate_report(&report, node_count).violations);
    if violations.is_empty() {
        Ok(report)
    } else {
        Err(ResponseError::Schema(ValidationResult { violations }))
    }
}

const FREEFORM_KEYS: [&str; 5] = ["risk_description", "description", "text", "summary", "analysis"];

/// Parses a stage-one free-form reply: a JSON object carrying the text under
/// one of a few common keys, or plain prose.
pub fn parse_freeform_report(
    raw: &str,
    patient_id: &str,
    node_count: u32,
) -> std::result::Result<StructuredReport, ResponseError> {
    let from_json = decode_object(raw).ok().and_then(|map| {
        FREEFORM_KEYS
            .iter()
            .find_map(|k| get_ci(&map, k).and_then(Value::as_str).map(str::to_string))
    });
    let text = match from_json {
        Some(t) => t,
        None => raw
            .lines()
            .filter(|l| !l.trim_start().starts_with("```"))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(ResponseError::Parse("empty free-form description".into()));
    }
    let report = StructuredReport::freeform(patient_id, node_count, text);
    let check = validate_report(&report, node_count);
    if check.is_ok() {
        Ok(report)
    } else {
        Err(ResponseError::Schema(check))
    }
}

pub fn parse_report(
    raw: &str,
    patient_id: &str,
    node_count: u32,
    mode: ReportMode,
) -> std::result::Result<StructuredReport, ResponseError> {
    match mode {
        ReportMode::Structured => parse_structured_report(raw, patient_id, node_count),
        ReportMode::Freeform => parse_freeform_report(raw, patient_id, node_count),
    }
}

pub fn parse_comparison(raw: &str) -> std::result::Result<ComparisonVerdict, ResponseError> {
    let map = decode_object(raw)?;
    let choice = match get_ci(&map, "choice") {
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "a" => Choice::A,
            "b" => Choice::B,
            "comparable" | "tie" => Choice::Comparable,
            other => return Err(ResponseError::Parse(format!("unrecognized choice {other:?}"))),
        },
        Some(other) => return Err(ResponseError::Parse(format!("unrecognized choice {other}"))),
        None => return Err(ResponseError::Parse("reply has no choice".into())),
    };
    let analysis = match get_ci(&map, "analysis") {
        Some(Value::String(s)) => s.clone(),
        None | Some(Value::Null) => String::new(),
        Some(other) => other.to_string(),
    };
    Ok(ComparisonVerdict { choice, analysis })
}
