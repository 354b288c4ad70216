//! Patients, node patches and the per-patient structured report.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::canonical::to_canonical_json;
use crate::error::{Error, Result};

/// Label overlaid on a montage tile and cited by the judge, `N1`, `N2`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeLabel(u32);

impl NodeLabel {
    pub fn new(index: u32) -> Result<Self> {
        if index == 0 {
            return Err(Error::validation("node index must be >= 1"));
        }
        Ok(NodeLabel(index))
    }

    pub fn index(self) -> u32 {
        self.0
    }
}

/// `node_label(i)` as a string; rejects index 0.
pub fn node_label(index: i64) -> Result<String> {
    if index < 1 || index > u32::MAX as i64 {
        return Err(Error::validation(format!("node index {index} out of range")));
    }
    Ok(NodeLabel(index as u32).to_string())
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

impl FromStr for NodeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('N')
            .ok_or_else(|| Error::validation(format!("malformed node label {s:?}")))?;
        // "N01" would alias N1; only the unpadded form is a label.
        if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::validation(format!("malformed node label {s:?}")));
        }
        let index: u32 = digits
            .parse()
            .map_err(|_| Error::validation(format!("malformed node label {s:?}")))?;
        NodeLabel::new(index)
    }
}

impl Serialize for NodeLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The ten checklist features, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureId {
    Shape,
    BorderContour,
    BorderClarity,
    SignalHeterogeneity,
    FattyHilumAbsence,
    Necrosis,
    SizeImpression,
    RelativeSignalIntensity,
    PerinodalFatStranding,
    NodeClustering,
}

impl FeatureId {
    pub const ALL: [FeatureId; 10] = [
        FeatureId::Shape,
        FeatureId::BorderContour,
        FeatureId::BorderClarity,
        FeatureId::SignalHeterogeneity,
        FeatureId::FattyHilumAbsence,
        FeatureId::Necrosis,
        FeatureId::SizeImpression,
        FeatureId::RelativeSignalIntensity,
        FeatureId::PerinodalFatStranding,
        FeatureId::NodeClustering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureId::Shape => "shape",
            FeatureId::BorderContour => "border_contour",
            FeatureId::BorderClarity => "border_clarity",
            FeatureId::SignalHeterogeneity => "signal_heterogeneity",
            FeatureId::FattyHilumAbsence => "fatty_hilum_absence",
            FeatureId::Necrosis => "necrosis",
            FeatureId::SizeImpression => "size_impression",
            FeatureId::RelativeSignalIntensity => "relative_signal_intensity",
            FeatureId::PerinodalFatStranding => "perinodal_fat_stranding",
            FeatureId::NodeClustering => "node_clustering",
        }
    }

    /// Position in the canonical ordering.
    pub fn ordinal(self) -> usize {
        self as usize
    }

    /// Case-insensitive lookup by canonical name.
    pub fn from_name(name: &str) -> Option<FeatureId> {
        let name = name.trim();
        FeatureId::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFinding {
    pub feature: FeatureId,
    pub summary: String,
    pub abnormal_nodes: BTreeSet<NodeLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    Structured,
    Freeform,
}

impl fmt::Display for ReportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportMode::Structured => "structured",
            ReportMode::Freeform => "freeform",
        })
    }
}

impl FromStr for ReportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "structured" => Ok(ReportMode::Structured),
            "freeform" => Ok(ReportMode::Freeform),
            other => Err(Error::config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

/// Stage-1 output for one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub patient_id: String,
    pub node_count: u32,
    pub mode: ReportMode,
    pub findings: Vec<FeatureFinding>,
    pub freeform_text: Option<String>,
}

impl StructuredReport {
    pub fn structured(patient_id: impl Into<String>, node_count: u32, findings: Vec<FeatureFinding>) -> Self {
        StructuredReport {
            patient_id: patient_id.into(),
            node_count,
            mode: ReportMode::Structured,
            findings,
            freeform_text: None,
        }
    }

    pub fn freeform(patient_id: impl Into<String>, node_count: u32, text: impl Into<String>) -> Self {
        StructuredReport {
            patient_id: patient_id.into(),
            node_count,
            mode: ReportMode::Freeform,
            findings: Vec::new(),
            freeform_text: Some(text.into()),
        }
    }

    pub fn finding(&self, feature: FeatureId) -> Option<&FeatureFinding> {
        self.findings.iter().find(|f| f.feature == feature)
    }

    /// Sorted-key compact JSON, the on-disk report format.
    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(self).expect("report serializes")
    }

    /// Canonical JSON with `patient_id` removed, as embedded in comparison prompts.
    pub fn blinded_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("patient_id");
        }
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Inverse of [`blinded_json`](Self::blinded_json); the identifier comes back empty.
    pub fn from_blinded_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(obj) = value.as_object_mut() {
            obj.insert("patient_id".into(), serde_json::Value::String(String::new()));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One schema violation found by [`validate_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyPatientId,
    ZeroNodeCount,
    NodeCountMismatch { declared: u32, expected: u32 },
    MissingFeature(FeatureId),
    DuplicateFeature(FeatureId),
    FeatureOutOfOrder { position: usize, found: FeatureId },
    UnknownNodeLabel { feature: Option<FeatureId>, label: String },
    UnknownFeature(String),
    FreeformTextInStructured,
    FindingsInFreeform,
    EmptyFreeformText,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPatientId => write!(f, "empty patient_id"),
            Violation::ZeroNodeCount => write!(f, "node_count must be positive"),
            Violation::NodeCountMismatch { declared, expected } => {
                write!(f, "node_count {declared} does not match expected {expected}")
            }
            Violation::MissingFeature(feat) => write!(f, "missing feature: {feat}"),
            Violation::DuplicateFeature(feat) => write!(f, "duplicate feature: {feat}"),
            Violation::FeatureOutOfOrder { position, found } => {
                write!(f, "feature {found} out of canonical order at position {position}")
            }
            Violation::UnknownNodeLabel { feature: Some(feat), label } => {
                write!(f, "unknown node label {label} in feature {feat}")
            }
            Violation::UnknownNodeLabel { feature: None, label } => write!(f, "unknown node label {label}"),
            Violation::UnknownFeature(name) => write!(f, "unknown feature: {name}"),
            Violation::FreeformTextInStructured => write!(f, "freeform_text present in structured report"),
            Violation::FindingsInFreeform => write!(f, "findings present in freeform report"),
            Violation::EmptyFreeformText => write!(f, "freeform report has empty freeform_text"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self.to_string()))
        }
    }
}

impl fmt::Display for ValidationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks every report invariant against the patient's node count.
pub fn validate_report(report: &StructuredReport, node_count: u32) -> ValidationResult {
    let mut violations = Vec::new();
    if report.patient_id.is_empty() {
        violations.push(Violation::EmptyPatientId);
    }
    if node_count == 0 || report.node_count == 0 {
        violations.push(Violation::ZeroNodeCount);
    }
    if report.node_count != node_count {
        violations.push(Violation::NodeCountMismatch {
            declared: report.node_count,
            expected: node_count,
        });
    }
    match report.mode {
        ReportMode::Structured => {
            if report.freeform_text.is_some() {
                violations.push(Violation::FreeformTextInStructured);
            }
            let mut seen = BTreeSet::new();
            for (position, finding) in report.findings.iter().enumerate() {
                if !seen.insert(finding.feature) {
                    violations.push(Violation::DuplicateFeature(finding.feature));
                } else if finding.feature.ordinal() != position {
                    violations.push(Violation::FeatureOutOfOrder {
                        position,
                        found: finding.feature,
                    });
                }
                for label in &finding.abnormal_nodes {
                    if label.index() > node_count {
                        violations.push(Violation::UnknownNodeLabel {
                            feature: Some(finding.feature),
                            label: label.to_string(),
                        });
                    }
                }
            }
            for feature in FeatureId::ALL {
                if !seen.contains(&feature) {
                    violations.push(Violation::MissingFeature(feature));
                }
            }
        }
        ReportMode::Freeform => {
            if !report.findings.is_empty() {
                violations.push(Violation::FindingsInFreeform);
            }
            match &report.freeform_text {
                Some(t) if !t.trim().is_empty() => {}
                _ => violations.push(Violation::EmptyFreeformText),
            }
        }
    }
    ValidationResult { violations }
}

/// One cropped lymph-node image.
#[derive(Debug, Clone)]
pub struct NodePatch {
    pub index: u32,
    pub image: GrayImage,
}

impl NodePatch {
    pub fn label(&self) -> NodeLabel {
        NodeLabel(self.index)
    }
}

#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: Option<u8>,
    pub patches: Vec<NodePatch>,
}

impl PatientRecord {
    /// Builds a record with patches indexed 1..=k in the given order.
    pub fn new(patient_id: impl Into<String>, label: Option<u8>, images: Vec<GrayImage>) -> Result<Self> {
        let patient_id = patient_id.into();
        if patient_id.is_empty() {
            return Err(Error::validation("patient_id must be non-empty"));
        }
        if let Some(l) = label {
            if l > 1 {
                return Err(Error::validation(format!("label {l} for {patient_id} is not binary")));
            }
        }
        let patches = images
            .into_iter()
            .enumerate()
            .map(|(i, image)| NodePatch {
                index: i as u32 + 1,
                image,
            })
            .collect();
        Ok(PatientRecord {
            patient_id,
            label,
            patches,
        })
    }

    pub fn node_count(&self) -> u32 {
        self.patches.len() as u32
    }
}
