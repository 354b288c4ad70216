//! Replays the corpus of awkward judge replies in `data/adversarial_outputs.json`.

use lrmr_core::prompting::{parse_comparison, parse_structured_report, ResponseError};
use lrmr_core::report::FeatureId;
use serde_json::Value;

const CORPUS: &str = include_str!("data/adversarial_outputs.json");

fn check(case: &Value) -> Result<(), String> {
    let raw = case["raw"].as_str().unwrap();
    let expect = case["expect"].as_str().unwrap();
    let outcome: Result<(), ResponseError> = match case["kind"].as_str().unwrap() {
        "report" => {
            let n = case["node_count"].as_u64().unwrap() as u32;
            parse_structured_report(raw, "adv", n).map(|r| {
                if let Some(map) = case["abnormal"].as_object() {
                    for (feature, want) in map {
                        let got: Vec<String> = r
                            .finding(FeatureId::from_name(feature).unwrap())
                            .unwrap()
                            .abnormal_nodes
                            .iter()
                            .map(|l| l.to_string())
                            .collect();
                        let want: Vec<String> = serde_json::from_value(want.clone()).unwrap();
                        assert_eq!(got, want, "{feature}");
                    }
                }
            })
        }
        "comparison" => parse_comparison(raw).map(|v| {
            if let Some(c) = case["choice"].as_str() {
                assert_eq!(v.choice.to_string(), c);
            }
            if let Some(a) = case["analysis"].as_str() {
                assert_eq!(v.analysis, a);
            }
        }),
        other => panic!("unknown kind {other}"),
    };
    match (expect, &outcome) {
        ("ok", Ok(())) => Ok(()),
        ("parse", Err(e @ ResponseError::Parse(_))) => {
            assert!(e.is_recoverable());
            Ok(())
        }
        ("schema", Err(e @ ResponseError::Schema(_))) => {
            assert!(!e.is_recoverable());
            match case["message_contains"].as_str() {
                Some(needle) if !e.to_string().contains(needle) => Err(format!("message {e} lacks {needle:?}")),
                _ => Ok(()),
            }
        }
        _ => Err(format!("expected {expect}, got {outcome:?}")),
    }
}

#[test]
fn corpus_is_parsed_or_rejected_as_specified() {
    let cases: Vec<Value> = serde_json::from_str(CORPUS).unwrap();
    assert!(cases.len() >= 20);
    let failures: Vec<String> = cases
        .iter()
        .filter_map(|c| check(c).err().map(|e| format!("{}: {e}", c["name"])))
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn corpus_covers_each_category() {
    let cases: Vec<Value> = serde_json::from_str(CORPUS).unwrap();
    for needle in ["fenced", "prose", "missing", "unknown_node", "choice_"] {
        assert!(cases.iter().any(|c| c["name"].as_str().unwrap().contains(needle)), "{needle}");
    }
}
