//! JSONL metrics: one record per round, then a summary record.

use std::io::Write;

use fedpriv_core::simulation::RoundReport;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Round(RoundReport),
    Summary(Summary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    /// All traffic, in 10^6 bytes.
    pub total_mb: f64,
    pub upload_mb: f64,
    pub total_seconds: f64,
    pub target_accuracy: f64,
    pub rounds_to_target: Option<usize>,
    pub epsilon_spent: f64,
}

pub const MB: f64 = 1e6;

pub fn write_jsonl(reports: &[RoundReport], summary: &Summary, mut out: impl Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io("metrics output".into(), e);
    for r in reports {
        serde_json::to_writer(&mut out, &Record::Round(r.clone())).map_err(|e| CliError::Runtime(e.to_string()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    serde_json::to_writer(&mut out, &Record::Summary(summary.clone())).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.write_all(b"\n").map_err(io)?;
    out.flush().map_err(io)
}

const ROUND_KEYS: &[(&str, fn(&Value) -> bool)] = &[
    ("round", Value::is_u64),
    ("skipped", Value::is_boolean),
    ("accuracy", Value::is_number),
    ("loss", Value::is_number),
    ("bytes_up", Value::is_u64),
    ("bytes_down", Value::is_u64),
    ("bytes_edge", Value::is_u64),
    ("seconds", Value::is_number),
    ("participants", Value::is_array),
    ("budget_skipped", Value::is_array),
    ("received", Value::is_array),
    ("filtered", Value::is_array),
    ("selected", Value::is_array),
    ("excluded", Value::is_array),
    ("fallback", Value::is_boolean),
    ("epsilon_spent", Value::is_number),
    ("staleness_histogram", Value::is_object),
];

const SUMMARY_KEYS: &[(&str, fn(&Value) -> bool)] = &[
    ("rounds", Value::is_u64),
    ("final_accuracy", Value::is_number),
    ("final_loss", Value::is_number),
    ("total_mb", Value::is_number),
    ("upload_mb", Value::is_number),
    ("total_seconds", Value::is_number),
    ("target_accuracy", Value::is_number),
    ("rounds_to_target", |v| v.is_null() || v.is_u64()),
    ("epsilon_spent", Value::is_number),
];

fn check_keys(line: usize, obj: &serde_json::Map<String, Value>, keys: &[(&str, fn(&Value) -> bool)]) -> Result<(), String> {
    for (key, ok) in keys {
        match obj.get(*key) {
            Some(v) if ok(v) => {}
            Some(v) => return Err(format!("line {line}: `{key}` has the wrong type ({v})")),
            None => return Err(format!("line {line}: missing `{key}`")),
        }
    }
    if let Some(extra) = obj.keys().find(|k| *k != "type" && !keys.iter().any(|(key, _)| key == k)) {
        return Err(format!("line {line}: unexpected key `{extra}`"));
    }
    Ok(())
}

/// Checks a metrics file: consecutive round records numbered from 1, then
/// exactly one summary whose round count matches. Returns the round count.
pub fn validate_jsonl(text: &str) -> Result<usize, String> {
    let mut rounds = 0usize;
    let mut summary_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if summary_seen {
            return Err(format!("line {line}: record after the summary"));
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| format!("line {line}: {e}"))?;
        let obj = value.as_object().ok_or_else(|| format!("line {line}: not an object"))?;
        match obj.get("type").and_then(Value::as_str) {
            Some("round") => {
                check_keys(line, obj, ROUND_KEYS)?;
                let n = obj["round"].as_u64().unwrap_or(0) as usize;
                if n != rounds + 1 {
                    return Err(format!("line {line}: expected round {}, found {n}", rounds + 1));
                }
                rounds = n;
            }
            Some("summary") => {
                check_keys(line, obj, SUMMARY_KEYS)?;
                if obj["rounds"].as_u64() != Some(rounds as u64) {
                    return Err(format!("line {line}: summary counts {} rounds, file has {rounds}", obj["rounds"]));
                }
                summary_seen = true;
            }
            other => return Err(format!("line {line}: unknown record type {other:?}")),
        }
    }
    if !summary_seen {
        return Err("missing summary record".into());
    }
    Ok(rounds)
}
