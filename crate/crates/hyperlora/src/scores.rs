//! Score files: JSON lines `{sample_id, task, score, label}`, one per
//! labelled (sample, task) pair.

use serde::{Deserialize, Serialize};

use hyperlora_core::eval::ScoreSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub task: usize,
    pub score: f64,
    pub label: u8,
}

pub fn encode(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn decode(text: &str) -> Result<Vec<ScoreRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ScoreRecord = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if r.label > 1 {
            return Err(format!("line {}: label {} is not 0 or 1", i + 1, r.label));
        }
        if !r.score.is_finite() {
            return Err(format!("line {}: non-finite score", i + 1));
        }
        out.push(r);
    }
    Ok(out)
}

/// Groups records by task. Without an explicit count the task count is one
/// past the largest index seen.
pub fn to_score_set(records: &[ScoreRecord], num_tasks: Option<usize>) -> Result<ScoreSet, String> {
    let k = num_tasks.unwrap_or_else(|| records.iter().map(|r| r.task + 1).max().unwrap_or(0));
    let mut set = ScoreSet::new(k);
    for r in records {
        let t = set
            .tasks
            .get_mut(r.task)
            .ok_or_else(|| format!("sample `{}`: task {} out of range for {k} tasks", r.sample_id, r.task))?;
        t.push(r.score, r.label);
    }
    Ok(set)
}
