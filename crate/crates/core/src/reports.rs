//! CSV emitters and readers for evaluation, sweeps and summary reports.
//!
//! Floating-point fields are written with nine decimals so that files are
//! byte-stable across runs.

use std::collections::BTreeMap;

use crate::eval::{EvalReport, ScoreKind};
use crate::metrics::FriedmanNemenyi;
use crate::perturb::{PerturbKind, SweepRow};
use crate::Error;

pub const EVAL_HEADER: &str = "model,metric,score";
pub const EVAL_NOTE: &str = "# meteor=exact-match-only; spice=n/a";
pub const SWEEP_HEADER: &str = "kind,intensity,metric,mean,std,samples,seed";
pub const SUNBURST_HEADER: &str = "position,prefix,word,count";
pub const PREDICTIONS_HEADER: &str = "id,answer,predicted,explanation";
pub const SUNBURST_DEPTH: usize = 5;

pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{EVAL_NOTE}\n{EVAL_HEADER}\n");
    for r in reports {
        for (metric, score) in r.rows() {
            out.push_str(&format!("{},{metric},{score:.9}\n", r.model));
        }
    }
    out
}

pub fn attention_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("model,instances,mean_spearman,degenerate\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.9},{}\n",
            r.model, r.instances, r.attention_spearman, r.attention_degenerate
        ));
    }
    out
}

fn sweep_fields(r: &SweepRow) -> String {
    format!(
        "{},{:.9},{},{:.9},{:.9},{},{}",
        r.kind, r.intensity, r.metric, r.mean, r.std, r.samples, r.seed
    )
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&sweep_fields(r));
        out.push('\n');
    }
    out
}

fn csv_err(file: &str, line: usize, detail: impl Into<String>) -> Error {
    Error::Csv {
        file: file.to_string(),
        line,
        detail: detail.into(),
    }
}

/// Reads a file written by [`sweep_csv`]; `file` names it in errors.
pub fn parse_sweep_csv(file: &str, text: &str) -> Result<Vec<SweepRow>, Error> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SWEEP_HEADER => {}
        _ => return Err(csv_err(file, 1, format!("expected header {SWEEP_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(csv_err(file, i + 1, format!("expected 7 fields, got {}", f.len())));
        }
        let num = |k: usize, name: &str| f[k].parse::<f64>().map_err(|_| csv_err(file, i + 1, format!("bad {name} {:?}", f[k])));
        rows.push(SweepRow {
            kind: f[0].parse::<PerturbKind>().map_err(|e| csv_err(file, i + 1, e.to_string()))?,
            intensity: num(1, "intensity")?,
            metric: f[2].parse::<ScoreKind>().map_err(|e| csv_err(file, i + 1, e.to_string()))?,
            mean: num(3, "mean")?,
            std: num(4, "std")?,
            samples: f[5].parse().map_err(|_| csv_err(file, i + 1, format!("bad samples {:?}", f[5])))?,
            seed: f[6].parse().map_err(|_| csv_err(file, i + 1, format!("bad seed {:?}", f[6])))?,
        });
    }
    Ok(rows)
}

/// Every sweep row of every model, prefixed with the model name.
pub fn curves_csv(sweeps: &[(String, Vec<SweepRow>)]) -> String {
    let mut out = format!("model,{SWEEP_HEADER}\n");
    for (model, rows) in sweeps {
        for r in rows {
            out.push_str(&format!("{model},{}\n", sweep_fields(r)));
        }
    }
    out
}

/// Counts of each word at positions `1..=depth`, keyed by the words before it.
pub fn sunburst_counts(explanations: &[Vec<String>], depth: usize) -> BTreeMap<(usize, String, String), usize> {
    let mut counts = BTreeMap::new();
    for words in explanations {
        for (p, w) in words.iter().take(depth).enumerate() {
            let prefix = words[..p].join(" ");
            *counts.entry((p + 1, prefix, w.clone())).or_insert(0) += 1;
        }
    }
    counts
}

pub fn sunburst_csv(explanations: &[Vec<String>]) -> String {
    let mut out = format!("{SUNBURST_HEADER}\n");
    for ((pos, prefix, word), count) in sunburst_counts(explanations, SUNBURST_DEPTH) {
        out.push_str(&format!("{pos},{prefix},{word},{count}\n"));
    }
    out
}

/// Mean ranks per model followed by the critical difference and p-value.
pub fn cd_csv(models: &[String], f: &FriedmanNemenyi) -> String {
    let mut out = String::from("model,mean_rank\n");
    for (m, r) in models.iter().zip(&f.mean_ranks) {
        out.push_str(&format!("{m},{r:.9}\n"));
    }
    out.push_str(&format!("CD,p\n{:.9},{:.9}\n", f.critical_difference, f.p_value));
    out
}

/// One predicted explanation per line, as written by evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub id: u64,
    pub answer: String,
    pub predicted: String,
    pub explanation: Vec<String>,
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = format!("{PREDICTIONS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.id, r.answer, r.predicted, r.explanation.join(" ")));
    }
    out
}

pub fn parse_predictions_csv(file: &str, text: &str) -> Result<Vec<PredictionRow>, Error> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
        _ => return Err(csv_err(file, 1, format!("expected header {PREDICTIONS_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(4, ',').collect();
        if f.len() != 4 {
            return Err(csv_err(file, i + 1, format!("expected 4 fields, got {}", f.len())));
        }
        rows.push(PredictionRow {
            id: f[0].parse().map_err(|_| csv_err(file, i + 1, format!("bad id {:?}", f[0])))?,
            answer: f[1].to_string(),
            predicted: f[2].to_string(),
            explanation: f[3].split_whitespace().map(String::from).collect(),
        });
    }
    Ok(rows)
}
