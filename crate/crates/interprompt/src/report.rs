//! Run manifests, prediction files, and evaluation reports.
//!
//! A manifest records everything needed to reproduce a run (config
//! snapshot, input hashes, job ids, parse counts) and is append-only.
//! Reports are rendered as Markdown for humans and CSV for machines.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Factor, Post};
use crate::metrics::{
    classification_metrics, corpus_generation_scores, BinaryConfusion, ClassificationMetrics,
    CorpusGenerationScores, TOKENIZER_VERSION,
};
use crate::parser::ParsedCompletion;
use crate::stats::PairwiseCell;

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// parsed-exact / repaired / unparseable-or-failed accounting. The three
/// buckets always sum to the prediction count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseCounts {
    pub exact: usize,
    pub repaired: usize,
    pub unparseable: usize,
}

impl ParseCounts {
    pub fn total(&self) -> usize {
        self.exact + self.repaired + self.unparseable
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_unix: u64,
    pub command: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    pub template_sha256: String,
    pub inputs: Vec<FileHash>,
    #[serde(default)]
    pub job_ids: Vec<String>,
    #[serde(default)]
    pub counts: ParseCounts,
}

impl RunManifest {
    pub fn now(command: &str) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            created_unix,
            command: command.to_string(),
            model_id: String::new(),
            temperature: 0.0,
            max_tokens: 0,
            base_url: String::new(),
            shots: None,
            template_sha256: String::new(),
            inputs: Vec::new(),
            job_ids: Vec::new(),
            counts: ParseCounts::default(),
        }
    }
}

/// Append one manifest as a JSON line; the file is never rewritten.
pub fn append_manifest(path: &Path, manifest: &RunManifest) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(manifest)?)
}

/// One line of the predictions JSONL written by the predict command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prompt_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedCompletion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport_error: Option<String>,
}

pub fn write_predictions<W: Write>(mut out: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> std::io::Result<Vec<PredictionRecord>> {
    let content = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in content.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorReport {
    pub confusion: BinaryConfusion,
    pub classification: ClassificationMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<CorpusGenerationScores>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tbe: FactorReport,
    pub pbu: FactorReport,
    pub counts: ParseCounts,
    pub total: usize,
    pub tokenizer_version: String,
    /// How unparseable completions are scored: as (0,0) with empty cues,
    /// tracked in `counts.unparseable`.
    pub unparseable_policy: String,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction ids missing from gold dataset: {0:?}")]
    MissingIds(Vec<String>),
    #[error("no predictions to evaluate")]
    Empty,
    #[error("metrics error: {0}")]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// Score predictions against the gold dataset. Unparseable or failed
/// predictions count as negative on both factors with no cues, and are
/// tallied separately.
pub fn evaluate(predictions: &[PredictionRecord], gold: &[Post]) -> Result<EvaluationReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let gold_ids: HashSet<&str> = gold.iter().map(|p| p.id.as_str()).collect();
    let missing: Vec<String> = predictions
        .iter()
        .filter(|p| !gold_ids.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingIds(missing));
    }

    let mut counts = ParseCounts::default();
    let mut tbe_pairs = Vec::new();
    let mut pbu_pairs = Vec::new();
    let mut tbe_gen: Vec<(Option<String>, Option<String>)> = Vec::new();
    let mut pbu_gen: Vec<(Option<String>, Option<String>)> = Vec::new();

    for pred in predictions {
        let gold_post = gold.iter().find(|g| g.id == pred.id).expect("checked above");
        let parsed = match &pred.parsed {
            Some(p) => {
                if p.exact {
                    counts.exact += 1;
                } else {
                    counts.repaired += 1;
                }
                p.clone()
            }
            None => {
                counts.unparseable += 1;
                ParsedCompletion {
                    tbe_label: false,
                    pbu_label: false,
                    tbe_cue: None,
                    pbu_cue: None,
                    diagnostics: Vec::new(),
                    exact: false,
                }
            }
        };
        tbe_pairs.push((parsed.tbe_label, gold_post.tbe_label));
        pbu_pairs.push((parsed.pbu_label, gold_post.pbu_label));
        tbe_gen.push((
            parsed.tbe_cue.clone(),
            gold_post.cue(Factor::Tbe).map(str::to_string),
        ));
        pbu_gen.push((
            parsed.pbu_cue.clone(),
            gold_post.cue(Factor::Pbu).map(str::to_string),
        ));
    }

    let factor_report = |pairs: Vec<(bool, bool)>,
                         gen: Vec<(Option<String>, Option<String>)>|
     -> FactorReport {
        let confusion = BinaryConfusion::from_pairs(pairs);
        FactorReport {
            confusion,
            classification: classification_metrics(&confusion),
            generation: corpus_generation_scores(&gen).ok(),
        }
    };

    Ok(EvaluationReport {
        tbe: factor_report(tbe_pairs, tbe_gen),
        pbu: factor_report(pbu_pairs, pbu_gen),
        counts,
        total: predictions.len(),
        tokenizer_version: TOKENIZER_VERSION.to_string(),
        unparseable_policy: "scored as (0,0) with empty cues; counted separately".to_string(),
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub fn render_markdown(report: &EvaluationReport) -> String {
    let mut out = String::new();
    out.push_str("# Evaluation report\n\n");
    out.push_str("## Classification\n\n");
    out.push_str("| Factor | Precision | Recall | F1-score | Accuracy |\n");
    out.push_str("|---|---|---|---|---|\n");
    for (name, fr) in [("TBe", &report.tbe), ("PBu", &report.pbu)] {
        let m = &fr.classification;
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            name,
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            pct(m.accuracy)
        ));
    }
    out.push_str("\n## Generated explanations\n\n");
    out.push_str("| Factor | Rouge-1 | Rouge-L | BLEU-1 | EM | scored | skipped |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (name, fr) in [("TBe", &report.tbe), ("PBu", &report.pbu)] {
        match &fr.generation {
            Some(g) => out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |\n",
                name,
                g.scores.rouge1,
                g.scores.rouge_l,
                g.scores.bleu1,
                g.scores.exact_match,
                g.scored,
                g.skipped
            )),
            None => out.push_str(&format!("| {name} | - | - | - | - | 0 | - |\n")),
        }
    }
    out.push_str(&format!(
        "\nCompletions: {} total; {} exact, {} repaired, {} unparseable ({}).\n",
        report.total,
        report.counts.exact,
        report.counts.repaired,
        report.counts.unparseable,
        report.unparseable_policy
    ));
    out.push_str(&format!("Tokenizer: {}.\n", report.tokenizer_version));
    out
}

pub fn render_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("factor,metric,value\n");
    for (name, fr) in [("tbe", &report.tbe), ("pbu", &report.pbu)] {
        let m = &fr.classification;
        for (metric, value) in [
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
            ("accuracy", m.accuracy),
        ] {
            out.push_str(&format!("{name},{metric},{value:.6}\n"));
        }
        if let Some(g) = &fr.generation {
            for (metric, value) in [
                ("rouge1", g.scores.rouge1),
                ("rouge_l", g.scores.rouge_l),
                ("bleu1", g.scores.bleu1),
                ("exact_match", g.scores.exact_match),
            ] {
                out.push_str(&format!("{name},{metric},{value:.6}\n"));
            }
        }
    }
    out.push_str(&format!("all,exact,{}\n", report.counts.exact));
    out.push_str(&format!("all,repaired,{}\n", report.counts.repaired));
    out.push_str(&format!("all,unparseable,{}\n", report.counts.unparseable));
    out
}

/// Render the pairwise significance cells as an upper-triangular table.
pub fn render_significance(cells: &[PairwiseCell]) -> String {
    let mut rows: Vec<&str> = Vec::new();
    let mut cols: Vec<&str> = Vec::new();
    for cell in cells {
        if !rows.contains(&cell.row_label.as_str()) {
            rows.push(&cell.row_label);
        }
        if !cols.contains(&cell.col_label.as_str()) {
            cols.push(&cell.col_label);
        }
    }
    let mut out = String::from("| Models |");
    for c in &cols {
        out.push_str(&format!(" {c} t-test | {c} p-val |"));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &cols {
        out.push_str("---|---|");
    }
    out.push('\n');
    for r in &rows {
        out.push_str(&format!("| {r} |"));
        for c in &cols {
            match cells
                .iter()
                .find(|cell| cell.row_label == *r && cell.col_label == *c)
            {
                Some(cell) => out.push_str(&format!(
                    " {:.3} | {:.3} |",
                    cell.result.t_statistic, cell.result.p_value
                )),
                None => out.push_str(" - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_completion;
    use crate::prompt::{build_completion, PromptTemplate};

    fn gold_posts() -> Vec<Post> {
        vec![
            Post {
                id: "a".into(),
                text: "I feel alone out here".into(),
                tbe_label: true,
                pbu_label: false,
                tbe_cue: Some("feel alone".into()),
                pbu_cue: None,
            },
            Post {
                id: "b".into(),
                text: "I am a burden on my family".into(),
                tbe_label: false,
                pbu_label: true,
                tbe_cue: None,
                pbu_cue: Some("a burden on my family".into()),
            },
            Post {
                id: "c".into(),
                text: "lovely weather".into(),
                tbe_label: false,
                pbu_label: false,
                tbe_cue: None,
                pbu_cue: None,
            },
        ]
    }

    fn gold_predictions(gold: &[Post]) -> Vec<PredictionRecord> {
        let tpl = PromptTemplate::default();
        gold.iter()
            .map(|p| {
                let completion = build_completion(p, &tpl).serialized;
                let parsed = parse_completion(&completion, &tpl).unwrap();
                PredictionRecord {
                    id: p.id.clone(),
                    prompt_sha256: "x".into(),
                    completion: Some(completion),
                    parsed: Some(parsed),
                    parse_error: None,
                    transport_error: None,
                }
            })
            .collect()
    }

    #[test]
    fn identity_pipeline_scores_ones() {
        let gold = gold_posts();
        let preds = gold_predictions(&gold);
        let report = evaluate(&preds, &gold).unwrap();
        for fr in [&report.tbe, &report.pbu] {
            let m = &fr.classification;
            assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
            let g = fr.generation.as_ref().unwrap();
            assert_eq!(g.scores.rouge1, 1.0);
            assert_eq!(g.scores.exact_match, 1.0);
        }
        assert_eq!(report.counts.exact, 3);
        assert_eq!(report.counts.total(), report.total);
    }

    #[test]
    fn unparseable_scored_as_negative_and_counted() {
        let gold = gold_posts();
        let mut preds = gold_predictions(&gold);
        preds[0].parsed = None;
        preds[0].parse_error = Some("unparseable".into());
        let report = evaluate(&preds, &gold).unwrap();
        assert_eq!(report.counts.unparseable, 1);
        // Post "a" is TBe-positive; scoring it (0,0) creates one false negative.
        assert_eq!(report.tbe.confusion.fn_, 1);
        assert_eq!(report.counts.total(), 3);
    }

    #[test]
    fn missing_gold_id_is_error() {
        let gold = gold_posts();
        let mut preds = gold_predictions(&gold);
        preds[1].id = "ghost".into();
        match evaluate(&preds, &gold) {
            Err(EvalError::MissingIds(ids)) => assert_eq!(ids, vec!["ghost".to_string()]),
            other => panic!("expected MissingIds, got {other:?}"),
        }
    }

    #[test]
    fn markdown_and_csv_render() {
        let gold = gold_posts();
        let report = evaluate(&gold_predictions(&gold), &gold).unwrap();
        let md = render_markdown(&report);
        assert!(md.contains("| TBe | 100.00 | 100.00 | 100.00 | 100.00 |"));
        let csv = render_csv(&report);
        assert!(csv.contains("tbe,accuracy,1.000000"));
    }

    #[test]
    fn predictions_roundtrip() {
        let gold = gold_posts();
        let preds = gold_predictions(&gold);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        std::fs::write(&path, buf).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back.len(), preds.len());
        assert_eq!(back[0].id, preds[0].id);
    }

    #[test]
    fn manifest_append_only_and_secret_free() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs").join("manifest.jsonl");
        let mut m = RunManifest::now("predict");
        m.model_id = "mock".into();
        append_manifest(&path, &m).unwrap();
        append_manifest(&path, &m).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content.lines().count(), 2);
        assert!(!content.contains("api_key"));
    }
}
