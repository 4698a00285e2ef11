//! Data model, ingestion and statistics for dual-factor annotated posts.
//!
//! Each post carries two binary factor labels (thwarted belongingness,
//! perceived burdensomeness) and, for each positive factor, an optional
//! gold textual cue: the contiguous word span that evidences the factor.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowercase and collapse all whitespace runs to single spaces, trimming ends.
///
/// This is the canonical normalization used for cue-substring checks and
/// exact-match scoring; Reddit text and annotations disagree on casing and
/// spacing often enough that byte equality is useless.
pub fn canonicalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// One annotated social-media post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    pub tbe_label: bool,
    pub pbu_label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tbe_cue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pbu_cue: Option<String>,
}

/// Non-fatal observation made while validating a post.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PostWarning {
    /// A gold cue is not a contiguous substring of the post text under
    /// canonical normalization. Kept as a warning: the source annotations
    /// do not guarantee contiguity.
    CueNotSubstring { factor: Factor, cue: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    Tbe,
    Pbu,
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Tbe => write!(f, "TBe"),
            Factor::Pbu => write!(f, "PBu"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PostError {
    #[error("post text is empty after trimming")]
    EmptyText,
    #[error("{factor} label is 0 but a {factor} cue is present: {cue:?}")]
    CueWithoutPositiveLabel { factor: Factor, cue: String },
}

impl Post {
    /// Validate invariants. Hard violations are errors; the cue-substring
    /// check is reported as a warning.
    pub fn validate(&self) -> Result<Vec<PostWarning>, PostError> {
        if self.text.trim().is_empty() {
            return Err(PostError::EmptyText);
        }
        for (factor, label, cue) in [
            (Factor::Tbe, self.tbe_label, &self.tbe_cue),
            (Factor::Pbu, self.pbu_label, &self.pbu_cue),
        ] {
            if let Some(c) = cue {
                if !label && !c.trim().is_empty() {
                    return Err(PostError::CueWithoutPositiveLabel {
                        factor,
                        cue: c.clone(),
                    });
                }
            }
        }
        let mut warnings = Vec::new();
        let text_canon = canonicalize(&self.text);
        for (factor, cue) in [(Factor::Tbe, &self.tbe_cue), (Factor::Pbu, &self.pbu_cue)] {
            if let Some(c) = cue {
                if !c.trim().is_empty() && !text_canon.contains(&canonicalize(c)) {
                    warnings.push(PostWarning::CueNotSubstring {
                        factor,
                        cue: c.clone(),
                    });
                }
            }
        }
        Ok(warnings)
    }

    /// Gold cue for a factor, `None` when the factor is negative or the
    /// stored cue is empty.
    pub fn cue(&self, factor: Factor) -> Option<&str> {
        let (label, cue) = match factor {
            Factor::Tbe => (self.tbe_label, &self.tbe_cue),
            Factor::Pbu => (self.pbu_label, &self.pbu_cue),
        };
        if !label {
            return None;
        }
        cue.as_deref().map(str::trim).filter(|c| !c.is_empty())
    }
}

/// Pre-split dataset. Splits must be disjoint by post id.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<Post>,
    pub validation: Vec<Post>,
    pub test: Vec<Post>,
}

impl DatasetSplit {
    pub fn new(train: Vec<Post>, validation: Vec<Post>, test: Vec<Post>) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        for post in train.iter().chain(&validation).chain(&test) {
            if !seen.insert(post.id.as_str()) {
                return Err(IngestError::DuplicateId(post.id.clone()));
            }
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }
}

/// 2x2 label co-occurrence counts, cells indexed by (TBe, PBu).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub n00: u64,
    pub n01: u64,
    pub n10: u64,
    pub n11: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.n00 + self.n01 + self.n10 + self.n11
    }
}

/// Count posts per label combination.
pub fn contingency(posts: &[Post]) -> ContingencyTable {
    let mut t = ContingencyTable {
        n00: 0,
        n01: 0,
        n10: 0,
        n11: 0,
    };
    for p in posts {
        match (p.tbe_label, p.pbu_label) {
            (false, false) => t.n00 += 1,
            (false, true) => t.n01 += 1,
            (true, false) => t.n10 += 1,
            (true, true) => t.n11 += 1,
        }
    }
    t
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("delta ratios undefined: zero count in TBe=0 row (n00={n00}, n01={n01})")]
pub struct UndefinedRatio {
    pub n00: u64,
    pub n01: u64,
}

/// Column-wise relative increase from the TBe=0 row to the TBe=1 row:
/// ((n10-n00)/n00, (n11-n01)/n01).
pub fn delta_ratios(table: &ContingencyTable) -> Result<(f64, f64), UndefinedRatio> {
    if table.n00 == 0 || table.n01 == 0 {
        return Err(UndefinedRatio {
            n00: table.n00,
            n01: table.n01,
        });
    }
    let d0 = (table.n10 as f64 - table.n00 as f64) / table.n00 as f64;
    let d1 = (table.n11 as f64 - table.n01 as f64) / table.n01 as f64;
    Ok((d0, d1))
}

/// On-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guess from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("duplicate post id across splits: {0}")]
    DuplicateId(String),
    #[error("no valid rows loaded ({0} rows rejected)")]
    NothingLoaded(usize),
}

/// One rejected input row, with its 1-based data row number.
#[derive(Debug, Clone)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct RowWarning {
    pub row: usize,
    pub warning: PostWarning,
}

/// Result of loading a dataset file: valid posts plus per-row diagnostics.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub posts: Vec<Post>,
    pub errors: Vec<RowError>,
    pub warnings: Vec<RowWarning>,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    tbe_label: serde_json::Value,
    pbu_label: serde_json::Value,
    #[serde(default)]
    tbe_cue: Option<String>,
    #[serde(default)]
    pbu_cue: Option<String>,
}

fn parse_binary(v: &serde_json::Value, field: &str) -> Result<bool, String> {
    let as_num = match v {
        serde_json::Value::Number(n) => n.as_i64(),
        serde_json::Value::String(s) => s.trim().parse::<i64>().ok(),
        serde_json::Value::Bool(b) => Some(*b as i64),
        _ => None,
    };
    match as_num {
        Some(0) => Ok(false),
        Some(1) => Ok(true),
        _ => Err(format!("{field} must be 0 or 1, got {v}")),
    }
}

fn empty_to_none(cue: Option<String>) -> Option<String> {
    cue.filter(|c| !c.trim().is_empty())
}

fn record_to_post(raw: RawRecord, row: usize) -> Result<(Post, Vec<PostWarning>), String> {
    let tbe_label = parse_binary(&raw.tbe_label, "tbe_label")?;
    let pbu_label = parse_binary(&raw.pbu_label, "pbu_label")?;
    let post = Post {
        id: raw.id.unwrap_or_else(|| format!("row-{row}")),
        text: raw.text,
        tbe_label,
        pbu_label,
        tbe_cue: empty_to_none(raw.tbe_cue),
        pbu_cue: empty_to_none(raw.pbu_cue),
    };
    let warnings = post.validate().map_err(|e| e.to_string())?;
    Ok((post, warnings))
}

/// Load posts from a CSV or JSONL file. Rows violating invariants are
/// collected in the report instead of aborting the load.
pub fn load_posts(path: &Path, format: Format) -> Result<LoadReport, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut report = LoadReport::default();
    let push = |raw: Result<RawRecord, String>, row: usize, report: &mut LoadReport| {
        match raw.and_then(|r| record_to_post(r, row)) {
            Ok((post, warnings)) => {
                report
                    .warnings
                    .extend(warnings.into_iter().map(|warning| RowWarning { row, warning }));
                report.posts.push(post);
            }
            Err(message) => report.errors.push(RowError { row, message }),
        }
    };
    match format {
        Format::Csv => {
            let mut reader = csv::Reader::from_reader(file);
            for (i, result) in reader.deserialize::<RawRecord>().enumerate() {
                push(result.map_err(|e| e.to_string()), i + 1, &mut report);
            }
        }
        Format::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| IngestError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw = serde_json::from_str::<RawRecord>(&line).map_err(|e| e.to_string());
                push(raw, i + 1, &mut report);
            }
        }
    }
    Ok(report)
}

/// Write posts back out in the same schema; inverse of [`load_posts`] for
/// valid data.
pub fn write_posts<W: Write>(mut out: W, posts: &[Post], format: Format) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(&mut out);
            writer
                .write_record(["id", "text", "tbe_label", "pbu_label", "tbe_cue", "pbu_cue"])
                .map_err(csv_io)?;
            for p in posts {
                writer
                    .write_record([
                        p.id.as_str(),
                        p.text.as_str(),
                        if p.tbe_label { "1" } else { "0" },
                        if p.pbu_label { "1" } else { "0" },
                        p.tbe_cue.as_deref().unwrap_or(""),
                        p.pbu_cue.as_deref().unwrap_or(""),
                    ])
                    .map_err(csv_io)?;
            }
            writer.flush()?;
        }
        Format::Jsonl => {
            for p in posts {
                let mut obj = serde_json::json!({
                    "id": p.id,
                    "text": p.text,
                    "tbe_label": p.tbe_label as u8,
                    "pbu_label": p.pbu_label as u8,
                });
                if let Some(c) = &p.tbe_cue {
                    obj["tbe_cue"] = serde_json::Value::String(c.clone());
                }
                if let Some(c) = &p.pbu_cue {
                    obj["pbu_cue"] = serde_json::Value::String(c.clone());
                }
                writeln!(out, "{obj}")?;
            }
        }
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, tbe: bool, pbu: bool) -> Post {
        Post {
            id: id.to_string(),
            text: "I feel alone and useless".to_string(),
            tbe_label: tbe,
            pbu_label: pbu,
            tbe_cue: tbe.then(|| "feel alone".to_string()),
            pbu_cue: pbu.then(|| "useless".to_string()),
        }
    }

    #[test]
    fn valid_post_passes() {
        let p = Post {
            id: "1".into(),
            text: "I feel alone".into(),
            tbe_label: true,
            pbu_label: false,
            tbe_cue: Some("feel alone".into()),
            pbu_cue: None,
        };
        assert!(p.validate().unwrap().is_empty());
    }

    #[test]
    fn cue_on_negative_label_rejected() {
        let p = Post {
            id: "1".into(),
            text: "I feel alone".into(),
            tbe_label: false,
            pbu_label: false,
            tbe_cue: Some("feel alone".into()),
            pbu_cue: None,
        };
        assert!(matches!(
            p.validate(),
            Err(PostError::CueWithoutPositiveLabel { .. })
        ));
    }

    #[test]
    fn non_substring_cue_is_warning_not_error() {
        let p = Post {
            id: "1".into(),
            text: "I feel alone".into(),
            tbe_label: true,
            pbu_label: false,
            tbe_cue: Some("completely isolated".into()),
            pbu_cue: None,
        };
        let warnings = p.validate().unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn cue_match_tolerates_case_and_whitespace() {
        let p = Post {
            id: "1".into(),
            text: "I  Feel\nAlone".into(),
            tbe_label: true,
            pbu_label: false,
            tbe_cue: Some("feel alone".into()),
            pbu_cue: None,
        };
        assert!(p.validate().unwrap().is_empty());
    }

    #[test]
    fn contingency_counts_per_cell() {
        let posts = vec![
            post("a", false, false),
            post("b", false, true),
            post("c", true, false),
            post("d", true, true),
        ];
        let t = contingency(&posts);
        assert_eq!(
            t,
            ContingencyTable {
                n00: 1,
                n01: 1,
                n10: 1,
                n11: 1
            }
        );
    }

    #[test]
    fn contingency_empty() {
        let t = contingency(&[]);
        assert_eq!(t.total(), 0);
    }

    #[test]
    fn delta_ratios_published_counts() {
        let t = ContingencyTable {
            n00: 1123,
            n01: 472,
            n10: 1252,
            n11: 675,
        };
        let (d0, d1) = delta_ratios(&t).unwrap();
        assert!((d0 - 0.1148).abs() < 1e-4);
        assert!((d1 - 0.4301).abs() < 1e-4);
    }

    #[test]
    fn delta_ratios_flat_and_skewed() {
        let flat = ContingencyTable {
            n00: 10,
            n01: 10,
            n10: 10,
            n11: 10,
        };
        assert_eq!(delta_ratios(&flat).unwrap(), (0.0, 0.0));
        let t = ContingencyTable {
            n00: 100,
            n01: 50,
            n10: 150,
            n11: 100,
        };
        assert_eq!(delta_ratios(&t).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn delta_ratios_zero_denominator() {
        let t = ContingencyTable {
            n00: 0,
            n01: 5,
            n10: 3,
            n11: 2,
        };
        assert!(delta_ratios(&t).is_err());
    }

    #[test]
    fn split_rejects_duplicate_ids() {
        let err = DatasetSplit::new(vec![post("a", true, false)], vec![post("a", false, false)], vec![]);
        assert!(matches!(err, Err(IngestError::DuplicateId(_))));
    }

    #[test]
    fn load_csv_reports_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut rows = String::from("id,text,tbe_label,pbu_label,tbe_cue,pbu_cue\n");
        for i in 0..11 {
            rows.push_str(&format!("p{i},I feel alone,1,0,feel alone,\n"));
        }
        rows.push_str("bad,I feel alone,2,0,,\n");
        std::fs::write(&path, rows).unwrap();
        let report = load_posts(&path, Format::Csv).unwrap();
        assert_eq!(report.posts.len(), 11);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].row, 12);
    }

    #[test]
    fn load_jsonl_roundtrip() {
        let posts = vec![post("a", true, true), post("b", false, false)];
        let mut buf = Vec::new();
        write_posts(&mut buf, &posts, Format::Jsonl).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(&path, buf).unwrap();
        let report = load_posts(&path, Format::Jsonl).unwrap();
        assert!(report.errors.is_empty());
        assert_eq!(report.posts, posts);
    }

    #[test]
    fn load_missing_file_errors() {
        assert!(load_posts(Path::new("/nonexistent/x.csv"), Format::Csv).is_err());
    }
}
