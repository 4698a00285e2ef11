//! Decode generated completions back into binary labels and textual cues.
//!
//! Parsing is total over arbitrary strings: a completion either yields a
//! [`ParsedCompletion`] (possibly with repair diagnostics) or a structured
//! [`ParseError`] carrying the raw text. The label phrase is authoritative
//! for the binary labels; cue sections inconsistent with it are normalized
//! away and recorded as diagnostics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{canonicalize, Factor};
use crate::prompt::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub tbe_label: bool,
    pub pbu_label: bool,
    pub tbe_cue: Option<String>,
    pub pbu_cue: Option<String>,
    pub diagnostics: Vec<Diagnostic>,
    /// True iff the completion parsed with zero repairs.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diagnostic {
    /// Sections were located only after case-folding and whitespace collapse.
    NormalizedMatch,
    /// Extra text followed the label phrase inside the label section.
    TrailingLabelText,
    /// A section prefix was missing; the affected cue is absent.
    MissingSection(Factor),
    /// The label says the factor is absent but its cue section held text.
    CueOnNegativeFactor(Factor),
    /// The label says the factor is present but its cue section was empty
    /// or the placeholder token.
    MissingCueForPositiveFactor(Factor),
    /// The cue section held a delimited list; the first segment was kept.
    MultiSegmentCue(Factor),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unparseable completion (no label section or label phrase): {raw:?}")]
    Unparseable { raw: String },
}

/// First maximal contiguous segment when the text is a delimited list
/// (";", " / ", newline); single-segment input is returned trimmed.
pub fn extract_primary_cue(cue_text: &str) -> &str {
    cue_text
        .split(['\n', ';'])
        .flat_map(|part| part.split(" / "))
        .map(str::trim)
        .find(|segment| !segment.is_empty())
        .unwrap_or("")
}

struct Sections {
    label_text: String,
    tbe_section: Option<String>,
    pbu_section: Option<String>,
    rho2_found: bool,
    rho3_found: bool,
}

/// Split `text` into the three sections using literal prefix search.
fn split_sections(text: &str, rho1: &str, rho2: &str, rho3: &str, stop: &str) -> Option<Sections> {
    let body = match text.find(stop) {
        Some(i) if !stop.is_empty() => &text[..i],
        _ => text,
    };
    let after_rho1 = body.find(rho1)? + rho1.len();
    let rest = &body[after_rho1..];
    let (label_text, rest_after_label, rho2_found) = match rest.find(rho2) {
        Some(i) => (&rest[..i], &rest[i + rho2.len()..], true),
        None => (rest, "", false),
    };
    let (tbe_section, pbu_section, rho3_found) = if rho2_found {
        match rest_after_label.find(rho3) {
            Some(i) => (
                Some(rest_after_label[..i].to_string()),
                Some(rest_after_label[i + rho3.len()..].to_string()),
                true,
            ),
            None => (Some(rest_after_label.to_string()), None, false),
        }
    } else {
        (None, None, false)
    };
    Some(Sections {
        label_text: label_text.to_string(),
        tbe_section,
        pbu_section,
        rho2_found,
        rho3_found,
    })
}

/// Earliest label-phrase occurrence, longest phrase winning ties. This is
/// what keeps "belong" from shadowing "both belong and burden".
fn match_label_phrase<'a>(
    label_text: &str,
    phrases: &[((bool, bool), &'a str)],
) -> Option<((bool, bool), &'a str, usize)> {
    let mut best: Option<((bool, bool), &str, usize)> = None;
    for &(labels, phrase) in phrases {
        if let Some(pos) = label_text.find(phrase) {
            let better = match best {
                None => true,
                Some((_, bp, bpos)) => pos < bpos || (pos == bpos && phrase.len() > bp.len()),
            };
            if better {
                best = Some((labels, phrase, pos));
            }
        }
    }
    best
}

fn resolve_cue(
    factor: Factor,
    label_positive: bool,
    section: Option<String>,
    section_prefix_found: bool,
    empty_token: &str,
    diagnostics: &mut Vec<Diagnostic>,
) -> Option<String> {
    if !section_prefix_found {
        diagnostics.push(Diagnostic::MissingSection(factor));
        if label_positive {
            diagnostics.push(Diagnostic::MissingCueForPositiveFactor(factor));
        }
        return None;
    }
    let raw = section.unwrap_or_default();
    let trimmed = raw.trim();
    let is_empty = trimmed.is_empty() || canonicalize(trimmed) == canonicalize(empty_token);
    if !label_positive {
        if !is_empty {
            diagnostics.push(Diagnostic::CueOnNegativeFactor(factor));
        }
        return None;
    }
    if is_empty {
        diagnostics.push(Diagnostic::MissingCueForPositiveFactor(factor));
        return None;
    }
    let primary = extract_primary_cue(trimmed);
    if primary != trimmed {
        diagnostics.push(Diagnostic::MultiSegmentCue(factor));
    }
    Some(primary.to_string())
}

fn parse_with_fragments(
    text: &str,
    template: &PromptTemplate,
    rho1: &str,
    rho2: &str,
    rho3: &str,
    stop: &str,
    phrases: &[((bool, bool), &str)],
    empty_token: &str,
) -> Option<ParsedCompletion> {
    let sections = split_sections(text, rho1, rho2, rho3, stop)?;
    let ((tbe_label, pbu_label), phrase, pos) = match_label_phrase(&sections.label_text, phrases)?;
    let mut diagnostics = Vec::new();
    let surrounding_clean = sections.label_text[..pos].trim().is_empty()
        && sections.label_text[pos + phrase.len()..].trim().is_empty();
    if !surrounding_clean {
        diagnostics.push(Diagnostic::TrailingLabelText);
    }
    let tbe_cue = resolve_cue(
        Factor::Tbe,
        tbe_label,
        sections.tbe_section,
        sections.rho2_found,
        empty_token,
        &mut diagnostics,
    );
    let pbu_cue = resolve_cue(
        Factor::Pbu,
        pbu_label,
        sections.pbu_section,
        sections.rho3_found,
        empty_token,
        &mut diagnostics,
    );
    let _ = template;
    Some(ParsedCompletion {
        tbe_label,
        pbu_label,
        tbe_cue,
        pbu_cue,
        exact: diagnostics.is_empty(),
        diagnostics,
    })
}

/// Parse a raw completion against the template.
///
/// An exact pass matches template fragments byte-for-byte; when that fails,
/// a repair pass retries on case-folded whitespace-collapsed text and marks
/// the result inexact.
pub fn parse_completion(raw: &str, template: &PromptTemplate) -> Result<ParsedCompletion, ParseError> {
    let phrases = template.label_lexicon.phrases_longest_first();
    if let Some(parsed) = parse_with_fragments(
        raw,
        template,
        &template.rho1_prefix,
        &template.rho2_prefix,
        &template.rho3_prefix,
        &template.stop_sequence,
        &phrases,
        &template.empty_cue_token,
    ) {
        return Ok(parsed);
    }

    // Repair pass: everything case-folded and whitespace-collapsed.
    let canon_raw = canonicalize(raw);
    let canon_phrases: Vec<((bool, bool), String)> = phrases
        .iter()
        .map(|&(labels, p)| (labels, canonicalize(p)))
        .collect();
    let canon_phrase_refs: Vec<((bool, bool), &str)> = canon_phrases
        .iter()
        .map(|(labels, p)| (*labels, p.as_str()))
        .collect();
    let parsed = parse_with_fragments(
        &canon_raw,
        template,
        &canonicalize(&template.rho1_prefix),
        &canonicalize(&template.rho2_prefix),
        &canonicalize(&template.rho3_prefix),
        &canonicalize(&template.stop_sequence),
        &canon_phrase_refs,
        &template.empty_cue_token,
    );
    match parsed {
        Some(mut p) => {
            p.exact = false;
            p.diagnostics.insert(0, Diagnostic::NormalizedMatch);
            Ok(p)
        }
        None => Err(ParseError::Unparseable {
            raw: raw.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Post;
    use crate::prompt::build_completion;

    fn post(tbe: bool, pbu: bool, tbe_cue: Option<&str>, pbu_cue: Option<&str>) -> Post {
        Post {
            id: "p".into(),
            text: "I feel alone and a burden".into(),
            tbe_label: tbe,
            pbu_label: pbu,
            tbe_cue: tbe_cue.map(str::to_string),
            pbu_cue: pbu_cue.map(str::to_string),
        }
    }

    #[test]
    fn builder_output_parses_exactly() {
        let tpl = PromptTemplate::default();
        let c = build_completion(&post(true, false, Some("feel alone"), None), &tpl);
        let parsed = parse_completion(&c.serialized, &tpl).unwrap();
        assert!(parsed.exact, "diagnostics: {:?}", parsed.diagnostics);
        assert!(parsed.tbe_label);
        assert!(!parsed.pbu_label);
        assert_eq!(parsed.tbe_cue.as_deref(), Some("feel alone"));
        assert_eq!(parsed.pbu_cue, None);
    }

    #[test]
    fn both_phrase_yields_both_labels() {
        let tpl = PromptTemplate::default();
        let c = build_completion(
            &post(true, true, Some("feel alone"), Some("a burden")),
            &tpl,
        );
        let parsed = parse_completion(&c.serialized, &tpl).unwrap();
        assert!(parsed.tbe_label && parsed.pbu_label);
    }

    #[test]
    fn free_text_is_unparseable() {
        let tpl = PromptTemplate::default();
        assert!(matches!(
            parse_completion("hello world", &tpl),
            Err(ParseError::Unparseable { .. })
        ));
    }

    #[test]
    fn cue_on_negative_factor_normalized_away() {
        let tpl = PromptTemplate::default();
        // Label phrase says burden-only, yet the belong section carries text.
        let raw = format!(
            "{}burden{}spurious words{}cannot sleep",
            tpl.rho1_prefix, tpl.rho2_prefix, tpl.rho3_prefix
        );
        let parsed = parse_completion(&raw, &tpl).unwrap();
        assert!(!parsed.tbe_label);
        assert!(parsed.pbu_label);
        assert_eq!(parsed.tbe_cue, None);
        assert!(!parsed.exact);
        assert!(parsed
            .diagnostics
            .contains(&Diagnostic::CueOnNegativeFactor(Factor::Tbe)));
        assert_eq!(parsed.pbu_cue.as_deref(), Some("cannot sleep"));
    }

    #[test]
    fn missing_final_section_parses_with_diagnostic() {
        let tpl = PromptTemplate::default();
        let raw = format!("{}belong{}feel alone", tpl.rho1_prefix, tpl.rho2_prefix);
        let parsed = parse_completion(&raw, &tpl).unwrap();
        assert!(parsed.tbe_label && !parsed.pbu_label);
        assert_eq!(parsed.tbe_cue.as_deref(), Some("feel alone"));
        assert!(!parsed.exact);
        assert!(parsed
            .diagnostics
            .contains(&Diagnostic::MissingSection(Factor::Pbu)));
    }

    #[test]
    fn case_folded_completion_parses_inexactly() {
        let tpl = PromptTemplate::default();
        let c = build_completion(&post(true, false, Some("feel alone"), None), &tpl);
        let parsed = parse_completion(&c.serialized.to_uppercase(), &tpl).unwrap();
        assert!(!parsed.exact);
        assert!(parsed.diagnostics.contains(&Diagnostic::NormalizedMatch));
        assert!(parsed.tbe_label);
        assert_eq!(parsed.tbe_cue.as_deref(), Some("feel alone"));
    }

    #[test]
    fn stop_sequence_truncates_trailing_text() {
        let tpl = PromptTemplate::default();
        let c = build_completion(&post(false, false, None, None), &tpl);
        let raw = format!("{}{}garbage after stop", c.serialized, tpl.stop_sequence);
        let parsed = parse_completion(&raw, &tpl).unwrap();
        assert!(parsed.exact);
        assert_eq!((parsed.tbe_label, parsed.pbu_label), (false, false));
    }

    #[test]
    fn primary_cue_extraction() {
        assert_eq!(extract_primary_cue("feel alone"), "feel alone");
        assert_eq!(extract_primary_cue("feel alone; nobody cares"), "feel alone");
        assert_eq!(extract_primary_cue("  burden to everyone \n"), "burden to everyone");
        assert_eq!(extract_primary_cue("a / b"), "a");
    }

    #[test]
    fn lexicon_bijection_through_parser() {
        let tpl = PromptTemplate::default();
        for tbe in [false, true] {
            for pbu in [false, true] {
                let p = post(tbe, pbu, tbe.then_some("feel alone"), pbu.then_some("a burden"));
                let c = build_completion(&p, &tpl);
                let parsed = parse_completion(&c.serialized, &tpl).unwrap();
                assert_eq!((parsed.tbe_label, parsed.pbu_label), (tbe, pbu));
            }
        }
    }

    #[test]
    fn fuzz_never_panics() {
        use rand::{Rng, SeedableRng};
        let tpl = PromptTemplate::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let alphabet: Vec<char> =
            "abcdefgh XYZ\n\t:;#/belong burden neither both This".chars().collect();
        for _ in 0..100_000 {
            let len = rng.gen_range(0..120);
            let s: String = (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            let _ = parse_completion(&s, &tpl);
        }
    }
}
