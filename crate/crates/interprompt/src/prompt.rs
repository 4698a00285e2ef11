//! Build story-completion fine-tune records and N-shot inference prompts.
//!
//! A completion has three sections: a label phrase naming which factors are
//! present, the belong cue words, and the burden cue words. The template
//! carries every literal string involved so the parser can invert the
//! construction without hard-coded text.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Factor, Post};

/// Exemplar counts used by the three canonical prompting protocols.
pub const CANONICAL_SHOTS: [usize; 3] = [0, 1, 8];

/// The four label phrases, one per (TBe, PBu) combination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelLexicon {
    pub neither: String,
    pub belong_only: String,
    pub burden_only: String,
    pub both: String,
}

impl Default for LabelLexicon {
    fn default() -> Self {
        Self {
            neither: "neither belong nor burden".to_string(),
            belong_only: "belong".to_string(),
            burden_only: "burden".to_string(),
            both: "both belong and burden".to_string(),
        }
    }
}

impl LabelLexicon {
    pub fn phrase(&self, tbe: bool, pbu: bool) -> &str {
        match (tbe, pbu) {
            (false, false) => &self.neither,
            (true, false) => &self.belong_only,
            (false, true) => &self.burden_only,
            (true, true) => &self.both,
        }
    }

    /// All (labels, phrase) pairs, longest phrase first. Longest-first order
    /// is what disambiguates "both belong and burden" from "belong".
    pub fn phrases_longest_first(&self) -> Vec<((bool, bool), &str)> {
        let mut pairs = vec![
            ((false, false), self.neither.as_str()),
            ((true, false), self.belong_only.as_str()),
            ((false, true), self.burden_only.as_str()),
            ((true, true), self.both.as_str()),
        ];
        pairs.sort_by_key(|(_, p)| std::cmp::Reverse(p.len()));
        pairs
    }

    fn is_bijective(&self) -> bool {
        let phrases = [&self.neither, &self.belong_only, &self.burden_only, &self.both];
        phrases
            .iter()
            .enumerate()
            .all(|(i, a)| phrases.iter().skip(i + 1).all(|b| a != b))
    }
}

/// The prompt fragments, separators and lexicon that define the record
/// format end to end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    /// Section prefix introducing the label phrase.
    pub rho1_prefix: String,
    /// Section prefix introducing the belong cue words.
    pub rho2_prefix: String,
    /// Section prefix introducing the burden cue words.
    pub rho3_prefix: String,
    /// Appended to the post text to mark the completion boundary.
    pub separator: String,
    /// Terminates every training completion.
    pub stop_sequence: String,
    pub label_lexicon: LabelLexicon,
    /// Placeholder emitted for a negative factor so every completion has
    /// all three sections.
    pub empty_cue_token: String,
    /// Prepended to the serialized completion in fine-tune records
    /// (tokenizer-boundary convention).
    pub completion_prefix: String,
    /// Instruction prepended to zero-shot prompts.
    pub zero_shot_instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            rho1_prefix: "This given sentence represents ".to_string(),
            rho2_prefix: "\nWords those indicate belong expression in the sentence: ".to_string(),
            rho3_prefix: "\nWords those indicate burden expression in the sentence: ".to_string(),
            separator: "\n\nIntent:\n\n".to_string(),
            stop_sequence: "\n###\n".to_string(),
            label_lexicon: LabelLexicon::default(),
            empty_cue_token: "none".to_string(),
            completion_prefix: " ".to_string(),
            zero_shot_instruction: "Read the post and complete the story: state that the given \
                sentence represents one of 'belong', 'burden', 'both belong and burden', or \
                'neither belong nor burden', then give the belong cue words and the burden cue \
                words from the post, writing 'none' when a factor is absent."
                .to_string(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("label lexicon phrases must be pairwise distinct")]
    LexiconNotBijective,
    #[error("stop sequence occurs inside {0}")]
    StopInsideFragment(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("post text contains the stop sequence; record would truncate during training")]
    TextContainsStop,
    #[error("target post {0} appears among the exemplars")]
    ExemplarLeakage(String),
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if !self.label_lexicon.is_bijective() {
            return Err(TemplateError::LexiconNotBijective);
        }
        let fragments: [(&'static str, &str); 7] = [
            ("rho1_prefix", &self.rho1_prefix),
            ("rho2_prefix", &self.rho2_prefix),
            ("rho3_prefix", &self.rho3_prefix),
            ("label phrase", &self.label_lexicon.neither),
            ("label phrase", &self.label_lexicon.belong_only),
            ("label phrase", &self.label_lexicon.burden_only),
            ("label phrase", &self.label_lexicon.both),
        ];
        for (name, fragment) in fragments {
            if fragment.contains(&self.stop_sequence) {
                return Err(TemplateError::StopInsideFragment(name));
            }
        }
        Ok(())
    }

    /// Stable content hash used in run manifests.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_string(self).expect("template serializes");
        let digest = Sha256::digest(canon.as_bytes());
        format!("{digest:x}")
    }
}

/// The structured completion target for one post, plus its serialized form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryCompletion {
    pub label_phrase: String,
    pub tbe_cue: String,
    pub pbu_cue: String,
    pub serialized: String,
}

/// One prompt/completion training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub prompt: String,
    pub completion: String,
}

/// Compose the three-section completion for a post's gold labels and cues.
pub fn build_completion(post: &Post, template: &PromptTemplate) -> StoryCompletion {
    let label_phrase = template
        .label_lexicon
        .phrase(post.tbe_label, post.pbu_label)
        .to_string();
    let cue_or_empty = |factor| {
        post.cue(factor)
            .map(str::to_string)
            .unwrap_or_else(|| template.empty_cue_token.clone())
    };
    let tbe_cue = cue_or_empty(Factor::Tbe);
    let pbu_cue = cue_or_empty(Factor::Pbu);
    let serialized = format!(
        "{}{}{}{}{}{}",
        template.rho1_prefix, label_phrase, template.rho2_prefix, tbe_cue, template.rho3_prefix, pbu_cue
    );
    StoryCompletion {
        label_phrase,
        tbe_cue,
        pbu_cue,
        serialized,
    }
}

/// Build one fine-tune training record: post text plus separator as the
/// prompt, the serialized completion plus stop sequence as the target.
pub fn build_finetune_record(
    post: &Post,
    template: &PromptTemplate,
) -> Result<FineTuneRecord, PromptError> {
    if post.text.contains(&template.stop_sequence) {
        return Err(PromptError::TextContainsStop);
    }
    let completion = build_completion(post, template);
    Ok(FineTuneRecord {
        prompt: format!("{}{}", post.text, template.separator),
        completion: format!(
            "{}{}{}",
            template.completion_prefix, completion.serialized, template.stop_sequence
        ),
    })
}

/// Assemble an N-shot inference prompt: worked exemplar blocks followed by
/// the target post and separator. Zero-shot prepends the instruction line.
pub fn build_nshot_prompt(
    target: &Post,
    exemplars: &[Post],
    template: &PromptTemplate,
) -> Result<String, PromptError> {
    if exemplars.iter().any(|e| e.id == target.id) {
        return Err(PromptError::ExemplarLeakage(target.id.clone()));
    }
    let mut prompt = String::new();
    if exemplars.is_empty() {
        prompt.push_str(&template.zero_shot_instruction);
        prompt.push_str("\n\n");
    }
    for exemplar in exemplars {
        let completion = build_completion(exemplar, template);
        prompt.push_str(&exemplar.text);
        prompt.push_str(&template.separator);
        prompt.push_str(&template.completion_prefix);
        prompt.push_str(&completion.serialized);
        prompt.push_str("\n\n");
    }
    prompt.push_str(&target.text);
    prompt.push_str(&template.separator);
    Ok(prompt)
}

/// Export records as JSONL with `prompt`/`completion` keys, the legacy
/// completion-model fine-tune file convention.
pub fn write_finetune_jsonl<W: std::io::Write>(
    mut out: W,
    records: &[FineTuneRecord],
) -> std::io::Result<()> {
    for record in records {
        let line = serde_json::to_string(record)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Read a JSONL fine-tune file back into records.
pub fn read_finetune_jsonl<R: std::io::BufRead>(reader: R) -> std::io::Result<Vec<FineTuneRecord>> {
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
