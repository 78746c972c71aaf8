//! Subjects as lexicons of literal token patterns.
//!
//! A subject is a named set of token sequences; a finished generation is
//! undesired for the subject when any pattern occurs as a contiguous run of
//! its content tokens. The binary terminal label (-1 matched / 0 clean)
//! feeds reward regression; the graded score (matched fraction of patterns)
//! feeds the expected-max metric.

use std::path::Path;

use crate::error::{Result, SfError};
use crate::featnet::TerminalDataset;
use crate::oracle::{ContainsScorer, TerminalScorer};
use crate::seqmdp::{tokenize, SeqState, TokenId, TokenizeMode, Vocab, BOS, EOS};

/// A named lexicon of literal token patterns.
#[derive(Debug, Clone)]
pub struct SubjectSpec {
    name: String,
    description: String,
    matchers: Vec<ContainsScorer>,
}

impl SubjectSpec {
    pub fn new(name: &str, patterns: Vec<Vec<TokenId>>, description: &str) -> Result<SubjectSpec> {
        if name.is_empty() {
            return Err(SfError::Config("empty subject name".into()));
        }
        if patterns.is_empty() {
            return Err(SfError::Config(format!("subject '{name}' has no patterns")));
        }
        let matchers = patterns
            .into_iter()
            .map(ContainsScorer::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(SubjectSpec { name: name.to_string(), description: description.to_string(), matchers })
    }

    /// Load a lexicon file: one pattern per line, `#` lines ignored, tokens
    /// resolved through the vocabulary (out-of-vocabulary surfaces become
    /// UNK, with a warning, and will then match UNK tokens).
    pub fn from_lexicon_file(
        name: &str,
        path: &Path,
        vocab: &Vocab,
        mode: TokenizeMode,
    ) -> Result<SubjectSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SfError::Config(format!("cannot read lexicon {path:?}: {e}")))?;
        let mut patterns = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            for surface in crate::seqmdp::split_surfaces(line, mode) {
                if vocab.id(&surface).is_none() {
                    log::warn!(
                        "lexicon {path:?}: surface {surface:?} is out of vocabulary, \
                         pattern will match UNK"
                    );
                }
            }
            patterns.push(tokenize(line, mode, vocab));
        }
        SubjectSpec::new(name, patterns, &format!("lexicon {}", path.display()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn pattern_count(&self) -> usize {
        self.matchers.len()
    }

    /// Binary terminal label: -1 when any pattern matches, else 0.
    pub fn score_terminal(&self, state: &SeqState) -> Result<i8> {
        if !state.is_terminal() {
            return Err(SfError::Contract("scoring a non-terminal state".into()));
        }
        let content = state.content();
        Ok(if self.matchers.iter().any(|m| m.matches_content(&content)) { -1 } else { 0 })
    }

    /// Graded score in [0, 1]: the fraction of the subject's patterns that
    /// occur in the content.
    pub fn continuous_score(&self, state: &SeqState) -> Result<f64> {
        if !state.is_terminal() {
            return Err(SfError::Contract("scoring a non-terminal state".into()));
        }
        let content = state.content();
        let matched = self.matchers.iter().filter(|m| m.matches_content(&content)).count();
        Ok(matched as f64 / self.matchers.len() as f64)
    }
}

impl TerminalScorer for SubjectSpec {
    fn undesired(&self, terminal: &SeqState) -> Result<bool> {
        Ok(self.score_terminal(terminal)? == -1)
    }

    fn memo_state(&self, state: &SeqState) -> Option<Vec<u64>> {
        let mut key = Vec::new();
        for m in &self.matchers {
            key.extend(m.memo_state(state)?);
        }
        Some(key)
    }
}

/// A corpus document as the terminal state it denotes.
pub fn doc_terminal(doc: &[TokenId]) -> Result<SeqState> {
    let mut tokens = Vec::with_capacity(doc.len() + 2);
    tokens.push(BOS);
    tokens.extend_from_slice(doc);
    tokens.push(EOS);
    let max_len = tokens.len();
    SeqState::from_tokens(tokens, max_len)
}

/// Label every corpus document against every subject, producing the
/// multi-task regression dataset (tasks ordered as `specs`).
pub fn label_dataset(specs: &[SubjectSpec], docs: &[Vec<TokenId>]) -> Result<TerminalDataset> {
    let states = docs.iter().map(|d| doc_terminal(d)).collect::<Result<Vec<_>>>()?;
    label_terminals(specs, states)
}

/// Label arbitrary terminal states against every subject (tasks ordered as
/// `specs`).
pub fn label_terminals(specs: &[SubjectSpec], states: Vec<SeqState>) -> Result<TerminalDataset> {
    let mut labels = Vec::with_capacity(states.len());
    for state in &states {
        let mut row = Vec::with_capacity(specs.len());
        for spec in specs {
            row.push(spec.score_terminal(state)? as f64);
        }
        labels.push(row);
    }
    TerminalDataset::new(states, labels)
}

/// Write `<doc-id>\t<subject-name>\t<label>` lines.
pub fn write_labels(path: &Path, rows: &[(String, String, i8)]) -> Result<()> {
    let mut out = String::new();
    for (doc_id, subject, label) in rows {
        out.push_str(doc_id);
        out.push('\t');
        out.push_str(subject);
        out.push('\t');
        out.push_str(&label.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a label file written by [`write_labels`].
pub fn read_labels(path: &Path) -> Result<Vec<(String, String, i8)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SfError::Config(format!("cannot read labels {path:?}: {e}")))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let (Some(doc), Some(subject), Some(label), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(SfError::Format(format!(
                "labels {path:?} line {}: expected 3 tab-separated fields",
                lineno + 1
            )));
        };
        let label: i8 = label.parse().map_err(|_| {
            SfError::Format(format!("labels {path:?} line {}: bad label {label:?}", lineno + 1))
        })?;
        if !(label == -1 || label == 0) {
            return Err(SfError::Format(format!(
                "labels {path:?} line {}: label must be -1 or 0",
                lineno + 1
            )));
        }
        rows.push((doc.to_string(), subject.to_string(), label));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmdp::{build_vocab, split_surfaces};

    fn vocab_of(lines: &[&str]) -> Vocab {
        let docs: Vec<Vec<String>> = lines
            .iter()
            .map(|l| split_surfaces(l, TokenizeMode::Whitespace))
            .collect();
        build_vocab(&docs, 1).unwrap()
    }

    fn terminal(vocab: &Vocab, text: &str) -> SeqState {
        let doc = tokenize(text, TokenizeMode::Whitespace, vocab);
        doc_terminal(&doc).unwrap()
    }

    #[test]
    fn lexicon_match_labels_minus_one() {
        let vocab = vocab_of(&["this is bad", "this is fine"]);
        let bad = tokenize("bad", TokenizeMode::Whitespace, &vocab);
        let spec = SubjectSpec::new("toxic", vec![bad], "").unwrap();
        assert_eq!(spec.score_terminal(&terminal(&vocab, "this is bad")).unwrap(), -1);
        assert_eq!(spec.score_terminal(&terminal(&vocab, "this is fine")).unwrap(), 0);
    }

    #[test]
    fn no_match_scores_zero() {
        let vocab = vocab_of(&["a b"]);
        let pat = tokenize("b a", TokenizeMode::Whitespace, &vocab);
        let spec = SubjectSpec::new("s", vec![pat], "").unwrap();
        assert_eq!(spec.score_terminal(&terminal(&vocab, "a b")).unwrap(), 0);
    }

    #[test]
    fn patterns_require_adjacency() {
        let vocab = vocab_of(&["a b"]);
        let pat = tokenize("b b", TokenizeMode::Whitespace, &vocab);
        let spec = SubjectSpec::new("s", vec![pat], "").unwrap();
        // "a b a b" contains two b's, but never adjacent.
        assert_eq!(spec.score_terminal(&terminal(&vocab, "a b a b")).unwrap(), 0);
        assert_eq!(spec.score_terminal(&terminal(&vocab, "a b b a")).unwrap(), -1);
    }

    #[test]
    fn non_terminal_scoring_is_rejected() {
        let spec = SubjectSpec::new("s", vec![vec![3]], "").unwrap();
        let open = SeqState::prompt(&[3], 8).unwrap();
        assert!(matches!(spec.score_terminal(&open), Err(SfError::Contract(_))));
        assert!(matches!(spec.continuous_score(&open), Err(SfError::Contract(_))));
    }

    #[test]
    fn continuous_score_is_the_matched_fraction() {
        let vocab = vocab_of(&["x y z"]);
        let px = tokenize("x", TokenizeMode::Whitespace, &vocab);
        let py = tokenize("y", TokenizeMode::Whitespace, &vocab);
        let pz = tokenize("z z", TokenizeMode::Whitespace, &vocab);
        let spec = SubjectSpec::new("s", vec![px, py, pz], "").unwrap();
        let s = terminal(&vocab, "x y");
        // Two of three patterns match.
        assert!((spec.continuous_score(&s).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_lexicon_is_rejected() {
        assert!(matches!(SubjectSpec::new("s", vec![], ""), Err(SfError::Config(_))));
        assert!(matches!(SubjectSpec::new("", vec![vec![3]], ""), Err(SfError::Config(_))));
    }

    #[test]
    fn lexicon_file_skips_comments_and_warns_oov() {
        let vocab = vocab_of(&["good words only"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "# comment\n\ngood words\nmystery\n").unwrap();
        let spec =
            SubjectSpec::from_lexicon_file("s", &path, &vocab, TokenizeMode::Whitespace).unwrap();
        assert_eq!(spec.pattern_count(), 2);
        // The OOV pattern becomes UNK and matches an UNK in the content.
        let with_unk = terminal(&vocab, "good unknowable");
        assert_eq!(spec.score_terminal(&with_unk).unwrap(), -1);
    }

    #[test]
    fn label_dataset_orders_tasks_by_spec() {
        let vocab = vocab_of(&["a b", "b", "a"]);
        let pa = tokenize("a", TokenizeMode::Whitespace, &vocab);
        let pb = tokenize("b", TokenizeMode::Whitespace, &vocab);
        let sa = SubjectSpec::new("has-a", vec![pa], "").unwrap();
        let sb = SubjectSpec::new("has-b", vec![pb], "").unwrap();
        let docs = vec![
            tokenize("a b", TokenizeMode::Whitespace, &vocab),
            tokenize("b", TokenizeMode::Whitespace, &vocab),
        ];
        let data = label_dataset(&[sa, sb], &docs).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.tasks(), 2);
        assert_eq!(data.label_row(0), &[-1.0, -1.0]);
        assert_eq!(data.label_row(1), &[0.0, -1.0]);
    }

    #[test]
    fn labels_file_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let rows = vec![
            ("0".to_string(), "toxic".to_string(), -1i8),
            ("1".to_string(), "toxic".to_string(), 0i8),
        ];
        write_labels(&path, &rows).unwrap();
        assert_eq!(read_labels(&path).unwrap(), rows);
        std::fs::write(&path, "0\ttoxic\t5\n").unwrap();
        assert!(matches!(read_labels(&path), Err(SfError::Format(_))));
    }
}
