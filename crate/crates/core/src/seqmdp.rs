//! Deterministic sequence MDP: vocabulary, states, and the append-transition.
//!
//! A state is an immutable token-id prefix. Taking action `a` appends one
//! token; the successor is terminal when the token is EOS or the sequence
//! reaches the configured length cap. The cap makes every decoding tree
//! finite, which is what lets the oracle module enumerate it exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SfError};

/// Dense token identifier, `0 <= id < V`.
pub type TokenId = usize;

/// Reserved id for the beginning-of-sequence marker.
pub const BOS: TokenId = 0;
/// Reserved id for the end-of-sequence token. EOS is an ordinary selectable action.
pub const EOS: TokenId = 1;
/// Reserved id for out-of-vocabulary surfaces.
pub const UNK: TokenId = 2;

const BOS_SURFACE: &str = "<bos>";
const EOS_SURFACE: &str = "<eos>";
const UNK_SURFACE: &str = "<unk>";

/// How raw text lines are split into surface tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizeMode {
    /// Split on ASCII/Unicode whitespace.
    Whitespace,
    /// Every Unicode scalar value is a token.
    Char,
}

impl TokenizeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(TokenizeMode::Whitespace),
            "char" => Ok(TokenizeMode::Char),
            other => Err(SfError::Config(format!(
                "unknown tokenize mode {other:?} (expected \"whitespace\" or \"char\")"
            ))),
        }
    }
}

/// Surface forms indexed by dense token id, with reserved BOS/EOS/UNK slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Number of token ids, reserved ids included.
    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    /// Surface form for `id`, or `None` when out of range.
    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id).map(String::as_str)
    }

    /// Id for a surface form, if present.
    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Render a token-id sequence as space-joined surfaces, skipping BOS/EOS.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens {
            if t == BOS || t == EOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.surface(t).unwrap_or(UNK_SURFACE));
        }
        out
    }

    fn with_reserved() -> Vocab {
        let surfaces = vec![
            BOS_SURFACE.to_string(),
            EOS_SURFACE.to_string(),
            UNK_SURFACE.to_string(),
        ];
        let index = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocab { surfaces, index }
    }

    fn push(&mut self, surface: &str) -> TokenId {
        let id = self.surfaces.len();
        self.surfaces.push(surface.to_string());
        self.index.insert(surface.to_string(), id);
        id
    }

    /// Write the vocab file: one `<id>\t<surface>` line per token, ids ascending.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, surface) in self.surfaces.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{surface}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Read a vocab file written by [`Vocab::write_file`].
    pub fn read_file(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let mut surfaces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (id_str, surface) = line.split_once('\t').ok_or_else(|| {
                SfError::Format(format!("vocab file {path:?} line {}: missing tab", lineno + 1))
            })?;
            let id: usize = id_str.parse().map_err(|_| {
                SfError::Format(format!("vocab file {path:?} line {}: bad id {id_str:?}", lineno + 1))
            })?;
            if id != surfaces.len() {
                return Err(SfError::Format(format!(
                    "vocab file {path:?} line {}: ids must ascend from 0 (got {id})",
                    lineno + 1
                )));
            }
            surfaces.push(surface.to_string());
        }
        if surfaces.len() < 3
            || surfaces[BOS] != BOS_SURFACE
            || surfaces[EOS] != EOS_SURFACE
            || surfaces[UNK] != UNK_SURFACE
        {
            return Err(SfError::Format(format!(
                "vocab file {path:?}: reserved ids 0..3 must be {BOS_SURFACE}/{EOS_SURFACE}/{UNK_SURFACE}"
            )));
        }
        let index = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Vocab { surfaces, index })
    }
}

/// Split a raw text line into surface tokens.
pub fn split_surfaces(line: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Whitespace => line.split_whitespace().map(str::to_string).collect(),
        TokenizeMode::Char => line
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
    }
}

/// Build a vocabulary from pre-split documents.
///
/// Every surface with frequency >= `min_count` gets an id, assigned in order
/// of first appearance so the result is deterministic in the corpus stream.
/// Everything else maps to UNK at tokenize time.
pub fn build_vocab(docs: &[Vec<String>], min_count: usize) -> Result<Vocab> {
    if docs.iter().all(|d| d.is_empty()) {
        return Err(SfError::Input("empty corpus".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for tok in doc {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut vocab = Vocab::with_reserved();
    for doc in docs {
        for tok in doc {
            if vocab.index.contains_key(tok.as_str()) {
                continue;
            }
            if tok == BOS_SURFACE || tok == EOS_SURFACE || tok == UNK_SURFACE {
                continue;
            }
            if freq[tok.as_str()] >= min_count {
                vocab.push(tok);
            }
        }
    }
    Ok(vocab)
}

/// Map a text line to token ids. Unknown surfaces map to UNK; the output
/// never contains BOS or EOS (callers add those).
pub fn tokenize(line: &str, mode: TokenizeMode, vocab: &Vocab) -> Vec<TokenId> {
    split_surfaces(line, mode)
        .iter()
        .map(|s| match vocab.id(s) {
            Some(id) if id != BOS && id != EOS => id,
            _ => UNK,
        })
        .collect()
}

/// Read a corpus file: UTF-8 plain text, one document per line.
pub fn read_corpus_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_string).collect())
}

/// An immutable token-id prefix with a terminal flag.
///
/// The flag is true iff the last token is EOS or the length equals the cap
/// the state was constructed with. Terminal states admit no transitions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeqState {
    tokens: Vec<TokenId>,
    terminal: bool,
}

impl SeqState {
    /// The empty state (used as an encoder edge case; not a decodable prompt).
    pub fn empty() -> SeqState {
        SeqState { tokens: Vec::new(), terminal: false }
    }

    /// A decoding start state: BOS followed by the prompt's content tokens.
    pub fn prompt(content: &[TokenId], max_len: usize) -> Result<SeqState> {
        let mut tokens = Vec::with_capacity(content.len() + 1);
        tokens.push(BOS);
        tokens.extend_from_slice(content);
        SeqState::from_tokens(tokens, max_len)
    }

    /// Wrap an explicit token sequence, computing the terminal flag against `max_len`.
    pub fn from_tokens(tokens: Vec<TokenId>, max_len: usize) -> Result<SeqState> {
        if tokens.len() > max_len {
            return Err(SfError::Input(format!(
                "sequence length {} exceeds cap {max_len}",
                tokens.len()
            )));
        }
        let terminal = match tokens.last() {
            Some(&last) => last == EOS || tokens.len() == max_len,
            None => false,
        };
        Ok(SeqState { tokens, terminal })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Content tokens: the sequence without BOS/EOS markers.
    pub fn content(&self) -> Vec<TokenId> {
        self.tokens
            .iter()
            .copied()
            .filter(|&t| t != BOS && t != EOS)
            .collect()
    }

    /// Append `action`, returning the successor state.
    ///
    /// The successor is terminal iff `action` is EOS or the new length
    /// reaches `max_len`.
    pub fn step(&self, action: TokenId, vocab_size: usize, max_len: usize) -> Result<SeqState> {
        if self.terminal {
            return Err(SfError::Contract("step from a terminal state".into()));
        }
        if action >= vocab_size {
            return Err(SfError::Input(format!(
                "token id {action} out of range for vocab size {vocab_size}"
            )));
        }
        if self.tokens.len() >= max_len {
            return Err(SfError::Contract(format!(
                "state length {} already at cap {max_len}",
                self.tokens.len()
            )));
        }
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(action);
        let terminal = action == EOS || tokens.len() == max_len;
        Ok(SeqState { tokens, terminal })
    }
}

/// A finished decoding episode: the visited (state, action) pairs, the
/// terminal state they end in, optional per-subject terminal labels, and
/// the step indices where the rectifier had to fall back because every
/// token was capped below a feasible distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<(SeqState, TokenId)>,
    terminal: SeqState,
    labels: Option<Vec<i8>>,
    fallback_steps: Vec<usize>,
}

impl Trajectory {
    /// Assemble and validate a trajectory: intermediate states non-terminal,
    /// the final state terminal, and every consecutive pair related by `step`.
    pub fn validated(
        steps: Vec<(SeqState, TokenId)>,
        terminal: SeqState,
        fallback_steps: Vec<usize>,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Trajectory> {
        if !terminal.is_terminal() {
            return Err(SfError::Input("trajectory must end in a terminal state".into()));
        }
        if steps.is_empty() {
            return Err(SfError::Input("trajectory has no transitions".into()));
        }
        for (i, (state, action)) in steps.iter().enumerate() {
            let next = state.step(*action, vocab_size, max_len)?;
            let expected = steps.get(i + 1).map(|(s, _)| s).unwrap_or(&terminal);
            if &next != expected {
                return Err(SfError::Input(format!(
                    "trajectory step {i} does not replay: {next:?} != {expected:?}"
                )));
            }
        }
        Ok(Trajectory { steps, terminal, labels: None, fallback_steps })
    }

    pub fn steps(&self) -> &[(SeqState, TokenId)] {
        &self.steps
    }

    pub fn terminal(&self) -> &SeqState {
        &self.terminal
    }

    /// Per-subject terminal labels in {-1, 0}, once scored.
    pub fn labels(&self) -> Option<&[i8]> {
        self.labels.as_deref()
    }

    /// Steps at which rectified decoding used the proportional-to-caps fallback.
    pub fn fallback_steps(&self) -> &[usize] {
        &self.fallback_steps
    }

    /// Attach per-subject terminal labels.
    pub fn with_labels(mut self, labels: Vec<i8>) -> Result<Trajectory> {
        if labels.iter().any(|&l| l != -1 && l != 0) {
            return Err(SfError::Input("labels must be -1 or 0".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(s: &str) -> Vec<String> {
        split_surfaces(s, TokenizeMode::Whitespace)
    }

    #[test]
    fn build_vocab_counts_distinct_tokens() {
        let vocab = build_vocab(&[doc("a b a")], 1).unwrap();
        assert_eq!(vocab.size(), 5);
        assert_eq!(vocab.surface(3), Some("a"));
        assert_eq!(vocab.surface(4), Some("b"));
    }

    #[test]
    fn build_vocab_threshold_demotes_rare_tokens() {
        let vocab = build_vocab(&[doc("a b a")], 2).unwrap();
        assert_eq!(vocab.size(), 4);
        assert_eq!(vocab.id("a"), Some(3));
        assert_eq!(vocab.id("b"), None);
        assert_eq!(tokenize("b", TokenizeMode::Whitespace, &vocab), vec![UNK]);
    }

    #[test]
    fn build_vocab_ten_line_corpus() {
        // Ten lines over six distinct surfaces, counted by hand: V = 6 + 3 reserved.
        let lines = [
            "red fox", "red dog", "fox ran", "dog ran far", "far far away",
            "red fox ran", "away ran dog", "fox fox", "dog far", "away red",
        ];
        let docs: Vec<Vec<String>> = lines.iter().map(|l| doc(l)).collect();
        let vocab = build_vocab(&docs, 1).unwrap();
        assert_eq!(vocab.size(), 9);
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        assert!(matches!(build_vocab(&[], 1), Err(SfError::Input(_))));
        assert!(matches!(build_vocab(&[vec![]], 1), Err(SfError::Input(_))));
    }

    #[test]
    fn tokenize_modes_and_unk() {
        let vocab = build_vocab(&[doc("a b")], 1).unwrap();
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        assert_eq!(tokenize("a b", TokenizeMode::Whitespace, &vocab), vec![a, b]);
        assert_eq!(tokenize("ab", TokenizeMode::Char, &vocab), vec![a, b]);
        assert_eq!(tokenize("a zzz", TokenizeMode::Whitespace, &vocab), vec![a, UNK]);
        // Literal reserved surfaces in text never produce structural tokens.
        assert_eq!(tokenize("<bos> a", TokenizeMode::Whitespace, &vocab), vec![UNK, a]);
    }

    #[test]
    fn step_eos_terminates() {
        let s = SeqState::prompt(&[], 8).unwrap();
        let next = s.step(EOS, 5, 8).unwrap();
        assert_eq!(next.tokens(), &[BOS, EOS]);
        assert!(next.is_terminal());
    }

    #[test]
    fn step_ordinary_token_continues() {
        let s = SeqState::prompt(&[], 8).unwrap();
        let next = s.step(3, 5, 8).unwrap();
        assert_eq!(next.tokens(), &[BOS, 3]);
        assert!(!next.is_terminal());
    }

    #[test]
    fn step_cap_terminates() {
        let s = SeqState::from_tokens(vec![BOS, 3, 3], 4).unwrap();
        let next = s.step(4, 5, 4).unwrap();
        assert_eq!(next.tokens(), &[BOS, 3, 3, 4]);
        assert!(next.is_terminal());
    }

    #[test]
    fn step_contract_errors() {
        let terminal = SeqState::from_tokens(vec![BOS, EOS], 8).unwrap();
        assert!(matches!(terminal.step(3, 5, 8), Err(SfError::Contract(_))));
        let s = SeqState::prompt(&[], 8).unwrap();
        assert!(matches!(s.step(99, 5, 8), Err(SfError::Input(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = build_vocab(&[doc("a b a c")], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.write_file(&path).unwrap();
        let back = Vocab::read_file(&path).unwrap();
        assert_eq!(vocab, back);
    }

    #[test]
    fn reachable_states_form_a_bounded_tree() {
        // Exhaustive enumeration for small V and L stays within sum of V^i.
        for (v, max_len) in [(4usize, 4usize), (5, 5), (8, 4)] {
            let mut frontier = vec![SeqState::prompt(&[], max_len).unwrap()];
            let mut visited = 0usize;
            while let Some(state) = frontier.pop() {
                visited += 1;
                if state.is_terminal() {
                    continue;
                }
                for a in 0..v {
                    frontier.push(state.step(a, v, max_len).unwrap());
                }
            }
            let depth = max_len - 1;
            let bound: usize = (0..=depth).map(|i| v.pow(i as u32)).sum();
            assert!(visited <= bound, "visited {visited} > bound {bound}");
        }
    }

    proptest! {
        #[test]
        fn step_is_deterministic(actions in proptest::collection::vec(0usize..6, 1..6)) {
            let max_len = 10;
            let s = SeqState::prompt(&[], max_len).unwrap();
            let run = |mut state: SeqState| {
                for &a in &actions {
                    if state.is_terminal() { break; }
                    state = state.step(a, 6, max_len).unwrap();
                }
                state
            };
            let one = run(s.clone());
            let two = run(s);
            prop_assert_eq!(one.tokens(), two.tokens());
            prop_assert_eq!(one.is_terminal(), two.is_terminal());
        }

        #[test]
        fn trajectories_replay(actions in proptest::collection::vec(2usize..6, 1..8)) {
            let max_len = 6;
            let vocab_size = 6;
            let mut state = SeqState::prompt(&[], max_len).unwrap();
            let mut steps = Vec::new();
            for &a in &actions {
                if state.is_terminal() { break; }
                let next = state.step(a, vocab_size, max_len).unwrap();
                steps.push((state, a));
                state = next;
            }
            if !state.is_terminal() {
                let next = state.step(EOS, vocab_size, max_len).unwrap();
                steps.push((state, EOS));
                state = next;
            }
            let t = Trajectory::validated(steps, state, vec![], vocab_size, max_len);
            prop_assert!(t.is_ok());
        }
    }
}
