//! Exact brute-force references for small instances.
//!
//! Everything here enumerates the decoding tree of a [`DecodePolicy`]
//! exactly, so learned quantities can be checked against ground truth.
//! States are memoized on (policy fingerprint, scorer/feature fingerprint,
//! remaining length budget) when all parties can fingerprint themselves;
//! a deep-but-narrow tree then costs a handful of distinct keys instead of
//! its exponential path count. A global node budget turns runaway
//! enumerations into a reported error instead of a hung process.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Result, SfError};
use crate::rectify::DecodePolicy;
use crate::seqmdp::{SeqState, TokenId};
use crate::sfnet::QVector;

/// Hard ceiling on enumerated states per oracle call.
pub const NODE_BUDGET: u64 = 10_000_000;

/// Decides whether a finished sequence is undesired, and exposes enough
/// matcher state for enumeration to merge histories safely.
pub trait TerminalScorer {
    /// Verdict for a terminal state.
    fn undesired(&self, terminal: &SeqState) -> Result<bool>;

    /// Facts about a (possibly non-terminal) state such that the verdict of
    /// every completion depends only on them plus the appended tokens.
    /// None disables memoized enumeration over this scorer.
    fn memo_state(&self, state: &SeqState) -> Option<Vec<u64>>;
}

/// Undesired iff the content tokens contain a fixed contiguous pattern.
#[derive(Debug, Clone)]
pub struct ContainsScorer {
    pattern: Vec<TokenId>,
}

impl ContainsScorer {
    pub fn new(pattern: Vec<TokenId>) -> Result<ContainsScorer> {
        if pattern.is_empty() {
            return Err(SfError::Config("empty pattern".into()));
        }
        Ok(ContainsScorer { pattern })
    }

    pub fn pattern(&self) -> &[TokenId] {
        &self.pattern
    }

    /// Whether the pattern occurs as a contiguous run in `content`.
    pub fn matches_content(&self, content: &[TokenId]) -> bool {
        self.contains(content)
    }

    fn contains(&self, content: &[TokenId]) -> bool {
        content.len() >= self.pattern.len()
            && content.windows(self.pattern.len()).any(|w| w == self.pattern)
    }

    /// Longest proper prefix of the pattern that is a suffix of the content:
    /// the matcher state a future occurrence can build on.
    fn prefix_state(&self, content: &[TokenId]) -> usize {
        for p in (1..self.pattern.len()).rev() {
            if content.len() >= p && content[content.len() - p..] == self.pattern[..p] {
                return p;
            }
        }
        0
    }
}

impl TerminalScorer for ContainsScorer {
    fn undesired(&self, terminal: &SeqState) -> Result<bool> {
        if !terminal.is_terminal() {
            return Err(SfError::Contract("scoring a non-terminal state".into()));
        }
        Ok(self.contains(&terminal.content()))
    }

    fn memo_state(&self, state: &SeqState) -> Option<Vec<u64>> {
        let content = state.content();
        let matched = self.contains(&content);
        let prefix = if matched { 0 } else { self.prefix_state(&content) };
        Some(vec![matched as u64, prefix as u64])
    }
}

/// Undesired iff the terminal content has at least `threshold` tokens.
#[derive(Debug, Clone, Copy)]
pub struct MinContentLengthScorer {
    pub threshold: usize,
}

impl TerminalScorer for MinContentLengthScorer {
    fn undesired(&self, terminal: &SeqState) -> Result<bool> {
        if !terminal.is_terminal() {
            return Err(SfError::Contract("scoring a non-terminal state".into()));
        }
        Ok(terminal.content().len() >= self.threshold)
    }

    fn memo_state(&self, state: &SeqState) -> Option<Vec<u64>> {
        Some(vec![state.content().len().min(self.threshold) as u64])
    }
}

/// Nothing is undesired.
#[derive(Debug, Clone, Copy)]
pub struct NeverScorer;

impl TerminalScorer for NeverScorer {
    fn undesired(&self, _terminal: &SeqState) -> Result<bool> {
        Ok(false)
    }

    fn memo_state(&self, _state: &SeqState) -> Option<Vec<u64>> {
        Some(Vec::new())
    }
}

/// Everything is undesired; the rate then measures total terminal mass.
#[derive(Debug, Clone, Copy)]
pub struct AlwaysScorer;

impl TerminalScorer for AlwaysScorer {
    fn undesired(&self, _terminal: &SeqState) -> Result<bool> {
        Ok(true)
    }

    fn memo_state(&self, _state: &SeqState) -> Option<Vec<u64>> {
        Some(Vec::new())
    }
}

/// Feature vector of a terminal state, for exact successor-feature
/// expectations.
pub trait TerminalFeatureMap {
    fn dim(&self) -> usize;

    fn features(&self, terminal: &SeqState) -> Result<Vec<f64>>;

    /// Same contract as [`TerminalScorer::memo_state`].
    fn memo_state(&self, state: &SeqState) -> Option<Vec<u64>>;
}

/// One feature: -1 on undesired terminals, 0 otherwise, so that the exact
/// expectation times a unit weight reproduces the dead-end Q.
pub struct IndicatorFeature<'a> {
    pub scorer: &'a dyn TerminalScorer,
}

impl TerminalFeatureMap for IndicatorFeature<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn features(&self, terminal: &SeqState) -> Result<Vec<f64>> {
        Ok(vec![if self.scorer.undesired(terminal)? { -1.0 } else { 0.0 }])
    }

    fn memo_state(&self, state: &SeqState) -> Option<Vec<u64>> {
        self.scorer.memo_state(state)
    }
}

/// Identically-zero features of a given width.
pub struct ZeroFeature {
    pub dim: usize,
}

impl TerminalFeatureMap for ZeroFeature {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, _terminal: &SeqState) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.dim])
    }

    fn memo_state(&self, _state: &SeqState) -> Option<Vec<u64>> {
        Some(Vec::new())
    }
}

/// Depth-first expectation of a terminal-state vector under a policy.
struct TreeExpectation<'a> {
    policy: &'a dyn DecodePolicy,
    max_len: usize,
    dim: usize,
    leaf: &'a dyn Fn(&SeqState) -> Result<Vec<f64>>,
    extra_key: &'a dyn Fn(&SeqState) -> Option<Vec<u64>>,
    memo: HashMap<(Vec<u64>, usize), Vec<f64>>,
    nodes: u64,
}

impl TreeExpectation<'_> {
    fn expectation(&mut self, state: &SeqState) -> Result<Vec<f64>> {
        self.nodes += 1;
        if self.nodes > NODE_BUDGET {
            return Err(SfError::Budget(format!(
                "exact enumeration visited more than {NODE_BUDGET} states"
            )));
        }
        if state.is_terminal() {
            let v = (self.leaf)(state)?;
            if v.len() != self.dim {
                return Err(SfError::Contract(format!(
                    "terminal features have length {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            return Ok(v);
        }
        let key = match (self.policy.memo_fingerprint(state), (self.extra_key)(state)) {
            (Some(mut fp), Some(extra)) => {
                fp.extend(extra);
                Some((fp, self.max_len - state.len()))
            }
            _ => None,
        };
        if let Some(k) = &key {
            if let Some(v) = self.memo.get(k) {
                return Ok(v.clone());
            }
        }
        let dist = self.policy.step_dist(state)?;
        let vocab = self.policy.vocab_size();
        let mut acc = vec![0.0; self.dim];
        for a in 0..vocab {
            let p = dist.get(a);
            if p == 0.0 {
                continue;
            }
            let child = state.step(a as TokenId, vocab, self.max_len)?;
            let v = self.expectation(&child)?;
            for (slot, x) in acc.iter_mut().zip(&v) {
                *slot += p * x;
            }
        }
        if let Some(k) = key {
            self.memo.insert(k, acc.clone());
        }
        Ok(acc)
    }
}

/// Exact probability that decoding from `prompt` under `policy` ends
/// undesired.
pub fn exact_undesired_rate(
    policy: &dyn DecodePolicy,
    scorer: &dyn TerminalScorer,
    prompt: &SeqState,
    max_len: usize,
) -> Result<f64> {
    if prompt.len() > max_len {
        return Err(SfError::Contract(format!(
            "prompt length {} exceeds max_len {max_len}",
            prompt.len()
        )));
    }
    let leaf = |t: &SeqState| -> Result<Vec<f64>> {
        Ok(vec![if scorer.undesired(t)? { 1.0 } else { 0.0 }])
    };
    let extra = |s: &SeqState| scorer.memo_state(s);
    let mut walker = TreeExpectation {
        policy,
        max_len,
        dim: 1,
        leaf: &leaf,
        extra_key: &extra,
        memo: HashMap::new(),
        nodes: 0,
    };
    Ok(walker.expectation(prompt)?[0])
}

/// Exact dead-end Q for every action: Q(s, a) = -P(undesired | append a,
/// then follow the policy). 0 means provably safe, -1 certain dead end.
pub fn exact_q_dead_end(
    policy: &dyn DecodePolicy,
    scorer: &dyn TerminalScorer,
    state: &SeqState,
    max_len: usize,
) -> Result<QVector> {
    if state.is_terminal() {
        return Err(SfError::Contract("Q of a terminal state".into()));
    }
    if state.len() >= max_len {
        return Err(SfError::Contract(format!(
            "state length {} leaves no action under max_len {max_len}",
            state.len()
        )));
    }
    let leaf = |t: &SeqState| -> Result<Vec<f64>> {
        Ok(vec![if scorer.undesired(t)? { 1.0 } else { 0.0 }])
    };
    let extra = |s: &SeqState| scorer.memo_state(s);
    let mut walker = TreeExpectation {
        policy,
        max_len,
        dim: 1,
        leaf: &leaf,
        extra_key: &extra,
        memo: HashMap::new(),
        nodes: 0,
    };
    let vocab = policy.vocab_size();
    let mut q = Vec::with_capacity(vocab);
    for a in 0..vocab {
        let child = state.step(a as TokenId, vocab, max_len)?;
        q.push(-walker.expectation(&child)?[0]);
    }
    Ok(q)
}

/// Exact successor features: row a holds E[features(terminal)] after taking
/// action a from `state` and then following the policy.
pub fn exact_psi(
    policy: &dyn DecodePolicy,
    features: &dyn TerminalFeatureMap,
    state: &SeqState,
    max_len: usize,
) -> Result<Array2<f64>> {
    if state.is_terminal() {
        return Err(SfError::Contract("successor features of a terminal state".into()));
    }
    if state.len() >= max_len {
        return Err(SfError::Contract(format!(
            "state length {} leaves no action under max_len {max_len}",
            state.len()
        )));
    }
    let leaf = |t: &SeqState| features.features(t);
    let extra = |s: &SeqState| features.memo_state(s);
    let mut walker = TreeExpectation {
        policy,
        max_len,
        dim: features.dim(),
        leaf: &leaf,
        extra_key: &extra,
        memo: HashMap::new(),
        nodes: 0,
    };
    let vocab = policy.vocab_size();
    let mut out = Array2::zeros((vocab, features.dim()));
    for a in 0..vocab {
        let child = state.step(a as TokenId, vocab, max_len)?;
        let v = walker.expectation(&child)?;
        for (j, x) in v.iter().enumerate() {
            out[[a, j]] = *x;
        }
    }
    Ok(out)
}

/// Q provider backed by exact enumeration of the base decoding policy: per
/// subject, Q is the true negative undesired-rate of each action. Ground
/// truth for end-to-end rectification tests; exponential outside small
/// instances.
pub struct OracleQ<'a> {
    pub lm: &'a dyn crate::lm::LanguageModel,
    pub top_k: usize,
    /// Subject name -> scorer; every active subject must appear here.
    pub scorers: Vec<(String, &'a dyn TerminalScorer)>,
    pub max_len: usize,
}

impl OracleQ<'_> {
    fn scorer_for(&self, name: &str) -> Result<&dyn TerminalScorer> {
        self.scorers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .ok_or_else(|| SfError::Config(format!("no oracle scorer for subject '{name}'")))
    }
}

impl crate::rectify::QProvider for OracleQ<'_> {
    fn q_vectors(
        &self,
        state: &SeqState,
        bank: &crate::rectify::SubjectBank,
    ) -> Result<(Vec<QVector>, crate::rectify::QCost)> {
        let base = crate::rectify::BasePolicy { lm: self.lm, top_k: self.top_k };
        let mut qs = Vec::with_capacity(bank.active().len());
        for name in bank.active() {
            qs.push(exact_q_dead_end(&base, self.scorer_for(name)?, state, self.max_len)?);
        }
        let cost = crate::rectify::QCost { psi_forwards: 0, matvecs: qs.len() as u64 };
        Ok((qs, cost))
    }

    fn memo_fingerprint(&self, state: &SeqState) -> Option<Vec<u64>> {
        // The per-subject Q depends on the base model's context window, each
        // scorer's matcher state, and (via the enumeration key) the
        // remaining length budget.
        let tokens = state.tokens();
        let take = self.lm.context_len().min(tokens.len());
        let mut key = vec![take as u64];
        key.extend(tokens[tokens.len() - take..].iter().map(|&t| t as u64));
        for (_, scorer) in &self.scorers {
            key.push(u64::MAX); // separator
            key.extend(scorer.memo_state(state)?);
        }
        Some(key)
    }
}
