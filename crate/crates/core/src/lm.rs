//! The base policy: next-token distributions over the vocabulary.
//!
//! Two models sit behind one trait. [`NGramLM`] is a trainable interpolated
//! add-alpha n-gram model, the desk-scale stand-in for a frozen LLM.
//! [`TableLM`] is an exactly specified rule table used as an oracle fixture:
//! its distributions are known in closed form, so enumeration results can be
//! checked by hand. Both are frozen after construction; rectified decoding
//! never alters them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::checkpoint::Container;
use crate::error::{Result, SfError};
use crate::seqmdp::{SeqState, TokenId, BOS};

/// A length-V probability distribution: entries nonnegative, sum 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<ProbVector> {
        if probs.is_empty() {
            return Err(SfError::Input("empty probability vector".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(SfError::Input("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SfError::Input(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbVector(probs))
    }

    /// Normalize nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<ProbVector> {
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(SfError::Input("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(SfError::Input("all-zero weight vector".into()));
        }
        ProbVector::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(v: usize) -> ProbVector {
        ProbVector(vec![1.0 / v as f64; v])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.0[token]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Anything that produces a next-token distribution for a non-terminal state.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Number of trailing tokens that fully determine the distribution.
    /// Enumeration uses this to collapse the decoding tree to a DAG.
    fn context_len(&self) -> usize;

    fn next_dist(&self, state: &SeqState) -> Result<ProbVector>;
}

/// Interpolated add-alpha n-gram model.
///
/// The distribution is a fixed convex combination over orders `1..=n` of
/// add-alpha estimates, so it is a valid distribution for every context,
/// seen or unseen. Count tables are ordered maps, which makes fitting
/// bitwise deterministic and serialization canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    alpha: f64,
    weights: Vec<f64>,
    vocab_size: usize,
    /// counts[o-1]: context of length o-1 -> next token -> count.
    counts: Vec<BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>>,
    /// totals[o-1]: context -> total count, derived from `counts`.
    totals: Vec<BTreeMap<Vec<TokenId>, u64>>,
}

/// Fit an n-gram model on tokenized documents (content tokens only; BOS
/// padding and the final EOS are added here). The model is frozen once built.
pub fn fit_ngram(
    docs: &[Vec<TokenId>],
    order: usize,
    alpha: f64,
    weights: &[f64],
    vocab_size: usize,
) -> Result<NGramLM> {
    if !(1..=3).contains(&order) {
        return Err(SfError::Config(format!("n-gram order must be 1..=3, got {order}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SfError::Config(format!("alpha must be positive, got {alpha}")));
    }
    if weights.len() != order {
        return Err(SfError::Config(format!(
            "expected {order} interpolation weights, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0)
        || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(SfError::Config("interpolation weights must be nonnegative and sum to 1".into()));
    }
    if vocab_size < 3 {
        return Err(SfError::Config(format!("vocab size must be at least 3, got {vocab_size}")));
    }
    if docs.is_empty() {
        return Err(SfError::Input("empty corpus".into()));
    }
    let mut counts: Vec<BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>> =
        vec![BTreeMap::new(); order];
    let mut totals: Vec<BTreeMap<Vec<TokenId>, u64>> = vec![BTreeMap::new(); order];
    for doc in docs {
        let mut seq = vec![BOS; order.saturating_sub(1).max(1)];
        seq.extend_from_slice(doc);
        seq.push(crate::seqmdp::EOS);
        let pad = order.saturating_sub(1).max(1);
        for i in pad..seq.len() {
            let target = seq[i];
            for o in 1..=order {
                let ctx = seq[i - (o - 1)..i].to_vec();
                *counts[o - 1]
                    .entry(ctx.clone())
                    .or_default()
                    .entry(target)
                    .or_insert(0) += 1;
                *totals[o - 1].entry(ctx).or_insert(0) += 1;
            }
        }
    }
    Ok(NGramLM { order, alpha, weights: weights.to_vec(), vocab_size, counts, totals })
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Context of length `o-1` for a state, left-padded with BOS. Matches the
    /// padding used at fit time, so generation and fitting see the same keys.
    fn context(&self, tokens: &[TokenId], o: usize) -> Vec<TokenId> {
        let need = o - 1;
        if tokens.len() >= need {
            tokens[tokens.len() - need..].to_vec()
        } else {
            let mut ctx = vec![BOS; need - tokens.len()];
            ctx.extend_from_slice(tokens);
            ctx
        }
    }

    fn add_alpha(&self, o: usize, ctx: &[TokenId], token: TokenId) -> f64 {
        let count = self.counts[o - 1]
            .get(ctx)
            .and_then(|m| m.get(&token))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.totals[o - 1].get(ctx).copied().unwrap_or(0) as f64;
        (count + self.alpha) / (total + self.alpha * self.vocab_size as f64)
    }

    /// Serialize into checkpoint sections `lm.meta`, `lm.alpha`, `lm.weights`,
    /// `lm.counts.<o>`.
    pub fn save_into(&self, out: &mut Container) {
        out.put_u64s("lm.meta", &[self.order as u64, self.vocab_size as u64]);
        out.put_f64s("lm.alpha", &[self.alpha]);
        out.put_f64s("lm.weights", &self.weights);
        for o in 1..=self.order {
            let mut flat: Vec<u64> = Vec::new();
            for (ctx, table) in &self.counts[o - 1] {
                for (&token, &count) in table {
                    flat.extend(ctx.iter().map(|&t| t as u64));
                    flat.push(token as u64);
                    flat.push(count);
                }
            }
            out.put_u64s(&format!("lm.counts.{o}"), &flat);
        }
    }

    pub fn load(container: &Container) -> Result<NGramLM> {
        let meta = container.u64s("lm.meta")?;
        if meta.len() != 2 {
            return Err(SfError::Format("lm.meta must hold [order, vocab_size]".into()));
        }
        let order = meta[0] as usize;
        let vocab_size = meta[1] as usize;
        if !(1..=3).contains(&order) {
            return Err(SfError::Format(format!("bad n-gram order {order} in checkpoint")));
        }
        let alpha = container.f64s("lm.alpha")?;
        let weights = container.f64s("lm.weights")?;
        if alpha.len() != 1 || weights.len() != order {
            return Err(SfError::Format("inconsistent lm.alpha/lm.weights sections".into()));
        }
        let mut counts: Vec<BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>> =
            vec![BTreeMap::new(); order];
        let mut totals: Vec<BTreeMap<Vec<TokenId>, u64>> = vec![BTreeMap::new(); order];
        for o in 1..=order {
            let flat = container.u64s(&format!("lm.counts.{o}"))?;
            let stride = o + 1;
            if flat.len() % stride != 0 {
                return Err(SfError::Format(format!("lm.counts.{o} has ragged entries")));
            }
            for entry in flat.chunks_exact(stride) {
                let ctx: Vec<TokenId> = entry[..o - 1].iter().map(|&t| t as TokenId).collect();
                let token = entry[o - 1] as TokenId;
                let count = entry[o];
                *counts[o - 1].entry(ctx.clone()).or_default().entry(token).or_insert(0) += count;
                *totals[o - 1].entry(ctx).or_insert(0) += count;
            }
        }
        Ok(NGramLM { order, alpha: alpha[0], weights, vocab_size, counts, totals })
    }
}

impl LanguageModel for NGramLM {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.order - 1
    }

    fn next_dist(&self, state: &SeqState) -> Result<ProbVector> {
        if state.is_terminal() {
            return Err(SfError::Contract("next_dist on a terminal state".into()));
        }
        let mut probs = vec![0.0; self.vocab_size];
        for o in 1..=self.order {
            let w = self.weights[o - 1];
            if w == 0.0 {
                continue;
            }
            let ctx = self.context(state.tokens(), o);
            for (token, slot) in probs.iter_mut().enumerate() {
                *slot += w * self.add_alpha(o, &ctx, token);
            }
        }
        ProbVector::new(probs)
    }
}

/// A context pattern for [`TableLM`] rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextPattern {
    /// Matches states whose token sequence ends with the given tokens.
    Suffix(Vec<TokenId>),
    /// Matches every state.
    Any,
}

impl ContextPattern {
    fn matches(&self, tokens: &[TokenId]) -> bool {
        match self {
            ContextPattern::Any => true,
            ContextPattern::Suffix(suffix) => tokens.ends_with(suffix),
        }
    }

    fn len(&self) -> usize {
        match self {
            ContextPattern::Any => 0,
            ContextPattern::Suffix(s) => s.len(),
        }
    }
}

/// Explicit conditional distribution rules; first matching rule wins, and a
/// default distribution backs every state. Used as an exactly-known fixture
/// in oracle tests.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLM {
    rules: Vec<(ContextPattern, ProbVector)>,
    default: ProbVector,
    context_len: usize,
}

impl TableLM {
    pub fn new(rules: Vec<(ContextPattern, ProbVector)>, default: ProbVector) -> Result<TableLM> {
        let v = default.len();
        if rules.iter().any(|(_, d)| d.len() != v) {
            return Err(SfError::Config("all rule distributions must have the same length".into()));
        }
        let context_len = rules.iter().map(|(p, _)| p.len()).max().unwrap_or(0);
        Ok(TableLM { rules, default, context_len })
    }

    /// A table model with a single rule applied everywhere.
    pub fn constant(dist: ProbVector) -> TableLM {
        TableLM { rules: Vec::new(), default: dist, context_len: 0 }
    }
}

impl LanguageModel for TableLM {
    fn vocab_size(&self) -> usize {
        self.default.len()
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn next_dist(&self, state: &SeqState) -> Result<ProbVector> {
        if state.is_terminal() {
            return Err(SfError::Contract("next_dist on a terminal state".into()));
        }
        for (pattern, dist) in &self.rules {
            if pattern.matches(state.tokens()) {
                return Ok(dist.clone());
            }
        }
        Ok(self.default.clone())
    }
}

/// A model restricted to the `k` most probable tokens of an inner model at
/// every step: the distribution the decoding loop actually samples from,
/// packaged as a model so value estimates and oracles can target it.
pub struct TopKLM<'a> {
    inner: &'a dyn LanguageModel,
    k: usize,
}

impl<'a> TopKLM<'a> {
    pub fn new(inner: &'a dyn LanguageModel, k: usize) -> Result<TopKLM<'a>> {
        if k == 0 {
            return Err(SfError::Config("top-k requires k >= 1".into()));
        }
        Ok(TopKLM { inner, k })
    }
}

impl LanguageModel for TopKLM<'_> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn context_len(&self) -> usize {
        self.inner.context_len()
    }

    fn next_dist(&self, state: &SeqState) -> Result<ProbVector> {
        topk_truncate(&self.inner.next_dist(state)?, self.k)
    }
}

/// Indices of the `k` largest weights, ties broken toward smaller ids.
fn topk_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b))
    });
    order.truncate(k.min(weights.len()));
    order
}

/// Restrict a distribution to its k most probable tokens and renormalize.
pub fn topk_truncate(dist: &ProbVector, k: usize) -> Result<ProbVector> {
    if k == 0 {
        return Err(SfError::Config("top-k requires k >= 1".into()));
    }
    let keep = topk_indices(dist.as_slice(), k);
    let mass: f64 = keep.iter().map(|&i| dist.get(i)).sum();
    if mass <= 0.0 {
        return Err(SfError::Input("top-k mass is zero".into()));
    }
    let mut out = vec![0.0; dist.len()];
    for &i in &keep {
        out[i] = dist.get(i) / mass;
    }
    ProbVector::new(out)
}

/// Draw an index proportional to nonnegative weights.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<TokenId> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(SfError::Input("all-zero distribution".into()));
    }
    let mut threshold = rng.random::<f64>() * total;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last_positive = Some(i);
        threshold -= w;
        if threshold < 0.0 {
            return Ok(i);
        }
    }
    // Floating-point accumulation can leave a sliver past the last bucket.
    Ok(last_positive.expect("positive total implies a positive weight"))
}

/// Sample among the k most probable tokens, proportional to their renormalized
/// mass. Reproducible under a fixed seeded generator.
pub fn sample_topk<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R) -> Result<TokenId> {
    if k == 0 {
        return Err(SfError::Config("top-k requires k >= 1".into()));
    }
    let keep = topk_indices(weights, k);
    let kept: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
    let pick = sample_categorical(&kept, rng)?;
    Ok(keep[pick])
}

/// Perplexity of a tokenized corpus under a model: exp of the mean negative
/// log-probability per token, the final EOS included. A zero-probability
/// token yields +infinity rather than an error.
pub fn perplexity(model: &dyn LanguageModel, docs: &[Vec<TokenId>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for doc in docs {
        // Cap two past the doc length so the cap never fires before EOS.
        let max_len = doc.len() + 2;
        let mut state = SeqState::prompt(&[], max_len)?;
        let mut targets: Vec<TokenId> = doc.clone();
        targets.push(crate::seqmdp::EOS);
        for &target in &targets {
            let dist = model.next_dist(&state)?;
            let p = dist.get(target);
            if p <= 0.0 {
                return Ok(f64::INFINITY);
            }
            nll -= p.ln();
            tokens += 1;
            state = state.step(target, model.vocab_size(), max_len)?;
        }
    }
    if tokens == 0 {
        return Err(SfError::Input("perplexity over an empty corpus".into()));
    }
    Ok((nll / tokens as f64).exp())
}
