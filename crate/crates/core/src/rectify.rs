//! Security-capped decoding.
//!
//! Each active subject contributes a Q-vector estimating how likely each
//! next token is to force an undesired ending (0 = safe, -1 = certain).
//! Vectors are fused (elementwise min guarantees every subject's cap
//! simultaneously; mean is kept as the diluting alternative it is), each
//! token's probability is capped at 1 + Q, and the capped distribution is
//! renormalized by water-filling: scale every uncapped token by a common
//! factor c >= 1, never pushing any token past its cap. One-pass
//! clamp-then-renormalize would silently re-inflate probabilities above
//! their caps; water-filling keeps the guarantee checkable to 1e-9.

use ndarray::Array1;
use rand::Rng;

use crate::checkpoint::Container;
use crate::error::{Result, SfError};
use crate::lm::{sample_topk, topk_truncate, LanguageModel, ProbVector};
use crate::seqmdp::{SeqState, TokenId, Trajectory};
use crate::sfnet::{psi_forward, q_values, PsiNet, QVector};

/// How per-subject Q-vectors combine into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Elementwise minimum: every subject's cap holds simultaneously.
    Min,
    /// Elementwise mean: kept for comparison; dilutes individual caps.
    Mean,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "min" => Ok(FusionMode::Min),
            "mean" => Ok(FusionMode::Mean),
            other => Err(SfError::Config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

/// Decoding-time settings for the rectifier.
#[derive(Debug, Clone)]
pub struct RectifierCfg {
    /// Sample among this many most-probable tokens after rectification.
    pub top_k: usize,
    /// Numerical dust threshold: caps at or below it count as hard zero.
    pub eps_floor: f64,
    /// Clamp learned Q into [-1, 0] before forming caps.
    pub clamp: bool,
    /// Water-filling bisection stops when |sum - 1| falls below this.
    pub bisect_tol: f64,
    /// Maximum sequence length (start marker included).
    pub max_len: usize,
}

impl Default for RectifierCfg {
    fn default() -> Self {
        RectifierCfg { top_k: 50, eps_floor: 1e-9, clamp: true, bisect_tol: 1e-10, max_len: 16 }
    }
}

/// Ordered store of per-subject reward vectors with a runtime-active subset.
///
/// Plain value semantics: cloning snapshots the bank, so in-flight
/// generations keep a consistent view while the caller mutates its copy.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBank {
    entries: Vec<(String, Array1<f64>)>,
    active: Vec<String>,
    mode: FusionMode,
}

impl SubjectBank {
    pub fn new(mode: FusionMode) -> SubjectBank {
        SubjectBank { entries: Vec::new(), active: Vec::new(), mode }
    }

    /// Build a bank from (name, reward vector) pairs; all subjects start
    /// active.
    pub fn with_subjects(pairs: Vec<(String, Array1<f64>)>, mode: FusionMode) -> Result<SubjectBank> {
        let mut bank = SubjectBank::new(mode);
        for (name, w) in pairs {
            bank.add_subject(&name, w)?;
        }
        bank.active = bank.entries.iter().map(|(n, _)| n.clone()).collect();
        Ok(bank)
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: FusionMode) {
        self.mode = mode;
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn active(&self) -> &[String] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Add a subject (inactive until selected). Names must be unique,
    /// non-empty, and single-line; vector lengths must agree across subjects.
    pub fn add_subject(&mut self, name: &str, w: Array1<f64>) -> Result<()> {
        if name.is_empty() || name.contains(['\n', '\t']) {
            return Err(SfError::Config(format!("invalid subject name {name:?}")));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(SfError::Config(format!("subject '{name}' already exists")));
        }
        if let Some((_, first)) = self.entries.first() {
            if first.len() != w.len() {
                return Err(SfError::Contract(format!(
                    "subject '{name}' has dimension {}, bank holds {}",
                    w.len(),
                    first.len()
                )));
            }
        }
        self.entries.push((name.to_string(), w));
        Ok(())
    }

    /// Remove a subject entirely (and deactivate it).
    pub fn remove_subject(&mut self, name: &str) -> Result<()> {
        let at = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| SfError::Config(format!("unknown subject '{name}'")))?;
        self.entries.remove(at);
        self.active.retain(|n| n != name);
        Ok(())
    }

    /// Choose which stored subjects drive decoding. The active order is
    /// canonical (storage order), so fused results do not depend on argument
    /// order.
    pub fn set_active_subjects(&mut self, names: &[&str]) -> Result<()> {
        for name in names {
            if !self.entries.iter().any(|(n, _)| n == name) {
                return Err(SfError::Config(format!("unknown subject '{name}'")));
            }
        }
        let mut unique: Vec<&str> = Vec::new();
        for name in names {
            if unique.contains(name) {
                return Err(SfError::Config(format!("subject '{name}' listed twice")));
            }
            unique.push(name);
        }
        self.active = self
            .entries
            .iter()
            .filter(|(n, _)| unique.contains(&n.as_str()))
            .map(|(n, _)| n.clone())
            .collect();
        Ok(())
    }

    pub fn weights(&self, name: &str) -> Result<&Array1<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, w)| w)
            .ok_or_else(|| SfError::Config(format!("unknown subject '{name}'")))
    }

    /// Serialize as sections `subjects.meta`, `subjects.names`,
    /// `subjects.matrix` (active set and fusion mode are runtime state, not
    /// persisted).
    pub fn save_into(&self, out: &mut Container) {
        let d = self.entries.first().map(|(_, w)| w.len()).unwrap_or(0);
        out.put_u64s("subjects.meta", &[self.entries.len() as u64, d as u64]);
        let names: Vec<&str> = self.entries.iter().map(|(n, _)| n.as_str()).collect();
        out.put_str("subjects.names", &names.join("\n"));
        let mut flat = Vec::with_capacity(self.entries.len() * d);
        for (_, w) in &self.entries {
            flat.extend(w.iter());
        }
        out.put_f64s("subjects.matrix", &flat);
    }

    pub fn load(container: &Container, mode: FusionMode) -> Result<SubjectBank> {
        let meta = container.u64s("subjects.meta")?;
        if meta.len() != 2 {
            return Err(SfError::Format("subjects.meta must hold [count, dim]".into()));
        }
        let (k, d) = (meta[0] as usize, meta[1] as usize);
        let names_blob = container.str_section("subjects.names")?;
        let names: Vec<&str> =
            if names_blob.is_empty() { Vec::new() } else { names_blob.split('\n').collect() };
        let flat = container.f64s("subjects.matrix")?;
        if names.len() != k || flat.len() != k * d {
            return Err(SfError::Format("subject sections disagree on count/dimension".into()));
        }
        let pairs = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), Array1::from_vec(flat[i * d..(i + 1) * d].to_vec())))
            .collect();
        SubjectBank::with_subjects(pairs, mode)
    }
}

/// Combine per-subject Q-vectors elementwise.
pub fn fuse_q(q_list: &[QVector], mode: FusionMode) -> Result<QVector> {
    let first = q_list
        .first()
        .ok_or_else(|| SfError::Contract("fusing an empty Q list".into()))?;
    if q_list.iter().any(|q| q.len() != first.len()) {
        return Err(SfError::Contract("Q vectors differ in length".into()));
    }
    let mut fused = first.clone();
    for q in &q_list[1..] {
        for (slot, &x) in fused.iter_mut().zip(q) {
            match mode {
                FusionMode::Min => *slot = slot.min(x),
                FusionMode::Mean => *slot += x,
            }
        }
    }
    if mode == FusionMode::Mean {
        let k = q_list.len() as f64;
        for slot in fused.iter_mut() {
            *slot /= k;
        }
    }
    Ok(fused)
}

/// Clamp a Q-vector into the dead-end range [-1, 0].
pub fn clamp_q(q: &[f64]) -> Vec<f64> {
    q.iter().map(|&x| x.clamp(-1.0, 0.0)).collect()
}

/// Per-token probability ceilings 1 + Q (clamped when configured). Caps of
/// numerical-dust size collapse to hard zero, so a Q that is -1 up to
/// floating-point error forbids its token outright.
fn caps_of(q: &[f64], cfg: &RectifierCfg) -> Vec<f64> {
    let clamped;
    let q = if cfg.clamp {
        clamped = clamp_q(q);
        &clamped[..]
    } else {
        q
    };
    q.iter()
        .map(|&x| {
            let cap = (1.0 + x).max(0.0);
            if cap <= cfg.eps_floor {
                0.0
            } else {
                cap
            }
        })
        .collect()
}

/// Cap the base distribution at 1 + Q per token and renormalize by
/// water-filling: output min(c * base_a, cap_a) with the smallest common
/// c >= 1 making the sum 1. Every cap is respected exactly; tokens the base
/// assigns zero stay zero; the relative order of uncapped tokens is
/// preserved.
pub fn rectify_dist(base: &ProbVector, q: &[f64], cfg: &RectifierCfg) -> Result<ProbVector> {
    if q.len() != base.len() {
        return Err(SfError::Contract(format!(
            "Q has length {}, distribution has {}",
            q.len(),
            base.len()
        )));
    }
    let caps = caps_of(q, cfg);
    let floor = cfg.eps_floor;
    // c = 1 feasible: nothing (with positive mass) sits above its cap.
    if base
        .as_slice()
        .iter()
        .zip(&caps)
        .all(|(&p, &cap)| p <= cap || p <= floor)
    {
        return Ok(base.clone());
    }
    // Reachable mass: as c grows, the sum approaches the caps of the
    // base-supported tokens. Below 1 there is no valid capped distribution.
    let reachable: f64 = base
        .as_slice()
        .iter()
        .zip(&caps)
        .filter(|(&p, _)| p > floor)
        .map(|(_, &cap)| cap)
        .sum();
    if reachable < 1.0 - cfg.bisect_tol {
        return Err(SfError::DeadEndEverywhere(format!(
            "token caps only reach total mass {reachable:.6}"
        )));
    }
    let fill = |c: f64| -> f64 {
        base.as_slice()
            .iter()
            .zip(&caps)
            .map(|(&p, &cap)| if p <= floor { 0.0 } else { (c * p).min(cap) })
            .sum()
    };
    let mut lo = 1.0;
    let mut hi = 2.0;
    let mut doublings = 0;
    while fill(hi) < 1.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            // Asymptotic case: the sum approaches `reachable` ~ 1 from below;
            // the limit distribution is the caps themselves on the support.
            let weights: Vec<f64> = base
                .as_slice()
                .iter()
                .zip(&caps)
                .map(|(&p, &cap)| if p <= floor { 0.0 } else { cap })
                .collect();
            return ProbVector::from_weights(&weights);
        }
    }
    let mut c = hi;
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        let s = fill(mid);
        if (s - 1.0).abs() <= cfg.bisect_tol {
            c = mid;
            break;
        }
        if s < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        c = hi;
    }
    let out: Vec<f64> = base
        .as_slice()
        .iter()
        .zip(&caps)
        .map(|(&p, &cap)| if p <= floor { 0.0 } else { (c * p).min(cap) })
        .collect();
    ProbVector::new(out)
}

/// Rectify, falling back to a distribution proportional to the caps (the
/// least-bad tokens) when every option is capped too low to renormalize.
/// Returns the distribution and whether the fallback fired.
pub fn rectify_or_fallback(
    base: &ProbVector,
    q: &[f64],
    cfg: &RectifierCfg,
) -> Result<(ProbVector, bool)> {
    match rectify_dist(base, q, cfg) {
        Ok(dist) => Ok((dist, false)),
        Err(SfError::DeadEndEverywhere(why)) => {
            let caps = caps_of(q, cfg);
            log::warn!("every token capped below a valid distribution ({why}); falling back");
            let total: f64 = caps.iter().sum();
            let dist = if total > cfg.eps_floor {
                ProbVector::from_weights(&caps)?
            } else {
                // Even the caps carry no mass: nothing is less bad than
                // anything else, keep the base distribution.
                base.clone()
            };
            Ok((dist, true))
        }
        Err(other) => Err(other),
    }
}

/// Work performed by a Q provider for one state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QCost {
    pub psi_forwards: u64,
    pub matvecs: u64,
}

/// Per-subject Q-vectors for a non-terminal state, in the bank's active
/// order.
pub trait QProvider {
    fn q_vectors(&self, state: &SeqState, bank: &SubjectBank) -> Result<(Vec<QVector>, QCost)>;

    /// A fingerprint such that the provider's output (for this state and all
    /// its descendants) is a function of (fingerprint, remaining budget).
    /// None disables memoized enumeration over this provider.
    fn memo_fingerprint(&self, _state: &SeqState) -> Option<Vec<u64>> {
        None
    }
}

/// Learned Q: one ψ forward per state, then one V×d·d product per active
/// subject.
pub struct LearnedQ<'a> {
    pub psi: &'a PsiNet,
}

impl QProvider for LearnedQ<'_> {
    fn q_vectors(&self, state: &SeqState, bank: &SubjectBank) -> Result<(Vec<QVector>, QCost)> {
        let psi = psi_forward(self.psi, state)?;
        let mut qs = Vec::with_capacity(bank.active().len());
        for name in bank.active() {
            qs.push(q_values(&psi, bank.weights(name)?)?);
        }
        let cost = QCost { psi_forwards: 1, matvecs: qs.len() as u64 };
        Ok((qs, cost))
    }
}

/// Placeholder provider for subject-free decoding; errors if consulted.
pub struct NoQ;

impl QProvider for NoQ {
    fn q_vectors(&self, _state: &SeqState, _bank: &SubjectBank) -> Result<(Vec<QVector>, QCost)> {
        Err(SfError::Contract("active subjects but no Q provider configured".into()))
    }

    fn memo_fingerprint(&self, _state: &SeqState) -> Option<Vec<u64>> {
        Some(Vec::new())
    }
}

/// Instrumentation for one generation: step count and per-component
/// operation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub steps: u64,
    pub psi_forwards: u64,
    pub matvecs: u64,
    pub fuse_reduces: u64,
    pub fallbacks: u64,
}

/// One decoding step's distribution work: the rectified (pre-top-k)
/// distribution, whether the fallback fired, and the provider's cost.
fn rectified_dist_at(
    lm: &dyn LanguageModel,
    qsrc: &dyn QProvider,
    bank: &SubjectBank,
    cfg: &RectifierCfg,
    state: &SeqState,
) -> Result<(ProbVector, bool, QCost, u64)> {
    let base = lm.next_dist(state)?;
    if bank.active().is_empty() {
        return Ok((base, false, QCost::default(), 0));
    }
    let (qs, cost) = qsrc.q_vectors(state, bank)?;
    // Fusion folds each subject's Q-vector into the accumulator once, so the
    // instrumented cost is one elementwise reduce per active subject.
    let reduces = qs.len() as u64;
    let fused = fuse_q(&qs, bank.mode())?;
    let (dist, fell_back) = rectify_or_fallback(&base, &fused, cfg)?;
    Ok((dist, fell_back, cost, reduces))
}

/// Decode one sequence: rectify the base distribution under the active
/// subjects, then top-k sample, until a terminal state. Deterministic under
/// a fixed generator; with no active subjects the sampled distribution is
/// the base model's at every step.
pub fn generate<R: Rng + ?Sized>(
    lm: &dyn LanguageModel,
    qsrc: &dyn QProvider,
    bank: &SubjectBank,
    prompt: &SeqState,
    cfg: &RectifierCfg,
    rng: &mut R,
) -> Result<Trajectory> {
    Ok(generate_with_stats(lm, qsrc, bank, prompt, cfg, rng)?.0)
}

/// As [`generate`], also returning operation counts.
pub fn generate_with_stats<R: Rng + ?Sized>(
    lm: &dyn LanguageModel,
    qsrc: &dyn QProvider,
    bank: &SubjectBank,
    prompt: &SeqState,
    cfg: &RectifierCfg,
    rng: &mut R,
) -> Result<(Trajectory, DecodeStats)> {
    if prompt.is_terminal() {
        return Err(SfError::Contract("prompt is already terminal".into()));
    }
    if prompt.len() >= cfg.max_len {
        return Err(SfError::Contract(format!(
            "prompt length {} leaves no room under max_len {}",
            prompt.len(),
            cfg.max_len
        )));
    }
    let mut stats = DecodeStats::default();
    let mut state = prompt.clone();
    let mut steps: Vec<(SeqState, TokenId)> = Vec::new();
    let mut fallbacks = Vec::new();
    while !state.is_terminal() {
        let (dist, fell_back, cost, reduces) = rectified_dist_at(lm, qsrc, bank, cfg, &state)?;
        let token = sample_topk(dist.as_slice(), cfg.top_k, rng)?;
        if fell_back {
            fallbacks.push(steps.len());
            stats.fallbacks += 1;
        }
        stats.steps += 1;
        stats.psi_forwards += cost.psi_forwards;
        stats.matvecs += cost.matvecs;
        stats.fuse_reduces += reduces;
        steps.push((state.clone(), token));
        state = state.step(token, lm.vocab_size(), cfg.max_len)?;
    }
    let traj = Trajectory::validated(steps, state, fallbacks, lm.vocab_size(), cfg.max_len)?;
    Ok((traj, stats))
}

/// The per-step token distribution of a full decoding pipeline, as used for
/// exact enumeration: everything the sampler sees, top-k truncation
/// included.
pub trait DecodePolicy {
    fn vocab_size(&self) -> usize;

    fn step_dist(&self, state: &SeqState) -> Result<ProbVector>;

    /// A fingerprint such that step_dist for this state and all descendants
    /// is a function of (fingerprint, remaining budget); None disables
    /// memoization.
    fn memo_fingerprint(&self, state: &SeqState) -> Option<Vec<u64>>;
}

/// Trailing-context fingerprint shared by the concrete policies: the last
/// `context` tokens, length-prefixed.
fn suffix_fingerprint(state: &SeqState, context: usize) -> Vec<u64> {
    let tokens = state.tokens();
    let take = context.min(tokens.len());
    let mut key = Vec::with_capacity(take + 1);
    key.push(take as u64);
    key.extend(tokens[tokens.len() - take..].iter().map(|&t| t as u64));
    key
}

/// The base model with top-k sampling and no rectification.
pub struct BasePolicy<'a> {
    pub lm: &'a dyn LanguageModel,
    pub top_k: usize,
}

impl DecodePolicy for BasePolicy<'_> {
    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn step_dist(&self, state: &SeqState) -> Result<ProbVector> {
        topk_truncate(&self.lm.next_dist(state)?, self.top_k)
    }

    fn memo_fingerprint(&self, state: &SeqState) -> Option<Vec<u64>> {
        Some(suffix_fingerprint(state, self.lm.context_len()))
    }
}

/// The full rectified pipeline as a policy: base distribution, fused
/// subject caps, water-filling, then top-k.
pub struct RectifiedPolicy<'a> {
    pub lm: &'a dyn LanguageModel,
    pub qsrc: &'a dyn QProvider,
    pub bank: &'a SubjectBank,
    pub cfg: &'a RectifierCfg,
}

impl DecodePolicy for RectifiedPolicy<'_> {
    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn step_dist(&self, state: &SeqState) -> Result<ProbVector> {
        let (dist, _, _, _) = rectified_dist_at(self.lm, self.qsrc, self.bank, self.cfg, state)?;
        topk_truncate(&dist, self.cfg.top_k)
    }

    fn memo_fingerprint(&self, state: &SeqState) -> Option<Vec<u64>> {
        let mut key = suffix_fingerprint(state, self.lm.context_len());
        key.extend(self.qsrc.memo_fingerprint(state)?);
        Some(key)
    }
}
