//! The successor-feature net ψ.
//!
//! For a non-terminal state it outputs a V×d matrix whose row a estimates the
//! expected terminal features after appending token a and then following the
//! base policy. The output head is factorized (h×E then E×(V·d), no biases),
//! so its parameter count is h·E + E·V·d instead of the dense h·V·d. Training
//! is either Monte Carlo regression toward the realized terminal features
//! (valid only at discount 1) or expected SARSA against a polyak-averaged
//! target network, with the terminal-split rule: the regression target is
//! φ(s') when s' is terminal, and the policy-expected target-net row
//! otherwise.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Result, SfError};
use crate::featnet::{phi, PhiNet, StateEncoder};
use crate::lm::LanguageModel;
use crate::nn::{glorot_matrix, AdamW, LinearSchedule};
use crate::seqmdp::{SeqState, Trajectory};

/// Per-state successor features: row a = ψ(s, a), shape V×d.
pub type PsiMatrix = Array2<f64>;

/// Per-action values Q(s, ·) = ψ(s)·w, length V.
pub type QVector = Vec<f64>;

/// Successor-feature network with a factorized output head.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiNet {
    encoder: StateEncoder,
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    m1: Array2<f64>,
    m2: Array2<f64>,
    vocab_size: usize,
    feat_dim: usize,
    gamma: f64,
    tau: f64,
    seed: u64,
}

impl PsiNet {
    pub fn init(
        encoder: StateEncoder,
        hidden: usize,
        embed: usize,
        vocab_size: usize,
        feat_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> PsiNet {
        PsiNet {
            encoder,
            w_in: glorot_matrix(hidden, encoder.dim(), rng),
            b_in: Array1::zeros(hidden),
            m1: glorot_matrix(hidden, embed, rng),
            m2: glorot_matrix(embed, vocab_size * feat_dim, rng),
            vocab_size,
            feat_dim,
            gamma: 1.0,
            tau: 0.1,
            seed: 0,
        }
    }

    /// (hidden, embed, vocab_size, feat_dim).
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.w_in.nrows(), self.m1.ncols(), self.vocab_size, self.feat_dim)
    }

    pub fn encoder(&self) -> &StateEncoder {
        &self.encoder
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    fn hidden_of(&self, x: &Array1<f64>) -> Array1<f64> {
        (self.w_in.dot(x) + &self.b_in).mapv(f64::tanh)
    }

    /// Embedding u = M1ᵀ·hidden, the shared factor of every output row.
    fn embed_of(&self, hidden: &Array1<f64>) -> Array1<f64> {
        self.m1.t().dot(hidden)
    }

    /// One output row ψ(s)[a] = (M2 columns for a)ᵀ·u.
    fn row_of(&self, u: &Array1<f64>, action: usize) -> Array1<f64> {
        let d = self.feat_dim;
        self.m2.slice(s![.., action * d..(action + 1) * d]).t().dot(u)
    }

    pub fn flat_len(&self) -> usize {
        self.w_in.len() + self.b_in.len() + self.m1.len() + self.m2.len()
    }

    /// Parameters as one flat vector (w_in, b_in, m1, m2 order).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend(self.w_in.iter());
        out.extend(self.b_in.iter());
        out.extend(self.m1.iter());
        out.extend(self.m2.iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(SfError::Contract("flat parameter length mismatch".into()));
        }
        let mut it = flat.iter().copied();
        for slot in self
            .w_in
            .iter_mut()
            .chain(self.b_in.iter_mut())
            .chain(self.m1.iter_mut())
            .chain(self.m2.iter_mut())
        {
            *slot = it.next().unwrap();
        }
        Ok(())
    }

    /// Head parameter count h·E + E·V·d (matches `flat_len` minus the input
    /// layer).
    pub fn head_len(&self) -> usize {
        self.m1.len() + self.m2.len()
    }

    /// Serialize as sections `psi.enc`, `psi.head1`, `psi.head2`, `psi.meta`
    /// (plus the shared `encoder.meta`).
    pub fn save_into(&self, out: &mut Container) {
        self.encoder.save_into(out);
        let (h, e, v, d) = self.dims();
        out.put_u64s(
            "psi.meta",
            &[
                h as u64,
                e as u64,
                v as u64,
                d as u64,
                self.gamma.to_bits(),
                self.tau.to_bits(),
                self.seed,
            ],
        );
        let mut enc = Vec::with_capacity(self.w_in.len() + self.b_in.len());
        enc.extend(self.w_in.iter());
        enc.extend(self.b_in.iter());
        out.put_f64s("psi.enc", &enc);
        out.put_f64s("psi.head1", &self.m1.iter().copied().collect::<Vec<_>>());
        out.put_f64s("psi.head2", &self.m2.iter().copied().collect::<Vec<_>>());
    }

    pub fn load(container: &Container) -> Result<PsiNet> {
        let encoder = StateEncoder::load(container)?;
        let meta = container.u64s("psi.meta")?;
        if meta.len() != 7 {
            return Err(SfError::Format(
                "psi.meta must hold [hidden, embed, vocab, d, gamma, tau, seed]".into(),
            ));
        }
        let (h, e, v, d) =
            (meta[0] as usize, meta[1] as usize, meta[2] as usize, meta[3] as usize);
        let enc = container.f64s("psi.enc")?;
        let m = encoder.dim();
        if enc.len() != h * m + h {
            return Err(SfError::Format("psi.enc length disagrees with psi.meta".into()));
        }
        let head1 = container.f64s("psi.head1")?;
        let head2 = container.f64s("psi.head2")?;
        if head1.len() != h * e || head2.len() != e * v * d {
            return Err(SfError::Format("psi head section length mismatch".into()));
        }
        Ok(PsiNet {
            encoder,
            w_in: Array2::from_shape_vec((h, m), enc[..h * m].to_vec()).unwrap(),
            b_in: Array1::from_vec(enc[h * m..].to_vec()),
            m1: Array2::from_shape_vec((h, e), head1).unwrap(),
            m2: Array2::from_shape_vec((e, v * d), head2).unwrap(),
            vocab_size: v,
            feat_dim: d,
            gamma: f64::from_bits(meta[4]),
            tau: f64::from_bits(meta[5]),
            seed: meta[6],
        })
    }
}

/// Full forward pass: the V×d successor-feature matrix of a non-terminal
/// state.
pub fn psi_forward(params: &PsiNet, state: &SeqState) -> Result<PsiMatrix> {
    if state.is_terminal() {
        return Err(SfError::Contract("psi_forward on a terminal state".into()));
    }
    let x = params.encoder.encode(state);
    let hidden = params.hidden_of(&x);
    let u = params.embed_of(&hidden);
    let flat = params.m2.t().dot(&u);
    Ok(flat
        .into_shape_with_order((params.vocab_size, params.feat_dim))
        .expect("head width is V*d by construction"))
}

impl PsiNet {
    /// Analytic gradient of the scalar probe upstream·ψ(state)[action] with
    /// respect to the flat parameter vector, via the same backward pass the
    /// trainers use. Pairs with [`PsiNet::set_flat`] and [`psi_forward`] for
    /// finite-difference verification.
    pub fn probe_grad(
        &self,
        state: &SeqState,
        action: usize,
        upstream: &Array1<f64>,
    ) -> Result<Vec<f64>> {
        if state.is_terminal() {
            return Err(SfError::Contract("probe_grad on a terminal state".into()));
        }
        if action >= self.vocab_size {
            return Err(SfError::Contract(format!(
                "action {action} out of range for vocab {}",
                self.vocab_size
            )));
        }
        if upstream.len() != self.feat_dim {
            return Err(SfError::Contract(format!(
                "upstream has length {}, feature width is {}",
                upstream.len(),
                self.feat_dim
            )));
        }
        let x = self.encoder.encode(state);
        let hidden = self.hidden_of(&x);
        let u = self.embed_of(&hidden);
        let mut grads = vec![0.0; self.flat_len()];
        accumulate_grads(self, &x, &hidden, &u, action, upstream, &mut grads);
        Ok(grads)
    }
}

/// Q(s, ·) = ψ(s)·w.
pub fn q_values(psi: &PsiMatrix, w: &Array1<f64>) -> Result<QVector> {
    if psi.ncols() != w.len() {
        return Err(SfError::Contract(format!(
            "psi has feature width {}, reward vector has {}",
            psi.ncols(),
            w.len()
        )));
    }
    Ok(psi.dot(w).to_vec())
}

/// Factorized-head parameter count h·E + E·V·d.
pub fn head_param_count(hidden: u64, embed: u64, vocab: u64, feat: u64) -> u64 {
    hidden * embed + embed * vocab * feat
}

/// Dense (unfactorized) head parameter count h·V·d.
pub fn dense_param_count(hidden: u64, vocab: u64, feat: u64) -> u64 {
    hidden * vocab * feat
}

/// Which regression target ψ training uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfAlgorithm {
    /// Regress every visited (s, a) toward the realized terminal features.
    Mc,
    /// Expected SARSA: bootstrap from a polyak-averaged target net.
    Sarsa,
}

/// Successor-feature training configuration.
#[derive(Debug, Clone)]
pub struct SFTrainerCfg {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup: usize,
    pub seed: u64,
    pub algorithm: SfAlgorithm,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for SFTrainerCfg {
    fn default() -> Self {
        SFTrainerCfg {
            gamma: 1.0,
            tau: 0.1,
            lr: 5e-3,
            epochs: 150,
            batch: 16,
            warmup: 0,
            seed: 0,
            algorithm: SfAlgorithm::Mc,
            hidden: 16,
            embed: 4,
        }
    }
}

impl SFTrainerCfg {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SfError::Config(format!("discount must be in [0, 1], got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(SfError::Config(format!(
                "polyak coefficient must be in (0, 1], got {}",
                self.tau
            )));
        }
        if self.epochs == 0 || self.batch == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(SfError::Config("epochs, batch, hidden, and embed must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(SfError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Move target-net parameters toward the online net by factor tau.
pub fn polyak_update(target: &mut PsiNet, online: &PsiNet, tau: f64) -> Result<()> {
    if target.flat_len() != online.flat_len() {
        return Err(SfError::Contract("target and online nets differ in shape".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(SfError::Config(format!("polyak coefficient must be in (0, 1], got {tau}")));
    }
    let online_flat = online.flat();
    let mut flat = target.flat();
    for (t, o) in flat.iter_mut().zip(online_flat) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    target.set_flat(&flat)
}

/// The terminal-split regression target for a transition landing in `next`:
/// φ(next) if next is terminal, else gamma times the policy-expected
/// target-net row.
pub fn bellman_target(
    phi_net: &PhiNet,
    target_net: &PsiNet,
    lm: &dyn LanguageModel,
    next: &SeqState,
    gamma: f64,
) -> Result<Array1<f64>> {
    if next.is_terminal() {
        return phi(phi_net, &target_net.encoder.encode(next));
    }
    let psi = psi_forward(target_net, next)?;
    let dist = lm.next_dist(next)?;
    let weights = Array1::from_vec(dist.as_slice().to_vec());
    Ok(psi.t().dot(&weights) * gamma)
}

struct TrainExample {
    x: Array1<f64>,
    action: usize,
    /// Index into the target table (MC) or transition table (SARSA).
    target_idx: usize,
}

/// Shared minibatch regression loop: examples with per-example d-length
/// targets, recomputed per batch by `targets_for`.
fn run_regression<F>(
    net: &mut PsiNet,
    examples: &[TrainExample],
    cfg: &SFTrainerCfg,
    rng: &mut ChaCha8Rng,
    mut targets_for: F,
    mut after_step: impl FnMut(&PsiNet) -> Result<()>,
) -> Result<()>
where
    F: FnMut(&[usize]) -> Result<Vec<Array1<f64>>>,
{
    let d = net.feat_dim;
    let flat_len = net.flat_len();
    let mut opt = AdamW::new(0.0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    // Decay the step size to (near) zero so the parameters settle on the
    // regression mean of repeated targets instead of orbiting it at the
    // constant-rate noise floor; Monte Carlo targets for one (state, action)
    // can disagree strongly between visits, so the floor is not small.
    let sched = LinearSchedule {
        base_lr: cfg.lr,
        warmup: 0,
        total: cfg.epochs * examples.len().div_ceil(cfg.batch),
    };
    let mut opt_steps = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let target_ids: Vec<usize> = batch.iter().map(|&i| examples[i].target_idx).collect();
            let targets = targets_for(&target_ids)?;
            let mut grads = vec![0.0; flat_len];
            for (&i, target) in batch.iter().zip(&targets) {
                let ex = &examples[i];
                let hidden = net.hidden_of(&ex.x);
                let u = net.embed_of(&hidden);
                let row = net.row_of(&u, ex.action);
                let mut drow = Array1::zeros(d);
                for j in 0..d {
                    let err = row[j] - target[j];
                    epoch_loss += err * err;
                    drow[j] = 2.0 * err;
                }
                accumulate_grads(net, &ex.x, &hidden, &u, ex.action, &drow, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            let mut params = net.flat();
            opt.step(sched.lr_at(opt_steps), &mut params, &grads)?;
            opt_steps += 1;
            net.set_flat(&params)?;
            after_step(net)?;
        }
        log::debug!(
            "successor-feature epoch {epoch}: mean loss {:.6}",
            epoch_loss / examples.len() as f64
        );
        if epoch + 1 == cfg.epochs {
            log::info!(
                "successor-feature training finished after {} epochs: mean loss {:.6}",
                cfg.epochs,
                epoch_loss / examples.len() as f64
            );
        }
    }
    Ok(())
}

/// Accumulate d(loss)/d(params) for one example into the flat gradient
/// buffer, backpropagating through the single output row that was touched.
fn accumulate_grads(
    net: &PsiNet,
    x: &Array1<f64>,
    hidden: &Array1<f64>,
    u: &Array1<f64>,
    action: usize,
    drow: &Array1<f64>,
    grads: &mut [f64],
) {
    let (h, e, v, d) = net.dims();
    let m = net.encoder.dim();
    let m2_slice = net.m2.slice(s![.., action * d..(action + 1) * d]);
    let du = m2_slice.dot(drow);
    let dhidden = net.m1.dot(&du);
    let dz = &dhidden * &hidden.mapv(|t| 1.0 - t * t);

    let (w_in_at, b_in_at, m1_at, m2_at) = (0, h * m, h * m + h, h * m + h + h * e);
    for i in 0..h {
        let dzi = dz[i];
        if dzi != 0.0 {
            for j in 0..m {
                grads[w_in_at + i * m + j] += dzi * x[j];
            }
        }
        grads[b_in_at + i] += dzi;
        for j in 0..e {
            grads[m1_at + i * e + j] += hidden[i] * du[j];
        }
    }
    let width = v * d;
    for i in 0..e {
        let ui = u[i];
        for j in 0..d {
            grads[m2_at + i * width + action * d + j] += ui * drow[j];
        }
    }
}

fn validate_trajectories(trajectories: &[Trajectory], vocab_size: usize) -> Result<()> {
    if trajectories.is_empty() {
        return Err(SfError::Input("no trajectories to train on".into()));
    }
    for traj in trajectories {
        if !traj.terminal().is_terminal() {
            return Err(SfError::Input("trajectory does not end in a terminal state".into()));
        }
        for (_, action) in traj.steps() {
            if *action >= vocab_size {
                return Err(SfError::Input(format!(
                    "action {action} outside vocabulary of size {vocab_size}"
                )));
            }
        }
    }
    Ok(())
}

/// Monte Carlo training: every visited (s, a) regresses toward the realized
/// terminal features of its own trajectory. Exact only at discount 1, so any
/// other discount is rejected.
pub fn mc_train(
    trajectories: &[Trajectory],
    phi_net: &PhiNet,
    encoder: &StateEncoder,
    vocab_size: usize,
    cfg: &SFTrainerCfg,
) -> Result<PsiNet> {
    cfg.validate()?;
    if cfg.gamma != 1.0 {
        return Err(SfError::Config(format!(
            "Monte Carlo successor-feature regression requires discount 1, got {}",
            cfg.gamma
        )));
    }
    validate_trajectories(trajectories, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = PsiNet::init(
        *encoder,
        cfg.hidden,
        cfg.embed,
        vocab_size,
        phi_net.dims().2,
        &mut rng,
    );
    net.gamma = cfg.gamma;
    net.tau = cfg.tau;
    net.seed = cfg.seed;

    // One target per trajectory, shared by all its steps.
    let mut targets = Vec::with_capacity(trajectories.len());
    let mut examples = Vec::new();
    for (t, traj) in trajectories.iter().enumerate() {
        targets.push(phi(phi_net, &encoder.encode(traj.terminal()))?);
        for (state, action) in traj.steps() {
            examples.push(TrainExample {
                x: encoder.encode(state),
                action: *action,
                target_idx: t,
            });
        }
    }
    run_regression(
        &mut net,
        &examples,
        cfg,
        &mut rng,
        |ids| Ok(ids.iter().map(|&t| targets[t].clone()).collect()),
        |_| Ok(()),
    )?;
    Ok(net)
}

/// Expected-SARSA training with a polyak-averaged target network. Each
/// transition (s, a, s') regresses toward the terminal-split target computed
/// from the current target net; the target net chases the online net by
/// factor tau after every optimizer step past the warm-up.
pub fn sarsa_train(
    trajectories: &[Trajectory],
    phi_net: &PhiNet,
    encoder: &StateEncoder,
    lm: &dyn LanguageModel,
    cfg: &SFTrainerCfg,
) -> Result<PsiNet> {
    cfg.validate()?;
    let vocab_size = lm.vocab_size();
    validate_trajectories(trajectories, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = PsiNet::init(
        *encoder,
        cfg.hidden,
        cfg.embed,
        vocab_size,
        phi_net.dims().2,
        &mut rng,
    );
    net.gamma = cfg.gamma;
    net.tau = cfg.tau;
    net.seed = cfg.seed;

    // Successor state for each visited (s, a).
    let mut successors: Vec<SeqState> = Vec::new();
    let mut examples = Vec::new();
    for traj in trajectories {
        let steps = traj.steps();
        for (i, (state, action)) in steps.iter().enumerate() {
            let next = steps.get(i + 1).map(|(s, _)| s).unwrap_or_else(|| traj.terminal());
            examples.push(TrainExample {
                x: encoder.encode(state),
                action: *action,
                target_idx: successors.len(),
            });
            successors.push(next.clone());
        }
    }

    let target_cell = std::cell::RefCell::new(net.clone());
    let steps_done = std::cell::Cell::new(0usize);
    run_regression(
        &mut net,
        &examples,
        cfg,
        &mut rng,
        |ids| {
            let target_net = target_cell.borrow();
            ids.iter()
                .map(|&t| bellman_target(phi_net, &target_net, lm, &successors[t], cfg.gamma))
                .collect()
        },
        |online| {
            steps_done.set(steps_done.get() + 1);
            if steps_done.get() > cfg.warmup {
                polyak_update(&mut target_cell.borrow_mut(), online, cfg.tau)?;
            }
            Ok(())
        },
    )?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_grad, max_rel_error, FD_FLOOR, FD_STEP, FD_TOL};
    use crate::lm::{sample_topk, ProbVector, TableLM};
    use crate::seqmdp::{TokenId, BOS, EOS};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    const A: TokenId = 3;
    const B: TokenId = 4;

    fn encoder() -> StateEncoder {
        StateEncoder::new(24, 15).unwrap()
    }

    fn toy_lm() -> TableLM {
        // Over V=5 with mass only on {a, b, EOS}.
        TableLM::constant(ProbVector::new(vec![0.0, 0.2, 0.0, 0.5, 0.3]).unwrap())
    }

    fn rollout(lm: &dyn LanguageModel, max_len: usize, rng: &mut ChaCha8Rng) -> Trajectory {
        let mut state = SeqState::prompt(&[], max_len).unwrap();
        let mut steps = Vec::new();
        while !state.is_terminal() {
            let dist = lm.next_dist(&state).unwrap();
            let action = sample_topk(dist.as_slice(), dist.len(), rng).unwrap();
            steps.push((state.clone(), action));
            state = state.step(action, lm.vocab_size(), max_len).unwrap();
        }
        Trajectory::validated(steps, state, vec![], lm.vocab_size(), max_len).unwrap()
    }

    #[test]
    fn zero_head_outputs_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PsiNet::init(encoder(), 8, 2, 5, 3, &mut rng);
        let mut flat = net.flat();
        let head_start = flat.len() - net.head_len();
        for slot in &mut flat[head_start..] {
            *slot = 0.0;
        }
        net.set_flat(&flat).unwrap();
        let out = psi_forward(&net, &SeqState::prompt(&[A], 8).unwrap()).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn factorized_forward_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PsiNet::init(encoder(), 8, 2, 6, 4, &mut rng);
        let state = SeqState::prompt(&[A, B], 10).unwrap();
        let fast = psi_forward(&net, &state).unwrap();

        let x = net.encoder.encode(&state);
        let hidden = net.hidden_of(&x);
        let dense = net.m1.dot(&net.m2); // h × (V·d)
        let flat = dense.t().dot(&hidden);
        let slow = flat.into_shape_with_order((6, 4)).unwrap();
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn psi_forward_rejects_terminal_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PsiNet::init(encoder(), 4, 2, 5, 3, &mut rng);
        let terminal = SeqState::from_tokens(vec![BOS, EOS], 8).unwrap();
        assert!(matches!(psi_forward(&net, &terminal), Err(SfError::Contract(_))));
    }

    #[test]
    fn head_counts_match_published_scale() {
        assert_eq!(head_param_count(768, 32, 50257, 64), 102_950_912);
        assert_eq!(dense_param_count(768, 50257, 64), 2_470_232_064);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PsiNet::init(encoder(), 16, 4, 5, 8, &mut rng);
        assert_eq!(net.head_len() as u64, head_param_count(16, 4, 5, 8));
    }

    #[test]
    fn q_values_pick_out_reward_entries() {
        // Rows = standard basis: Q(a) = w_a.
        let mut psi = PsiMatrix::zeros((3, 3));
        for i in 0..3 {
            psi[(i, i)] = 1.0;
        }
        let w = Array1::from_vec(vec![0.3, -0.7, 0.1]);
        assert_eq!(q_values(&psi, &w).unwrap(), vec![0.3, -0.7, 0.1]);
        let zero = Array1::zeros(3);
        assert_eq!(q_values(&psi, &zero).unwrap(), vec![0.0; 3]);
        assert!(matches!(q_values(&psi, &Array1::zeros(4)), Err(SfError::Contract(_))));
    }

    #[test]
    fn q_is_linear_in_the_reward_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = PsiNet::init(encoder(), 8, 3, 5, 4, &mut rng);
        let psi = psi_forward(&net, &SeqState::prompt(&[A], 8).unwrap()).unwrap();
        let w1 = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let w2 = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let (alpha, beta) = (0.4, -1.3);
        let combined = q_values(&psi, &(alpha * &w1 + beta * &w2)).unwrap();
        let q1 = q_values(&psi, &w1).unwrap();
        let q2 = q_values(&psi, &w2).unwrap();
        for a in 0..5 {
            assert_abs_diff_eq!(combined[a], alpha * q1[a] + beta * q2[a], epsilon = 1e-12);
        }
    }

    #[test]
    fn psi_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = PsiNet::init(encoder(), 6, 3, 5, 4, &mut rng);
        let state = SeqState::prompt(&[B, A], 10).unwrap();
        let x = net.encoder.encode(&state);
        let c = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let action = 3usize;

        let hidden = net.hidden_of(&x);
        let u = net.embed_of(&hidden);
        let mut analytic = vec![0.0; net.flat_len()];
        // Loss c·row implies upstream gradient c on the touched row.
        accumulate_grads(&net, &x, &hidden, &u, action, &c, &mut analytic);

        let flat = net.flat();
        let probe = net.clone();
        let loss = |params: &[f64]| -> f64 {
            let mut n = probe.clone();
            n.set_flat(params).unwrap();
            let hidden = n.hidden_of(&x);
            let u = n.embed_of(&hidden);
            n.row_of(&u, action).dot(&c)
        };
        let numeric = central_diff_grad(loss, &flat, FD_STEP);
        let err = max_rel_error(&analytic, &numeric, FD_FLOOR);
        assert!(err <= FD_TOL, "gradient mismatch: max rel error {err}");
    }

    #[test]
    fn mc_overfits_a_single_deterministic_trajectory() {
        let lm = toy_lm();
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi_net = PhiNet::init(enc.dim(), 6, 3, &mut rng);
        // Fixed path BOS -> a -> EOS.
        let s0 = SeqState::prompt(&[], 6).unwrap();
        let s1 = s0.step(A, 5, 6).unwrap();
        let terminal = s1.step(EOS, 5, 6).unwrap();
        let traj = Trajectory::validated(
            vec![(s0.clone(), A), (s1, EOS)],
            terminal.clone(),
            vec![],
            5,
            6,
        )
        .unwrap();
        let cfg = SFTrainerCfg {
            epochs: 1500,
            batch: 2,
            lr: 1e-2,
            hidden: 8,
            embed: 3,
            ..Default::default()
        };
        let net = mc_train(&[traj], &phi_net, &enc, lm.vocab_size(), &cfg).unwrap();
        let target = phi(&phi_net, &enc.encode(&terminal)).unwrap();
        let psi = psi_forward(&net, &s0).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(psi[(A, j)], target[j], epsilon = 1e-3);
        }
    }

    #[test]
    fn mc_learns_the_mean_of_two_equally_likely_outcomes() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi_net = PhiNet::init(enc.dim(), 6, 3, &mut rng);
        let s0 = SeqState::prompt(&[], 8).unwrap();
        let s1 = s0.step(A, 5, 8).unwrap();
        let t1 = s1.step(EOS, 5, 8).unwrap();
        let traj1 =
            Trajectory::validated(vec![(s0.clone(), A), (s1.clone(), EOS)], t1.clone(), vec![], 5, 8)
                .unwrap();
        let s2 = s1.step(B, 5, 8).unwrap();
        let t2 = s2.step(EOS, 5, 8).unwrap();
        let traj2 = Trajectory::validated(
            vec![(s0.clone(), A), (s1.clone(), B), (s2, EOS)],
            t2.clone(),
            vec![],
            5,
            8,
        )
        .unwrap();
        let cfg = SFTrainerCfg {
            epochs: 2000,
            batch: 5,
            lr: 1e-2,
            hidden: 8,
            embed: 3,
            ..Default::default()
        };
        let net = mc_train(&[traj1, traj2], &phi_net, &enc, 5, &cfg).unwrap();
        let f1 = phi(&phi_net, &enc.encode(&t1)).unwrap();
        let f2 = phi(&phi_net, &enc.encode(&t2)).unwrap();
        let psi = psi_forward(&net, &s0).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(psi[(A, j)], (f1[j] + f2[j]) / 2.0, epsilon = 0.05);
        }
    }

    #[test]
    fn mc_rejects_discounts_below_one() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi_net = PhiNet::init(enc.dim(), 4, 2, &mut rng);
        let lm = toy_lm();
        let traj = rollout(&lm, 6, &mut rng);
        let cfg = SFTrainerCfg { gamma: 0.9, ..Default::default() };
        assert!(matches!(
            mc_train(&[traj], &phi_net, &enc, 5, &cfg),
            Err(SfError::Config(_))
        ));
    }

    #[test]
    fn sarsa_rejects_bad_polyak_coefficients() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi_net = PhiNet::init(enc.dim(), 4, 2, &mut rng);
        let lm = toy_lm();
        let traj = rollout(&lm, 6, &mut rng);
        for tau in [0.0, -0.5, 1.5] {
            let cfg = SFTrainerCfg { tau, ..Default::default() };
            assert!(matches!(
                sarsa_train(&[traj.clone()], &phi_net, &enc, &lm, &cfg),
                Err(SfError::Config(_))
            ));
        }
    }

    #[test]
    fn polyak_moves_target_toward_online() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let online = PsiNet::init(enc, 4, 2, 5, 3, &mut rng);
        let mut target = online.clone();
        let zeros = vec![0.0; target.flat_len()];
        target.set_flat(&zeros).unwrap();
        let ones = vec![1.0; online.flat_len()];
        let mut online_ones = online.clone();
        online_ones.set_flat(&ones).unwrap();

        polyak_update(&mut target, &online_ones, 0.1).unwrap();
        for p in target.flat() {
            assert_abs_diff_eq!(p, 0.1, epsilon = 1e-12);
        }

        // tau = 1 collapses the target onto the online net exactly.
        let mut t2 = online.clone();
        t2.set_flat(&zeros).unwrap();
        polyak_update(&mut t2, &online_ones, 1.0).unwrap();
        assert_eq!(t2.flat(), online_ones.flat());
    }

    #[test]
    fn terminal_split_target_is_phi_at_terminals() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi_net = PhiNet::init(enc.dim(), 6, 3, &mut rng);
        let target_net = PsiNet::init(enc, 8, 2, 5, 3, &mut rng);
        let lm = toy_lm();
        let terminal = SeqState::from_tokens(vec![BOS, A, EOS], 8).unwrap();
        let t = bellman_target(&phi_net, &target_net, &lm, &terminal, 1.0).unwrap();
        let expected = phi(&phi_net, &enc.encode(&terminal)).unwrap();
        assert_eq!(t, expected);
    }

    #[test]
    fn non_terminal_target_is_the_policy_expectation() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let phi_net = PhiNet::init(enc.dim(), 6, 3, &mut rng);
        let target_net = PsiNet::init(enc, 8, 2, 5, 3, &mut rng);
        let lm = toy_lm();
        let state = SeqState::prompt(&[A], 8).unwrap();
        let gamma = 0.9;
        let t = bellman_target(&phi_net, &target_net, &lm, &state, gamma).unwrap();
        let psi = psi_forward(&target_net, &state).unwrap();
        let dist = lm.next_dist(&state).unwrap();
        for j in 0..3 {
            let mut expected = 0.0;
            for a in 0..5 {
                expected += dist.get(a) * psi[(a, j)];
            }
            assert_abs_diff_eq!(t[j], gamma * expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_step_episodes_make_sarsa_match_the_mc_target() {
        // max_len 2: every first action terminates, so the SARSA target is
        // φ(terminal) for every example, exactly as in MC.
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let phi_net = PhiNet::init(enc.dim(), 6, 3, &mut rng);
        let lm = toy_lm();
        let trajs: Vec<Trajectory> = (0..40).map(|_| rollout(&lm, 2, &mut rng)).collect();
        let cfg = SFTrainerCfg {
            epochs: 800,
            batch: 8,
            lr: 1e-2,
            hidden: 8,
            embed: 3,
            ..Default::default()
        };
        let net = sarsa_train(&trajs, &phi_net, &enc, &lm, &cfg).unwrap();
        let s0 = SeqState::prompt(&[], 2).unwrap();
        let psi = psi_forward(&net, &s0).unwrap();
        for action in [A, B, EOS] {
            if !trajs.iter().any(|t| t.steps()[0].1 == action) {
                continue;
            }
            let terminal = s0.step(action, 5, 2).unwrap();
            let target = phi(&phi_net, &enc.encode(&terminal)).unwrap();
            for j in 0..3 {
                assert_abs_diff_eq!(psi[(action, j)], target[j], epsilon = 5e-3);
            }
        }
    }


    #[test]
    fn mc_and_sarsa_agree_on_the_toy_chain() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let phi_net = PhiNet::init(enc.dim(), 6, 3, &mut rng);
        let lm = toy_lm();
        let max_len = 4;
        // Enough rollouts that the empirical return means the regression fits
        // sit within the agreement tolerance of the bootstrapped targets.
        let trajs: Vec<Trajectory> = (0..3000).map(|_| rollout(&lm, max_len, &mut rng)).collect();
        // The action-embedding width bounds the rank of the per-state value
        // matrices the head can express; keep it above the number of distinct
        // chain states so both trainers can reach the same fixed point.
        let base = SFTrainerCfg {
            epochs: 400,
            batch: 32,
            lr: 5e-3,
            hidden: 16,
            embed: 8,
            ..Default::default()
        };
        let mc = mc_train(&trajs, &phi_net, &enc, 5, &base).unwrap();
        let sarsa_cfg = SFTrainerCfg { algorithm: SfAlgorithm::Sarsa, ..base };
        let sarsa = sarsa_train(&trajs, &phi_net, &enc, &lm, &sarsa_cfg).unwrap();
        for state in [
            SeqState::prompt(&[], max_len).unwrap(),
            SeqState::prompt(&[A], max_len).unwrap(),
            SeqState::prompt(&[A, B], max_len).unwrap(),
        ] {
            let pm = psi_forward(&mc, &state).unwrap();
            let ps = psi_forward(&sarsa, &state).unwrap();
            for action in [A, B, EOS] {
                for j in 0..3 {
                    let diff = (pm[(action, j)] - ps[(action, j)]).abs();
                    assert!(
                        diff <= 0.05,
                        "MC/SARSA disagree at {:?}[{action},{j}]: {diff}",
                        state.tokens()
                    );
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi_net = PhiNet::init(enc.dim(), 4, 2, &mut rng);
        let lm = toy_lm();
        let trajs: Vec<Trajectory> = (0..20).map(|_| rollout(&lm, 4, &mut rng)).collect();
        let cfg = SFTrainerCfg { epochs: 15, seed: 3, ..Default::default() };
        let n1 = mc_train(&trajs, &phi_net, &enc, 5, &cfg).unwrap();
        let n2 = mc_train(&trajs, &phi_net, &enc, 5, &cfg).unwrap();
        let bits = |n: &PsiNet| -> Vec<u64> { n.flat().into_iter().map(f64::to_bits).collect() };
        assert_eq!(bits(&n1), bits(&n2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = PsiNet::init(enc, 8, 3, 5, 4, &mut rng);
        let mut c = Container::new();
        net.save_into(&mut c);
        let back = PsiNet::load(&c).unwrap();
        assert_eq!(net, back);
    }
}
