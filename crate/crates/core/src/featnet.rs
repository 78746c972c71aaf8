//! Terminal-state features and per-subject reward vectors.
//!
//! A hashed n-gram encoder maps a token sequence to a fixed-length vector; a
//! small two-layer net turns that into features φ(s) ∈ R^d; a d×k reward
//! matrix holds one column w_j per subject so that φ(s)ᵀw_j predicts the
//! subject's terminal label in {-1, 0}. The feature net and reward matrix are
//! trained jointly by minibatch AdamW with hand-derived gradients; new
//! subjects are added later by a closed-form ridge fit against the frozen φ.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Result, SfError};
use crate::nn::{glorot_matrix, solve_linear, AdamW, LinearSchedule};
use crate::seqmdp::{SeqState, TokenId};

/// Deterministic hashed 1-gram + 2-gram bag encoder.
///
/// Each n-gram is hashed (FNV-1a over the seed, an n tag, and the token ids)
/// into one of `dim` buckets; bucket counts are divided by the sequence
/// length. The full token sequence is used, markers included, so terminal
/// and non-terminal renderings of the same content encode differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateEncoder {
    dim: usize,
    seed: u64,
}

fn fnv1a64(chunks: &[u64]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &chunk in chunks {
        for byte in chunk.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl StateEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<StateEncoder> {
        if dim == 0 {
            return Err(SfError::Config("encoder dimensionality must be >= 1".into()));
        }
        Ok(StateEncoder { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, n: u64, gram: &[TokenId]) -> usize {
        let mut chunks = Vec::with_capacity(gram.len() + 2);
        chunks.push(self.seed);
        chunks.push(n);
        chunks.extend(gram.iter().map(|&t| t as u64));
        (fnv1a64(&chunks) % self.dim as u64) as usize
    }

    /// Length-normalized hashed n-gram counts, plus unit-weight recency
    /// indicators for the final token and final bigram so the immediate
    /// context stays recoverable no matter how long the prefix grows; the
    /// empty state encodes to zero.
    pub fn encode(&self, state: &SeqState) -> Array1<f64> {
        let tokens = state.tokens();
        let mut out = Array1::zeros(self.dim);
        if tokens.is_empty() {
            return out;
        }
        for t in tokens {
            out[self.bucket(1, &[*t])] += 1.0;
        }
        for pair in tokens.windows(2) {
            out[self.bucket(2, pair)] += 1.0;
        }
        out /= tokens.len() as f64;
        out[self.bucket(101, &tokens[tokens.len() - 1..])] += 1.0;
        if tokens.len() >= 2 {
            out[self.bucket(102, &tokens[tokens.len() - 2..])] += 1.0;
        }
        out
    }

    /// Serialize as checkpoint section `encoder.meta`.
    pub fn save_into(&self, out: &mut Container) {
        out.put_u64s("encoder.meta", &[self.dim as u64, self.seed]);
    }

    pub fn load(container: &Container) -> Result<StateEncoder> {
        let meta = container.u64s("encoder.meta")?;
        if meta.len() != 2 {
            return Err(SfError::Format("encoder.meta must hold [dim, seed]".into()));
        }
        StateEncoder::new(meta[0] as usize, meta[1])
    }
}

/// Free-function form of [`StateEncoder::encode`].
pub fn encode(encoder: &StateEncoder, state: &SeqState) -> Array1<f64> {
    encoder.encode(state)
}

/// Two-layer feature net: φ(x) = W_out · tanh(W_in · x + b_in) + b_out.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiNet {
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

/// Per-tensor gradients for [`PhiNet`], same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct PhiGrads {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl PhiNet {
    pub fn init(input_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> PhiNet {
        PhiNet {
            w_in: glorot_matrix(hidden, input_dim, rng),
            b_in: Array1::zeros(hidden),
            w_out: glorot_matrix(out_dim, hidden, rng),
            b_out: Array1::zeros(out_dim),
        }
    }

    /// All-zero parameters; useful for fixtures where φ must equal b_out.
    pub fn zeros(input_dim: usize, hidden: usize, out_dim: usize) -> PhiNet {
        PhiNet {
            w_in: Array2::zeros((hidden, input_dim)),
            b_in: Array1::zeros(hidden),
            w_out: Array2::zeros((out_dim, hidden)),
            b_out: Array1::zeros(out_dim),
        }
    }

    pub fn set_b_out(&mut self, b_out: Array1<f64>) -> Result<()> {
        if b_out.len() != self.b_out.len() {
            return Err(SfError::Contract("b_out length mismatch".into()));
        }
        self.b_out = b_out;
        Ok(())
    }

    /// (input_dim, hidden, out_dim).
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w_in.ncols(), self.w_in.nrows(), self.w_out.nrows())
    }

    /// Forward pass returning (φ, hidden activation) for reuse in backward.
    pub fn forward(&self, x: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if x.len() != self.w_in.ncols() {
            return Err(SfError::Contract(format!(
                "encoded input has length {}, net expects {}",
                x.len(),
                self.w_in.ncols()
            )));
        }
        let hidden = (self.w_in.dot(x) + &self.b_in).mapv(f64::tanh);
        let out = self.w_out.dot(&hidden) + &self.b_out;
        Ok((out, hidden))
    }

    /// Gradients of a scalar loss with upstream dL/dφ, given the forward
    /// pass's input and hidden activation.
    pub fn backward(&self, x: &Array1<f64>, hidden: &Array1<f64>, dphi: &Array1<f64>) -> PhiGrads {
        let d_w_out = outer(dphi, hidden);
        let d_hidden = self.w_out.t().dot(dphi);
        let dz = &d_hidden * &hidden.mapv(|h| 1.0 - h * h);
        PhiGrads {
            w_in: outer(&dz, x),
            b_in: dz,
            w_out: d_w_out,
            b_out: dphi.clone(),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.w_in.len() + self.b_in.len() + self.w_out.len() + self.b_out.len()
    }

    /// Parameters as one flat vector (w_in, b_in, w_out, b_out order).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend(self.w_in.iter());
        out.extend(self.b_in.iter());
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
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
            .chain(self.w_out.iter_mut())
            .chain(self.b_out.iter_mut())
        {
            *slot = it.next().unwrap();
        }
        Ok(())
    }

    /// Serialize as checkpoint sections `phi.meta` and `phi.params`.
    pub fn save_into(&self, out: &mut Container) {
        let (m, h, d) = self.dims();
        out.put_u64s("phi.meta", &[m as u64, h as u64, d as u64]);
        out.put_f64s("phi.params", &self.flat());
    }

    pub fn load(container: &Container) -> Result<PhiNet> {
        let meta = container.u64s("phi.meta")?;
        if meta.len() != 3 {
            return Err(SfError::Format("phi.meta must hold [input_dim, hidden, out_dim]".into()));
        }
        let mut net = PhiNet::zeros(meta[0] as usize, meta[1] as usize, meta[2] as usize);
        let flat = container.f64s("phi.params")?;
        net.set_flat(&flat)
            .map_err(|_| SfError::Format("phi.params length disagrees with phi.meta".into()))?;
        Ok(net)
    }
}

impl PhiGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.w_in.len() + self.b_in.len() + self.w_out.len() + self.b_out.len());
        out.extend(self.w_in.iter());
        out.extend(self.b_in.iter());
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[(i, j)] = a[i] * b[j];
        }
    }
    out
}

/// Free-function form of the feature map: φ(params, encoded).
pub fn phi(params: &PhiNet, encoded: &Array1<f64>) -> Result<Array1<f64>> {
    Ok(params.forward(encoded)?.0)
}

/// Per-subject reward vectors, one d-length column per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMatrix {
    w: Array2<f64>,
}

impl RewardMatrix {
    pub fn zeros(d: usize, tasks: usize) -> RewardMatrix {
        RewardMatrix { w: Array2::zeros((d, tasks)) }
    }

    pub fn from_columns(columns: &[Array1<f64>]) -> Result<RewardMatrix> {
        if columns.is_empty() {
            return Err(SfError::Contract("reward matrix needs at least one column".into()));
        }
        let d = columns[0].len();
        if columns.iter().any(|c| c.len() != d) {
            return Err(SfError::Contract("reward columns differ in length".into()));
        }
        let mut w = Array2::zeros((d, columns.len()));
        for (j, col) in columns.iter().enumerate() {
            w.column_mut(j).assign(col);
        }
        Ok(RewardMatrix { w })
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn tasks(&self) -> usize {
        self.w.ncols()
    }

    pub fn column(&self, j: usize) -> Array1<f64> {
        self.w.column(j).to_owned()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }
}

/// Terminal states paired with per-subject labels in {-1, 0}.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDataset {
    states: Vec<SeqState>,
    labels: Vec<Vec<f64>>,
}

impl TerminalDataset {
    pub fn new(states: Vec<SeqState>, labels: Vec<Vec<f64>>) -> Result<TerminalDataset> {
        if states.is_empty() {
            return Err(SfError::Config("terminal dataset is empty".into()));
        }
        if labels.len() != states.len() {
            return Err(SfError::Input("one label row required per state".into()));
        }
        let k = labels[0].len();
        if k == 0 {
            return Err(SfError::Config("terminal dataset has no tasks".into()));
        }
        if labels.iter().any(|row| row.len() != k) {
            return Err(SfError::Input("ragged label rows".into()));
        }
        if labels.iter().flatten().any(|&l| l != -1.0 && l != 0.0) {
            return Err(SfError::Input("labels must be -1 or 0".into()));
        }
        if let Some(bad) = states.iter().find(|s| !s.is_terminal()) {
            return Err(SfError::Input(format!(
                "dataset state {:?} is not terminal",
                bad.tokens()
            )));
        }
        Ok(TerminalDataset { states, labels })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn tasks(&self) -> usize {
        self.labels[0].len()
    }

    pub fn state(&self, i: usize) -> &SeqState {
        &self.states[i]
    }

    pub fn label_row(&self, i: usize) -> &[f64] {
        &self.labels[i]
    }
}

/// Joint φ/W training configuration.
#[derive(Debug, Clone)]
pub struct MultiTaskCfg {
    pub hidden: usize,
    pub out_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for MultiTaskCfg {
    fn default() -> Self {
        MultiTaskCfg {
            hidden: 16,
            out_dim: 8,
            lr: 5e-3,
            epochs: 150,
            batch: 16,
            seed: 0,
            weight_decay: 1e-5,
        }
    }
}

/// Jointly fit φ and the reward matrix by minibatch AdamW on the summed
/// per-task squared error at terminal states. Deterministic per seed; the
/// mean epoch loss is logged, and a warning is emitted if many training
/// predictions stray outside the nominal label range.
pub fn train_multitask(
    data: &TerminalDataset,
    encoder: &StateEncoder,
    cfg: &MultiTaskCfg,
) -> Result<(PhiNet, RewardMatrix)> {
    if data.is_empty() {
        return Err(SfError::Config("cannot train on an empty task".into()));
    }
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.hidden == 0 || cfg.out_dim == 0 {
        return Err(SfError::Config("epochs, batch, hidden, and out_dim must be >= 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(SfError::Config("learning rate must be positive".into()));
    }
    let k = data.tasks();
    let xs: Vec<Array1<f64>> = (0..data.len()).map(|i| encoder.encode(data.state(i))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = PhiNet::init(encoder.dim(), cfg.hidden, cfg.out_dim, &mut rng);
    let mut rewards = RewardMatrix::zeros(cfg.out_dim, k);
    let mut opt = AdamW::new(cfg.weight_decay);
    let phi_len = net.flat_len();

    let mut order: Vec<usize> = (0..data.len()).collect();
    // Decayed step size: the prediction head must settle tightly onto the
    // label means, since downstream value estimates inherit any residual.
    let sched = LinearSchedule {
        base_lr: cfg.lr,
        warmup: 0,
        total: cfg.epochs * data.len().div_ceil(cfg.batch),
    };
    let mut opt_steps = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut grads = vec![0.0; phi_len + cfg.out_dim * k];
            for &i in batch {
                let (phi_i, hidden) = net.forward(&xs[i])?;
                let pred = rewards.w.t().dot(&phi_i);
                let mut dphi = Array1::zeros(cfg.out_dim);
                for j in 0..k {
                    let err = pred[j] - data.label_row(i)[j];
                    epoch_loss += err * err;
                    let dpred = 2.0 * err;
                    dphi.scaled_add(dpred, &rewards.w.column(j));
                    for a in 0..cfg.out_dim {
                        grads[phi_len + a * k + j] += dpred * phi_i[a];
                    }
                }
                let pg = net.backward(&xs[i], &hidden, &dphi);
                for (slot, g) in grads[..phi_len].iter_mut().zip(pg.flat()) {
                    *slot += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            let mut params = net.flat();
            params.extend(rewards.w.iter());
            opt.step(sched.lr_at(opt_steps), &mut params, &grads)?;
            opt_steps += 1;
            net.set_flat(&params[..phi_len])?;
            for (slot, &p) in rewards.w.iter_mut().zip(&params[phi_len..]) {
                *slot = p;
            }
        }
        log::debug!(
            "feature training epoch {epoch}: mean loss {:.6}",
            epoch_loss / data.len() as f64
        );
        if epoch + 1 == cfg.epochs {
            log::info!(
                "feature training finished after {} epochs: mean loss {:.6}",
                cfg.epochs,
                epoch_loss / data.len() as f64
            );
        }
    }

    let stray = out_of_range_fraction(&net, encoder, data, &rewards)?;
    if stray >= 0.05 {
        log::warn!(
            "terminal reward predictions outside [-1.5, 0.5] on {:.1}% of training points",
            stray * 100.0
        );
    }
    Ok((net, rewards))
}

/// Fraction of training predictions φ(s)ᵀw_j outside the nominal [-1.5, 0.5]
/// band around the {-1, 0} labels.
pub fn out_of_range_fraction(
    net: &PhiNet,
    encoder: &StateEncoder,
    data: &TerminalDataset,
    rewards: &RewardMatrix,
) -> Result<f64> {
    let mut outside = 0usize;
    let mut total = 0usize;
    for i in 0..data.len() {
        let phi_i = phi(net, &encoder.encode(data.state(i)))?;
        let pred = rewards.w.t().dot(&phi_i);
        for j in 0..rewards.tasks() {
            total += 1;
            if pred[j] < -1.5 || pred[j] > 0.5 {
                outside += 1;
            }
        }
    }
    Ok(outside as f64 / total as f64)
}

/// Closed-form ridge regression of labels on feature rows:
/// w = (ΦᵀΦ + ridge·I)⁻¹ Φᵀ r.
pub fn ridge_fit(features: &Array2<f64>, labels: &Array1<f64>, ridge: f64) -> Result<Array1<f64>> {
    if features.nrows() != labels.len() {
        return Err(SfError::Contract("one label per feature row required".into()));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(SfError::Config("ridge must be finite and >= 0".into()));
    }
    let mut normal = features.t().dot(features);
    for i in 0..normal.nrows() {
        normal[(i, i)] += ridge;
    }
    let rhs = features.t().dot(labels);
    solve_linear(&normal, &rhs)
}

/// Fit one new subject's reward vector against the frozen feature net. The
/// net and any existing subjects are untouched; only the returned vector is
/// new.
pub fn fit_new_subject(
    phi_net: &PhiNet,
    encoder: &StateEncoder,
    data: &TerminalDataset,
    ridge: f64,
) -> Result<Array1<f64>> {
    if data.tasks() != 1 {
        return Err(SfError::Contract(format!(
            "fit_new_subject takes a single-task dataset, got {} tasks",
            data.tasks()
        )));
    }
    let d = phi_net.dims().2;
    let mut features = Array2::zeros((data.len(), d));
    for i in 0..data.len() {
        let row = phi(phi_net, &encoder.encode(data.state(i)))?;
        features.row_mut(i).assign(&row);
    }
    let labels = Array1::from_shape_fn(data.len(), |i| data.label_row(i)[0]);
    ridge_fit(&features, &labels, ridge)
}
