//! Scratch sweep: measure oracle-MAE, estimator agreement, and wall time for
//! candidate acceptance-fixture configurations. Not part of the build.

use std::time::Instant;

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use sfgen_core::featnet::{train_multitask, MultiTaskCfg, PhiNet, StateEncoder, TerminalDataset};
use sfgen_core::lm::{fit_ngram, LanguageModel, NGramLM, ProbVector, TableLM, TopKLM};
use sfgen_core::oracle::{exact_psi, exact_q_dead_end, ContainsScorer, TerminalFeatureMap};
use sfgen_core::rectify::{
    generate_with_stats, BasePolicy, DecodePolicy, FusionMode, NoQ, RectifierCfg, SubjectBank,
};
use sfgen_core::seqmdp::{SeqState, TokenId, Trajectory};
use sfgen_core::sfnet::{
    mc_train, psi_forward, q_values, sarsa_train, SFTrainerCfg, SfAlgorithm,
};

const A: TokenId = 3;
const B: TokenId = 4;
const V: usize = 5;
const HORIZON: usize = 6;
const ENC_DIM: usize = 128;

fn reachable(lm: &dyn LanguageModel, max_len: usize) -> (Vec<SeqState>, Vec<SeqState>) {
    let policy = BasePolicy { lm, top_k: lm.vocab_size() };
    let mut interior = vec![SeqState::prompt(&[], max_len).unwrap()];
    let mut terminals = Vec::new();
    let mut at = 0;
    while at < interior.len() {
        let state = interior[at].clone();
        at += 1;
        let dist = policy.step_dist(&state).unwrap();
        for a in 0..lm.vocab_size() {
            if dist.get(a) == 0.0 {
                continue;
            }
            let child = state.step(a, lm.vocab_size(), max_len).unwrap();
            if child.is_terminal() {
                terminals.push(child);
            } else {
                interior.push(child);
            }
        }
    }
    (interior, terminals)
}

fn base_rollout(lm: &dyn LanguageModel, max_len: usize, seed: u64) -> Trajectory {
    let bank = SubjectBank::new(FusionMode::Min);
    let cfg = RectifierCfg { top_k: lm.vocab_size(), max_len, ..Default::default() };
    let prompt = SeqState::prompt(&[], max_len).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (traj, _) = generate_with_stats(lm, &NoQ, &bank, &prompt, &cfg, &mut rng).unwrap();
    traj
}

/// One Monte-Carlo episode whose first action is forced to `first`, then
/// follows the base policy to termination.
fn exploring_start(
    lm: &dyn LanguageModel,
    start: &SeqState,
    first: TokenId,
    max_len: usize,
    seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = vec![(start.clone(), first)];
    let mut state = start.step(first, lm.vocab_size(), max_len).unwrap();
    while !state.is_terminal() {
        let dist = lm.next_dist(&state).unwrap();
        let action = sfgen_core::lm::sample_categorical(dist.as_slice(), &mut rng).unwrap();
        steps.push((state.clone(), action));
        state = state.step(action, lm.vocab_size(), max_len).unwrap();
    }
    Trajectory::validated(steps, state, Vec::new(), lm.vocab_size(), max_len).unwrap()
}

struct Sweep {
    rollouts: u64,
    starts_per_pair: u64,
    epochs: usize,
    batch: usize,
    hidden: usize,
    embed: usize,
    phi_epochs: usize,
}

struct PhiFeatures<'a> {
    net: &'a PhiNet,
    encoder: &'a StateEncoder,
}

impl TerminalFeatureMap for PhiFeatures<'_> {
    fn dim(&self) -> usize {
        self.net.dims().2
    }

    fn features(&self, terminal: &SeqState) -> sfgen_core::error::Result<Vec<f64>> {
        Ok(sfgen_core::featnet::phi(self.net, &self.encoder.encode(terminal))?.to_vec())
    }

    fn memo_state(&self, _state: &SeqState) -> Option<Vec<u64>> {
        None
    }
}

fn run_instance(label: &str, lm: &dyn LanguageModel, sw: &Sweep) {
    let (eval, terminals) = reachable(lm, HORIZON);
    let n_states = eval.len();

    let t0 = Instant::now();
    let mut trajs: Vec<Trajectory> =
        (0..sw.rollouts).map(|i| base_rollout(lm, HORIZON, 0xA11CE ^ i)).collect();
    let policy0 = BasePolicy { lm, top_k: lm.vocab_size() };
    let mut es_seed = 0x0E5u64;
    for state in &eval {
        let dist = policy0.step_dist(state).unwrap();
        for a in 0..V {
            if dist.get(a) == 0.0 {
                continue;
            }
            for _ in 0..sw.starts_per_pair {
                es_seed = es_seed.wrapping_mul(6364136223846793005).wrapping_add(1);
                trajs.push(exploring_start(lm, state, a, HORIZON, es_seed));
            }
        }
    }
    let roll_s = t0.elapsed().as_secs_f64();

    let scorers: Vec<ContainsScorer> = [vec![B], vec![A, A], vec![B, A]]
        .into_iter()
        .map(|p| ContainsScorer::new(p).unwrap())
        .collect();
    let labels: Vec<Vec<f64>> = terminals
        .iter()
        .map(|t| {
            scorers
                .iter()
                .map(|s| if s.matches_content(&t.content()) { -1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let n_terms = terminals.len();
    let data = TerminalDataset::new(terminals, labels).unwrap();
    let encoder = StateEncoder::new(ENC_DIM, 23).unwrap();
    let mcfg = MultiTaskCfg {
        hidden: 32,
        out_dim: 8,
        lr: 5e-3,
        epochs: sw.phi_epochs,
        batch: 16,
        seed: 5,
        weight_decay: 1e-6,
    };
    let t1 = Instant::now();
    let (phi_net, rewards) = train_multitask(&data, &encoder, &mcfg).unwrap();
    let phi_s = t1.elapsed().as_secs_f64();

    // Residual of the reward head itself on the terminal set.
    let mut phi_err = 0.0f64;
    let w0 = rewards.column(0);
    for i in 0..data.len() {
        let f = sfgen_core::featnet::phi(&phi_net, &encoder.encode(data.state(i))).unwrap();
        phi_err = phi_err.max((f.dot(&w0) - data.label_row(i)[0]).abs());
    }

    // Empirical per-(state, action, feature) target means over the same
    // trajectories the trainer sees, to attribute net-vs-truth error.
    use std::collections::HashMap;
    let mut sums: HashMap<(Vec<TokenId>, usize), (Vec<f64>, u64)> = HashMap::new();
    let mut term_phi: HashMap<Vec<TokenId>, Vec<f64>> = HashMap::new();
    for traj in &trajs {
        let tphi = term_phi
            .entry(traj.terminal().tokens().to_vec())
            .or_insert_with(|| {
                sfgen_core::featnet::phi(&phi_net, &encoder.encode(traj.terminal()))
                    .unwrap()
                    .to_vec()
            })
            .clone();
        for (state, action) in traj.steps() {
            let slot = sums
                .entry((state.tokens().to_vec(), *action))
                .or_insert_with(|| (vec![0.0; tphi.len()], 0));
            for (acc, v) in slot.0.iter_mut().zip(&tphi) {
                *acc += v;
            }
            slot.1 += 1;
        }
    }

    let scfg = SFTrainerCfg {
        epochs: sw.epochs,
        batch: sw.batch,
        lr: 5e-3,
        hidden: sw.hidden,
        embed: sw.embed,
        seed: 3,
        ..Default::default()
    };
    let t2 = Instant::now();
    let mc = mc_train(&trajs, &phi_net, &encoder, V, &scfg).unwrap();
    let mc_s = t2.elapsed().as_secs_f64();
    let t3 = Instant::now();
    let sarsa_cfg = SFTrainerCfg { algorithm: SfAlgorithm::Sarsa, ..scfg };
    let sarsa = sarsa_train(&trajs, &phi_net, &encoder, lm, &sarsa_cfg).unwrap();
    let sarsa_s = t3.elapsed().as_secs_f64();

    // Criterion-2 style MAE vs the exact oracle, and criterion-3 agreement.
    let t4 = Instant::now();
    let policy = BasePolicy { lm, top_k: lm.vocab_size() };
    let w: Array1<f64> = rewards.column(0);
    let scorer = &scorers[0];
    let mut mae = 0.0;
    let mut q_worst = 0.0f64;
    let mut pairs = 0u64;
    let mut gap_worst = 0.0f64;
    let mut gap_sum = 0.0f64;
    let mut gaps = 0u64;
    let feats = PhiFeatures { net: &phi_net, encoder: &encoder };
    let mut mc_true_worst = 0.0f64;
    let mut sarsa_true_worst = 0.0f64;
    let mut offenders: Vec<(f64, String)> = Vec::new();
    for state in &eval {
        let exact = exact_q_dead_end(&policy, scorer, state, HORIZON).unwrap();
        let truth = exact_psi(&policy, &feats, state, HORIZON).unwrap();
        let pm = psi_forward(&mc, state).unwrap();
        let ps = psi_forward(&sarsa, state).unwrap();
        let learned = q_values(&pm, &w).unwrap();
        let dist = policy.step_dist(state).unwrap();
        for a in 0..V {
            if dist.get(a) == 0.0 {
                continue;
            }
            let err = (exact[a] - learned[a]).abs();
            mae += err;
            q_worst = q_worst.max(err);
            pairs += 1;
            for j in 0..pm.ncols() {
                let g = (pm[(a, j)] - ps[(a, j)]).abs();
                let em = (pm[(a, j)] - truth[(a, j)]).abs();
                let es = (ps[(a, j)] - truth[(a, j)]).abs();
                mc_true_worst = mc_true_worst.max(em);
                sarsa_true_worst = sarsa_true_worst.max(es);
                gap_worst = gap_worst.max(g);
                gap_sum += g;
                gaps += 1;
                let (emp, emp_n) = sums
                    .get(&(state.tokens().to_vec(), a))
                    .map(|(s, n)| (s[j] / *n as f64, *n))
                    .unwrap_or((f64::NAN, 0));
                offenders.push((
                    g,
                    format!(
                        "d{} {:?} a={a} j={j}: gap={g:.3} mc_err={em:.3} sarsa_err={es:.3} \
                         p={:.3} | n={emp_n} emp_err={:.3} net_vs_emp={:.3}",
                        state.len() - 1,
                        state.content(),
                        dist.get(a),
                        (emp - truth[(a, j)]).abs(),
                        (pm[(a, j)] - emp).abs()
                    ),
                ));
            }
        }
    }
    mae /= pairs as f64;
    offenders.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    for (_, line) in offenders.iter().take(5) {
        println!("    worst: {line}");
    }
    println!(
        "    vs-truth worst: mc={mc_true_worst:.4} sarsa={sarsa_true_worst:.4}"
    );
    let eval_s = t4.elapsed().as_secs_f64();

    println!(
        "{label}: states={n_states} terms={n_terms} | mae={mae:.4} qworst={q_worst:.4} \
         gap_worst={gap_worst:.4} gap_mean={:.4} phi_res={phi_err:.4} | roll={roll_s:.1}s \
         phi={phi_s:.1}s mc={mc_s:.1}s sarsa={sarsa_s:.1}s eval={eval_s:.1}s (c2={:.1}s)",
        gap_sum / gaps as f64,
        roll_s + mc_s + eval_s
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, dflt: usize| -> usize {
        args.get(i).and_then(|s| s.parse().ok()).unwrap_or(dflt)
    };
    let sw = Sweep {
        rollouts: get(1, 8000) as u64,
        starts_per_pair: get(2, 400) as u64,
        epochs: get(3, 25),
        batch: get(4, 32),
        hidden: get(5, 48),
        embed: get(6, 40),
        phi_epochs: get(7, 3000),
    };
    println!(
        "rollouts={} starts={} epochs={} batch={} hidden={} embed={} phi_epochs={}",
        sw.rollouts, sw.starts_per_pair, sw.epochs, sw.batch, sw.hidden, sw.embed, sw.phi_epochs
    );

    let table =
        TableLM::constant(ProbVector::new(vec![0.0, 0.2, 0.0, 0.5, 0.3]).unwrap());
    run_instance("table ", &table, &sw);

    let corpus: Vec<Vec<TokenId>> = vec![
        vec![A, B],
        vec![B, A],
        vec![A, A, B],
        vec![B, B, A],
        vec![A],
        vec![B, A, B],
        vec![A, B, B],
        vec![B],
    ];
    let ngram: NGramLM = fit_ngram(&corpus, 2, 0.1, &[0.3, 0.7], V).unwrap();
    let topk = TopKLM::new(&ngram, 3).unwrap();
    run_instance("bigram", &topk, &sw);
}
