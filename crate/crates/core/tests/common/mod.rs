#![allow(dead_code)]

use std::sync::Arc;

use gflownet::env::dag::{generate_er_dataset, DagEnv, ScoreKind};
use gflownet::env::hypergrid::{Hypergrid, HypergridParams};
use gflownet::env::ising::{IsingEnv, IsingParams};
use gflownet::env::phylo::{PhyloEnv, PhyloParams, SpeciesData};
use gflownet::env::sequence::{generate_modes, ModeSet, SeqScheme, SequenceEnv};
use gflownet::env::{forward_rollout, Environment, TrajectoryBatch};
use gflownet::nn::{Activation, HeadLayout, PolicyNet, Tensor};
use gflownet::objectives::{BackwardMode, HeadSource, LossBatch, LossConfig, Objective};
use gflownet::oracle::{enumerate_state_graph, exact_flows, ExactHeads};
use gflownet::policy::UniformPolicy;
use gflownet::rng::{categorical, RngKey};

pub fn grid(d: usize, h: usize) -> Hypergrid {
    Hypergrid::new(HypergridParams::new(d, h)).unwrap()
}

pub fn bitseq(scheme: SeqScheme, n: usize, k: usize) -> SequenceEnv {
    let modes = if n % 8 == 0 {
        generate_modes(n, 3.0, RngKey::new(11)).unwrap()
    } else {
        // the generator needs 8 | n; shorter modes are the seed-word prefixes
        let modes = ["0000", "1111", "1100", "0011"].iter().map(|w| w.bytes().map(|b| b - b'0').collect()).collect();
        ModeSet { modes, beta: 3.0 }
    };
    SequenceEnv::bitseq(scheme, n, k, Arc::new(modes)).unwrap()
}

pub fn dag(d: usize, seed: u64) -> DagEnv {
    let data = generate_er_dataset(d, 1.0, 100, 0.1, seed).unwrap();
    DagEnv::from_dataset(&data, ScoreKind::Lingauss { prior_var: 1.0, obs_var: 0.1 }).unwrap()
}

pub fn ising(n: usize) -> IsingEnv {
    IsingEnv::new(IsingParams::lattice(n, 0.2).unwrap())
}

pub fn phylo(n: usize, sites: usize, seed: u64) -> PhyloEnv {
    let data = SpeciesData::synthetic(n, sites, "ACGT", RngKey::new(seed)).unwrap();
    PhyloEnv::new(Arc::new(data), PhyloParams::default()).unwrap()
}

/// Random walk of `transitions` forward steps (restarting at s₀ after each
/// terminal). At every step the forward action is undone by the backward
/// action the environment reports, a random legal backward action is redone
/// by the reported forward action, and both masks are checked for
/// consistency. Returns the number of transitions checked.
pub fn round_trip_fuzz<E: Environment>(env: &E, transitions: usize, key: RngKey) -> Result<usize, String> {
    let mut rng = key.rng();
    let mut s = env.initial_state();
    let mut checked = 0;
    while checked < transitions {
        if env.is_terminal(&s) {
            if env.forward_mask_vec(&s).iter().any(|&m| m) {
                return Err(format!("terminal state {s:?} has legal forward actions"));
            }
            s = env.initial_state();
            continue;
        }
        let fm = env.forward_mask_vec(&s);
        let legal: Vec<f64> = fm.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        if legal.iter().sum::<f64>() == 0.0 {
            return Err(format!("non-terminal state {s:?} has no legal action"));
        }
        let a = categorical(&mut rng, &legal);
        let next = env.try_forward(&s, a).map_err(|e| e.to_string())?;
        let b = env.backward_action(&s, a, &next).map_err(|e| e.to_string())?;
        if !env.backward_mask_vec(&next)[b] {
            return Err(format!("reported backward action {b} is masked in {next:?}"));
        }
        let back = env.try_backward(&next, b).map_err(|e| e.to_string())?;
        if back != s {
            return Err(format!("backward {b} from {next:?} gave {back:?}, expected {s:?}"));
        }
        if env.forward_action(&next, b, &s).map_err(|e| e.to_string())? != a {
            return Err(format!("forward_action does not invert backward action {b}"));
        }

        let bm = env.backward_mask_vec(&next);
        let bl: Vec<f64> = bm.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let b2 = categorical(&mut rng, &bl);
        let parent = env.try_backward(&next, b2).map_err(|e| e.to_string())?;
        let a2 = env.forward_action(&next, b2, &parent).map_err(|e| e.to_string())?;
        if !env.forward_mask_vec(&parent)[a2] || env.apply_forward(&parent, a2) != next {
            return Err(format!("forward action {a2} does not redo backward action {b2}"));
        }
        if env.backward_action(&parent, a2, &next).map_err(|e| e.to_string())? != b2 {
            return Err(format!("backward_action does not invert forward action {a2}"));
        }
        s = next;
        checked += 1;
    }
    Ok(checked)
}

/// Log-flow shifted by the intermediate energy, the forward-looking
/// parameterization of exact flows.
pub struct ForwardLooking<'a> {
    pub inner: &'a ExactHeads,
    pub energy: Vec<f64>,
}

impl HeadSource for ForwardLooking<'_> {
    fn log_pf(&self, row: usize, action: usize) -> f64 {
        self.inner.log_pf(row, action)
    }
    fn log_pb(&self, row: usize, action: usize) -> f64 {
        self.inner.log_pb(row, action)
    }
    fn log_flow(&self, row: usize) -> f64 {
        self.inner.log_flow(row) + self.energy[row]
    }
    fn log_z(&self) -> f64 {
        self.inner.log_z()
    }
}

/// Uniform-policy trajectories used as the probe batch for oracle checks.
pub fn probe_batch<E: Environment>(env: &E, n: usize, seed: u64) -> TrajectoryBatch<E::State> {
    forward_rollout(env, &UniformPolicy { n_fwd: env.num_actions() }, n, RngKey::new(seed), 0.0).unwrap()
}

/// Loss of `objective` when every head is replaced by the exact flows of
/// the enumerated state graph (uniform `P_B`).
pub fn exact_balance_loss<E: Environment>(env: &E, objective: Objective, cap: usize) -> f64 {
    let graph = enumerate_state_graph(env, cap).unwrap();
    let flows = exact_flows(env, &graph).expect("exact flows");
    let batch = probe_batch(env, 64, 5);
    let lb = LossBatch::new(env, &batch, &LossConfig::new(objective)).expect("loss batch");
    let heads = ExactHeads::new(env, &graph, &flows, &batch, &lb).unwrap();
    if objective == Objective::Fldb {
        let energy = lb.rows.iter().map(|&(b, t)| env.energy(&batch.states[b][t])).collect();
        lb.evaluate(&ForwardLooking { inner: &heads, energy })
    } else {
        lb.evaluate(&heads)
    }
}

/// Smooth small network with nonzero `log Z` for gradient checks.
pub fn smooth_net<E: Environment>(env: &E, learned_backward: bool, seed: u64) -> PolicyNet {
    let n_bwd = if learned_backward { env.num_backward_actions() } else { 0 };
    let layout = HeadLayout { n_fwd: env.num_actions(), n_bwd };
    PolicyNet::new(env.obs_dim(), &[8, 6], layout, Activation::Tanh, 0.3, RngKey::new(seed)).unwrap()
}

/// Largest violation of `|g − g_fd| ≤ rel · (|g| + |g_fd|) + 1e-9 + noise`
/// over all parameters, using central differences with step `h`, as a ratio
/// to the allowed error (≤ 1 passes). `noise = 10 ε |L| / h` is the rounding
/// floor of the difference quotient.
pub fn finite_difference_violation<E: Environment>(
    env: &E,
    objective: Objective,
    backward: BackwardMode,
    seed: u64,
    rel: f64,
) -> f64 {
    let net = smooth_net(env, backward == BackwardMode::Learned, seed);
    let batch = forward_rollout(env, &net, 6, RngKey::new(seed + 1), 0.2).unwrap();
    let mut cfg = LossConfig::new(objective);
    cfg.backward = backward;
    cfg.terminal_penalty = 1.5;
    let lb = LossBatch::new(env, &batch, &cfg).unwrap();
    let (loss, grads) = lb.loss_and_grad(&net).unwrap();
    let h = 1e-5;
    // rounding error of a central difference on a loss of this magnitude
    let noise = 10.0 * f64::EPSILON * loss.abs() / h;
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let eval = |delta: f64| {
                let mut n = net.clone();
                n.params.tensors[ti].data_mut()[k] += delta;
                lb.loss(&n).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = g.data()[k];
            let allowed = rel * (ad.abs() + fd.abs()) + 1e-9 + noise;
            worst = worst.max((ad - fd).abs() / allowed);
        }
    }
    worst
}

pub fn tensor_finite(t: &Tensor) -> bool {
    t.data().iter().all(|x| x.is_finite())
}
