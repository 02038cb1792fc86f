//! Stateless, vectorized environment contract.
//!
//! An [`Environment`] value is the immutable configuration of a construction
//! process (the "params"); all mutable data lives in [`EnvState`] values that
//! are passed in and returned explicitly. Forward actions build objects,
//! backward actions take them apart, and every transition that enters a
//! terminal state emits that state's log-reward (all other transitions emit 0).
//!
//! Environments that let the agent stop at will expose the stop action as the
//! last forward index and an "un-stop" backward action as the last backward
//! index; a terminal state's only legal backward action is the un-stop.

use std::fmt::Debug;
use std::hash::Hash;

use crate::error::{config, contract, Error, Result};
use crate::nn::Tensor;
use crate::objectives::eps_uniform;
use crate::policy::Policy;
use crate::rng::{categorical, RngKey};

pub mod dag;
pub mod hypergrid;
pub mod ising;
pub mod phylo;
pub mod sequence;

/// Reserved action taken by instances that are already done.
pub const PAD_ACTION: usize = usize::MAX;

pub trait Environment: Send + Sync {
    type State: Clone + Debug + PartialEq + Eq + Hash + Send + Sync;

    fn num_actions(&self) -> usize;
    fn num_backward_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Longest possible forward trajectory, stop transition included.
    fn max_steps(&self) -> usize;

    fn stop_action(&self) -> Option<usize> {
        None
    }

    fn initial_state(&self) -> Self::State;
    fn is_terminal(&self, s: &Self::State) -> bool;

    fn is_initial(&self, s: &Self::State) -> bool {
        *s == self.initial_state()
    }

    /// Writes legality of every forward action. Terminal states have none.
    fn forward_mask(&self, s: &Self::State, out: &mut [bool]);
    /// Writes legality of every backward action. The initial state has none.
    fn backward_mask(&self, s: &Self::State, out: &mut [bool]);

    /// Applies a forward action the caller has checked against the mask.
    fn apply_forward(&self, s: &Self::State, action: usize) -> Self::State;
    /// Applies a backward action the caller has checked against the mask.
    fn apply_backward(&self, s: &Self::State, action: usize) -> Self::State;

    /// Backward action that undoes `action` taken in `s` (which led to `next`).
    fn backward_action(&self, s: &Self::State, action: usize, next: &Self::State) -> Result<usize>;
    /// Forward action that re-does backward `action` taken in `child` (which led to `parent`).
    fn forward_action(&self, child: &Self::State, action: usize, parent: &Self::State)
        -> Result<usize>;

    /// Log-reward of the object `s` represents. Environments with a stop
    /// action define it for every state; the others only for terminal ones.
    fn log_reward(&self, s: &Self::State) -> Result<f64>;

    /// Intermediate energy used by forward-looking objectives, `E(s₀) = 0`.
    fn energy(&self, _s: &Self::State) -> f64 {
        0.0
    }

    /// `log R(next) − log R(s)` for a forward transition between two
    /// stoppable states.
    fn delta_log_reward(&self, s: &Self::State, _action: usize, next: &Self::State) -> Result<f64> {
        Ok(self.log_reward(next)? - self.log_reward(s)?)
    }

    fn encode_obs(&self, s: &Self::State, out: &mut [f64]);

    /// Canonical byte encoding of a terminal object.
    fn terminal_key(&self, s: &Self::State) -> Vec<u8>;

    fn forward_mask_vec(&self, s: &Self::State) -> Vec<bool> {
        let mut m = vec![false; self.num_actions()];
        self.forward_mask(s, &mut m);
        m
    }

    fn backward_mask_vec(&self, s: &Self::State) -> Vec<bool> {
        let mut m = vec![false; self.num_backward_actions()];
        self.backward_mask(s, &mut m);
        m
    }

    fn obs_vec(&self, s: &Self::State) -> Vec<f64> {
        let mut o = vec![0.0; self.obs_dim()];
        self.encode_obs(s, &mut o);
        o
    }

    /// Checked forward transition.
    fn try_forward(&self, s: &Self::State, action: usize) -> Result<Self::State> {
        if self.is_terminal(s) {
            return contract("forward step from a terminal state");
        }
        if action >= self.num_actions() || !self.forward_mask_vec(s)[action] {
            return contract(format!("illegal forward action {action} in {s:?}"));
        }
        Ok(self.apply_forward(s, action))
    }

    /// Checked backward transition.
    fn try_backward(&self, s: &Self::State, action: usize) -> Result<Self::State> {
        if self.is_initial(s) {
            return contract("backward step from the initial state");
        }
        if action >= self.num_backward_actions() || !self.backward_mask_vec(s)[action] {
            return contract(format!("illegal backward action {action} in {s:?}"));
        }
        Ok(self.apply_backward(s, action))
    }
}

/// Batch of per-instance construction states.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState<S> {
    pub states: Vec<S>,
    pub is_terminal: Vec<bool>,
    pub step_count: Vec<usize>,
}

impl<S> EnvState<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// Whether any instance entered a terminal state, i.e. rewards were computed.
    pub rewards_evaluated: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult<S> {
    pub obs: Tensor,
    pub state: EnvState<S>,
    pub log_reward: Vec<f64>,
    pub done: Vec<bool>,
    pub info: StepInfo,
}

pub fn encode_batch<E: Environment>(env: &E, states: &[&E::State]) -> Tensor {
    let d = env.obs_dim();
    let mut data = vec![0.0; states.len() * d];
    for (row, s) in data.chunks_mut(d.max(1)).zip(states) {
        env.encode_obs(s, row);
    }
    Tensor::matrix(states.len(), d, data).expect("obs shape")
}

fn encode_all<E: Environment>(env: &E, states: &[E::State]) -> Tensor {
    let refs: Vec<&E::State> = states.iter().collect();
    encode_batch(env, &refs)
}

/// Puts `num_envs` instances in the initial state.
pub fn reset<E: Environment>(
    env: &E,
    num_envs: usize,
    _key: RngKey,
) -> Result<(Tensor, EnvState<E::State>)> {
    if num_envs == 0 {
        return config("num_envs must be at least 1");
    }
    let s0 = env.initial_state();
    let states = vec![s0; num_envs];
    let obs = encode_all(env, &states);
    Ok((
        obs,
        EnvState {
            states,
            is_terminal: vec![false; num_envs],
            step_count: vec![0; num_envs],
        },
    ))
}

/// Forward step for every instance. Done instances are absorbing and ignore
/// their action; live instances must take a legal one.
pub fn step<E: Environment>(
    env: &E,
    state: &EnvState<E::State>,
    actions: &[usize],
) -> Result<StepResult<E::State>> {
    if actions.len() != state.len() {
        return Err(Error::Shape(format!(
            "{} actions for {} instances",
            actions.len(),
            state.len()
        )));
    }
    let mut next = state.clone();
    let mut entering = Vec::new();
    for i in 0..state.len() {
        if state.is_terminal[i] {
            continue;
        }
        next.states[i] = env.try_forward(&state.states[i], actions[i])?;
        next.step_count[i] += 1;
        if env.is_terminal(&next.states[i]) {
            next.is_terminal[i] = true;
            entering.push(i);
        }
    }
    let mut log_reward = vec![0.0; state.len()];
    let rewards_evaluated = !entering.is_empty();
    if rewards_evaluated {
        for &i in &entering {
            log_reward[i] = env.log_reward(&next.states[i])?;
        }
    }
    Ok(StepResult {
        obs: encode_all(env, &next.states),
        done: next.is_terminal.clone(),
        state: next,
        log_reward,
        info: StepInfo { rewards_evaluated },
    })
}

/// Backward step for every instance; `PAD_ACTION` leaves an instance as is.
pub fn backward_step<E: Environment>(
    env: &E,
    state: &EnvState<E::State>,
    bwd_actions: &[usize],
) -> Result<StepResult<E::State>> {
    if bwd_actions.len() != state.len() {
        return Err(Error::Shape(format!(
            "{} backward actions for {} instances",
            bwd_actions.len(),
            state.len()
        )));
    }
    let mut next = state.clone();
    for (i, &b) in bwd_actions.iter().enumerate() {
        if b == PAD_ACTION {
            continue;
        }
        next.states[i] = env.try_backward(&state.states[i], b)?;
        next.step_count[i] = next.step_count[i].saturating_sub(1);
        next.is_terminal[i] = env.is_terminal(&next.states[i]);
    }
    Ok(StepResult {
        obs: encode_all(env, &next.states),
        done: next.is_terminal.clone(),
        state: next,
        log_reward: vec![0.0; state.len()],
        info: StepInfo::default(),
    })
}

pub fn get_backward_actions<E: Environment>(
    env: &E,
    state: &EnvState<E::State>,
    actions: &[usize],
    next: &EnvState<E::State>,
) -> Result<Vec<usize>> {
    (0..state.len())
        .map(|i| {
            if state.is_terminal[i] {
                Ok(PAD_ACTION)
            } else {
                env.backward_action(&state.states[i], actions[i], &next.states[i])
            }
        })
        .collect()
}

/// Row-major `B × num_actions` legality; done instances have no legal action.
pub fn action_mask<E: Environment>(env: &E, state: &EnvState<E::State>) -> Vec<bool> {
    let n = env.num_actions();
    let mut out = vec![false; state.len() * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        if !state.is_terminal[i] {
            env.forward_mask(&state.states[i], row);
        }
    }
    out
}

pub fn backward_action_mask<E: Environment>(env: &E, state: &EnvState<E::State>) -> Vec<bool> {
    let n = env.num_backward_actions();
    let mut out = vec![false; state.len() * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        env.backward_mask(&state.states[i], row);
    }
    out
}

/// Padded batch of complete trajectories in forward orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch<S> {
    /// `states[b]` has `lengths[b] + 1` entries from s₀ to the terminal state.
    pub states: Vec<Vec<S>>,
    /// `B × max_len`, `PAD_ACTION` past each length.
    pub fwd_actions: Vec<usize>,
    pub bwd_actions: Vec<usize>,
    pub log_rewards: Vec<f64>,
    pub lengths: Vec<usize>,
    /// `B × max_len`, true on padding.
    pub pad_mask: Vec<bool>,
    pub max_len: usize,
}

impl<S: Clone> TrajectoryBatch<S> {
    fn empty(batch: usize, max_len: usize) -> Self {
        TrajectoryBatch {
            states: vec![Vec::new(); batch],
            fwd_actions: vec![PAD_ACTION; batch * max_len],
            bwd_actions: vec![PAD_ACTION; batch * max_len],
            log_rewards: vec![0.0; batch],
            lengths: vec![0; batch],
            pad_mask: vec![true; batch * max_len],
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn fwd_action(&self, b: usize, t: usize) -> usize {
        self.fwd_actions[b * self.max_len + t]
    }

    pub fn bwd_action(&self, b: usize, t: usize) -> usize {
        self.bwd_actions[b * self.max_len + t]
    }

    pub fn terminal(&self, b: usize) -> &S {
        self.states[b].last().expect("non-empty trajectory")
    }

    pub fn terminals(&self) -> impl Iterator<Item = &S> {
        self.states.iter().map(|s| s.last().expect("non-empty trajectory"))
    }

    fn set_step(&mut self, b: usize, t: usize, fwd: usize, bwd: usize) {
        let i = b * self.max_len + t;
        self.fwd_actions[i] = fwd;
        self.bwd_actions[i] = bwd;
        self.pad_mask[i] = false;
    }

    /// Concatenates two batches with the same padding length.
    pub fn concat(mut self, other: TrajectoryBatch<S>) -> Result<Self> {
        if self.max_len != other.max_len {
            return Err(Error::Shape("trajectory batches with different padding".into()));
        }
        self.states.extend(other.states);
        self.fwd_actions.extend(other.fwd_actions);
        self.bwd_actions.extend(other.bwd_actions);
        self.log_rewards.extend(other.log_rewards);
        self.lengths.extend(other.lengths);
        self.pad_mask.extend(other.pad_mask);
        Ok(self)
    }
}

fn check_logits(logits: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if logits.rows() != rows || logits.cols() != cols {
        return Err(Error::Shape(format!(
            "policy returned {:?}, expected {rows}×{cols}",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("policy produced non-finite logits".into()));
    }
    Ok(())
}

/// Samples `num_envs` complete trajectories from s₀ with the policy mixed
/// with ε-uniform exploration over legal actions.
pub fn forward_rollout<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    num_envs: usize,
    key: RngKey,
    exploration_eps: f64,
) -> Result<TrajectoryBatch<E::State>> {
    if num_envs == 0 {
        return config("num_envs must be at least 1");
    }
    let max_len = env.max_steps();
    let n_act = env.num_actions();
    let mut rng = key.rng();
    let mut batch = TrajectoryBatch::empty(num_envs, max_len);
    let s0 = env.initial_state();
    for traj in batch.states.iter_mut() {
        traj.push(s0.clone());
    }
    let mut live: Vec<usize> = (0..num_envs).collect();
    let mut t = 0;
    let mut mask = vec![false; n_act];
    while !live.is_empty() {
        if t >= max_len {
            return contract(format!("trajectory exceeded max_steps = {max_len}"));
        }
        let current: Vec<&E::State> = live.iter().map(|&b| batch.states[b].last().unwrap()).collect();
        let obs = encode_batch(env, &current);
        let logits = policy.forward_logits(&obs)?;
        check_logits(&logits, live.len(), n_act)?;
        let mut still_live = Vec::with_capacity(live.len());
        for (r, &b) in live.iter().enumerate() {
            let s = batch.states[b].last().unwrap().clone();
            mask.fill(false);
            env.forward_mask(&s, &mut mask);
            let probs = eps_uniform(logits.row(r), &mask, exploration_eps)?;
            let a = categorical(&mut rng, &probs);
            let next = env.apply_forward(&s, a);
            let bwd = env.backward_action(&s, a, &next)?;
            batch.set_step(b, t, a, bwd);
            batch.lengths[b] += 1;
            if env.is_terminal(&next) {
                batch.log_rewards[b] = env.log_reward(&next)?;
            } else {
                still_live.push(b);
            }
            batch.states[b].push(next);
        }
        live = still_live;
        t += 1;
    }
    Ok(batch)
}

/// Samples trajectories backwards from terminal states to s₀ and returns
/// them in forward orientation with the terminal log-rewards attached.
pub fn backward_rollout<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    terminal_states: &[E::State],
    key: RngKey,
) -> Result<TrajectoryBatch<E::State>> {
    let n = terminal_states.len();
    let max_len = env.max_steps();
    let n_bwd = env.num_backward_actions();
    let mut rng = key.rng();
    let mut rev_states: Vec<Vec<E::State>> = Vec::with_capacity(n);
    let mut rev_fwd: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut rev_bwd: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut log_rewards = Vec::with_capacity(n);
    for x in terminal_states {
        if !env.is_terminal(x) {
            return contract("backward rollout from a non-terminal state");
        }
        rev_states.push(vec![x.clone()]);
        log_rewards.push(env.log_reward(x)?);
    }
    let mut live: Vec<usize> = (0..n).filter(|&b| !env.is_initial(&rev_states[b][0])).collect();
    let mut mask = vec![false; n_bwd];
    while !live.is_empty() {
        let current: Vec<&E::State> = live.iter().map(|&b| rev_states[b].last().unwrap()).collect();
        let obs = encode_batch(env, &current);
        let logits = policy.backward_logits(&obs)?;
        if let Some(l) = &logits {
            check_logits(l, live.len(), n_bwd)?;
        }
        let zeros = vec![0.0; n_bwd];
        let mut still_live = Vec::with_capacity(live.len());
        for (r, &b) in live.iter().enumerate() {
            if rev_fwd[b].len() >= max_len {
                return contract(format!("backward trajectory exceeded max_steps = {max_len}"));
            }
            let s = rev_states[b].last().unwrap().clone();
            mask.fill(false);
            env.backward_mask(&s, &mut mask);
            let row = logits.as_ref().map_or(&zeros[..], |l| l.row(r));
            let probs = eps_uniform(row, &mask, 0.0)?;
            let bwd = categorical(&mut rng, &probs);
            let parent = env.apply_backward(&s, bwd);
            let fwd = env.forward_action(&s, bwd, &parent)?;
            rev_fwd[b].push(fwd);
            rev_bwd[b].push(bwd);
            let at_start = env.is_initial(&parent);
            rev_states[b].push(parent);
            if !at_start {
                still_live.push(b);
            }
        }
        live = still_live;
    }
    let mut batch = TrajectoryBatch::empty(n, max_len);
    for b in 0..n {
        let len = rev_fwd[b].len();
        let mut states = std::mem::take(&mut rev_states[b]);
        states.reverse();
        batch.states[b] = states;
        batch.lengths[b] = len;
        for t in 0..len {
            batch.set_step(b, t, rev_fwd[b][len - 1 - t], rev_bwd[b][len - 1 - t]);
        }
    }
    batch.log_rewards = log_rewards;
    Ok(batch)
}
