//! Exact oracles by enumerating the whole state graph.

use std::collections::{HashMap, VecDeque};

use crate::env::{encode_batch, Environment, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::metrics::ExactDistribution;
use crate::nn::logsumexp;
use crate::objectives::{eps_uniform, HeadSource, LossBatch};
use crate::policy::Policy;

/// Every state reachable from s₀ with its outgoing forward actions.
#[derive(Clone, Debug)]
pub struct StateGraph<S> {
    pub states: Vec<S>,
    pub index: HashMap<S, usize>,
    /// `children[i]` lists `(forward action, child index)`.
    pub children: Vec<Vec<(usize, usize)>>,
    /// Number of legal backward actions of each state.
    pub num_parents: Vec<usize>,
    /// Indices ordered so every parent precedes its children.
    pub topo: Vec<usize>,
}

impl<S: Clone + std::hash::Hash + Eq> StateGraph<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn terminals<'a, E: Environment<State = S>>(&'a self, env: &'a E) -> impl Iterator<Item = usize> + 'a {
        (0..self.states.len()).filter(move |&i| env.is_terminal(&self.states[i]))
    }
}

pub fn enumerate_state_graph<E: Environment>(env: &E, cap: usize) -> Result<StateGraph<E::State>> {
    let n_fwd = env.num_actions();
    let n_bwd = env.num_backward_actions();
    let s0 = env.initial_state();
    let mut states = vec![s0.clone()];
    let mut index = HashMap::new();
    index.insert(s0, 0);
    let mut children: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    let mut mask = vec![false; n_fwd];
    while let Some(i) = queue.pop_front() {
        let s = states[i].clone();
        mask.fill(false);
        env.forward_mask(&s, &mut mask);
        let mut out = Vec::new();
        for a in (0..n_fwd).filter(|&a| mask[a]) {
            let c = env.apply_forward(&s, a);
            let j = match index.get(&c) {
                Some(&j) => j,
                None => {
                    if states.len() >= cap {
                        return Err(Error::CapExceeded {
                            what: "state graph",
                            needed: states.len() as u128 + 1,
                            cap: cap as u128,
                        });
                    }
                    let j = states.len();
                    index.insert(c.clone(), j);
                    states.push(c);
                    queue.push_back(j);
                    j
                }
            };
            out.push((a, j));
        }
        if children.len() <= i {
            children.resize(i + 1, Vec::new());
        }
        children[i] = out;
    }
    children.resize(states.len(), Vec::new());

    let mut bmask = vec![false; n_bwd];
    let num_parents = states
        .iter()
        .map(|s| {
            bmask.fill(false);
            env.backward_mask(s, &mut bmask);
            bmask.iter().filter(|&&m| m).count()
        })
        .collect();

    // Kahn's algorithm
    let mut indeg = vec![0usize; states.len()];
    for ch in &children {
        for &(_, j) in ch {
            indeg[j] += 1;
        }
    }
    let mut topo = Vec::with_capacity(states.len());
    let mut ready: VecDeque<usize> = (0..states.len()).filter(|&i| indeg[i] == 0).collect();
    while let Some(i) = ready.pop_front() {
        topo.push(i);
        for &(_, j) in &children[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.push_back(j);
            }
        }
    }
    if topo.len() != states.len() {
        return Err(Error::Contract("state graph has a cycle".into()));
    }
    Ok(StateGraph { states, index, children, num_parents, topo })
}

/// Target distribution `R(x)/Z` over the enumerated terminal states.
pub fn exact_terminal_distribution<E: Environment>(
    env: &E,
    graph: &StateGraph<E::State>,
) -> Result<ExactDistribution> {
    let mut keys = Vec::new();
    let mut logw = Vec::new();
    for i in graph.terminals(env) {
        keys.push(env.terminal_key(&graph.states[i]));
        logw.push(env.log_reward(&graph.states[i])?);
    }
    ExactDistribution::from_log_weights(keys, &logw)
}

/// Exact log-flows and forward policy for the uniform backward policy.
#[derive(Clone, Debug)]
pub struct ExactFlows {
    pub log_flow: Vec<f64>,
    /// `log_pf[i]` lists `(action, log P_F)` for the children of state `i`.
    pub log_pf: Vec<Vec<(usize, f64)>>,
}

impl ExactFlows {
    pub fn log_z(&self) -> f64 {
        self.log_flow[0]
    }
}

pub fn exact_flows<E: Environment>(env: &E, graph: &StateGraph<E::State>) -> Result<ExactFlows> {
    let n = graph.len();
    let mut log_flow = vec![f64::NEG_INFINITY; n];
    let mut log_pf = vec![Vec::new(); n];
    for &i in graph.topo.iter().rev() {
        let s = &graph.states[i];
        if env.is_terminal(s) {
            log_flow[i] = env.log_reward(s)?;
            continue;
        }
        let edge: Vec<f64> = graph.children[i]
            .iter()
            .map(|&(_, j)| log_flow[j] - (graph.num_parents[j] as f64).ln())
            .collect();
        let f = logsumexp(&edge);
        log_flow[i] = f;
        log_pf[i] = graph.children[i]
            .iter()
            .zip(&edge)
            .map(|(&(a, _), e)| (a, e - f))
            .collect();
    }
    Ok(ExactFlows { log_flow, log_pf })
}

/// Exact terminal marginal of `policy` (mixed with ε-uniform exploration)
/// by forward dynamic programming.
pub fn exact_policy_marginal<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    graph: &StateGraph<E::State>,
    eps: f64,
) -> Result<ExactDistribution> {
    let n_fwd = env.num_actions();
    let inner: Vec<usize> = (0..graph.len()).filter(|&i| !env.is_terminal(&graph.states[i])).collect();
    let mut probs_of: HashMap<usize, Vec<f64>> = HashMap::with_capacity(inner.len());
    let mut mask = vec![false; n_fwd];
    for chunk in inner.chunks(4096) {
        let refs: Vec<&E::State> = chunk.iter().map(|&i| &graph.states[i]).collect();
        let logits = policy.forward_logits(&encode_batch(env, &refs))?;
        for (r, &i) in chunk.iter().enumerate() {
            mask.fill(false);
            env.forward_mask(&graph.states[i], &mut mask);
            probs_of.insert(i, eps_uniform(logits.row(r), &mask, eps)?);
        }
    }
    let mut p = vec![0.0; graph.len()];
    p[0] = 1.0;
    for &i in &graph.topo {
        if let Some(pr) = probs_of.get(&i) {
            for &(a, j) in &graph.children[i] {
                p[j] += p[i] * pr[a];
            }
        }
    }
    let mut keys = Vec::new();
    let mut probs = Vec::new();
    for i in graph.terminals(env) {
        keys.push(env.terminal_key(&graph.states[i]));
        probs.push(p[i]);
    }
    ExactDistribution::from_probs(keys, probs)
}

/// Head values given by exact flows, for the rows of a [`LossBatch`].
pub struct ExactHeads {
    flow: Vec<f64>,
    pf: Vec<Vec<f64>>,
    pb: Vec<Vec<f64>>,
    log_z: f64,
}

impl ExactHeads {
    pub fn new<E: Environment>(
        env: &E,
        graph: &StateGraph<E::State>,
        flows: &ExactFlows,
        batch: &TrajectoryBatch<E::State>,
        loss: &LossBatch,
    ) -> Result<Self> {
        let n_fwd = env.num_actions();
        let n_bwd = env.num_backward_actions();
        let mut flow = Vec::with_capacity(loss.num_rows());
        let mut pf = Vec::with_capacity(loss.num_rows());
        let mut pb = Vec::with_capacity(loss.num_rows());
        for &(b, t) in &loss.rows {
            let s = &batch.states[b][t];
            let i = *graph
                .index
                .get(s)
                .ok_or_else(|| Error::Missing(format!("state {s:?} not in the enumerated graph")))?;
            flow.push(flows.log_flow[i]);
            let mut row = vec![f64::NEG_INFINITY; n_fwd];
            for &(a, v) in &flows.log_pf[i] {
                row[a] = v;
            }
            pf.push(row);
            let mask = env.backward_mask_vec(s);
            let lp = -(graph.num_parents[i].max(1) as f64).ln();
            pb.push((0..n_bwd).map(|k| if mask[k] { lp } else { f64::NEG_INFINITY }).collect());
        }
        Ok(ExactHeads { flow, pf, pb, log_z: flows.log_z() })
    }
}

impl HeadSource for ExactHeads {
    fn log_pf(&self, row: usize, action: usize) -> f64 {
        self.pf[row][action]
    }
    fn log_pb(&self, row: usize, action: usize) -> f64 {
        self.pb[row][action]
    }
    fn log_flow(&self, row: usize) -> f64 {
        self.flow[row]
    }
    fn log_z(&self) -> f64 {
        self.log_z
    }
}
