//! GFlowNet objectives (TB, DB, SubTB, FLDB, MDB) and ε-uniform exploration.
//!
//! Every objective is a weighted sum of squared residuals, each residual a
//! linear combination of policy heads plus a constant:
//! `L = Σ w · (c + Σ coef · head)²`. A [`LossBatch`] holds those residuals for
//! a trajectory batch together with the observations and masks the heads are
//! evaluated on. The same residuals can be evaluated against any
//! [`HeadSource`] (exact oracles, hand-written tables) or differentiated
//! through a [`PolicyNet`] on a tape.
//!
//! The initial-state flow is the global `log Z` head, so sub-trajectories
//! starting at s₀ use `log Z` in place of `log F(s₀)`.

use serde::{Deserialize, Serialize};

use crate::env::{Environment, TrajectoryBatch};
use crate::error::{config, Error, Result};
use crate::nn::{masked_logsumexp, LinearMap, LinearTerm, PolicyNet, Tape, Tensor, Var};
use crate::policy::Policy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Tb,
    Db,
    Subtb,
    Fldb,
    Mdb,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardMode {
    #[default]
    Uniform,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub backward: BackwardMode,
    #[serde(default = "default_penalty")]
    pub terminal_penalty: f64,
}

fn default_lambda() -> f64 {
    0.9
}

fn default_penalty() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(objective: Objective) -> Self {
        LossConfig {
            objective,
            lambda: default_lambda(),
            backward: BackwardMode::Uniform,
            terminal_penalty: default_penalty(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return config(format!("SubTB lambda must be in (0, 1], got {}", self.lambda));
        }
        if !(self.terminal_penalty.is_finite() && self.terminal_penalty >= 0.0) {
            return config("terminal penalty must be finite and nonnegative");
        }
        Ok(())
    }
}

/// A scalar head of the policy network at a given row of a [`LossBatch`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    LogPf { row: usize, action: usize },
    LogPb { row: usize, action: usize },
    LogFlow { row: usize },
    LogZ,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub terms: Vec<(Head, f64)>,
    pub constant: f64,
    pub weight: f64,
}

impl Residual {
    pub fn value(&self, src: &impl HeadSource) -> f64 {
        self.constant + self.terms.iter().map(|(h, c)| c * src.head(*h)).sum::<f64>()
    }
}

/// Values of the heads a residual can refer to.
pub trait HeadSource {
    fn log_pf(&self, row: usize, action: usize) -> f64;
    fn log_pb(&self, row: usize, action: usize) -> f64;
    fn log_flow(&self, row: usize) -> f64;
    fn log_z(&self) -> f64;

    fn head(&self, h: Head) -> f64 {
        match h {
            Head::LogPf { row, action } => self.log_pf(row, action),
            Head::LogPb { row, action } => self.log_pb(row, action),
            Head::LogFlow { row } => self.log_flow(row),
            Head::LogZ => self.log_z(),
        }
    }
}

/// Residuals of one objective on one trajectory batch, plus the network
/// inputs needed to evaluate them.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub residuals: Vec<Residual>,
    /// `(trajectory, step)` of each row; row `r` holds state `states[b][t]`.
    pub rows: Vec<(usize, usize)>,
    pub obs: Tensor,
    /// `rows × n_fwd`; rows without a forward head get an all-true dummy mask.
    pub fwd_mask: Vec<bool>,
    /// `rows × n_bwd`; rows without a backward head get an all-true dummy mask.
    pub bwd_mask: Vec<bool>,
    pub n_fwd: usize,
    pub n_bwd: usize,
    pub backward: BackwardMode,
}

impl LossBatch {
    pub fn new<E: Environment>(
        env: &E,
        batch: &TrajectoryBatch<E::State>,
        cfg: &LossConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_fwd = env.num_actions();
        let n_bwd = env.num_backward_actions();
        let obs_dim = env.obs_dim();

        let mut offsets = Vec::with_capacity(batch.len());
        let mut rows = Vec::new();
        for b in 0..batch.len() {
            offsets.push(rows.len());
            for t in 0..=batch.lengths[b] {
                rows.push((b, t));
            }
        }
        let n_rows = rows.len();
        let mut obs = vec![0.0; n_rows * obs_dim];
        let mut fwd_mask = vec![true; n_rows * n_fwd];
        let mut bwd_mask = vec![true; n_rows * n_bwd];
        // log of the number of legal parents at each row, for uniform P_B
        let mut log_parents = vec![0.0; n_rows];
        for (r, &(b, t)) in rows.iter().enumerate() {
            let s = &batch.states[b][t];
            env.encode_obs(s, &mut obs[r * obs_dim..(r + 1) * obs_dim]);
            if t < batch.lengths[b] {
                env.forward_mask(s, &mut fwd_mask[r * n_fwd..(r + 1) * n_fwd]);
            }
            if t > 0 {
                let m = &mut bwd_mask[r * n_bwd..(r + 1) * n_bwd];
                env.backward_mask(s, m);
                let legal = m.iter().filter(|&&x| x).count();
                if legal == 0 {
                    return Err(Error::Contract(format!("non-initial state without parents: {s:?}")));
                }
                log_parents[r] = (legal as f64).ln();
            }
        }

        for b in 0..batch.len() {
            for t in 0..batch.lengths[b] {
                let a = batch.fwd_action(b, t);
                let r = offsets[b] + t;
                if !fwd_mask[r * n_fwd + a] {
                    return Err(Error::Contract(format!("trajectory {b} step {t} takes masked action {a}")));
                }
            }
            if !batch.log_rewards[b].is_finite() {
                return Err(Error::Numeric(format!("log-reward of trajectory {b} is not finite")));
            }
        }

        let ctx = Ctx { batch, offsets: &offsets, log_parents: &log_parents, cfg };
        let residuals = match cfg.objective {
            Objective::Tb => ctx.tb(),
            Objective::Db => ctx.db(env, false)?,
            Objective::Fldb => ctx.db(env, true)?,
            Objective::Subtb => ctx.subtb(),
            Objective::Mdb => ctx.mdb(env)?,
        };
        Ok(LossBatch {
            residuals,
            obs: Tensor::matrix(n_rows, obs_dim, obs)?,
            rows,
            fwd_mask,
            bwd_mask,
            n_fwd,
            n_bwd,
            backward: cfg.backward,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// `Σ w · r²` against an arbitrary head source.
    pub fn evaluate(&self, src: &impl HeadSource) -> f64 {
        self.residuals
            .iter()
            .map(|r| {
                let v = r.value(src);
                r.weight * v * v
            })
            .sum()
    }

    /// Loss value and gradients for every tensor of `net.params`.
    pub fn loss_and_grad(&self, net: &PolicyNet) -> Result<(f64, Vec<Tensor>)> {
        self.check_net(net)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = net.params.tensors.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = self.build_on_tape(&mut tape, net, &params)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.collect(&params, &tape)?;
        Ok((value, grads))
    }

    /// Loss value only, using the same code path as [`Self::loss_and_grad`].
    pub fn loss(&self, net: &PolicyNet) -> Result<f64> {
        self.check_net(net)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = net.params.tensors.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = self.build_on_tape(&mut tape, net, &params)?;
        Ok(tape.value(loss).item())
    }

    fn check_net(&self, net: &PolicyNet) -> Result<()> {
        let l = net.layout;
        if l.n_fwd != self.n_fwd {
            return Err(Error::Shape(format!("net has {} forward outputs, env {}", l.n_fwd, self.n_fwd)));
        }
        if self.backward == BackwardMode::Learned && l.n_bwd != self.n_bwd {
            return Err(Error::Config("learned backward policy needs a backward head".into()));
        }
        Ok(())
    }

    /// Records the loss on `tape` given parameter leaves for `net`.
    pub fn build_on_tape(&self, tape: &mut Tape, net: &PolicyNet, params: &[Var]) -> Result<Var> {
        let layout = net.layout;
        let width = layout.width();
        let obs = tape.leaf(self.obs.clone());
        let out = net.params.forward_on_tape(tape, params, obs)?;
        let lpf = tape.masked_log_softmax(out, 0, self.n_fwd, self.fwd_mask.clone())?;
        let lpb = if self.backward == BackwardMode::Learned {
            Some(tape.masked_log_softmax(out, layout.bwd_start(), self.n_bwd, self.bwd_mask.clone())?)
        } else {
            None
        };
        let log_z = params[net.params.log_z_index()];
        // inputs: 0 = log P_F, 1 = raw net output, 2 = log Z, 3 = log P_B
        let mut inputs = vec![lpf, out, log_z];
        if let Some(v) = lpb {
            inputs.push(v);
        }
        let mut map = LinearMap::new();
        for res in &self.residuals {
            let terms = res.terms.iter().map(|&(h, coef)| match h {
                Head::LogPf { row, action } => LinearTerm {
                    input: 0,
                    index: (row * self.n_fwd + action) as u32,
                    coef,
                },
                Head::LogFlow { row } => LinearTerm {
                    input: 1,
                    index: (row * width + layout.flow_col()) as u32,
                    coef,
                },
                Head::LogZ => LinearTerm { input: 2, index: 0, coef },
                Head::LogPb { row, action } => LinearTerm {
                    input: 3,
                    index: (row * self.n_bwd + action) as u32,
                    coef,
                },
            });
            map.push_row(terms, res.constant);
        }
        let r = tape.linear(inputs, map)?;
        let sq = tape.square(r);
        let mut reduce = LinearMap::new();
        reduce.push_row(
            self.residuals.iter().enumerate().map(|(i, res)| LinearTerm {
                input: 0,
                index: i as u32,
                coef: res.weight,
            }),
            0.0,
        );
        let total = tape.linear(vec![sq], reduce)?;
        Ok(tape.sum(total))
    }

    /// Plain (tape-free) head values of `net` on this batch.
    pub fn net_heads(&self, net: &PolicyNet) -> Result<NetHeads> {
        self.check_net(net)?;
        let out = net.params.forward(&self.obs)?;
        let l = net.layout;
        let lpf = log_softmax_rows(&out, 0, self.n_fwd, &self.fwd_mask)?;
        let lpb = if self.backward == BackwardMode::Learned {
            Some(log_softmax_rows(&out, l.bwd_start(), self.n_bwd, &self.bwd_mask)?)
        } else {
            None
        };
        Ok(NetHeads {
            lpf,
            lpb,
            n_fwd: self.n_fwd,
            n_bwd: self.n_bwd,
            flow: (0..out.rows()).map(|i| out.at(i, l.flow_col())).collect(),
            log_z: net.params.log_z(),
        })
    }
}

fn log_softmax_rows(out: &Tensor, start: usize, width: usize, mask: &[bool]) -> Result<Vec<f64>> {
    let mut res = vec![f64::NEG_INFINITY; out.rows() * width];
    for i in 0..out.rows() {
        let row = &out.row(i)[start..start + width];
        let m = &mask[i * width..(i + 1) * width];
        let lse = masked_logsumexp(row, m);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!("row {i}: no legal action or non-finite logits")));
        }
        for j in 0..width {
            if m[j] {
                res[i * width + j] = row[j] - lse;
            }
        }
    }
    Ok(res)
}

/// Head values computed by a plain forward pass.
#[derive(Clone, Debug)]
pub struct NetHeads {
    lpf: Vec<f64>,
    lpb: Option<Vec<f64>>,
    n_fwd: usize,
    n_bwd: usize,
    flow: Vec<f64>,
    log_z: f64,
}

impl HeadSource for NetHeads {
    fn log_pf(&self, row: usize, action: usize) -> f64 {
        self.lpf[row * self.n_fwd + action]
    }

    fn log_pb(&self, row: usize, action: usize) -> f64 {
        self.lpb.as_ref().map_or(f64::NAN, |v| v[row * self.n_bwd + action])
    }

    fn log_flow(&self, row: usize) -> f64 {
        self.flow[row]
    }

    fn log_z(&self) -> f64 {
        self.log_z
    }
}

struct Ctx<'a, S> {
    batch: &'a TrajectoryBatch<S>,
    offsets: &'a [usize],
    log_parents: &'a [f64],
    cfg: &'a LossConfig,
}

impl<S: Clone> Ctx<'_, S> {
    fn row(&self, b: usize, t: usize) -> usize {
        self.offsets[b] + t
    }

    /// Adds `log P_F(s_{t+1}|s_t) − log P_B(s_t|s_{t+1})` for step `t`.
    fn push_step(&self, b: usize, t: usize, terms: &mut Vec<(Head, f64)>, constant: &mut f64) {
        let r = self.row(b, t);
        terms.push((Head::LogPf { row: r, action: self.batch.fwd_action(b, t) }, 1.0));
        match self.cfg.backward {
            BackwardMode::Uniform => *constant += self.log_parents[r + 1],
            BackwardMode::Learned => terms.push((
                Head::LogPb { row: r + 1, action: self.batch.bwd_action(b, t) },
                -1.0,
            )),
        }
    }

    /// `+log F(s_t)` with `log Z` at s₀ and `log R` at the terminal state.
    /// Returns the constant contribution.
    fn push_flow(&self, b: usize, t: usize, sign: f64, terms: &mut Vec<(Head, f64)>) -> f64 {
        if t == self.batch.lengths[b] {
            return sign * self.batch.log_rewards[b];
        }
        if t == 0 {
            terms.push((Head::LogZ, sign));
        } else {
            terms.push((Head::LogFlow { row: self.row(b, t) }, sign));
        }
        0.0
    }

    fn tb(&self) -> Vec<Residual> {
        let n = self.batch.len() as f64;
        (0..self.batch.len())
            .map(|b| {
                let mut terms = vec![(Head::LogZ, 1.0)];
                let mut constant = -self.batch.log_rewards[b];
                for t in 0..self.batch.lengths[b] {
                    self.push_step(b, t, &mut terms, &mut constant);
                }
                Residual { terms, constant, weight: 1.0 / n }
            })
            .collect()
    }

    fn db<E: Environment<State = S>>(&self, env: &E, forward_looking: bool) -> Result<Vec<Residual>> {
        let total: usize = self.batch.lengths.iter().sum();
        let mut out = Vec::with_capacity(total);
        for b in 0..self.batch.len() {
            let len = self.batch.lengths[b];
            for t in 0..len {
                let mut terms = Vec::with_capacity(4);
                let mut constant = self.push_flow(b, t, 1.0, &mut terms);
                self.push_step(b, t, &mut terms, &mut constant);
                constant += self.push_flow(b, t + 1, -1.0, &mut terms);
                if forward_looking {
                    let (s, s2) = (&self.batch.states[b][t], &self.batch.states[b][t + 1]);
                    let (e, e2) = (env.energy(s), env.energy(s2));
                    if t + 1 == len {
                        // log F̃(x) = log R(x) + E(x)
                        constant -= e2;
                    }
                    constant += e2 - e;
                }
                let terminal = t + 1 == len;
                let mut weight = 1.0 / total as f64;
                if terminal {
                    weight *= self.cfg.terminal_penalty;
                }
                out.push(Residual { terms, constant, weight });
            }
        }
        Ok(out)
    }

    fn subtb(&self) -> Vec<Residual> {
        let n = self.batch.len() as f64;
        let lambda = self.cfg.lambda;
        let mut out = Vec::new();
        for b in 0..self.batch.len() {
            let len = self.batch.lengths[b];
            let mut norm = 0.0;
            let start = out.len();
            for j in 0..len {
                for k in j + 1..=len {
                    let mut terms = Vec::with_capacity(2 * (k - j) + 2);
                    let mut constant = self.push_flow(b, j, 1.0, &mut terms);
                    for t in j..k {
                        self.push_step(b, t, &mut terms, &mut constant);
                    }
                    constant += self.push_flow(b, k, -1.0, &mut terms);
                    let w = lambda.powi((k - j) as i32);
                    norm += w;
                    out.push(Residual { terms, constant, weight: w });
                }
            }
            for r in &mut out[start..] {
                r.weight /= norm * n;
            }
        }
        out
    }

    fn mdb<E: Environment<State = S>>(&self, env: &E) -> Result<Vec<Residual>> {
        let Some(stop) = env.stop_action() else {
            return Err(Error::Unsupported(
                "modified detailed balance needs an environment where every state can stop".into(),
            ));
        };
        let mut out = Vec::new();
        for b in 0..self.batch.len() {
            let len = self.batch.lengths[b];
            for t in 0..len {
                let a = self.batch.fwd_action(b, t);
                if a == stop {
                    continue;
                }
                let (s, s2) = (&self.batch.states[b][t], &self.batch.states[b][t + 1]);
                if !env.forward_mask_vec(s)[stop] {
                    return Err(Error::Unsupported(format!(
                        "modified detailed balance needs every state to be stoppable (trajectory {b}, step {t})"
                    )));
                }
                let delta = env.delta_log_reward(s, a, s2)?;
                let r = self.row(b, t);
                let mut terms = vec![
                    (Head::LogPf { row: r + 1, action: stop }, 1.0),
                    (Head::LogPf { row: r, action: stop }, -1.0),
                ];
                let mut constant = -delta;
                self.push_step(b, t, &mut terms, &mut constant);
                let weight = if env.is_terminal(s2) { self.cfg.terminal_penalty } else { 1.0 };
                out.push(Residual { terms, constant, weight });
            }
        }
        let n = out.len().max(1) as f64;
        for r in &mut out {
            r.weight /= n;
        }
        Ok(out)
    }
}

/// `(1−ε)·softmax(masked logits) + ε·uniform(legal)`.
pub fn eps_uniform(logits: &[f64], mask: &[bool], eps: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eps) {
        return config(format!("exploration epsilon must be in [0, 1], got {eps}"));
    }
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!("{} logits for {} mask entries", logits.len(), mask.len())));
    }
    let legal = mask.iter().filter(|&&m| m).count();
    if legal == 0 {
        return Err(Error::Contract("no legal action".into()));
    }
    if logits.iter().zip(mask).any(|(l, &m)| m && !l.is_finite()) {
        return Err(Error::Numeric("non-finite logit on a legal action".into()));
    }
    let lse = masked_logsumexp(logits, mask);
    let u = 1.0 / legal as f64;
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { (1.0 - eps) * (l - lse).exp() + eps * u } else { 0.0 })
        .collect())
}

/// Per-trajectory `log P_F(τ)` and `log P_B(τ | x)` under `policy`, with
/// uniform `P_B` when the policy has no backward head.
pub fn trajectory_log_probs<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    batch: &TrajectoryBatch<E::State>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_fwd = env.num_actions();
    let n_bwd = env.num_backward_actions();
    let mut fwd_states = Vec::new();
    let mut bwd_states = Vec::new();
    for b in 0..batch.len() {
        for t in 0..batch.lengths[b] {
            fwd_states.push(&batch.states[b][t]);
            bwd_states.push(&batch.states[b][t + 1]);
        }
    }
    let fwd_logits = policy.forward_logits(&crate::env::encode_batch(env, &fwd_states))?;
    let bwd_logits = policy.backward_logits(&crate::env::encode_batch(env, &bwd_states))?;
    let mut log_pf = vec![0.0; batch.len()];
    let mut log_pb = vec![0.0; batch.len()];
    let mut fm = vec![false; n_fwd];
    let mut bm = vec![false; n_bwd];
    let mut i = 0;
    for b in 0..batch.len() {
        for t in 0..batch.lengths[b] {
            env.forward_mask(fwd_states[i], &mut fm);
            let row = fwd_logits.row(i);
            let a = batch.fwd_action(b, t);
            let lse = masked_logsumexp(row, &fm);
            if !fm[a] || !lse.is_finite() {
                return Err(Error::Numeric(format!("log P_F undefined at trajectory {b} step {t}")));
            }
            log_pf[b] += row[a] - lse;

            env.backward_mask(bwd_states[i], &mut bm);
            let ba = batch.bwd_action(b, t);
            let legal = bm.iter().filter(|&&m| m).count();
            if !bm[ba] {
                return Err(Error::Contract(format!("backward action {ba} is masked")));
            }
            log_pb[b] += match &bwd_logits {
                None => -(legal as f64).ln(),
                Some(l) => l.row(i)[ba] - masked_logsumexp(l.row(i), &bm),
            };
            i += 1;
        }
    }
    Ok((log_pf, log_pb))
}
