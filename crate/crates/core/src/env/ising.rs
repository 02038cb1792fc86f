//! Ising spin-assignment environment and the energy-based GFlowNet loop:
//! heat-bath data generation, contrastive-divergence updates of `J_φ` and
//! the K-step back-and-forth Metropolis–Hastings proposal.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{backward_rollout, encode_batch, forward_rollout, Environment};
use crate::error::{config, contract, Error, Result};
use crate::metrics::ExactDistribution;
use crate::nn::{masked_logsumexp, Activation, AdamConfig, AdamState, HeadLayout, PolicyNet, Tensor};
use crate::objectives::{eps_uniform, LossBatch, LossConfig, Objective};
use crate::policy::Policy;
use crate::rng::{categorical, uniform, RngKey};

/// Largest lattice whose Gibbs distribution is enumerated exactly.
pub const MAX_EXACT_SITES: usize = 20;

/// Adjacency matrix of the `n × n` toroidal lattice, `D × D` row-major.
pub fn torus_adjacency(n: usize) -> Vec<f64> {
    let d = n * n;
    let mut a = vec![0.0; d * d];
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            for j in [((r + 1) % n) * n + c, r * n + (c + 1) % n] {
                if i != j {
                    a[i * d + j] = 1.0;
                    a[j * d + i] = 1.0;
                }
            }
        }
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsingParams {
    pub n: usize,
    /// Symmetric `D × D` couplings with zero diagonal.
    pub j: Vec<f64>,
}

impl IsingParams {
    pub fn lattice(n: usize, sigma: f64) -> Result<Self> {
        if n < 2 {
            return config("Ising lattice side must be at least 2");
        }
        let j = torus_adjacency(n).into_iter().map(|a| sigma * a).collect();
        Ok(IsingParams { n, j })
    }

    pub fn new(n: usize, j: Vec<f64>) -> Result<Self> {
        let d = n * n;
        if n == 0 || j.len() != d * d {
            return Err(Error::Shape(format!("couplings need {d}×{d} entries, got {}", j.len())));
        }
        for a in 0..d {
            if j[a * d + a] != 0.0 {
                return config("couplings must have a zero diagonal");
            }
            for b in 0..a {
                if (j[a * d + b] - j[b * d + a]).abs() > 1e-12 {
                    return config("couplings must be symmetric");
                }
            }
        }
        Ok(IsingParams { n, j })
    }

    pub fn sites(&self) -> usize {
        self.n * self.n
    }

    /// Local field `Σ_j J_ij x_j`.
    pub fn field(&self, x: &[i8], i: usize) -> f64 {
        let d = self.sites();
        self.j[i * d..(i + 1) * d].iter().zip(x).map(|(&w, &s)| w * s as f64).sum()
    }
}

/// `ℰ_J(x) = −xᵀ J x`.
pub fn ising_energy(x: &[i8], j: &[f64]) -> f64 {
    let d = x.len();
    let mut e = 0.0;
    for a in 0..d {
        let xa = x[a] as f64;
        let row = &j[a * d..(a + 1) * d];
        e -= xa * row.iter().zip(x).map(|(&w, &s)| w * s as f64).sum::<f64>();
    }
    e
}

/// Spins in `{−1, +1}` with `0` for an unassigned site.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpinState {
    pub spins: Vec<i8>,
    pub assigned: usize,
}

impl SpinState {
    pub fn complete(spins: Vec<i8>) -> Result<Self> {
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return contract("a complete configuration holds only ±1 spins");
        }
        let assigned = spins.len();
        Ok(SpinState { spins, assigned })
    }
}

#[derive(Clone, Debug)]
pub struct IsingEnv {
    pub params: Arc<IsingParams>,
}

impl IsingEnv {
    pub fn new(params: IsingParams) -> Self {
        IsingEnv { params: Arc::new(params) }
    }

    pub fn sites(&self) -> usize {
        self.params.sites()
    }

    pub fn energy_of(&self, x: &[i8]) -> f64 {
        ising_energy(x, &self.params.j)
    }

    pub fn action(site: usize, spin: i8) -> usize {
        2 * site + usize::from(spin > 0)
    }
}

impl Environment for IsingEnv {
    type State = SpinState;

    fn num_actions(&self) -> usize {
        2 * self.sites()
    }

    fn num_backward_actions(&self) -> usize {
        self.sites()
    }

    fn obs_dim(&self) -> usize {
        3 * self.sites()
    }

    fn max_steps(&self) -> usize {
        self.sites()
    }

    fn initial_state(&self) -> SpinState {
        SpinState { spins: vec![0; self.sites()], assigned: 0 }
    }

    fn is_terminal(&self, s: &SpinState) -> bool {
        s.assigned == self.sites()
    }

    fn is_initial(&self, s: &SpinState) -> bool {
        s.assigned == 0
    }

    fn forward_mask(&self, s: &SpinState, out: &mut [bool]) {
        for (i, &x) in s.spins.iter().enumerate() {
            out[2 * i] = x == 0;
            out[2 * i + 1] = x == 0;
        }
    }

    fn backward_mask(&self, s: &SpinState, out: &mut [bool]) {
        for (i, &x) in s.spins.iter().enumerate() {
            out[i] = x != 0;
        }
    }

    fn apply_forward(&self, s: &SpinState, a: usize) -> SpinState {
        let mut n = s.clone();
        n.spins[a / 2] = if a % 2 == 1 { 1 } else { -1 };
        n.assigned += 1;
        n
    }

    fn apply_backward(&self, s: &SpinState, b: usize) -> SpinState {
        let mut p = s.clone();
        p.spins[b] = 0;
        p.assigned -= 1;
        p
    }

    fn backward_action(&self, s: &SpinState, a: usize, next: &SpinState) -> Result<usize> {
        let site = a / 2;
        if a >= self.num_actions() || s.spins[site] != 0 || self.apply_forward(s, a) != *next {
            return contract("spin assignment does not produce the given state");
        }
        Ok(site)
    }

    fn forward_action(&self, child: &SpinState, b: usize, parent: &SpinState) -> Result<usize> {
        if b >= self.sites() || child.spins[b] == 0 || self.apply_backward(child, b) != *parent {
            return contract("spin removal does not produce the given state");
        }
        Ok(Self::action(b, child.spins[b]))
    }

    fn log_reward(&self, s: &SpinState) -> Result<f64> {
        if !self.is_terminal(s) {
            return contract("Ising reward is only defined for complete configurations");
        }
        Ok(-self.energy_of(&s.spins))
    }

    fn encode_obs(&self, s: &SpinState, out: &mut [f64]) {
        out.fill(0.0);
        for (i, &x) in s.spins.iter().enumerate() {
            out[3 * i + (x + 1) as usize] = 1.0;
        }
    }

    fn terminal_key(&self, s: &SpinState) -> Vec<u8> {
        s.spins.iter().map(|&x| x as u8).collect()
    }
}

fn config_from_index(d: usize, code: usize) -> Vec<i8> {
    (0..d).map(|i| if code >> i & 1 == 1 { 1 } else { -1 }).collect()
}

/// Exact Gibbs distribution `P(x) ∝ exp(−ℰ_J(x))` over all `2^D` configurations.
pub fn ising_exact_distribution(env: &IsingEnv) -> Result<ExactDistribution> {
    let d = env.sites();
    if d > MAX_EXACT_SITES {
        return Err(Error::Unsupported(format!(
            "exact Ising distribution needs D <= {MAX_EXACT_SITES}, got D = {d}"
        )));
    }
    let mut keys = Vec::with_capacity(1 << d);
    let mut logw = Vec::with_capacity(1 << d);
    for code in 0..1usize << d {
        let x = config_from_index(d, code);
        logw.push(-env.energy_of(&x));
        keys.push(x.iter().map(|&s| s as u8).collect());
    }
    ExactDistribution::from_log_weights(keys, &logw)
}

/// Heat-bath conditional `p(x_i = +1 | rest)` at inverse temperature `beta`.
pub fn heat_bath_prob(params: &IsingParams, x: &[i8], i: usize, beta: f64) -> f64 {
    let h = params.field(x, i) - params.j[i * params.sites() + i] * x[i] as f64;
    1.0 / (1.0 + (-4.0 * beta * h).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsConfig {
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Sweeps between recorded samples.
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    /// Inverse temperatures of the tempering ladder; the first must be 1.
    #[serde(default = "default_ladder")]
    pub betas: Vec<f64>,
}

fn default_burn_in() -> usize {
    1000
}

fn default_thinning() -> usize {
    10
}

fn default_ladder() -> Vec<f64> {
    vec![1.0, 0.8, 0.6, 0.4]
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig { burn_in: default_burn_in(), thinning: default_thinning(), betas: default_ladder() }
    }
}

/// Random-scan heat-bath sampler with parallel tempering; one sweep is `D`
/// single-site updates per replica followed by adjacent replica swaps.
pub fn gibbs_data_sampler(params: &IsingParams, key: RngKey, n_samples: usize, cfg: &GibbsConfig) -> Result<Vec<Vec<i8>>> {
    if cfg.betas.first() != Some(&1.0) || cfg.betas.iter().any(|&b| !(b > 0.0)) {
        return config("tempering ladder must start at beta = 1 and stay positive");
    }
    if cfg.thinning == 0 {
        return config("thinning must be at least 1");
    }
    let d = params.sites();
    let mut rng = key.rng();
    let mut chains: Vec<Vec<i8>> = cfg
        .betas
        .iter()
        .map(|_| (0..d).map(|_| if uniform(&mut rng) < 0.5 { 1 } else { -1 }).collect())
        .collect();
    let mut out = Vec::with_capacity(n_samples);
    let total = cfg.burn_in + n_samples * cfg.thinning;
    for sweep in 1..=total {
        for (c, &beta) in chains.iter_mut().zip(&cfg.betas) {
            for _ in 0..d {
                let i = (uniform(&mut rng) * d as f64) as usize;
                let p = heat_bath_prob(params, c, i, beta);
                c[i] = if uniform(&mut rng) < p { 1 } else { -1 };
            }
        }
        for k in 0..cfg.betas.len().saturating_sub(1) {
            let (ea, eb) = (ising_energy(&chains[k], &params.j), ising_energy(&chains[k + 1], &params.j));
            let log_a = (cfg.betas[k] - cfg.betas[k + 1]) * (ea - eb);
            if log_a >= 0.0 || uniform(&mut rng) < log_a.exp() {
                chains.swap(k, k + 1);
            }
        }
        if sweep > cfg.burn_in && (sweep - cfg.burn_in) % cfg.thinning == 0 {
            out.push(chains[0].clone());
        }
    }
    Ok(out)
}

/// `∇_J ℰ(x) = −x xᵀ` with the diagonal zeroed.
pub fn energy_grad(x: &[i8]) -> Vec<f64> {
    let d = x.len();
    let mut g = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            if a != b {
                g[a * d + b] = -(x[a] as f64) * x[b] as f64;
            }
        }
    }
    g
}

/// Mean over pairs of `∇ℰ(x) − ∇ℰ(x′)`.
pub fn cd_gradient(data: &[Vec<i8>], proposals: &[Vec<i8>]) -> Result<Vec<f64>> {
    if data.len() != proposals.len() || data.is_empty() {
        return Err(Error::Shape("contrastive divergence needs equally many data and proposal samples".into()));
    }
    let d = data[0].len();
    let mut g = vec![0.0; d * d];
    let scale = 1.0 / data.len() as f64;
    for (x, y) in data.iter().zip(proposals) {
        for (gi, (a, b)) in g.iter_mut().zip(energy_grad(x).into_iter().zip(energy_grad(y))) {
            *gi += scale * (a - b);
        }
    }
    Ok(g)
}

fn log_probs_at<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    states: &[&E::State],
    actions: &[usize],
    forward: bool,
) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Ok(Vec::new());
    }
    let obs = encode_batch(env, states);
    let (width, logits) = if forward {
        (env.num_actions(), Some(policy.forward_logits(&obs)?))
    } else {
        (env.num_backward_actions(), policy.backward_logits(&obs)?)
    };
    let mut mask = vec![false; width];
    let mut out = Vec::with_capacity(states.len());
    for (r, (&s, &a)) in states.iter().zip(actions).enumerate() {
        if forward {
            env.forward_mask(s, &mut mask);
        } else {
            env.backward_mask(s, &mut mask);
        }
        if !mask[a] {
            return contract(format!("action {a} is masked"));
        }
        out.push(match &logits {
            Some(l) => l.row(r)[a] - masked_logsumexp(l.row(r), &mask),
            None => -(mask.iter().filter(|&&m| m).count() as f64).ln(),
        });
    }
    Ok(out)
}

/// K-step back-and-forth proposals for a batch of complete configurations.
///
/// Returns each `x′` with `log [q(x | x′) / q(x′ | x)]`, the Hastings
/// correction `log P_B(τ′|x′) + log P_F(τ) − log P_B(τ|x) − log P_F(τ′)` where
/// `τ` is the destroyed segment and `τ′` the rebuilt one.
pub fn back_and_forth_batch<P: Policy + ?Sized>(
    env: &IsingEnv,
    policy: &P,
    xs: &[SpinState],
    k: usize,
    key: RngKey,
) -> Result<Vec<(SpinState, f64)>> {
    let d = env.sites();
    if k > d {
        return config(format!("back-and-forth depth K = {k} exceeds D = {d}"));
    }
    if xs.iter().any(|x| !env.is_terminal(x)) {
        return contract("back-and-forth proposals start from complete configurations");
    }
    let n = xs.len();
    let mut rng = key.rng();
    let mut log_ratio = vec![0.0; n];
    let mut cur: Vec<SpinState> = xs.to_vec();
    // destroyed segment, recorded as (parent, forward action)
    let mut destroyed: Vec<(SpinState, usize)> = Vec::with_capacity(n * k);
    let mut owner = Vec::with_capacity(n * k);
    let mut bmask = vec![false; d];
    for _ in 0..k {
        let refs: Vec<&SpinState> = cur.iter().collect();
        let logits = policy.backward_logits(&encode_batch(env, &refs))?;
        let zeros = vec![0.0; d];
        for (b, s) in cur.iter_mut().enumerate() {
            env.backward_mask(s, &mut bmask);
            let row = logits.as_ref().map_or(&zeros[..], |l| l.row(b));
            let probs = eps_uniform(row, &bmask, 0.0)?;
            let ba = categorical(&mut rng, &probs);
            log_ratio[b] -= probs[ba].ln();
            let parent = env.apply_backward(s, ba);
            let fa = env.forward_action(s, ba, &parent)?;
            destroyed.push((parent.clone(), fa));
            owner.push(b);
            *s = parent;
        }
    }
    // rebuilt segment, recorded as (child, backward action)
    let mut rebuilt: Vec<(SpinState, usize)> = Vec::with_capacity(n * k);
    let mut rebuilt_owner = Vec::with_capacity(n * k);
    let mut fmask = vec![false; 2 * d];
    for _ in 0..k {
        let refs: Vec<&SpinState> = cur.iter().collect();
        let logits = policy.forward_logits(&encode_batch(env, &refs))?;
        for (b, s) in cur.iter_mut().enumerate() {
            env.forward_mask(s, &mut fmask);
            let probs = eps_uniform(logits.row(b), &fmask, 0.0)?;
            let a = categorical(&mut rng, &probs);
            log_ratio[b] -= probs[a].ln();
            let child = env.apply_forward(s, a);
            let ba = env.backward_action(s, a, &child)?;
            rebuilt.push((child.clone(), ba));
            rebuilt_owner.push(b);
            *s = child;
        }
    }
    let states: Vec<&SpinState> = destroyed.iter().map(|(s, _)| s).collect();
    let acts: Vec<usize> = destroyed.iter().map(|&(_, a)| a).collect();
    for (lp, &b) in log_probs_at(env, policy, &states, &acts, true)?.into_iter().zip(&owner) {
        log_ratio[b] += lp;
    }
    let states: Vec<&SpinState> = rebuilt.iter().map(|(s, _)| s).collect();
    let acts: Vec<usize> = rebuilt.iter().map(|&(_, a)| a).collect();
    for (lp, &b) in log_probs_at(env, policy, &states, &acts, false)?.into_iter().zip(&rebuilt_owner) {
        log_ratio[b] += lp;
    }
    Ok(cur.into_iter().zip(log_ratio).collect())
}

/// Single-configuration form of [`back_and_forth_batch`].
pub fn back_and_forth_proposal<P: Policy + ?Sized>(
    env: &IsingEnv,
    policy: &P,
    x: &SpinState,
    k: usize,
    key: RngKey,
) -> Result<(SpinState, f64)> {
    Ok(back_and_forth_batch(env, policy, std::slice::from_ref(x), k, key)?.remove(0))
}

/// Metropolis–Hastings acceptance probability `min[1, e^{−ℰ(x′)}/e^{−ℰ(x)} · e^{log_ratio}]`.
pub fn mh_acceptance(energy_x: f64, energy_y: f64, log_ratio: f64) -> Result<f64> {
    let log_a = energy_x - energy_y + log_ratio;
    if log_a.is_nan() {
        return Err(Error::Numeric("non-finite Metropolis–Hastings ratio".into()));
    }
    Ok(log_a.min(0.0).exp())
}

/// Returns `x′` if accepted, else `x`.
pub fn mh_accept(x: &[i8], y: &[i8], log_ratio: f64, j: &[f64], rng: &mut impl rand::RngCore) -> Result<Vec<i8>> {
    let a = mh_acceptance(ising_energy(x, j), ising_energy(y, j), log_ratio)?;
    Ok(if uniform(rng) < a { y.to_vec() } else { x.to_vec() })
}

/// `−log RMSE(J_true, J_φ)`; identical matrices give `+∞`.
pub fn neg_log_rmse(j_true: &[f64], j_phi: &[f64]) -> Result<f64> {
    if j_true.len() != j_phi.len() || j_true.is_empty() {
        return Err(Error::Shape("coupling matrices differ in size".into()));
    }
    let mse = j_true.iter().zip(j_phi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / j_true.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -0.5 * mse.ln() })
}

/// Writes samples as `N=<n> sigma=<σ>` followed by one row of ±1 per line.
pub fn samples_to_text(n: usize, sigma: f64, samples: &[Vec<i8>]) -> String {
    let mut s = format!("N={n} sigma={sigma}\n");
    for x in samples {
        let row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn save_samples(path: &Path, n: usize, sigma: f64, samples: &[Vec<i8>]) -> Result<()> {
    std::fs::write(path, samples_to_text(n, sigma, samples))?;
    Ok(())
}

/// Parses a sample file into `(n, sigma, samples)`.
pub fn parse_samples(path: &Path, text: &str) -> Result<(usize, f64, Vec<Vec<i8>>)> {
    let err = |line: usize, msg: &str| Error::Parse { path: path.into(), line, msg: msg.into() };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty sample file"))?;
    let (mut n, mut sigma) = (None, None);
    for tok in header.split_whitespace() {
        match tok.split_once('=') {
            Some(("N", v)) => n = v.parse::<usize>().ok(),
            Some(("sigma", v)) => sigma = v.parse::<f64>().ok(),
            _ => return Err(err(1, "header must be `N=<n> sigma=<sigma>`")),
        }
    }
    let (n, sigma) = match (n, sigma) {
        (Some(n), Some(s)) if n > 0 => (n, s),
        _ => return Err(err(1, "header must be `N=<n> sigma=<sigma>`")),
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let row: Vec<i8> = line
            .split_whitespace()
            .map(|t| match t {
                "1" | "+1" => Ok(1),
                "-1" => Ok(-1),
                _ => Err(err(i + 1, "spins must be -1 or 1")),
            })
            .collect::<Result<_>>()?;
        if row.len() != n * n {
            return Err(err(i + 1, "row length differs from N²"));
        }
        samples.push(row);
    }
    Ok((n, sigma, samples))
}

pub fn load_samples(path: &Path) -> Result<(usize, f64, Vec<Vec<i8>>)> {
    parse_samples(path, &std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbGfnConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Probability that a training trajectory comes from `P_F` rather than
    /// from a backward rollout of a data point.
    pub alpha: f64,
    /// Back-and-forth depth; `None` means `K = D`.
    pub k: Option<usize>,
    pub lr: f64,
    pub lr_z: f64,
    pub lr_energy: f64,
    pub eval_every: usize,
}

impl Default for EbGfnConfig {
    fn default() -> Self {
        EbGfnConfig {
            steps: 20_000,
            batch_size: 256,
            hidden: 256,
            depth: 4,
            alpha: 0.5,
            k: None,
            lr: 1e-3,
            lr_z: 1e-1,
            lr_energy: 1e-3,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EbGfnRecord {
    pub step: usize,
    pub tb_loss: f64,
    pub log_z: f64,
    pub acceptance: f64,
    pub neg_log_rmse: f64,
}

#[derive(Clone, Debug)]
pub struct EbGfnReport {
    pub initial_neg_log_rmse: f64,
    pub best_neg_log_rmse: f64,
    pub best_step: usize,
    pub best_j: Vec<f64>,
    pub final_j: Vec<f64>,
    pub history: Vec<EbGfnRecord>,
    pub net: PolicyNet,
}

/// Alternates TB updates of a GFlowNet sampler for `exp(−ℰ_φ)` with
/// contrastive-divergence updates of `J_φ` driven by back-and-forth MH
/// proposals from the data. `J_φ` starts at zero; the best `J_φ` by
/// `neg_log_rmse` against `j_true` is kept.
pub fn train_eb_gfn(n: usize, data: &[Vec<i8>], j_true: &[f64], cfg: &EbGfnConfig, key: RngKey) -> Result<EbGfnReport> {
    let d = n * n;
    if data.is_empty() || data.iter().any(|x| x.len() != d) {
        return config(format!("EB-GFN needs a non-empty dataset of {d}-spin rows"));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) || cfg.batch_size == 0 || cfg.depth == 0 || cfg.eval_every == 0 {
        return config("EB-GFN needs alpha in [0, 1], positive batch size, depth and eval interval");
    }
    let k = cfg.k.unwrap_or(d);
    if k == 0 || k > d {
        return config(format!("back-and-forth depth must be in 1..={d}"));
    }
    let data_states: Vec<SpinState> = data.iter().map(|x| SpinState::complete(x.clone())).collect::<Result<_>>()?;
    let (init_key, loop_key) = key.split();
    let env0 = IsingEnv::new(IsingParams::new(n, vec![0.0; d * d])?);
    let layout = HeadLayout { n_fwd: env0.num_actions(), n_bwd: 0 };
    let mut net = PolicyNet::new(env0.obs_dim(), &vec![cfg.hidden; cfg.depth], layout, Activation::Relu, 0.0, init_key)?;
    let mut adam = AdamState::new(AdamConfig::default(), &net.params.tensors);
    let mut lrs = vec![cfg.lr; net.params.tensors.len()];
    *lrs.last_mut().unwrap() = cfg.lr_z;
    let mut j_phi = vec![Tensor::zeros(&[d * d])];
    let mut j_adam = AdamState::new(AdamConfig::default(), &j_phi);
    let loss_cfg = LossConfig::new(Objective::Tb);

    let initial = neg_log_rmse(j_true, j_phi[0].data())?;
    let mut report = EbGfnReport {
        initial_neg_log_rmse: initial,
        best_neg_log_rmse: initial,
        best_step: 0,
        best_j: j_phi[0].data().to_vec(),
        final_j: Vec::new(),
        history: Vec::new(),
        net: net.clone(),
    };
    for step in 1..=cfg.steps {
        let keys = loop_key.fold_in(step as u64).split_n(5);
        let env = IsingEnv::new(IsingParams::new(n, j_phi[0].data().to_vec())?);

        let mut rng = keys[0].rng();
        let n_fwd = (0..cfg.batch_size).filter(|_| uniform(&mut rng) < cfg.alpha).count();
        let picks: Vec<SpinState> =
            (0..cfg.batch_size - n_fwd).map(|_| data_states[(uniform(&mut rng) * data.len() as f64) as usize].clone()).collect();
        let batch = match (n_fwd, picks.is_empty()) {
            (0, _) => backward_rollout(&env, &net, &picks, keys[1])?,
            (_, true) => forward_rollout(&env, &net, n_fwd, keys[1], 0.0)?,
            _ => forward_rollout(&env, &net, n_fwd, keys[1], 0.0)?.concat(backward_rollout(&env, &net, &picks, keys[2])?)?,
        };
        let (tb_loss, grads) = LossBatch::new(&env, &batch, &loss_cfg)?.loss_and_grad(&net)?;
        adam.step(&mut net.params.tensors, &grads, &lrs)?;

        let xs: Vec<SpinState> =
            (0..cfg.batch_size).map(|_| data_states[(uniform(&mut rng) * data.len() as f64) as usize].clone()).collect();
        let proposals = back_and_forth_batch(&env, &net, &xs, k, keys[3])?;
        let mut mh_rng = keys[4].rng();
        let mut accepted = 0usize;
        let mut negatives = Vec::with_capacity(xs.len());
        for (x, (y, lr)) in xs.iter().zip(&proposals) {
            let z = mh_accept(&x.spins, &y.spins, *lr, j_phi[0].data(), &mut mh_rng)?;
            accepted += usize::from(z == y.spins);
            negatives.push(z);
        }
        let pos: Vec<Vec<i8>> = xs.iter().map(|x| x.spins.clone()).collect();
        let g = cd_gradient(&pos, &negatives)?;
        j_adam.step(&mut j_phi, &[Tensor::vector(g)], &[cfg.lr_energy])?;

        let score = neg_log_rmse(j_true, j_phi[0].data())?;
        if score > report.best_neg_log_rmse {
            report.best_neg_log_rmse = score;
            report.best_step = step;
            report.best_j = j_phi[0].data().to_vec();
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            report.history.push(EbGfnRecord {
                step,
                tb_loss,
                log_z: net.params.log_z(),
                acceptance: accepted as f64 / xs.len() as f64,
                neg_log_rmse: score,
            });
        }
    }
    report.final_j = j_phi[0].data().to_vec();
    report.net = net;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{tv_distance, EmpiricalDistribution};
    use crate::oracle::{enumerate_state_graph, exact_policy_marginal};
    use crate::policy::{FnPolicy, UniformPolicy};

    fn naive_energy(x: &[i8], j: &[f64]) -> f64 {
        let d = x.len();
        let mut e = 0.0;
        for a in 0..d {
            for b in 0..d {
                e += x[a] as f64 * j[a * d + b] * x[b] as f64;
            }
        }
        -e
    }

    #[test]
    fn energy_examples() {
        let p = IsingParams::lattice(3, 0.1).unwrap();
        assert_eq!(torus_adjacency(3).iter().sum::<f64>(), 36.0);
        assert!((ising_energy(&[1; 9], &p.j) + 3.6).abs() < 1e-12);
        let mut rng = RngKey::new(1).rng();
        for _ in 0..100 {
            let x: Vec<i8> = (0..9).map(|_| if uniform(&mut rng) < 0.5 { 1 } else { -1 }).collect();
            let flipped: Vec<i8> = x.iter().map(|v| -v).collect();
            assert!((ising_energy(&x, &p.j) - ising_energy(&flipped, &p.j)).abs() < 1e-12);
            assert!((ising_energy(&x, &p.j) - naive_energy(&x, &p.j)).abs() < 1e-10);
        }
    }

    #[test]
    fn action_space_and_masks() {
        let env = IsingEnv::new(IsingParams::lattice(2, 0.2).unwrap());
        assert_eq!(env.num_actions(), 8);
        let s0 = env.initial_state();
        assert!(env.backward_mask_vec(&s0).iter().all(|&m| !m));
        let s1 = env.try_forward(&s0, IsingEnv::action(2, 1)).unwrap();
        assert_eq!(s1.spins, vec![0, 0, 1, 0]);
        assert!(env.try_forward(&s1, IsingEnv::action(2, -1)).is_err());
        assert_eq!(env.forward_action(&s1, 2, &s0).unwrap(), 5);
        assert!(env.log_reward(&s1).is_err());
    }

    #[test]
    fn trajectory_count_is_d_factorial() {
        let env = IsingEnv::new(IsingParams::lattice(2, 0.2).unwrap());
        let g = enumerate_state_graph(&env, 1_000).unwrap();
        let mut paths = vec![0u64; g.len()];
        paths[g.index[&env.initial_state()]] = 1;
        for &i in &g.topo {
            for &(_, c) in &g.children[i] {
                paths[c] += paths[i];
            }
        }
        let x = SpinState::complete(vec![1, -1, -1, 1]).unwrap();
        assert_eq!(paths[g.index[&x]], 24);
    }

    #[test]
    fn exact_distribution_is_gated() {
        let big = IsingEnv::new(IsingParams::lattice(10, 0.1).unwrap());
        assert!(matches!(ising_exact_distribution(&big), Err(Error::Unsupported(_))));
        let small = IsingEnv::new(IsingParams::lattice(3, 0.2).unwrap());
        assert_eq!(ising_exact_distribution(&small).unwrap().len(), 512);
    }

    #[test]
    fn zero_couplings_give_independent_spins() {
        let p = IsingParams::new(3, vec![0.0; 81]).unwrap();
        let cfg = GibbsConfig { burn_in: 10, thinning: 1, ..Default::default() };
        let xs = gibbs_data_sampler(&p, RngKey::new(3), 10_000, &cfg).unwrap();
        for i in 0..9 {
            let mean = xs.iter().map(|x| x[i] as f64).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 3.0 / 100.0, "site {i} mean {mean}");
        }
    }

    #[test]
    fn heat_bath_matches_exact_gibbs() {
        let env = IsingEnv::new(IsingParams::lattice(2, 0.3).unwrap());
        let exact = ising_exact_distribution(&env).unwrap();
        let cfg = GibbsConfig { burn_in: 100, thinning: 2, ..Default::default() };
        let xs = gibbs_data_sampler(&env.params, RngKey::new(4), 40_000, &cfg).unwrap();
        let keys: Vec<Vec<u8>> = xs.iter().map(|x| x.iter().map(|&s| s as u8).collect()).collect();
        let tv = tv_distance(&EmpiricalDistribution::from_keys(&keys), &exact).unwrap();
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn heat_bath_kernel_is_reversible() {
        let mut j = vec![0.0; 16];
        let mut rng = RngKey::new(5).rng();
        for a in 0..4 {
            for b in 0..a {
                let w = uniform(&mut rng) - 0.5;
                j[a * 4 + b] = w;
                j[b * 4 + a] = w;
            }
        }
        let p = IsingParams::new(2, j).unwrap();
        let pi: Vec<f64> = (0..16).map(|c| (-ising_energy(&config_from_index(4, c), &p.j)).exp()).collect();
        // random-scan kernel T[x][y]
        let mut t = vec![vec![0.0; 16]; 16];
        for c in 0..16 {
            let x = config_from_index(4, c);
            for i in 0..4 {
                let up = heat_bath_prob(&p, &x, i, 1.0);
                let with = |s: i8| {
                    let mut y = x.clone();
                    y[i] = s;
                    (0..4).filter(|&k| y[k] > 0).fold(0, |acc, k| acc | 1 << k)
                };
                t[c][with(1)] += up / 4.0;
                t[c][with(-1)] += (1.0 - up) / 4.0;
            }
        }
        for a in 0..16 {
            assert!((t[a].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for b in 0..16 {
                assert!((pi[a] * t[a][b] - pi[b] * t[b][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cd_gradient_examples() {
        let x = vec![vec![1i8, -1, 1], vec![-1, -1, 1]];
        assert!(cd_gradient(&x, &x).unwrap().iter().all(|&g| g == 0.0));
        let (a, b) = (vec![1i8, -1, 1], vec![1i8, 1, 1]);
        let g = cd_gradient(&[a.clone()], &[b.clone()]).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 0.0 } else { (b[r] * b[c]) as f64 - (a[r] * a[c]) as f64 };
                assert_eq!(g[r * 3 + c], want);
            }
        }
    }

    #[test]
    fn energy_grad_matches_finite_differences() {
        let mut rng = RngKey::new(6).rng();
        let d = 9;
        let j: Vec<f64> = (0..d * d).map(|_| uniform(&mut rng) - 0.5).collect();
        let x: Vec<i8> = (0..d).map(|_| if uniform(&mut rng) < 0.5 { 1 } else { -1 }).collect();
        let g = energy_grad(&x);
        let h = 1e-5;
        for a in 0..d {
            for b in 0..d {
                if a == b {
                    continue;
                }
                let mut jp = j.clone();
                jp[a * d + b] += h;
                let mut jm = j.clone();
                jm[a * d + b] -= h;
                let fd = (ising_energy(&x, &jp) - ising_energy(&x, &jm)) / (2.0 * h);
                assert!((fd - g[a * d + b]).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_depth_proposal_is_identity() {
        let env = IsingEnv::new(IsingParams::lattice(2, 0.2).unwrap());
        let x = SpinState::complete(vec![1, 1, -1, 1]).unwrap();
        let (y, lr) = back_and_forth_proposal(&env, &UniformPolicy { n_fwd: 8 }, &x, 0, RngKey::new(0)).unwrap();
        assert_eq!((y, lr), (x, 0.0));
    }

    fn biased_policy() -> FnPolicy<impl Fn(&Tensor) -> Result<Tensor>, impl Fn(&Tensor) -> Result<Option<Tensor>>> {
        FnPolicy {
            forward: |obs: &Tensor| {
                let d = obs.cols() / 3;
                let mut out = Tensor::zeros(&[obs.rows(), 2 * d]);
                for r in 0..obs.rows() {
                    let filled = obs.row(r).chunks(3).filter(|c| c[1] == 0.0).count() as f64;
                    for i in 0..d {
                        out.row_mut(r)[2 * i + 1] = 0.8 + 0.3 * i as f64 - 0.2 * filled;
                    }
                }
                Ok(out)
            },
            backward: |obs: &Tensor| {
                let d = obs.cols() / 3;
                let mut out = Tensor::zeros(&[obs.rows(), d]);
                for r in 0..obs.rows() {
                    for i in 0..d {
                        out.row_mut(r)[i] = 0.5 * i as f64 * obs.row(r)[3 * i + 2];
                    }
                }
                Ok(Some(out))
            },
        }
    }

    #[test]
    fn full_depth_proposal_samples_terminal_marginal() {
        let env = IsingEnv::new(IsingParams::lattice(2, 0.2).unwrap());
        let policy = biased_policy();
        let g = enumerate_state_graph(&env, 1_000).unwrap();
        let marginal = exact_policy_marginal(&env, &policy, &g, 0.0).unwrap();
        let x = SpinState::complete(vec![-1, -1, -1, -1]).unwrap();
        let xs = vec![x; 20_000];
        let ys = back_and_forth_batch(&env, &policy, &xs, 4, RngKey::new(8)).unwrap();
        let keys: Vec<Vec<u8>> = ys.iter().map(|(y, _)| env.terminal_key(y)).collect();
        let tv = tv_distance(&EmpiricalDistribution::from_keys(&keys), &marginal).unwrap();
        assert!(tv < 0.03, "tv {tv}");
    }

    #[test]
    fn deterministic_retrace_has_unit_ratio() {
        let env = IsingEnv::new(IsingParams::lattice(2, 0.2).unwrap());
        // always remove the highest assigned site and re-add it with its old spin
        let policy = FnPolicy {
            forward: |obs: &Tensor| {
                let mut out = Tensor::filled(&[obs.rows(), 8], -1e3);
                for r in 0..obs.rows() {
                    let lowest_free = (0..4).find(|&i| obs.row(r)[3 * i + 1] == 1.0).unwrap_or(0);
                    out.row_mut(r)[2 * lowest_free + 1] = 1e3;
                }
                Ok(out)
            },
            backward: |obs: &Tensor| {
                let mut out = Tensor::filled(&[obs.rows(), 4], -1e3);
                for r in 0..obs.rows() {
                    let highest = (0..4).rev().find(|&i| obs.row(r)[3 * i + 1] == 0.0).unwrap_or(0);
                    out.row_mut(r)[highest] = 1e3;
                }
                Ok(Some(out))
            },
        };
        let x = SpinState::complete(vec![1, 1, 1, 1]).unwrap();
        let (y, lr) = back_and_forth_proposal(&env, &policy, &x, 2, RngKey::new(1)).unwrap();
        assert_eq!(y, x);
        assert!(lr.abs() < 1e-12);
    }

    #[test]
    fn mh_chain_leaves_gibbs_invariant() {
        let env = IsingEnv::new(IsingParams::lattice(2, 0.3).unwrap());
        let exact = ising_exact_distribution(&env).unwrap();
        let policy = biased_policy();
        let chains = 500;
        let mut xs: Vec<SpinState> = exact
            .sample(RngKey::new(2), chains)
            .into_iter()
            .map(|k| SpinState::complete(k.iter().map(|&b| b as i8).collect()).unwrap())
            .collect();
        let mut rng = RngKey::new(3).rng();
        let mut keys = Vec::new();
        for it in 0..60u64 {
            let k = 1 + (it as usize % 4);
            let props = back_and_forth_batch(&env, &policy, &xs, k, RngKey::new(100 + it)).unwrap();
            for (x, (y, lr)) in xs.iter_mut().zip(props) {
                let z = mh_accept(&x.spins, &y.spins, lr, &env.params.j, &mut rng).unwrap();
                *x = SpinState::complete(z).unwrap();
                keys.push(env.terminal_key(x));
            }
        }
        let tv = tv_distance(&EmpiricalDistribution::from_keys(&keys), &exact).unwrap();
        assert!(tv < 0.03, "tv {tv}");
    }

    #[test]
    fn acceptance_rate_matches_analytic() {
        let j = IsingParams::lattice(2, 0.3).unwrap().j;
        let (x, y) = (vec![1i8, 1, 1, 1], vec![1i8, -1, -1, 1]);
        let lr = 4.0;
        let a = mh_acceptance(ising_energy(&x, &j), ising_energy(&y, &j), lr).unwrap();
        assert!(a > 0.05 && a < 0.95);
        let mut rng = RngKey::new(9).rng();
        let n = 10_000;
        let hits = (0..n).filter(|_| mh_accept(&x, &y, lr, &j, &mut rng).unwrap() == y).count();
        let rate = hits as f64 / n as f64;
        assert!((rate - a).abs() < 3.0 * (a * (1.0 - a) / n as f64).sqrt());
        assert_eq!(mh_acceptance(1.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(mh_acceptance(5.0, -5.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn neg_log_rmse_examples() {
        let a = vec![0.2, 0.0, -0.1, 0.3];
        let b: Vec<f64> = a.iter().map(|v| v + 0.01).collect();
        assert!((neg_log_rmse(&a, &b).unwrap() - 4.605170185988091).abs() < 1e-9);
        assert_eq!(neg_log_rmse(&a, &a).unwrap(), f64::INFINITY);
        let c: Vec<f64> = a.iter().map(|v| v + 0.02).collect();
        let diff = neg_log_rmse(&a, &b).unwrap() - neg_log_rmse(&a, &c).unwrap();
        assert!((diff - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn sample_file_round_trip() {
        let xs = vec![vec![1i8, -1, 1, 1], vec![-1, -1, -1, 1]];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ising.txt");
        save_samples(&p, 2, 0.2, &xs).unwrap();
        assert_eq!(load_samples(&p).unwrap(), (2, 0.2, xs));
        assert!(parse_samples(&p, "N=2 sigma=0.2\n1 0 1 1\n").is_err());
        assert!(parse_samples(&p, "N=2\n").is_err());
    }

    #[test]
    fn eb_gfn_smoke() {
        let p = IsingParams::lattice(3, 0.2).unwrap();
        let data = gibbs_data_sampler(&p, RngKey::new(1), 200, &GibbsConfig::default()).unwrap();
        let cfg = EbGfnConfig { steps: 40, batch_size: 32, hidden: 32, depth: 2, eval_every: 10, ..Default::default() };
        let r = train_eb_gfn(3, &data, &p.j, &cfg, RngKey::new(2)).unwrap();
        assert_eq!(r.history.len(), 4);
        assert!(r.history.iter().all(|h| h.tb_loss.is_finite() && h.neg_log_rmse.is_finite()));
        assert!(r.history.last().unwrap().tb_loss < r.history[0].tb_loss);
    }
}
