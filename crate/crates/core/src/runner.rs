//! Experiment driver: builds the environment a [`RunConfig`] describes,
//! trains a policy, evaluates metrics and writes run artifacts.
//!
//! Output files (all in the `--out` directory):
//!
//! * `metrics.csv` with columns [`METRIC_COLUMNS`], one row per evaluation.
//!   Metrics that do not apply are left empty. Wall-clock data is kept out of
//!   this file so that it is byte-identical across runs with the same seed.
//! * `timing.csv` with `step,wall_time_s,iterations_per_second`.
//! * `run.json` with the resolved configuration and summary numbers.
//! * `checkpoint.json` with the final policy and optimizer state.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::buffer::FifoBuffer;
use crate::config::{EnvConfig, IsingMode, Metric, Optim, RunConfig};
use crate::env::dag::{enumerate_dags, generate_er_dataset, DagEnv, Dataset};
use crate::env::hypergrid::{grid_exact_distribution, Hypergrid};
use crate::env::ising::{
    gibbs_data_sampler, ising_exact_distribution, load_samples, neg_log_rmse, save_samples, train_eb_gfn,
    EbGfnConfig, IsingEnv, IsingParams,
};
use crate::env::phylo::{PhyloEnv, PhyloParams, SpeciesData};
use crate::env::sequence::{
    encode_tokens, generate_modes, generate_test_set, load_reward_table, SeqReward, SequenceEnv,
};
use crate::env::{forward_rollout, Environment};
use crate::error::{config, Error, Result};
use crate::metrics::{jsd, mc_terminal_logprobs, pearson, topk_reward_diversity, tv_distance, EmpiricalDistribution, ExactDistribution};
use crate::nn::{Activation, AdamState, Checkpoint, HeadLayout, PolicyNet};
use crate::objectives::{BackwardMode, LossBatch, LossConfig};
use crate::oracle::{enumerate_state_graph, exact_policy_marginal, exact_terminal_distribution, StateGraph};
use crate::rng::RngKey;

pub const METRIC_COLUMNS: [&str; 9] =
    ["step", "loss", "log_z", "tv", "jsd", "pearson", "topk_reward", "topk_diversity", "neg_log_rmse"];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub log_z: f64,
    pub tv: Option<f64>,
    pub jsd: Option<f64>,
    pub pearson: Option<f64>,
    pub topk_reward: Option<f64>,
    pub topk_diversity: Option<f64>,
    pub neg_log_rmse: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        [
            self.step.to_string(),
            format!("{:?}", self.loss),
            format!("{:?}", self.log_z),
            fmt_opt(self.tv),
            fmt_opt(self.jsd),
            fmt_opt(self.pearson),
            fmt_opt(self.topk_reward),
            fmt_opt(self.topk_diversity),
            fmt_opt(self.neg_log_rmse),
        ]
        .join(",")
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = METRIC_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub step: u64,
    pub wall_time_s: f64,
    pub iterations_per_second: f64,
}

/// Oracle data and metric selection for one environment.
pub struct Evaluator<E: Environment> {
    pub metrics: Vec<Metric>,
    pub target: Option<ExactDistribution>,
    pub graph: Option<StateGraph<E::State>>,
    pub test_set: Vec<E::State>,
    pub test_log_rewards: Vec<f64>,
    pub mc_samples: usize,
    pub eval_samples: usize,
    pub topk: usize,
}

impl<E: Environment> Evaluator<E> {
    fn empty(cfg: &RunConfig) -> Self {
        Evaluator {
            metrics: Vec::new(),
            target: None,
            graph: None,
            test_set: Vec::new(),
            test_log_rewards: Vec::new(),
            mc_samples: cfg.eval.mc_samples,
            eval_samples: cfg.eval.eval_samples,
            topk: cfg.eval.topk,
        }
    }

    /// Computes the selected metrics. `buffer` supplies the training
    /// samples for TV; without it, fresh policy samples are drawn.
    pub fn evaluate(&self, env: &E, net: &PolicyNet, buffer: Option<&FifoBuffer>, key: RngKey) -> Result<MetricRow> {
        let keys = key.split_n(3);
        let mut row = MetricRow { log_z: net.params.log_z(), ..Default::default() };
        let fresh = if self.metrics.contains(&Metric::Topk) || (self.metrics.contains(&Metric::Tv) && buffer.is_none()) {
            Some(forward_rollout(env, net, self.eval_samples, keys[0], 0.0)?)
        } else {
            None
        };
        for m in &self.metrics {
            match m {
                Metric::Tv => {
                    let target = self.target.as_ref().ok_or_else(|| unsupported("tv"))?;
                    let emp = match (buffer, &fresh) {
                        (Some(b), _) => b.empirical()?,
                        (None, Some(f)) => {
                            let ks: Vec<Vec<u8>> = f.terminals().map(|s| env.terminal_key(s)).collect();
                            EmpiricalDistribution::from_keys(&ks)
                        }
                        (None, None) => unreachable!("fresh samples are drawn when no buffer is given"),
                    };
                    row.tv = Some(tv_distance(&emp, target)?);
                }
                Metric::Jsd => {
                    let (target, graph) = match (&self.target, &self.graph) {
                        (Some(t), Some(g)) => (t, g),
                        _ => return Err(unsupported("jsd")),
                    };
                    let marginal = exact_policy_marginal(env, net, graph, 0.0)?;
                    let q: Vec<f64> = target.keys.iter().map(|k| marginal.prob(k)).collect();
                    row.jsd = Some(jsd(&target.probs, &q)?);
                }
                Metric::Pearson => {
                    if self.test_set.len() < 2 {
                        return Err(unsupported("pearson"));
                    }
                    let lp = mc_terminal_logprobs(env, net, &self.test_set, self.mc_samples, keys[1])?;
                    row.pearson = Some(pearson(&lp, &self.test_log_rewards)?);
                }
                Metric::Topk => {
                    let f = fresh.as_ref().expect("fresh samples drawn for top-k");
                    let samples: Vec<Vec<u8>> = f.terminals().map(|s| env.terminal_key(s)).collect();
                    let rewards: Vec<f64> = f.log_rewards.iter().map(|l| l.exp()).collect();
                    let (r, d) = topk_reward_diversity(&samples, &rewards, self.topk.min(samples.len()))?;
                    row.topk_reward = Some(r);
                    row.topk_diversity = Some(d);
                }
                Metric::NegLogRmse => return Err(unsupported("neg_log_rmse")),
            }
        }
        Ok(row)
    }
}

fn unsupported(metric: &str) -> Error {
    Error::Unsupported(format!("metric `{metric}` is not available for this environment"))
}

/// One gradient step per call: forward rollout, loss, Adam update.
pub struct Trainer<'a, E: Environment> {
    pub env: &'a E,
    pub net: PolicyNet,
    pub adam: AdamState,
    pub optim: Optim,
    pub loss: LossConfig,
    pub buffer: FifoBuffer,
    pub step: u64,
    key: RngKey,
}

impl<'a, E: Environment> Trainer<'a, E> {
    pub fn new(env: &'a E, cfg: &RunConfig) -> Result<Self> {
        let optim = cfg.optim()?;
        let loss = cfg.loss();
        loss.validate()?;
        let (init_key, key) = RngKey::new(cfg.seed).split();
        let n_bwd = if loss.backward == BackwardMode::Learned { env.num_backward_actions() } else { 0 };
        let layout = HeadLayout { n_fwd: env.num_actions(), n_bwd };
        let hidden = vec![optim.hidden; optim.layers];
        let net = PolicyNet::new(env.obs_dim(), &hidden, layout, Activation::Relu, optim.log_z_init, init_key)?;
        let adam = AdamState::new(optim.adam, &net.params.tensors);
        Ok(Trainer { env, net, adam, buffer: FifoBuffer::new(cfg.eval.buffer_capacity), optim, loss, step: 0, key })
    }

    pub fn resume(&mut self, ck: Checkpoint) -> Result<()> {
        if ck.net.layout != self.net.layout || ck.net.params.sizes != self.net.params.sizes {
            return config("checkpoint architecture does not match the configuration");
        }
        self.net = ck.net;
        if let Some(a) = ck.adam {
            self.adam = a;
        }
        self.step = ck.step;
        Ok(())
    }

    pub fn eval_key(&self) -> RngKey {
        self.key.fold_in(self.step).split().1
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let t = self.step;
        let roll_key = self.key.fold_in(t + 1).split().0;
        let eps = self.optim.explore.value(t);
        let batch = forward_rollout(self.env, &self.net, self.optim.batch_size, roll_key, eps)?;
        self.buffer.push_batch(batch.terminals().map(|s| self.env.terminal_key(s)));
        let (loss, grads) = LossBatch::new(self.env, &batch, &self.loss)?.loss_and_grad(&self.net)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {}", t + 1)));
        }
        let lr = self.optim.lr.value(t);
        let mut lrs = vec![lr; self.net.params.tensors.len()];
        *lrs.last_mut().unwrap() = self.optim.lr_z;
        self.adam.step(&mut self.net.params.tensors, &grads, &lrs)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.step, self.net.clone(), Some(self.adam.clone()))
    }
}

/// Receives the concrete environment a configuration builds.
pub trait TaskVisitor {
    type Output;
    fn visit<E: Environment>(self, env: &E, eval: Evaluator<E>) -> Result<Self::Output>;
}

fn resolve_metrics(cfg: &RunConfig, defaults: &[Metric], available: &[Metric]) -> Result<Vec<Metric>> {
    match &cfg.eval.metrics {
        Some(req) => {
            for m in req {
                if !available.contains(m) {
                    return Err(Error::Unsupported(format!(
                        "metric {m:?} cannot be computed for this environment (exact oracle unavailable or not applicable)"
                    )));
                }
            }
            Ok(req.clone())
        }
        None => Ok(defaults.iter().copied().filter(|m| available.contains(m)).collect()),
    }
}

/// Enumerates the state graph when it fits, mapping a cap overflow to `None`.
fn try_graph<E: Environment>(env: &E, cap: usize) -> Result<Option<StateGraph<E::State>>> {
    match enumerate_state_graph(env, cap) {
        Ok(g) => Ok(Some(g)),
        Err(Error::CapExceeded { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn wants(cfg: &RunConfig, defaults: &[Metric], m: Metric) -> bool {
    cfg.eval.metrics.as_ref().map_or(defaults.contains(&m), |r| r.contains(&m))
}

fn visit_generic<E: Environment, V: TaskVisitor>(
    cfg: &RunConfig,
    env: E,
    defaults: &[Metric],
    target: Option<ExactDistribution>,
    v: V,
) -> Result<V::Output> {
    let mut ev = Evaluator::empty(cfg);
    let needs_graph = wants(cfg, defaults, Metric::Jsd) || (target.is_none() && wants(cfg, defaults, Metric::Tv));
    if needs_graph {
        ev.graph = try_graph(&env, cfg.eval.state_cap)?;
    }
    ev.target = match (target, &ev.graph) {
        (Some(t), _) => Some(t),
        (None, Some(g)) => Some(exact_terminal_distribution(&env, g)?),
        (None, None) => None,
    };
    let mut available = vec![Metric::Topk];
    if ev.target.is_some() {
        available.push(Metric::Tv);
        if ev.graph.is_some() {
            available.push(Metric::Jsd);
        }
    }
    ev.metrics = resolve_metrics(cfg, defaults, &available)?;
    v.visit(&env, ev)
}

pub fn load_or_generate_dataset(cfg: &crate::config::DagConfig, seed: u64) -> Result<Dataset> {
    let data = match &cfg.data {
        Some(p) => Dataset::load(p)?,
        None => generate_er_dataset(cfg.d, cfg.expected_in_degree, cfg.n_obs, cfg.noise_var, cfg.data_seed.unwrap_or(seed))?,
    };
    if data.d != cfg.d {
        return config(format!("dataset has {} variables, config says d = {}", data.d, cfg.d));
    }
    Ok(data)
}

pub fn build_bitseq(c: &crate::config::BitseqConfig, seed: u64) -> Result<(SequenceEnv, Vec<Vec<u8>>)> {
    let key = RngKey::new(c.modes_seed.unwrap_or(seed)).fold_in(0x6d6f646573);
    let (mk, tk) = key.split();
    let modes = Arc::new(generate_modes(c.n, c.beta, mk)?);
    let test = generate_test_set(&modes, tk);
    Ok((SequenceEnv::bitseq(c.scheme, c.n, c.k, modes)?, test))
}

pub fn build_phylo(c: &crate::config::PhyloConfig, seed: u64) -> Result<PhyloEnv> {
    let data = match &c.data {
        Some(p) => SpeciesData::load(p)?,
        None => SpeciesData::synthetic(c.n_species, c.sites, &c.alphabet, RngKey::new(seed).fold_in(0x7068796c6f))?,
    };
    PhyloEnv::new(Arc::new(data), PhyloParams { alpha: c.alpha, c: c.c })
}

/// Builds the configured environment and evaluator and hands them to `v`.
pub fn dispatch<V: TaskVisitor>(cfg: &RunConfig, v: V) -> Result<V::Output> {
    let cap = cfg.eval.state_cap;
    match &cfg.env {
        EnvConfig::Hypergrid(p) => {
            let env = Hypergrid::new(p.clone())?;
            let defaults = [Metric::Tv];
            let target = if wants(cfg, &defaults, Metric::Tv) || wants(cfg, &defaults, Metric::Jsd) {
                match grid_exact_distribution(&env, cap as u128) {
                    Ok(t) => Some(t),
                    Err(Error::CapExceeded { .. }) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            visit_generic(cfg, env, &defaults, target, v)
        }
        EnvConfig::Bitseq(c) => {
            let (env, test) = build_bitseq(c, cfg.seed)?;
            let mut ev = Evaluator::empty(cfg);
            let defaults = [Metric::Pearson, Metric::Topk];
            let mut available = vec![Metric::Pearson, Metric::Topk];
            if wants(cfg, &defaults, Metric::Tv) || wants(cfg, &defaults, Metric::Jsd) {
                if let Some(g) = try_graph(&env, cap)? {
                    ev.target = Some(exact_terminal_distribution(&env, &g)?);
                    ev.graph = Some(g);
                    available.extend([Metric::Tv, Metric::Jsd]);
                }
            }
            ev.test_set = test.iter().map(|bits| env.terminal_state(env.from_bits(bits))).collect();
            ev.test_log_rewards = ev.test_set.iter().map(|s| env.log_reward(s)).collect::<Result<_>>()?;
            ev.metrics = resolve_metrics(cfg, &defaults, &available)?;
            v.visit(&env, ev)
        }
        EnvConfig::Sequence(c) => {
            let mut table = load_reward_table(&c.table)?;
            if c.r_min.is_some() {
                table.r_min = c.r_min;
            }
            table.strict = c.strict;
            let (vocab, length) = (table.vocab, table.length);
            let env = SequenceEnv::new(c.scheme, length, vocab, SeqReward::Table(Arc::new(table)))?;
            visit_generic(cfg, env, &[Metric::Tv, Metric::Topk], None, v)
        }
        EnvConfig::Dag(c) => {
            let data = load_or_generate_dataset(c, cfg.seed)?;
            let env = DagEnv::from_dataset(&data, c.score_kind())?;
            visit_generic(cfg, env, &[Metric::Jsd, Metric::Tv], None, v)
        }
        EnvConfig::Ising(c) => {
            let env = IsingEnv::new(IsingParams::lattice(c.n, c.sigma)?);
            let defaults = [Metric::Tv];
            let target = if wants(cfg, &defaults, Metric::Tv) || wants(cfg, &defaults, Metric::Jsd) {
                match ising_exact_distribution(&env) {
                    Ok(t) => Some(t),
                    Err(Error::Unsupported(_)) if cfg.eval.metrics.is_none() => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            visit_generic(cfg, env, &defaults, target, v)
        }
        EnvConfig::Phylo(c) => {
            let env = build_phylo(c, cfg.seed)?;
            visit_generic(cfg, env, &[Metric::Topk], None, v)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub timing: Vec<TimingRow>,
    pub wall_time_s: f64,
    pub iterations_per_second: f64,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
    /// Learned couplings of the energy-based Ising loop, best first then final.
    #[serde(skip)]
    pub couplings: Option<(Vec<f64>, Vec<f64>)>,
}

struct TrainWith<'c> {
    cfg: &'c RunConfig,
}

impl TaskVisitor for TrainWith<'_> {
    type Output = (Vec<MetricRow>, Vec<TimingRow>, Checkpoint);

    fn visit<E: Environment>(self, env: &E, ev: Evaluator<E>) -> Result<Self::Output> {
        let every = self.cfg.eval_every()? as u64;
        let mut tr = Trainer::new(env, self.cfg)?;
        let total = tr.optim.iterations as u64;
        let start = Instant::now();
        let mut rows = Vec::new();
        let mut timing = Vec::new();
        while tr.step < total {
            let loss = tr.train_step()?;
            if tr.step % every == 0 || tr.step == total {
                let mut row = ev.evaluate(env, &tr.net, Some(&tr.buffer), tr.eval_key())?;
                row.step = tr.step;
                row.loss = loss;
                rows.push(row);
                let wall = start.elapsed().as_secs_f64();
                timing.push(TimingRow { step: tr.step, wall_time_s: wall, iterations_per_second: tr.step as f64 / wall.max(1e-12) });
            }
        }
        Ok((rows, timing, tr.checkpoint()))
    }
}

fn ising_data(c: &crate::config::IsingConfig, params: &IsingParams, seed: u64) -> Result<Vec<Vec<i8>>> {
    match &c.data {
        Some(p) => {
            let (n, _, xs) = load_samples(p)?;
            if n != c.n {
                return config(format!("sample file has N = {n}, config says N = {}", c.n));
            }
            Ok(xs)
        }
        None => gibbs_data_sampler(params, RngKey::new(seed).fold_in(0x6769626273), c.n_data, &c.gibbs),
    }
}

fn train_ising_eb(cfg: &RunConfig, c: &crate::config::IsingConfig) -> Result<TrainOutcome> {
    let o = cfg.optim()?;
    let truth = IsingParams::lattice(c.n, c.sigma)?;
    let data = ising_data(c, &truth, cfg.seed)?;
    let eb = EbGfnConfig {
        steps: o.iterations,
        batch_size: o.batch_size,
        hidden: o.hidden,
        depth: o.layers,
        alpha: c.alpha,
        k: c.k,
        lr: o.lr.start,
        lr_z: o.lr_z,
        lr_energy: c.lr_energy,
        eval_every: cfg.eval_every()?,
    };
    let start = Instant::now();
    let report = train_eb_gfn(c.n, &data, &truth.j, &eb, RngKey::new(cfg.seed))?;
    let wall = start.elapsed().as_secs_f64();
    let rows = report
        .history
        .iter()
        .map(|h| MetricRow {
            step: h.step as u64,
            loss: h.tb_loss,
            log_z: h.log_z,
            neg_log_rmse: Some(h.neg_log_rmse),
            ..Default::default()
        })
        .collect();
    let timing = report
        .history
        .iter()
        .map(|h| TimingRow { step: h.step as u64, wall_time_s: f64::NAN, iterations_per_second: f64::NAN })
        .collect();
    Ok(TrainOutcome {
        rows,
        timing,
        wall_time_s: wall,
        iterations_per_second: o.iterations as f64 / wall.max(1e-12),
        checkpoint: Some(Checkpoint::new(o.iterations as u64, report.net, None)),
        couplings: Some((report.best_j, report.final_j)),
    })
}

/// Trains according to `cfg` and, when `out` is given, writes the run artifacts there.
pub fn run_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let outcome = match &cfg.env {
        EnvConfig::Ising(c) if c.mode == IsingMode::EbGfn => train_ising_eb(cfg, c)?,
        _ => {
            let start = Instant::now();
            let (rows, timing, ck) = dispatch(cfg, TrainWith { cfg })?;
            let wall = start.elapsed().as_secs_f64();
            TrainOutcome {
                rows,
                timing,
                wall_time_s: wall,
                iterations_per_second: ck.step as f64 / wall.max(1e-12),
                checkpoint: Some(ck),
                couplings: None,
            }
        }
    };
    if let Some(dir) = out {
        write_artifacts(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

fn write_artifacts(dir: &Path, cfg: &RunConfig, o: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&o.rows))?;
    let mut t = String::from("step,wall_time_s,iterations_per_second\n");
    for r in &o.timing {
        let _ = writeln!(t, "{},{:.6},{:.3}", r.step, r.wall_time_s, r.iterations_per_second);
    }
    std::fs::write(dir.join("timing.csv"), t)?;
    if let Some(ck) = &o.checkpoint {
        ck.save(&dir.join("checkpoint.json"))?;
    }
    if let Some((best, last)) = &o.couplings {
        let v = serde_json::json!({ "best": best, "final": last });
        std::fs::write(dir.join("couplings.json"), serde_json::to_string(&v)?)?;
    }
    let summary = serde_json::json!({
        "config": cfg,
        "optim": cfg.optim()?,
        "loss": cfg.loss(),
        "wall_time_s": o.wall_time_s,
        "iterations_per_second": o.iterations_per_second,
        "final": o.rows.last(),
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

struct EvalWith<'c> {
    cfg: &'c RunConfig,
    ck: Checkpoint,
}

impl TaskVisitor for EvalWith<'_> {
    type Output = MetricRow;

    fn visit<E: Environment>(self, env: &E, ev: Evaluator<E>) -> Result<MetricRow> {
        let mut tr = Trainer::new(env, self.cfg)?;
        tr.resume(self.ck)?;
        let key = tr.eval_key();
        let batch = forward_rollout(env, &tr.net, tr.optim.batch_size, key.fold_in(1), 0.0)?;
        let loss = LossBatch::new(env, &batch, &tr.loss)?.loss(&tr.net)?;
        let mut row = ev.evaluate(env, &tr.net, None, key)?;
        row.step = tr.step;
        row.loss = loss;
        Ok(row)
    }
}

/// Metrics of a saved policy, computed without training.
pub fn run_eval(cfg: &RunConfig, ck: Checkpoint, couplings: Option<&[f64]>) -> Result<MetricRow> {
    cfg.validate()?;
    let wants_rmse = cfg.eval.metrics.as_ref().is_some_and(|m| m.contains(&Metric::NegLogRmse));
    let mut plain = cfg.clone();
    if let Some(m) = plain.eval.metrics.as_mut() {
        m.retain(|x| *x != Metric::NegLogRmse);
    }
    let mut row = dispatch(&plain, EvalWith { cfg: &plain, ck })?;
    if wants_rmse {
        let EnvConfig::Ising(c) = &cfg.env else {
            return Err(unsupported("neg_log_rmse"));
        };
        let j = couplings.ok_or_else(|| Error::Missing("couplings file for neg_log_rmse".into()))?;
        row.neg_log_rmse = Some(neg_log_rmse(&IsingParams::lattice(c.n, c.sigma)?.j, j)?);
    }
    Ok(row)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub iterations: usize,
    pub repeats: usize,
    pub per_repeat: Vec<f64>,
    pub mean: f64,
    /// Three standard errors of the mean.
    pub pm_3se: f64,
}

impl BenchReport {
    pub fn from_rates(warmup: usize, iterations: usize, per_repeat: Vec<f64>) -> Self {
        let n = per_repeat.len() as f64;
        let mean = per_repeat.iter().sum::<f64>() / n;
        let var = if per_repeat.len() > 1 {
            per_repeat.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        BenchReport { warmup, iterations, repeats: per_repeat.len(), per_repeat, mean, pm_3se: 3.0 * (var / n).sqrt() }
    }
}

struct BenchWith<'c> {
    cfg: &'c RunConfig,
    warmup: usize,
    iterations: usize,
    repeats: usize,
}

impl TaskVisitor for BenchWith<'_> {
    type Output = BenchReport;

    fn visit<E: Environment>(self, env: &E, _ev: Evaluator<E>) -> Result<BenchReport> {
        let mut rates = Vec::with_capacity(self.repeats);
        for _ in 0..self.repeats {
            let mut tr = Trainer::new(env, self.cfg)?;
            for _ in 0..self.warmup {
                tr.train_step()?;
            }
            let start = Instant::now();
            for _ in 0..self.iterations {
                tr.train_step()?;
            }
            rates.push(self.iterations as f64 / start.elapsed().as_secs_f64().max(1e-12));
        }
        Ok(BenchReport::from_rates(self.warmup, self.iterations, rates))
    }
}

/// Training throughput in iterations per second, warmup excluded.
pub fn run_bench(cfg: &RunConfig, warmup: usize, iterations: usize, repeats: usize) -> Result<BenchReport> {
    if iterations == 0 || repeats == 0 {
        return config("bench needs at least one timed iteration and one repeat");
    }
    let mut quiet = cfg.clone();
    quiet.eval.metrics = Some(Vec::new());
    dispatch(&quiet, BenchWith { cfg: &quiet, warmup, iterations, repeats })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenKind {
    ErDag,
    Ising,
    PhyloSynthetic,
    Modes,
}

impl std::str::FromStr for GenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "er-dag" => GenKind::ErDag,
            "ising" => GenKind::Ising,
            "phylo-synthetic" => GenKind::PhyloSynthetic,
            "modes" => GenKind::Modes,
            other => return config(format!("unknown data kind `{other}`")),
        })
    }
}

impl GenKind {
    /// Environment section used when no configuration file is given.
    pub fn default_env(self) -> EnvConfig {
        let empty = toml::Table::new();
        let parse = |name: &str| -> EnvConfig {
            let mut t = empty.clone();
            t.insert("name".into(), name.into());
            if name == "bitseq" {
                t.insert("n".into(), 8.into());
                t.insert("k".into(), 2.into());
            }
            t.try_into().expect("defaults deserialize")
        };
        match self {
            GenKind::ErDag => parse("dag"),
            GenKind::Ising => parse("ising"),
            GenKind::PhyloSynthetic => parse("phylo"),
            GenKind::Modes => parse("bitseq"),
        }
    }
}

/// Writes a dataset and returns the paths created.
pub fn run_gendata(kind: GenKind, env: &EnvConfig, seed: u64, out: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out)?;
    match (kind, env) {
        (GenKind::ErDag, EnvConfig::Dag(c)) => {
            let data = generate_er_dataset(c.d, c.expected_in_degree, c.n_obs, c.noise_var, c.data_seed.unwrap_or(seed))?;
            let p = out.join("dag_data.csv");
            data.save(&p)?;
            let mut side = p.clone().into_os_string();
            side.push(".json");
            Ok(vec![p, side.into()])
        }
        (GenKind::Ising, EnvConfig::Ising(c)) => {
            let params = IsingParams::lattice(c.n, c.sigma)?;
            let xs = gibbs_data_sampler(&params, RngKey::new(seed).fold_in(0x6769626273), c.n_data, &c.gibbs)?;
            let p = out.join("ising_samples.txt");
            save_samples(&p, c.n, c.sigma, &xs)?;
            Ok(vec![p])
        }
        (GenKind::PhyloSynthetic, EnvConfig::Phylo(c)) => {
            let data = SpeciesData::synthetic(c.n_species, c.sites, &c.alphabet, RngKey::new(seed).fold_in(0x7068796c6f))?;
            let p = out.join("species.txt");
            data.save(&p)?;
            Ok(vec![p])
        }
        (GenKind::Modes, EnvConfig::Bitseq(c)) => {
            let (env, test) = build_bitseq(c, seed)?;
            let SeqReward::Modes { modes, .. } = &env.reward else { unreachable!("bitseq uses modes") };
            let bits = |x: &[u8]| x.iter().map(|b| char::from(b'0' + b)).collect::<String>();
            let mut m = format!("n={} beta={}\n", c.n, c.beta);
            for x in &modes.modes {
                let _ = writeln!(m, "{}", bits(x));
            }
            let mut t = String::from("sequence,log_reward\n");
            for x in &test {
                let s = env.terminal_state(env.from_bits(x));
                let _ = writeln!(t, "{},{:?}", bits(x), env.log_reward(&s)?);
            }
            let (pm, pt) = (out.join("modes.txt"), out.join("test_set.csv"));
            std::fs::write(&pm, m)?;
            std::fs::write(&pt, t)?;
            Ok(vec![pm, pt])
        }
        _ => config(format!("data kind {kind:?} does not match the configured environment")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnumKind {
    Dags,
    Trees,
    Target,
}

impl std::str::FromStr for EnumKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dags" => EnumKind::Dags,
            "trees" => EnumKind::Trees,
            "target" => EnumKind::Target,
            other => return config(format!("unknown enumeration `{other}`")),
        })
    }
}

/// Number of labelled DAGs on `d` nodes by exhaustive construction.
pub fn count_dags(d: usize) -> Result<usize> {
    Ok(enumerate_dags(d)?.len())
}

/// Number of distinct rooted tree topologies reachable by merges of `n` species.
pub fn count_trees(n: usize, cap: usize) -> Result<usize> {
    let data = SpeciesData::synthetic(n, 1, "AC", RngKey::new(0))?;
    let env = PhyloEnv::new(Arc::new(data), PhyloParams::default())?;
    let g = enumerate_state_graph(&env, cap)?;
    let mut keys: Vec<Vec<u8>> = g.terminals(&env).map(|i| env.terminal_key(&g.states[i])).collect();
    keys.sort();
    keys.dedup();
    Ok(keys.len())
}

struct TargetWith;

impl TaskVisitor for TargetWith {
    type Output = String;

    fn visit<E: Environment>(self, _env: &E, ev: Evaluator<E>) -> Result<String> {
        let t = ev.target.ok_or_else(|| Error::Unsupported("exact target distribution is not enumerable".into()))?;
        let mut s = String::from("key,probability\n");
        for (k, p) in t.keys.iter().zip(&t.probs) {
            let _ = writeln!(s, "{},{p:?}", hex(k));
        }
        Ok(s)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The exact target distribution of the configured environment as CSV
/// (`key` is the hex-encoded canonical terminal key).
pub fn target_csv(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.eval.metrics = Some(vec![Metric::Tv]);
    if let EnvConfig::Ising(i) = &mut c.env {
        i.mode = IsingMode::Sampler;
    }
    dispatch(&c, TargetWith)
}

/// Human-readable token string for a sequence terminal key.
pub fn describe_tokens(key: &[u8]) -> String {
    encode_tokens(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_cfg(iters: usize) -> RunConfig {
        RunConfig::parse(&format!(
            "seed = 3\n[env]\nname = \"hypergrid\"\nd = 1\nside = 4\n[optim]\niterations = {iters}\nhidden = 32\n[eval]\nevery = 100\nbuffer_capacity = 2000\n"
        ))
        .unwrap()
    }

    #[test]
    fn metric_csv_layout() {
        let row = MetricRow { step: 3, loss: 0.5, log_z: 1.0, tv: Some(0.25), ..Default::default() };
        assert_eq!(metrics_csv(&[row]), "step,loss,log_z,tv,jsd,pearson,topk_reward,topk_diversity,neg_log_rmse\n3,0.5,1.0,0.25,,,,,\n");
    }

    #[test]
    fn small_grid_trains_to_low_tv() {
        let out = run_train(&grid_cfg(2000), None).unwrap();
        let last = out.rows.last().unwrap();
        assert_eq!(last.step, 2000);
        assert!(last.tv.unwrap() < 0.05, "tv {:?}", last.tv);
        assert_eq!(out.rows.len(), 20);
    }

    #[test]
    fn same_seed_same_csv() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        run_train(&grid_cfg(300), Some(&a)).unwrap();
        run_train(&grid_cfg(300), Some(&b)).unwrap();
        let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        for f in ["timing.csv", "run.json", "checkpoint.json"] {
            assert!(a.join(f).exists());
        }
    }

    #[test]
    fn eval_of_untrained_policy_is_finite_and_repeatable() {
        let cfg = RunConfig::parse("[env]\nname = \"ising\"\nn = 2\n[optim]\nhidden = 16\n[eval]\nmetrics = [\"tv\", \"jsd\"]\neval_samples = 200\n").unwrap();
        let env = IsingEnv::new(IsingParams::lattice(2, 0.2).unwrap());
        let tr = Trainer::new(&env, &cfg).unwrap();
        let a = run_eval(&cfg, tr.checkpoint(), None).unwrap();
        let b = run_eval(&cfg, tr.checkpoint(), None).unwrap();
        assert_eq!(a, b);
        assert!(a.loss.is_finite() && a.tv.unwrap().is_finite() && a.jsd.unwrap().is_finite());
    }

    #[test]
    fn exact_metric_on_large_ising_is_unsupported() {
        let cfg = RunConfig::parse("[env]\nname = \"ising\"\nn = 10\n[optim]\nhidden = 8\n[eval]\nmetrics = [\"tv\"]\n").unwrap();
        let env = IsingEnv::new(IsingParams::lattice(10, 0.2).unwrap());
        let ck = Trainer::new(&env, &cfg).unwrap().checkpoint();
        assert!(matches!(run_eval(&cfg, ck, None), Err(Error::Unsupported(_))));
    }

    #[test]
    fn bench_reports_interval() {
        let r = run_bench(&grid_cfg(10), 5, 20, 3).unwrap();
        assert_eq!(r.per_repeat.len(), 3);
        assert!(r.mean > 0.0 && r.pm_3se >= 0.0);
        let fixed = BenchReport::from_rates(0, 1, vec![10.0, 12.0, 14.0]);
        assert_eq!(fixed.mean, 12.0);
        assert!((fixed.pm_3se - 3.0 * (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gendata_kinds() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [GenKind::ErDag, GenKind::Ising, GenKind::PhyloSynthetic, GenKind::Modes] {
            let files = run_gendata(kind, &kind.default_env(), 1, dir.path()).unwrap();
            assert!(files.iter().all(|f| f.exists()));
        }
        let d = Dataset::load(&dir.path().join("dag_data.csv")).unwrap();
        assert_eq!((d.d, d.n), (5, 100));
        let (n, sigma, xs) = load_samples(&dir.path().join("ising_samples.txt")).unwrap();
        assert_eq!((n, sigma, xs.len()), (3, 0.2, 2000));
        let modes = std::fs::read_to_string(dir.path().join("modes.txt")).unwrap();
        let words = ["00000000", "11111111", "11110000", "00001111", "00111100"];
        assert!(modes.lines().skip(1).all(|l| words.contains(&l)));
        assert!(run_gendata(GenKind::Modes, &GenKind::Ising.default_env(), 1, dir.path()).is_err());
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(count_dags(3).unwrap(), 25);
        assert_eq!(count_trees(4, 100_000).unwrap(), 15);
        let cfg = RunConfig::parse("[env]\nname = \"hypergrid\"\nd = 1\nside = 3\n").unwrap();
        let csv = target_csv(&cfg).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
}
