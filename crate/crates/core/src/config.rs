//! Run configuration, read from TOML. Unknown keys are errors; omitted
//! optimizer and evaluation settings fall back to per-environment defaults
//! taken from the published hyperparameter tables.
//!
//! ```toml
//! seed = 0
//!
//! [env]
//! name = "hypergrid"
//! d = 2
//! side = 8
//!
//! [objective]
//! objective = "tb"
//!
//! [optim]
//! iterations = 6250
//!
//! [eval]
//! every = 250
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::dag::ScoreKind;
use crate::env::hypergrid::HypergridParams;
use crate::env::ising::GibbsConfig;
use crate::env::sequence::SeqScheme;
use crate::error::{config, Error, Result};
use crate::nn::{AdamConfig, Schedule, ScheduleKind};
use crate::objectives::{LossConfig, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub env: EnvConfig,
    #[serde(default)]
    pub objective: Option<LossConfig>,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvConfig {
    Hypergrid(HypergridParams),
    Bitseq(BitseqConfig),
    Sequence(SequenceConfig),
    Dag(DagConfig),
    Ising(IsingConfig),
    Phylo(PhyloConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitseqConfig {
    pub n: usize,
    pub k: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_bitseq_scheme")]
    pub scheme: SeqScheme,
    /// Seed for the mode set and test set; the run seed when absent.
    #[serde(default)]
    pub modes_seed: Option<u64>,
}

fn default_beta() -> f64 {
    3.0
}

fn default_bitseq_scheme() -> SeqScheme {
    SeqScheme::NonAutoregressive
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    #[serde(default = "default_seq_scheme")]
    pub scheme: SeqScheme,
    /// Reward table file (`vocab=<m> length=<n>` header).
    pub table: PathBuf,
    #[serde(default)]
    pub r_min: Option<f64>,
    #[serde(default = "default_true")]
    pub strict: bool,
}

fn default_seq_scheme() -> SeqScheme {
    SeqScheme::AutoregressiveFixed
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreName {
    Lingauss,
    Bge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagConfig {
    #[serde(default = "default_dag_d")]
    pub d: usize,
    /// CSV dataset; generated from an Erdős–Rényi graph when absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_n_obs")]
    pub n_obs: usize,
    #[serde(default = "default_in_degree")]
    pub expected_in_degree: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default = "default_score")]
    pub score: ScoreName,
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    #[serde(default = "default_noise_var")]
    pub obs_var: f64,
    #[serde(default = "default_alpha_mu")]
    pub alpha_mu: f64,
    #[serde(default)]
    pub alpha_w: Option<f64>,
}

fn default_dag_d() -> usize {
    5
}
fn default_n_obs() -> usize {
    100
}
fn default_in_degree() -> f64 {
    1.0
}
fn default_noise_var() -> f64 {
    0.1
}
fn default_score() -> ScoreName {
    ScoreName::Lingauss
}
fn default_prior_var() -> f64 {
    1.0
}
fn default_alpha_mu() -> f64 {
    1.0
}

impl DagConfig {
    pub fn score_kind(&self) -> ScoreKind {
        match self.score {
            ScoreName::Lingauss => ScoreKind::Lingauss { prior_var: self.prior_var, obs_var: self.obs_var },
            ScoreName::Bge => ScoreKind::Bge { alpha_mu: self.alpha_mu, alpha_w: self.alpha_w },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IsingMode {
    /// Train a sampler for the fixed lattice couplings.
    Sampler,
    /// Learn couplings from data with the energy-based loop.
    EbGfn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingConfig {
    #[serde(default = "default_ising_n")]
    pub n: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_ising_mode")]
    pub mode: IsingMode,
    /// Sample file for the energy-based loop; generated by heat bath when absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_n_data")]
    pub n_data: usize,
    #[serde(default = "default_mix")]
    pub alpha: f64,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_lr_energy")]
    pub lr_energy: f64,
    #[serde(default)]
    pub gibbs: GibbsConfig,
}

fn default_ising_n() -> usize {
    3
}
fn default_sigma() -> f64 {
    0.2
}
fn default_ising_mode() -> IsingMode {
    IsingMode::Sampler
}
fn default_n_data() -> usize {
    2000
}
fn default_mix() -> f64 {
    0.5
}
fn default_lr_energy() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhyloConfig {
    /// Species file; synthetic data is generated when absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_species")]
    pub n_species: usize,
    #[serde(default = "default_sites")]
    pub sites: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: String,
    #[serde(default = "default_phylo_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub c: f64,
}

fn default_species() -> usize {
    5
}
fn default_sites() -> usize {
    20
}
fn default_alphabet() -> String {
    "ACGT".into()
}
fn default_phylo_alpha() -> f64 {
    4.0
}

/// Optimizer and rollout settings. Every field is optional; see
/// [`OptimSection::resolve`] for the per-environment defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_z: Option<f64>,
    pub schedule: Option<ScheduleKind>,
    pub lr_end: Option<f64>,
    pub warmup: Option<u64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub log_z_init: Option<f64>,
    pub explore_start: Option<f64>,
    pub explore_end: Option<f64>,
    /// Fraction of training over which exploration is annealed.
    pub explore_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Optim {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: Schedule,
    pub lr_z: f64,
    pub adam: AdamConfig,
    pub hidden: usize,
    pub layers: usize,
    pub log_z_init: f64,
    pub explore: Schedule,
}

struct Defaults {
    iterations: usize,
    batch: usize,
    lr: f64,
    lr_z: f64,
    schedule: ScheduleKind,
    lr_end: f64,
    warmup: u64,
    weight_decay: f64,
    hidden: usize,
    layers: usize,
    explore: (f64, f64, f64),
}

fn defaults(env: &EnvConfig) -> Defaults {
    let base = Defaults {
        iterations: 1_000_000 / 16,
        batch: 16,
        lr: 1e-3,
        lr_z: 1e-1,
        schedule: ScheduleKind::Constant,
        lr_end: 1e-3,
        warmup: 0,
        weight_decay: 0.0,
        hidden: 256,
        layers: 2,
        explore: (0.0, 0.0, 1.0),
    };
    match env {
        EnvConfig::Hypergrid(_) => base,
        EnvConfig::Bitseq(_) => Defaults {
            iterations: 50_000,
            lr_z: 0.05,
            weight_decay: 1e-5,
            hidden: 64,
            layers: 3,
            explore: (1e-3, 1e-3, 1.0),
            ..base
        },
        EnvConfig::Sequence(_) => Defaults {
            iterations: 1_000_000,
            lr: 5e-4,
            lr_end: 5e-4,
            lr_z: 0.05,
            explore: (1.0, 0.0, 1.0),
            ..base
        },
        EnvConfig::Dag(_) => Defaults {
            iterations: 100_000,
            batch: 128,
            lr: 1e-4,
            lr_end: 1e-4,
            lr_z: 1e-4,
            hidden: 128,
            explore: (1.0, 0.1, 0.5),
            ..base
        },
        EnvConfig::Ising(_) => Defaults { iterations: 20_000, batch: 256, layers: 4, ..base },
        EnvConfig::Phylo(_) => Defaults {
            iterations: 3_200_000 / 32,
            batch: 32,
            lr: 3e-4,
            lr_z: 3e-4,
            schedule: ScheduleKind::Cosine,
            lr_end: 1e-5,
            warmup: 5000,
            layers: 3,
            explore: (1.0, 0.0, 0.5),
            ..base
        },
    }
}

impl OptimSection {
    pub fn resolve(&self, env: &EnvConfig) -> Result<Optim> {
        let d = defaults(env);
        let iterations = self.iterations.unwrap_or(d.iterations);
        let batch_size = self.batch_size.unwrap_or(d.batch);
        let lr = self.lr.unwrap_or(d.lr);
        let kind = self.schedule.unwrap_or(d.schedule);
        let lr_end = self.lr_end.unwrap_or(if self.lr.is_some() && kind == ScheduleKind::Constant { lr } else { d.lr_end });
        let warmup = self.warmup.unwrap_or(d.warmup);
        let lr_sched = Schedule { kind, start: lr, end: lr_end, warmup, horizon: iterations as u64 };
        let (e0, e1, frac) = d.explore;
        let e0 = self.explore_start.unwrap_or(e0);
        let e1 = self.explore_end.unwrap_or(e1);
        let frac = self.explore_fraction.unwrap_or(frac);
        if iterations == 0 || batch_size == 0 {
            return config("iterations and batch_size must be at least 1");
        }
        if !(lr > 0.0 && lr_end > 0.0) {
            return config("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&e0) || !(0.0..=1.0).contains(&e1) || !(frac > 0.0 && frac <= 1.0) {
            return config("exploration rates must lie in [0, 1] and the anneal fraction in (0, 1]");
        }
        let explore = Schedule::linear(e0, e1, ((iterations as f64 * frac).round() as u64).max(1));
        let adam = AdamConfig {
            beta1: self.beta1.unwrap_or(0.9),
            beta2: self.beta2.unwrap_or(0.999),
            eps: self.adam_eps.unwrap_or(1e-8),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            decoupled: false,
        };
        let layers = self.layers.unwrap_or(d.layers);
        let hidden = self.hidden.unwrap_or(d.hidden);
        if layers == 0 || hidden == 0 {
            return config("the MLP needs at least one hidden layer of nonzero width");
        }
        Ok(Optim {
            iterations,
            batch_size,
            lr: lr_sched,
            lr_z: self.lr_z.unwrap_or(d.lr_z),
            adam,
            hidden,
            layers,
            log_z_init: self.log_z_init.unwrap_or(0.0),
            explore,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Tv,
    Jsd,
    Pearson,
    Topk,
    NegLogRmse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Iterations between metric rows; a row is always written at the end.
    #[serde(default)]
    pub every: Option<usize>,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Metrics to compute; environment-dependent defaults when absent.
    #[serde(default)]
    pub metrics: Option<Vec<Metric>>,
    /// Fresh forward samples used for top-k and, outside training, TV.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_topk")]
    pub topk: usize,
    /// Largest state graph enumerated for exact metrics.
    #[serde(default = "default_state_cap")]
    pub state_cap: usize,
}

fn default_capacity() -> usize {
    crate::buffer::DEFAULT_CAPACITY
}
fn default_mc() -> usize {
    10
}
fn default_eval_samples() -> usize {
    1000
}
fn default_topk() -> usize {
    100
}
fn default_state_cap() -> usize {
    200_000
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            every: None,
            buffer_capacity: default_capacity(),
            mc_samples: default_mc(),
            metrics: None,
            eval_samples: default_eval_samples(),
            topk: default_topk(),
            state_cap: default_state_cap(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss(&self) -> LossConfig {
        self.objective.clone().unwrap_or_else(|| {
            LossConfig::new(match self.env {
                EnvConfig::Dag(_) => Objective::Mdb,
                EnvConfig::Phylo(_) => Objective::Fldb,
                _ => Objective::Tb,
            })
        })
    }

    pub fn optim(&self) -> Result<Optim> {
        self.optim.resolve(&self.env)
    }

    pub fn eval_every(&self) -> Result<usize> {
        let iters = self.optim()?.iterations;
        Ok(self.eval.every.unwrap_or((iters / 20).max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        self.optim()?;
        if self.eval.every == Some(0) || self.eval.mc_samples == 0 || self.eval.topk == 0 {
            return config("eval.every, eval.mc_samples and eval.topk must be at least 1");
        }
        if self.eval.buffer_capacity == 0 {
            return config("eval.buffer_capacity must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_defaults_follow_the_table() {
        let cfg = RunConfig::parse("[env]\nname = \"hypergrid\"\nd = 2\nside = 8\n").unwrap();
        let o = cfg.optim().unwrap();
        assert_eq!(o.lr.value(10), 1e-3);
        assert_eq!(o.lr_z, 0.1);
        assert_eq!(o.batch_size, 16);
        assert_eq!((o.hidden, o.layers), (256, 2));
        assert_eq!(o.iterations * o.batch_size, 1_000_000);
        assert_eq!(o.adam, AdamConfig::default());
        assert_eq!(cfg.loss().objective, Objective::Tb);
        let sub = RunConfig::parse("[env]\nname = \"hypergrid\"\nd = 2\nside = 8\n[objective]\nobjective = \"subtb\"\n").unwrap();
        assert_eq!(sub.loss().lambda, 0.9);
    }

    #[test]
    fn bitseq_z_rate() {
        let cfg = RunConfig::parse("[env]\nname = \"bitseq\"\nn = 8\nk = 2\n").unwrap();
        let o = cfg.optim().unwrap();
        assert_eq!(o.lr_z, 0.05);
        assert_eq!(o.adam.weight_decay, 1e-5);
        assert_eq!(o.explore.value(0), 1e-3);
    }

    #[test]
    fn phylo_and_dag_schedules() {
        let cfg = RunConfig::parse("[env]\nname = \"phylo\"\n").unwrap();
        let o = cfg.optim().unwrap();
        assert_eq!(o.lr.value(0), 0.0);
        assert!((o.lr.value(5000) - 3e-4).abs() < 1e-15);
        assert!((o.lr.value(o.iterations as u64) - 1e-5).abs() < 1e-15);
        assert_eq!(o.explore.value(0), 1.0);
        assert_eq!(o.explore.value(o.iterations as u64 / 2), 0.0);

        let dag = RunConfig::parse("[env]\nname = \"dag\"\n").unwrap();
        let o = dag.optim().unwrap();
        assert_eq!((o.iterations, o.batch_size), (100_000, 128));
        assert!((o.explore.value(50_000) - 0.1).abs() < 1e-12);
        assert_eq!(dag.loss().objective, Objective::Mdb);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[env]\nname = \"hypergrid\"\nd = 2\nside = 8\nsides = 3\n").is_err());
        assert!(RunConfig::parse("[env]\nname = \"hypergrid\"\nd = 2\nside = 8\n[optim]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::parse("seeds = 1\n[env]\nname = \"ising\"\n").is_err());
        assert!(RunConfig::parse("[env]\nname = \"torus\"\n").is_err());
        assert!(RunConfig::parse("[env]\nname = \"ising\"\n[objective]\nobjective = \"tb\"\nlamda = 0.5\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let text = "seed = 7\n[env]\nname = \"dag\"\nd = 3\nscore = \"bge\"\n[optim]\niterations = 10\n[eval]\nmetrics = [\"jsd\"]\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(matches!(cfg.env, EnvConfig::Dag(ref d) if matches!(d.score_kind(), ScoreKind::Bge { .. })));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("[env]\nname = \"ising\"\n[optim]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::parse("[env]\nname = \"ising\"\n[objective]\nobjective = \"subtb\"\nlambda = 0.0\n").is_err());
        assert!(RunConfig::parse("[env]\nname = \"ising\"\n[optim]\nexplore_start = 2.0\n").is_err());
    }
}
