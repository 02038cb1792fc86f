//! Evaluation metrics over terminal distributions.

use std::collections::HashMap;

use crate::env::{backward_rollout, Environment};
use crate::error::{Error, Result};
use crate::nn::logsumexp;
use crate::objectives::trajectory_log_probs;
use crate::policy::Policy;
use crate::rng::{uniform, RngKey};

/// Enumerated terminal objects (canonical byte keys) and their probabilities.
#[derive(Clone, Debug)]
pub struct ExactDistribution {
    pub keys: Vec<Vec<u8>>,
    pub probs: Vec<f64>,
    index: HashMap<Vec<u8>, usize>,
}

impl ExactDistribution {
    /// Normalizes log-weights with logsumexp. Keys must be distinct.
    pub fn from_log_weights(keys: Vec<Vec<u8>>, log_weights: &[f64]) -> Result<Self> {
        if keys.len() != log_weights.len() || keys.is_empty() {
            return Err(Error::Shape(format!(
                "{} keys for {} weights",
                keys.len(),
                log_weights.len()
            )));
        }
        let lse = logsumexp(log_weights);
        if !lse.is_finite() {
            return Err(Error::Numeric("log-partition is not finite".into()));
        }
        let probs = log_weights.iter().map(|w| (w - lse).exp()).collect();
        Self::from_probs(keys, probs)
    }

    pub fn from_probs(keys: Vec<Vec<u8>>, probs: Vec<f64>) -> Result<Self> {
        if keys.len() != probs.len() {
            return Err(Error::Shape("keys and probabilities differ in length".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Numeric("probabilities must be finite and nonnegative".into()));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate terminal key {k:?}")));
            }
        }
        Ok(ExactDistribution { keys, probs, index })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &[u8]) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn prob(&self, key: &[u8]) -> f64 {
        self.index_of(key).map_or(0.0, |i| self.probs[i])
    }

    /// I.i.d. draws of keys (the perfect sampler).
    pub fn sample(&self, key: RngKey, n: usize) -> Vec<Vec<u8>> {
        let mut cdf = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p;
            cdf.push(acc);
        }
        let mut rng = key.rng();
        (0..n)
            .map(|_| {
                let u = uniform(&mut rng) * acc;
                let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                self.keys[i].clone()
            })
            .collect()
    }
}

/// Counts of observed terminal keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmpiricalDistribution {
    pub counts: HashMap<Vec<u8>, u64>,
    pub total: u64,
}

impl EmpiricalDistribution {
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a Vec<u8>>) -> Self {
        let mut e = EmpiricalDistribution::default();
        for k in keys {
            *e.counts.entry(k.clone()).or_insert(0) += 1;
            e.total += 1;
        }
        e
    }

    pub fn freq(&self, key: &[u8]) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(key).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

/// `½ Σ |p̂ − p|` over the union of both supports.
pub fn tv_distance(emp: &EmpiricalDistribution, exact: &ExactDistribution) -> Result<f64> {
    if emp.total == 0 {
        return Err(Error::Contract("total variation of an empty sample".into()));
    }
    let mut s = 0.0;
    for (k, p) in exact.keys.iter().zip(&exact.probs) {
        s += (emp.freq(k) - p).abs();
    }
    for (k, &c) in &emp.counts {
        if exact.index_of(k).is_none() {
            s += c as f64 / emp.total as f64;
        }
    }
    Ok(0.5 * s)
}

/// Total variation between two probability vectors on a shared support.
pub fn tv_probs(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("supports of size {} and {}", p.len(), q.len())));
    }
    Ok(())
}

/// Jensen–Shannon divergence in nats with `0 · log 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    Ok(s.max(0.0))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    same_len(xs, ys)?;
    let n = xs.len();
    if n < 2 {
        return Err(Error::Contract("correlation needs at least two points".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("correlation with zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Edge,
    Path,
    MarkovBlanket,
}

/// Posterior marginals of pairwise DAG features. Graphs are given as
/// row bitmasks (`rows[i]` bit `j` set iff `i → j`). Returns a row-major
/// `d × d` matrix.
pub fn feature_marginals(graphs: &[Vec<u32>], probs: &[f64], d: usize, kind: FeatureKind) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for (g, &p) in graphs.iter().zip(probs) {
        if p == 0.0 {
            continue;
        }
        let feat = match kind {
            FeatureKind::Edge => g.clone(),
            FeatureKind::Path => reachability(g, d),
            FeatureKind::MarkovBlanket => markov_blanket(g, d),
        };
        for i in 0..d {
            for j in 0..d {
                if feat[i] >> j & 1 == 1 {
                    out[i * d + j] += p;
                }
            }
        }
    }
    out
}

/// Row bitmasks of "there is a directed path of length ≥ 1 from i to j".
pub fn reachability(g: &[u32], d: usize) -> Vec<u32> {
    let mut r = g.to_vec();
    for k in 0..d {
        for i in 0..d {
            if r[i] >> k & 1 == 1 {
                r[i] |= r[k];
            }
        }
    }
    r
}

fn markov_blanket(g: &[u32], d: usize) -> Vec<u32> {
    let mut mb = vec![0u32; d];
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let edge = g[i] >> j & 1 == 1 || g[j] >> i & 1 == 1;
            let coparent = (g[i] & g[j]) != 0;
            if edge || coparent {
                mb[i] |= 1 << j;
            }
        }
    }
    mb
}

pub fn hamming<T: PartialEq>(x: &[T], y: &[T]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("hamming over lengths {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).filter(|(a, b)| a != b).count())
}

/// Levenshtein distance.
pub fn edit_distance<T: PartialEq>(x: &[T], y: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=y.len()).collect();
    let mut cur = vec![0; y.len() + 1];
    for (i, a) in x.iter().enumerate() {
        cur[0] = i + 1;
        for (j, b) in y.iter().enumerate() {
            let sub = prev[j] + usize::from(a != b);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[y.len()]
}

/// Mean reward of the `k` highest-reward samples and their mean pairwise
/// distance (Hamming when all have equal length, edit distance otherwise).
pub fn topk_reward_diversity<T: PartialEq + Clone>(
    samples: &[Vec<T>],
    rewards: &[f64],
    k: usize,
) -> Result<(f64, f64)> {
    if samples.len() != rewards.len() {
        return Err(Error::Shape("samples and rewards differ in length".into()));
    }
    if k == 0 || k > samples.len() {
        return Err(Error::Contract(format!("top-{k} of {} samples", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    let top = &order[..k];
    let mean_reward = top.iter().map(|&i| rewards[i]).sum::<f64>() / k as f64;
    let fixed = top.iter().all(|&i| samples[i].len() == samples[top[0]].len());
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            let (x, y) = (&samples[top[a]], &samples[top[b]]);
            total += if fixed { hamming(x, y)? } else { edit_distance(x, y) } as f64;
            pairs += 1;
        }
    }
    let diversity = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    Ok((mean_reward, diversity))
}

/// Monte-Carlo estimate of `log P_θ(x)` from `n` backward trajectories:
/// `log (1/n) Σ P_F(τ)/P_B(τ|x)`.
pub fn mc_terminal_logprob<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    x: &E::State,
    n: usize,
    key: RngKey,
) -> Result<f64> {
    Ok(mc_terminal_logprobs(env, policy, std::slice::from_ref(x), n, key)?[0])
}

/// Batched [`mc_terminal_logprob`] over several terminals, one rollout call.
pub fn mc_terminal_logprobs<E: Environment, P: Policy + ?Sized>(
    env: &E,
    policy: &P,
    xs: &[E::State],
    n: usize,
    key: RngKey,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("Monte-Carlo sample count must be at least 1".into()));
    }
    let repeated: Vec<E::State> = xs
        .iter()
        .flat_map(|x| std::iter::repeat_n(x.clone(), n))
        .collect();
    let batch = backward_rollout(env, policy, &repeated, key)?;
    let (log_pf, log_pb) = trajectory_log_probs(env, policy, &batch)?;
    let ratios: Vec<f64> = log_pf.iter().zip(&log_pb).map(|(f, b)| f - b).collect();
    Ok(ratios
        .chunks(n)
        .map(|c| logsumexp(c) - (n as f64).ln())
        .collect())
}
