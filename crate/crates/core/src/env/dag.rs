//! Bayesian-network structure learning: edge-by-edge DAG construction with
//! an incrementally maintained transitive closure, modular local scores and
//! exact posterior enumeration.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{config, contract, Error, Result};
use crate::metrics::ExactDistribution;
use crate::rng::RngKey;

pub const MAX_NODES: usize = 16;

/// `adj[i]` bit `j` ⇔ edge `i → j`. `closure_t[i]` bit `j` ⇔ `j ⇝ i`
/// (reflexive transitive closure of the transpose graph).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DagState {
    pub adj: Vec<u32>,
    pub closure_t: Vec<u32>,
    pub stopped: bool,
}

impl DagState {
    pub fn empty(d: usize) -> Self {
        DagState {
            adj: vec![0; d],
            closure_t: (0..d).map(|i| 1u32 << i).collect(),
            stopped: false,
        }
    }

    pub fn from_adjacency(adj: Vec<u32>) -> Result<Self> {
        let closure_t = closure_from_scratch(&adj);
        let d = adj.len();
        for i in 0..d {
            if adj[i] >> i & 1 == 1 {
                return contract("adjacency contains a self-loop");
            }
            if (0..d).any(|j| j != i && closure_t[i] >> j & 1 == 1 && closure_t[j] >> i & 1 == 1) {
                return contract("adjacency contains a cycle");
            }
        }
        Ok(DagState { adj, closure_t, stopped: false })
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(|r| r.count_ones() as usize).sum()
    }

    pub fn parents(&self, j: usize) -> u32 {
        self.adj
            .iter()
            .enumerate()
            .filter(|(_, r)| *r >> j & 1 == 1)
            .fold(0, |acc, (i, _)| acc | 1 << i)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u] >> v & 1 == 1
    }

    /// Whether adding `u → v` keeps the graph a DAG without duplicating an edge.
    pub fn can_add(&self, u: usize, v: usize) -> bool {
        !self.has_edge(u, v) && self.closure_t[u] >> v & 1 == 0
    }
}

/// Adds the paths created by a new edge `u → v` to a transpose closure.
pub fn closure_update(closure_t: &mut [u32], u: usize, v: usize) {
    let from_u = closure_t[u];
    for row in closure_t.iter_mut() {
        if *row >> v & 1 == 1 {
            *row |= from_u;
        }
    }
}

/// Reflexive transitive closure of the transpose of `adj`, by Floyd–Warshall.
pub fn closure_from_scratch(adj: &[u32]) -> Vec<u32> {
    let d = adj.len();
    let mut reach: Vec<Vec<bool>> = (0..d).map(|i| (0..d).map(|j| i == j || adj[i] >> j & 1 == 1).collect()).collect();
    for k in 0..d {
        for i in 0..d {
            if reach[i][k] {
                for j in 0..d {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // closure_t[i] bit j ⇔ j ⇝ i
    (0..d)
        .map(|i| (0..d).filter(|&j| reach[j][i]).fold(0u32, |acc, j| acc | 1 << j))
        .collect()
}

/// Observations `N × d`, row-major, with generation metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub d: usize,
    pub n: usize,
    #[serde(skip)]
    pub values: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    /// `weights[i * d + j]` is the weight of `i → j` (zero without an edge).
    pub weights: Vec<f64>,
    pub noise_var: f64,
    pub expected_in_degree: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn from_values(d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 || values.is_empty() || values.len() % d != 0 {
            return config("dataset needs d >= 1 and a whole number of rows");
        }
        Ok(Dataset {
            d,
            n: values.len() / d,
            values,
            edges: Vec::new(),
            weights: vec![0.0; d * d],
            noise_var: 0.0,
            expected_in_degree: 0.0,
            seed: 0,
        })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.values[r * self.d + j]).collect()
    }

    pub fn ground_truth(&self) -> Vec<u32> {
        let mut adj = vec![0u32; self.d];
        for &(i, j) in &self.edges {
            adj[i] |= 1 << j;
        }
        adj
    }

    /// Writes `<path>` as CSV with header `X0,...` and `<path>.json` metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record((0..self.d).map(|j| format!("X{j}"))).map_err(csv_io)?;
        for r in 0..self.n {
            w.write_record(self.values[r * self.d..(r + 1) * self.d].iter().map(|v| format!("{v:?}")))
                .map_err(csv_io)?;
        }
        w.flush()?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Reads a CSV dataset and, when present, its metadata sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_io)?;
        let d = r.headers().map_err(csv_io)?.len();
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_io)?;
            if rec.len() != d {
                return Err(Error::Parse { path: path.into(), line: i + 2, msg: "ragged row".into() });
            }
            for f in rec.iter() {
                values.push(f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.into(),
                    line: i + 2,
                    msg: e.to_string(),
                })?);
            }
        }
        let mut ds = Dataset::from_values(d, values)?;
        let side = sidecar(path);
        if side.exists() {
            let meta: Dataset = serde_json::from_str(&std::fs::read_to_string(side)?)?;
            if meta.d != d || meta.n != ds.n {
                return config("dataset sidecar does not match the CSV shape");
            }
            ds = Dataset { values: ds.values, ..meta };
        }
        Ok(ds)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Erdős–Rényi ground truth over a random topological order with edge
/// probability `min(1, 2k/(d−1))`, Gaussian weights `N(0,1)` and
/// linear-Gaussian ancestral sampling with noise variance `noise_var`.
pub fn generate_er_dataset(d: usize, expected_in_degree: f64, n: usize, noise_var: f64, seed: u64) -> Result<Dataset> {
    if d == 0 || d > MAX_NODES || n == 0 {
        return config(format!("ER dataset needs 1 <= d <= {MAX_NODES} and N >= 1"));
    }
    if !(expected_in_degree >= 0.0 && noise_var > 0.0) {
        return config("expected in-degree must be nonnegative and noise variance positive");
    }
    let key = RngKey::new(seed);
    let (gk, dk) = key.split();
    let mut rng = gk.rng();
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    let p = if d > 1 { (2.0 * expected_in_degree / (d - 1) as f64).min(1.0) } else { 0.0 };
    let mut edges = Vec::new();
    let mut weights = vec![0.0; d * d];
    for a in 0..d {
        for b in a + 1..d {
            if rng.random::<f64>() < p {
                let (i, j) = (order[a], order[b]);
                edges.push((i, j));
                weights[i * d + j] = StandardNormal.sample(&mut rng);
            }
        }
    }
    edges.sort();
    let mut rng = dk.rng();
    let sd = noise_var.sqrt();
    let mut values = vec![0.0; n * d];
    for r in 0..n {
        let row = &mut values[r * d..(r + 1) * d];
        for &j in &order {
            let mean: f64 = (0..d).map(|i| weights[i * d + j] * row[i]).sum();
            let z: f64 = StandardNormal.sample(&mut rng);
            row[j] = mean + sd * z;
        }
    }
    Ok(Dataset { d, n, values, edges, weights, noise_var, expected_in_degree, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScoreKind {
    /// Linear-Gaussian with `w ~ N(0, prior_var)` and noise variance `obs_var`.
    Lingauss { prior_var: f64, obs_var: f64 },
    /// BGe with scale matrix `t·I` where `t = α_μ(α_w − d − 1)/(α_μ + 1)`.
    Bge { alpha_mu: f64, alpha_w: Option<f64> },
}

impl Default for ScoreKind {
    fn default() -> Self {
        ScoreKind::Lingauss { prior_var: 1.0, obs_var: 0.1 }
    }
}

fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numeric("matrix is not positive definite".into()));
        }
        let l = s.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

fn chol_logdet(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}

/// Solves `L Lᵀ x = b` in place.
fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn bits(mask: u32) -> Vec<usize> {
    (0..32).filter(|&i| mask >> i & 1 == 1).collect()
}

fn log_multigamma(a: f64, p: usize) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=p).map(|i| libm::lgamma(a + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

/// Sufficient statistics for the local scores.
#[derive(Clone, Debug)]
pub struct ScoreStats {
    pub d: usize,
    pub n: usize,
    /// `Xᵀ X`.
    pub gram: Vec<f64>,
    /// BGe posterior scale `R = T + S_N + (N α_μ/(N + α_μ)) x̄ x̄ᵀ`.
    pub bge_r: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreStats {
    pub fn new(data: &Dataset, kind: ScoreKind) -> Result<Self> {
        let (d, n) = (data.d, data.n);
        let mut gram = vec![0.0; d * d];
        for r in 0..n {
            let x = &data.values[r * d..(r + 1) * d];
            for i in 0..d {
                for j in 0..d {
                    gram[i * d + j] += x[i] * x[j];
                }
            }
        }
        let mut bge_r = vec![0.0; d * d];
        match kind {
            ScoreKind::Lingauss { prior_var, obs_var } => {
                if !(prior_var > 0.0 && obs_var > 0.0) {
                    return config("linear-Gaussian variances must be positive");
                }
            }
            ScoreKind::Bge { alpha_mu, alpha_w } => {
                let aw = alpha_w.unwrap_or(d as f64 + 2.0);
                if !(alpha_mu > 0.0 && aw > d as f64 - 1.0) {
                    return config("BGe needs alpha_mu > 0 and alpha_w > d - 1");
                }
                let t = alpha_mu * (aw - d as f64 - 1.0) / (alpha_mu + 1.0);
                if t <= 0.0 {
                    return config("BGe scale t must be positive (alpha_w > d + 1)");
                }
                let mean: Vec<f64> = (0..d).map(|j| data.column(j).iter().sum::<f64>() / n as f64).collect();
                let c = n as f64 * alpha_mu / (n as f64 + alpha_mu);
                for i in 0..d {
                    for j in 0..d {
                        let s_n = gram[i * d + j] - n as f64 * mean[i] * mean[j];
                        bge_r[i * d + j] = s_n + c * mean[i] * mean[j] + if i == j { t } else { 0.0 };
                    }
                }
            }
        }
        Ok(ScoreStats { d, n, gram, bge_r, kind })
    }

    fn sub(&self, m: &[f64], idx: &[usize]) -> Vec<f64> {
        let k = idx.len();
        let mut out = vec![0.0; k * k];
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[a * k + b] = m[i * self.d + j];
            }
        }
        out
    }

    /// `log P(D_Y)` of the BGe model for the variable subset `Y`.
    pub fn bge_log_marginal(&self, y: u32) -> Result<f64> {
        let ScoreKind::Bge { alpha_mu, alpha_w } = self.kind else {
            return Err(Error::Unsupported("not a BGe score".into()));
        };
        let idx = bits(y);
        let l = idx.len();
        if l == 0 {
            return Ok(0.0);
        }
        let (d, n) = (self.d as f64, self.n as f64);
        let aw = alpha_w.unwrap_or(d + 2.0);
        let t = alpha_mu * (aw - d - 1.0) / (alpha_mu + 1.0);
        let lf = l as f64;
        let mut r = self.sub(&self.bge_r, &idx);
        cholesky(&mut r, l)?;
        let logdet_r = chol_logdet(&r, l);
        let logdet_t = lf * t.ln();
        Ok(-lf * n / 2.0 * std::f64::consts::PI.ln() + lf / 2.0 * (alpha_mu / (n + alpha_mu)).ln()
            + log_multigamma((n + aw - d + lf) / 2.0, l)
            - log_multigamma((aw - d + lf) / 2.0, l)
            + (aw - d + lf) / 2.0 * logdet_t
            - (n + aw - d + lf) / 2.0 * logdet_r)
    }

    /// Log marginal likelihood of column `j` given parent set `parents`.
    pub fn local_score(&self, j: usize, parents: u32) -> Result<f64> {
        if parents >> j & 1 == 1 {
            return contract("a node cannot be its own parent");
        }
        match self.kind {
            ScoreKind::Lingauss { prior_var, obs_var } => {
                let pa = bits(parents);
                let k = pa.len();
                let n = self.n as f64;
                let yy = self.gram[j * self.d + j];
                let mut a = self.sub(&self.gram, &pa);
                for v in a.iter_mut() {
                    *v /= obs_var;
                }
                for i in 0..k {
                    a[i * k + i] += 1.0 / prior_var;
                }
                let mut xty: Vec<f64> = pa.iter().map(|&i| self.gram[i * self.d + j] / obs_var).collect();
                cholesky(&mut a, k)?;
                let logdet = n * obs_var.ln() + k as f64 * prior_var.ln() + chol_logdet(&a, k);
                let rhs = xty.clone();
                chol_solve(&a, k, &mut xty);
                let quad = yy / obs_var - rhs.iter().zip(&xty).map(|(p, q)| p * q).sum::<f64>();
                Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
            }
            ScoreKind::Bge { .. } => Ok(self.bge_log_marginal(parents | 1 << j)? - self.bge_log_marginal(parents)?),
        }
    }
}

/// All local scores, indexed `[node][parent mask]`.
#[derive(Clone, Debug)]
pub struct LocalScoreCache {
    pub d: usize,
    scores: Vec<Vec<f64>>,
}

impl LocalScoreCache {
    pub fn build(stats: &ScoreStats) -> Result<Self> {
        let d = stats.d;
        if d > MAX_NODES {
            return Err(Error::CapExceeded { what: "local score cache nodes", needed: d as u128, cap: MAX_NODES as u128 });
        }
        let mut scores = Vec::with_capacity(d);
        for j in 0..d {
            let mut row = vec![f64::NAN; 1 << d];
            for (mask, slot) in row.iter_mut().enumerate() {
                if mask >> j & 1 == 0 {
                    *slot = stats.local_score(j, mask as u32)?;
                }
            }
            scores.push(row);
        }
        Ok(LocalScoreCache { d, scores })
    }

    pub fn get(&self, j: usize, parents: u32) -> f64 {
        self.scores[j][parents as usize]
    }

    /// `LocalScore(j | Pa ∪ {i}) − LocalScore(j | Pa)`.
    pub fn delta_score(&self, j: usize, parents: u32, i: usize) -> f64 {
        self.get(j, parents | 1 << i) - self.get(j, parents)
    }

    pub fn log_reward(&self, adj: &[u32]) -> f64 {
        (0..self.d)
            .map(|j| {
                let pa = adj.iter().enumerate().filter(|(_, r)| *r >> j & 1 == 1).fold(0u32, |a, (i, _)| a | 1 << i);
                self.get(j, pa)
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct DagEnv {
    pub d: usize,
    pub cache: Arc<LocalScoreCache>,
}

impl DagEnv {
    pub fn new(cache: Arc<LocalScoreCache>) -> Result<Self> {
        let d = cache.d;
        if d == 0 || d > MAX_NODES {
            return config(format!("DAG env needs 1 <= d <= {MAX_NODES}"));
        }
        Ok(DagEnv { d, cache })
    }

    pub fn from_dataset(data: &Dataset, kind: ScoreKind) -> Result<Self> {
        Self::new(Arc::new(LocalScoreCache::build(&ScoreStats::new(data, kind)?)?))
    }

    pub fn edge_action(&self, u: usize, v: usize) -> usize {
        u * self.d + v
    }

    pub fn terminal_of(&self, adj: Vec<u32>) -> Result<DagState> {
        let mut s = DagState::from_adjacency(adj)?;
        s.stopped = true;
        Ok(s)
    }

    fn stop(&self) -> usize {
        self.d * self.d
    }
}

impl Environment for DagEnv {
    type State = DagState;

    fn num_actions(&self) -> usize {
        self.d * self.d + 1
    }

    fn num_backward_actions(&self) -> usize {
        self.d * self.d + 1
    }

    fn obs_dim(&self) -> usize {
        self.d * self.d
    }

    fn max_steps(&self) -> usize {
        self.d * (self.d - 1) / 2 + 1
    }

    fn stop_action(&self) -> Option<usize> {
        Some(self.stop())
    }

    fn initial_state(&self) -> DagState {
        DagState::empty(self.d)
    }

    fn is_terminal(&self, s: &DagState) -> bool {
        s.stopped
    }

    fn is_initial(&self, s: &DagState) -> bool {
        !s.stopped && s.adj.iter().all(|&r| r == 0)
    }

    fn forward_mask(&self, s: &DagState, out: &mut [bool]) {
        out.fill(false);
        if s.stopped {
            return;
        }
        let d = self.d;
        for u in 0..d {
            let blocked = s.adj[u] | s.closure_t[u];
            for v in 0..d {
                out[u * d + v] = blocked >> v & 1 == 0;
            }
        }
        out[self.stop()] = true;
    }

    fn backward_mask(&self, s: &DagState, out: &mut [bool]) {
        out.fill(false);
        if s.stopped {
            out[self.stop()] = true;
            return;
        }
        let d = self.d;
        for u in 0..d {
            for v in 0..d {
                out[u * d + v] = s.adj[u] >> v & 1 == 1;
            }
        }
    }

    fn apply_forward(&self, s: &DagState, a: usize) -> DagState {
        let mut n = s.clone();
        if a == self.stop() {
            n.stopped = true;
        } else {
            let (u, v) = (a / self.d, a % self.d);
            n.adj[u] |= 1 << v;
            closure_update(&mut n.closure_t, u, v);
        }
        n
    }

    fn apply_backward(&self, s: &DagState, b: usize) -> DagState {
        let mut p = s.clone();
        if b == self.stop() {
            p.stopped = false;
        } else {
            let (u, v) = (b / self.d, b % self.d);
            p.adj[u] &= !(1 << v);
            p.closure_t = closure_from_scratch(&p.adj);
        }
        p
    }

    fn backward_action(&self, s: &DagState, a: usize, next: &DagState) -> Result<usize> {
        if a >= self.num_actions() || self.apply_forward(s, a) != *next {
            return contract("edge addition does not produce the given graph");
        }
        Ok(a)
    }

    fn forward_action(&self, child: &DagState, b: usize, parent: &DagState) -> Result<usize> {
        if b >= self.num_backward_actions() || self.apply_backward(child, b) != *parent {
            return contract("edge removal does not produce the given graph");
        }
        Ok(b)
    }

    fn log_reward(&self, s: &DagState) -> Result<f64> {
        Ok(self.cache.log_reward(&s.adj))
    }

    fn delta_log_reward(&self, s: &DagState, a: usize, _next: &DagState) -> Result<f64> {
        if a == self.stop() {
            return Ok(0.0);
        }
        let (u, v) = (a / self.d, a % self.d);
        Ok(self.cache.delta_score(v, s.parents(v), u))
    }

    fn encode_obs(&self, s: &DagState, out: &mut [f64]) {
        let d = self.d;
        for u in 0..d {
            for v in 0..d {
                out[u * d + v] = (s.adj[u] >> v & 1) as f64;
            }
        }
    }

    fn terminal_key(&self, s: &DagState) -> Vec<u8> {
        s.adj.iter().flat_map(|r| r.to_le_bytes()).collect()
    }
}

/// Every DAG on `d ≤ 5` labelled nodes, as adjacency rows.
pub fn enumerate_dags(d: usize) -> Result<Vec<Vec<u32>>> {
    if d > 5 {
        return Err(Error::CapExceeded { what: "DAG enumeration nodes", needed: d as u128, cap: 5 });
    }
    fn rec(s: &mut DagState, d: usize, next: usize, out: &mut Vec<Vec<u32>>) {
        out.push(s.adj.clone());
        for e in next..d * d {
            let (u, v) = (e / d, e % d);
            if s.can_add(u, v) {
                let saved = s.clone();
                s.adj[u] |= 1 << v;
                closure_update(&mut s.closure_t, u, v);
                rec(s, d, e + 1, out);
                *s = saved;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut DagState::empty(d), d, 0, &mut out);
    Ok(out)
}

/// Exact posterior over all DAGs under a uniform structure prior.
pub fn dag_posterior(env: &DagEnv) -> Result<(Vec<Vec<u32>>, ExactDistribution)> {
    let graphs = enumerate_dags(env.d)?;
    let keys = graphs.iter().map(|g| g.iter().flat_map(|r| r.to_le_bytes()).collect()).collect();
    let logw: Vec<f64> = graphs.iter().map(|g| env.cache.log_reward(g)).collect();
    let dist = ExactDistribution::from_log_weights(keys, &logw)?;
    Ok((graphs, dist))
}

/// Decodes a DAG terminal key back to adjacency rows.
pub fn adjacency_from_key(key: &[u8]) -> Vec<u32> {
    key.chunks(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::jsd;
    use rand::Rng;

    fn small_env(d: usize, kind: ScoreKind, seed: u64) -> (Dataset, DagEnv) {
        let data = generate_er_dataset(d, 1.0, 50, 0.1, seed).unwrap();
        let env = DagEnv::from_dataset(&data, kind).unwrap();
        (data, env)
    }

    #[test]
    fn masks_follow_acyclicity() {
        let (_, env) = small_env(3, ScoreKind::default(), 0);
        let s0 = env.initial_state();
        let m = env.forward_mask_vec(&s0);
        assert_eq!(m.iter().filter(|&&x| x).count(), 7);
        let s1 = env.try_forward(&s0, env.edge_action(1, 2)).unwrap();
        let m1 = env.forward_mask_vec(&s1);
        assert!(!m1[env.edge_action(1, 2)] && !m1[env.edge_action(2, 1)]);
        let s2 = env.try_forward(&s1, env.edge_action(2, 0)).unwrap();
        assert!(!env.forward_mask_vec(&s2)[env.edge_action(0, 1)]);
        let back = env.try_backward(&s1, env.edge_action(1, 2)).unwrap();
        assert_eq!(back, s0);
    }

    #[test]
    fn closure_examples() {
        let mut c = DagState::empty(3).closure_t;
        closure_update(&mut c, 1, 2);
        assert_eq!(c[2] >> 1 & 1, 1);
        let again = c.clone();
        closure_update(&mut c, 1, 2);
        assert_eq!(c, again);
        closure_update(&mut c, 0, 1);
        assert_eq!(c[2] & 1, 1);
        assert_eq!(c, closure_from_scratch(&[0b010, 0b100, 0]));
    }

    #[test]
    fn dag_counts() {
        // brute force over all digraphs without self-loops, keeping the acyclic ones
        for d in 3..=4usize {
            let pairs: Vec<(usize, usize)> = (0..d).flat_map(|u| (0..d).map(move |v| (u, v))).filter(|(u, v)| u != v).collect();
            let mut count = 0;
            for code in 0u32..1 << pairs.len() {
                let mut adj = vec![0u32; d];
                for (k, &(u, v)) in pairs.iter().enumerate() {
                    if code >> k & 1 == 1 {
                        adj[u] |= 1 << v;
                    }
                }
                if DagState::from_adjacency(adj).is_ok() {
                    count += 1;
                }
            }
            assert_eq!(enumerate_dags(d).unwrap().len(), count);
        }
        assert_eq!(enumerate_dags(3).unwrap().len(), 25);
        assert_eq!(enumerate_dags(4).unwrap().len(), 543);
        assert_eq!(enumerate_dags(5).unwrap().len(), 29_281);
        assert!(enumerate_dags(6).is_err());
    }

    #[test]
    fn lingauss_single_observation_matches_monte_carlo() {
        // one observation, one parent: y | w ~ N(w x, σ²), w ~ N(0, 1)
        let data = Dataset::from_values(2, vec![0.7, -0.4]).unwrap();
        let stats = ScoreStats::new(&data, ScoreKind::default()).unwrap();
        let exact = stats.local_score(1, 0b01).unwrap().exp();
        let no_parents = stats.local_score(1, 0).unwrap();
        let closed = -0.5 * ((2.0 * std::f64::consts::PI * 0.1).ln() + 0.16 / 0.1);
        assert!((no_parents - closed).abs() < 1e-12);
        let mut rng = RngKey::new(11).rng();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let w: f64 = StandardNormal.sample(&mut rng);
            let r = -0.4 - w * 0.7;
            let p = (-(r * r) / 0.2).exp() / (2.0 * std::f64::consts::PI * 0.1).sqrt();
            s += p;
            s2 += p * p;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn bge_single_observation_matches_monte_carlo() {
        // d = 1: W ~ Gamma(α_w/2, rate t/2), μ ~ N(0, 1/(α_μ W)), x ~ N(μ, 1/W)
        let data = Dataset::from_values(1, vec![0.9]).unwrap();
        let kind = ScoreKind::Bge { alpha_mu: 1.0, alpha_w: None };
        let stats = ScoreStats::new(&data, kind).unwrap();
        let exact = stats.local_score(0, 0).unwrap().exp();
        let (aw, t) = (3.0, 0.5);
        let gamma = rand_distr::Gamma::new(aw / 2.0, 2.0 / t).unwrap();
        let mut rng = RngKey::new(12).rng();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let w: f64 = gamma.sample(&mut rng);
            let var = 2.0 / w;
            let p = (-0.81 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            s += p;
            s2 += p * p;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn bge_score_equivalence() {
        let data = generate_er_dataset(2, 1.0, 30, 0.1, 4).unwrap();
        let kind = ScoreKind::Bge { alpha_mu: 1.0, alpha_w: None };
        let c = LocalScoreCache::build(&ScoreStats::new(&data, kind).unwrap()).unwrap();
        let a = c.log_reward(&[0b10, 0]);
        let b = c.log_reward(&[0, 0b01]);
        assert!((a - b).abs() < 1e-8);
    }

    /// Direct N×N Gaussian marginal: y ~ N(0, σ² I + prior · X_Pa X_Paᵀ).
    fn lingauss_direct(data: &Dataset, j: usize, pa: &[usize]) -> f64 {
        let n = data.n;
        let mut cov = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut v: f64 = pa.iter().map(|&i| data.values[r * data.d + i] * data.values[c * data.d + i]).sum();
                if r == c {
                    v += 0.1;
                }
                cov[r * n + c] = v;
            }
        }
        let y = data.column(j);
        cholesky(&mut cov, n).unwrap();
        let mut sol = y.clone();
        chol_solve(&cov, n, &mut sol);
        let quad: f64 = y.iter().zip(&sol).map(|(a, b)| a * b).sum();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + chol_logdet(&cov, n) + quad)
    }

    #[test]
    fn modularity_matches_direct_likelihood() {
        let data = generate_er_dataset(4, 1.0, 20, 0.1, 8).unwrap();
        let env = DagEnv::from_dataset(&data, ScoreKind::default()).unwrap();
        for g in enumerate_dags(4).unwrap().iter().step_by(37) {
            let direct: f64 = (0..4)
                .map(|j| {
                    let pa: Vec<usize> = (0..4).filter(|&i| g[i] >> j & 1 == 1).collect();
                    lingauss_direct(&data, j, &pa)
                })
                .sum();
            assert!((env.cache.log_reward(g) - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn delta_score_matches_recompute() {
        for kind in [ScoreKind::default(), ScoreKind::Bge { alpha_mu: 1.0, alpha_w: None }] {
            let (_, env) = small_env(5, kind, 2);
            let mut rng = RngKey::new(5).rng();
            for _ in 0..50 {
                let mut s = env.initial_state();
                for _ in 0..rng.random_range(0..8) {
                    let m = env.forward_mask_vec(&s);
                    let legal: Vec<usize> = (0..25).filter(|&a| m[a]).collect();
                    if legal.is_empty() {
                        break;
                    }
                    let a = legal[rng.random_range(0..legal.len())];
                    let n = env.apply_forward(&s, a);
                    let delta = env.delta_log_reward(&s, a, &n).unwrap();
                    let full = env.log_reward(&n).unwrap() - env.log_reward(&s).unwrap();
                    assert!((delta - full).abs() < 1e-8);
                    let (u, v) = (a / 5, a % 5);
                    let back = env.cache.delta_score(v, n.parents(v) & !(1 << u), u);
                    assert!((back - delta).abs() < 1e-12);
                    s = n;
                }
            }
        }
    }

    #[test]
    fn delta_independent_of_unrelated_parents() {
        let (_, env) = small_env(4, ScoreKind::default(), 3);
        let c = &env.cache;
        assert_eq!(c.delta_score(3, 0b0001, 1), c.delta_score(3, 0b0001, 1));
        let a = c.log_reward(&[0b1000, 0, 0, 0]) - c.log_reward(&[0, 0, 0, 0]);
        let b = c.log_reward(&[0b1000, 0b0100, 0, 0]) - c.log_reward(&[0, 0b0100, 0, 0]);
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn er_dataset_properties() {
        let a = generate_er_dataset(5, 1.0, 100, 0.1, 1).unwrap();
        assert_eq!(a, generate_er_dataset(5, 1.0, 100, 0.1, 1).unwrap());
        assert_eq!(a.values.len(), 500);
        assert!(DagState::from_adjacency(a.ground_truth()).is_ok());

        let empty = generate_er_dataset(3, 0.0, 100_000, 0.1, 2).unwrap();
        for j in 0..3 {
            let col = empty.column(j);
            let var = col.iter().map(|x| x * x).sum::<f64>() / col.len() as f64;
            assert!((var - 0.1).abs() < 0.005, "variance {var}");
        }

        let mut parents = 0usize;
        let draws = 10_000;
        for seed in 0..draws {
            parents += generate_er_dataset(5, 1.0, 1, 0.1, seed).unwrap().edges.len();
        }
        let mean_in_degree = parents as f64 / (draws as f64 * 5.0);
        // binomial sd of the edge count per draw is sqrt(10·0.5·0.5)
        let sd = (10.0f64 * 0.25).sqrt() / 5.0 / (draws as f64).sqrt();
        assert!((mean_in_degree - 1.0).abs() < 4.0 * sd);
    }

    #[test]
    fn dataset_file_round_trip() {
        let a = generate_er_dataset(4, 1.0, 10, 0.1, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        a.save(&p).unwrap();
        let b = Dataset::load(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values, b.values);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("X0,X1,X2,X3\n"));
    }

    #[test]
    fn posterior_normalizes() {
        let (_, env) = small_env(3, ScoreKind::default(), 6);
        let (graphs, post) = dag_posterior(&env).unwrap();
        assert_eq!(graphs.len(), 25);
        assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(jsd(&post.probs, &post.probs).unwrap(), 0.0);
        assert_eq!(adjacency_from_key(&post.keys[3]), graphs[3]);
    }

    #[test]
    fn mask_matches_scratch_closure_fuzz() {
        let mut rng = RngKey::new(21).rng();
        for _ in 0..2_000 {
            let d = rng.random_range(2..=6usize);
            let mut s = DagState::empty(d);
            for _ in 0..rng.random_range(0..d * d) {
                let legal: Vec<(usize, usize)> =
                    (0..d).flat_map(|u| (0..d).map(move |v| (u, v))).filter(|&(u, v)| s.can_add(u, v)).collect();
                // oracle: not present and v cannot already reach u
                let reach = closure_from_scratch(&s.adj);
                for u in 0..d {
                    for v in 0..d {
                        let oracle = !s.has_edge(u, v) && reach[u] >> v & 1 == 0;
                        assert_eq!(s.can_add(u, v), oracle);
                    }
                }
                if legal.is_empty() {
                    break;
                }
                let (u, v) = legal[rng.random_range(0..legal.len())];
                s.adj[u] |= 1 << v;
                closure_update(&mut s.closure_t, u, v);
                assert_eq!(s.closure_t, closure_from_scratch(&s.adj));
            }
        }
    }
}
