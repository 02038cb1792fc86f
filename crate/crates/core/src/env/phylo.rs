//! Phylogenetic tree construction by pairwise merges of a forest, scored by
//! Fitch small parsimony.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{config, contract, Error, Result};
use crate::rng::RngKey;

pub const DEFAULT_ALPHABET: &str = "ACGT";

/// Character matrix: `chars[i][l]` is the alphabet index of species `i` at site `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesData {
    pub names: Vec<String>,
    pub alphabet: Vec<char>,
    pub chars: Vec<Vec<u8>>,
}

impl SpeciesData {
    pub fn new(names: Vec<String>, alphabet: Vec<char>, chars: Vec<Vec<u8>>) -> Result<Self> {
        let n = chars.len();
        if n < 2 || names.len() != n {
            return config("species data needs at least two named species");
        }
        if alphabet.is_empty() || alphabet.len() > 8 {
            return config("alphabet size must be in 1..=8");
        }
        let l = chars[0].len();
        if l == 0 || chars.iter().any(|c| c.len() != l) {
            return config("character matrix must be rectangular with at least one site");
        }
        if chars.iter().flatten().any(|&c| c as usize >= alphabet.len()) {
            return config("character outside the alphabet");
        }
        Ok(SpeciesData { names, alphabet, chars })
    }

    pub fn num_species(&self) -> usize {
        self.chars.len()
    }

    pub fn num_sites(&self) -> usize {
        self.chars[0].len()
    }

    /// Uniformly random characters.
    pub fn synthetic(n: usize, sites: usize, alphabet: &str, key: RngKey) -> Result<Self> {
        let alphabet: Vec<char> = alphabet.chars().collect();
        let mut rng = key.rng();
        let k = alphabet.len().max(1);
        let chars = (0..n)
            .map(|_| (0..sites).map(|_| rng.random_range(0..k) as u8).collect())
            .collect();
        let names = (0..n).map(|i| format!("s{i}")).collect();
        Self::new(names, alphabet, chars)
    }

    pub fn to_text(&self) -> String {
        let alpha: String = self.alphabet.iter().collect();
        let mut s = format!("n={} L={} alphabet={}\n", self.num_species(), self.num_sites(), alpha);
        for (name, row) in self.names.iter().zip(&self.chars) {
            let seq: String = row.iter().map(|&c| self.alphabet[c as usize]).collect();
            let _ = writeln!(s, "{name},{seq}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut n = None;
        let mut l = None;
        let mut alphabet = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("L", v)) => l = v.parse::<usize>().ok(),
                Some(("alphabet", v)) => alphabet = Some(v.chars().collect::<Vec<char>>()),
                _ => return Err(err(1, format!("unexpected header field `{field}`"))),
            }
        }
        let (Some(n), Some(l), Some(alphabet)) = (n, l, alphabet) else {
            return Err(err(1, "header must be `n=<n> L=<L> alphabet=<symbols>`".into()));
        };
        let mut names = Vec::new();
        let mut chars = Vec::new();
        for (i, line) in lines {
            let (name, seq) = line
                .split_once(',')
                .ok_or_else(|| err(i + 1, "expected `name,sequence`".into()))?;
            let row = seq
                .trim()
                .chars()
                .map(|c| alphabet.iter().position(|&a| a == c).map(|p| p as u8))
                .collect::<Option<Vec<u8>>>()
                .ok_or_else(|| err(i + 1, "symbol outside the alphabet".into()))?;
            if row.len() != l {
                return Err(err(i + 1, format!("sequence has {} sites, header says {l}", row.len())));
            }
            names.push(name.trim().to_string());
            chars.push(row);
        }
        if chars.len() != n {
            return Err(err(1, format!("header says {n} species, found {}", chars.len())));
        }
        Self::new(names, alphabet, chars)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &std::fs::read_to_string(path)?)
    }
}

/// Rooted binary subtree with per-site Fitch candidate sets.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Node {
    pub children: Option<(Arc<Node>, Arc<Node>)>,
    pub min_leaf: u16,
    /// Bitmask over the alphabet per site.
    pub sets: Vec<u8>,
    /// Fitch mutation count of this subtree.
    pub cost: u32,
}

impl Node {
    pub fn leaf(i: usize, data: &SpeciesData) -> Arc<Node> {
        Arc::new(Node {
            children: None,
            min_leaf: i as u16,
            sets: data.chars[i].iter().map(|&c| 1u8 << c).collect(),
            cost: 0,
        })
    }

    /// Canonical merge: the child with the smaller leaf goes first.
    pub fn merge(a: &Arc<Node>, b: &Arc<Node>) -> Arc<Node> {
        let (l, r) = if a.min_leaf < b.min_leaf { (a, b) } else { (b, a) };
        let mut cost = l.cost + r.cost;
        let sets = l
            .sets
            .iter()
            .zip(&r.sets)
            .map(|(&x, &y)| {
                let i = x & y;
                if i != 0 {
                    i
                } else {
                    cost += 1;
                    x | y
                }
            })
            .collect();
        Arc::new(Node {
            children: Some((l.clone(), r.clone())),
            min_leaf: l.min_leaf,
            sets,
            cost,
        })
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn newick(&self, out: &mut String) {
        match &self.children {
            None => {
                let _ = write!(out, "{}", self.min_leaf);
            }
            Some((l, r)) => {
                out.push('(');
                l.newick(out);
                out.push(',');
                r.newick(out);
                out.push(')');
            }
        }
    }

    pub fn leaves(&self, out: &mut Vec<usize>) {
        match &self.children {
            None => out.push(self.min_leaf as usize),
            Some((l, r)) => {
                l.leaves(out);
                r.leaves(out);
            }
        }
    }
}

/// Fitch small-parsimony score of a tree, recomputed from its topology.
pub fn fitch_parsimony(tree: &Node, data: &SpeciesData) -> u32 {
    fn rec(t: &Node, data: &SpeciesData) -> (Vec<u8>, u32) {
        match &t.children {
            None => (data.chars[t.min_leaf as usize].iter().map(|&c| 1u8 << c).collect(), 0),
            Some((l, r)) => {
                let (a, ca) = rec(l, data);
                let (b, cb) = rec(r, data);
                let mut cost = ca + cb;
                let sets = a
                    .iter()
                    .zip(&b)
                    .map(|(&x, &y)| {
                        if x & y != 0 {
                            x & y
                        } else {
                            cost += 1;
                            x | y
                        }
                    })
                    .collect();
                (sets, cost)
            }
        }
    }
    rec(tree, data).1
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ForestState {
    /// Roots sorted by smallest leaf index.
    pub roots: Vec<Arc<Node>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhyloParams {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub c: f64,
}

fn default_alpha() -> f64 {
    4.0
}

impl Default for PhyloParams {
    fn default() -> Self {
        PhyloParams { alpha: default_alpha(), c: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct PhyloEnv {
    pub data: Arc<SpeciesData>,
    pub params: PhyloParams,
    pairs: Vec<(usize, usize)>,
}

impl PhyloEnv {
    pub fn new(data: Arc<SpeciesData>, params: PhyloParams) -> Result<Self> {
        if !(params.alpha > 0.0 && params.alpha.is_finite()) || !params.c.is_finite() {
            return config("phylo temperature must be positive and C finite");
        }
        let n = data.num_species();
        if n > u16::MAX as usize {
            return config("too many species");
        }
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        Ok(PhyloEnv { data, params, pairs })
    }

    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let n = self.data.num_species();
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn pair(&self, a: usize) -> (usize, usize) {
        self.pairs[a]
    }

    /// `(C − M)/α` for a complete tree.
    pub fn tree_log_reward(&self, tree: &Node) -> f64 {
        (self.params.c - tree.cost as f64) / self.params.alpha
    }

    pub fn newick(&self, s: &ForestState) -> String {
        let mut out = String::new();
        for (k, r) in s.roots.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            r.newick(&mut out);
            out.push(';');
        }
        out
    }
}

impl Environment for PhyloEnv {
    type State = ForestState;

    fn num_actions(&self) -> usize {
        self.pairs.len()
    }

    fn num_backward_actions(&self) -> usize {
        self.data.num_species()
    }

    fn obs_dim(&self) -> usize {
        self.data.num_species() * self.data.num_sites() * self.data.alphabet.len() + 1
    }

    fn max_steps(&self) -> usize {
        self.data.num_species() - 1
    }

    fn initial_state(&self) -> ForestState {
        ForestState {
            roots: (0..self.data.num_species()).map(|i| Node::leaf(i, &self.data)).collect(),
        }
    }

    fn is_terminal(&self, s: &ForestState) -> bool {
        s.roots.len() == 1
    }

    fn forward_mask(&self, s: &ForestState, out: &mut [bool]) {
        let k = s.roots.len();
        for (o, &(_, j)) in out.iter_mut().zip(&self.pairs) {
            *o = k > 1 && j < k;
        }
    }

    fn backward_mask(&self, s: &ForestState, out: &mut [bool]) {
        out.fill(false);
        for (o, r) in out.iter_mut().zip(&s.roots) {
            *o = !r.is_leaf();
        }
    }

    fn apply_forward(&self, s: &ForestState, a: usize) -> ForestState {
        let (i, j) = self.pairs[a];
        let mut roots = s.roots.clone();
        let b = roots.remove(j);
        roots[i] = Node::merge(&roots[i], &b);
        ForestState { roots }
    }

    fn apply_backward(&self, s: &ForestState, k: usize) -> ForestState {
        let mut roots = s.roots.clone();
        let (l, r) = roots[k].children.clone().expect("split of a leaf");
        roots[k] = l;
        let pos = roots.partition_point(|x| x.min_leaf < r.min_leaf);
        roots.insert(pos, r);
        ForestState { roots }
    }

    fn backward_action(&self, s: &ForestState, a: usize, next: &ForestState) -> Result<usize> {
        if a >= self.pairs.len() || self.apply_forward(s, a) != *next {
            return contract("merge does not produce the given forest");
        }
        Ok(self.pairs[a].0)
    }

    fn forward_action(&self, child: &ForestState, k: usize, parent: &ForestState) -> Result<usize> {
        let Some((l, r)) = child.roots.get(k).and_then(|n| n.children.clone()) else {
            return contract("split of a missing or leaf root");
        };
        let i = parent.roots.iter().position(|x| *x == l);
        let j = parent.roots.iter().position(|x| *x == r);
        match (i, j) {
            (Some(i), Some(j)) if self.apply_backward(child, k) == *parent => Ok(self.pair_index(i, j)),
            _ => contract("split does not produce the given forest"),
        }
    }

    fn log_reward(&self, s: &ForestState) -> Result<f64> {
        if s.roots.len() != 1 {
            return contract("reward of an incomplete forest");
        }
        Ok(self.tree_log_reward(&s.roots[0]))
    }

    fn energy(&self, s: &ForestState) -> f64 {
        s.roots.iter().map(|r| r.cost as f64).sum::<f64>() / self.params.alpha
    }

    fn encode_obs(&self, s: &ForestState, out: &mut [f64]) {
        out.fill(0.0);
        let a = self.data.alphabet.len();
        let per_slot = self.data.num_sites() * a;
        for (k, r) in s.roots.iter().enumerate() {
            for (l, &set) in r.sets.iter().enumerate() {
                for c in 0..a {
                    if set >> c & 1 == 1 {
                        out[k * per_slot + l * a + c] = 1.0;
                    }
                }
            }
        }
        let n = self.data.num_species();
        out[n * per_slot] = s.roots.len() as f64 / n as f64;
    }

    fn terminal_key(&self, s: &ForestState) -> Vec<u8> {
        self.newick(s).into_bytes()
    }
}
