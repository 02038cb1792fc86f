//! d-dimensional hypergrid with corner-peaked rewards.

use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{config, contract, Error, Result};
use crate::metrics::ExactDistribution;
use crate::rng::RngKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypergridParams {
    pub d: usize,
    #[serde(rename = "side")]
    pub h: usize,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "default_r1")]
    pub r1: f64,
    #[serde(default = "default_r2")]
    pub r2: f64,
}

fn default_r0() -> f64 {
    1e-3
}
fn default_r1() -> f64 {
    0.5
}
fn default_r2() -> f64 {
    2.0
}

impl HypergridParams {
    pub fn new(d: usize, h: usize) -> Self {
        HypergridParams {
            d,
            h,
            r0: default_r0(),
            r1: default_r1(),
            r2: default_r2(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    pub coords: Vec<u32>,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct Hypergrid {
    params: HypergridParams,
    /// Per coordinate value: (outer band, inner band) indicator.
    bands: Vec<(bool, bool)>,
}

impl Hypergrid {
    pub fn new(params: HypergridParams) -> Result<Self> {
        if params.d < 1 {
            return config("hypergrid needs d >= 1");
        }
        if params.h < 2 || params.h > u16::MAX as usize {
            return config(format!("hypergrid side must be in 2..=65535, got {}", params.h));
        }
        if [params.r0, params.r1, params.r2].iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return config("hypergrid rewards must be finite and nonnegative");
        }
        if params.r0 + params.r1 + params.r2 <= 0.0 {
            return config("hypergrid rewards are all zero");
        }
        let bands = (0..params.h)
            .map(|s| {
                let a = (s as f64 / (params.h - 1) as f64 - 0.5).abs();
                (0.25 < a, 0.3 < a && a < 0.4)
            })
            .collect();
        Ok(Hypergrid { params, bands })
    }

    pub fn params(&self) -> &HypergridParams {
        &self.params
    }

    pub fn reward(&self, coords: &[u32]) -> f64 {
        let p = &self.params;
        let outer = coords.iter().all(|&c| self.bands[c as usize].0);
        let inner = coords.iter().all(|&c| self.bands[c as usize].1);
        p.r0 + if outer { p.r1 } else { 0.0 } + if inner { p.r2 } else { 0.0 }
    }

    pub fn terminal_state(&self, coords: Vec<u32>) -> GridState {
        GridState { coords, terminal: true }
    }

    pub fn num_terminals(&self) -> u128 {
        (self.params.h as u128).saturating_pow(self.params.d as u32)
    }

    /// Every terminal state in lexicographic coordinate order.
    pub fn all_terminals(&self, cap: u128) -> Result<Vec<GridState>> {
        let n = self.num_terminals();
        if n > cap {
            return Err(Error::CapExceeded { what: "hypergrid terminals", needed: n, cap });
        }
        let d = self.params.d;
        let h = self.params.h as u32;
        let mut out = Vec::with_capacity(n as usize);
        let mut c = vec![0u32; d];
        loop {
            out.push(self.terminal_state(c.clone()));
            let mut i = d;
            loop {
                if i == 0 {
                    return Ok(out);
                }
                i -= 1;
                c[i] += 1;
                if c[i] < h {
                    break;
                }
                c[i] = 0;
            }
        }
    }
}

/// π(x) = R(x)/Z over all H^d terminals.
pub fn grid_exact_distribution(env: &Hypergrid, cap: u128) -> Result<ExactDistribution> {
    let states = env.all_terminals(cap)?;
    let keys = states.iter().map(|s| env.terminal_key(s)).collect();
    let logw: Vec<f64> = states.iter().map(|s| env.reward(&s.coords).ln()).collect();
    ExactDistribution::from_log_weights(keys, &logw)
}

pub fn perfect_sampler(exact: &ExactDistribution, key: RngKey, n: usize) -> Vec<Vec<u8>> {
    exact.sample(key, n)
}

impl Environment for Hypergrid {
    type State = GridState;

    fn num_actions(&self) -> usize {
        self.params.d + 1
    }

    fn num_backward_actions(&self) -> usize {
        self.params.d + 1
    }

    fn obs_dim(&self) -> usize {
        self.params.d * self.params.h
    }

    fn max_steps(&self) -> usize {
        self.params.d * (self.params.h - 1) + 1
    }

    fn stop_action(&self) -> Option<usize> {
        Some(self.params.d)
    }

    fn initial_state(&self) -> GridState {
        GridState { coords: vec![0; self.params.d], terminal: false }
    }

    fn is_terminal(&self, s: &GridState) -> bool {
        s.terminal
    }

    fn is_initial(&self, s: &GridState) -> bool {
        !s.terminal && s.coords.iter().all(|&c| c == 0)
    }

    fn forward_mask(&self, s: &GridState, out: &mut [bool]) {
        out.fill(false);
        if s.terminal {
            return;
        }
        let top = (self.params.h - 1) as u32;
        for (o, &c) in out.iter_mut().zip(&s.coords) {
            *o = c < top;
        }
        out[self.params.d] = true;
    }

    fn backward_mask(&self, s: &GridState, out: &mut [bool]) {
        out.fill(false);
        if s.terminal {
            out[self.params.d] = true;
            return;
        }
        for (o, &c) in out.iter_mut().zip(&s.coords) {
            *o = c > 0;
        }
    }

    fn apply_forward(&self, s: &GridState, action: usize) -> GridState {
        let mut next = s.clone();
        if action == self.params.d {
            next.terminal = true;
        } else {
            next.coords[action] += 1;
        }
        next
    }

    fn apply_backward(&self, s: &GridState, action: usize) -> GridState {
        let mut prev = s.clone();
        if action == self.params.d {
            prev.terminal = false;
        } else {
            prev.coords[action] -= 1;
        }
        prev
    }

    fn backward_action(&self, s: &GridState, action: usize, next: &GridState) -> Result<usize> {
        if action > self.params.d || self.apply_forward(s, action) != *next {
            return contract(format!("{s:?} --{action}--> {next:?} is not a transition"));
        }
        Ok(action)
    }

    fn forward_action(&self, child: &GridState, action: usize, parent: &GridState) -> Result<usize> {
        if action > self.params.d || self.apply_backward(child, action) != *parent {
            return contract(format!("{child:?} <--{action}-- {parent:?} is not a transition"));
        }
        Ok(action)
    }

    fn log_reward(&self, s: &GridState) -> Result<f64> {
        Ok(self.reward(&s.coords).ln())
    }

    fn encode_obs(&self, s: &GridState, out: &mut [f64]) {
        out.fill(0.0);
        let h = self.params.h;
        for (i, &c) in s.coords.iter().enumerate() {
            out[i * h + c as usize] = 1.0;
        }
    }

    fn terminal_key(&self, s: &GridState) -> Vec<u8> {
        s.coords.iter().flat_map(|&c| (c as u16).to_le_bytes()).collect()
    }
}
