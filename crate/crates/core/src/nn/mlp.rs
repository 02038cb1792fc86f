use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{config, Error, Result};
use crate::rng::{uniform, RngKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Weights of a fully connected network plus the standalone `log Z` scalar.
///
/// `tensors` holds `W₀, b₀, W₁, b₁, …` followed by `log Z` as a length-1
/// tensor, so optimizers and checkpoints can treat it as a flat list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub tensors: Vec<Tensor>,
}

impl MlpParams {
    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn init(sizes: &[usize], activation: Activation, log_z: f64, key: RngKey) -> Result<Self> {
        if sizes.len() < 2 {
            return config("an MLP needs at least an input and an output size");
        }
        if sizes.contains(&0) {
            return config(format!("zero-width layer in {sizes:?}"));
        }
        let mut rng = key.rng();
        let mut tensors = Vec::with_capacity(2 * sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| (2.0 * uniform(&mut rng) - 1.0) * bound)
                .collect();
            tensors.push(Tensor::matrix(fan_in, fan_out, data)?);
            tensors.push(Tensor::zeros(&[fan_out]));
        }
        tensors.push(Tensor::scalar(log_z));
        Ok(MlpParams {
            sizes: sizes.to_vec(),
            activation,
            tensors,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer + 1]
    }

    pub fn log_z(&self) -> f64 {
        self.tensors.last().unwrap().item()
    }

    pub fn log_z_index(&self) -> usize {
        self.tensors.len() - 1
    }

    pub fn set_log_z(&mut self, v: f64) {
        self.tensors.last_mut().unwrap().data_mut()[0] = v;
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, obs: &Tensor) -> Result<()> {
        if obs.shape().len() != 2 || obs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "observation batch {:?} for input width {}",
                obs.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Plain forward pass, `rows × output_dim`.
    pub fn forward(&self, obs: &Tensor) -> Result<Tensor> {
        self.check_input(obs)?;
        let m = obs.rows();
        let mut h = obs.clone();
        for l in 0..self.num_layers() {
            let (k, n) = (self.sizes[l], self.sizes[l + 1]);
            let mut out = Tensor::zeros(&[m, n]);
            let b = self.bias(l).data();
            for row in out.data_mut().chunks_mut(n) {
                row.copy_from_slice(b);
            }
            gemm(m, k, n, h.data(), self.weight(l).data(), 1.0, out.data_mut());
            if l + 1 < self.num_layers() {
                activate(self.activation, out.data_mut());
            }
            h = out;
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`; `params` are the leaves for `tensors`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], obs: Var) -> Result<Var> {
        self.check_input(tape.value(obs))?;
        let mut h = obs;
        for l in 0..self.num_layers() {
            let z = tape.matmul(h, params[2 * l])?;
            let z = tape.add_row(z, params[2 * l + 1])?;
            h = if l + 1 < self.num_layers() {
                match self.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Tanh => tape.tanh(z),
                }
            } else {
                z
            };
        }
        Ok(h)
    }
}

fn activate(act: Activation, xs: &mut [f64]) {
    match act {
        Activation::Relu => xs.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Tanh => xs.iter_mut().for_each(|x| *x = x.tanh()),
    }
}

/// How the network output columns split into policy heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub n_fwd: usize,
    /// Zero when the backward policy is the fixed uniform one.
    pub n_bwd: usize,
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        self.n_fwd + self.n_bwd + 1
    }

    pub fn bwd_start(&self) -> usize {
        self.n_fwd
    }

    pub fn flow_col(&self) -> usize {
        self.n_fwd + self.n_bwd
    }
}

/// Unnormalized heads for a batch of observations: forward logits, backward
/// logits (empty for uniform `P_B`), log-flow and the shared `log Z`.
#[derive(Clone, Debug)]
pub struct PolicyHeads {
    pub fwd_logits: Tensor,
    pub bwd_logits: Option<Tensor>,
    pub log_flow: Vec<f64>,
    pub log_z: f64,
}

/// MLP policy with forward, backward and flow heads on a shared trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub params: MlpParams,
    pub layout: HeadLayout,
}

impl PolicyNet {
    pub fn new(
        obs_dim: usize,
        hidden: &[usize],
        layout: HeadLayout,
        activation: Activation,
        log_z: f64,
        key: RngKey,
    ) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.width());
        Ok(PolicyNet {
            params: MlpParams::init(&sizes, activation, log_z, key)?,
            layout,
        })
    }

    pub fn heads(&self, obs: &Tensor) -> Result<PolicyHeads> {
        let out = self.params.forward(obs)?;
        let m = out.rows();
        let l = self.layout;
        let take = |start: usize, width: usize| -> Tensor {
            let mut data = Vec::with_capacity(m * width);
            for i in 0..m {
                data.extend_from_slice(&out.row(i)[start..start + width]);
            }
            Tensor::matrix(m, width, data).expect("slice shape")
        };
        Ok(PolicyHeads {
            fwd_logits: take(0, l.n_fwd),
            bwd_logits: (l.n_bwd > 0).then(|| take(l.bwd_start(), l.n_bwd)),
            log_flow: (0..m).map(|i| out.at(i, l.flow_col())).collect(),
            log_z: self.params.log_z(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(p: &MlpParams, obs: &Tensor) -> Vec<f64> {
        let mut h: Vec<Vec<f64>> = (0..obs.rows()).map(|i| obs.row(i).to_vec()).collect();
        for l in 0..p.num_layers() {
            let (w, b) = (p.weight(l), p.bias(l));
            let (k, n) = (w.rows(), w.cols());
            h = h
                .iter()
                .map(|x| {
                    let mut out = vec![0.0; n];
                    for j in 0..n {
                        let mut acc = b.data()[j];
                        for i in 0..k {
                            acc += x[i] * w.at(i, j);
                        }
                        out[j] = if l + 1 < p.num_layers() { acc.max(0.0) } else { acc };
                    }
                    out
                })
                .collect();
        }
        h.concat()
    }

    #[test]
    fn zero_width_layer_is_rejected() {
        assert!(MlpParams::init(&[4, 0, 2], Activation::Relu, 0.0, RngKey::new(0)).is_err());
        assert!(MlpParams::init(&[4], Activation::Relu, 0.0, RngKey::new(0)).is_err());
    }

    #[test]
    fn fixed_key_gives_identical_init() {
        let a = MlpParams::init(&[3, 8, 2], Activation::Relu, 0.0, RngKey::new(5)).unwrap();
        let b = MlpParams::init(&[3, 8, 2], Activation::Relu, 0.0, RngKey::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.bias(0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_hidden_layers_of_256() {
        let p = MlpParams::init(&[16, 256, 256, 4], Activation::Relu, 0.0, RngKey::new(0)).unwrap();
        assert_eq!(p.weight(1).shape(), &[256, 256]);
        assert_eq!(p.num_parameters(), 16 * 256 + 256 + 256 * 256 + 256 + 256 * 4 + 4 + 1);
    }

    #[test]
    fn forward_matches_triple_loop_oracle() {
        let p = MlpParams::init(&[5, 7, 6, 3], Activation::Relu, 0.0, RngKey::new(9)).unwrap();
        let mut p = p;
        // non-zero biases so the bias path is exercised
        for l in 0..p.num_layers() {
            let t = &mut p.tensors[2 * l + 1];
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.1 * i as f64 - 0.2;
            }
        }
        let obs = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
        let fast = p.forward(&obs).unwrap();
        for (a, b) in fast.data().iter().zip(naive_forward(&p, &obs)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_independent() {
        let p = MlpParams::init(&[3, 4, 2], Activation::Relu, 0.0, RngKey::new(2)).unwrap();
        let obs = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let both = p.forward(&obs).unwrap();
        let second = p.forward(&Tensor::matrix(1, 3, vec![-1.0, 0.5, 0.0]).unwrap()).unwrap();
        assert_eq!(both.row(1), second.row(0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = MlpParams::init(&[3, 4, 2], Activation::Relu, 0.0, RngKey::new(2)).unwrap();
        assert!(p.forward(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let layout = HeadLayout { n_fwd: 3, n_bwd: 0 };
        let mut net = PolicyNet::new(2, &[4], layout, Activation::Relu, 0.0, RngKey::new(0)).unwrap();
        for t in net.params.tensors.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let heads = net.heads(&Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap()).unwrap();
        let probs = crate::objectives::eps_uniform(heads.fwd_logits.row(0), &[true, false, true], 0.0)
            .unwrap();
        assert_eq!(probs, vec![0.5, 0.0, 0.5]);
    }
}
