use crate::error::Result;
use crate::nn::{PolicyNet, Tensor};

/// Maps observation batches to unnormalized action scores. Masking and
/// exploration are applied by the caller.
pub trait Policy {
    fn forward_logits(&self, obs: &Tensor) -> Result<Tensor>;

    /// `None` means the fixed uniform backward policy over legal parents.
    fn backward_logits(&self, obs: &Tensor) -> Result<Option<Tensor>>;
}

impl Policy for PolicyNet {
    fn forward_logits(&self, obs: &Tensor) -> Result<Tensor> {
        Ok(self.heads(obs)?.fwd_logits)
    }

    fn backward_logits(&self, obs: &Tensor) -> Result<Option<Tensor>> {
        if self.layout.n_bwd == 0 {
            return Ok(None);
        }
        Ok(self.heads(obs)?.bwd_logits)
    }
}

/// Uniform forward and backward policies.
#[derive(Clone, Copy, Debug)]
pub struct UniformPolicy {
    pub n_fwd: usize,
}

impl Policy for UniformPolicy {
    fn forward_logits(&self, obs: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros(&[obs.rows(), self.n_fwd]))
    }

    fn backward_logits(&self, _obs: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Policy defined by closures, mainly for tests and oracles.
pub struct FnPolicy<F, B> {
    pub forward: F,
    pub backward: B,
}

impl<F, B> Policy for FnPolicy<F, B>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    B: Fn(&Tensor) -> Result<Option<Tensor>>,
{
    fn forward_logits(&self, obs: &Tensor) -> Result<Tensor> {
        (self.forward)(obs)
    }

    fn backward_logits(&self, obs: &Tensor) -> Result<Option<Tensor>> {
        (self.backward)(obs)
    }
}
