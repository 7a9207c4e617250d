use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use super::TensorError;

/// SGD with Nesterov momentum and L2 weight decay folded into the gradient.
///
/// Per parameter: `g ← ∇ + wd·θ`, `v ← μ·v + g`, `θ ← θ − lr·(g + μ·v)`.
#[derive(Debug, Clone)]
pub struct SgdNesterov<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<T>>,
}

impl<T: Scalar> SgdNesterov<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdNesterov {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.buffers
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), TensorError> {
        let all = vec![true; params.len()];
        self.step_masked(params, grads, &all)
    }

    /// Like [`SgdNesterov::step`], but parameters with `active[i] == false` and their
    /// momentum buffers are left untouched.
    pub fn step_masked(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        active: &[bool],
    ) -> Result<(), TensorError> {
        if grads.len() != params.len() || active.len() != params.len() {
            return Err(TensorError::Shape(format!(
                "optimizer got {} gradients and {} flags for {} parameters",
                grads.len(),
                active.len(),
                params.len()
            )));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.tensor.shape() {
                return Err(TensorError::Shape(format!(
                    "gradient for `{}` has shape {:?}, expected {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        let (lr, mu, wd) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay));
        for (((p, g), buf), _) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.buffers)
            .zip(active)
            .filter(|(_, &on)| on)
        {
            for ((theta, &grad), v) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let gt = grad + wd * *theta;
                *v = mu * *v + gt;
                *theta = *theta - lr * (gt + mu * *v);
            }
        }
        Ok(())
    }
}
