//! RMSprop with per-parameter second-moment accumulators. Moments are
//! exposed for checkpointing so a resumed run continues the same trajectory.

use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 0.003;
pub const RMSPROP_ALPHA: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// `v <- alpha v + (1 - alpha) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Clone)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    moments: Vec<Tensor<T>>,
}

impl<T: Real> RmsProp<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(lr: f64, params: &ParamSet<T>) -> Self {
        let moments = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        RmsProp { lr, alpha: RMSPROP_ALPHA, eps: RMSPROP_EPS, moments }
    }

    pub fn moments(&self) -> &[Tensor<T>] {
        &self.moments
    }

    /// Replaces one moment accumulator (checkpoint restore).
    pub fn set_moment(&mut self, index: usize, value: Tensor<T>) {
        assert_eq!(self.moments[index].shape(), value.shape(), "moment shape mismatch");
        self.moments[index] = value;
    }

    /// Applies one update. `grads` is aligned with the parameter order; a
    /// `None` entry is a structurally zero gradient, which decays the moment
    /// and leaves the parameter unchanged.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        let alpha = T::from_f64(self.alpha);
        let one_minus = T::from_f64(1.0 - self.alpha);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for ((value, moment), grad) in
            params.values_mut().iter_mut().zip(self.moments.iter_mut()).zip(grads)
        {
            match grad {
                Some(g) => {
                    assert_eq!(g.shape(), value.shape(), "gradient shape mismatch");
                    let vd = value.data_mut();
                    let md = moment.data_mut();
                    for ((p, v), &gi) in vd.iter_mut().zip(md.iter_mut()).zip(g.data()) {
                        *v = alpha * *v + one_minus * gi * gi;
                        *p -= lr * gi / (v.sqrt() + eps);
                    }
                }
                None => {
                    for v in moment.data_mut() {
                        *v *= alpha;
                    }
                }
            }
        }
    }
}
