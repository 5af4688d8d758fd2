use crate::error::{NdError, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// One momentum-SGD step over every parameter, then clears the gradients.
///
/// `v <- momentum * v + grad; value <- value - lr * lr_scale * v`
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, lr: T, momentum: T) {
    for p in store.iter_mut() {
        let step = lr * p.lr_scale;
        let vals = p.value.data_mut();
        let vel = p.momentum.data_mut();
        let grad = p.grad.data_mut();
        for ((x, v), g) in vals.iter_mut().zip(vel.iter_mut()).zip(grad.iter_mut()) {
            *v = momentum * *v + *g;
            *x -= step * *v;
            *g = T::zero();
        }
    }
}

/// Annealed learning rate `eta0 / (1 + alpha * p)^beta` over training
/// progress `p` in `[0, 1]`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, progress: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&progress) {
            return Err(NdError::invalid(
                "lr_at",
                format!("progress {progress} outside [0, 1]"),
            ));
        }
        Ok(self.eta0 / (1.0 + self.alpha * progress).powf(self.beta))
    }
}
