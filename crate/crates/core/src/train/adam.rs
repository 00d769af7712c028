use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::volcore::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every trainable entry of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    moments: Vec<(ParamId, Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let moments = store
            .trainable_ids()
            .map(|id| {
                let shape = store.value(id).shape().to_vec();
                (id, Tensor::zeros(shape.clone()), Tensor::zeros(shape))
            })
            .collect();
        AdamState {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            t: 0,
            moments,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.moments.iter().find(|m| m.0 == id).map(|m| &m.1)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.moments.iter().find(|m| m.0 == id).map(|m| &m.2)
    }
}

/// Applies one bias-corrected Adam update from the gradients accumulated in
/// `store`. Every gradient is checked before anything is modified, so a
/// non-finite gradient leaves parameters and state untouched.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    for &(id, _, _) in &state.moments {
        let g = store.grad(id);
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: store.entry(id).name.clone(),
                grad_norm: g.l2_norm(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    for (id, m, v) in &mut state.moments {
        let g = store.grad(*id).clone();
        let theta = store.value_mut(*id);
        for (((th, m), v), &g) in theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *th -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
