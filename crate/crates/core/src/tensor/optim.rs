use super::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.0.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("NaN or infinity in gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id).value.data_mut();
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads.0[i]);
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
