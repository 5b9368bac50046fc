use super::{PolicyError, PolicyParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update. An all-zero gradient leaves parameters
/// and state untouched.
pub fn optimizer_step(params: &mut PolicyParams, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<(), PolicyError> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(PolicyError::Dims(format!(
            "params {n}, grads {}, optimizer state {}",
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(PolicyError::NonFinite { term: "gradient".into(), detail: format!("index {i}") });
    }
    if grads.iter().all(|&g| g == 0.0) {
        return Ok(());
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let data = params.as_mut_slice();
    for i in 0..n {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}
