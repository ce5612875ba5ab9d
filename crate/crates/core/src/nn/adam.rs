use super::{NnError, Scalar, Tensor};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn for_params<T: Scalar>(params: &[&Tensor<T>]) -> Self {
        Self {
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), NnError> {
    if params.len() != grads.len()
        || params.len() != state.first.len()
        || params.len() != state.second.len()
    {
        return Err(NnError::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].len() != p.len() || state.second[i].len() != p.len() {
            return Err(NnError::Shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gr = gv.to_f64().unwrap_or(0.0);
            m[j] = b1 * m[j] + (1.0 - b1) * gr;
            v[j] = b2 * v[j] + (1.0 - b2) * gr * gr;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let delta = config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            *pv = T::lit(pv.to_f64().unwrap_or(0.0) - delta);
        }
    }
    Ok(())
}
