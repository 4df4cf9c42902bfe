use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for an ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, config: &AdamConfig) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || state.m[i].len() != p.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!("slot {i}: {:?} vs {:?}", p.shape(), g.shape()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grads: &[f64], steps: usize) -> Vec<f64> {
        let mut p = Tensor::vector(vec![0.0; grads.len()]);
        let g = Tensor::vector(grads.to_vec());
        let mut state = AdamState::new([&p]);
        for _ in 0..steps {
            adam_step(&mut [&mut p], &[g.clone()], &mut state, &AdamConfig::default()).unwrap();
        }
        p.into_data()
    }

    #[test]
    fn first_step_closed_form() {
        let g = [0.5, -2.0, 1e-3];
        let p = run(&g, 1);
        for (x, gi) in p.iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        assert_eq!(run(&[0.0, 0.0], 3), vec![0.0, 0.0]);
    }

    #[test]
    fn second_step_closed_form() {
        // m2 = 0.9*0.1 g + 0.1 g = 0.19 g, m̂ = 0.19 g / 0.19 = g
        // v2 = 0.999*0.001 g² + 0.001 g² = 0.001999 g², v̂ = g²
        // so the second update equals the first
        let g = 0.7f64;
        let first = -1e-3 * g / (g + 1e-8);
        let p = run(&[g], 2);
        assert!((p[0] - 2.0 * first).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Tensor::vector(vec![0.0; 2]);
        let mut state = AdamState::new([&p]);
        let g = Tensor::vector(vec![1.0; 3]);
        assert!(adam_step(&mut [&mut p], &[g], &mut state, &AdamConfig::default()).is_err());
    }
}
