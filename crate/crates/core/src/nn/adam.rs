use ndarray::Zip;

use super::{Gradients, MlpParams};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment estimates, shape-congruent with the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self::with_hyperparameters(params, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON)
    }

    pub fn with_hyperparameters(params: &MlpParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update of every layer.
pub fn adam_step(params: &mut MlpParams, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let all = vec![true; params.num_layers()];
    adam_step_masked(params, grads, state, lr, &all)
}

/// Adam update restricted to layers with `trainable[i] == true`; other layers
/// and their moments are left untouched. On error nothing is modified.
pub fn adam_step_masked(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    trainable: &[bool],
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    if trainable.len() != params.num_layers()
        || !grads.is_congruent(params)
        || !state.first_moment.is_congruent(params)
    {
        return Err(Error::Shape("gradients, optimizer state and parameters disagree".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numerical("gradient contains NaN or Inf".into()));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for layer in (0..params.num_layers()).filter(|&i| trainable[i]) {
        let (w, b) = params.layer_mut(layer);
        Zip::from(w)
            .and(&grads.d_weights[layer])
            .and(&mut state.first_moment.d_weights[layer])
            .and(&mut state.second_moment.d_weights[layer])
            .for_each(update);
        Zip::from(b)
            .and(&grads.d_biases[layer])
            .and(&mut state.first_moment.d_biases[layer])
            .and(&mut state.second_moment.d_biases[layer])
            .for_each(update);
    }
    if !params.is_finite() {
        return Err(Error::Numerical(format!(
            "Adam step {} produced non-finite parameters",
            state.step_count
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use ndarray::array;

    fn scalar_params(v: f64) -> MlpParams {
        MlpParams::from_parts(vec![array![[v]]], vec![array![0.0]]).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = init_params(&[3, 4, 1], 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let g = Gradients::zeros_like(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut state, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step_count, 10);
        assert_eq!(state.first_moment, Gradients::zeros_like(&p));
        assert_eq!(state.second_moment, Gradients::zeros_like(&p));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(0.5);
        let mut state = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.d_weights[0][[0, 0]] = 1.0;
        adam_step(&mut p, &g, &mut state, 1e-3).unwrap();
        // m_hat = g, v_hat = g^2 => delta = lr * 1 / (1 + eps)
        let moved = 0.5 - p.weights()[0][[0, 0]];
        assert!((moved - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_leaves_everything_unchanged() {
        let mut p = scalar_params(0.5);
        let mut state = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.d_weights[0][[0, 0]] = f64::NAN;
        let before = (p.clone(), state.clone());
        assert!(matches!(adam_step(&mut p, &g, &mut state, 1e-3), Err(Error::Numerical(_))));
        assert_eq!((p, state), before);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = init_params(&[2, 3, 1], 4).unwrap();
            let mut state = AdamState::new(&p);
            let mut g = Gradients::zeros_like(&p);
            g.d_weights[0].fill(0.3);
            g.d_biases[1].fill(-0.7);
            for _ in 0..5 {
                adam_step(&mut p, &g, &mut state, 1e-2).unwrap();
            }
            (p, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_layers_and_moments_untouched() {
        let mut p = init_params(&[2, 3, 1], 4).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.d_weights[0].fill(1.0);
        g.d_weights[1].fill(1.0);
        adam_step_masked(&mut p, &g, &mut state, 1e-2, &[false, true]).unwrap();
        assert!(p.layer_bits_equal(&before, 0));
        assert!(!p.layer_bits_equal(&before, 1));
        assert!(state.first_moment.d_weights[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_moment_decays_but_stays_non_negative() {
        let mut p = scalar_params(0.0);
        let mut state = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.d_weights[0][[0, 0]] = 2.0;
        adam_step(&mut p, &g, &mut state, 1e-3).unwrap();
        let zero = Gradients::zeros_like(&p);
        let mut prev = state.second_moment.d_weights[0][[0, 0]];
        for _ in 0..100 {
            adam_step(&mut p, &zero, &mut state, 1e-3).unwrap();
            let v = state.second_moment.d_weights[0][[0, 0]];
            assert!(v >= 0.0 && v <= prev);
            prev = v;
        }
    }
}
