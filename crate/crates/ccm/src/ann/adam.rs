//! ADAM optimizer with bias correction.

use ndarray::{Array1, Array4};

use super::net::{Gradients, NetworkParams};
use super::train::TrainConfig;
use crate::linalg::Scalar;

/// Per-parameter first/second moment accumulators plus the step counter and
/// the hyperparameters they were built with.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub t: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub(crate) m: Vec<(Array4<F>, Array1<F>)>,
    pub(crate) v: Vec<(Array4<F>, Array1<F>)>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &NetworkParams<F>, cfg: &TrainConfig) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| {
                    (
                        Array4::zeros(l.weight.dim()),
                        Array1::zeros(l.bias.len()),
                    )
                })
                .collect::<Vec<_>>()
        };
        Self {
            t: 0,
            alpha: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One ADAM update:
/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
/// theta <- theta - alpha * m-hat / (sqrt(v-hat) + eps), with bias-corrected
/// m-hat = m/(1-b1^t), v-hat = v/(1-b2^t).
pub fn adam_step<F: Scalar>(
    params: &mut NetworkParams<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let b1 = F::from_real(cfg.beta1);
    let b2 = F::from_real(cfg.beta2);
    let one_m_b1 = F::from_real(1.0 - cfg.beta1);
    let one_m_b2 = F::from_real(1.0 - cfg.beta2);
    let bc1 = F::from_real(1.0 - cfg.beta1.powi(t));
    let bc2 = F::from_real(1.0 - cfg.beta2.powi(t));
    let alpha = F::from_real(cfg.learning_rate);
    let eps = F::from_real(cfg.epsilon);

    let update = |theta: &mut F, g: F, m: &mut F, v: &mut F| {
        *m = b1 * *m + one_m_b1 * g;
        *v = b2 * *v + one_m_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta = *theta - alpha * m_hat / (v_hat.sqrt() + eps);
    };

    for ((layer, (gw, gb)), ((mw, mb), (vw, vb))) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((t_, g), m), v) in layer
            .weight
            .iter_mut()
            .zip(gw.iter())
            .zip(mw.iter_mut())
            .zip(vw.iter_mut())
        {
            update(t_, *g, m, v);
        }
        for (((t_, g), m), v) in layer
            .bias
            .iter_mut()
            .zip(gb.iter())
            .zip(mb.iter_mut())
            .zip(vb.iter_mut())
        {
            update(t_, *g, m, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::net::{init_network, NetworkSpec};
    use crate::ann::LossKind;

    fn tiny() -> (NetworkParams<f64>, TrainConfig) {
        let spec = NetworkSpec {
            input_size: 4,
            depth: 1,
            base_channels: 2,
            dense_layers_per_block: 1,
            kernel_size: 3,
            seed: 1,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
            loss: LossKind::PixelwiseCrossEntropy,
        };
        (init_network::<f64>(&spec).unwrap(), cfg)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut params, cfg) = tiny();
        let before = params.clone();
        let grads = Gradients::zeros_like(&params);
        let mut state = OptimizerState::new(&params, &cfg);
        adam_step(&mut params, &grads, &mut state, &cfg);
        for (a, b) in params.layers.iter().zip(&before.layers) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn scalar_step_matches_hand_evaluation() {
        // theta=0, g=1, alpha=0.1, b1=0.9, b2=0.999, eps=1e-8, t: 0 -> 1:
        // m-hat = 1, v-hat = 1, theta = -0.1/(1 + 1e-8).
        let (mut params, cfg) = tiny();
        for l in &mut params.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let mut grads = Gradients::zeros_like(&params);
        grads.layers[0].0[(0, 0, 0, 0)] = 1.0;
        let mut state = OptimizerState::new(&params, &cfg);
        adam_step(&mut params, &grads, &mut state, &cfg);
        let got = params.layers[0].weight[(0, 0, 0, 0)];
        let want = -0.1 / (1.0 + 1e-8);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - (-0.09999999)).abs() < 1e-7);
    }

    #[test]
    fn identical_steps_are_bitwise_identical() {
        let (params, cfg) = tiny();
        let mut grads = Gradients::zeros_like(&params);
        grads.layers[0].0.fill(0.5);
        grads.layers[0].1.fill(-0.25);

        let mut p1 = params.clone();
        let mut s1 = OptimizerState::new(&p1, &cfg);
        adam_step(&mut p1, &grads, &mut s1, &cfg);

        let mut p2 = params.clone();
        let mut s2 = OptimizerState::new(&p2, &cfg);
        adam_step(&mut p2, &grads, &mut s2, &cfg);

        for (a, b) in p1.layers.iter().zip(&p2.layers) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
    }
}
