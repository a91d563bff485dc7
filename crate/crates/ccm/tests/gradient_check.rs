//! Central finite-difference verification of the analytic gradients — the
//! single most important test of the network implementation. Runs in f64 on
//! a tiny configuration.

use ccm::ann::{backward_net, init_network, loss, LossKind, NetworkSpec};
use ccm::image::ImageGrid;
use ccm::linalg::Scalar;

// Central differences at step 1e-3 cross a ReLU kink whenever a
// pre-activation sits within the step's reach, which breaks the comparison
// for reasons unrelated to gradient correctness. This seed keeps every unit
// clear of the kink for the pinned inputs (verified margin ~1e-7 vs the
// 1e-4 tolerance); smaller steps (1e-5) pass for arbitrary seeds.
fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        input_size: 8,
        depth: 1,
        base_channels: 2,
        dense_layers_per_block: 2,
        kernel_size: 3,
        seed: 7,
    }
}

fn test_batch(n: usize) -> (Vec<ImageGrid>, Vec<ImageGrid>) {
    let mk = |seed: u64, soft: bool| {
        let vals: Vec<f64> = (0..n * n)
            .map(|i| {
                let h = ccm::util::derive_seed(seed, i as u64);
                let v = (h % 1000) as f64 / 999.0;
                if soft {
                    v
                } else {
                    // Mix of hard and soft targets.
                    match h % 4 {
                        0 => 0.0,
                        1 => 1.0,
                        _ => v,
                    }
                }
            })
            .collect();
        ImageGrid::new(n, n, 1.0, vals).unwrap()
    };
    (
        vec![mk(7, true), mk(8, true)],
        vec![mk(17, false), mk(18, false)],
    )
}

fn loss_at(
    params: &ccm::ann::NetworkParams<f64>,
    inputs: &[ImageGrid],
    targets: &[ImageGrid],
    kind: LossKind,
) -> f64 {
    // Forward to logits via backward_net's forward path is not exposed;
    // recompute through forward_net would lose the logits. Instead perturb
    // and reuse backward_net's loss value, which is computed from logits.
    let (_, l) = backward_net(params, inputs, targets, kind).unwrap();
    l
}

fn run_check(kind: LossKind) -> f64 {
    let spec = tiny_spec();
    let mut params = init_network::<f64>(&spec).unwrap();
    let (inputs, targets) = test_batch(spec.input_size);
    let (grads, _) = backward_net(&params, &inputs, &targets, kind).unwrap();
    assert!(grads.all_finite(), "analytic gradients must be finite");

    let h = 1e-3;
    let count = params.param_count();
    let mut max_rel = 0.0_f64;
    for idx in 0..count {
        let orig = params.get_flat(idx);
        params.set_flat(idx, orig + h);
        let lp = loss_at(&params, &inputs, &targets, kind);
        params.set_flat(idx, orig - h);
        let lm = loss_at(&params, &inputs, &targets, kind);
        params.set_flat(idx, orig);
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.get_flat(idx).to_real();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let max_rel = run_check(LossKind::PixelwiseCrossEntropy);
    let elapsed = start.elapsed();
    println!("gradient check (cross-entropy): max relative error {max_rel:.3e} in {elapsed:?}");
    assert!(max_rel < 1e-4, "max relative error {max_rel}");
    assert!(elapsed.as_secs() < 30, "gradient check too slow: {elapsed:?}");
}

#[test]
fn mse_gradients_match_finite_differences() {
    let max_rel = run_check(LossKind::MeanSquaredError);
    println!("gradient check (MSE): max relative error {max_rel:.3e}");
    assert!(max_rel < 1e-4, "max relative error {max_rel}");
}

#[test]
fn head_bias_gradient_equals_half_for_zero_everything() {
    // Zero params, zero inputs, zero targets: dL/d(head bias) = p - t = 0.5
    // by the cross-entropy/logit identity (mean over pixels of 0.5).
    let spec = tiny_spec();
    let mut params = init_network::<f64>(&spec).unwrap();
    for i in 0..params.param_count() {
        params.set_flat(i, 0.0);
    }
    let n = spec.input_size;
    let zeros = ImageGrid::zeros(n, n, 1.0);
    let (grads, l) = backward_net(
        &params,
        &[zeros.clone()],
        &[zeros],
        LossKind::PixelwiseCrossEntropy,
    )
    .unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    let hb = grads.head_bias();
    assert!((hb - 0.5).abs() < 1e-12, "head bias gradient {hb}");
}

#[test]
fn loss_public_surface_matches_logit_convention() {
    // loss() consumes logits; zero logits vs 0.5 targets give ln 2.
    let z = ndarray::Array2::<f64>::zeros((1, 4));
    let t = ndarray::Array2::from_elem((1, 4), 0.5);
    assert!((loss(&z, &t, LossKind::PixelwiseCrossEntropy) - std::f64::consts::LN_2).abs() < 1e-12);
}
