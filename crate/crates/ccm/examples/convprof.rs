use ccm::ann::{init_network, NetworkSpec};
use ccm::image::ImageGrid;
use std::time::Instant;

fn main() {
    // Time one full training step at the acceptance shape: batch 16, 32x32.
    let spec = NetworkSpec::desk(32, 42);
    let params = init_network::<f32>(&spec).unwrap();
    let n = 32;
    let imgs: Vec<ImageGrid> = (0..16)
        .map(|k| {
            let vals: Vec<f64> = (0..n * n)
                .map(|i| (ccm::util::derive_seed(k, i as u64) % 1000) as f64 / 999.0)
                .collect();
            ImageGrid::new(n, n, 1.0, vals).unwrap()
        })
        .collect();
    let targets = imgs.clone();

    let _ = ccm::ann::backward_net(
        &params,
        &imgs,
        &targets,
        ccm::ann::LossKind::PixelwiseCrossEntropy,
    )
    .unwrap();
    let t = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let _ = ccm::ann::backward_net(
            &params,
            &imgs,
            &targets,
            ccm::ann::LossKind::PixelwiseCrossEntropy,
        )
        .unwrap();
    }
    eprintln!(
        "backward_net (1 step, batch 16): {:.0} ms",
        t.elapsed().as_secs_f64() * 1e3 / reps as f64
    );

    let t = Instant::now();
    for _ in 0..reps {
        let _ = ccm::ann::forward_net(&params, &imgs).unwrap();
    }
    eprintln!(
        "forward_net (batch 16): {:.0} ms",
        t.elapsed().as_secs_f64() * 1e3 / reps as f64
    );
}
