use ccm::ann::{train, NetworkSpec, TrainConfig};
use ccm::fiber::{synthesize_operator, NoiseSpec};
use ccm::phantom::{build_dataset, PhantomSpec};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = args.get(1).map(|s| s.as_str()).unwrap_or("beads");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let count: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2000);

    let side = 32;
    let t0 = Instant::now();
    let op = synthesize_operator(side, side, side, side, 32, 2.0, 11).unwrap();
    eprintln!("operator synthesized in {:?}, cond estimate {:?}", t0.elapsed(), op.condition_estimate);

    let spec = match kind {
        "glyphs" => PhantomSpec::desk_glyphs(side, 21),
        _ => PhantomSpec::desk_beads(side, 21),
    };
    let t0 = Instant::now();
    let ds = build_dataset(&spec, &op, &NoiseSpec::gaussian(0.01, 5), count, 0.9, 77).unwrap();
    eprintln!("dataset built in {:?} ({} train / {} test)", t0.elapsed(),
             ds.manifest.train_indices.len(), ds.manifest.test_indices.len());

    let net = NetworkSpec::desk(side, 42);
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        ..TrainConfig::desk()
    };
    let t0 = Instant::now();
    let out = train(&ds, &net, &cfg, None).unwrap();
    let total = t0.elapsed();
    for s in &out.curve {
        eprintln!("epoch {:2}: loss {:.5}  test mae {:.4} ssim {:.4}", s.epoch, s.train_loss, s.test_mae, s.test_ssim);
    }
    eprintln!("trained {} epochs in {:?} ({:.1} s/epoch)", epochs, total, total.as_secs_f64() / epochs as f64);
}
