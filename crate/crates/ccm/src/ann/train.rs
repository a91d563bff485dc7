//! Minibatch training loop, per-epoch evaluation, and timed inference.

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, OptimizerState};
use super::layers::{sigmoid_inplace, FeatMap};
use super::loss::{loss_grad_logits, LossKind};
use super::net::{init_network, run_backward, run_forward, NetworkParams, NetworkSpec};
use crate::image::{resample, ImageGrid};
use crate::metrics::{mae, ssim, SsimConfig};
use crate::phantom::PairedDataset;
use crate::util::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    /// Desk-scale defaults tuned for CPU training.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
            loss: LossKind::PixelwiseCrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::InvalidArg("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::InvalidArg(
                "need alpha > 0, 0 <= beta < 1, epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mae: f64,
    pub test_ssim: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub curve: Vec<EpochStats>,
    pub test_mae: f64,
    pub test_ssim: f64,
}

/// Flattens dataset images to f32 rows, resampling to `input_size` when the
/// stored size differs.
fn to_rows(images: Vec<&ImageGrid>, n: usize) -> Result<Array2<f32>> {
    let hw = n * n;
    let mut out = Array2::<f32>::zeros((images.len(), hw));
    for (i, img) in images.into_iter().enumerate() {
        let resized;
        let src = if img.height() == n && img.width() == n {
            img
        } else {
            resized = resample(img, n, n)?;
            &resized
        };
        for (o, &v) in out.row_mut(i).iter_mut().zip(src.data()) {
            *o = v as f32;
        }
    }
    Ok(out)
}

fn gather_batch(rows: &Array2<f32>, indices: &[usize], hw: usize) -> Array2<f32> {
    let mut data = Vec::with_capacity(indices.len() * hw);
    for &i in indices {
        data.extend_from_slice(rows.row(i).as_slice().expect("contiguous"));
    }
    Array2::from_shape_vec((1, indices.len() * hw), data).expect("sized")
}

/// Mean test MAE and SSIM of the current parameters over the given rows.
fn evaluate(
    params: &NetworkParams<f32>,
    inputs: &Array2<f32>,
    targets: &Array2<f32>,
    indices: &[usize],
    n: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    // SSIM needs a window no larger than the image.
    let cfg = if n >= 11 {
        SsimConfig::default()
    } else {
        SsimConfig {
            window: if n % 2 == 1 { n } else { n - 1 },
            ..SsimConfig::default()
        }
    };
    let hw = n * n;
    let mut sum_mae = 0.0;
    let mut sum_ssim = 0.0;
    for chunk in indices.chunks(16) {
        let x = gather_batch(inputs, chunk, hw);
        let pass = run_forward(params, FeatMap::new(1, chunk.len(), n, n, x));
        let mut probs = pass.logits;
        sigmoid_inplace(&mut probs);
        let flat = probs.as_slice().expect("contiguous");
        for (j, &idx) in chunk.iter().enumerate() {
            let rec = ImageGrid::new(
                n,
                n,
                1.0,
                flat[j * hw..(j + 1) * hw].iter().map(|&v| v as f64).collect(),
            )?;
            let tgt = ImageGrid::new(
                n,
                n,
                1.0,
                targets.row(idx).iter().map(|&v| v as f64).collect(),
            )?;
            sum_mae += mae(&rec, &tgt)?;
            sum_ssim += ssim(&rec, &tgt, &cfg)?;
        }
    }
    let count = indices.len() as f64;
    Ok((sum_mae / count, sum_ssim / count))
}

/// Trains a fresh network on the dataset's train split, evaluating on the
/// test split each epoch. Checkpoints (`epoch_NNN.ccmw`, `final.ccmw`) and
/// the loss curve CSV are written to `out_dir` when given. Aborts with a
/// diagnostic if the loss goes non-finite.
pub fn train(
    dataset: &PairedDataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if dataset.entries.is_empty() {
        return Err(Error::InvalidArg("dataset is empty".into()));
    }
    let n = spec.input_size;
    let hw = n * n;
    // Sensor images are the network input; objects are the targets.
    let inputs = to_rows(dataset.entries.iter().map(|(_, s)| s).collect(), n)?;
    let targets = to_rows(dataset.entries.iter().map(|(o, _)| o).collect(), n)?;
    let train_idx = dataset.manifest.train_indices.clone();
    let test_idx = dataset.manifest.test_indices.clone();
    if train_idx.is_empty() {
        return Err(Error::InvalidArg("train split is empty".into()));
    }

    let mut params = init_network::<f32>(spec)?;
    let mut state = OptimizerState::new(&params, cfg);
    let mut curve = Vec::with_capacity(cfg.epochs);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut order = train_idx;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = gather_batch(&inputs, batch, hw);
            let t = gather_batch(&targets, batch, hw);
            let pass = run_forward(&params, FeatMap::new(1, batch.len(), n, n, x));
            let (loss, d_logits) = loss_grad_logits(&pass.logits, &t, cfg.loss);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {bi}"),
                });
            }
            let grads = run_backward(&params, &pass, d_logits);
            adam_step(&mut params, &grads, &mut state, cfg);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let (test_mae, test_ssim) = evaluate(&params, &inputs, &targets, &test_idx, n)?;
        curve.push(EpochStats {
            epoch,
            train_loss,
            test_mae,
            test_ssim,
        });
        if let Some(dir) = out_dir {
            super::checkpoint::save_checkpoint(
                &dir.join(format!("epoch_{epoch:03}.ccmw")),
                &params,
                Some(&state),
            )?;
        }
    }

    if let Some(dir) = out_dir {
        super::checkpoint::save_checkpoint(&dir.join("final.ccmw"), &params, Some(&state))?;
        write_loss_curve(&dir.join("loss_curve.csv"), &curve)?;
    }

    let last = curve.last().expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        curve: curve.clone(),
        test_mae: last.test_mae,
        test_ssim: last.test_ssim,
    })
}

/// Loss-curve CSV: epoch, train_loss, test_mae, test_ssim.
pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,test_mae,test_ssim")?;
    for s in curve {
        writeln!(
            f,
            "{},{:.9},{:.9},{:.9}",
            s.epoch, s.train_loss, s.test_mae, s.test_ssim
        )?;
    }
    Ok(())
}

/// Single forward pass with the elapsed wall time of the pass alone
/// (conversion and I/O excluded).
pub fn infer(params: &NetworkParams<f32>, sensor: &ImageGrid) -> Result<(ImageGrid, Duration)> {
    let n = params.spec.input_size;
    if sensor.height() != n || sensor.width() != n {
        return Err(Error::shape(
            "infer input",
            format!("{n}x{n}"),
            format!("{}x{}", sensor.height(), sensor.width()),
        ));
    }
    let data: Vec<f32> = sensor.data().iter().map(|&v| v as f32).collect();
    let x = Array2::from_shape_vec((1, n * n), data).expect("sized");

    let start = Instant::now();
    let pass = run_forward(params, FeatMap::new(1, 1, n, n, x));
    let mut probs = pass.logits;
    sigmoid_inplace(&mut probs);
    let elapsed = start.elapsed();

    let img = ImageGrid::new(
        n,
        n,
        sensor.pitch_um(),
        probs.iter().map(|&v| v as f64).collect(),
    )?;
    Ok((img, elapsed))
}
