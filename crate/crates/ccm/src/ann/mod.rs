//! From-scratch encoder-decoder reconstruction network.
//!
//! The architecture is a U-net whose convolution stacks are dense blocks:
//! every convolution inside a block emits `base_channels` feature maps and
//! concatenates them onto its input, so a block with `L` layers grows its
//! channel count by `L x base_channels`. The encoder pools 2x2 after each
//! block, the decoder upsamples (nearest neighbor), concatenates the
//! matching encoder skip, and runs another block; a 1x1 convolution plus a
//! logistic squash produces the reconstruction. Training is plain minibatch
//! ADAM on pixel-wise cross-entropy computed in logit space.
//!
//! Everything (forward, backward, optimizer) is implemented here directly;
//! gradients are verified against central finite differences in the tests.
//! All kernels are generic over f32 (production) and f64 (gradient checks).

mod adam;
mod checkpoint;
mod layers;
mod loss;
mod net;
mod train;

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CCMW_MAGIC, CCMW_VERSION};
pub use loss::{loss, loss_and_grad, LossKind};
pub use net::{backward_net, forward_net, init_network, Gradients, NetworkParams, NetworkSpec};
pub use train::{infer, train, EpochStats, TrainConfig, TrainOutcome};
