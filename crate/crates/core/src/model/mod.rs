//! Segmentation network, optimizer and checkpoints.

pub mod checkpoint;
mod layers;
pub mod optim;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use optim::Adam;
pub use unet::{stack_images, unstack_probs, ForwardCache, Grads, NetworkSpec, Param, Params, UNet};
