//! Network primitives, the encoder-decoder model, Adam and checkpoints.

mod adam;
mod checkpoint;
pub(crate) mod ops;
mod real;
mod tensor;
mod unet;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Loaded, FORMAT_VERSION, MAGIC};
pub use ops::{BN_EPS, BN_MOMENTUM};
pub use real::Real;
pub use tensor::Tensor;
pub use unet::{
    init_params, unet_backward, unet_forward, Forward, Gradients, Mode, ModelParams, NetRole, Norm,
    OutputActivation, Param, Saved, UNetConfig, INIT_STD,
};
