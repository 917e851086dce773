//! Shadow attenuation and detection trained adversarially under a
//! log-domain illumination model.
//!
//! - [`imaging`]: images, masks, PNG I/O, resizing and boundary bands
//! - [`physics`]: the illumination model, shadow strength and the physics loss
//! - [`synthdata`]: deterministic synthetic shadow datasets
//! - [`nets`]: the encoder-decoder networks with hand-written gradients
//! - [`adversarial`]: losses and the alternating training loop
//! - [`evaluation`]: balanced error rate and boundary-error analysis

pub mod adversarial;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod nets;
pub mod physics;
pub mod synthdata;

pub use error::{Error, Result};
