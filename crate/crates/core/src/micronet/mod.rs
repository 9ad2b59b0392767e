//! A small conditional velocity network: conv trunk with FiLM time/prompt
//! modulation, an additive control branch on the grayscale condition, a
//! prompt encoder, and low-rank trunk adapters, all with analytic gradients.

pub mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod net;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_params, load_params_expecting, save_params, write_atomic};
pub use encoder::EncoderTrace;
pub use net::{backward, forward, forward_traced, time_embedding, InputGrads, NetInputs, Trace};
pub use params::{Encoder, Group, GroupSet, Lora, LoraPair, ModelParams, NetConfig};
pub use tensor::{softplus, Tensor};

use crate::color_math::{rgb_to_gray, to_float, Image8};

/// Convenience: `[3, S, S]` tensor of an 8-bit image (gray input replicated).
pub fn rgb_tensor(img: &Image8) -> Tensor {
    Tensor::from_image(&to_float(&img.to_rgb()))
}

/// `[1, S, S]` tensor of the grayscale of an image.
pub fn gray_tensor(img: &Image8) -> Tensor {
    Tensor::from_image(&to_float(&rgb_to_gray(img)))
}
