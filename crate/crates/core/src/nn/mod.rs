//! Recurrent Gaussian networks with hand-written reverse-mode gradients.

pub mod adam;
pub mod checkpoint;
pub mod gru;
pub mod head;
pub mod stack;
pub mod tensor;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamState};
pub use gru::GruLayer;
pub use head::{gaussian_head, HeadParams};
pub use stack::{gru_forward, Architecture, GruStackParams, StackTrace};
pub use tensor::Tensor;
