//! Neural building blocks on top of [`crate::graph`].

pub mod ctc;
pub mod layers;
pub mod ssim;
pub mod transformer;

pub use layers::{Ctx, Linear, LayerNorm};
pub use ssim::ValueRange;
pub use transformer::{TransformerBlock, TransformerStack};
