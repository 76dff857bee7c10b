//! Text-to-speech from noisy training data.
//!
//! A non-autoregressive acoustic model (phoneme encoder, length regulator,
//! pitch predictor, mel decoder) is conditioned on a frame-level noise signal.
//! During training the noise comes from the ground-truth noise track (paired
//! data), from a UNet noise extractor (unpaired data), or from silence (clean
//! data). An adversarial CTC head behind a gradient-reversal layer keeps text
//! content out of the extracted noise. At inference the model is conditioned on
//! silence and produces clean speech.

pub mod archive;
pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
