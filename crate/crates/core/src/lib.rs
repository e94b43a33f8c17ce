//! Instruction-driven image editing with grounded masks and mask-guided DDIM.
//!
//! A free-form instruction is parsed into a segmentation prompt and a caption
//! pair ([`language`]), a grounding detector plus segmentation model turns the
//! prompt into an edit mask ([`segmenter`]), and the editor inverts the input
//! latent with the input caption before denoising under the edited caption,
//! restoring the inverted trajectory outside the mask at every step
//! ([`editor`]). A caption-contrast mask ([`mask`]) is available for
//! side-by-side comparisons.
//!
//! Every model is reached through a capability trait, and the crate ships
//! analytic toy backends so the whole math core can be checked offline.

pub mod backends;
pub mod editor;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod language;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod scheduler;
pub mod segmenter;
pub mod synthetic;

pub use error::{Error, Result};
pub use exec::Execution;

/// Latent tensor laid out as `[channels, height, width]`.
pub type Latent = ndarray::Array3<f64>;

/// RGB image laid out as `[3, height, width]` with values in `[0, 1]`.
pub type Image = ndarray::Array3<f64>;
