//! Perfect-prognosis statistical downscaling with convolutional networks,
//! Integrated Gradients saliency and the saliency aggregation diagnostics
//! (accumulated saliency maps and saliency dispersion maps).

pub mod error;
pub mod evaluation;
pub mod grid;
pub mod io;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod training;
pub mod workflow;
pub mod xai;

pub use error::{Error, ErrorCategory, Result};
