//! Files and data in and out: the array container, run-config parsing,
//! synthetic datasets and heatmap images.

pub mod synth;
pub mod container;
pub mod config;
pub mod render;
pub mod artifacts;
