//! Builders for the three downscaling topologies: a fully-convolutional
//! UNET, DeepESD (convolutions + one linear dense layer) and PAN
//! (convolutions + two dense layers).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelGraph, Padding, Scalar, Shape};

pub const DEEPESD_WIDTHS: [usize; 3] = [50, 25, 10];
pub const PAN_WIDTHS: [usize; 5] = [15, 20, 20, 20, 40];
pub const UNET_ENCODER_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
pub const UNET_DECODER_WIDTHS: [usize; 4] = [512, 256, 128, 64];
const UNET_HEAD_WIDTH: usize = 64;
const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Unet,
    DeepEsd,
    Pan,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" | "cnn-unet" => Ok(Architecture::Unet),
            "deepesd" | "cnn-deepesd" => Ok(Architecture::DeepEsd),
            "pan" | "cnn-pan" => Ok(Architecture::Pan),
            other => Err(Error::Input(format!("unknown architecture '{other}' (expected unet, deepesd or pan)"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Unet => "unet",
            Architecture::DeepEsd => "deepesd",
            Architecture::Pan => "pan",
        })
    }
}

/// Predictand grid the UNET output is cropped to, and the land cells
/// (row-major) that become output neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub architecture: Architecture,
    /// (channels, lat, lon) of one predictor sample.
    pub input: (usize, usize, usize),
    pub locations: usize,
    /// Multiplies every kernel count; rounded up with a floor of one.
    pub width_scale: f64,
    /// Predictand/predictor resolution ratio (UNET head only).
    pub upsampling_factor: usize,
    pub target_grid: Option<TargetGrid>,
}

impl ArchitectureConfig {
    pub fn dense(architecture: Architecture, input: (usize, usize, usize), locations: usize, width_scale: f64) -> Self {
        Self { architecture, input, locations, width_scale, upsampling_factor: 1, target_grid: None }
    }

    pub fn unet(input: (usize, usize, usize), width_scale: f64, upsampling_factor: usize, target: TargetGrid) -> Self {
        Self {
            architecture: Architecture::Unet,
            input,
            locations: target.cells.len(),
            width_scale,
            upsampling_factor,
            target_grid: Some(target),
        }
    }

    pub fn scaled(&self, width: usize) -> usize {
        scaled_width(width, self.width_scale)
    }

    fn validate(&self) -> Result<()> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(Error::Build(format!("width scale {} outside (0, 1]", self.width_scale)));
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Build("empty input shape".into()));
        }
        if self.locations == 0 {
            return Err(Error::Build("model needs at least one output location".into()));
        }
        Ok(())
    }
}

pub fn scaled_width(width: usize, scale: f64) -> usize {
    // tolerance keeps e.g. 50 * 0.1 from rounding up to 6
    ((width as f64 * scale - 1e-9).ceil() as usize).max(1)
}

pub fn build<T: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ModelGraph<T>> {
    match config.architecture {
        Architecture::Unet => build_unet(config, seed),
        Architecture::DeepEsd => build_deepesd(config, seed),
        Architecture::Pan => build_pan(config, seed),
    }
}

fn conv(in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_channels, out_channels, kernel: CONV_KERNEL, padding: Padding::Same }
}

fn expect_arch(config: &ArchitectureConfig, arch: Architecture) -> Result<()> {
    if config.architecture != arch {
        return Err(Error::Build(format!("{} builder called with a {} config", arch, config.architecture)));
    }
    config.validate()
}

fn conv_stack(config: &ArchitectureConfig, widths: &[usize]) -> (Vec<LayerSpec>, usize) {
    let (mut prev, h, w) = config.input;
    let mut layers = Vec::new();
    for &width in widths {
        let width = config.scaled(width);
        layers.push(conv(prev, width));
        layers.push(LayerSpec::Relu);
        prev = width;
    }
    layers.push(LayerSpec::Flatten);
    (layers, prev * h * w)
}

/// conv(50) -> conv(25) -> conv(10), ReLU after each, then a linear dense
/// layer with one unit per predictand location.
pub fn build_deepesd<T: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ModelGraph<T>> {
    expect_arch(config, Architecture::DeepEsd)?;
    let (mut layers, flat) = conv_stack(config, &DEEPESD_WIDTHS);
    layers.push(LayerSpec::Dense { inputs: flat, units: config.locations });
    let (c, h, w) = config.input;
    ModelGraph::build(Shape::grid(c, h, w), layers, seed)
}

/// Five ReLU convolutions, a ReLU dense layer of ceil(locations / 2) units
/// and a linear output layer.
pub fn build_pan<T: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ModelGraph<T>> {
    expect_arch(config, Architecture::Pan)?;
    let (mut layers, flat) = conv_stack(config, &PAN_WIDTHS);
    let hidden = config.locations.div_ceil(2);
    layers.push(LayerSpec::Dense { inputs: flat, units: hidden });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { inputs: hidden, units: config.locations });
    let (c, h, w) = config.input;
    ModelGraph::build(Shape::grid(c, h, w), layers, seed)
}

/// Number of stride-2 upsampling blocks needed to reach `factor`.
pub fn head_blocks(factor: usize) -> usize {
    let mut blocks = 0;
    while (1usize << blocks) < factor.max(1) {
        blocks += 1;
    }
    blocks
}

/// Encoder of five conv+BN+ReLU blocks (max pooling after the first four),
/// decoder of four transposed-conv + skip-concat + conv blocks, an
/// upsampling head and a 1x1 linear projection masked to land cells.
pub fn build_unet<T: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<ModelGraph<T>> {
    expect_arch(config, Architecture::Unet)?;
    let (c, h, w) = config.input;
    let levels = UNET_DECODER_WIDTHS.len();
    if h % (1 << levels) != 0 || w % (1 << levels) != 0 {
        return Err(Error::Build(format!("UNET input {h}x{w} must be divisible by {}", 1 << levels)));
    }
    let target = config
        .target_grid
        .as_ref()
        .ok_or_else(|| Error::Build("UNET needs the predictand grid and land mask".into()))?;
    if target.cells.len() != config.locations {
        return Err(Error::Build("target mask size differs from the location count".into()));
    }

    let mut layers = Vec::new();
    let mut skips = Vec::new();
    let mut prev = c;
    for (level, &width) in UNET_ENCODER_WIDTHS.iter().enumerate() {
        let width = config.scaled(width);
        layers.push(conv(prev, width));
        layers.push(LayerSpec::BatchNorm { channels: width });
        layers.push(LayerSpec::Relu);
        if level < levels {
            skips.push(layers.len() - 1);
            layers.push(LayerSpec::MaxPool2);
        }
        prev = width;
    }
    for (d, &width) in UNET_DECODER_WIDTHS.iter().enumerate() {
        let width = config.scaled(width);
        layers.push(LayerSpec::ConvTranspose2d { in_channels: prev, out_channels: width, kernel: 2, stride: 2 });
        layers.push(LayerSpec::Relu);
        let skip = skips[levels - 1 - d];
        layers.push(LayerSpec::ConcatSkip { skip });
        let skip_width = config.scaled(UNET_ENCODER_WIDTHS[levels - 1 - d]);
        layers.push(conv(width + skip_width, width));
        layers.push(LayerSpec::Relu);
        prev = width;
    }
    let head_width = config.scaled(UNET_HEAD_WIDTH);
    for _ in 0..head_blocks(config.upsampling_factor) {
        layers.push(LayerSpec::ConvTranspose2d { in_channels: prev, out_channels: head_width, kernel: 2, stride: 2 });
        layers.push(LayerSpec::Relu);
        prev = head_width;
    }
    layers.push(LayerSpec::Conv2d { in_channels: prev, out_channels: 1, kernel: 1, padding: Padding::Same });
    layers.push(LayerSpec::CenterCrop { height: target.rows, width: target.cols });
    layers.push(LayerSpec::MaskSelect { cells: target.cells.clone() });
    ModelGraph::build(Shape::grid(c, h, w), layers, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, Tensor};

    fn unet_cfg(scale: f64, factor: usize, h: usize, w: usize) -> ArchitectureConfig {
        let (rows, cols) = (h * factor, w * factor);
        ArchitectureConfig::unet((3, h, w), scale, factor, TargetGrid { rows, cols, cells: (0..rows * cols).step_by(3).collect() })
    }

    #[test]
    fn deepesd_parameter_count() {
        let cfg = ArchitectureConfig::dense(Architecture::DeepEsd, (4, 8, 8), 16, 1.0);
        let g = build_deepesd::<f32>(&cfg, 0).unwrap();
        let expected = 50 * (4 * 9 + 1) + 25 * (50 * 9 + 1) + 10 * (25 * 9 + 1) + (10 * 64 * 16 + 16);
        assert_eq!(expected, 25641);
        assert_eq!(g.params().numel(), 25641);
    }

    #[test]
    fn deepesd_full_scale_head() {
        let cfg = ArchitectureConfig::dense(Architecture::DeepEsd, (20, 4, 4), 10870, 1.0);
        let g = build_deepesd::<f32>(&cfg, 0).unwrap();
        assert_eq!(g.output_shape(), Shape::Flat(10870));
        let widths: Vec<usize> = g
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(widths, DEEPESD_WIDTHS);
    }

    #[test]
    fn pan_dense_sizes() {
        let cfg = ArchitectureConfig::dense(Architecture::Pan, (20, 2, 2), 10870, 1.0);
        let g = build_pan::<f32>(&cfg, 0).unwrap();
        let dense: Vec<usize> = g
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units, .. } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(dense, vec![5435, 10870]);
        assert!(!g.has_batchnorm());
        assert!(!g.layers().iter().any(|l| matches!(l, LayerSpec::MaxPool2)));

        let small = build_pan::<f32>(&ArchitectureConfig::dense(Architecture::Pan, (4, 8, 8), 16, 0.5), 3).unwrap();
        assert!(small.layers().iter().any(|l| matches!(l, LayerSpec::Dense { units: 8, .. })));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ArchitectureConfig::dense(Architecture::Pan, (4, 8, 8), 16, 0.5);
        let a = build_pan::<f32>(&cfg, 42).unwrap();
        let b = build_pan::<f32>(&cfg, 42).unwrap();
        let c = build_pan::<f32>(&cfg, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn degenerate_width_still_runs() {
        for arch in [Architecture::DeepEsd, Architecture::Pan] {
            let cfg = ArchitectureConfig::dense(arch, (2, 4, 4), 3, 1e-6);
            let g = build::<f32>(&cfg, 1).unwrap();
            assert!(g.layers().iter().all(|l| !matches!(l, LayerSpec::Conv2d { out_channels, .. } if *out_channels != 1)));
            let (y, _) = g.forward(&Tensor::zeros(1, g.input_shape()), Mode::Eval).unwrap();
            assert_eq!(y.data.len(), 3);
        }
        let g = build_unet::<f32>(&unet_cfg(1e-6, 2, 16, 16), 1).unwrap();
        let (y, _) = g.forward(&Tensor::zeros(2, g.input_shape()), Mode::Train).unwrap();
        assert_eq!(y.shape, Shape::Flat(g.output_shape().numel()));
    }

    #[test]
    fn unet_structure() {
        let g = build_unet::<f32>(&unet_cfg(1.0 / 16.0, 4, 16, 16), 0).unwrap();
        assert!(!g.has_dense());
        let head = g
            .layers()
            .iter()
            .skip_while(|l| !matches!(l, LayerSpec::ConcatSkip { .. }))
            .filter(|l| matches!(l, LayerSpec::ConvTranspose2d { .. }))
            .count();
        // three decoder transposes follow the first concat, plus the head
        assert_eq!(head, 3 + 2);
        let shapes = g.layer_shapes();
        let crop = g.layers().iter().position(|l| matches!(l, LayerSpec::CenterCrop { .. })).unwrap();
        assert_eq!(shapes[crop - 1], Shape::grid(1, 64, 64));
        for (i, l) in g.layers().iter().enumerate() {
            if let LayerSpec::ConcatSkip { .. } = l {
                let Shape::Grid { channels: before, .. } = shapes[i - 1] else { panic!() };
                let Shape::Grid { channels: after, .. } = shapes[i] else { panic!() };
                assert_eq!(after, 2 * before);
            }
        }
        assert_eq!(g.output_shape(), Shape::Flat((64 * 64usize).div_ceil(3)));
    }

    #[test]
    fn unet_full_widths() {
        let cfg = unet_cfg(1.0, 1, 16, 16);
        let g = build_unet::<f32>(&cfg, 0).unwrap();
        let convs: Vec<usize> = g
            .layers()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, kernel: 3, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![64, 128, 256, 512, 1024, 512, 256, 128, 64]);
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        assert!(build_unet::<f32>(&unet_cfg(0.1, 1, 12, 16), 0).is_err());
    }

    #[test]
    fn head_depth() {
        assert_eq!(head_blocks(1), 0);
        assert_eq!(head_blocks(2), 1);
        assert_eq!(head_blocks(4), 2);
        assert_eq!(head_blocks(3), 2);
    }

    #[test]
    fn width_scaling() {
        assert_eq!(scaled_width(50, 0.1), 5);
        assert_eq!(scaled_width(15, 0.1), 2);
        assert_eq!(scaled_width(64, 1.0), 64);
        assert_eq!(scaled_width(10, 1e-9), 1);
        for arch in [Architecture::DeepEsd, Architecture::Pan] {
            let count = |s| build::<f32>(&ArchitectureConfig::dense(arch, (4, 8, 8), 16, s), 0).unwrap().params().numel();
            assert!(count(1.0) >= count(0.5));
            assert!(count(0.5) >= count(1e-6));
        }
        let count = |s| build::<f32>(&unet_cfg(s, 2, 16, 16), 0).unwrap().params().numel();
        assert!(count(0.25) >= count(0.125));
        assert!(count(0.125) >= count(1e-6));
    }

    #[test]
    fn wrong_builder_is_rejected() {
        let cfg = ArchitectureConfig::dense(Architecture::Pan, (4, 8, 8), 16, 1.0);
        assert!(build_deepesd::<f32>(&cfg, 0).is_err());
        let bad = ArchitectureConfig::dense(Architecture::Pan, (4, 8, 8), 16, 1.5);
        assert!(build_pan::<f32>(&bad, 0).is_err());
    }
}
