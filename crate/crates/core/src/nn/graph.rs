use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, UpGeom};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, padding: Padding },
    ConvTranspose2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    MaxPool2,
    BatchNorm { channels: usize },
    Dense { inputs: usize, units: usize },
    Relu,
    Flatten,
    /// Concatenates the output of layer `skip` after the running channels.
    ConcatSkip { skip: usize },
    CenterCrop { height: usize, width: usize },
    /// Picks single-channel grid cells (row-major indices) into a flat vector.
    MaskSelect { cells: Vec<usize> },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ConcatSkip { .. } => "concat_skip",
            LayerSpec::CenterCrop { .. } => "center_crop",
            LayerSpec::MaskSelect { .. } => "mask_select",
        }
    }

    fn output_shape(&self, index: usize, input: Shape, shapes: &[Shape]) -> Result<Shape> {
        let bad = |msg: String| Error::Build(format!("layer {index} ({}): {msg}", self.kind()));
        let grid = |s: Shape| match s {
            Shape::Grid { channels, height, width } => Ok((channels, height, width)),
            Shape::Flat(_) => Err(bad(format!("expects a grid input, got {s}"))),
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, padding } => {
                let (c, h, w) = grid(input)?;
                if c != in_channels {
                    return Err(bad(format!("declared {in_channels} input channels, predecessor gives {c}")));
                }
                if kernel == 0 || out_channels == 0 {
                    return Err(bad("zero-sized kernel".into()));
                }
                match padding {
                    Padding::Same if kernel % 2 == 1 => Ok(Shape::grid(out_channels, h, w)),
                    Padding::Same => Err(bad("same padding needs an odd kernel".into())),
                    Padding::Valid if h >= kernel && w >= kernel => {
                        Ok(Shape::grid(out_channels, h - kernel + 1, w - kernel + 1))
                    }
                    Padding::Valid => Err(bad(format!("kernel {kernel} larger than {h}x{w}"))),
                }
            }
            LayerSpec::ConvTranspose2d { in_channels, out_channels, kernel, stride } => {
                let (c, h, w) = grid(input)?;
                if c != in_channels {
                    return Err(bad(format!("declared {in_channels} input channels, predecessor gives {c}")));
                }
                if stride == 0 || kernel == 0 || out_channels == 0 {
                    return Err(bad("stride and kernel must be positive".into()));
                }
                Ok(Shape::grid(out_channels, (h - 1) * stride + kernel, (w - 1) * stride + kernel))
            }
            LayerSpec::MaxPool2 => {
                let (c, h, w) = grid(input)?;
                if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                    return Err(bad(format!("spatial dims {h}x{w} must be even")));
                }
                Ok(Shape::grid(c, h / 2, w / 2))
            }
            LayerSpec::BatchNorm { channels } => {
                let (c, _, _) = grid(input)?;
                if c != channels {
                    return Err(bad(format!("declared {channels} channels, predecessor gives {c}")));
                }
                Ok(input)
            }
            LayerSpec::Dense { inputs, units } => match input {
                Shape::Flat(n) if n == inputs && units > 0 => Ok(Shape::Flat(units)),
                Shape::Flat(n) => Err(bad(format!("declared {inputs} inputs, predecessor gives {n}"))),
                Shape::Grid { .. } => Err(bad("dense layers need a flattened input".into())),
            },
            LayerSpec::Relu => Ok(input),
            LayerSpec::Flatten => Ok(Shape::Flat(input.numel())),
            LayerSpec::ConcatSkip { skip } => {
                if skip >= index {
                    return Err(bad(format!("skip source {skip} is not an earlier layer")));
                }
                let (c, h, w) = grid(input)?;
                let (sc, sh, sw) = grid(shapes[skip])?;
                if (h, w) != (sh, sw) {
                    return Err(bad(format!("skip source {skip} is {sh}x{sw}, decoder level is {h}x{w}")));
                }
                Ok(Shape::grid(c + sc, h, w))
            }
            LayerSpec::CenterCrop { height, width } => {
                let (c, h, w) = grid(input)?;
                if height > h || width > w {
                    return Err(bad(format!("cannot crop {h}x{w} to {height}x{width}")));
                }
                Ok(Shape::grid(c, height, width))
            }
            LayerSpec::MaskSelect { ref cells } => {
                let (c, h, w) = grid(input)?;
                if c != 1 {
                    return Err(bad(format!("mask selection needs one channel, got {c}")));
                }
                if let Some(&bad_cell) = cells.iter().find(|&&i| i >= h * w) {
                    return Err(bad(format!("mask cell {bad_cell} outside {h}x{w}")));
                }
                Ok(Shape::Flat(cells.len()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

/// Named parameter arrays in a fixed order (layer order, then
/// weight/bias or gamma/beta/running mean/running variance).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars, trainable or not.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Input(format!("flat parameter vector has {} values, store has {}", flat.len(), self.numel())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    trainable: t.trainable,
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Gradients<T> {
        Gradients { values: self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect() }
    }
}

/// Parameter gradients and input gradient, each present when requested.
pub type BackwardOutput<T> = (Option<Gradients<T>>, Option<Tensor<T>>);

/// Gradients aligned one-to-one with a [`ParameterStore`]; non-trainable
/// entries stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn to_flat(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    mean: Vec<T>,
    var: Vec<T>,
    inv_std: Vec<T>,
}

/// Activations and routing state recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    version: u64,
    mode: Mode,
    acts: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<u32>>>,
    bn: Vec<Option<BnCache<T>>>,
}

impl<T: Scalar> ForwardTape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("tape holds the input at least")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.acts[0].batch
    }
}

/// Linear chain of layers plus skip edges, with its parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    slots: Vec<Vec<usize>>,
    params: ParameterStore<T>,
    version: u64,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates the layer chain against `input_shape` and initialises
    /// parameters (Glorot-uniform weights, zero biases, unit BN scale).
    pub fn build(input_shape: Shape, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if input_shape.numel() == 0 {
            return Err(Error::Build("empty input shape".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape;
        for (i, layer) in layers.iter().enumerate() {
            current = layer.output_shape(i, current, &shapes)?;
            shapes.push(current);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::default();
        let mut slots = Vec::with_capacity(layers.len());
        let push = |params: &mut ParameterStore<T>, name: String, dims: Vec<usize>, data: Vec<f64>, trainable: bool| {
            params.tensors.push(ParamTensor { name, dims, data: data.into_iter().map(T::from_f64_lossy).collect(), trainable });
            params.tensors.len() - 1
        };
        for (i, layer) in layers.iter().enumerate() {
            let mut slot = Vec::new();
            match *layer {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let rf = kernel * kernel;
                    let w = glorot(&mut rng, in_channels * rf, out_channels * rf, out_channels * in_channels * rf);
                    slot.push(push(&mut params, format!("l{i:02}.conv2d.kernel"), vec![out_channels, in_channels, kernel, kernel], w, true));
                    slot.push(push(&mut params, format!("l{i:02}.conv2d.bias"), vec![out_channels], vec![0.0; out_channels], true));
                }
                LayerSpec::ConvTranspose2d { in_channels, out_channels, kernel, .. } => {
                    let rf = kernel * kernel;
                    let w = glorot(&mut rng, in_channels * rf, out_channels * rf, out_channels * in_channels * rf);
                    slot.push(push(&mut params, format!("l{i:02}.conv_transpose2d.kernel"), vec![in_channels, out_channels, kernel, kernel], w, true));
                    slot.push(push(&mut params, format!("l{i:02}.conv_transpose2d.bias"), vec![out_channels], vec![0.0; out_channels], true));
                }
                LayerSpec::BatchNorm { channels } => {
                    slot.push(push(&mut params, format!("l{i:02}.batchnorm.gamma"), vec![channels], vec![1.0; channels], true));
                    slot.push(push(&mut params, format!("l{i:02}.batchnorm.beta"), vec![channels], vec![0.0; channels], true));
                    slot.push(push(&mut params, format!("l{i:02}.batchnorm.running_mean"), vec![channels], vec![0.0; channels], false));
                    slot.push(push(&mut params, format!("l{i:02}.batchnorm.running_var"), vec![channels], vec![1.0; channels], false));
                }
                LayerSpec::Dense { inputs, units } => {
                    let w = glorot(&mut rng, inputs, units, inputs * units);
                    slot.push(push(&mut params, format!("l{i:02}.dense.weight"), vec![units, inputs], w, true));
                    slot.push(push(&mut params, format!("l{i:02}.dense.bias"), vec![units], vec![0.0; units], true));
                }
                _ => {}
            }
            slots.push(slot);
        }
        Ok(Self { input_shape, layers, shapes, slots, params, version: 0 })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.shapes.last().copied().unwrap_or(self.input_shape)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    /// Mutable access invalidates every tape recorded so far.
    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        self.version += 1;
        &mut self.params
    }

    pub fn replace_params(&mut self, params: ParameterStore<T>) -> Result<()> {
        let same_layout = params.tensors.len() == self.params.tensors.len()
            && params.tensors.iter().zip(&self.params.tensors).all(|(a, b)| a.name == b.name && a.dims == b.dims);
        if !same_layout {
            return Err(Error::Input("parameter store does not match the graph layout".into()));
        }
        self.version += 1;
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            slots: self.slots.clone(),
            params: self.params.cast(),
            version: 0,
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    pub fn has_dense(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dense { .. }))
    }

    fn p(&self, layer: usize, k: usize) -> &[T] {
        &self.params.tensors[self.slots[layer][k]].data
    }

    /// Runs the batch through every layer. In train mode batch-norm uses
    /// batch statistics; the running statistics are not touched (see
    /// [`ModelGraph::commit_batch_statistics`]).
    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardTape<T>)> {
        if input.shape != self.input_shape {
            return Err(Error::Input(format!("input shape {} does not match model input {}", input.shape, self.input_shape)));
        }
        if input.batch == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if mode == Mode::Train && self.has_batchnorm() && input.batch < 2 {
            return Err(Error::Training("batch-norm in train mode needs at least 2 samples per batch".into()));
        }
        let n = input.batch;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        let mut argmax = vec![None; self.layers.len()];
        let mut bn = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let x = &acts[i];
            let out_shape = self.shapes[i];
            let mut y = Tensor::zeros(n, out_shape);
            match *layer {
                LayerSpec::Conv2d { out_channels, .. } => {
                    let g = self.conv_geom(i, x.shape);
                    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
                    let (k, b) = (self.p(i, 0), self.p(i, 1));
                    for s in 0..n {
                        ops::conv2d_forward(x.sample(s), &g, k, b, out_channels, &mut cols, y.sample_mut(s));
                    }
                }
                LayerSpec::ConvTranspose2d { .. } => {
                    let g = self.up_geom(i, x.shape);
                    let mut cols = vec![T::zero(); g.out_channels * g.kh * g.kw * g.height * g.width];
                    let (k, b) = (self.p(i, 0), self.p(i, 1));
                    for s in 0..n {
                        ops::conv_transpose_forward(x.sample(s), &g, k, b, &mut cols, y.sample_mut(s));
                    }
                }
                LayerSpec::MaxPool2 => {
                    let Shape::Grid { channels, height, width } = x.shape else { unreachable!() };
                    let per = out_shape.numel();
                    let mut am = vec![0u32; n * per];
                    for s in 0..n {
                        ops::maxpool2_forward(x.sample(s), channels, height, width, y.sample_mut(s), &mut am[s * per..(s + 1) * per]);
                    }
                    argmax[i] = Some(am);
                }
                LayerSpec::BatchNorm { channels } => {
                    let cache = self.bn_stats(i, x, channels, mode);
                    let hw = x.shape.numel() / channels;
                    let (gamma, beta) = (self.p(i, 0), self.p(i, 1));
                    for s in 0..n {
                        let xs = x.sample(s);
                        let ys = y.sample_mut(s);
                        for c in 0..channels {
                            let (m, is, gm, bt) = (cache.mean[c], cache.inv_std[c], gamma[c], beta[c]);
                            for j in c * hw..(c + 1) * hw {
                                ys[j] = gm * (xs[j] - m) * is + bt;
                            }
                        }
                    }
                    bn[i] = Some(cache);
                }
                LayerSpec::Dense { inputs, .. } => {
                    ops::dense_forward(&x.data, n, inputs, self.p(i, 0), self.p(i, 1), &mut y.data);
                }
                LayerSpec::Relu => {
                    for (o, &v) in y.data.iter_mut().zip(&x.data) {
                        *o = if v > T::zero() { v } else { T::zero() };
                    }
                }
                LayerSpec::Flatten => y.data.copy_from_slice(&x.data),
                LayerSpec::ConcatSkip { skip } => {
                    let src = &acts[skip + 1];
                    let (a, b) = (x.shape.numel(), src.shape.numel());
                    for s in 0..n {
                        let ys = y.sample_mut(s);
                        ys[..a].copy_from_slice(x.sample(s));
                        ys[a..a + b].copy_from_slice(src.sample(s));
                    }
                }
                LayerSpec::CenterCrop { height, width } => {
                    let Shape::Grid { channels, height: h, width: w } = x.shape else { unreachable!() };
                    let (r0, c0) = ((h - height) / 2, (w - width) / 2);
                    for s in 0..n {
                        let xs = x.sample(s);
                        let ys = y.sample_mut(s);
                        for c in 0..channels {
                            for r in 0..height {
                                let src = &xs[(c * h + r0 + r) * w + c0..][..width];
                                ys[(c * height + r) * width..][..width].copy_from_slice(src);
                            }
                        }
                    }
                }
                LayerSpec::MaskSelect { ref cells } => {
                    for s in 0..n {
                        let xs = x.sample(s);
                        for (o, &cell) in y.sample_mut(s).iter_mut().zip(cells) {
                            *o = xs[cell];
                        }
                    }
                }
            }
            acts.push(y);
        }
        let out = acts.last().expect("non-empty").clone();
        Ok((out, ForwardTape { version: self.version, mode, acts, argmax, bn }))
    }

    fn conv_geom(&self, layer: usize, input: Shape) -> ConvGeom {
        let LayerSpec::Conv2d { kernel, padding, .. } = self.layers[layer] else { unreachable!() };
        let Shape::Grid { channels, height, width } = input else { unreachable!() };
        let Shape::Grid { height: oh, width: ow, .. } = self.shapes[layer] else { unreachable!() };
        let p = if padding == Padding::Same { (kernel - 1) / 2 } else { 0 };
        ConvGeom { in_channels: channels, height, width, kh: kernel, kw: kernel, ph: p, pw: p, out_height: oh, out_width: ow }
    }

    fn up_geom(&self, layer: usize, input: Shape) -> UpGeom {
        let LayerSpec::ConvTranspose2d { in_channels, out_channels, kernel, stride } = self.layers[layer] else { unreachable!() };
        let Shape::Grid { height, width, .. } = input else { unreachable!() };
        UpGeom { in_channels, out_channels, height, width, kh: kernel, kw: kernel, stride }
    }

    fn bn_stats(&self, layer: usize, x: &Tensor<T>, channels: usize, mode: Mode) -> BnCache<T> {
        let eps = T::from_f64_lossy(BATCHNORM_EPS);
        let (mean, var) = match mode {
            Mode::Eval => (self.p(layer, 2).to_vec(), self.p(layer, 3).to_vec()),
            Mode::Train => {
                let hw = x.shape.numel() / channels;
                let count = T::from_usize(x.batch * hw).expect("count fits");
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..x.batch {
                        s += x.sample(b)[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / count;
                    let mut v = T::zero();
                    for b in 0..x.batch {
                        for &xv in &x.sample(b)[c * hw..(c + 1) * hw] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = v / count;
                }
                (mean, var)
            }
        };
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        BnCache { mean, var, inv_std }
    }

    /// Folds the batch statistics of a train-mode tape into the running
    /// batch-norm statistics.
    pub fn commit_batch_statistics(&mut self, tape: &ForwardTape<T>) -> Result<()> {
        if tape.mode != Mode::Train {
            return Ok(());
        }
        if tape.version != self.version {
            return Err(Error::Internal("stale tape: parameters changed since the forward pass".into()));
        }
        let mom = T::from_f64_lossy(BATCHNORM_MOMENTUM);
        for (i, cache) in tape.bn.iter().enumerate() {
            if let Some(cache) = cache {
                let (rm, rv) = (self.slots[i][2], self.slots[i][3]);
                for (r, &m) in self.params.tensors[rm].data.iter_mut().zip(&cache.mean) {
                    *r = mom * *r + (T::one() - mom) * m;
                }
                for (r, &v) in self.params.tensors[rv].data.iter_mut().zip(&cache.var) {
                    *r = mom * *r + (T::one() - mom) * v;
                }
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Reverse pass. Returns parameter gradients when `need_params` and the
    /// gradient w.r.t. the input batch when `need_input`.
    pub fn backward(
        &self,
        tape: &ForwardTape<T>,
        grad_output: &Tensor<T>,
        need_params: bool,
        need_input: bool,
    ) -> Result<BackwardOutput<T>> {
        if tape.version != self.version || tape.acts.len() != self.layers.len() + 1 {
            return Err(Error::Internal("stale tape: parameters changed since the forward pass".into()));
        }
        let out = tape.output();
        if grad_output.shape != out.shape || grad_output.batch != out.batch {
            return Err(Error::Input("output gradient shape does not match the forward output".into()));
        }
        let n = out.batch;
        let mut grads = if need_params { Some(self.params.zeros_like()) } else { None };
        let mut flow: Vec<Option<Tensor<T>>> = vec![None; self.layers.len() + 1];
        flow[self.layers.len()] = Some(grad_output.clone());

        for i in (0..self.layers.len()).rev() {
            let Some(dy) = flow[i + 1].take() else { continue };
            let x = &tape.acts[i];
            let want_dx = i > 0 || need_input;
            let mut dx = if want_dx { Some(Tensor::zeros(n, x.shape)) } else { None };
            match self.layers[i] {
                LayerSpec::Conv2d { out_channels, .. } => {
                    let g = self.conv_geom(i, x.shape);
                    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
                    let k = self.p(i, 0);
                    let mut pg = grads.as_mut().map(|gr| split_two(&mut gr.values, self.slots[i][0], self.slots[i][1]));
                    for s in 0..n {
                        let pgs = pg.as_mut().map(|(a, b)| (&mut a[..], &mut b[..]));
                        let dxs = dx.as_mut().map(|d| d.sample_mut(s));
                        ops::conv2d_backward(x.sample(s), &g, k, out_channels, dy.sample(s), &mut cols, pgs, dxs);
                    }
                }
                LayerSpec::ConvTranspose2d { .. } => {
                    let g = self.up_geom(i, x.shape);
                    let mut cols = vec![T::zero(); g.out_channels * g.kh * g.kw * g.height * g.width];
                    let k = self.p(i, 0);
                    let mut pg = grads.as_mut().map(|gr| split_two(&mut gr.values, self.slots[i][0], self.slots[i][1]));
                    for s in 0..n {
                        let pgs = pg.as_mut().map(|(a, b)| (&mut a[..], &mut b[..]));
                        let dxs = dx.as_mut().map(|d| d.sample_mut(s));
                        ops::conv_transpose_backward(x.sample(s), &g, k, dy.sample(s), &mut cols, pgs, dxs);
                    }
                }
                LayerSpec::MaxPool2 => {
                    if let Some(dx) = dx.as_mut() {
                        let am = tape.argmax[i].as_ref().ok_or_else(|| Error::Internal("missing pooling indices".into()))?;
                        let per = dy.shape.numel();
                        for s in 0..n {
                            ops::maxpool2_backward(dy.sample(s), &am[s * per..(s + 1) * per], dx.sample_mut(s));
                        }
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    let cache = tape.bn[i].as_ref().ok_or_else(|| Error::Internal("missing batch-norm cache".into()))?;
                    self.batchnorm_backward(i, channels, x, &dy, cache, tape.mode, grads.as_mut(), dx.as_mut());
                }
                LayerSpec::Dense { inputs, units } => {
                    let mut pg = grads.as_mut().map(|gr| split_two(&mut gr.values, self.slots[i][0], self.slots[i][1]));
                    let pgs = pg.as_mut().map(|(a, b)| (&mut a[..], &mut b[..]));
                    ops::dense_backward(&x.data, n, inputs, self.p(i, 0), units, &dy.data, pgs, dx.as_mut().map(|d| &mut d.data[..]));
                }
                LayerSpec::Relu => {
                    if let Some(dx) = dx.as_mut() {
                        for ((d, &g), &v) in dx.data.iter_mut().zip(&dy.data).zip(&x.data) {
                            *d = if v > T::zero() { g } else { T::zero() };
                        }
                    }
                }
                LayerSpec::Flatten => {
                    if let Some(dx) = dx.as_mut() {
                        dx.data.copy_from_slice(&dy.data);
                    }
                }
                LayerSpec::ConcatSkip { skip } => {
                    let a = x.shape.numel();
                    let src_shape = tape.acts[skip + 1].shape;
                    let b = src_shape.numel();
                    let mut dskip = Tensor::zeros(n, src_shape);
                    for s in 0..n {
                        let g = dy.sample(s);
                        if let Some(dx) = dx.as_mut() {
                            dx.sample_mut(s).copy_from_slice(&g[..a]);
                        }
                        dskip.sample_mut(s).copy_from_slice(&g[a..a + b]);
                    }
                    accumulate(&mut flow[skip + 1], dskip);
                }
                LayerSpec::CenterCrop { height, width } => {
                    if let Some(dx) = dx.as_mut() {
                        let Shape::Grid { channels, height: h, width: w } = x.shape else { unreachable!() };
                        let (r0, c0) = ((h - height) / 2, (w - width) / 2);
                        for s in 0..n {
                            let g = dy.sample(s);
                            let d = dx.sample_mut(s);
                            for c in 0..channels {
                                for r in 0..height {
                                    d[(c * h + r0 + r) * w + c0..][..width].copy_from_slice(&g[(c * height + r) * width..][..width]);
                                }
                            }
                        }
                    }
                }
                LayerSpec::MaskSelect { ref cells } => {
                    if let Some(dx) = dx.as_mut() {
                        for s in 0..n {
                            let g = dy.sample(s);
                            let d = dx.sample_mut(s);
                            for (&cell, &v) in cells.iter().zip(g) {
                                d[cell] += v;
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                accumulate(&mut flow[i], dx);
            }
        }
        let input_grad = if need_input {
            Some(flow[0].take().unwrap_or_else(|| Tensor::zeros(n, self.input_shape)))
        } else {
            None
        };
        Ok((grads, input_grad))
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_backward(
        &self,
        i: usize,
        channels: usize,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        cache: &BnCache<T>,
        mode: Mode,
        grads: Option<&mut Gradients<T>>,
        dx: Option<&mut Tensor<T>>,
    ) {
        let n = x.batch;
        let hw = x.shape.numel() / channels;
        let gamma = self.p(i, 0);
        let mut dgamma = vec![T::zero(); channels];
        let mut dbeta = vec![T::zero(); channels];
        let mut dxhat_sum = vec![T::zero(); channels];
        let mut dxhat_xhat_sum = vec![T::zero(); channels];
        for s in 0..n {
            let (xs, gs) = (x.sample(s), dy.sample(s));
            for c in 0..channels {
                for j in c * hw..(c + 1) * hw {
                    let xhat = (xs[j] - cache.mean[c]) * cache.inv_std[c];
                    dgamma[c] += gs[j] * xhat;
                    dbeta[c] += gs[j];
                    dxhat_sum[c] += gs[j] * gamma[c];
                    dxhat_xhat_sum[c] += gs[j] * gamma[c] * xhat;
                }
            }
        }
        if let Some(g) = grads {
            let (gi, bi) = (self.slots[i][0], self.slots[i][1]);
            for c in 0..channels {
                g.values[gi][c] += dgamma[c];
                g.values[bi][c] += dbeta[c];
            }
        }
        if let Some(dx) = dx {
            let count = T::from_usize(n * hw).expect("count fits");
            for s in 0..n {
                let (xs, gs) = (x.sample(s), dy.sample(s));
                let d = dx.sample_mut(s);
                for c in 0..channels {
                    let is = cache.inv_std[c];
                    for j in c * hw..(c + 1) * hw {
                        let dxhat = gs[j] * gamma[c];
                        d[j] = match mode {
                            Mode::Eval => dxhat * is,
                            Mode::Train => {
                                let xhat = (xs[j] - cache.mean[c]) * is;
                                is / count * (count * dxhat - dxhat_sum[c] - xhat * dxhat_xhat_sum[c])
                            }
                        };
                    }
                }
            }
        }
    }

    pub fn backward_params(&self, tape: &ForwardTape<T>, grad_output: &Tensor<T>) -> Result<Gradients<T>> {
        let (g, _) = self.backward(tape, grad_output, true, false)?;
        Ok(g.expect("requested"))
    }

    /// Gradient of output neuron `neuron` w.r.t. every input feature, eval mode.
    pub fn input_gradient(&self, input: &[T], neuron: usize) -> Result<Vec<T>> {
        let batch = Tensor::from_vec(1, self.input_shape, input.to_vec());
        let g = self.input_gradients(&batch, neuron)?;
        Ok(g.data)
    }

    /// Per-sample input gradients of output neuron `neuron` for a batch, eval mode.
    pub fn input_gradients(&self, batch: &Tensor<T>, neuron: usize) -> Result<Tensor<T>> {
        let (out, tape) = self.forward(batch, Mode::Eval)?;
        self.input_gradients_from_tape(&tape, out.shape.numel(), neuron)
    }

    pub fn input_gradients_from_tape(&self, tape: &ForwardTape<T>, outputs: usize, neuron: usize) -> Result<Tensor<T>> {
        if neuron >= outputs {
            return Err(Error::Input(format!("output neuron {neuron} out of range (model has {outputs})")));
        }
        let n = tape.batch();
        let mut seed = Tensor::zeros(n, tape.output().shape);
        for s in 0..n {
            seed.sample_mut(s)[neuron] = T::one();
        }
        let (_, dx) = self.backward(tape, &seed, false, true)?;
        Ok(dx.expect("requested"))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn split_two<T>(values: &mut [Vec<T>], a: usize, b: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    assert!(a < b);
    let (lo, hi) = values.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
