use super::Scalar;

/// Activation shape of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Shape {
    Grid { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn grid(channels: usize, height: usize, width: usize) -> Self {
        Shape::Grid { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        match *self {
            Shape::Grid { channels, height, width } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Grid { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// A batch of activations sharing one per-sample [`Shape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub batch: usize,
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(batch: usize, shape: Shape) -> Self {
        Self { batch, shape, data: vec![T::zero(); batch * shape.numel()] }
    }

    pub fn from_vec(batch: usize, shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), batch * shape.numel(), "tensor data length does not match shape");
        Self { batch, shape, data }
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.numel();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.numel();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}
