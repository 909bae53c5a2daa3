//! Per-sample layer kernels. Everything here works on flat row-major slices;
//! shape bookkeeping lives in the graph.

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_height {
                    let iy = oy as isize + ky as isize - g.ph as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_height {
                    let iy = oy as isize + ky as isize - g.ph as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize + kx as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, stride 1. `kernel` is `[out, in, kh, kw]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    g: &ConvGeom,
    kernel: &[T],
    bias: &[T],
    out_channels: usize,
    cols: &mut [T],
    y: &mut [T],
) {
    im2col(x, g, cols);
    let (ckk, ohw) = (g.col_rows(), g.col_cols());
    T::gemm(out_channels, ckk, ohw, T::one(), kernel, ckk as isize, 1, cols, ohw as isize, 1, T::zero(), y, ohw as isize, 1);
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut y[o * ohw..(o + 1) * ohw] {
            *v += b;
        }
    }
}

/// Accumulates kernel/bias gradients and optionally writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    g: &ConvGeom,
    kernel: &[T],
    out_channels: usize,
    dy: &[T],
    cols: &mut [T],
    param_grads: Option<(&mut [T], &mut [T])>,
    dx: Option<&mut [T]>,
) {
    let (ckk, ohw) = (g.col_rows(), g.col_cols());
    if let Some((dk, db)) = param_grads {
        im2col(x, g, cols);
        T::gemm(out_channels, ohw, ckk, T::one(), dy, ohw as isize, 1, cols, 1, ohw as isize, T::one(), dk, ckk as isize, 1);
        for (o, b) in db.iter_mut().enumerate() {
            *b += dy[o * ohw..(o + 1) * ohw].iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        T::gemm(ckk, out_channels, ohw, T::one(), kernel, 1, ckk as isize, dy, ohw as isize, 1, T::zero(), cols, ohw as isize, 1);
        dx.fill(T::zero());
        col2im_add(cols, g, dx);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct UpGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl UpGeom {
    pub fn out_height(&self) -> usize {
        (self.height - 1) * self.stride + self.kh
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) * self.stride + self.kw
    }

    fn okk(&self) -> usize {
        self.out_channels * self.kh * self.kw
    }
}

/// Transposed convolution, no padding. `kernel` is `[in, out, kh, kw]`.
pub(crate) fn conv_transpose_forward<T: Scalar>(x: &[T], g: &UpGeom, kernel: &[T], bias: &[T], cols: &mut [T], y: &mut [T]) {
    let hw = g.height * g.width;
    let okk = g.okk();
    T::gemm(okk, g.in_channels, hw, T::one(), kernel, 1, okk as isize, x, hw as isize, 1, T::zero(), cols, hw as isize, 1);
    let (oh, ow) = (g.out_height(), g.out_width());
    for o in 0..g.out_channels {
        let plane = &mut y[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (o * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for iy in 0..g.height {
                    let oy = iy * g.stride + ky;
                    for ix in 0..g.width {
                        plane[oy * ow + ix * g.stride + kx] += src[iy * g.width + ix];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    g: &UpGeom,
    kernel: &[T],
    dy: &[T],
    cols: &mut [T],
    param_grads: Option<(&mut [T], &mut [T])>,
    dx: Option<&mut [T]>,
) {
    let hw = g.height * g.width;
    let okk = g.okk();
    let (oh, ow) = (g.out_height(), g.out_width());
    for o in 0..g.out_channels {
        let plane = &dy[o * oh * ow..(o + 1) * oh * ow];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (o * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for iy in 0..g.height {
                    let oy = iy * g.stride + ky;
                    for ix in 0..g.width {
                        dst[iy * g.width + ix] = plane[oy * ow + ix * g.stride + kx];
                    }
                }
            }
        }
    }
    if let Some((dk, db)) = param_grads {
        T::gemm(g.in_channels, hw, okk, T::one(), x, hw as isize, 1, cols, 1, hw as isize, T::one(), dk, okk as isize, 1);
        for (o, b) in db.iter_mut().enumerate() {
            *b += dy[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        T::gemm(g.in_channels, okk, hw, T::one(), kernel, okk as isize, 1, cols, hw as isize, 1, T::zero(), dx, hw as isize, 1);
    }
}

/// 2x2 non-overlapping max pooling; writes the flat input index of each winner.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &[T], channels: usize, h: usize, w: usize, y: &mut [T], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y[o] = x[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub(crate) fn maxpool2_backward<T: Scalar>(dy: &[T], argmax: &[u32], dx: &mut [T]) {
    dx.fill(T::zero());
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] += g;
    }
}

/// `y = x W^T + b` for a batch; `weights` is `[units, inputs]`.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], batch: usize, inputs: usize, weights: &[T], bias: &[T], y: &mut [T]) {
    let units = bias.len();
    T::gemm(batch, inputs, units, T::one(), x, inputs as isize, 1, weights, 1, inputs as isize, T::zero(), y, units as isize, 1);
    for row in y.chunks_mut(units) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    inputs: usize,
    weights: &[T],
    units: usize,
    dy: &[T],
    param_grads: Option<(&mut [T], &mut [T])>,
    dx: Option<&mut [T]>,
) {
    if let Some((dw, db)) = param_grads {
        T::gemm(units, batch, inputs, T::one(), dy, 1, units as isize, x, inputs as isize, 1, T::one(), dw, inputs as isize, 1);
        for row in dy.chunks(units) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    if let Some(dx) = dx {
        T::gemm(batch, units, inputs, T::one(), dy, units as isize, 1, weights, inputs as isize, 1, T::zero(), dx, inputs as isize, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    #[allow(clippy::too_many_arguments)]
    fn conv_direct(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], o: usize, kh: usize, kw: usize, ph: usize, pw: usize) -> Vec<f64> {
        let (oh, ow) = (h + 2 * ph - kh + 1, w + 2 * pw - kw + 1);
        let mut y = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize + ky as isize - ph as isize;
                                let ix = ox as isize + kx as isize - pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x[(ic * h + iy as usize) * w + ix as usize] * k[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    y[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        y
    }

    fn geom(c: usize, h: usize, w: usize, k: usize, p: usize) -> ConvGeom {
        ConvGeom { in_channels: c, height: h, width: w, kh: k, kw: k, ph: p, pw: p, out_height: h + 2 * p - k + 1, out_width: w + 2 * p - k + 1 }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (c, h, w, o) = (3, 5, 6, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let k: Vec<f64> = (0..o * c * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        for p in [0, 1] {
            let g = geom(c, h, w, 3, p);
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            let mut y = vec![0.0; o * g.col_cols()];
            conv2d_forward(&x, &g, &k, &vec![0.0; o], o, &mut cols, &mut y);
            let expect = conv_direct(&x, c, h, w, &k, o, 3, 3, p, p);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_unit_examples() {
        let g = geom(1, 2, 2, 1, 0);
        let mut cols = vec![0.0; 4];
        let mut y = vec![0.0; 4];
        conv2d_forward(&[1.0, 2.0, 3.0, 4.0], &g, &[2.0], &[0.0], 1, &mut cols, &mut y);
        assert_eq!(y, vec![2.0, 4.0, 6.0, 8.0]);

        let g = geom(1, 2, 2, 3, 1);
        let mut cols = vec![0.0; 9 * 4];
        conv2d_forward(&[1.0, 2.0, 3.0, 4.0], &g, &[1.0; 9], &[0.0], 1, &mut cols, &mut y);
        assert_eq!(y, vec![10.0; 4]);

        conv2d_forward(&[1.0, 2.0, 3.0, 4.0], &g, &[0.0; 9], &[0.7], 1, &mut cols, &mut y);
        assert_eq!(y, vec![0.7; 4]);
    }

    #[test]
    fn transpose_expands_blocks() {
        let g = UpGeom { in_channels: 1, out_channels: 1, height: 2, width: 2, kh: 2, kw: 2, stride: 2 };
        let mut cols = vec![0.0; 4 * 4];
        let mut y = vec![0.0; 16];
        conv_transpose_forward(&[1.0, 2.0, 3.0, 4.0], &g, &[1.0; 4], &[0.0], &mut cols, &mut y);
        #[rustfmt::skip]
        let expect = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y, expect);
        conv_transpose_forward(&[1.0, 2.0, 3.0, 4.0], &g, &[0.0; 4], &[-1.5], &mut cols, &mut y);
        assert_eq!(y, vec![-1.5; 16]);
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let mut y = [0.0];
        let mut am = [0u32];
        maxpool2_forward(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2, &mut y, &mut am);
        assert_eq!(y, [4.0]);
        let mut dx = [9.0; 4];
        maxpool2_backward(&[1.0], &am, &mut dx);
        assert_eq!(dx, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_dot_product() {
        let mut y = [0.0];
        dense_forward(&[3.0, 4.0], 1, 2, &[1.0, 2.0], &[0.0], &mut y);
        assert_eq!(y, [11.0]);
    }
}
