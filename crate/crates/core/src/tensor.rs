//! Dense row-major `f32` tensors and the handful of kernels the generator
//! executor needs.
//!
//! Convolutions are cross-correlations (no kernel flip) with zero padding.
//! Reductions accumulate in `f64` and always visit taps in `(in_channel, ky,
//! kx)` order, so a given output pixel is computed by the same sequence of
//! operations regardless of how large the surrounding input is. The windowed
//! executor in [`crate::network`] relies on that to stay bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{GdError, Result};

/// Epsilon added inside the pixelwise-norm square root.
pub const PIXELNORM_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(GdError::Shape(format!("unsupported rank {}", shape.len())));
        }
        if shape.contains(&0) {
            return Err(GdError::Shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GdError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(GdError::Shape(format!(
                "expected [C,H,W], got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// One channel plane of a rank-3 tensor.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Crop rows `[y0, y1)` and columns `[x0, x1)` of a rank-3 tensor.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Self> {
        let (c, h, w) = self.chw()?;
        if y1 > h || x1 > w || y0 >= y1 || x0 >= x1 {
            return Err(GdError::Shape(format!(
                "crop [{y0},{y1})x[{x0},{x1}) outside {:?}",
                self.shape
            )));
        }
        let (nh, nw) = (y1 - y0, x1 - x0);
        let mut data = Vec::with_capacity(c * nh * nw);
        for ch in 0..c {
            for y in y0..y1 {
                let row = (ch * h + y) * w;
                data.extend_from_slice(&self.data[row + x0..row + x1]);
            }
        }
        Self::new(vec![c, nh, nw], data)
    }
}

/// 2-D cross-correlation of a `[C,H,W]` input with an `[O,C,kh,kw]` kernel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (o, kc, kh, kw) = match kernel.shape()[..] {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        _ => {
            return Err(GdError::Shape(format!(
                "conv2d kernel must be [O,C,kh,kw], got {:?} (input {:?})",
                kernel.shape(),
                input.shape()
            )))
        }
    };
    if kc != c {
        return Err(GdError::Shape(format!(
            "conv2d kernel {:?} expects {kc} input channels, input is {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    if bias.len() != o {
        return Err(GdError::Shape(format!(
            "conv2d bias has {} entries for kernel {:?}",
            bias.len(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(GdError::Shape("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(GdError::Shape(format!(
            "conv2d kernel {:?} larger than padded input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let k = kernel.data();
    let x = input.data();
    let mut out = Vec::with_capacity(o * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    for oc in 0..o {
        acc.fill(bias[oc] as f64);
        for ic in 0..c {
            let kbase = (oc * c + ic) * kh * kw;
            let plane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[kbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let wv = wv as f64;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let arow = &mut acc[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            // valid ox range: 0 <= ox + kx - padding < w
                            let lo = padding.saturating_sub(kx);
                            let hi = (w + padding).saturating_sub(kx).min(ow);
                            for ox in lo..hi {
                                arow[ox] += wv * row[ox + kx - padding] as f64;
                            }
                        } else {
                            for (ox, a) in arow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *a += wv * row[ix as usize] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Nearest-neighbour upsampling: every value becomes a `factor`x`factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(GdError::Shape("upsample factor must be >= 1".into()));
    }
    let (c, h, w) = input.chw()?;
    let (nh, nw) = (h * factor, w * factor);
    let mut data = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        let plane = input.channel(ch);
        for y in 0..nh {
            let src = &plane[(y / factor) * w..(y / factor + 1) * w];
            for x in 0..nw {
                data.push(src[x / factor]);
            }
        }
    }
    Tensor::new(vec![c, nh, nw], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f32),
    Tanh,
    PixelNorm,
}

pub fn activate(input: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::LeakyRelu(slope) => Ok(map(input, |v| if v >= 0.0 { v } else { slope * v })),
        Activation::Tanh => Ok(map(input, f32::tanh)),
        Activation::PixelNorm => pixel_norm(input),
    }
}

fn map(input: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| f(v)).collect(),
    }
}

/// Divides each spatial location's channel vector by `sqrt(mean(x^2) + eps)`.
fn pixel_norm(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0f32; x.len()];
    for p in 0..plane {
        let mut ss = 0f64;
        for ch in 0..c {
            let v = x[ch * plane + p] as f64;
            ss += v * v;
        }
        let scale = 1.0 / (ss / c as f64 + PIXELNORM_EPS as f64).sqrt();
        for ch in 0..c {
            out[ch * plane + p] = (x[ch * plane + p] as f64 * scale) as f32;
        }
    }
    Tensor::new(input.shape.clone(), out)
}

/// Fully connected map of a flattened input onto `out_shape`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &[f32], out_shape: &[usize]) -> Result<Tensor> {
    let (rows, cols) = match weight.shape()[..] {
        [r, c] => (r, c),
        _ => {
            return Err(GdError::Shape(format!(
                "dense weight must be [out,in], got {:?}",
                weight.shape()
            )))
        }
    };
    if cols != input.len() {
        return Err(GdError::Shape(format!(
            "dense weight {:?} does not accept input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if bias.len() != rows || out_shape.iter().product::<usize>() != rows {
        return Err(GdError::Shape(format!(
            "dense weight {:?} inconsistent with bias {} / output {:?}",
            weight.shape(),
            bias.len(),
            out_shape
        )));
    }
    let x = input.data();
    let wd = weight.data();
    let data = (0..rows)
        .map(|r| {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut acc = bias[r] as f64;
            for (a, b) in row.iter().zip(x) {
                acc += *a as f64 * *b as f64;
            }
            acc as f32
        })
        .collect();
    Tensor::new(out_shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., -1., -2., -3., -4., -5., -6.]);
        let k = t(&[2, 2, 1, 1], &[1., 0., 0., 1.]);
        let y = conv2d(&x, &k, &[0., 0.], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 2, 2], &[1.; 4]);
        let y = conv2d(&x, &k, &[0.], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = t(&[1, 3, 3], &[7.; 9]);
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        let y = conv2d(&x, &k, &[0.5, -2.], 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.channel(0).iter().all(|&v| v == 0.5));
        assert!(y.channel(1).iter().all(|&v| v == -2.));
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::full(&[1, 7, 9], 1.0);
        let k = Tensor::full(&[1, 1, 3, 2], 1.0);
        let y = conv2d(&x, &k, &[0.], 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, (7 + 2 - 3) / 2 + 1, (9 + 2 - 2) / 2 + 1]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let k = Tensor::zeros(&[1, 2, 1, 1]);
        let err = conv2d(&x, &k, &[0.], 1, 0).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 1, 1]") && err.contains("[3, 4, 4]"), "{err}");
    }

    #[test]
    fn upsample_cases() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert!(upsample_nearest(&x, 0).is_err());
    }

    #[test]
    fn upsample_matches_per_pixel_loop() {
        let data: Vec<f32> = (0..16).map(|v| v as f32 * 0.5 - 3.0).collect();
        let x = t(&[1, 4, 4], &data);
        let y = upsample_nearest(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16]);
        for yy in 0..16 {
            for xx in 0..16 {
                assert_eq!(y.at3(0, yy, xx), data[(yy / 4) * 4 + xx / 4]);
            }
        }
    }

    #[test]
    fn activations() {
        let x = t(&[2, 1, 1], &[-1., 2.]);
        let y = activate(&x, Activation::LeakyRelu(0.2)).unwrap();
        assert_eq!(y.data(), &[-0.2, 2.]);
        let z = activate(&Tensor::zeros(&[1, 1, 1]), Activation::Tanh).unwrap();
        assert_eq!(z.data(), &[0.]);
        let n = activate(&t(&[2, 1, 1], &[3., 4.]), Activation::PixelNorm).unwrap();
        // 3/sqrt(12.5), 4/sqrt(12.5)
        assert!((n.data()[0] - 0.848_528_1).abs() < 1e-6);
        assert!((n.data()[1] - 1.131_370_8).abs() < 1e-6);
    }

    #[test]
    fn pixelnorm_of_zero_is_zero() {
        let n = activate(&Tensor::zeros(&[4, 2, 2]), Activation::PixelNorm).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
