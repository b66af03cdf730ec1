//! Layer list executor with a designated split point.
//!
//! `r = h(z)` is the output of the first `split_index` layers and
//! `x = f(r)` is everything after it.

use crate::error::{GdError, Result};
use crate::tensor::{self, Activation, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Flattened input times `weight` (`[out, in]`), reshaped to `out_shape`.
    Dense {
        weight: Tensor,
        bias: Vec<f32>,
        out_shape: [usize; 3],
    },
    Conv2d {
        kernel: Tensor,
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    LeakyRelu {
        slope: f32,
    },
    Tanh,
    PixelNorm,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "dense",
            Self::Conv2d { .. } => "conv2d",
            Self::UpsampleNearest { .. } => "upsample-nearest",
            Self::LeakyRelu { .. } => "leaky-relu",
            Self::Tanh => "tanh",
            Self::PixelNorm => "pixelnorm",
        }
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Self::Dense {
                weight,
                bias,
                out_shape,
            } => tensor::dense(input, weight, bias, out_shape),
            Self::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => tensor::conv2d(input, kernel, bias, *stride, *padding),
            Self::UpsampleNearest { factor } => tensor::upsample_nearest(input, *factor),
            Self::LeakyRelu { slope } => tensor::activate(input, Activation::LeakyRelu(*slope)),
            Self::Tanh => tensor::activate(input, Activation::Tanh),
            Self::PixelNorm => tensor::activate(input, Activation::PixelNorm),
        }
    }

    /// Output shape for a given input shape, without running the layer.
    fn infer_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Self::Dense {
                weight,
                bias,
                out_shape,
            } => {
                let n: usize = input.iter().product();
                let ws = weight.shape();
                if ws.len() != 2 || ws[1] != n {
                    return Err(GdError::Shape(format!(
                        "dense weight {ws:?} does not accept input {input:?}"
                    )));
                }
                if ws[0] != out_shape.iter().product::<usize>() || bias.len() != ws[0] {
                    return Err(GdError::Shape(format!(
                        "dense weight {ws:?} inconsistent with output {out_shape:?}"
                    )));
                }
                Ok(out_shape.to_vec())
            }
            Self::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let ks = kernel.shape();
                if input.len() != 3 || ks.len() != 4 || ks[1] != input[0] || bias.len() != ks[0] {
                    return Err(GdError::Shape(format!(
                        "conv2d kernel {ks:?} incompatible with input {input:?}"
                    )));
                }
                if *stride == 0 || input[1] + 2 * padding < ks[2] || input[2] + 2 * padding < ks[3]
                {
                    return Err(GdError::Shape(format!(
                        "conv2d kernel {ks:?} stride {stride} padding {padding} on {input:?}"
                    )));
                }
                Ok(vec![
                    ks[0],
                    (input[1] + 2 * padding - ks[2]) / stride + 1,
                    (input[2] + 2 * padding - ks[3]) / stride + 1,
                ])
            }
            Self::UpsampleNearest { factor } => {
                if *factor == 0 || input.len() != 3 {
                    return Err(GdError::Shape(format!(
                        "upsample factor {factor} on {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] * factor, input[2] * factor])
            }
            Self::PixelNorm if input.len() != 3 => Err(GdError::Shape(format!(
                "pixelnorm needs [C,H,W], got {input:?}"
            ))),
            _ => Ok(input.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// `r` is the output of `layers[split_index - 1]`.
    pub split_index: usize,
    pub latent_dim: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub image: Tensor,
    pub featuremap: Tensor,
    /// Output of every layer, present only when tracing was requested.
    pub layers: Option<Vec<Tensor>>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, split_index: usize, latent_dim: usize) -> Result<Self> {
        let net = Self {
            layers,
            split_index,
            latent_dim,
        };
        net.validate()?;
        Ok(net)
    }

    /// Shapes of every layer output, starting from a `[latent_dim, 1, 1]` input.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![self.latent_dim, 1, 1];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .infer_shape(&shape)
                .map_err(|e| GdError::Shape(format!("layer {i}: {e}")))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(GdError::Shape("latent_dim must be >= 1".into()));
        }
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return Err(GdError::Shape(format!(
                "split_index {} outside [1, {})",
                self.split_index,
                self.layers.len()
            )));
        }
        let shapes = self.layer_shapes()?;
        if shapes[self.split_index - 1].len() != 3 {
            return Err(GdError::Shape("split output must be [C,H,W]".into()));
        }
        let last = shapes.last().expect("non-empty");
        if last.len() != 3 || last[0] != 3 {
            return Err(GdError::Shape(format!(
                "network must output [3,H,W], got {last:?}"
            )));
        }
        Ok(())
    }

    /// Shape of the split featuremap `r`.
    pub fn featuremap_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?[self.split_index - 1].clone())
    }

    pub fn image_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.pop().expect("non-empty"))
    }

    pub fn latent_tensor(&self, z: &[f32]) -> Result<Tensor> {
        if z.len() != self.latent_dim {
            return Err(GdError::Shape(format!(
                "latent has {} values, network expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        Tensor::new(vec![self.latent_dim, 1, 1], z.to_vec())
    }

    fn run(&self, range: std::ops::Range<usize>, mut x: Tensor, trace: &mut Option<Vec<Tensor>>) -> Result<Tensor> {
        for i in range {
            x = self.layers[i].apply(&x)?;
            if !x.all_finite() {
                return Err(GdError::NonFinite { layer: i });
            }
            if let Some(t) = trace.as_mut() {
                t.push(x.clone());
            }
        }
        Ok(x)
    }

    /// `r = h(z)`.
    pub fn featuremap(&self, z: &[f32]) -> Result<Tensor> {
        self.run(0..self.split_index, self.latent_tensor(z)?, &mut None)
    }

    pub fn forward(&self, z: &[f32], trace: bool) -> Result<ForwardOutput> {
        let mut layers = trace.then(Vec::new);
        let r = self.run(0..self.split_index, self.latent_tensor(z)?, &mut layers)?;
        let image = self.run(self.split_index..self.layers.len(), r.clone(), &mut layers)?;
        Ok(ForwardOutput {
            image,
            featuremap: r,
            layers,
        })
    }

    fn check_featuremap(&self, r: &Tensor) -> Result<()> {
        let expect = self.featuremap_shape()?;
        if r.shape() != expect.as_slice() {
            return Err(GdError::Shape(format!(
                "featuremap {:?} does not match split output {expect:?}",
                r.shape()
            )));
        }
        Ok(())
    }

    /// `x = f(r)`.
    pub fn forward_from(&self, r: &Tensor) -> Result<Tensor> {
        self.check_featuremap(r)?;
        self.run(self.split_index..self.layers.len(), r.clone(), &mut None)
    }

    /// `f(r)` together with the output of every layer from the split onward.
    pub fn forward_from_traced(&self, r: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_featuremap(r)?;
        let mut trace = Some(Vec::new());
        let image = self.run(self.split_index..self.layers.len(), r.clone(), &mut trace)?;
        Ok((image, trace.unwrap_or_default()))
    }

    /// Featuremap halo `(rows, cols)` needed by `f` and the total spatial
    /// scale from `r` to the image. Convolution reach is taken from the
    /// kernel's nonzero taps. `None` when some layer after the split is not a
    /// stride-1 "same" convolution or a pointwise/upsample layer.
    pub fn receptive_halo(&self) -> Option<(usize, usize, usize)> {
        let (mut my, mut mx) = (0usize, 0usize);
        let mut scale = 1usize;
        for layer in self.layers[self.split_index..].iter().rev() {
            match layer {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let ks = kernel.shape();
                    let (kh, kw) = (ks[2], ks[3]);
                    if *stride != 1 || kh != kw || kh % 2 == 0 || *padding != kh / 2 {
                        return None;
                    }
                    let (ry, rx) = kernel_reach(kernel, *padding);
                    my += ry;
                    mx += rx;
                }
                LayerSpec::UpsampleNearest { factor } => {
                    my = my.div_ceil(*factor);
                    mx = mx.div_ceil(*factor);
                    scale *= factor;
                }
                LayerSpec::Dense { .. } => return None,
                _ => {}
            }
        }
        Some((my, mx, scale))
    }

    /// `f(r)` restricted to the image region covering featuremap rows
    /// `[y0, y1)` and columns `[x0, x1)`. Only the neighbourhood the region
    /// depends on is executed; the result is bit-identical to cropping the
    /// full `forward_from` output.
    pub fn forward_from_window(
        &self,
        r: &Tensor,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    ) -> Result<Tensor> {
        self.check_featuremap(r)?;
        let (_, h, w) = r.chw()?;
        if y0 >= y1 || x0 >= x1 || y1 > h || x1 > w {
            return Err(GdError::Shape(format!(
                "window [{y0},{y1})x[{x0},{x1}) outside featuremap {:?}",
                r.shape()
            )));
        }
        let Some((my, mx, scale)) = self.receptive_halo() else {
            let full = self.forward_from(r)?;
            let s = full.shape()[1] / h;
            return full.crop(y0 * s, y1 * s, x0 * s, x1 * s);
        };
        let cy0 = y0.saturating_sub(my);
        let cx0 = x0.saturating_sub(mx);
        let cy1 = (y1 + my).min(h);
        let cx1 = (x1 + mx).min(w);
        let local = r.crop(cy0, cy1, cx0, cx1)?;
        let out = self.run(self.split_index..self.layers.len(), local, &mut None)?;
        out.crop(
            (y0 - cy0) * scale,
            (y1 - cy0) * scale,
            (x0 - cx0) * scale,
            (x1 - cx0) * scale,
        )
    }
}

/// Largest vertical and horizontal offset from the centre tap among the
/// nonzero weights of a `[O,C,k,k]` kernel.
fn kernel_reach(kernel: &Tensor, center: usize) -> (usize, usize) {
    let ks = kernel.shape();
    let (kh, kw) = (ks[2], ks[3]);
    let (mut ry, mut rx) = (0, 0);
    for (i, &v) in kernel.data().iter().enumerate() {
        if v != 0.0 {
            let ky = (i / kw) % kh;
            let kx = i % kw;
            ry = ry.max(ky.abs_diff(center));
            rx = rx.max(kx.abs_diff(center));
        }
    }
    (ry, rx)
}
