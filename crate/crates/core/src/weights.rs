//! `GDW1` binary weight format.
//!
//! ```text
//! "GDW1"                      magic, 4 bytes
//! u32 layer_count
//! per layer:
//!   u8  tag                   0 dense, 1 conv2d, 2 upsample, 3 leaky-relu, 4 tanh, 5 pixelnorm
//!   u32 dims[..]              dense:    out, in, c, h, w
//!                             conv2d:   out_ch, in_ch, kh, kw, stride, padding
//!                             upsample: factor
//!                             others:   none
//!   u32 payload_len           number of f32 values that follow
//!   f32 payload[..]           dense/conv2d: weights then bias; leaky-relu: slope
//! u32 split_index
//! u32 latent_dim
//! u32 crc32                   over every byte between the magic and the footer
//! ```
//! All integers and reals are little-endian.

use std::path::Path;

use crate::error::{GdError, Result, WeightFileErrorKind as Kind};
use crate::network::{LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDW1";

const TAG_DENSE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_UPSAMPLE: u8 = 2;
const TAG_LEAKY: u8 = 3;
const TAG_TANH: u8 = 4;
const TAG_PIXELNORM: u8 = 5;

pub fn encode(net: &NetworkSpec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, net.layers.len() as u32);
    for layer in &net.layers {
        match layer {
            LayerSpec::Dense {
                weight,
                bias,
                out_shape,
            } => {
                out.push(TAG_DENSE);
                let s = weight.shape();
                for d in [s[0], s[1], out_shape[0], out_shape[1], out_shape[2]] {
                    put_u32(&mut out, d as u32);
                }
                put_payload(&mut out, &[weight.data(), bias]);
            }
            LayerSpec::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                out.push(TAG_CONV);
                let s = kernel.shape();
                for d in [s[0], s[1], s[2], s[3], *stride, *padding] {
                    put_u32(&mut out, d as u32);
                }
                put_payload(&mut out, &[kernel.data(), bias]);
            }
            LayerSpec::UpsampleNearest { factor } => {
                out.push(TAG_UPSAMPLE);
                put_u32(&mut out, *factor as u32);
                put_payload(&mut out, &[]);
            }
            LayerSpec::LeakyRelu { slope } => {
                out.push(TAG_LEAKY);
                put_payload(&mut out, &[&[*slope]]);
            }
            LayerSpec::Tanh => {
                out.push(TAG_TANH);
                put_payload(&mut out, &[]);
            }
            LayerSpec::PixelNorm => {
                out.push(TAG_PIXELNORM);
                put_payload(&mut out, &[]);
            }
        }
    }
    let crc = crc32fast::hash(&out[4..]);
    put_u32(&mut out, net.split_index as u32);
    put_u32(&mut out, net.latent_dim as u32);
    put_u32(&mut out, crc);
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_payload(out: &mut Vec<u8>, parts: &[&[f32]]) {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    put_u32(out, n as u32);
    for v in parts.iter().flat_map(|p| p.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GdError::weight(
                Kind::Truncated,
                format!("need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dims(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    fn payload(&mut self, expected: usize, what: &str) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        if n != expected {
            return Err(GdError::weight(
                Kind::DimensionMismatch,
                format!("{what}: dims imply {expected} values, payload declares {n}"),
            ));
        }
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            GdError::weight(Kind::Truncated, "payload length overflow")
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
    Tensor::new(shape, data).map_err(|e| GdError::weight(Kind::DimensionMismatch, e.to_string()))
}

pub fn decode(buf: &[u8]) -> Result<NetworkSpec> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(GdError::weight(Kind::BadMagic, "expected GDW1"));
    }
    let mut rd = Reader { buf, pos: 4 };
    let count = rd.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = rd.u8()?;
        let what = format!("layer {i}");
        let layer = match tag {
            TAG_DENSE => {
                let d = rd.dims(5)?;
                if d[0] != d[2] * d[3] * d[4] {
                    return Err(GdError::weight(
                        Kind::DimensionMismatch,
                        format!("{what}: {} outputs vs shape {:?}", d[0], &d[2..]),
                    ));
                }
                let p = rd.payload(d[0] * d[1] + d[0], &what)?;
                let (w, b) = p.split_at(d[0] * d[1]);
                LayerSpec::Dense {
                    weight: tensor(vec![d[0], d[1]], w.to_vec())?,
                    bias: b.to_vec(),
                    out_shape: [d[2], d[3], d[4]],
                }
            }
            TAG_CONV => {
                let d = rd.dims(6)?;
                let nk = d[0] * d[1] * d[2] * d[3];
                let p = rd.payload(nk + d[0], &what)?;
                let (k, b) = p.split_at(nk);
                LayerSpec::Conv2d {
                    kernel: tensor(vec![d[0], d[1], d[2], d[3]], k.to_vec())?,
                    bias: b.to_vec(),
                    stride: d[4],
                    padding: d[5],
                }
            }
            TAG_UPSAMPLE => {
                let d = rd.dims(1)?;
                rd.payload(0, &what)?;
                LayerSpec::UpsampleNearest { factor: d[0] }
            }
            TAG_LEAKY => LayerSpec::LeakyRelu {
                slope: rd.payload(1, &what)?[0],
            },
            TAG_TANH => {
                rd.payload(0, &what)?;
                LayerSpec::Tanh
            }
            TAG_PIXELNORM => {
                rd.payload(0, &what)?;
                LayerSpec::PixelNorm
            }
            other => {
                return Err(GdError::weight(
                    Kind::UnknownLayerTag,
                    format!("{what}: tag {other}"),
                ))
            }
        };
        layers.push(layer);
    }
    let body_end = rd.pos;
    let split_index = rd.u32()? as usize;
    let latent_dim = rd.u32()? as usize;
    let crc = rd.u32()?;
    if rd.pos != buf.len() {
        return Err(GdError::weight(
            Kind::DimensionMismatch,
            format!("{} trailing bytes", buf.len() - rd.pos),
        ));
    }
    if crc32fast::hash(&buf[4..body_end]) != crc {
        return Err(GdError::weight(Kind::ChecksumMismatch, "body crc32"));
    }
    NetworkSpec::new(layers, split_index, latent_dim)
        .map_err(|e| GdError::weight(Kind::InvalidNetwork, e.to_string()))
}

pub fn save_weights(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    decode(&std::fs::read(path)?)
}
