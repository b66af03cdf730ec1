//! PNG output. Encoder settings are fixed so equal images give equal bytes.

use std::path::Path;

use crate::error::{GdError, Result};
use crate::tensor::Tensor;

/// Map a `[-1, 1]` value to a byte.
pub fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Interleaved RGB bytes of a `[3, h, w]` image in `[-1, 1]`.
pub fn to_rgb8(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(GdError::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(image.channel(ch)[i]));
        }
    }
    Ok((h, w, out))
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_rgb8(image)?;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Default);
        enc.set_filter(png::FilterType::NoFilter);
        enc.set_adaptive_filter(png::AdaptiveFilterType::NonAdaptive);
        let mut writer = enc
            .write_header()
            .map_err(|e| GdError::InvalidArgument(format!("png: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| GdError::InvalidArgument(format!("png: {e}")))?;
    }
    Ok(buf)
}

/// Decode an 8-bit RGB PNG back to interleaved bytes.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let dec = png::Decoder::new(bytes);
    let mut reader = dec
        .read_info()
        .map_err(|e| GdError::InvalidArgument(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| GdError::InvalidArgument(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(GdError::InvalidArgument("png: expected 8-bit RGB".into()));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn write_png(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

/// Tile equally sized images row by row, `cols` per row, separated by a
/// `gap`-pixel border of value -1. Missing cells stay at -1.
pub fn grid(images: &[Tensor], cols: usize, gap: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| GdError::InvalidArgument("no images to tile".into()))?;
    let (c, h, w) = first.chw()?;
    if cols == 0 {
        return Err(GdError::InvalidArgument("cols must be >= 1".into()));
    }
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h + (rows + 1) * gap, cols * w + (cols + 1) * gap);
    let mut out = vec![-1.0f32; c * gh * gw];
    for (i, img) in images.iter().enumerate() {
        if img.chw()? != (c, h, w) {
            return Err(GdError::Shape("grid images differ in shape".into()));
        }
        let (oy, ox) = (gap + (i / cols) * (h + gap), gap + (i % cols) * (w + gap));
        for ch in 0..c {
            let src = img.channel(ch);
            for y in 0..h {
                let dst = (ch * gh + oy + y) * gw + ox;
                out[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Tensor::new(vec![c, gh, gw], out)
}
