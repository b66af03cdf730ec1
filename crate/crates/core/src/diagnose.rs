//! Artifact diagnosis by per-unit Frechet distance.
//!
//! Images are embedded as an 8x8 grid of per-block mean colors. A unit's
//! score is the Frechet distance between the Gaussian of its top-activating
//! samples and a reference Gaussian: either one shared distribution, or the
//! same samples rendered by a reference network.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissect::DissectionReport;
use crate::error::{GdError, Result};
use crate::intervene::{ablate, LocationSet, UnitSet};
use crate::network::{LayerSpec, NetworkSpec};
use crate::scene::LatentVector;
use crate::tensor::Tensor;

pub const EMBED_GRID: usize = 8;

/// Block-mean color of each cell of an 8x8 grid, channel-major.
pub fn embed(image: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = image.chw()?;
    if h % EMBED_GRID != 0 || w % EMBED_GRID != 0 {
        return Err(GdError::Shape(format!(
            "image {h}x{w} is not a multiple of the {EMBED_GRID}x{EMBED_GRID} embedding grid"
        )));
    }
    let (bh, bw) = (h / EMBED_GRID, w / EMBED_GRID);
    let mut out = vec![0.0f64; c * EMBED_GRID * EMBED_GRID];
    for ch in 0..c {
        let plane = image.channel(ch);
        for y in 0..h {
            for x in 0..w {
                out[(ch * EMBED_GRID + y / bh) * EMBED_GRID + x / bw] += plane[y * w + x] as f64;
            }
        }
    }
    let n = (bh * bw) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` covariance.
    pub cov: Vec<f64>,
    pub samples: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(GdError::Shape(format!("covariance of {} values for dimension {d}", cov.len())));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(GdError::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(GdError::InvalidArgument("non-finite statistics".into()));
        }
        Ok(Self { mean, cov, samples: 0 })
    }

    /// Sample mean and unbiased covariance.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(GdError::InvalidArgument("need at least two samples".into()));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(GdError::Shape("samples differ in dimension".into()));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n - 1) as f64;
        let cov = (0..d * d).map(|k| cov[(k / d, k % d)]).collect();
        Ok(Self { mean, cov, samples: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `‖μa-μb‖² + tr Σa + tr Σb - 2 tr (Σa^½ Σb Σa^½)^½`, using symmetric
/// eigendecompositions throughout. Small negative results from rounding are
/// clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(GdError::Shape(format!("dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let root = psd_sqrt(sa.clone());
    let mut inner = &root * &sb * &root;
    // symmetrize away rounding before the second decomposition
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let fid = mean + sa.trace() + sb.trace() - 2.0 * cross;
    if !fid.is_finite() {
        return Err(GdError::InvalidArgument("non-finite Frechet distance".into()));
    }
    Ok(fid.max(0.0))
}

/// Embedding statistics of `net`'s samples, optionally with `ablated` units
/// zeroed everywhere.
pub fn image_stats(net: &NetworkSpec, latents: &[LatentVector], ablated: Option<&UnitSet>) -> Result<GaussianStats> {
    let shape = net.featuremap_shape()?;
    let all = LocationSet::full(shape[1], shape[2]);
    let emb: Vec<Vec<f64>> = latents
        .par_iter()
        .map(|z| {
            let mut r = net.featuremap(&z.values)?;
            if let Some(u) = ablated {
                r = ablate(&r, u, &all)?;
            }
            embed(&net.forward_from(&r)?)
        })
        .collect::<Result<_>>()?;
    GaussianStats::from_samples(&emb)
}

/// Frechet distance of `net`'s samples to `reference`.
pub fn sample_fid(
    net: &NetworkSpec,
    latents: &[LatentVector],
    ablated: Option<&UnitSet>,
    reference: &GaussianStats,
) -> Result<f64> {
    frechet_distance(&image_stats(net, latents, ablated)?, reference)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitFid {
    pub unit: usize,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub samples: usize,
    /// Samples with the highest peak activation that represent each unit.
    pub top_images: usize,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            top_images: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub samples: usize,
    pub top_images: usize,
    pub seed: u64,
    pub reference_samples: usize,
    /// Highest distance first; ties go to the lower unit index.
    pub units: Vec<UnitFid>,
}

impl FidReport {
    pub fn top(&self, n: usize) -> Vec<usize> {
        self.units.iter().take(n).map(|u| u.unit).collect()
    }

    pub fn fid(&self, unit: usize) -> Option<f64> {
        self.units.iter().find(|u| u.unit == unit).map(|u| u.fid)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json("fid-report", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json("fid-report", text)
    }
}

/// What a unit's top samples are compared against.
#[derive(Clone, Copy, Debug)]
pub enum UnitReference<'a> {
    /// One distribution for every unit.
    Stats(&'a GaussianStats),
    /// A network sharing `net`'s featuremap: the unit's top featuremaps are
    /// rendered by it and compared with `net`'s renders of the same maps.
    Paired(&'a NetworkSpec),
}

/// Score every unit by the samples, `top_images` of them, with the highest
/// peak activation in the featuremap.
pub fn unit_fids(
    net: &NetworkSpec,
    latents: &[LatentVector],
    reference: UnitReference<'_>,
    top_images: usize,
) -> Result<Vec<UnitFid>> {
    if top_images < 2 || top_images > latents.len() {
        return Err(GdError::InvalidArgument(format!(
            "top_images must be in 2..={}",
            latents.len()
        )));
    }
    if let UnitReference::Paired(other) = reference {
        if other.featuremap_shape()? != net.featuremap_shape()? || other.image_shape()? != net.image_shape()? {
            return Err(GdError::Shape("reference network has a different featuremap or image".into()));
        }
    }
    // per latent: peak activation of each unit, embedding, reference embedding
    type Row = (Vec<f32>, Vec<f64>, Option<Vec<f64>>);
    let rows: Vec<Row> = latents
        .par_iter()
        .map(|z| {
            let r = net.featuremap(&z.values)?;
            let (c, _, _) = r.chw()?;
            let peaks = (0..c)
                .map(|u| r.channel(u).iter().cloned().fold(f32::NEG_INFINITY, f32::max))
                .collect();
            let paired = match reference {
                UnitReference::Paired(other) => Some(embed(&other.forward_from(&r)?)?),
                UnitReference::Stats(_) => None,
            };
            Ok((peaks, embed(&net.forward_from(&r)?)?, paired))
        })
        .collect::<Result<_>>()?;
    let d = rows[0].0.len();
    let mut out: Vec<UnitFid> = (0..d)
        .into_par_iter()
        .map(|u| {
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.sort_by(|&a, &b| rows[b].0[u].total_cmp(&rows[a].0[u]).then(a.cmp(&b)));
            let top = &idx[..top_images];
            let chosen: Vec<Vec<f64>> = top.iter().map(|&i| rows[i].1.clone()).collect();
            let stats = GaussianStats::from_samples(&chosen)?;
            let fid = match reference {
                UnitReference::Stats(s) => frechet_distance(&stats, s)?,
                UnitReference::Paired(_) => {
                    let refs: Vec<Vec<f64>> = top.iter().filter_map(|&i| rows[i].2.clone()).collect();
                    frechet_distance(&stats, &GaussianStats::from_samples(&refs)?)?
                }
            };
            Ok(UnitFid { unit: u, fid })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| b.fid.total_cmp(&a.fid).then(a.unit.cmp(&b.unit)));
    Ok(out)
}

pub fn rank_artifact_units(
    net: &NetworkSpec,
    latents: &[LatentVector],
    reference: UnitReference<'_>,
    cfg: &DiagnoseConfig,
) -> Result<FidReport> {
    Ok(FidReport {
        samples: latents.len(),
        top_images: cfg.top_images,
        seed: cfg.seed,
        reference_samples: match reference {
            UnitReference::Stats(s) => s.samples,
            UnitReference::Paired(_) => cfg.top_images,
        },
        units: unit_fids(net, latents, reference, cfg.top_images)?,
    })
}

/// Copy of `net` with `units` permanently zero: the weights and bias that
/// produce those featuremap channels are cleared. Works when the split is
/// preceded by a dense or convolution layer followed only by activations
/// that keep zero at zero.
pub fn repair(net: &NetworkSpec, units: &UnitSet) -> Result<NetworkSpec> {
    let d = net.featuremap_shape()?[0];
    if units.units().last().is_some_and(|&u| u >= d) {
        return Err(GdError::InvalidArgument(format!("unit out of range for {d} channels")));
    }
    let mut layers = net.layers.clone();
    let mut i = net.split_index;
    let producer = loop {
        if i == 0 {
            return Err(GdError::InvalidArgument("no layer produces the featuremap".into()));
        }
        i -= 1;
        match &layers[i] {
            LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh => continue,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => break i,
            other => {
                return Err(GdError::InvalidArgument(format!(
                    "cannot bake an ablation through a {} layer",
                    other.kind_name()
                )))
            }
        }
    };
    match &mut layers[producer] {
        LayerSpec::Dense { weight, bias, .. } => {
            let inputs = weight.shape()[1];
            let per = bias.len() / d;
            let w = weight.data_mut();
            for &u in units.units() {
                w[u * per * inputs..(u + 1) * per * inputs].fill(0.0);
                bias[u * per..(u + 1) * per].fill(0.0);
            }
        }
        LayerSpec::Conv2d { kernel, bias, .. } => {
            let per = kernel.len() / d;
            let k = kernel.data_mut();
            for &u in units.units() {
                k[u * per..(u + 1) * per].fill(0.0);
                bias[u] = 0.0;
            }
        }
        _ => unreachable!(),
    }
    NetworkSpec::new(layers, net.split_index, net.latent_dim)
}

/// Mark units whose FID exceeds `threshold` as unrealistic, drop their labels
/// and recompute the histogram.
pub fn filter_dissection_by_fid(report: &DissectionReport, fids: &[UnitFid], threshold: f64) -> DissectionReport {
    let mut out = report.clone();
    for label in &mut out.units {
        if fids.iter().any(|f| f.unit == label.unit && f.fid > threshold) {
            label.unrealistic = true;
            label.concept = None;
        }
    }
    out.fid_threshold = Some(threshold);
    out.recompute_histogram();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats::new(vec![mean], vec![var]).unwrap()
    }

    #[test]
    fn univariate_matches_closed_form() {
        let (a, b) = (one_d(1.0, 4.0), one_d(-2.0, 9.0));
        let want = 9.0 + 4.0 + 9.0 - 2.0 * 6.0;
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn distance_to_self_is_zero() {
        let s = GaussianStats::from_samples(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 3.0]]).unwrap();
        assert!(frechet_distance(&s, &s).unwrap() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = one_d(0.0, 1.0);
        let b = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        assert!(GaussianStats::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn embed_averages_blocks() {
        let mut data = vec![0.0f32; 3 * 16 * 16];
        data[0] = 4.0;
        let e = embed(&Tensor::new(vec![3, 16, 16], data).unwrap()).unwrap();
        assert_eq!(e.len(), 192);
        assert_eq!(e[0], 1.0);
        assert!(e[1..].iter().all(|&v| v == 0.0));
    }
}
