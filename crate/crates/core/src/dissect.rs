//! Unit labeling by segmentation agreement.
//!
//! Activations are upsampled by nearest neighbour, so every featuremap cell
//! is a constant block of image pixels. Samples therefore keep one value per
//! (unit, cell) and one concept pixel count per (concept, cell), and every
//! count below is in pixels.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GdError, Result};
use crate::network::NetworkSpec;
use crate::scene::{sample_z, LatentVector};
use crate::segment::{connected_components, expand_parts, part_name, segment, ConceptUniverse, PART_SUFFIXES};

/// Pixel-level 2x2 table of (unit above threshold, concept present).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl Contingency {
    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    pub fn iou(&self) -> f64 {
        let union = self.n11 + self.n10 + self.n01;
        if union == 0 {
            0.0
        } else {
            self.n11 as f64 / union as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            (self.n11 + self.n00) as f64 / n as f64
        }
    }
}

/// Mutual information over joint entropy of the table; 0 when the joint
/// entropy is 0.
pub fn info_quality_ratio(c: &Contingency) -> f64 {
    let n = c.total() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let plogp = |k: u64| {
        if k == 0 {
            0.0
        } else {
            let p = k as f64 / n;
            -p * p.ln()
        }
    };
    let h_xy = plogp(c.n11) + plogp(c.n10) + plogp(c.n01) + plogp(c.n00);
    if h_xy <= 0.0 {
        return 0.0;
    }
    let h_x = plogp(c.n11 + c.n10) + plogp(c.n01 + c.n00);
    let h_y = plogp(c.n11 + c.n01) + plogp(c.n10 + c.n00);
    ((h_x + h_y - h_xy) / h_xy).max(0.0)
}

/// Activations and concept coverage of one layer over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSample {
    /// Index into the network's layer list whose output was recorded.
    pub layer: usize,
    pub units: usize,
    /// Cells per image.
    pub cells: usize,
    /// Image pixels covered by one cell.
    pub cell_pixels: usize,
    pub concepts: Vec<String>,
    pub images: usize,
    /// `[image][unit][cell]`
    pub acts: Vec<f32>,
    /// `[image][concept][cell]`, pixels of the concept inside the cell.
    pub counts: Vec<u32>,
    /// Images in which each concept has at least one component.
    pub presence: Vec<usize>,
}

impl LayerSample {
    pub fn act(&self, image: usize, unit: usize, cell: usize) -> f32 {
        self.acts[(image * self.units + unit) * self.cells + cell]
    }

    pub fn count(&self, image: usize, concept: usize, cell: usize) -> u32 {
        self.counts[(image * self.concepts.len() + concept) * self.cells + cell]
    }

    pub fn concept_index(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| GdError::UnknownConcept(name.into()))
    }

    /// Concept pixels over all images.
    pub fn concept_pixels(&self, concept: usize) -> u64 {
        (0..self.images)
            .flat_map(|i| (0..self.cells).map(move |p| (i, p)))
            .map(|(i, p)| self.count(i, concept, p) as u64)
            .sum()
    }

    pub fn total_pixels(&self) -> u64 {
        (self.images * self.cells * self.cell_pixels) as u64
    }

    pub fn contingency(&self, unit: usize, concept: usize, t: f32) -> Contingency {
        let mut n11 = 0u64;
        let mut on = 0u64;
        for i in 0..self.images {
            for p in 0..self.cells {
                if self.act(i, unit, p) > t {
                    on += self.cell_pixels as u64;
                    n11 += self.count(i, concept, p) as u64;
                }
            }
        }
        let s = self.concept_pixels(concept);
        let n = self.total_pixels();
        Contingency {
            n11,
            n10: on - n11,
            n01: s - n11,
            n00: n + n11 - on - s,
        }
    }
}

/// Concept names a sample records: the universe, plus the four part classes
/// of every base concept when the universe asks for parts.
fn sample_concepts(universe: &ConceptUniverse) -> Vec<String> {
    let mut names = universe.names();
    if universe.parts {
        for c in universe.names() {
            for s in PART_SUFFIXES {
                names.push(part_name(&c, s));
            }
        }
    }
    names
}

/// Run `net` on `latents` and record layer `layer`'s output with the oracle
/// segmentation of each image.
pub fn collect_sample(
    net: &NetworkSpec,
    layer: usize,
    universe: &ConceptUniverse,
    latents: &[LatentVector],
) -> Result<LayerSample> {
    if universe.concepts.is_empty() {
        return Err(GdError::InvalidArgument("empty concept universe".into()));
    }
    if latents.is_empty() {
        return Err(GdError::InvalidArgument("no latents to sample".into()));
    }
    let shapes = net.layer_shapes()?;
    let shape = shapes
        .get(layer)
        .ok_or_else(|| GdError::InvalidArgument(format!("layer {layer} out of range")))?;
    let image_shape = shapes.last().expect("non-empty");
    if shape.len() != 3 || image_shape[1] % shape[1] != 0 || image_shape[2] % shape[2] != 0 {
        return Err(GdError::InvalidArgument(format!(
            "layer {layer} output {shape:?} does not tile the image {image_shape:?}"
        )));
    }
    let (units, fh, fw) = (shape[0], shape[1], shape[2]);
    let (sy, sx) = (image_shape[1] / fh, image_shape[2] / fw);
    let concepts = sample_concepts(universe);
    let need_trace = layer + 1 != net.split_index;

    let per_image: Vec<(Vec<f32>, Vec<u32>, Vec<bool>)> = latents
        .par_iter()
        .map(|z| {
            let out = net.forward(&z.values, need_trace)?;
            let acts = match &out.layers {
                Some(all) => all[layer].data().to_vec(),
                None => out.featuremap.data().to_vec(),
            };
            let mut seg = segment(&out.image, universe)?;
            if universe.parts {
                seg = expand_parts(&seg);
            }
            let mut counts = Vec::with_capacity(concepts.len() * fh * fw);
            let mut present = Vec::with_capacity(concepts.len());
            for name in &concepts {
                let m = seg.mask(name).expect("segmentation covers every concept");
                for cy in 0..fh {
                    for cx in 0..fw {
                        counts.push(m.count_in(cy * sy, (cy + 1) * sy, cx * sx, (cx + 1) * sx) as u32);
                    }
                }
                present.push(!connected_components(&m.mask, m.width, m.height).regions.is_empty());
            }
            Ok((acts, counts, present))
        })
        .collect::<Result<_>>()?;

    let mut presence = vec![0; concepts.len()];
    let mut acts = Vec::with_capacity(latents.len() * units * fh * fw);
    let mut counts = Vec::with_capacity(latents.len() * concepts.len() * fh * fw);
    for (a, c, p) in per_image {
        acts.extend(a);
        counts.extend(c);
        for (k, v) in p.into_iter().enumerate() {
            presence[k] += v as usize;
        }
    }
    Ok(LayerSample {
        layer,
        units,
        cells: fh * fw,
        cell_pixels: sy * sx,
        concepts,
        images: latents.len(),
        acts,
        counts,
        presence,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitThreshold {
    pub unit: usize,
    pub concept: String,
    pub t: f32,
    /// Information quality ratio at `t` on the validation sample.
    pub iqr: f64,
    /// The unit took a single value over the validation sample.
    pub degenerate: bool,
}

/// One unit's validation values sorted high to low, with running concept
/// pixel totals, so any threshold is answered by a binary search.
struct SortedUnit {
    acts: Vec<f32>,
    /// `cum[c][k]`: concept `c` pixels in the `k` highest cells.
    cum: Vec<Vec<u64>>,
}

impl SortedUnit {
    fn new(s: &LayerSample, unit: usize, concepts: &[usize]) -> Self {
        let mut idx: Vec<(f32, usize, usize)> = (0..s.images)
            .flat_map(|i| (0..s.cells).map(move |p| (i, p)))
            .map(|(i, p)| (s.act(i, unit, p), i, p))
            .collect();
        idx.sort_by(|a, b| b.0.total_cmp(&a.0));
        let cum = concepts
            .iter()
            .map(|&c| {
                let mut v = Vec::with_capacity(idx.len() + 1);
                let mut acc = 0u64;
                v.push(0);
                for &(_, i, p) in &idx {
                    acc += s.count(i, c, p) as u64;
                    v.push(acc);
                }
                v
            })
            .collect();
        Self {
            acts: idx.into_iter().map(|e| e.0).collect(),
            cum,
        }
    }

    fn above(&self, t: f32) -> usize {
        self.acts.partition_point(|&a| a > t)
    }
}

/// Threshold candidates: `n` evenly spaced quantiles of the values above the
/// unit's minimum, plus the minimum itself. Sparse units put most mass at
/// their floor; spacing the grid over the rest keeps it informative.
fn threshold_grid(sorted_desc: &[f32], n: usize) -> Vec<f32> {
    let min = *sorted_desc.last().expect("non-empty");
    let above = sorted_desc.partition_point(|&a| a > min);
    let mut grid = vec![min];
    if above > 0 {
        let vals = &sorted_desc[..above];
        for i in 1..=n {
            let q = i as f64 / (n + 1) as f64;
            // ascending quantile q of vals
            let k = ((1.0 - q) * (above - 1) as f64).round() as usize;
            grid.push(vals[k]);
        }
    }
    grid.sort_by(f32::total_cmp);
    grid.dedup();
    grid
}

fn select_sorted(
    sorted: &SortedUnit,
    ci: usize,
    concept_pixels: u64,
    total: u64,
    cell_pixels: u64,
    quantiles: usize,
) -> (f32, f64, bool) {
    let degenerate = sorted.acts.first() == sorted.acts.last();
    let grid = threshold_grid(&sorted.acts, quantiles);
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &t in &grid {
        let k = sorted.above(t);
        let n11 = sorted.cum[ci][k];
        let on = k as u64 * cell_pixels;
        let c = Contingency {
            n11,
            n10: on - n11,
            n01: concept_pixels - n11,
            n00: total + n11 - on - concept_pixels,
        };
        let q = info_quality_ratio(&c);
        if q >= best.1 {
            best = (t, q);
        }
    }
    if degenerate {
        best.0 = *sorted.acts.first().expect("non-empty");
    }
    (best.0, best.1.max(0.0), degenerate)
}

/// Pick `t` maximizing the information quality ratio on `val`; ties go to
/// the larger `t`.
pub fn select_threshold(val: &LayerSample, unit: usize, concept: &str, quantiles: usize) -> Result<UnitThreshold> {
    let ci = val.concept_index(concept)?;
    let sorted = SortedUnit::new(val, unit, &[ci]);
    let (t, iqr, degenerate) = select_sorted(
        &sorted,
        0,
        val.concept_pixels(ci),
        val.total_pixels(),
        val.cell_pixels as u64,
        quantiles,
    );
    Ok(UnitThreshold {
        unit,
        concept: concept.into(),
        t,
        iqr,
        degenerate,
    })
}

/// Ratio-of-sums IoU of `act > t` against the concept over the sample.
pub fn iou(eval: &LayerSample, unit: usize, concept: &str, t: f32) -> Result<f64> {
    Ok(eval.contingency(unit, eval.concept_index(concept)?, t).iou())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub iou: f64,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitLabel {
    pub unit: usize,
    /// Best concept by IoU; `None` when no concept overlaps at all or the
    /// unit was marked unrealistic.
    pub concept: Option<String>,
    pub iou: f64,
    pub threshold: f32,
    pub pixel_acc: f64,
    pub class_predictor: bool,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub unrealistic: bool,
    /// IoU of this unit with every scored concept.
    #[serde(default)]
    pub scores: Vec<ConceptScore>,
}

impl UnitLabel {
    pub fn score(&self, concept: &str) -> Option<&ConceptScore> {
        self.scores.iter().find(|s| s.concept == concept)
    }
}

pub const CLASS_PREDICTOR_ACC: f64 = 0.75;
pub const CLASS_PREDICTOR_IOU: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissectionReport {
    pub layer: String,
    pub concepts: Vec<String>,
    pub units: Vec<UnitLabel>,
    /// Class-predictor units per concept.
    pub histogram: BTreeMap<String, usize>,
    pub val_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub fid_threshold: Option<f64>,
}

impl DissectionReport {
    /// Units ordered by IoU with `concept`, best first; ties by lower index.
    /// Numeric index of [`Self::layer`], when it has the `layerN` form.
    pub fn layer_index(&self) -> Option<usize> {
        self.layer.strip_prefix("layer")?.parse().ok()
    }

    pub fn ranked_units(&self, concept: &str) -> Vec<usize> {
        let mut v: Vec<(usize, f64)> = self
            .units
            .iter()
            .map(|u| (u.unit, u.score(concept).map_or(0.0, |s| s.iou)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().map(|e| e.0).collect()
    }

    pub fn interpretable_units(&self) -> usize {
        self.histogram.values().sum()
    }

    pub fn recompute_histogram(&mut self) {
        let mut h: BTreeMap<String, usize> = BTreeMap::new();
        for u in &self.units {
            if let (Some(c), true) = (&u.concept, u.class_predictor && !u.unrealistic) {
                *h.entry(c.clone()).or_default() += 1;
            }
        }
        self.histogram = h;
    }

    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json("dissection-report", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json("dissection-report", text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissectConfig {
    pub val_samples: usize,
    pub eval_samples: usize,
    pub min_val_samples: usize,
    pub min_eval_samples: usize,
    pub seed: u64,
    pub quantiles: usize,
    /// Part classes are scored only for base concepts with a component in at
    /// least this fraction of samples.
    pub part_min_presence: f64,
}

impl Default for DissectConfig {
    fn default() -> Self {
        Self {
            val_samples: 200,
            eval_samples: 1000,
            min_val_samples: 200,
            min_eval_samples: 1000,
            seed: 0,
            quantiles: 64,
            part_min_presence: 0.05,
        }
    }
}

const EVAL_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Validation and evaluation latents for a seed; the two streams never share
/// a vector.
pub fn dissection_latents(cfg: &DissectConfig, latent_dim: usize) -> (Vec<LatentVector>, Vec<LatentVector>) {
    (
        sample_z(cfg.seed, cfg.val_samples, latent_dim),
        sample_z(cfg.seed ^ EVAL_STREAM, cfg.eval_samples, latent_dim),
    )
}

/// Dissect layer `layer` of `net` (defaults to the split featuremap).
pub fn label_units(
    net: &NetworkSpec,
    layer: Option<usize>,
    universe: &ConceptUniverse,
    cfg: &DissectConfig,
) -> Result<DissectionReport> {
    if universe.concepts.is_empty() {
        return Err(GdError::InvalidArgument("empty concept universe".into()));
    }
    if cfg.val_samples < cfg.min_val_samples || cfg.eval_samples < cfg.min_eval_samples {
        return Err(GdError::InvalidArgument(format!(
            "need at least {} validation and {} evaluation samples, got {} and {}",
            cfg.min_val_samples, cfg.min_eval_samples, cfg.val_samples, cfg.eval_samples
        )));
    }
    let layer = layer.unwrap_or(net.split_index - 1);
    let (vz, ez) = dissection_latents(cfg, net.latent_dim);
    let val = collect_sample(net, layer, universe, &vz)?;
    let eval = collect_sample(net, layer, universe, &ez)?;
    label_from_samples(&val, &eval, universe, cfg)
}

/// Concepts to score: every base concept, plus parts of base concepts that
/// are common enough.
fn scored_concepts(val: &LayerSample, eval: &LayerSample, universe: &ConceptUniverse, cfg: &DissectConfig) -> Vec<usize> {
    let base = universe.concepts.len();
    let mut out: Vec<usize> = (0..base).collect();
    if universe.parts {
        let n = (val.images + eval.images) as f64;
        for b in 0..base {
            let present = (val.presence[b] + eval.presence[b]) as f64 / n;
            if present >= cfg.part_min_presence {
                out.extend((0..4).map(|k| base + b * 4 + k));
            }
        }
    }
    out
}

pub fn label_from_samples(
    val: &LayerSample,
    eval: &LayerSample,
    universe: &ConceptUniverse,
    cfg: &DissectConfig,
) -> Result<DissectionReport> {
    if val.concepts != eval.concepts || val.units != eval.units {
        return Err(GdError::InvalidArgument("validation and evaluation samples disagree".into()));
    }
    let concepts = scored_concepts(val, eval, universe, cfg);
    let val_px: Vec<u64> = concepts.iter().map(|&c| val.concept_pixels(c)).collect();
    let units: Vec<UnitLabel> = (0..val.units)
        .into_par_iter()
        .map(|u| {
            let sorted = SortedUnit::new(val, u, &concepts);
            let mut scores = Vec::with_capacity(concepts.len());
            let mut degenerate = false;
            let mut best: Option<(usize, f64, f32, Contingency)> = None;
            for (k, &c) in concepts.iter().enumerate() {
                let (t, _, deg) = select_sorted(
                    &sorted,
                    k,
                    val_px[k],
                    val.total_pixels(),
                    val.cell_pixels as u64,
                    cfg.quantiles,
                );
                degenerate = deg;
                let table = eval.contingency(u, c, t);
                let v = if deg { 0.0 } else { table.iou() };
                scores.push(ConceptScore {
                    concept: val.concepts[c].clone(),
                    iou: v,
                    threshold: t,
                });
                if best.as_ref().is_none_or(|b| v > b.1) {
                    best = Some((c, v, t, table));
                }
            }
            let (c, v, t, table) = best.expect("at least one concept");
            let labelled = v > 0.0;
            let acc = table.accuracy();
            UnitLabel {
                unit: u,
                concept: labelled.then(|| val.concepts[c].clone()),
                iou: v,
                threshold: t,
                pixel_acc: acc,
                class_predictor: labelled && acc > CLASS_PREDICTOR_ACC && v > CLASS_PREDICTOR_IOU,
                degenerate,
                unrealistic: false,
                scores,
            }
        })
        .collect();
    let mut report = DissectionReport {
        layer: format!("layer{}", val.layer),
        concepts: concepts.iter().map(|&c| val.concepts[c].clone()).collect(),
        units,
        histogram: BTreeMap::new(),
        val_samples: val.images,
        eval_samples: eval.images,
        seed: cfg.seed,
        fid_threshold: None,
    };
    report.recompute_histogram();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub layer: String,
    pub interpretable_units: usize,
    pub histogram: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    pub from: usize,
    pub to: usize,
    /// `to` minus `from` per concept.
    pub histogram_delta: BTreeMap<String, i64>,
    /// Units whose class-predictor label changed, with (from, to) labels.
    pub relabeled: Vec<(usize, Option<String>, Option<String>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<ReportSummary>,
    /// Each report against the previous one.
    pub diffs: Vec<ReportDiff>,
}

fn predictor_label(u: &UnitLabel) -> Option<String> {
    (u.class_predictor && !u.unrealistic).then(|| u.concept.clone()).flatten()
}

pub fn compare_reports(reports: &[DissectionReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| GdError::InvalidArgument("no reports to compare".into()))?;
    let base = |r: &DissectionReport| -> Vec<String> {
        let mut v: Vec<String> = r.concepts.iter().filter(|c| !c.contains('-')).cloned().collect();
        v.sort();
        v
    };
    for r in reports {
        if base(r) != base(first) {
            return Err(GdError::InvalidArgument(format!(
                "report {} uses a different concept universe",
                r.layer
            )));
        }
    }
    let summaries = reports
        .iter()
        .map(|r| ReportSummary {
            layer: r.layer.clone(),
            interpretable_units: r.interpretable_units(),
            histogram: r.histogram.clone(),
        })
        .collect();
    let diffs = reports
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let mut keys: Vec<&String> = w[0].histogram.keys().chain(w[1].histogram.keys()).collect();
            keys.sort();
            keys.dedup();
            let histogram_delta = keys
                .into_iter()
                .map(|k| {
                    let a = *w[0].histogram.get(k).unwrap_or(&0) as i64;
                    let b = *w[1].histogram.get(k).unwrap_or(&0) as i64;
                    (k.clone(), b - a)
                })
                .collect();
            let n = w[0].units.len().max(w[1].units.len());
            let relabeled = (0..n)
                .filter_map(|u| {
                    let a = w[0].units.get(u).and_then(predictor_label);
                    let b = w[1].units.get(u).and_then(predictor_label);
                    (a != b).then_some((u, a, b))
                })
                .collect();
            ReportDiff {
                from: i,
                to: i + 1,
                histogram_delta,
                relabeled,
            }
        })
        .collect();
    Ok(Comparison {
        reports: summaries,
        diffs,
    })
}

/// Plain-text table of a comparison: one row per concept, one column per report.
pub fn render_comparison(c: &Comparison) -> String {
    let mut concepts: Vec<&String> = c.reports.iter().flat_map(|r| r.histogram.keys()).collect();
    concepts.sort();
    concepts.dedup();
    let mut out = format!("{:<12}", "concept");
    for (i, r) in c.reports.iter().enumerate() {
        out.push_str(&format!(" {:>10}", format!("{}#{i}", r.layer)));
    }
    out.push('\n');
    for k in concepts {
        out.push_str(&format!("{k:<12}"));
        for r in &c.reports {
            out.push_str(&format!(" {:>10}", r.histogram.get(k).unwrap_or(&0)));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<12}", "total"));
    for r in &c.reports {
        out.push_str(&format!(" {:>10}", r.interpretable_units));
    }
    out.push('\n');
    out
}
