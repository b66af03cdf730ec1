//! Oracle segmentation of synthetic scenes.
//!
//! A pixel is a candidate for concept `c` when its hue falls in `c`'s band
//! and it is saturated and bright enough. Candidates are grouped into
//! 4-connected components and each component is kept only if it agrees with
//! the concept's shape template (IoU against the template fitted to its
//! bounding box).

use serde::{Deserialize, Serialize};

use crate::error::{GdError, Result};
use crate::tensor::Tensor;

pub const MIN_SATURATION: f32 = 0.4;
pub const MIN_VALUE: f32 = 0.15;
/// Components smaller than this are treated as noise.
pub const MIN_COMPONENT: usize = 4;
/// Required IoU between a component and its rect/stripe template.
pub const RECT_TEMPLATE_MIN: f32 = 0.9;
/// Required IoU between a component and the ellipse inscribed in its box.
pub const DISC_TEMPLATE_MIN: f32 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Disc,
    /// Spans the full image width.
    Stripe,
    /// Background area, no shape constraint.
    Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDef {
    pub name: String,
    /// Hue band in degrees; wraps through 0 when `lo > hi`.
    pub hue_range: [f32; 2],
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptUniverse {
    pub concepts: Vec<ConceptDef>,
    /// Whether dissection should also consider `c-t/c-b/c-l/c-r` part classes.
    #[serde(default)]
    pub parts: bool,
}

impl ConceptUniverse {
    pub fn new(concepts: Vec<ConceptDef>, parts: bool) -> Result<Self> {
        let u = Self { concepts, parts };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.concepts {
            if !seen.insert(c.name.as_str()) {
                return Err(GdError::InvalidArgument(format!(
                    "duplicate concept '{}'",
                    c.name
                )));
            }
            let [lo, hi] = c.hue_range;
            if !(0.0..=360.0).contains(&lo) || !(0.0..=360.0).contains(&hi) {
                return Err(GdError::InvalidArgument(format!(
                    "hue range of '{}' outside [0,360]",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let u: Self = serde_json::from_str(text).map_err(|e| GdError::Json {
            offset: crate::persist::byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        u.validate()?;
        Ok(u)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("universe serializes")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&ConceptDef> {
        self.concepts
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| GdError::UnknownConcept(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptMask {
    pub concept: String,
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl ConceptMask {
    pub fn empty(concept: &str, width: usize, height: usize) -> Self {
        Self {
            concept: concept.to_string(),
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Pixels set inside rows `[y0,y1)` and columns `[x0,x1)`.
    pub fn count_in(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> usize {
        (y0..y1)
            .map(|y| self.mask[y * self.width + x0..y * self.width + x1].iter().filter(|&&m| m).count())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub masks: Vec<ConceptMask>,
}

impl SegmentationResult {
    pub fn mask(&self, concept: &str) -> Option<&ConceptMask> {
        self.masks.iter().find(|m| m.concept == concept)
    }

    pub fn count(&self, concept: &str) -> usize {
        self.mask(concept).map_or(0, ConceptMask::count)
    }

    pub fn fraction(&self, concept: &str) -> f64 {
        self.mask(concept)
            .map_or(0.0, |m| m.count() as f64 / m.mask.len() as f64)
    }
}

/// RGB in `[0,1]` to (hue degrees, saturation, value).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn in_band(h: f32, [lo, hi]: [f32; 2]) -> bool {
    if lo <= hi {
        (lo..=hi).contains(&h)
    } else {
        h >= lo || h <= hi
    }
}

/// Angular distance from `h` to the nearest edge of the band (0 inside).
fn band_distance(h: f32, band: [f32; 2]) -> f32 {
    if in_band(h, band) {
        return 0.0;
    }
    let ang = |a: f32, b: f32| {
        let d = (a - b).abs() % 360.0;
        d.min(360.0 - d)
    };
    ang(h, band[0]).min(ang(h, band[1]))
}

fn image_hsv(image: &Tensor) -> Result<(usize, usize, Vec<(f32, f32, f32)>)> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(GdError::Shape(format!(
            "segmenter needs a [3,H,W] image, got {:?}",
            image.shape()
        )));
    }
    let unit = |v: f32| ((v + 1.0) * 0.5).clamp(0.0, 1.0);
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    let hsv = (0..h * w)
        .map(|i| rgb_to_hsv(unit(r[i]), unit(g[i]), unit(b[i])))
        .collect();
    Ok((h, w, hsv))
}

pub fn segment(image: &Tensor, universe: &ConceptUniverse) -> Result<SegmentationResult> {
    let (h, w, hsv) = image_hsv(image)?;
    let masks = universe
        .concepts
        .iter()
        .map(|c| concept_mask(&hsv, h, w, c))
        .collect();
    Ok(SegmentationResult { masks })
}

/// Mask of a single concept, identical to its entry in [`segment`].
pub fn segment_concept(image: &Tensor, concept: &ConceptDef) -> Result<ConceptMask> {
    let (h, w, hsv) = image_hsv(image)?;
    Ok(concept_mask(&hsv, h, w, concept))
}

fn concept_mask(hsv: &[(f32, f32, f32)], h: usize, w: usize, c: &ConceptDef) -> ConceptMask {
    let cand: Vec<bool> = hsv
        .iter()
        .map(|&(hue, s, v)| s >= MIN_SATURATION && v >= MIN_VALUE && in_band(hue, c.hue_range))
        .collect();
    let comps = connected_components(&cand, w, h);
    let keep: Vec<bool> = std::iter::once(false)
        .chain(
            comps
                .regions
                .iter()
                .map(|r| r.pixel_count >= MIN_COMPONENT && shape_agrees(&comps, r, c.shape, w)),
        )
        .collect();
    let mask = comps.labels.iter().map(|&l| keep[l as usize]).collect();
    ConceptMask {
        concept: c.name.clone(),
        width: w,
        height: h,
        mask,
    }
}

fn shape_agrees(comps: &Components, region: &Region, shape: Shape, image_width: usize) -> bool {
    let b = region.bbox;
    let area = b.area();
    match shape {
        Shape::Region => true,
        Shape::Rect => region.pixel_count as f32 / area as f32 >= RECT_TEMPLATE_MIN,
        Shape::Stripe => {
            b.x0 == 0
                && b.x1 == image_width
                && region.pixel_count as f32 / area as f32 >= RECT_TEMPLATE_MIN
        }
        Shape::Disc => {
            let (cy, cx) = ((b.y0 + b.y1) as f32 * 0.5, (b.x0 + b.x1) as f32 * 0.5);
            let (ry, rx) = ((b.y1 - b.y0) as f32 * 0.5, (b.x1 - b.x0) as f32 * 0.5);
            let mut inter = 0usize;
            let mut templ = 0usize;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    let dy = (y as f32 + 0.5 - cy) / ry;
                    let dx = (x as f32 + 0.5 - cx) / rx;
                    let t = dx * dx + dy * dy <= 1.0;
                    let m = comps.labels[y * comps.width + x] == region.label;
                    templ += t as usize;
                    inter += (t && m) as usize;
                }
            }
            let union = templ + region.pixel_count - inter;
            union > 0 && inter as f32 / union as f32 >= DISC_TEMPLATE_MIN
        }
    }
}

/// Per-pixel soft membership in `[0,1]` for one concept: full inside the hue
/// band, fading linearly over 30 degrees outside it, scaled by saturation.
/// Continuous in the image, unlike [`segment`].
pub fn soft_scores(image: &Tensor, concept: &ConceptDef) -> Result<Vec<f32>> {
    let (_, _, hsv) = image_hsv(image)?;
    Ok(hsv
        .into_iter()
        .map(|(hue, s, v)| {
            let hue_w = (1.0 - band_distance(hue, concept.hue_range) / 30.0).max(0.0);
            let sat_w = ((s - (MIN_SATURATION - 0.1)) / 0.2).clamp(0.0, 1.0);
            let val_w = ((v - MIN_VALUE + 0.05) / 0.1).clamp(0.0, 1.0);
            hue_w * sat_w * val_w
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    /// Exclusive.
    pub y1: usize,
    /// Exclusive.
    pub x1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// Label in [`Components::labels`]; labels start at 1.
    pub label: u32,
    pub pixel_count: usize,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub width: usize,
    pub height: usize,
    /// 0 for background, otherwise the 1-based component label in raster
    /// order of first appearance.
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

/// 4-connected component labelling.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Components {
    assert_eq!(mask.len(), width * height, "mask size");
    let mut labels = vec![0u32; mask.len()];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = regions.len() as u32 + 1;
        let (sy, sx) = (start / width, start % width);
        let mut bbox = BoundingBox {
            y0: sy,
            x0: sx,
            y1: sy + 1,
            x1: sx + 1,
        };
        let mut count = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            count += 1;
            let (y, x) = (i / width, i % width);
            bbox.y0 = bbox.y0.min(y);
            bbox.y1 = bbox.y1.max(y + 1);
            bbox.x0 = bbox.x0.min(x);
            bbox.x1 = bbox.x1.max(x + 1);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
        }
        regions.push(Region {
            label,
            pixel_count: count,
            bbox,
        });
    }
    Components {
        width,
        height,
        labels,
        regions,
    }
}

pub const PART_SUFFIXES: [&str; 4] = ["t", "b", "l", "r"];

pub fn part_name(base: &str, part: &str) -> String {
    format!("{base}-{part}")
}

fn is_part(name: &str) -> bool {
    PART_SUFFIXES
        .iter()
        .any(|p| name.len() > 2 && name.ends_with(&format!("-{p}")))
}

/// Appends `c-t`, `c-b`, `c-l`, `c-r` masks for every base concept. Each
/// connected component is split at the middle of its own bounding box; odd
/// extents give the extra row to `t` and the extra column to `l`.
pub fn expand_parts(result: &SegmentationResult) -> SegmentationResult {
    let mut masks = result.masks.clone();
    for base in result.masks.iter().filter(|m| !is_part(&m.concept)) {
        let (w, h) = (base.width, base.height);
        let comps = connected_components(&base.mask, w, h);
        let mut parts: Vec<ConceptMask> = PART_SUFFIXES
            .iter()
            .map(|p| ConceptMask::empty(&part_name(&base.concept, p), w, h))
            .collect();
        for (i, &label) in comps.labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            let b = comps.regions[label as usize - 1].bbox;
            let (y, x) = (i / w, i % w);
            let ymid = b.y0 + (b.y1 - b.y0).div_ceil(2);
            let xmid = b.x0 + (b.x1 - b.x0).div_ceil(2);
            parts[if y < ymid { 0 } else { 1 }].mask[i] = true;
            parts[if x < xmid { 2 } else { 3 }].mask[i] = true;
        }
        masks.extend(parts);
    }
    SegmentationResult { masks }
}

/// Mean fraction of pixels labelled `concept` over a sample. Zero is
/// reported as [`GdError::ZeroBaseRate`] so normalizations can refuse it.
pub fn base_rate(concept: &str, sample: &[SegmentationResult]) -> Result<f64> {
    if sample.is_empty() {
        return Err(GdError::InvalidArgument("base rate of an empty sample".into()));
    }
    let rate = sample.iter().map(|s| s.fraction(concept)).sum::<f64>() / sample.len() as f64;
    if rate == 0.0 {
        return Err(GdError::ZeroBaseRate(concept.to_string()));
    }
    Ok(rate)
}
