//! Editing sessions: a latent seed plus a stack of featuremap interventions.
//! The stack is the session's whole state, so replaying it from the seed
//! reproduces the current image exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dissect::DissectionReport;
use crate::error::{GdError, Result};
use crate::intervene::{
    alpha_init, compute_k, optimize_alpha, rank_by_alpha, AceConfig, InterventionSpec, LocationSet, Mode,
    Provenance, UnitSet,
};
use crate::network::NetworkSpec;
use crate::scene::{sample_z, LatentVector};
use crate::segment::{segment, ConceptUniverse};
use crate::tensor::Tensor;

/// Units used when an edit names no explicit unit list.
pub const DEFAULT_TOP_N: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub concept: String,
    /// Units by decreasing causal weight.
    pub ranked_units: Vec<usize>,
    pub k: Vec<f32>,
}

/// What an editing service knows about each paintable concept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl ConceptCatalog {
    pub fn get(&self, concept: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.concept == concept)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json("catalog", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json("catalog", text)
    }
}

/// How a catalog orders each concept's units.
#[derive(Clone, Debug, PartialEq)]
pub enum Ranking {
    /// Dissection IoU, highest first.
    Iou,
    /// Optimized α, starting from the IoU-derived initial vector.
    Alpha(AceConfig),
}

/// Catalog for `concepts`, with `k` estimated from `latents`.
pub fn build_catalog(
    net: &NetworkSpec,
    universe: &ConceptUniverse,
    report: &DissectionReport,
    concepts: &[String],
    latents: &[LatentVector],
    ranking: &Ranking,
) -> Result<ConceptCatalog> {
    let mut entries = Vec::with_capacity(concepts.len());
    for c in concepts {
        let k = compute_k(net, universe, c, latents)?.k;
        let ranked_units = match ranking {
            Ranking::Iou => report.ranked_units(c),
            Ranking::Alpha(cfg) => {
                let init = alpha_init(report, c)?;
                rank_by_alpha(&optimize_alpha(net, universe, c, &k, &init, cfg)?.alpha.alpha)
            }
        };
        entries.push(CatalogEntry {
            concept: c.clone(),
            ranked_units,
            k,
        });
    }
    Ok(ConceptCatalog { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Insert,
    Ablate,
    Undo,
    Reset,
}

/// Union of discs centred on `points` (`[x, y]` image pixels).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Brush {
    pub points: Vec<[usize; 2]>,
    pub radius: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum UnitSource {
    AlphaTopN { n: usize },
    Explicit { units: Vec<usize> },
}

impl Default for UnitSource {
    fn default() -> Self {
        Self::AlphaTopN { n: DEFAULT_TOP_N }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditCommand {
    pub op: EditOp,
    #[serde(default)]
    pub concept: Option<String>,
    #[serde(default)]
    pub brush: Option<Brush>,
    #[serde(default)]
    pub units: Option<UnitSource>,
}

#[derive(Debug, Error)]
pub enum EditError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("nothing to undo")]
    EmptyStack,
    #[error(transparent)]
    Core(#[from] GdError),
}

fn invalid(field: &str, message: impl Into<String>) -> EditError {
    EditError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Featuremap locations whose image footprint intersects the brush.
pub fn brush_locations(
    brush: &Brush,
    image: (usize, usize),
    featuremap: (usize, usize),
) -> std::result::Result<Vec<(usize, usize)>, EditError> {
    let (h, w) = image;
    let (fh, fw) = featuremap;
    if brush.points.is_empty() {
        return Err(invalid("brush.points", "empty stroke"));
    }
    if let Some(p) = brush.points.iter().find(|p| p[0] >= w || p[1] >= h) {
        return Err(invalid("brush.points", format!("({}, {}) outside {w}x{h} image", p[0], p[1])));
    }
    let (sy, sx) = (h / fh, w / fw);
    let r = brush.radius as isize;
    let mut hit = vec![false; fh * fw];
    for p in &brush.points {
        let (cx, cy) = (p[0] as isize, p[1] as isize);
        for y in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                    hit[(y as usize / sy) * fw + x as usize / sx] = true;
                }
            }
        }
    }
    Ok((0..fh * fw).filter(|&i| hit[i]).map(|i| (i / fw, i % fw)).collect())
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub before: Tensor,
    pub image: Tensor,
    /// Concept pixels after minus before, for every concept of the universe.
    pub delta_stats: BTreeMap<String, i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    /// Free-form description of the generator the edits apply to.
    pub generator: String,
    pub seed: u64,
    pub edits: Vec<InterventionSpec>,
}

/// The latent a session seed stands for: the first vector of that seed's
/// stream.
pub fn seed_latent(seed: u64, latent_dim: usize) -> Vec<f32> {
    sample_z(seed, 1, latent_dim).remove(0).values
}

pub fn render_seed(net: &NetworkSpec, seed: u64) -> Result<Tensor> {
    net.forward_from(&net.featuremap(&seed_latent(seed, net.latent_dim))?)
}

impl Session {
    pub fn new(id: impl Into<String>, generator: impl Into<String>, seed: u64) -> Self {
        Self {
            id: id.into(),
            generator: generator.into(),
            seed,
            edits: Vec::new(),
        }
    }

    /// Featuremap after the first `n` edits.
    pub fn featuremap_after(&self, net: &NetworkSpec, n: usize) -> Result<Tensor> {
        let mut r = net.featuremap(&seed_latent(self.seed, net.latent_dim))?;
        for e in &self.edits[..n.min(self.edits.len())] {
            r = e.apply(&r)?;
        }
        Ok(r)
    }

    pub fn featuremap(&self, net: &NetworkSpec) -> Result<Tensor> {
        self.featuremap_after(net, self.edits.len())
    }

    /// Image produced by replaying every edit from the seed.
    pub fn replay(&self, net: &NetworkSpec) -> Result<Tensor> {
        net.forward_from(&self.featuremap(net)?)
    }

    /// Featuremaps before and after the most recent edit.
    pub fn last_edit(&self, net: &NetworkSpec) -> Option<Result<(Tensor, Tensor)>> {
        let n = self.edits.len();
        (n > 0).then(|| Ok((self.featuremap_after(net, n - 1)?, self.featuremap(net)?)))
    }

    /// Turn a paint command into a stored intervention without applying it.
    pub fn resolve(
        &self,
        net: &NetworkSpec,
        catalog: &ConceptCatalog,
        cmd: &EditCommand,
    ) -> std::result::Result<InterventionSpec, EditError> {
        let mode = match cmd.op {
            EditOp::Insert => Mode::Insert,
            EditOp::Ablate => Mode::Ablate,
            _ => return Err(invalid("op", "not a paint operation")),
        };
        let concept = cmd.concept.as_deref().ok_or_else(|| invalid("concept", "required"))?;
        let entry = catalog
            .get(concept)
            .ok_or_else(|| invalid("concept", format!("unknown concept '{concept}'")))?;
        let brush = cmd.brush.as_ref().ok_or_else(|| invalid("brush", "required"))?;
        let fm = net.featuremap_shape()?;
        let img = net.image_shape()?;
        let d = fm[0];
        let units = match cmd.units.clone().unwrap_or_default() {
            UnitSource::AlphaTopN { n } => {
                if n == 0 || n > entry.ranked_units.len() {
                    return Err(invalid("units.n", format!("must be in 1..={}", entry.ranked_units.len())));
                }
                UnitSet::new(entry.ranked_units[..n].iter().copied(), d)?
            }
            UnitSource::Explicit { units } => {
                UnitSet::new(units, d).map_err(|e| invalid("units.units", e.to_string()))?
            }
        };
        let locs = brush_locations(brush, (img[1], img[2]), (fm[1], fm[2]))?;
        Ok(InterventionSpec {
            mode,
            units,
            locations: LocationSet::new(locs, Provenance::Painted, fm[1], fm[2])?,
            k: (mode == Mode::Insert).then(|| entry.k.clone()),
        })
    }

    /// Apply one command and report the per-concept pixel change.
    pub fn apply(
        &mut self,
        net: &NetworkSpec,
        catalog: &ConceptCatalog,
        universe: &ConceptUniverse,
        cmd: &EditCommand,
    ) -> std::result::Result<EditOutcome, EditError> {
        let before = self.replay(net)?;
        match cmd.op {
            EditOp::Undo => {
                if self.edits.pop().is_none() {
                    return Err(EditError::EmptyStack);
                }
            }
            EditOp::Reset => self.edits.clear(),
            EditOp::Insert | EditOp::Ablate => {
                let spec = self.resolve(net, catalog, cmd)?;
                self.edits.push(spec);
            }
        }
        let image = self.replay(net)?;
        let delta_stats = concept_delta(&before, &image, universe)?;
        Ok(EditOutcome {
            before,
            image,
            delta_stats,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json("session", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json("session", text)
    }
}

/// Concept pixel counts of `after` minus those of `before`.
pub fn concept_delta(before: &Tensor, after: &Tensor, universe: &ConceptUniverse) -> Result<BTreeMap<String, i64>> {
    let (a, b) = (segment(before, universe)?, segment(after, universe)?);
    Ok(universe
        .names()
        .into_iter()
        .map(|c| {
            let n = |s: &crate::segment::SegmentationResult| s.mask(&c).map_or(0, |m| m.count() as i64);
            let d = n(&b) - n(&a);
            (c, d)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_brush_maps_inclusively() {
        let b = Brush {
            points: vec![[8, 8]],
            radius: 0,
        };
        assert_eq!(brush_locations(&b, (64, 64), (8, 8)).unwrap(), vec![(1, 1)]);
        let b = Brush {
            points: vec![[7, 7]],
            radius: 1,
        };
        assert_eq!(
            brush_locations(&b, (64, 64), (8, 8)).unwrap(),
            vec![(0, 0), (0, 1), (1, 0)]
        );
    }

    #[test]
    fn brush_outside_image_is_invalid() {
        let b = Brush {
            points: vec![[64, 3]],
            radius: 2,
        };
        assert!(matches!(
            brush_locations(&b, (64, 64), (8, 8)),
            Err(EditError::Invalid { .. })
        ));
    }

    #[test]
    fn radius_is_clipped_at_edges() {
        let b = Brush {
            points: vec![[0, 0]],
            radius: 100,
        };
        assert_eq!(brush_locations(&b, (64, 64), (8, 8)).unwrap().len(), 64);
    }

    #[test]
    fn command_json_defaults() {
        let c: EditCommand = serde_json::from_str(r#"{"op":"undo"}"#).unwrap();
        assert_eq!(c.op, EditOp::Undo);
        assert!(c.units.is_none());
        let c: EditCommand = serde_json::from_str(
            r#"{"op":"insert","concept":"door","brush":{"points":[[3,4]],"radius":2},"units":{"source":"explicit","units":[1,2]}}"#,
        )
        .unwrap();
        assert_eq!(c.units, Some(UnitSource::Explicit { units: vec![1, 2] }));
    }
}
