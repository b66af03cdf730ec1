//! Interventions on the split featuremap and the causal measurements built
//! on them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissect::{collect_sample, DissectionReport, LayerSample};
use crate::error::{GdError, Result};
use crate::network::{LayerSpec, NetworkSpec};
use crate::scene::{sample_z, LatentVector};
use crate::segment::{segment, segment_concept, soft_scores, ConceptDef, ConceptUniverse};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSet {
    units: Vec<usize>,
}

impl UnitSet {
    /// Sorted, deduplicated set; every index must be below `d`.
    pub fn new(units: impl IntoIterator<Item = usize>, d: usize) -> Result<Self> {
        let mut units: Vec<usize> = units.into_iter().collect();
        units.sort_unstable();
        units.dedup();
        if let Some(u) = units.iter().find(|&&u| u >= d) {
            return Err(GdError::InvalidArgument(format!("unit {u} out of range for {d} units")));
        }
        Ok(Self { units })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn units(&self) -> &[usize] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn contains(&self, u: usize) -> bool {
        self.units.binary_search(&u).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FullMap,
    Sampled,
    Painted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationSet {
    /// `(row, column)` featuremap coordinates.
    pub locations: Vec<(usize, usize)>,
    pub provenance: Provenance,
}

impl LocationSet {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            locations: (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).collect(),
            provenance: Provenance::FullMap,
        }
    }

    pub fn single(y: usize, x: usize) -> Self {
        Self {
            locations: vec![(y, x)],
            provenance: Provenance::Sampled,
        }
    }

    pub fn new(mut locations: Vec<(usize, usize)>, provenance: Provenance, height: usize, width: usize) -> Result<Self> {
        locations.sort_unstable();
        locations.dedup();
        if let Some(&(y, x)) = locations.iter().find(|(y, x)| *y >= height || *x >= width) {
            return Err(GdError::InvalidArgument(format!(
                "location ({y},{x}) outside {height}x{width} featuremap"
            )));
        }
        Ok(Self { locations, provenance })
    }
}

fn check(r: &Tensor, units: &UnitSet, p: &LocationSet) -> Result<(usize, usize, usize)> {
    let (c, h, w) = r.chw()?;
    if units.units.last().is_some_and(|&u| u >= c) {
        return Err(GdError::InvalidArgument(format!("unit set exceeds {c} channels")));
    }
    if p.locations.iter().any(|&(y, x)| y >= h || x >= w) {
        return Err(GdError::InvalidArgument(format!("location outside {h}x{w} featuremap")));
    }
    Ok((c, h, w))
}

/// `r` with units `U` zeroed at locations `P`.
pub fn ablate(r: &Tensor, units: &UnitSet, p: &LocationSet) -> Result<Tensor> {
    check(r, units, p)?;
    let mut out = r.clone();
    for &u in units.units() {
        for &(y, x) in &p.locations {
            out.set3(u, y, x, 0.0);
        }
    }
    Ok(out)
}

/// `r` with unit `u ∈ U` set to `k[u]` at locations `P`.
pub fn insert(r: &Tensor, units: &UnitSet, p: &LocationSet, k: &[f32]) -> Result<Tensor> {
    let (c, _, _) = check(r, units, p)?;
    if k.len() != c {
        return Err(GdError::InvalidArgument(format!("k has {} values for {c} units", k.len())));
    }
    let mut out = r.clone();
    for &u in units.units() {
        for &(y, x) in &p.locations {
            out.set3(u, y, x, k[u]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ablate,
    Insert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub mode: Mode,
    pub units: UnitSet,
    pub locations: LocationSet,
    /// Per-unit constants over all `d` units; required for insertion.
    #[serde(default)]
    pub k: Option<Vec<f32>>,
}

impl InterventionSpec {
    pub fn apply(&self, r: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Ablate => ablate(r, &self.units, &self.locations),
            Mode::Insert => {
                let k = self
                    .k
                    .as_ref()
                    .ok_or_else(|| GdError::InvalidArgument("insertion needs k".into()))?;
                insert(r, &self.units, &self.locations, k)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionConstant {
    pub concept: String,
    pub k: Vec<f32>,
}

/// Mean activation of every unit at featuremap cells where the concept is
/// present, each cell weighted by the fraction of its pixels the concept
/// covers. `sample` must be recorded at the split layer.
pub fn k_from_sample(sample: &LayerSample, concept: &str) -> Result<InsertionConstant> {
    let c = sample.concept_index(concept)?;
    let mut num = vec![0.0f64; sample.units];
    let mut den = 0.0f64;
    for i in 0..sample.images {
        for p in 0..sample.cells {
            let w = sample.count(i, c, p) as f64 / sample.cell_pixels as f64;
            if w > 0.0 {
                den += w;
                for (u, n) in num.iter_mut().enumerate() {
                    *n += w * sample.act(i, u, p) as f64;
                }
            }
        }
    }
    if den == 0.0 {
        return Err(GdError::ZeroBaseRate(concept.into()));
    }
    Ok(InsertionConstant {
        concept: concept.into(),
        k: num.into_iter().map(|n| (n / den) as f32).collect(),
    })
}

pub fn compute_k(
    net: &NetworkSpec,
    universe: &ConceptUniverse,
    concept: &str,
    latents: &[LatentVector],
) -> Result<InsertionConstant> {
    universe.get(concept)?;
    let plain = ConceptUniverse {
        concepts: universe.concepts.clone(),
        parts: false,
    };
    let sample = collect_sample(net, net.split_index - 1, &plain, latents)?;
    k_from_sample(&sample, concept)
}

/// `(1-α)⊙r` and `α⊙k + (1-α)⊙r` at `P`; other entries untouched. Components
/// at exactly 0 or 1 are written directly so binary `α` reproduces
/// [`ablate`] and [`insert`] bit for bit.
pub fn partial_featuremaps(r: &Tensor, alpha: &[f32], p: &LocationSet, k: &[f32]) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = r.chw()?;
    if alpha.len() != c || k.len() != c {
        return Err(GdError::InvalidArgument(format!(
            "alpha ({}) and k ({}) must have one value per unit ({c})",
            alpha.len(),
            k.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(GdError::InvalidArgument(format!("alpha component {a} outside [0,1]")));
    }
    if p.locations.iter().any(|&(y, x)| y >= h || x >= w) {
        return Err(GdError::InvalidArgument("location outside featuremap".into()));
    }
    let mut ra = r.clone();
    let mut ri = r.clone();
    for (u, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for &(y, x) in &p.locations {
            let v = r.at3(u, y, x);
            if a == 1.0 {
                ra.set3(u, y, x, 0.0);
                ri.set3(u, y, x, k[u]);
            } else {
                ra.set3(u, y, x, (1.0 - a) * v);
                ri.set3(u, y, x, a * k[u] + (1.0 - a) * v);
            }
        }
    }
    Ok((ra, ri))
}

/// Images after partial ablation and partial insertion.
pub fn partial_intervention(
    net: &NetworkSpec,
    r: &Tensor,
    alpha: &[f32],
    p: &LocationSet,
    k: &[f32],
) -> Result<(Tensor, Tensor)> {
    let (ra, ri) = partial_featuremaps(r, alpha, p, k)?;
    Ok((net.forward_from(&ra)?, net.forward_from(&ri)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Both terms divided by the concept's pre-intervention base rate.
    #[default]
    Shared,
    /// Insertion measured on its footprint and divided by the footprint base
    /// rate; ablation divided by the whole-image base rate.
    PerTerm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AceResult {
    pub concept: String,
    pub units: Vec<usize>,
    /// Normalized average causal effect.
    pub delta: f64,
    /// Mean concept fraction after insertion.
    pub insertion: f64,
    /// Mean concept fraction after ablation.
    pub ablation: f64,
    pub base_rate: f64,
    pub samples: usize,
    /// 95% normal half-width of `delta`.
    pub half_width: f64,
    pub normalization: Normalization,
}

fn featuremap_hw(net: &NetworkSpec) -> Result<(usize, usize, usize)> {
    let s = net.featuremap_shape()?;
    Ok((s[0], s[1], s[2]))
}

/// One uniformly drawn featuremap location per latent.
pub fn sample_locations(seed: u64, count: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (rng.gen_range(0..height), rng.gen_range(0..width)))
        .collect()
}

fn footprint(net: &NetworkSpec, y: usize, x: usize) -> Result<(usize, usize, usize, usize)> {
    let (_, fh, fw) = featuremap_hw(net)?;
    let img = net.image_shape()?;
    let (sy, sx) = (img[1] / fh, img[2] / fw);
    Ok((y * sy, (y + 1) * sy, x * sx, (x + 1) * sx))
}

/// Average causal effect of `units` on `concept`: ablation at every location
/// against insertion at one uniform location per latent.
pub fn ace(
    net: &NetworkSpec,
    universe: &ConceptUniverse,
    units: &UnitSet,
    concept: &str,
    k: &[f32],
    latents: &[LatentVector],
    normalization: Normalization,
    seed: u64,
) -> Result<AceResult> {
    let def = universe.get(concept)?;
    let (_, fh, fw) = featuremap_hw(net)?;
    if latents.is_empty() {
        return Err(GdError::InvalidArgument("ace needs at least one latent".into()));
    }
    let locs = sample_locations(seed, latents.len(), fh, fw);
    let all = LocationSet::full(fh, fw);
    // per trial: (base, inserted, ablated, base on footprint, inserted on footprint)
    let trials: Vec<[f64; 5]> = latents
        .par_iter()
        .zip(&locs)
        .map(|(z, &(y, x))| {
            let r = net.featuremap(&z.values)?;
            let x0 = net.forward_from(&r)?;
            let xi = net.forward_from(&insert(&r, units, &LocationSet::single(y, x), k)?)?;
            let xa = net.forward_from(&ablate(&r, units, &all)?)?;
            let m0 = segment_concept(&x0, def)?;
            let mi = segment_concept(&xi, def)?;
            let ma = segment_concept(&xa, def)?;
            let (y0, y1, x0_, x1) = footprint(net, y, x)?;
            Ok([
                m0.count() as f64,
                mi.count() as f64,
                ma.count() as f64,
                m0.count_in(y0, y1, x0_, x1) as f64,
                mi.count_in(y0, y1, x0_, x1) as f64,
            ])
        })
        .collect::<Result<_>>()?;
    let n = trials.len() as f64;
    let img = net.image_shape()?;
    let pixels = (img[1] * img[2]) as f64;
    let fp_pixels = pixels / (fh * fw) as f64;
    let sum = |i: usize| trials.iter().map(|t| t[i]).sum::<f64>();
    let base_rate = sum(0) / (n * pixels);
    if base_rate == 0.0 {
        return Err(GdError::ZeroBaseRate(concept.into()));
    }
    let insertion = sum(1) / (n * pixels);
    let ablation = sum(2) / (n * pixels);
    let (delta, per_trial): (f64, Vec<f64>) = match normalization {
        Normalization::Shared => (
            (sum(1) - sum(2)) / sum(0),
            trials.iter().map(|t| (t[1] - t[2]) / (pixels * base_rate)).collect(),
        ),
        Normalization::PerTerm => {
            let fp_base = sum(3);
            if fp_base == 0.0 {
                return Err(GdError::ZeroBaseRate(concept.into()));
            }
            let fp_rate = fp_base / (n * fp_pixels);
            (
                sum(4) / fp_base - sum(2) / sum(0),
                trials
                    .iter()
                    .map(|t| t[4] / (fp_pixels * fp_rate) - t[2] / (pixels * base_rate))
                    .collect(),
            )
        }
    };
    Ok(AceResult {
        concept: concept.into(),
        units: units.units().to_vec(),
        delta,
        insertion,
        ablation,
        base_rate,
        samples: trials.len(),
        half_width: half_width(&per_trial),
        normalization,
    })
}

fn half_width(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::INFINITY;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    1.96 * (var / n).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AceConfig {
    /// Weight of the L2 penalty on α.
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Locations per step, split evenly between concept-present locations and
    /// insertion candidates.
    pub minibatch: usize,
    pub seed: u64,
    /// Latents used to build the location pools; drawn as `(z, -z)` pairs.
    pub pool_latents: usize,
    pub fd_step: f32,
    /// Coordinates whose partial derivatives are estimated per step.
    pub fd_block: usize,
}

impl Default for AceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            learning_rate: 0.1,
            steps: 300,
            minibatch: 64,
            seed: 0,
            pool_latents: 128,
            fd_step: 0.05,
            fd_block: 16,
        }
    }
}

impl AceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.steps == 0 || self.minibatch < 2 || self.fd_block == 0 {
            return Err(GdError::InvalidArgument(
                "need lambda >= 0, steps >= 1, minibatch >= 2, fd_block >= 1".into(),
            ));
        }
        if !(self.fd_step > 0.0 && self.fd_step < 1.0) || self.pool_latents < 2 {
            return Err(GdError::InvalidArgument("need 0 < fd_step < 1 and pool_latents >= 2".into()));
        }
        Ok(())
    }

    /// Stable text identifying the settings an α vector was produced with.
    pub fn fingerprint(&self) -> String {
        format!(
            "lambda={} lr={} steps={} minibatch={} seed={} pool={} fd_step={} fd_block={}",
            self.lambda,
            self.learning_rate,
            self.steps,
            self.minibatch,
            self.seed,
            self.pool_latents,
            self.fd_step,
            self.fd_block
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub concept: String,
    pub alpha: Vec<f32>,
    #[serde(default)]
    pub config_fingerprint: String,
}

impl AlphaVector {
    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json("alpha", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json("alpha", text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub alpha: AlphaVector,
    pub initial: Vec<f32>,
    /// Minibatch objective before each step.
    pub log: Vec<f64>,
}

/// Starting α: each unit's IoU with the concept divided by the best unit's.
pub fn alpha_init(report: &DissectionReport, concept: &str) -> Result<Vec<f32>> {
    let ious: Vec<f64> = report
        .units
        .iter()
        .map(|u| u.score(concept).map_or(0.0, |s| s.iou))
        .collect();
    let max = ious.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(GdError::ZeroBaseRate(concept.into()));
    }
    Ok(ious.into_iter().map(|v| (v / max) as f32).collect())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ItemKind {
    Present,
    Candidate,
}

struct PoolItem {
    latent: usize,
    y: usize,
    x: usize,
    kind: ItemKind,
}

/// Mean soft membership of `concept` over the footprint of `(y, x)`.
fn footprint_score(net: &NetworkSpec, r: &Tensor, y: usize, x: usize, def: &ConceptDef) -> Result<f64> {
    let crop = net.forward_from_window(r, y, y + 1, x, x + 1)?;
    let s = soft_scores(&crop, def)?;
    Ok(s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64)
}

/// Minimize `-δ + λ‖α‖₂` over `α ∈ [0,1]^d` by projected descent with
/// forward-difference gradients.
///
/// Concept-present locations contribute their partial-ablation score and
/// insertion candidates (absent, but present once every unit is set to `k`)
/// their partial-insertion score, both measured as soft concept membership on
/// the location's footprint.
pub fn optimize_alpha(
    net: &NetworkSpec,
    universe: &ConceptUniverse,
    concept: &str,
    k: &[f32],
    init: &[f32],
    cfg: &AceConfig,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    let def = universe.get(concept)?;
    let (d, fh, fw) = featuremap_hw(net)?;
    if k.len() != d || init.len() != d {
        return Err(GdError::InvalidArgument(format!("k and init must have {d} values")));
    }
    let half = cfg.pool_latents / 2;
    let mut latents: Vec<Vec<f32>> = sample_z(cfg.seed, half, net.latent_dim)
        .into_iter()
        .map(|z| z.values)
        .collect();
    latents.extend(latents.clone().into_iter().map(|z| z.into_iter().map(|v| -v).collect::<Vec<_>>()));
    let maps: Vec<Tensor> = latents
        .par_iter()
        .map(|z| net.featuremap(z))
        .collect::<Result<_>>()?;
    let everything = UnitSet::new(0..d, d)?;
    let per_latent: Vec<Vec<PoolItem>> = maps
        .par_iter()
        .enumerate()
        .map(|(li, r)| {
            let x = net.forward_from(r)?;
            let mask = segment_concept(&x, def)?;
            let mut items = Vec::new();
            for y in 0..fh {
                for xx in 0..fw {
                    let (y0, y1, x0, x1) = footprint(net, y, xx)?;
                    let kind = if mask.count_in(y0, y1, x0, x1) > 0 {
                        Some(ItemKind::Present)
                    } else {
                        let full = insert(r, &everything, &LocationSet::single(y, xx), k)?;
                        (footprint_score(net, &full, y, xx, def)? > 0.5).then_some(ItemKind::Candidate)
                    };
                    if let Some(kind) = kind {
                        items.push(PoolItem { latent: li, y, x: xx, kind });
                    }
                }
            }
            Ok(items)
        })
        .collect::<Result<_>>()?;
    let pool: Vec<PoolItem> = per_latent.into_iter().flatten().collect();
    let present: Vec<&PoolItem> = pool.iter().filter(|i| i.kind == ItemKind::Present).collect();
    let candidates: Vec<&PoolItem> = pool.iter().filter(|i| i.kind == ItemKind::Candidate).collect();
    if present.is_empty() {
        return Err(GdError::ZeroBaseRate(concept.into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA17A);
    let mut alpha: Vec<f32> = init.iter().map(|a| a.clamp(0.0, 1.0)).collect();
    let mut order: Vec<usize> = (0..d).collect();
    let blocks = d.div_ceil(cfg.fd_block.min(d));
    let mut log = Vec::with_capacity(cfg.steps);
    let h = cfg.fd_step;
    for step in 0..cfg.steps {
        if step % blocks == 0 {
            order.shuffle(&mut rng);
        }
        let bsize = cfg.fd_block.min(d);
        let block: Vec<usize> = order[(step % blocks) * bsize..((step % blocks + 1) * bsize).min(d)].to_vec();
        let n_cand = if candidates.is_empty() { 0 } else { cfg.minibatch / 2 };
        let mut batch: Vec<&PoolItem> = Vec::with_capacity(cfg.minibatch);
        for _ in 0..cfg.minibatch - n_cand {
            batch.push(present[rng.gen_range(0..present.len())]);
        }
        for _ in 0..n_cand {
            batch.push(candidates[rng.gen_range(0..candidates.len())]);
        }

        // per item: loss at α and the loss change for each block coordinate
        let rows: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|item| {
                let r = &maps[item.latent];
                let loc = LocationSet::single(item.y, item.x);
                let eval = |a: &[f32]| -> Result<f64> {
                    let (ra, ri) = partial_featuremaps(r, a, &loc, k)?;
                    Ok(match item.kind {
                        ItemKind::Present => footprint_score(net, &ra, item.y, item.x, def)?,
                        ItemKind::Candidate => -footprint_score(net, &ri, item.y, item.x, def)?,
                    })
                };
                let base = eval(&alpha)?;
                let mut grads = Vec::with_capacity(block.len());
                for &u in &block {
                    let v = r.at3(u, item.y, item.x);
                    let inert = match item.kind {
                        ItemKind::Present => v == 0.0,
                        ItemKind::Candidate => v == k[u],
                    };
                    if inert {
                        grads.push(0.0);
                        continue;
                    }
                    let mut a = alpha.clone();
                    let forward = alpha[u] + h <= 1.0;
                    a[u] = if forward { alpha[u] + h } else { alpha[u] - h };
                    let moved = eval(&a)?;
                    let g = (moved - base) / h as f64;
                    grads.push(if forward { g } else { -g });
                }
                Ok((base, grads))
            })
            .collect::<Result<_>>()?;
        let m = rows.len() as f64;
        let norm = alpha.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
        let objective = rows.iter().map(|r| r.0).sum::<f64>() / m + cfg.lambda * norm;
        if !objective.is_finite() {
            let log_lines = log.iter().enumerate().map(|(i, v)| format!("step {i}: {v}")).collect();
            return Err(GdError::Diverged { step, log: log_lines });
        }
        log.push(objective);
        for (j, &u) in block.iter().enumerate() {
            let mut g = rows.iter().map(|r| r.1[j]).sum::<f64>() / m;
            if norm > 0.0 {
                g += cfg.lambda * alpha[u] as f64 / norm;
            }
            if !g.is_finite() {
                let log_lines = log.iter().enumerate().map(|(i, v)| format!("step {i}: {v}")).collect();
                return Err(GdError::Diverged { step, log: log_lines });
            }
            alpha[u] = (alpha[u] as f64 - cfg.learning_rate * g).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(OptimizeResult {
        alpha: AlphaVector {
            concept: concept.into(),
            alpha,
            config_fingerprint: cfg.fingerprint(),
        },
        initial: init.to_vec(),
        log,
    })
}

/// Indices of the `n` largest components; ties go to the lower index.
pub fn clip_alpha_top_n(alpha: &[f32], n: usize) -> Result<UnitSet> {
    if n == 0 || n > alpha.len() {
        return Err(GdError::InvalidArgument(format!("n must be in 1..={}", alpha.len())));
    }
    let mut idx: Vec<usize> = (0..alpha.len()).collect();
    idx.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    UnitSet::new(idx.into_iter().take(n), alpha.len())
}

/// Units ordered by α, largest first; ties go to the lower index.
pub fn rank_by_alpha(alpha: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alpha.len()).collect();
    idx.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    /// Concept pixels left after ablating the first `size` ranked units
    /// everywhere, over concept pixels before.
    pub remaining: f64,
}

pub fn ablation_curve(
    net: &NetworkSpec,
    universe: &ConceptUniverse,
    concept: &str,
    ranked: &[usize],
    sizes: &[usize],
    latents: &[LatentVector],
) -> Result<Vec<CurvePoint>> {
    let def = universe.get(concept)?;
    let (d, fh, fw) = featuremap_hw(net)?;
    if let Some(s) = sizes.iter().find(|&&s| s > ranked.len()) {
        return Err(GdError::InvalidArgument(format!("prefix {s} longer than ranking")));
    }
    let all = LocationSet::full(fh, fw);
    let sets: Vec<UnitSet> = sizes
        .iter()
        .map(|&s| UnitSet::new(ranked[..s].iter().copied(), d))
        .collect::<Result<_>>()?;
    let counts: Vec<(f64, Vec<f64>)> = latents
        .par_iter()
        .map(|z| {
            let r = net.featuremap(&z.values)?;
            let before = segment_concept(&net.forward_from(&r)?, def)?.count() as f64;
            let after = sets
                .iter()
                .map(|u| {
                    if u.is_empty() {
                        return Ok(before);
                    }
                    let x = net.forward_from(&ablate(&r, u, &all)?)?;
                    Ok(segment_concept(&x, def)?.count() as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((before, after))
        })
        .collect::<Result<_>>()?;
    let before: f64 = counts.iter().map(|c| c.0).sum();
    if before == 0.0 {
        return Err(GdError::ZeroBaseRate(concept.into()));
    }
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(j, &size)| CurvePoint {
            size,
            remaining: counts.iter().map(|c| c.1[j]).sum::<f64>() / before,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextBucket {
    pub context: String,
    pub trials: usize,
    /// Mean concept pixel gain per trial, as a fraction of the image, over the
    /// concept base rate.
    pub effect: f64,
    pub mean_pixel_gain: f64,
    pub half_width: f64,
    /// Fewer than [`MIN_BUCKET_TRIALS`] trials.
    pub low_confidence: bool,
}

pub const MIN_BUCKET_TRIALS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextTable {
    pub concept: String,
    pub units: Vec<usize>,
    pub base_rate: f64,
    pub buckets: Vec<ContextBucket>,
}

impl ContextTable {
    pub fn bucket(&self, context: &str) -> Option<&ContextBucket> {
        self.buckets.iter().find(|b| b.context == context)
    }
}

/// Background concept covering most of the footprint of `(y, x)` in `image`,
/// or `"none"`.
pub fn footprint_context(
    net: &NetworkSpec,
    image: &Tensor,
    universe: &ConceptUniverse,
    contexts: &[String],
    y: usize,
    x: usize,
) -> Result<String> {
    let seg = segment(image, universe)?;
    let (y0, y1, x0, x1) = footprint(net, y, x)?;
    let mut best = ("none".to_string(), 0usize);
    for c in contexts {
        let n = seg.mask(c).map_or(0, |m| m.count_in(y0, y1, x0, x1));
        if n > best.1 {
            best = (c.clone(), n);
        }
    }
    Ok(best.0)
}

/// Single-location insertions of `units`, one per latent at a uniform
/// location, bucketed by the background concept under the footprint.
#[allow(clippy::too_many_arguments)]
pub fn insertion_context_effect(
    net: &NetworkSpec,
    universe: &ConceptUniverse,
    concept: &str,
    units: &UnitSet,
    k: &[f32],
    contexts: &[String],
    latents: &[LatentVector],
    seed: u64,
) -> Result<ContextTable> {
    let def = universe.get(concept)?;
    for c in contexts {
        universe.get(c)?;
    }
    let (_, fh, fw) = featuremap_hw(net)?;
    let locs = sample_locations(seed, latents.len(), fh, fw);
    let trials: Vec<(String, f64, f64)> = latents
        .par_iter()
        .zip(&locs)
        .map(|(z, &(y, x))| {
            let r = net.featuremap(&z.values)?;
            let x0 = net.forward_from(&r)?;
            let context = footprint_context(net, &x0, universe, contexts, y, x)?;
            let before = segment_concept(&x0, def)?.count() as f64;
            let after = if units.is_empty() {
                before
            } else {
                let xi = net.forward_from(&insert(&r, units, &LocationSet::single(y, x), k)?)?;
                segment_concept(&xi, def)?.count() as f64
            };
            Ok((context, before, after - before))
        })
        .collect::<Result<_>>()?;
    let img = net.image_shape()?;
    let pixels = (img[1] * img[2]) as f64;
    let base_rate = trials.iter().map(|t| t.1).sum::<f64>() / (trials.len().max(1) as f64 * pixels);
    if base_rate == 0.0 {
        return Err(GdError::ZeroBaseRate(concept.into()));
    }
    let mut names: Vec<String> = contexts.to_vec();
    names.push("none".into());
    let buckets = names
        .into_iter()
        .map(|c| {
            let gains: Vec<f64> = trials.iter().filter(|t| t.0 == c).map(|t| t.2).collect();
            let n = gains.len();
            let mean = if n == 0 { 0.0 } else { gains.iter().sum::<f64>() / n as f64 };
            let norm: Vec<f64> = gains.iter().map(|g| g / (pixels * base_rate)).collect();
            ContextBucket {
                context: c,
                trials: n,
                effect: mean / (pixels * base_rate),
                mean_pixel_gain: mean,
                half_width: half_width(&norm),
                low_confidence: n < MIN_BUCKET_TRIALS,
            }
        })
        .collect();
    Ok(ContextTable {
        concept: concept.into(),
        units: units.units().to_vec(),
        base_rate,
        buckets,
    })
}

/// Layers after the split whose outputs are traced: every activation, so a
/// convolution and its nonlinearity count as one block.
pub fn traced_layers(net: &NetworkSpec) -> Vec<usize> {
    (net.split_index..net.layers.len())
        .filter(|&i| matches!(net.layers[i], LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBaseline {
    /// Traced layer indices, see [`traced_layers`].
    pub layers: Vec<usize>,
    /// Mean absolute activation per channel of each layer.
    pub channel_l1: Vec<Vec<f64>>,
    /// Mean over images of the summed absolute pixel values.
    pub image_l1: f64,
}

pub fn layer_baseline(net: &NetworkSpec, latents: &[LatentVector]) -> Result<LayerBaseline> {
    if latents.is_empty() {
        return Err(GdError::InvalidArgument("baseline needs at least one latent".into()));
    }
    let layers = traced_layers(net);
    let per: Vec<(Vec<Vec<f64>>, f64)> = latents
        .par_iter()
        .map(|z| {
            let r = net.featuremap(&z.values)?;
            let (img, outs) = net.forward_from_traced(&r)?;
            let l1 = layers
                .iter()
                .map(|&i| channel_mean_abs(&outs[i - net.split_index]))
                .collect::<Result<_>>()?;
            Ok((l1, img.data().iter().map(|v| v.abs() as f64).sum()))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut channel_l1 = per[0].0.clone();
    for (l, _) in &per[1..] {
        for (acc, layer) in channel_l1.iter_mut().zip(l) {
            for (a, v) in acc.iter_mut().zip(layer) {
                *a += v;
            }
        }
    }
    for layer in &mut channel_l1 {
        for v in layer.iter_mut() {
            *v /= n;
        }
    }
    Ok(LayerBaseline {
        layers,
        channel_l1,
        image_l1: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

fn channel_mean_abs(t: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = t.chw()?;
    Ok((0..c)
        .map(|ch| t.channel(ch).iter().map(|v| v.abs() as f64).sum::<f64>() / (h * w) as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceProfile {
    pub layers: Vec<usize>,
    /// Per layer: mean over channels of the mean absolute change divided by
    /// that channel's baseline magnitude. Channels with a zero baseline are
    /// skipped.
    pub profile: Vec<f64>,
    /// Summed absolute change per site of the layer feeding the final
    /// activation.
    pub heatmap: Vec<f32>,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
    pub image_l1_change: f64,
    /// Image change exceeds [`VISIBLE_FRACTION`] of the mean image magnitude.
    pub visible: bool,
}

pub const VISIBLE_FRACTION: f64 = 0.002;

/// Per-layer change caused by `intervention` on the featuremap of `z`.
pub fn trace_downstream(
    net: &NetworkSpec,
    z: &[f32],
    intervention: Option<&InterventionSpec>,
    baseline: &LayerBaseline,
) -> Result<TraceProfile> {
    let r = net.featuremap(z)?;
    let r2 = match intervention {
        Some(i) => i.apply(&r)?,
        None => r.clone(),
    };
    trace_featuremaps(net, &r, &r2, baseline)
}

/// Layer profile of the change from featuremap `before` to `after`.
pub fn trace_featuremaps(net: &NetworkSpec, before: &Tensor, after: &Tensor, baseline: &LayerBaseline) -> Result<TraceProfile> {
    let (img0, outs0) = net.forward_from_traced(before)?;
    let (img1, outs1) = net.forward_from_traced(after)?;
    if baseline.layers != traced_layers(net) || outs0.len() < 2 {
        return Err(GdError::InvalidArgument("baseline was computed for another network".into()));
    }
    let mut profile = Vec::with_capacity(baseline.layers.len());
    for (&i, base) in baseline.layers.iter().zip(&baseline.channel_l1) {
        let (a, b) = (&outs0[i - net.split_index], &outs1[i - net.split_index]);
        let (c, h, w) = a.chw()?;
        if base.len() != c {
            return Err(GdError::InvalidArgument("baseline was computed for another network".into()));
        }
        let mut acc = 0.0;
        let mut used = 0usize;
        for ch in 0..c {
            if base[ch] <= 0.0 {
                continue;
            }
            let change: f64 = a
                .channel(ch)
                .iter()
                .zip(b.channel(ch))
                .map(|(x, y)| (x - y).abs() as f64)
                .sum::<f64>()
                / (h * w) as f64;
            acc += change / base[ch];
            used += 1;
        }
        profile.push(if used == 0 { 0.0 } else { acc / used as f64 });
    }
    let last = outs0.len().saturating_sub(2);
    let (c, hh, hw) = outs0[last].chw()?;
    let mut heatmap = vec![0.0f32; hh * hw];
    for ch in 0..c {
        for (i, (x, y)) in outs0[last].channel(ch).iter().zip(outs1[last].channel(ch)).enumerate() {
            heatmap[i] += (x - y).abs();
        }
    }
    let image_l1_change: f64 = img0
        .data()
        .iter()
        .zip(img1.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok(TraceProfile {
        layers: baseline.layers.clone(),
        profile,
        heatmap,
        heatmap_height: hh,
        heatmap_width: hw,
        image_l1_change,
        visible: image_l1_change > VISIBLE_FRACTION * baseline.image_l1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm() -> Tensor {
        Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f32 - 4.0).collect()).unwrap()
    }

    #[test]
    fn empty_unit_set_is_identity() {
        let r = fm();
        let p = LocationSet::full(2, 2);
        assert_eq!(ablate(&r, &UnitSet::empty(), &p).unwrap(), r);
        assert_eq!(insert(&r, &UnitSet::empty(), &p, &[1.0; 3]).unwrap(), r);
    }

    #[test]
    fn ablate_everything_gives_zeros() {
        let r = fm();
        let out = ablate(&r, &UnitSet::new(0..3, 3).unwrap(), &LocationSet::full(2, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn insert_then_ablate_equals_ablate() {
        let r = fm();
        let u = UnitSet::new([0, 2], 3).unwrap();
        let p = LocationSet::single(1, 0);
        let a = ablate(&insert(&r, &u, &p, &[7.0, 8.0, 9.0]).unwrap(), &u, &p).unwrap();
        assert_eq!(a, ablate(&r, &u, &p).unwrap());
    }

    #[test]
    fn binary_alpha_matches_ablate_and_insert() {
        let r = fm();
        let k = [0.5, -1.5, 2.5];
        let p = LocationSet::single(0, 1);
        let (ra, ri) = partial_featuremaps(&r, &[1.0, 0.0, 1.0], &p, &k).unwrap();
        let u = UnitSet::new([0, 2], 3).unwrap();
        assert_eq!(ra, ablate(&r, &u, &p).unwrap());
        assert_eq!(ri, insert(&r, &u, &p, &k).unwrap());
        let (ra, ri) = partial_featuremaps(&r, &[0.0; 3], &p, &k).unwrap();
        assert_eq!((ra, ri), (r.clone(), r));
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let r = fm();
        assert!(partial_featuremaps(&r, &[1.5, 0.0, 0.0], &LocationSet::single(0, 0), &[0.0; 3]).is_err());
    }

    #[test]
    fn top_n_ties_go_to_lower_index() {
        let a = [0.9, 0.9, 0.1, 0.9];
        assert_eq!(clip_alpha_top_n(&a, 2).unwrap().units(), &[0, 1]);
        assert_eq!(clip_alpha_top_n(&a, 4).unwrap().len(), 4);
        let one_hot = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(clip_alpha_top_n(&one_hot, 1).unwrap().units(), &[2]);
        assert!(clip_alpha_top_n(&a, 0).is_err());
    }

    #[test]
    fn unit_set_rejects_out_of_range() {
        assert!(UnitSet::new([64], 64).is_err());
        assert_eq!(UnitSet::new([3, 1, 3], 4).unwrap().units(), &[1, 3]);
    }

    #[test]
    fn k_for_constant_unit_covering_concept() {
        let s = LayerSample {
            layer: 0,
            units: 1,
            cells: 2,
            cell_pixels: 4,
            concepts: vec!["c".into()],
            images: 2,
            acts: vec![1.5; 4],
            counts: vec![4, 4, 4, 4],
            presence: vec![2],
        };
        assert_eq!(k_from_sample(&s, "c").unwrap().k, vec![1.5]);
        let absent = LayerSample { counts: vec![0; 4], ..s };
        assert!(matches!(k_from_sample(&absent, "c"), Err(GdError::ZeroBaseRate(_))));
    }

    #[test]
    fn alpha_json_round_trip() {
        let a = AlphaVector {
            concept: "door".into(),
            alpha: vec![0.0, 0.125, 1.0, 0.3],
            config_fingerprint: AceConfig::default().fingerprint(),
        };
        assert_eq!(AlphaVector::from_json(&a.to_json().unwrap()).unwrap(), a);
    }
}
