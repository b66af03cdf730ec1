//! Synthetic generators with planted causal units.
//!
//! The featuremap `r` is `d` channels at `image_size / 8` resolution. Each
//! planted concept owns a unit set; the concept's shape is drawn in the
//! 8x8 image block of featuremap location `p` when the mean normalized
//! activation of its units at `p` exceeds a gate level. `z` decides which
//! locations gate on. Scene grammar:
//!
//! * `sky` fills whole featuremap rows from the top, `ground` whole rows from
//!   the bottom, `building` is whatever is left.
//! * `door` (6x4 rectangle) only renders on building: sky or ground in the
//!   same row within one column, or a tree at the location, vetoes it.
//! * `tree` (6x6 disc) renders on building or ground but not under sky.
//! * artifact units whiten their block and add a checker ringing at the
//!   block edges.
//!
//! Non-planted "texture" units are sparse and only perturb color.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GdError, Result};
use crate::network::{LayerSpec, NetworkSpec};
use crate::segment::{ConceptDef, ConceptUniverse, Shape};
use crate::tensor::Tensor;

/// Pixels per featuremap location along each axis.
pub const BLOCK: usize = 8;

/// Layer index of the split (first layer of `f`).
pub const SPLIT_INDEX: usize = 4;
const L_GATE: usize = 5;
const L_RENDER: usize = 10;
const L_COLOR: usize = 14;

/// Normalized-mean gate: a concept starts to appear at `GATE` and is fully on
/// at `GATE + GATE_WIDTH`.
const GATE: f32 = 0.3;
const GATE_WIDTH: f32 = 0.1;
const VETO: f32 = 200.0;
const ANCHOR_LEVEL: f32 = 3.0;
const SUPPRESS: f32 = 4.0;

const DOOR_OFFSET: f32 = 2.0;
const TREE_OFFSET: f32 = 2.25;
const ARTIFACT_OFFSET: f32 = 2.35;
const TEXTURE_OFFSET: f32 = 2.0;
const UNIT_NOISE: f32 = 0.05;
const SKY_OFFSET: f32 = 0.3;
const SKY_ROW_DROP: f32 = 0.35;
const GROUND_GAIN: f32 = 0.5;
const GROUND_SPREAD: f32 = 1.5;
/// Horizon position as a fraction of the featuremap height.
const GROUND_HORIZON: f32 = 0.69;

const DOOR_EDGE_GAIN: f32 = 10.0;
const TREE_SIGMA: f32 = 2.0;
const TREE_LEVEL: f32 = 0.7;
const TREE_EDGE_GAIN: f32 = 50.0;
const JITTER_SCALE: f32 = 0.05;

pub const SKY_RGB: [f32; 3] = [0.35, 0.6, 0.95];
pub const BUILDING_RGB: [f32; 3] = [0.75, 0.45, 0.35];
pub const GROUND_RGB: [f32; 3] = [0.55, 0.5, 0.25];
pub const TREE_RGB: [f32; 3] = [0.15, 0.55, 0.2];
pub const DOOR_RGB: [f32; 3] = [0.45, 0.15, 0.55];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channels `d` of the split featuremap.
    pub channels: usize,
    /// Square output size in pixels; the featuremap is `image_size / 8`.
    pub image_size: usize,
    pub door_units: usize,
    pub tree_units: usize,
    pub sky_units: usize,
    /// Units carrying the ground context.
    pub ground_units: usize,
    pub artifact_units: usize,
    /// Constant units that fix the per-location normalization scale.
    pub anchor_units: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            channels: 64,
            image_size: 64,
            door_units: 8,
            tree_units: 8,
            sky_units: 8,
            ground_units: 4,
            artifact_units: 4,
            anchor_units: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn featuremap_size(&self) -> usize {
        self.image_size / BLOCK
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GdError::InvalidArgument(m));
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return bad(format!("image size {} must be a power of two >= 16", self.image_size));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        for (name, n) in [
            ("door", self.door_units),
            ("tree", self.tree_units),
            ("sky", self.sky_units),
            ("ground", self.ground_units),
            ("anchor", self.anchor_units),
        ] {
            if n == 0 {
                return bad(format!("{name} needs at least one unit"));
            }
        }
        let used = self.door_units
            + self.tree_units
            + self.sky_units
            + self.ground_units
            + self.artifact_units
            + self.anchor_units;
        if used > self.channels {
            return bad(format!(
                "{used} planted units do not fit in {} channels",
                self.channels
            ));
        }
        Ok(())
    }
}

/// Gains of the artifact rendering. `flat` whitens the block, `checker`
/// scales the edge ringing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePattern {
    pub flat_gain: f32,
    pub checker_gain: f32,
}

impl Default for NoisePattern {
    fn default() -> Self {
        Self {
            flat_gain: 1.5,
            checker_gain: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConcept {
    pub name: String,
    pub shape: Shape,
    pub color: [f32; 3],
    pub units: Vec<usize>,
    /// Raw mean activation of `units` at which the concept starts to render,
    /// for a location whose only other activity is the anchors.
    pub gate_level: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub latent_dim: usize,
    pub channels: usize,
    pub featuremap_size: usize,
    pub image_size: usize,
    pub concepts: Vec<PlantedConcept>,
    /// Background concepts; `building` has no units of its own.
    pub contexts: Vec<PlantedConcept>,
    pub artifact_units: Vec<usize>,
    pub noise_pattern: NoisePattern,
    pub anchor_units: Vec<usize>,
    /// Units with no planted role.
    pub texture_units: Vec<usize>,
}

impl PlantedTruth {
    pub fn concept(&self, name: &str) -> Result<&PlantedConcept> {
        self.concepts
            .iter()
            .chain(&self.contexts)
            .find(|c| c.name == name)
            .ok_or_else(|| GdError::UnknownConcept(name.into()))
    }

    /// Every unit that has some planted role.
    pub fn planted_units(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .concepts
            .iter()
            .chain(&self.contexts)
            .flat_map(|c| c.units.iter().copied())
            .chain(self.artifact_units.iter().copied())
            .chain(self.anchor_units.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }

    /// Concept universe understood by the oracle segmenter for these scenes.
    pub fn universe(&self) -> ConceptUniverse {
        default_universe()
    }
}

pub fn default_universe() -> ConceptUniverse {
    let def = |name: &str, lo: f32, hi: f32, shape| ConceptDef {
        name: name.into(),
        hue_range: [lo, hi],
        shape,
    };
    ConceptUniverse::new(
        vec![
            def("door", 260.0, 310.0, Shape::Rect),
            def("tree", 100.0, 160.0, Shape::Disc),
            def("sky", 190.0, 240.0, Shape::Stripe),
            def("building", 350.0, 30.0, Shape::Region),
            def("ground", 38.0, 70.0, Shape::Region),
        ],
        false,
    )
    .expect("static universe is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f32>,
    pub seed: u64,
    /// Position in the seeded stream.
    pub index: usize,
}

/// `count` standard-normal latents of length `latent_dim` from one seeded stream.
pub fn sample_z(seed: u64, count: usize, latent_dim: usize) -> Vec<LatentVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|index| LatentVector {
            values: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            seed,
            index,
        })
        .collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * scale).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let v = gaussian_vec(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
    v.into_iter().map(|x| x / norm).collect()
}

fn pre_tanh(rgb: [f32; 3]) -> [f32; 3] {
    rgb.map(|c| (2.0 * c - 1.0).atanh())
}

struct Groups {
    door: Vec<usize>,
    tree: Vec<usize>,
    sky: Vec<usize>,
    ground: Vec<usize>,
    artifact: Vec<usize>,
    anchor: Vec<usize>,
    texture: Vec<usize>,
}

fn assign_units(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Groups {
    let mut order: Vec<usize> = (0..cfg.channels).collect();
    order.shuffle(rng);
    let mut it = order.into_iter();
    let mut take = |n: usize| {
        let mut v: Vec<usize> = it.by_ref().take(n).collect();
        v.sort_unstable();
        v
    };
    let door = take(cfg.door_units);
    let tree = take(cfg.tree_units);
    let sky = take(cfg.sky_units);
    let ground = take(cfg.ground_units);
    let artifact = take(cfg.artifact_units);
    let anchor = take(cfg.anchor_units);
    let texture = take(cfg.channels);
    Groups {
        door,
        tree,
        sky,
        ground,
        artifact,
        anchor,
        texture,
    }
}

/// Build a planted generator. `(config, seed)` fully determines the weights.
pub fn build_planted_generator(config: &GeneratorConfig, seed: u64) -> Result<(NetworkSpec, PlantedTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = assign_units(config, &mut rng);
    let d = config.channels;
    let fm = config.featuremap_size();
    let ff = fm * fm;
    let l = config.latent_dim;

    // h, stage 1: dense pre-activations.
    let mut w = vec![0.0f32; d * ff * l];
    let mut b = vec![0.0f32; d * ff];
    let noise_scale = 1.0 / (l as f32).sqrt();
    let sparse_dirs = |rng: &mut ChaCha8Rng| (0..ff).map(|_| unit_vec(rng, l)).collect::<Vec<_>>();
    let door_dirs = sparse_dirs(&mut rng);
    let tree_dirs = sparse_dirs(&mut rng);
    let art_dirs = sparse_dirs(&mut rng);
    let sky_dir = unit_vec(&mut rng, l);
    let ground_dir = unit_vec(&mut rng, l);
    let horizon = GROUND_HORIZON * fm as f32;
    let row_drop = SKY_ROW_DROP * 8.0 / fm as f32;
    let mut set_row = |o: usize, weights: &[f32], bias: f32| {
        w[o * l..(o + 1) * l].copy_from_slice(weights);
        b[o] = bias;
    };
    for u in 0..d {
        let gamma: f32 = rng.gen_range(0.9..1.1);
        for p in 0..ff {
            let o = u * ff + p;
            let row = (p / fm) as f32;
            let mixed = |rng: &mut ChaCha8Rng, dir: &[f32]| -> Vec<f32> {
                let n = gaussian_vec(rng, l, noise_scale);
                dir.iter().zip(n).map(|(a, e)| gamma * a + UNIT_NOISE * e).collect()
            };
            if g.door.contains(&u) {
                let wr = mixed(&mut rng, &door_dirs[p]);
                set_row(o, &wr, -gamma * DOOR_OFFSET);
            } else if g.tree.contains(&u) {
                let wr = mixed(&mut rng, &tree_dirs[p]);
                set_row(o, &wr, -gamma * TREE_OFFSET);
            } else if g.artifact.contains(&u) {
                let wr = mixed(&mut rng, &art_dirs[p]);
                set_row(o, &wr, -gamma * ARTIFACT_OFFSET);
            } else if g.sky.contains(&u) {
                let wr: Vec<f32> = sky_dir.iter().map(|a| gamma * a).collect();
                set_row(o, &wr, -gamma * (SKY_OFFSET + row_drop * row));
            } else if g.ground.contains(&u) {
                let k = gamma * GROUND_GAIN;
                let wr: Vec<f32> = ground_dir.iter().map(|a| k * GROUND_SPREAD * a).collect();
                set_row(o, &wr, k * (row + 0.5 - horizon));
            } else if g.anchor.contains(&u) {
                set_row(o, &vec![0.0; l], ANCHOR_LEVEL);
            } else {
                let wr = gaussian_vec(&mut rng, l, noise_scale);
                set_row(o, &wr, -TEXTURE_OFFSET);
            }
        }
    }

    // h, stage 2: doors and trees stay silent where their context vetoes them.
    let mut supp = identity_1x1(d);
    let mut inhibit = |target: &[usize], source: &[usize]| {
        for &t in target {
            for &s in source {
                supp[t * d + s] -= SUPPRESS / source.len() as f32;
            }
        }
    };
    inhibit(&g.door, &g.sky);
    inhibit(&g.door, &g.ground);
    inhibit(&g.door, &g.tree);
    inhibit(&g.tree, &g.sky);

    let jitter: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            g.texture
                .iter()
                .map(|_| rng.gen_range(-JITTER_SCALE..JITTER_SCALE))
                .collect()
        })
        .collect();

    let layers = vec![
        LayerSpec::Dense {
            weight: Tensor::new(vec![d * ff, l], w)?,
            bias: b,
            out_shape: [d, fm, fm],
        },
        LayerSpec::LeakyRelu { slope: 0.0 },
        LayerSpec::Conv2d {
            kernel: Tensor::new(vec![d, d, 1, 1], supp)?,
            bias: vec![0.0; d],
            stride: 1,
            padding: 0,
        },
        LayerSpec::LeakyRelu { slope: 0.0 },
        // f starts here
        LayerSpec::PixelNorm,
        gate_layer(d, &g, &jitter, &g.artifact)?,
        LayerSpec::LeakyRelu { slope: 0.0 },
        combine_layer()?,
        LayerSpec::LeakyRelu { slope: 0.0 },
        LayerSpec::UpsampleNearest { factor: BLOCK },
        render_layer()?,
        LayerSpec::LeakyRelu { slope: 0.0 },
        edge_layer()?,
        LayerSpec::LeakyRelu { slope: 0.0 },
        color_layer(NoisePattern::default())?,
        LayerSpec::Tanh,
    ];
    let net = NetworkSpec::new(layers, SPLIT_INDEX, l)?;

    let rho0 = (g.anchor.len() as f32 * ANCHOR_LEVEL * ANCHOR_LEVEL / d as f32).sqrt();
    let gate_level = GATE * rho0;
    let planted = |name: &str, shape, color, units: &[usize]| PlantedConcept {
        name: name.into(),
        shape,
        color,
        units: units.to_vec(),
        gate_level,
    };
    let truth = PlantedTruth {
        latent_dim: l,
        channels: d,
        featuremap_size: fm,
        image_size: config.image_size,
        concepts: vec![
            planted("door", Shape::Rect, DOOR_RGB, &g.door),
            planted("tree", Shape::Disc, TREE_RGB, &g.tree),
            planted("sky", Shape::Stripe, SKY_RGB, &g.sky),
        ],
        contexts: vec![
            planted("building", Shape::Region, BUILDING_RGB, &[]),
            planted("ground", Shape::Region, GROUND_RGB, &g.ground),
        ],
        artifact_units: g.artifact,
        noise_pattern: NoisePattern::default(),
        anchor_units: g.anchor,
        texture_units: g.texture,
    };
    Ok((net, truth))
}

fn identity_1x1(n: usize) -> Vec<f32> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
    }
    k
}

// Gate layer channels: (a, a-1) pairs whose relu difference is the clamped
// indicator, then three color-jitter channels.
const G_SKY: usize = 0;
const G_TREE: usize = 2;
const G_GROUND: usize = 4;
const G_ART: usize = 6;
const G_DOOR: usize = 8;
const G_JITTER: usize = 10;
const G_CHANNELS: usize = 13;

fn gate_layer(d: usize, g: &Groups, jitter: &[Vec<f32>], artifact: &[usize]) -> Result<LayerSpec> {
    let mut k = vec![0.0f32; G_CHANNELS * d * 9];
    let idx = |o: usize, i: usize, kx: usize| ((o * d + i) * 3 + 1) * 3 + kx;
    let mut bias = vec![0.0f32; G_CHANNELS];
    let mut gate = |k: &mut Vec<f32>, ch: usize, units: &[usize]| {
        for pair in 0..2 {
            for &u in units {
                k[idx(ch + pair, u, 1)] += 1.0 / (units.len() as f32 * GATE_WIDTH);
            }
            bias[ch + pair] = -GATE / GATE_WIDTH - pair as f32;
        }
    };
    gate(&mut k, G_SKY, &g.sky);
    gate(&mut k, G_TREE, &g.tree);
    gate(&mut k, G_GROUND, &g.ground);
    gate(&mut k, G_ART, artifact);
    gate(&mut k, G_DOOR, &g.door);
    for pair in 0..2 {
        for &u in &g.sky {
            k[idx(G_TREE + pair, u, 1)] -= VETO / g.sky.len() as f32;
        }
        for kx in 0..3 {
            for (units, n) in [(&g.sky, g.sky.len()), (&g.ground, g.ground.len())] {
                for &u in units {
                    k[idx(G_DOOR + pair, u, kx)] -= VETO / n as f32;
                }
            }
        }
        for &u in &g.tree {
            k[idx(G_DOOR + pair, u, 1)] -= VETO / g.tree.len() as f32;
        }
    }
    for (c, weights) in jitter.iter().enumerate() {
        for (&u, &wv) in g.texture.iter().zip(weights) {
            k[idx(G_JITTER + c, u, 1)] = wv;
        }
        bias[G_JITTER + c] = 1.0;
    }
    Ok(LayerSpec::Conv2d {
        kernel: Tensor::new(vec![G_CHANNELS, d, 3, 3], k)?,
        bias,
        stride: 1,
        padding: 1,
    })
}

// Combine layer channels.
const C_SKY: usize = 0;
const C_TREE: usize = 1;
const C_GROUND_LO: usize = 2;
const C_GROUND_HI: usize = 3;
const C_DOOR: usize = 4;
const C_ART: usize = 5;
const C_JITTER: usize = 6;
const C_CHANNELS: usize = 9;

fn combine_layer() -> Result<LayerSpec> {
    let mut k = vec![0.0f32; C_CHANNELS * G_CHANNELS];
    let mut bias = vec![0.0f32; C_CHANNELS];
    let ind = |k: &mut Vec<f32>, o: usize, gch: usize, s: f32| {
        k[o * G_CHANNELS + gch] += s;
        k[o * G_CHANNELS + gch + 1] -= s;
    };
    ind(&mut k, C_SKY, G_SKY, 1.0);
    ind(&mut k, C_TREE, G_TREE, 1.0);
    for o in [C_GROUND_LO, C_GROUND_HI] {
        ind(&mut k, o, G_GROUND, 1.0);
        ind(&mut k, o, G_TREE, 1.0);
        ind(&mut k, o, G_SKY, -1.0);
    }
    bias[C_GROUND_HI] = -1.0;
    ind(&mut k, C_DOOR, G_DOOR, 1.0);
    ind(&mut k, C_ART, G_ART, 1.0);
    for c in 0..3 {
        k[(C_JITTER + c) * G_CHANNELS + G_JITTER + c] = 1.0;
    }
    Ok(LayerSpec::Conv2d {
        kernel: Tensor::new(vec![C_CHANNELS, G_CHANNELS, 1, 1], k)?,
        bias,
        stride: 1,
        padding: 0,
    })
}

// Render layer channels (pixel resolution).
const R_DOOR_C: usize = 0;
const R_DOOR_E: usize = 1;
const R_TREE_C: usize = 2;
const R_TREE_E: usize = 3;
const R_SKY: usize = 4;
const R_GROUND: usize = 5;
const R_Q_POS: usize = 6;
const R_Q_NEG: usize = 7;
const R_ART: usize = 8;
const R_JITTER: usize = 9;
const R_CHANNELS: usize = 12;
const RK: usize = 7;
const RC: usize = RK / 2;

fn render_layer() -> Result<LayerSpec> {
    let mut k = vec![0.0f32; R_CHANNELS * C_CHANNELS * RK * RK];
    let idx = |o: usize, i: usize, ky: usize, kx: usize| ((o * C_CHANNELS + i) * RK + ky) * RK + kx;
    let center = |k: &mut Vec<f32>, o: usize, i: usize, v: f32| k[idx(o, i, RC, RC)] += v;

    center(&mut k, R_DOOR_C, C_DOOR, 1.0);
    // door edge: positive unless the 3x5 neighbourhood is fully covered
    center(&mut k, R_DOOR_E, C_DOOR, 1.0);
    for ky in RC - 1..=RC + 1 {
        for kx in RC - 2..=RC + 2 {
            k[idx(R_DOOR_E, C_DOOR, ky, kx)] -= 1.0 / 15.0;
        }
    }
    center(&mut k, R_TREE_C, C_TREE, 1.0);
    // tree edge: positive where the blurred block falls below TREE_LEVEL
    let mut gauss = [0.0f32; RK * RK];
    for ky in 0..RK {
        for kx in 0..RK {
            let (dy, dx) = (ky as f32 - RC as f32, kx as f32 - RC as f32);
            gauss[ky * RK + kx] = (-(dy * dy + dx * dx) / (2.0 * TREE_SIGMA * TREE_SIGMA)).exp();
        }
    }
    let total: f32 = gauss.iter().sum();
    for ky in 0..RK {
        for kx in 0..RK {
            k[idx(R_TREE_E, C_TREE, ky, kx)] -= gauss[ky * RK + kx] / total;
        }
    }
    center(&mut k, R_TREE_E, C_TREE, TREE_LEVEL);
    center(&mut k, R_SKY, C_SKY, 1.0);
    center(&mut k, R_GROUND, C_GROUND_LO, 1.0);
    center(&mut k, R_GROUND, C_GROUND_HI, -1.0);
    for ky in 0..RK {
        for kx in 0..RK {
            let s = if (ky + kx) % 2 == 0 { 1.0 } else { -1.0 };
            k[idx(R_Q_POS, C_ART, ky, kx)] = s;
            k[idx(R_Q_NEG, C_ART, ky, kx)] = -s;
        }
    }
    center(&mut k, R_ART, C_ART, 1.0);
    for c in 0..3 {
        center(&mut k, R_JITTER + c, C_JITTER + c, 1.0);
    }
    Ok(LayerSpec::Conv2d {
        kernel: Tensor::new(vec![R_CHANNELS, C_CHANNELS, RK, RK], k)?,
        bias: vec![0.0; R_CHANNELS],
        stride: 1,
        padding: RC,
    })
}

// Edge layer channels.
const E_DOOR: usize = 0;
const E_TREE: usize = 1;
const E_SKY: usize = 2;
const E_GROUND: usize = 3;
const E_Q_POS: usize = 4;
const E_Q_NEG: usize = 5;
const E_ART: usize = 6;
const E_JITTER: usize = 7;
const E_CHANNELS: usize = 10;

fn edge_layer() -> Result<LayerSpec> {
    let mut k = vec![0.0f32; E_CHANNELS * R_CHANNELS];
    let mut set = |o: usize, i: usize, v: f32| k[o * R_CHANNELS + i] = v;
    set(E_DOOR, R_DOOR_C, 1.0);
    set(E_DOOR, R_DOOR_E, -DOOR_EDGE_GAIN);
    set(E_TREE, R_TREE_C, 1.0);
    set(E_TREE, R_TREE_E, -TREE_EDGE_GAIN);
    set(E_SKY, R_SKY, 1.0);
    set(E_GROUND, R_GROUND, 1.0);
    set(E_Q_POS, R_Q_POS, 1.0);
    set(E_Q_NEG, R_Q_NEG, 1.0);
    set(E_ART, R_ART, 1.0);
    for c in 0..3 {
        set(E_JITTER + c, R_JITTER + c, 1.0);
    }
    Ok(LayerSpec::Conv2d {
        kernel: Tensor::new(vec![E_CHANNELS, R_CHANNELS, 1, 1], k)?,
        bias: vec![0.0; E_CHANNELS],
        stride: 1,
        padding: 0,
    })
}

fn color_layer(noise: NoisePattern) -> Result<LayerSpec> {
    let (pb, pd, pt, ps, pg) = (
        pre_tanh(BUILDING_RGB),
        pre_tanh(DOOR_RGB),
        pre_tanh(TREE_RGB),
        pre_tanh(SKY_RGB),
        pre_tanh(GROUND_RGB),
    );
    let mut k = vec![0.0f32; 3 * E_CHANNELS];
    let mut bias = vec![0.0f32; 3];
    for c in 0..3 {
        let row = &mut k[c * E_CHANNELS..(c + 1) * E_CHANNELS];
        row[E_DOOR] = pd[c] - pb[c];
        row[E_TREE] = pt[c] - pg[c];
        row[E_SKY] = ps[c] - pb[c];
        row[E_GROUND] = pg[c] - pb[c];
        row[E_Q_POS] = noise.checker_gain;
        row[E_Q_NEG] = -noise.checker_gain;
        row[E_ART] = noise.flat_gain;
        row[E_JITTER + c] = 1.0;
        bias[c] = pb[c] - 1.0;
    }
    Ok(LayerSpec::Conv2d {
        kernel: Tensor::new(vec![3, E_CHANNELS, 1, 1], k)?,
        bias,
        stride: 1,
        padding: 0,
    })
}

/// Reroute the artifact pathway so that `unit_indices` drive it with the
/// given pattern. Previous artifact units lose their downstream effect but
/// keep their activations in `r`.
pub fn plant_artifact_units(
    net: &NetworkSpec,
    truth: &mut PlantedTruth,
    unit_indices: &[usize],
    noise_pattern: NoisePattern,
) -> Result<NetworkSpec> {
    let mut units = unit_indices.to_vec();
    units.sort_unstable();
    units.dedup();
    if units.is_empty() || units.len() != unit_indices.len() {
        return Err(GdError::InvalidArgument(
            "artifact units must be a non-empty set without duplicates".into(),
        ));
    }
    let taken: Vec<usize> = truth
        .concepts
        .iter()
        .chain(&truth.contexts)
        .flat_map(|c| c.units.iter().copied())
        .chain(truth.anchor_units.iter().copied())
        .collect();
    if let Some(u) = units.iter().find(|u| **u >= truth.channels || taken.contains(u)) {
        return Err(GdError::InvalidArgument(format!(
            "unit {u} is out of range or already planted for a concept"
        )));
    }
    let d = truth.channels;
    let mut layers = net.layers.clone();
    let LayerSpec::Conv2d { kernel, .. } = &mut layers[L_GATE] else {
        return Err(GdError::InvalidArgument("not a planted generator".into()));
    };
    if kernel.shape() != [G_CHANNELS, d, 3, 3] {
        return Err(GdError::InvalidArgument("not a planted generator".into()));
    }
    let kd = kernel.data_mut();
    for pair in 0..2 {
        let o = G_ART + pair;
        for i in 0..d * 9 {
            kd[o * d * 9 + i] = 0.0;
        }
        for &u in &units {
            kd[((o * d + u) * 3 + 1) * 3 + 1] = 1.0 / (units.len() as f32 * GATE_WIDTH);
        }
    }
    layers[L_COLOR] = color_layer(noise_pattern)?;
    debug_assert!(matches!(layers[L_RENDER], LayerSpec::Conv2d { .. }));
    let out = NetworkSpec::new(layers, net.split_index, net.latent_dim)?;
    truth.texture_units.retain(|u| !units.contains(u));
    truth.texture_units.extend(truth.artifact_units.iter().filter(|u| !units.contains(u)));
    truth.texture_units.sort_unstable();
    truth.artifact_units = units;
    truth.noise_pattern = noise_pattern;
    Ok(out)
}

/// The same generator with the artifact pathway rendering nothing. Its
/// samples serve as the "real" distribution for Frechet distances.
pub fn artifact_free(net: &NetworkSpec, truth: &PlantedTruth) -> Result<NetworkSpec> {
    if truth.artifact_units.is_empty() {
        return Ok(net.clone());
    }
    let mut t = truth.clone();
    plant_artifact_units(
        net,
        &mut t,
        &truth.artifact_units,
        NoisePattern {
            flat_gain: 0.0,
            checker_gain: 0.0,
        },
    )
}

/// Energy of the high-pass residual of image luminance: mean squared
/// difference between each pixel and its 3x3 neighbourhood mean (edges
/// replicated).
pub fn blotch_energy(image: &Tensor) -> Result<f64> {
    let (c, h, w) = image.chw()?;
    let lum: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| image.channel(ch)[i] as f64).sum::<f64>() / c as f64)
        .collect();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        lum[y * w + x]
    };
    let mut e = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    m += at(y + dy, x + dx);
                }
            }
            let r = at(y, x) - m / 9.0;
            e += r * r;
        }
    }
    Ok(e / (h * w) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::segment;

    fn planted() -> (NetworkSpec, PlantedTruth) {
        build_planted_generator(&GeneratorConfig::default(), 1).unwrap()
    }

    #[test]
    fn sample_z_is_seeded() {
        let a = sample_z(5, 3, 32);
        assert_eq!(a, sample_z(5, 3, 32));
        assert_ne!(a[0].values, sample_z(6, 1, 32)[0].values);
    }

    #[test]
    fn sample_z_component_means_are_near_zero() {
        let zs = sample_z(11, 10_000, 32);
        for c in 0..32 {
            let m: f64 = zs.iter().map(|z| z.values[c] as f64).sum::<f64>() / zs.len() as f64;
            assert!(m.abs() < 0.05, "component {c} mean {m}");
        }
    }

    #[test]
    fn weights_are_determined_by_seed() {
        let cfg = GeneratorConfig::default();
        assert_eq!(build_planted_generator(&cfg, 3).unwrap(), build_planted_generator(&cfg, 3).unwrap());
        assert_ne!(build_planted_generator(&cfg, 3).unwrap().0, build_planted_generator(&cfg, 4).unwrap().0);
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = GeneratorConfig {
            door_units: 40,
            tree_units: 20,
            ..GeneratorConfig::default()
        };
        assert!(build_planted_generator(&cfg, 0).is_err());
        let cfg = GeneratorConfig {
            image_size: 48,
            ..GeneratorConfig::default()
        };
        assert!(build_planted_generator(&cfg, 0).is_err());
    }

    #[test]
    fn unit_groups_are_disjoint_and_cover_all_channels() {
        let (_, t) = planted();
        let mut all = t.planted_units();
        all.extend(&t.texture_units);
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    fn render_single(net: &NetworkSpec, truth: &PlantedTruth, concept: &str, py: usize, px: usize) -> Tensor {
        let fm = truth.featuremap_size;
        let mut r = Tensor::zeros(&[truth.channels, fm, fm]);
        for y in 0..fm {
            for x in 0..fm {
                for &u in &truth.anchor_units {
                    r.set3(u, y, x, ANCHOR_LEVEL);
                }
            }
        }
        for &u in &truth.concept(concept).unwrap().units {
            r.set3(u, py, px, 1.0);
        }
        net.forward_from(&r).unwrap()
    }

    #[test]
    fn door_renders_as_six_by_four_rectangle() {
        let (net, truth) = planted();
        let img = render_single(&net, &truth, "door", 3, 4);
        let seg = segment(&img, &default_universe()).unwrap();
        let door = seg.mask("door").unwrap();
        assert_eq!(door.count(), 24);
        assert_eq!(door.count_in(25, 31, 34, 38), 24);
        assert_eq!(seg.count("tree"), 0);
    }

    #[test]
    fn tree_renders_as_disc() {
        let (net, truth) = planted();
        let img = render_single(&net, &truth, "tree", 5, 2);
        let seg = segment(&img, &default_universe()).unwrap();
        let tree = seg.mask("tree").unwrap();
        assert!(tree.count() >= 24, "{}", tree.count());
        assert_eq!(tree.count_in(40, 48, 16, 24), tree.count());
        assert_eq!(seg.count("door"), 0);
    }

    #[test]
    fn plain_background_is_building() {
        let (net, truth) = planted();
        let fm = truth.featuremap_size;
        let mut r = Tensor::zeros(&[truth.channels, fm, fm]);
        for &u in &truth.anchor_units {
            for i in 0..fm * fm {
                r.data_mut()[u * fm * fm + i] = ANCHOR_LEVEL;
            }
        }
        let img = net.forward_from(&r).unwrap();
        let seg = segment(&img, &default_universe()).unwrap();
        assert_eq!(seg.count("building"), 64 * 64);
    }

    #[test]
    fn artifact_overlap_with_concepts_is_rejected() {
        let (net, mut truth) = planted();
        let door0 = truth.concepts[0].units[0];
        assert!(plant_artifact_units(&net, &mut truth, &[door0], NoisePattern::default()).is_err());
        let tex = truth.texture_units[..2].to_vec();
        let net2 = plant_artifact_units(&net, &mut truth, &tex, NoisePattern::default()).unwrap();
        assert_eq!(truth.artifact_units, tex);
        assert_ne!(net2, net);
    }

    #[test]
    fn blotch_energy_of_constant_image_is_zero() {
        assert_eq!(blotch_energy(&Tensor::full(&[3, 16, 16], 0.3)).unwrap(), 0.0);
    }
}
