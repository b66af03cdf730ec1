//! Command implementations. Each returns a [`CliError`] whose exit code is
//! part of the command line contract: 1 for analysis failures, 2 for usage
//! and I/O problems.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gd_core::diagnose::{
    image_stats, rank_artifact_units, sample_fid, DiagnoseConfig, GaussianStats, UnitReference,
};
use gd_core::dissect::{label_units, DissectConfig, DissectionReport};
use gd_core::image_io::{grid, write_png};
use gd_core::intervene::{
    ablate, ablation_curve, ace, alpha_init, compute_k, insert, insertion_context_effect, layer_baseline,
    optimize_alpha, rank_by_alpha, sample_locations, AceConfig, AlphaVector, LocationSet, Normalization, UnitSet,
};
use gd_core::persist;
use gd_core::scene::{artifact_free, build_planted_generator, default_universe, sample_z, GeneratorConfig, PlantedTruth};
use gd_core::segment::ConceptUniverse;
use gd_core::session::{build_catalog, render_seed, Ranking};
use gd_core::weights::load_weights;
use gd_core::{GdError, NetworkSpec, Tensor};

use crate::server::{router, AppState};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Analysis(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Analysis(_) => 1,
            Self::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Analysis(m) => f.write_str(m),
        }
    }
}

impl From<GdError> for CliError {
    fn from(e: GdError) -> Self {
        match e {
            GdError::Io(_) | GdError::WeightFile { .. } | GdError::Json { .. } | GdError::Schema { .. } => {
                Self::Usage(e.to_string())
            }
            other => Self::Analysis(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "gd", version, about = "Dissect, intervene on and diagnose image generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a planted generator, its artifact-free reference and ground truth.
    Plant {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the image for a latent seed.
    Render {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label units by segmentation agreement.
    Dissect {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        universe: Option<PathBuf>,
        /// Layer to dissect; defaults to the featuremap.
        #[arg(long)]
        layer: Option<usize>,
        /// Evaluation samples.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        val_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure the causal effect of a concept's units.
    Intervene {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        universe: Option<PathBuf>,
        #[arg(long)]
        concept: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Ablate)]
        mode: ModeArg,
        #[arg(long, default_value_t = 20)]
        n_units: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Existing dissection report to rank units by.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Cached α vector; takes precedence over the report.
        #[arg(long)]
        alpha: Option<PathBuf>,
        /// Optimize α instead of ranking by IoU.
        #[arg(long)]
        optimize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank units by Frechet distance and optionally repair the generator.
    Diagnose {
        #[command(flatten)]
        model: ModelArgs,
        /// Generator sharing the featuremap that renders realistic images.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n_generate: usize,
        /// Top-activating samples per unit.
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        /// Ablate this many top-ranked units and compare whole-sample FID.
        #[arg(long, default_value_t = 0)]
        repair_m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the painting API.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        universe: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, value_enum, default_value_t = RankingArg::Alpha)]
        ranking: RankingArg,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Weight file.
    #[arg(long, conflicts_with = "planted")]
    pub model: Option<PathBuf>,
    /// Build the planted generator for this seed instead of loading one.
    #[arg(long)]
    pub planted: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Ablate,
    Insert,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankingArg {
    Iou,
    Alpha,
}

pub struct Model {
    pub net: NetworkSpec,
    pub truth: Option<PlantedTruth>,
    pub description: String,
}

pub fn load_model(args: &ModelArgs) -> CliResult<Model> {
    match (&args.model, args.planted) {
        (Some(path), None) => Ok(Model {
            net: load_weights(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
            truth: None,
            description: format!("file:{}", path.display()),
        }),
        (None, Some(seed)) => {
            let (net, truth) = build_planted_generator(&GeneratorConfig::default(), seed)?;
            Ok(Model {
                net,
                truth: Some(truth),
                description: format!("planted:{seed}"),
            })
        }
        _ => Err(usage("give exactly one of --model or --planted")),
    }
}

fn load_universe(path: Option<&Path>) -> CliResult<ConceptUniverse> {
    match path {
        None => Ok(default_universe()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok(ConceptUniverse::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?)
        }
    }
}

/// Write every file only after all of them have been produced.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn json<T: Serialize>(&mut self, name: &str, kind: &str, value: &T) -> CliResult {
        self.files.push((name.into(), persist::to_json(kind, value)?.into_bytes()));
        Ok(())
    }

    fn png(&mut self, name: &str, image: &Tensor) -> CliResult {
        self.files.push((name.into(), gd_core::image_io::encode_png(image)?));
        Ok(())
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn commit(self) -> CliResult {
        let io = |e: std::io::Error| usage(format!("{}: {e}", self.dir.display()));
        fs::create_dir_all(&self.dir).map_err(io)?;
        for (name, bytes) in &self.files {
            fs::write(self.dir.join(name), bytes).map_err(io)?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Plant { seed, out } => plant(seed, &out),
        Command::Render { model, seed, out } => {
            let m = load_model(&model)?;
            let img = render_seed(&m.net, seed)?;
            write_png(&out, &img).map_err(|e| usage(format!("{}: {e}", out.display())))
        }
        Command::Dissect {
            model,
            universe,
            layer,
            samples,
            val_samples,
            seed,
            out,
        } => dissect(&model, universe.as_deref(), layer, samples, val_samples, seed, &out),
        Command::Intervene {
            model,
            universe,
            concept,
            mode,
            n_units,
            samples,
            seed,
            report,
            alpha,
            optimize,
            out,
        } => intervene(&InterveneArgs {
            model,
            universe,
            concept,
            mode,
            n_units,
            samples,
            seed,
            report,
            alpha,
            optimize,
            out,
        }),
        Command::Diagnose {
            model,
            reference,
            n_generate,
            top_k,
            repair_m,
            seed,
            out,
        } => diagnose(&model, reference.as_deref(), n_generate, top_k, repair_m, seed, &out),
        Command::Serve {
            model,
            universe,
            port,
            ranking,
        } => serve(&model, universe.as_deref(), port, ranking),
    }
}

fn plant(seed: u64, out: &Path) -> CliResult {
    let (net, truth) = build_planted_generator(&GeneratorConfig::default(), seed)?;
    let clean = artifact_free(&net, &truth)?;
    let mut o = Outputs::new(out);
    o.raw("model.gdw", gd_core::weights::encode(&net));
    o.raw("reference.gdw", gd_core::weights::encode(&clean));
    o.json("truth.json", "planted-truth", &truth)?;
    o.raw("universe.json", default_universe().to_json().into_bytes());
    o.commit()?;
    println!("planted generator (seed {seed}) written to {}", out.display());
    Ok(())
}

/// Image crop of `cells` featuremap cells centred on `(y, x)`, clamped to the
/// image.
fn crop_around(img: &Tensor, y: usize, x: usize, fm: usize, cells: usize) -> CliResult<Tensor> {
    let (c, h, w) = img.chw()?;
    let (sy, sx) = (h / fm, w / fm);
    let (ch, cw) = ((cells * sy).min(h), (cells * sx).min(w));
    let y0 = (y * sy + sy / 2).saturating_sub(ch / 2).min(h - ch);
    let x0 = (x * sx + sx / 2).saturating_sub(cw / 2).min(w - cw);
    let mut data = Vec::with_capacity(c * ch * cw);
    for chn in 0..c {
        let plane = img.channel(chn);
        for yy in y0..y0 + ch {
            data.extend_from_slice(&plane[yy * w + x0..yy * w + x0 + cw]);
        }
    }
    Ok(Tensor::new(vec![c, ch, cw], data)?)
}

/// One crop per labeled unit at its strongest activation over `latents`.
fn unit_crops(net: &NetworkSpec, report: &DissectionReport, latents: &[gd_core::scene::LatentVector]) -> CliResult<Option<Tensor>> {
    let labeled: Vec<usize> = report
        .units
        .iter()
        .filter(|u| u.class_predictor && !u.unrealistic && u.concept.is_some())
        .map(|u| u.unit)
        .collect();
    if labeled.is_empty() {
        return Ok(None);
    }
    let mut best: Vec<(f32, usize, usize, usize)> = vec![(f32::NEG_INFINITY, 0, 0, 0); labeled.len()];
    let mut fm_side = 1;
    for (i, z) in latents.iter().enumerate() {
        let out = net.forward(&z.values, true)?;
        let layers = out.layers.unwrap_or_default();
        let act = report
            .layer_index()
            .and_then(|l| layers.get(l))
            .ok_or_else(|| CliError::Analysis(format!("{} not traced", report.layer)))?;
        let (_, h, w) = act.chw()?;
        fm_side = h;
        for (j, &u) in labeled.iter().enumerate() {
            for (p, &v) in act.channel(u).iter().enumerate() {
                if v > best[j].0 {
                    best[j] = (v, i, p / w, p % w);
                }
            }
        }
    }
    let mut crops = Vec::with_capacity(labeled.len());
    for &(_, i, y, x) in &best {
        let img = net.forward_from(&net.featuremap(&latents[i].values)?)?;
        crops.push(crop_around(&img, y, x, fm_side, 3)?);
    }
    Ok(Some(grid(&crops, 8, 2)?))
}

fn dissect(
    model: &ModelArgs,
    universe: Option<&Path>,
    layer: Option<usize>,
    samples: usize,
    val_samples: usize,
    seed: u64,
    out: &Path,
) -> CliResult {
    let m = load_model(model)?;
    let uni = load_universe(universe)?;
    let cfg = DissectConfig {
        val_samples,
        eval_samples: samples,
        seed,
        ..Default::default()
    };
    if samples < cfg.min_eval_samples || val_samples < cfg.min_val_samples {
        return Err(usage(format!(
            "need --samples >= {} and --val-samples >= {}",
            cfg.min_eval_samples, cfg.min_val_samples
        )));
    }
    let report = label_units(&m.net, layer, &uni, &cfg)?;
    let mut o = Outputs::new(out);
    o.raw("report.json", report.to_json()?.into_bytes());
    let crops_from = sample_z(seed, 100, m.net.latent_dim);
    if let Some(g) = unit_crops(&m.net, &report, &crops_from)? {
        o.png("units.png", &g)?;
    }
    o.commit()?;
    println!("layer {}: {} interpretable units", report.layer, report.interpretable_units());
    for (c, n) in &report.histogram {
        println!("  {c:<12} {n}");
    }
    Ok(())
}

pub struct InterveneArgs {
    pub model: ModelArgs,
    pub universe: Option<PathBuf>,
    pub concept: String,
    pub mode: ModeArg,
    pub n_units: usize,
    pub samples: usize,
    pub seed: u64,
    pub report: Option<PathBuf>,
    pub alpha: Option<PathBuf>,
    pub optimize: bool,
    pub out: PathBuf,
}

/// Seed offsets keeping the latent streams of one command independent.
const K_STREAM: u64 = 0x6B;
const LOCATION_STREAM: u64 = 0x10C;

fn intervene(a: &InterveneArgs) -> CliResult {
    let m = load_model(&a.model)?;
    let uni = load_universe(a.universe.as_deref())?;
    uni.get(&a.concept).map_err(|e| usage(e.to_string()))?;
    let d = m.net.featuremap_shape()?[0];
    if a.n_units > d {
        return Err(usage(format!("--n-units must be at most {d}")));
    }
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let k = compute_k(&m.net, &uni, &a.concept, &sample_z(a.seed ^ K_STREAM, a.samples, m.net.latent_dim))?;
    let mut o = Outputs::new(&a.out);
    let ranked = if let Some(path) = &a.alpha {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        rank_by_alpha(&AlphaVector::from_json(&text)?.alpha)
    } else {
        let report = match &a.report {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                DissectionReport::from_json(&text)?
            }
            None => label_units(&m.net, None, &uni, &DissectConfig::default())?,
        };
        if a.optimize {
            let cfg = AceConfig {
                seed: a.seed,
                ..Default::default()
            };
            let res = optimize_alpha(&m.net, &uni, &a.concept, &k.k, &alpha_init(&report, &a.concept)?, &cfg)?;
            o.raw("alpha.json", res.alpha.to_json()?.into_bytes());
            rank_by_alpha(&res.alpha.alpha)
        } else {
            report.ranked_units(&a.concept)
        }
    };
    let units = UnitSet::new(ranked[..a.n_units].iter().copied(), d)?;
    let latents = sample_z(a.seed, a.samples, m.net.latent_dim);
    let result = ace(
        &m.net,
        &uni,
        &units,
        &a.concept,
        &k.k,
        &latents,
        Normalization::Shared,
        a.seed ^ LOCATION_STREAM,
    )?;
    let mut sizes: Vec<usize> = std::iter::successors(Some(1usize), |s| Some(s * 2))
        .take_while(|&s| s < a.n_units)
        .collect();
    sizes.insert(0, 0);
    sizes.push(a.n_units);
    sizes.dedup();
    let curve = ablation_curve(&m.net, &uni, &a.concept, &ranked, &sizes, &latents)?;
    let contexts: Vec<String> = uni.names().into_iter().filter(|c| *c != a.concept).collect();
    let table = insertion_context_effect(
        &m.net,
        &uni,
        &a.concept,
        &units,
        &k.k,
        &contexts,
        &latents,
        a.seed ^ LOCATION_STREAM,
    )?;

    let fm = m.net.featuremap_shape()?;
    let locs = sample_locations(a.seed ^ LOCATION_STREAM, 4, fm[1], fm[2]);
    let mut tiles = Vec::new();
    for (z, &(y, x)) in latents.iter().take(4).zip(&locs) {
        let r = m.net.featuremap(&z.values)?;
        let after = match a.mode {
            ModeArg::Ablate => ablate(&r, &units, &LocationSet::full(fm[1], fm[2]))?,
            ModeArg::Insert => insert(&r, &units, &LocationSet::single(y, x), &k.k)?,
        };
        tiles.push(m.net.forward_from(&r)?);
        tiles.push(m.net.forward_from(&after)?);
    }
    o.json("ace.json", "ace-result", &result)?;
    o.json("curve.json", "ablation-curve", &curve)?;
    o.json("context.json", "context-table", &table)?;
    o.png("pairs.png", &grid(&tiles, 2, 2)?)?;
    o.commit()?;
    println!(
        "{} units for '{}': ACE {:.4} ± {:.4} (base rate {:.4})",
        units.len(),
        a.concept,
        result.delta,
        result.half_width,
        result.base_rate
    );
    for p in &curve {
        println!("  ablate {:>3} units: {:.3} of concept pixels remain", p.size, p.remaining);
    }
    for b in &table.buckets {
        let flag = if b.low_confidence { " (low confidence)" } else { "" };
        println!("  insert on {:<10} n={:<4} effect {:.4}{flag}", b.context, b.trials, b.effect);
    }
    Ok(())
}

/// Minimum samples for a usable covariance in the 192-dimensional embedding.
pub const MIN_GENERATE: usize = 100;
const REFERENCE_STREAM: u64 = 0x5EF;

#[derive(Serialize)]
struct RepairSummary {
    units: Vec<usize>,
    fid_before: f64,
    fid_after: f64,
}

fn diagnose(
    model: &ModelArgs,
    reference: Option<&Path>,
    n_generate: usize,
    top_k: usize,
    repair_m: usize,
    seed: u64,
    out: &Path,
) -> CliResult {
    if n_generate < MIN_GENERATE {
        return Err(usage(format!("--n-generate must be at least {MIN_GENERATE}")));
    }
    if top_k > n_generate || top_k < 2 {
        return Err(usage("--top-k must be between 2 and --n-generate"));
    }
    let m = load_model(model)?;
    let d = m.net.featuremap_shape()?[0];
    if repair_m > d {
        return Err(usage(format!("--repair-m must be at most {d}")));
    }
    let clean = match (reference, &m.truth) {
        (Some(p), _) => load_weights(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        (None, Some(truth)) => artifact_free(&m.net, truth)?,
        (None, None) => return Err(usage("a --reference generator is needed for weight files")),
    };
    let latents = sample_z(seed, n_generate, m.net.latent_dim);
    let cfg = DiagnoseConfig {
        samples: n_generate,
        top_images: top_k,
        seed,
    };
    let report = rank_artifact_units(&m.net, &latents, UnitReference::Paired(&clean), &cfg)?;
    let mut o = Outputs::new(out);
    o.raw("scores.json", report.to_json()?.into_bytes());
    println!("rank  unit  fid");
    for (i, u) in report.units.iter().take(10).enumerate() {
        println!("{:>4}  {:>4}  {:.4}", i + 1, u.unit, u.fid);
    }
    if repair_m > 0 {
        let whole: GaussianStats = image_stats(&clean, &sample_z(seed ^ REFERENCE_STREAM, n_generate, m.net.latent_dim), None)?;
        let units = UnitSet::new(report.top(repair_m), d)?;
        let before = sample_fid(&m.net, &latents, None, &whole)?;
        let after = sample_fid(&m.net, &latents, Some(&units), &whole)?;
        let repaired = gd_core::diagnose::repair(&m.net, &units)?;
        let mut tiles = Vec::new();
        for z in latents.iter().take(4) {
            tiles.push(m.net.forward_from(&m.net.featuremap(&z.values)?)?);
            tiles.push(repaired.forward_from(&repaired.featuremap(&z.values)?)?);
        }
        o.json(
            "repair.json",
            "repair",
            &RepairSummary {
                units: units.units().to_vec(),
                fid_before: before,
                fid_after: after,
            },
        )?;
        o.png("repair.png", &grid(&tiles, 2, 2)?)?;
        o.raw("repaired.gdw", gd_core::weights::encode(&repaired));
        println!("whole-sample FID {before:.4} -> {after:.4} after ablating {:?}", units.units());
    }
    o.commit()
}

fn serve(model: &ModelArgs, universe: Option<&Path>, port: u16, ranking: RankingArg) -> CliResult {
    let m = load_model(model)?;
    let uni = load_universe(universe)?;
    let state = build_state(m, uni, ranking)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| usage(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| usage(format!("port {port}: {e}")))?;
        println!("listening on http://{}", listener.local_addr().map_err(|e| usage(e.to_string()))?);
        axum::serve(listener, router(Arc::new(state)))
            .await
            .map_err(|e| usage(e.to_string()))
    })
}

/// Concepts offered for painting: those with a compact shape.
fn paintable(universe: &ConceptUniverse) -> Vec<String> {
    use gd_core::segment::Shape;
    universe
        .concepts
        .iter()
        .filter(|c| matches!(c.shape, Shape::Rect | Shape::Disc | Shape::Stripe))
        .map(|c| c.name.clone())
        .collect()
}

/// Dissect, rank units per concept and compute trace baselines.
pub fn build_state(m: Model, universe: ConceptUniverse, ranking: RankingArg) -> CliResult<AppState> {
    let report = label_units(&m.net, None, &universe, &DissectConfig::default())?;
    let latents = sample_z(K_STREAM, 200, m.net.latent_dim);
    let ranking = match ranking {
        RankingArg::Iou => Ranking::Iou,
        RankingArg::Alpha => Ranking::Alpha(AceConfig::default()),
    };
    let concepts: Vec<String> = paintable(&universe)
        .into_iter()
        .filter(|c| report.units.iter().any(|u| u.score(c).is_some_and(|s| s.iou > 0.0)))
        .collect();
    let catalog = build_catalog(&m.net, &universe, &report, &concepts, &latents, &ranking)?;
    let baseline = layer_baseline(&m.net, &latents[..100])?;
    Ok(AppState::new(m.net, universe, catalog, baseline, m.description))
}
