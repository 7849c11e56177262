use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use npuppet_core::apps::{
    constrained_deform, correspond, inbetween, pck, to_pixels, DragSession, DragSpace, Endpoint, InbetweenRequest,
};
use npuppet_core::energies::Constraint;
use npuppet_core::image::pixel_to_ndc;
use npuppet_core::model::{Latent, ModelManifest};
use npuppet_core::puppet::{build_puppet, load_outline_file, locate_point, BuildOptions};
use npuppet_core::render::render;
use npuppet_core::synthetic::Rig;
use npuppet_core::train::{evaluate, state_loss, train_with, RunOptions, TrainConfig};
use npuppet_core::{DeformState, Point2};

use crate::files::{
    create_dir, load_config, load_frames, load_image, load_model, load_puppet, read_json, write_json, CliResult,
    Failure,
};
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "npuppet", version, about = "Fit layered 2.5D puppets to cartoon frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Triangulate part outlines into a puppet file.
    BuildPuppet(BuildPuppetArgs),
    /// Write a synthetic puppet and rendered frames with their poses.
    Synth(SynthArgs),
    /// Train a deformation network on a set of frames.
    Train(TrainArgs),
    /// Report the reconstruction loss of a trained model on frames.
    Evaluate(EvaluateArgs),
    /// Fit one image: latent, pose and render.
    Fit(FitArgs),
    /// Render a pose of a puppet.
    Render(RenderArgs),
    /// Frames between two images or latents.
    Inbetween(InbetweenArgs),
    /// Pose by dragging points toward targets.
    Deform(DeformArgs),
    /// Map points from one image to another through the template.
    Correspond(CorrespondArgs),
    /// Percentage of correct keypoints.
    Pck(PckArgs),
    /// Serve sessions, drags and inbetweening over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub puppet: PathBuf,
    /// Checkpoint (`.npup`) or its manifest (`.json`).
    #[arg(long)]
    pub model: PathBuf,
    /// Run configuration (TOML); defaults to the one the model was trained with.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildPuppetArgs {
    #[arg(long)]
    pub outline: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Midpoint subdivision levels applied after triangulation.
    #[arg(long, default_value_t = 0)]
    pub subdivisions: usize,
    /// Refine each part until no edge is longer than this (NDC units).
    #[arg(long)]
    pub refine_edge: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub heldout: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 1)]
    pub subdivisions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub puppet: PathBuf,
    /// PNG files or directories of them.
    #[arg(long, num_args = 1.., required = true)]
    pub frames: Vec<PathBuf>,
    /// Where to write the checkpoint; the manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Per-epoch loss records, one JSON object per line.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, num_args = 1.., required = true)]
    pub frames: Vec<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    /// Receives `latent.json`, `state.json` and `render.png`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub puppet: PathBuf,
    /// `rest` or a state JSON file.
    #[arg(long)]
    pub state: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Also print the reconstruction loss of the pose against this frame.
    #[arg(long)]
    pub frame: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InbetweenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// First endpoint: a PNG image or a latent JSON file.
    #[arg(long)]
    pub from: PathBuf,
    /// Second endpoint: a PNG image or a latent JSON file.
    #[arg(long)]
    pub to: PathBuf,
    /// Frames strictly between the endpoints.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeformArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Start from this image's fit.
    #[arg(long, conflicts_with = "latent", required_unless_present = "latent")]
    pub image: Option<PathBuf>,
    /// Start from this latent JSON file.
    #[arg(long)]
    pub latent: Option<PathBuf>,
    /// JSON list of `{"point": [x, y], "target": [x, y]}` in pixels.
    #[arg(long)]
    pub constraints: PathBuf,
    #[arg(long, default_value_t = DragSession::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = DragSession::DEFAULT_ETA)]
    pub eta: f64,
    /// Halve the step whenever it would increase the objective.
    #[arg(long)]
    pub line_search: bool,
    /// Optimize the vertices directly instead of the latent code.
    #[arg(long)]
    pub vertex_space: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrespondArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// JSON list of `[x, y]` pixel positions in image A.
    #[arg(long)]
    pub points: PathBuf,
    /// Write the mapped points here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PckArgs {
    /// JSON list of predicted `[x, y]` pixel positions.
    #[arg(long)]
    pub pred: PathBuf,
    /// JSON list of ground-truth `[x, y]` pixel positions.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

/// A drag given in pixel coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelConstraint {
    pub point: Point2,
    pub target: Point2,
}

#[derive(Debug, Serialize)]
struct IndexEntry {
    file: String,
    t: f64,
}

#[derive(Debug, Serialize)]
struct DeformReport {
    l_user_before: f64,
    l_user_after: f64,
    objective_before: f64,
    objective_after: f64,
    iterations: usize,
    eta: f64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::BuildPuppet(a) => build(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render_cmd(a),
        Command::Inbetween(a) => inbetween_cmd(a),
        Command::Deform(a) => deform(a),
        Command::Correspond(a) => correspond_cmd(a),
        Command::Pck(a) => pck_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

/// Puppet, model and configuration, with the model checked against both.
struct Loaded {
    puppet: npuppet_core::Puppet,
    model: npuppet_core::model::DeformModel,
    manifest: ModelManifest,
    cfg: TrainConfig,
}

fn load(args: &ModelArgs) -> CliResult<Loaded> {
    let puppet = load_puppet(&args.puppet)?;
    let (model, manifest) = load_model(&args.model)?;
    model.check_puppet(&puppet)?;
    let cfg = load_config(args.config.as_deref(), Some(&manifest))?;
    if cfg.model_config() != model.config {
        return Err(Failure::invalid(format!(
            "model: trained at {}x{} with different widths than the configuration describes",
            model.config.width, model.config.height
        )));
    }
    Ok(Loaded {
        puppet,
        model,
        manifest,
        cfg,
    })
}

fn build(a: BuildPuppetArgs) -> CliResult<()> {
    if let Some(e) = a.refine_edge {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Failure::invalid(format!("--refine-edge must be positive, got {e}")));
        }
    }
    let parts = load_outline_file(&a.outline)?;
    let opts = BuildOptions {
        refine_edge: a.refine_edge,
        subdivisions: a.subdivisions,
        ..Default::default()
    };
    let report = build_puppet(&parts, &opts)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    report.puppet.save(&a.out)?;
    let p = &report.puppet;
    println!(
        "{} layers, {} vertices, {} faces, {} joints",
        p.layers.len(),
        p.vertex_count(),
        p.face_count(),
        p.joints.len()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    if a.resolution == 0 || !a.resolution.is_multiple_of(8) {
        return Err(Failure::invalid(format!("--resolution must be a positive multiple of 8, got {}", a.resolution)));
    }
    let rig = Rig::new(a.subdivisions)?;
    let set = rig.dataset(a.frames, a.heldout, a.seed, a.resolution, a.resolution)?;
    create_dir(&a.out_dir)?;
    rig.puppet.save(a.out_dir.join("puppet.json"))?;
    for (name, samples) in [("train", &set.train), ("heldout", &set.heldout)] {
        let dir = a.out_dir.join(name);
        create_dir(&dir)?;
        let mut states = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            s.image.save_png(dir.join(format!("frame_{i:04}.png")))?;
            states.push(&s.state);
        }
        write_json(&a.out_dir.join(format!("{name}_states.json")), &states)?;
    }
    println!(
        "{} vertices; {} training and {} held-out frames at {}x{}",
        rig.puppet.vertex_count(),
        set.train.len(),
        set.heldout.len(),
        a.resolution,
        a.resolution
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let puppet = load_puppet(&a.puppet)?;
    let frames = load_frames(&a.frames)?;
    let mut cfg = load_config(a.config.as_deref(), None)?;
    if a.config.is_none() {
        cfg.resolution = [frames[0].width, frames[0].height];
        cfg.validate()?;
    }
    let init = match &a.init {
        Some(p) => Some(load_model(p)?.0),
        None => None,
    };
    if let Some(dir) = &a.checkpoint_dir {
        create_dir(dir)?;
    }
    let opts = RunOptions {
        checkpoint_dir: a.checkpoint_dir.clone(),
        log_path: a.log.clone(),
        init,
    };
    let (model, log) = train_with(&frames, &puppet, &cfg, &opts)?;
    let mut manifest = ModelManifest::new(&model, cfg.seed);
    manifest.puppet = Some(a.puppet.display().to_string());
    manifest.training = Some(serde_json::to_value(&cfg).expect("config serializes"));
    let manifest = model.save(&a.out, manifest)?;
    println!(
        "{} epochs, {} rollbacks, final rec {:.6}, checkpoint {}",
        log.epochs.len(),
        log.rollbacks,
        log.final_rec,
        manifest.checkpoint_sha256
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<()> {
    let l = load(&a.model)?;
    let frames = load_frames(&a.frames)?;
    let report = evaluate(&frames, &l.model, &l.puppet, &l.cfg)?;
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(())
}

fn fit(a: FitArgs) -> CliResult<()> {
    let l = load(&a.model)?;
    l.manifest.require_trained("fit")?;
    let img = load_image(&a.image)?;
    let (z, state) = l.model.predict(&img, &l.puppet)?;
    create_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("latent.json"), &z)?;
    write_json(&a.out_dir.join("state.json"), &state)?;
    render(&state, &l.puppet, &l.cfg.raster())?.rgba.save_png(a.out_dir.join("render.png"))?;
    println!("rec {:.9}", state_loss(&state, &img, &l.puppet, &l.cfg)?);
    Ok(())
}

fn render_cmd(a: RenderArgs) -> CliResult<()> {
    let puppet = load_puppet(&a.puppet)?;
    let mut cfg = load_config(a.config.as_deref(), None)?;
    let frame = a.frame.as_deref().map(load_image).transpose()?;
    if let (Some(f), None) = (&frame, &a.config) {
        cfg.resolution = [f.width, f.height];
    }
    let mut raster = cfg.raster();
    if a.width.is_some() || a.height.is_some() {
        let mut sized = cfg.clone();
        sized.resolution = [a.width.unwrap_or(raster.width), a.height.unwrap_or(raster.height)];
        raster = sized.raster();
    }
    raster.validate()?;
    let state = if a.state == "rest" {
        DeformState::rest(&puppet)
    } else {
        read_json(Path::new(&a.state))?
    };
    state.check(&puppet)?;
    render(&state, &puppet, &raster)?.rgba.save_png(&a.out)?;
    if let Some(f) = &frame {
        println!("rec {:.9}", state_loss(&state, f, &puppet, &cfg)?);
    }
    Ok(())
}

fn endpoint(path: &Path) -> CliResult<Endpoint> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        Ok(Endpoint::Latent(read_json::<Latent>(path)?))
    } else {
        Ok(Endpoint::Image(load_image(path)?))
    }
}

fn inbetween_cmd(a: InbetweenArgs) -> CliResult<()> {
    let l = load(&a.model)?;
    l.manifest.require_trained("inbetween")?;
    let req = InbetweenRequest {
        a: endpoint(&a.from)?,
        b: endpoint(&a.to)?,
        n: a.n,
    };
    let frames = inbetween(&req, &l.model, &l.puppet, &l.cfg.raster())?;
    create_dir(&a.out_dir)?;
    let mut index = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let file = format!("frame_{k:04}.png");
        f.image.save_png(a.out_dir.join(&file))?;
        index.push(IndexEntry { file, t: f.t });
    }
    write_json(&a.out_dir.join("index.json"), &serde_json::json!({ "frames": index }))?;
    println!("{} frames", frames.len());
    Ok(())
}

fn deform(a: DeformArgs) -> CliResult<()> {
    let l = load(&a.model)?;
    l.manifest.require_trained("deform")?;
    let z0 = match (&a.image, &a.latent) {
        (Some(img), _) => l.model.encode(&load_image(img)?)?,
        (None, Some(p)) => read_json(p)?,
        (None, None) => return Err(Failure::invalid("one of --image or --latent is required")),
    };
    let start = l.model.decode(&z0, &l.puppet)?;
    let pixel: Vec<PixelConstraint> = read_json(&a.constraints)?;
    let [w, h] = l.cfg.resolution;
    let constraints = pixel
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let point = locate_point(&l.puppet, &start, pixel_to_ndc(c.point, w, h))
                .map_err(|e| Failure::invalid(format!("{}: at `[{i}].point`: {e}", a.constraints.display())))?;
            Ok(Constraint {
                point,
                target: pixel_to_ndc(c.target, w, h),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut session = DragSession::new(z0, constraints);
    session.iterations = a.iterations;
    session.eta = a.eta;
    session.line_search = a.line_search;
    session.weights = l.cfg.weights;
    if a.vertex_space {
        session.space = DragSpace::Vertex;
    }
    let res = constrained_deform(&session, &l.model, &l.puppet, &l.cfg.raster())?;
    create_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("latent.json"), &res.latent)?;
    write_json(&a.out_dir.join("state.json"), &res.state)?;
    res.image.save_png(a.out_dir.join("render.png"))?;
    let report = DeformReport {
        l_user_before: res.l_user_before,
        l_user_after: res.l_user_after,
        objective_before: res.objective_before,
        objective_after: res.objective_after,
        iterations: res.iterations,
        eta: res.eta,
    };
    write_json(&a.out_dir.join("result.json"), &report)?;
    println!(
        "L_user {:.6e} -> {:.6e} in {} iterations",
        report.l_user_before, report.l_user_after, report.iterations
    );
    Ok(())
}

fn correspond_cmd(a: CorrespondArgs) -> CliResult<()> {
    let l = load(&a.model)?;
    l.manifest.require_trained("correspond")?;
    let (img_a, img_b) = (load_image(&a.a)?, load_image(&a.b)?);
    let queries: Vec<Point2> = read_json(&a.points)?;
    let ndc: Vec<Point2> = queries.iter().map(|&q| pixel_to_ndc(q, img_a.width, img_a.height)).collect();
    let found = correspond(&img_a, &img_b, &ndc, &l.model, &l.puppet)?;
    let off_mesh = found.iter().filter(|c| c.fallback).count();
    if off_mesh > 0 {
        log::warn!("{off_mesh} queries were off the fitted mesh and were snapped to it");
    }
    let mapped: Vec<Point2> = found.iter().map(|c| c.point).collect();
    let out = to_pixels(&mapped, img_b.width, img_b.height);
    match &a.out {
        Some(p) => write_json(p, &out)?,
        None => println!("{}", serde_json::to_string(&out).expect("points serialize")),
    }
    Ok(())
}

fn pck_cmd(a: PckArgs) -> CliResult<()> {
    let pred: Vec<Point2> = read_json(&a.pred)?;
    let gt: Vec<Point2> = read_json(&a.gt)?;
    let r = pck(&pred, &gt, a.alpha, a.width, a.height)?;
    println!("{:?}", r.fraction);
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let l = load(&a.model)?;
    l.manifest.require_trained("serve")?;
    let state = Arc::new(AppState::new(l.puppet, l.model, l.cfg.raster(), l.cfg.weights));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::invalid(format!("runtime: {e}")))?;
    rt.block_on(service::serve(a.addr, state))
        .map_err(|e| Failure::invalid(format!("{}: {e}", a.addr)))
}
