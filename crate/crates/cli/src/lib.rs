//! `panfield` subcommands. Diagnostics go to standard error; machine output
//! goes to files or standard output.

pub mod config;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use panfield_core::edit::{apply, parse_script, CameraRef, EditOp, ScriptLine};
use panfield_core::io::{
    load_cameras, load_dataset, load_scene, read_channels, save_cameras, save_dataset, save_scene, write_channels,
    CAMERAS_FILE,
};
use panfield_core::metainit::{car_corpus, server_update, MetaCheckpoint};
use panfield_core::renderer::{render_image, Camera, ChannelImages, RenderOptions};
use panfield_core::scene::SceneModel;
use panfield_core::synth::{evaluate, scene_by_name, toy_dataset, Dataset, MetricReport};
use panfield_core::trainer::{initial_scene, train, SupervisionSet, TrainEvent};
use panfield_editsvc::{ServiceConfig, Session};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "panfield", version, about = "Panoptic neural fields on the CPU")]
pub struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true, env = "PANFIELD_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene into a dataset directory.
    Gen(GenArgs),
    /// Fit a panoptic scene to a dataset.
    Train(TrainArgs),
    /// Meta-learn a thing-field initialization on a synthetic car corpus.
    MetaTrain(MetaTrainArgs),
    /// Render all channels of a trained scene.
    Render(RenderArgs),
    /// Score renders against dataset ground truth.
    Eval(EvalArgs),
    /// Apply an edit script to a trained scene.
    Edit(EditArgs),
    /// Serve the interactive edit API.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// `toy` or `full`.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides, self.profile.as_deref())
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long, default_value = "kitti-micro")]
    pub scene: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability of replacing a supervision label with another class.
    #[arg(long, default_value_t = 0.0)]
    pub flip_rate: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Meta checkpoint applied to every thing of its category.
    #[arg(long)]
    pub meta_init: Option<PathBuf>,
    /// Freeze object poses.
    #[arg(long)]
    pub no_track_opt: bool,
    /// Train the stuff field alone.
    #[arg(long)]
    pub no_things: bool,
}

#[derive(Args, Debug, Clone)]
pub struct MetaTrainArgs {
    /// Output directory; the checkpoint is `<category>.ckpt`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "car")]
    pub category: String,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    /// Scene directory or `scene.toml`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Index into the checkpoint's camera list.
    #[arg(long, conflicts_with = "camera_path")]
    pub camera_index: Option<usize>,
    /// Camera path file; every camera is rendered.
    #[arg(long)]
    pub camera_path: Option<PathBuf>,
    /// Camera list for `--camera-index` (default: the checkpoint's).
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[arg(long)]
    pub time: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "view")]
    pub stem: String,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained scene to render.
    #[arg(long, conflicts_with = "pred")]
    pub ckpt: Option<PathBuf>,
    /// Directory of pre-rendered channel files named like the dataset views.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// `train`, `heldout` or `all`.
    #[arg(long, default_value = "heldout")]
    pub split: String,
    /// Report file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug, Clone)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub script: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Camera list for indexed renders (default: the checkpoint's).
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Static UI assets.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Default target of `POST /save`.
    #[arg(long, default_value = "edited")]
    pub save_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        panfield_core::par::set_thread_limit(t);
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::MetaTrain(a) => cmd_meta_train(&a).map(|_| ()),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Edit(a) => cmd_edit(&a).map(|_| ()),
        Command::Serve(a) => cmd_serve(&a),
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let toy = scene_by_name(&args.scene)?;
    let data = toy_dataset(&toy, args.flip_rate, args.seed)?;
    save_dataset(&args.out, &data, args.force)?;
    eprintln!(
        "wrote {} training and {} held-out views to {}",
        data.train.len(),
        data.heldout.len(),
        args.out.display()
    );
    Ok(())
}

/// Dataset cameras in file order: training views, then held-out views.
pub fn dataset_cameras(data: &Dataset) -> Vec<Camera> {
    data.train.iter().chain(&data.heldout).map(|v| v.camera.clone()).collect()
}

fn apply_meta_init(scene: &mut SceneModel, path: &Path) -> Result<usize> {
    let ck = MetaCheckpoint::load(path)?;
    let mut applied = 0;
    for thing in &mut scene.things {
        if scene.class_table.get(thing.track.category) != Some(&ck.category) {
            continue;
        }
        if thing.field.config != ck.field.config {
            bail!("meta checkpoint {} does not match the thing field architecture", path.display());
        }
        thing.field = ck.field.clone();
        applied += 1;
    }
    Ok(applied)
}

pub fn cmd_train(args: &TrainArgs) -> Result<SceneModel> {
    let mut config = args.config.load()?;
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    if args.no_track_opt {
        config.train.optimize_tracks = false;
    }
    config.train.validate()?;
    let data = load_dataset(&args.data)?;
    let sup = SupervisionSet::from_dataset(&data)?;
    let mut scene = initial_scene(&data, config.profile, config.seed, !args.no_things)?;
    if let Some(path) = &args.meta_init {
        let n = apply_meta_init(&mut scene, path)?;
        eprintln!("meta init applied to {n} things");
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.toml"), config.to_toml()?)?;
    save_cameras(&args.out.join(CAMERAS_FILE), &dataset_cameras(&data))?;
    let mut log = fs::File::create(args.out.join("train.jsonl"))?;
    let out = args.out.clone();
    let log_path = out.join("train.jsonl");
    train(&mut scene, &sup, &config.train, |event| {
        match event {
            TrainEvent::Report(r) => {
                let line = serde_json::to_string(&r).expect("log record");
                writeln!(log, "{line}").map_err(|source| panfield_core::Error::Io {
                    path: log_path.clone(),
                    source,
                })?;
                eprintln!("step {:>6} rgb {:.5} sem {:.4} {:.1}s", r.step, r.rgb_loss, r.sem_loss, r.wall_ms as f64 / 1e3);
            }
            TrainEvent::Checkpoint { step, scene } => {
                save_scene(&out.join("checkpoints").join(format!("step-{step:06}")), scene)?;
            }
        }
        Ok(())
    })?;
    save_scene(&args.out, &scene)?;
    eprintln!("saved scene to {}", args.out.display());
    Ok(scene)
}

pub fn cmd_meta_train(args: &MetaTrainArgs) -> Result<PathBuf> {
    let config = args.config.load()?;
    let meta = config.meta;
    let clients = car_corpus(meta.clients, config.seed, config.corpus.views, config.corpus.size);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.toml"), config.to_toml()?)?;
    let mut log = fs::File::create(args.out.join("meta.jsonl"))?;
    let mut io_err = None;
    let ck = server_update(&meta, &args.category, &clients, |round, _| {
        eprintln!("round {round}/{}", meta.outer_epochs);
        if let Err(e) = writeln!(log, "{}", serde_json::json!({ "round": round })) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let path = args.out.join(format!("{}.ckpt", args.category));
    ck.save(&path)?;
    eprintln!("saved {}", path.display());
    Ok(path)
}

fn checkpoint_cameras(ckpt: &Path, explicit: Option<&Path>) -> Result<Vec<Camera>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = if ckpt.is_dir() { ckpt } else { ckpt.parent().unwrap_or(Path::new(".")) };
            dir.join(CAMERAS_FILE)
        }
    };
    load_cameras(&path).with_context(|| format!("loading cameras from {}", path.display()))
}

fn render_options(config: &RunConfig) -> RenderOptions {
    RenderOptions {
        samples: config.render.samples,
        background_logit: config.train.background_logit,
        ..RenderOptions::default()
    }
}

fn pick_camera(cameras: &[Camera], index: usize) -> Result<&Camera> {
    cameras
        .get(index)
        .with_context(|| format!("camera index {index} out of range ({} cameras)", cameras.len()))
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let config = args.config.load()?;
    let scene = load_scene(&args.ckpt)?;
    let opts = render_options(&config);
    let jobs: Vec<(String, Camera)> = match (&args.camera_path, args.camera_index) {
        (Some(path), _) => load_cameras(path)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| (format!("{}-{i:03}", args.stem), c))
            .collect(),
        (None, Some(i)) => {
            let cams = checkpoint_cameras(&args.ckpt, args.cameras.as_deref())?;
            vec![(args.stem.clone(), pick_camera(&cams, i)?.clone())]
        }
        (None, None) => bail!("give --camera-index or --camera-path"),
    };
    for (stem, camera) in jobs {
        let time = args.time.unwrap_or(camera.shutter_time);
        let img = render_image(&scene, &camera, time, &opts)?;
        write_channels(&args.out, &stem, &img)?;
        eprintln!("rendered {stem} at t = {time}");
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub stem: String,
    pub split: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub miou: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub views: Vec<EvalRow>,
    pub mean: EvalSummary,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let config = args.config.load()?;
    let data = load_dataset(&args.data)?;
    let scene = args.ckpt.as_deref().map(load_scene).transpose()?;
    if scene.is_none() && args.pred.is_none() {
        bail!("give --ckpt or --pred");
    }
    let splits: &[&str] = match args.split.as_str() {
        "train" => &["train"],
        "heldout" => &["heldout"],
        "all" => &["train", "heldout"],
        other => bail!("unknown split {other:?} (train, heldout, all)"),
    };
    let opts = render_options(&config);
    let mut rows = Vec::new();
    for &split in splits {
        let views = if split == "train" { &data.train } else { &data.heldout };
        for (i, v) in views.iter().enumerate() {
            let stem = format!("{split}-{i:03}");
            let pred: ChannelImages = match (&scene, &args.pred) {
                (Some(s), _) => render_image(s, &v.camera, v.time, &opts)?,
                (None, Some(dir)) => read_channels(dir, &stem, v.camera.width(), v.camera.height())
                    .with_context(|| format!("reading prediction {stem}"))?,
                (None, None) => unreachable!(),
            };
            let report = evaluate(&pred, &v.gt, &data.class_table)?;
            eprintln!("{stem}: psnr {:.2} miou {:.3} pq {:.3}", report.psnr, report.miou, report.pq);
            rows.push(EvalRow {
                stem,
                split: split.into(),
                report,
            });
        }
    }
    if rows.is_empty() {
        bail!("split {:?} has no views", args.split);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| rows.iter().map(|r| f(&r.report)).sum::<f64>() / n;
    let report = EvalReport {
        mean: EvalSummary {
            psnr: mean(|r| r.psnr),
            miou: mean(|r| r.miou),
            pq: mean(|r| r.pq),
            sq: mean(|r| r.sq),
            rq: mean(|r| r.rq),
        },
        views: rows,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(report)
}

/// Applies a script's edits in order, rendering where asked, then saves
/// the edited scene and the applied edits (`edits.json`) under `out`.
pub fn cmd_edit(args: &EditArgs) -> Result<SceneModel> {
    let config = args.config.load()?;
    let mut scene = load_scene(&args.ckpt)?;
    let base = args.script.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&args.script).with_context(|| format!("reading {}", args.script.display()))?;
    let script = parse_script(&text, &base)?;
    let opts = render_options(&config);
    let mut cameras: Option<Vec<Camera>> = None;
    let mut applied: Vec<EditOp> = Vec::new();
    for line in script {
        match line {
            ScriptLine::Edit(op) => {
                scene = apply(&scene, &op, &base)?;
                applied.push(op);
            }
            ScriptLine::Render(req) => {
                let camera = match &req.camera {
                    CameraRef::Index(i) => {
                        if cameras.is_none() {
                            cameras = Some(checkpoint_cameras(&args.ckpt, args.cameras.as_deref())?);
                        }
                        pick_camera(cameras.as_deref().unwrap_or_default(), *i)?.clone()
                    }
                    CameraRef::File(f) => load_cameras(&base.join(f))?
                        .into_iter()
                        .next()
                        .with_context(|| format!("camera file {f} is empty"))?,
                };
                let time = req.time.unwrap_or(camera.shutter_time);
                let img = render_image(&scene, &camera, time, &opts)?;
                write_channels(&args.out.join("renders"), &req.stem, &img)?;
                eprintln!("rendered {}", req.stem);
            }
        }
    }
    save_scene(&args.out, &scene)?;
    fs::write(args.out.join("edits.json"), serde_json::to_vec_pretty(&applied)?)?;
    eprintln!("applied {} edits; saved to {}", applied.len(), args.out.display());
    Ok(scene)
}

pub fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let config = args.config.load()?;
    let scene = load_scene(&args.ckpt)?;
    let cameras = checkpoint_cameras(&args.ckpt, None).unwrap_or_else(|e| {
        eprintln!("no camera list ({e:#}); only orbit views are available");
        Vec::new()
    });
    let base = if args.ckpt.is_dir() {
        args.ckpt.clone()
    } else {
        args.ckpt.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    let service = ServiceConfig {
        max_width: config.serve.max_width,
        max_height: config.serve.max_height,
        interactive_samples: config.serve.interactive_samples,
        refine_samples: config.serve.refine_samples,
        save_dir: args.save_dir.clone(),
        static_dir: args.static_dir.clone(),
        cors_origin: args.cors_origin.clone(),
    };
    let session = Arc::new(Session::new(scene, base, cameras, service));
    let port = args.port.unwrap_or(config.serve.port);
    let addr: SocketAddr = format!("{}:{port}", args.host).parse().context("bad host or port")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(panfield_editsvc::serve(addr, session))?;
    Ok(())
}
