//! `segfield`: scene generation, mask association, field training,
//! evaluation, editing and rendering from the command line.
//!
//! Failures print one line to stderr, `error kind=<kind> message=<json string>`,
//! and exit with status 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use segfield_core::association::AssociationMode;
use segfield_core::config::RunConfig;
use segfield_core::field::{delete_object, move_object, EditStatus};
use segfield_core::render::Camera;
use segfield_core::synth::{generate, reappearance_spec, tabletop, two_boxes, SceneSpec, DEFAULT_FRAMES, DEFAULT_SIZE};
use segfield_core::{io, pipeline, Vec3};

#[derive(Parser)]
#[command(name = "segfield", version, about = "Multi-view consistent segmentation fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    GenScene(GenScene),
    /// Associate per-frame masks into global IDs and build the labeled cloud.
    Associate(Associate),
    /// Train a segmentation field from an association result.
    Train(Train),
    /// Mask mIoU of predicted masks against the scene ground truth.
    Eval2d(Eval2d),
    /// 3D mIoU and geometry metrics of a trained field.
    Eval3d(Eval3d),
    /// Delete or move one object of a field.
    Edit(Edit),
    /// Render a field to a color image and an argmax mask.
    Render(Render),
    /// Print the default run configuration as JSON.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tabletop,
    TwoBoxes,
}

#[derive(Args)]
struct GenScene {
    /// Scene specification (JSON). Mutually exclusive with --preset.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Layout seed for presets with random placement.
    #[arg(long, default_value_t = 0)]
    layout_seed: u64,
    /// Frame edge length for presets.
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    size: usize,
    /// Pointmap noise standard deviation (overrides the spec).
    #[arg(long)]
    noise: Option<f64>,
    /// Hide this object from the detector in --hide-frames.
    #[arg(long, requires = "hide_frames")]
    hide_object: Option<u16>,
    /// Zero-based half-open frame range, e.g. `7..13`.
    #[arg(long)]
    hide_frames: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let config: RunConfig = match &self.config {
            Some(p) => io::read_json(p)?,
            None => RunConfig::default(),
        };
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Adjacent,
    Accumulated,
}

#[derive(Args)]
struct Associate {
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Keep per-frame IDs (fusion ablation).
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    scene: PathBuf,
    /// Output directory of `associate`.
    #[arg(long)]
    assoc: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_plane: Option<f64>,
    #[arg(long)]
    neighbors: Option<usize>,
    /// Output directory for `field.ply` and `loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval2d {
    /// Directory with `masks/NNN.pgm` (e.g. an `associate` output).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Also write the report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Eval3d {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EditOp {
    Delete,
    Move,
}

#[derive(Args)]
struct Edit {
    #[arg(long)]
    field: PathBuf,
    #[arg(long, value_enum)]
    op: EditOp,
    #[arg(long)]
    id: u16,
    /// `x,y,z`, required for `move`.
    #[arg(long, allow_hyphen_values = true)]
    translation: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    field: PathBuf,
    /// Scene whose cameras `--camera` indexes.
    #[arg(long, requires = "camera")]
    scene: Option<PathBuf>,
    #[arg(long)]
    camera: Option<usize>,
    /// Camera as JSON, instead of --scene/--camera.
    #[arg(long, conflicts_with_all = ["scene", "camera"])]
    pose: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_image: PathBuf,
    #[arg(long)]
    out_mask: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<std::ops::Range<usize>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| anyhow!("frame range must look like START..END, got {s:?}"))?;
    Ok(a.trim().parse()?..b.trim().parse()?)
}

fn parse_vec3(s: &str) -> Result<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("translation {s:?} is not x,y,z"))?;
    match parts.as_slice() {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Vec3::new(*x, *y, *z)),
        _ => bail!("translation must have three finite components"),
    }
}

fn print_report(report: &pipeline::Report, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        io::write_json(p, report)?;
    }
    print!("{}", pipeline::format_report(report));
    Ok(())
}

fn gen_scene(a: &GenScene) -> Result<()> {
    let mut spec: SceneSpec = match (&a.spec, a.preset) {
        (Some(p), _) => io::read_json(p)?,
        (None, Some(Preset::Tabletop)) => tabletop(a.layout_seed, a.size)?,
        (None, Some(Preset::TwoBoxes)) => two_boxes(a.size, DEFAULT_FRAMES)?,
        (None, None) => bail!("one of --spec or --preset is required"),
    };
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    if let (Some(id), Some(r)) = (a.hide_object, &a.hide_frames) {
        spec = reappearance_spec(&spec, id, parse_range(r)?)?;
    }
    let bundle = generate(&spec, a.seed)?;
    pipeline::write_scene(&a.out, &bundle)?;
    info!("wrote {} frames to {}", bundle.frames.len(), a.out.display());
    Ok(())
}

fn associate(a: &Associate) -> Result<()> {
    let mut config = a.config.load()?;
    if let Some(m) = a.mode {
        config.association.mode = match m {
            Mode::Adjacent => AssociationMode::Adjacent,
            Mode::Accumulated => AssociationMode::Accumulated,
        };
    }
    if a.no_fusion {
        config.ablation.pointmap_fusion = false;
    }
    config.validate()?;
    let scene = pipeline::load_scene(&a.scene)?;
    let assoc = pipeline::associate_scene(&scene, &config)?;
    pipeline::write_association(&a.out, &assoc)?;
    info!("associated {} frames, cloud of {} points", assoc.masks.len(), assoc.cloud.len());
    Ok(())
}

fn train(a: &Train) -> Result<()> {
    let mut config = a.config.load()?;
    if let Some(n) = a.iterations {
        config.training.iterations = n;
    }
    if let Some(s) = a.seed {
        config.training.seed = s;
    }
    if let Some(l) = a.lambda_plane {
        config.training.lambda_plane = l;
    }
    if let Some(k) = a.neighbors {
        config.training.neighbors = k;
    }
    config.validate()?;
    let scene = pipeline::load_scene(&a.scene)?;
    let masks = pipeline::load_association_masks(&a.assoc, scene.images.len())?;
    let cloud = io::read_cloud(&a.assoc.join(pipeline::ASSOC_CLOUD))?;
    let outcome = pipeline::train_scene(&scene, &masks, &cloud, &config)?;
    io::write_field(&a.out.join("field.ply"), &outcome.field)?;
    io::write_loss_log(&a.out.join("loss.csv"), &outcome.log)?;
    info!("trained {} splats", outcome.field.len());
    Ok(())
}

fn eval2d(a: &Eval2d) -> Result<()> {
    let scene = pipeline::load_scene(&a.scene)?;
    let preds = pipeline::load_association_masks(&a.pred, scene.gt_masks.len())?;
    let report = pipeline::eval_2d(&preds, &scene.gt_masks)?;
    print_report(&report, a.report.as_deref())
}

fn eval3d(a: &Eval3d) -> Result<()> {
    let config = a.config.load()?;
    config.validate()?;
    let gamma = a.gamma.unwrap_or(config.eval.gamma);
    let scene = pipeline::load_scene(&a.scene)?;
    let field = io::read_field(&a.field)?;
    let report = pipeline::eval_3d(&field, &scene, gamma)?;
    print_report(&report, a.report.as_deref())
}

fn edit(a: &Edit) -> Result<()> {
    let field = io::read_field(&a.field)?;
    let (edited, status) = match a.op {
        EditOp::Delete => delete_object(&field, a.id),
        EditOp::Move => {
            let t = a
                .translation
                .as_deref()
                .ok_or_else(|| anyhow!("--translation is required for move"))?;
            move_object(&field, a.id, parse_vec3(t)?)
        }
    };
    match status {
        EditStatus::Applied { affected } => println!("status=applied affected={affected}"),
        EditStatus::UnknownId => println!("status=unknown-id affected=0"),
    }
    io::write_field(&a.out, &edited)?;
    Ok(())
}

fn render(a: &Render) -> Result<()> {
    let config = a.config.load()?;
    config.validate()?;
    let camera: Camera = match (&a.pose, &a.scene, a.camera) {
        (Some(p), _, _) => io::read_json(p)?,
        (None, Some(scene), Some(i)) => {
            let manifest: pipeline::Manifest = io::read_json(&scene.join(pipeline::MANIFEST))?;
            manifest
                .frames
                .get(i)
                .map(|f| f.camera.clone())
                .ok_or_else(|| anyhow!("camera index {i} is out of range ({} frames)", manifest.frames.len()))?
        }
        _ => bail!("give either --pose or --scene with --camera"),
    };
    camera.validate()?;
    let field = io::read_field(&a.field)?;
    let (image, mask) = pipeline::render_views(&field, &camera, config.eval.min_alpha);
    io::write_image(&a.out_image, &image)?;
    if let Some(p) = &a.out_mask {
        io::write_mask(p, &mask)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Associate(a) => associate(a),
        Command::Train(a) => train(a),
        Command::Eval2d(a) => eval2d(a),
        Command::Eval3d(a) => eval3d(a),
        Command::Edit(a) => edit(a),
        Command::Render(a) => render(a),
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<segfield_core::Error>())
        .map_or("invalid-input", |e| e.kind())
}

/// The error chain joined with `: `, skipping causes already quoted by
/// their parent.
fn error_message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn report_error(kind: &str, message: &str) {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!(
        "error kind={kind} message={}",
        serde_json::to_string(&one_line).expect("strings serialize")
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(error_kind(&e), &error_message(&e));
            ExitCode::FAILURE
        }
    }
}
