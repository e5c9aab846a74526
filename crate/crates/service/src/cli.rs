//! Command-line interface. Exit codes: 0 ok, 2 usage, 3 validation, 4 runtime.

use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sgedit_core::inpaint::{inpaint_with_progress, write_trace_csv, GuideMode, InpaintSpec};
use sgedit_core::metrics::report;
use sgedit_core::pipeline::{execute, plan, PipelineConfig, PipelineError, Resources, SegmentationConfig};
use sgedit_core::position::{
    build_dataset, evaluate, read_jsonl, train, write_jsonl, PositionConfig, PositionModel, TrainOptions, Vocabulary,
};
use sgedit_core::segmask::Mask;
use sgedit_core::synth::{generate_scene, position_pairs, scene_name, SceneOptions};
use sgedit_core::{BBox, EditOp, Image, SceneGraph};
use thiserror::Error;

use crate::http::{router, AppState};
use crate::runner::{load_resources, Runner};
use crate::store::Store;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn invalid(what: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{what}: {e}"))
}

fn runtime(what: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{what}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "sgedit", version, about = "Edit images by editing their scene graphs")]
pub struct Cli {
    /// Log filter, e.g. `info` or `sgedit_core=debug`.
    #[arg(long, global = true, default_value = "info", env = "RUST_LOG")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full editing pipeline on one image.
    Edit(EditArgs),
    /// Fill the hole of a mask (black = hole) in an image.
    Inpaint(InpaintArgs),
    /// Train a position model on a JSONL dataset.
    TrainPosition(TrainArgs),
    /// Score a position model on a JSONL dataset.
    EvalPosition(EvalArgs),
    /// Compare two images, optionally inside a region of interest.
    Metrics(MetricsArgs),
    /// Write CLEVR-like scenes with scene graphs and ground truth.
    GenSynthetic(GenArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

/// Inpainting knobs shared by `edit` and `inpaint`. Each set flag overrides
/// the config file, which overrides the built-in default.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct SpecFlags {
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Hole dilation radius in pixels.
    #[arg(long)]
    pub dilate: Option<usize>,
    /// Seeds both the noise input and the network parameters.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl SpecFlags {
    fn apply(&self, spec: &mut InpaintSpec, origin: &str, log: &mut Vec<String>) {
        let mut set = |name: &str, given: bool, value: String| {
            let source = if given { "flag" } else { origin };
            log.push(format!("{name} = {value} ({source})"));
        };
        if let Some(v) = self.iters {
            spec.iterations = v;
        }
        set("iterations", self.iters.is_some(), spec.iterations.to_string());
        if let Some(v) = self.lambda {
            spec.lambda = v;
        }
        set("lambda", self.lambda.is_some(), spec.lambda.to_string());
        if let Some(v) = self.dilate {
            spec.dilation_radius = Some(v);
        }
        set(
            "dilation_radius",
            self.dilate.is_some(),
            spec.dilation_radius.map_or("auto".into(), |r| r.to_string()),
        );
        if let Some(v) = self.seed {
            spec.noise_seed = v;
            spec.param_seed = v;
        }
        set("seed", self.seed.is_some(), format!("{}/{}", spec.noise_seed, spec.param_seed));
        if let Some(v) = self.depth {
            spec.network.depth = v;
        }
        set("depth", self.depth.is_some(), spec.network.depth.to_string());
        if let Some(v) = self.channels {
            spec.network.channels = v;
        }
        set("channels", self.channels.is_some(), spec.network.channels.to_string());
        if let Some(v) = self.lr {
            spec.learning_rate = v;
        }
        set("learning_rate", self.lr.is_some(), spec.learning_rate.to_string());
    }
}

#[derive(Debug, clap::Args)]
pub struct EditArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// One edit op or an array of them.
    #[arg(long)]
    pub ops: PathBuf,
    /// Job directory; rerunning into the same directory resumes.
    #[arg(long)]
    pub out: PathBuf,
    /// Pipeline config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub spec: SpecFlags,
    #[arg(long)]
    pub position_model: Option<String>,
    #[arg(long)]
    pub query_library: Option<String>,
    /// URL of an external segmentation service.
    #[arg(long)]
    pub segment_url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InpaintMode {
    Plain,
    Guided,
    GuidedRows,
}

#[derive(Debug, clap::Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Mask PNG: white is known, black is the hole.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, value_enum, default_value = "guided")]
    pub mode: InpaintMode,
    #[arg(long)]
    pub out: PathBuf,
    /// Inpaint spec JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the per-iteration loss trace as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub spec: SpecFlags,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// JSONL, one training example per line.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Ignore object categories (all CLEVR objects look alike to the model).
    #[arg(long)]
    pub clevr_mode: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub hidden_size: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Side length in pixels that errors are reported at.
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
}

#[derive(Debug, clap::Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    /// Ground truth to score `after` against instead of `before`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// `x0,y0,x1,y1`, normalized to [0, 1], or pixels if any value exceeds 1.
    #[arg(long)]
    pub roi: Option<String>,
    /// Write metrics.json here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Also write this many position training examples to position.jsonl.
    #[arg(long, default_value_t = 0)]
    pub position_examples: usize,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long, env = "SIMBIL_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "SIMBIL_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "SIMBIL_DATA", default_value = "data")]
    pub data: PathBuf,
    #[arg(long, env = "SIMBIL_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// Pipeline config JSON used for jobs submitted without a spec.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| runtime(path.display(), e))
}

fn load_image(path: &Path) -> Result<Image, CliError> {
    Image::load(path).map_err(|e| invalid(path.display(), e))
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| invalid(format!("{} at `{}`", path.display(), e.path()), e.inner()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime(path.display(), e))?;
    fs::write(path, text + "\n").map_err(|e| runtime(path.display(), e))
}

fn log_settings(title: &str, lines: &[String]) {
    log::info!("{title}:");
    for l in lines {
        log::info!("  {l}");
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Edit(a) => cmd_edit(a),
        Command::Inpaint(a) => cmd_inpaint(a),
        Command::TrainPosition(a) => cmd_train(a),
        Command::EvalPosition(a) => cmd_eval(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::GenSynthetic(a) => cmd_gen(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Effective pipeline config for `edit` and `serve`, with the source of each setting.
pub fn pipeline_config(
    file: Option<&Path>,
    spec: &SpecFlags,
    position_model: Option<String>,
    query_library: Option<String>,
    segment_url: Option<String>,
) -> Result<(PipelineConfig, Vec<String>), CliError> {
    let (mut config, origin) = match file {
        Some(p) => (read_config::<PipelineConfig>(p)?, "config"),
        None => (PipelineConfig::default(), "default"),
    };
    let mut lines = Vec::new();
    spec.apply(&mut config.inpaint, origin, &mut lines);
    let mut opt = |name: &str, slot: &mut Option<String>, flag: Option<String>| {
        let given = flag.is_some();
        if given {
            *slot = flag;
        }
        let source = if given { "flag" } else { origin };
        lines.push(format!("{name} = {} ({source})", slot.as_deref().unwrap_or("none")));
    };
    opt("position_model", &mut config.position_model, position_model);
    opt("query_library", &mut config.query_library, query_library);
    let given = segment_url.is_some();
    if let Some(url) = segment_url {
        config.segmentation = SegmentationConfig::External { url };
    }
    lines.push(format!(
        "segmentation = {} ({})",
        match &config.segmentation {
            SegmentationConfig::Synthetic => "synthetic".to_string(),
            SegmentationConfig::External { url } => url.clone(),
        },
        if given { "flag" } else { origin }
    ));
    config.inpaint.validate().map_err(|e| invalid("inpaint spec", e))?;
    Ok((config, lines))
}

fn cmd_edit(a: EditArgs) -> Result<(), CliError> {
    let (config, lines) = pipeline_config(
        a.config.as_deref(),
        &a.spec,
        a.position_model,
        a.query_library,
        a.segment_url,
    )?;
    log_settings("edit settings", &lines);
    let image = load_image(&a.image)?;
    let graph = SceneGraph::parse(&read_text(&a.graph)?).map_err(|e| invalid(a.graph.display(), e))?;
    if (graph.width as usize, graph.height as usize) != (image.width, image.height) {
        return Err(invalid(
            a.graph.display(),
            format!(
                "graph is {}x{} but the image is {}x{}",
                graph.width, graph.height, image.width, image.height
            ),
        ));
    }
    let ops = EditOp::list_from_json(&read_text(&a.ops)?).map_err(|e| invalid(a.ops.display(), e))?;
    let p = plan(&graph, &ops).map_err(|e| invalid("edit plan", e))?;
    let (model, library) = load_resources(&config, image.width.max(image.height)).map_err(CliError::Runtime)?;
    let backend = config.segmentation.backend();
    let res = Resources {
        config: &config,
        backend: backend.as_ref(),
        position_model: model.as_ref(),
        library: &library,
    };
    fs::create_dir_all(&a.out).map_err(|e| runtime(a.out.display(), e))?;
    let mut last_step = usize::MAX;
    let mut progress = |p: &sgedit_core::pipeline::Progress| {
        if p.step_index != last_step {
            last_step = p.step_index;
            log::info!("step {}/{}: {}", p.step_index + 1, p.total_steps, p.step);
        }
    };
    let out = execute(&p, &image, &graph, &res, Some(&a.out), &mut progress).map_err(|e| match e {
        PipelineError::PlanMismatch => invalid(a.out.display(), e),
        other => CliError::Runtime(other.to_string()),
    })?;
    let resumed = out.steps.iter().filter(|s| s.resumed).count();
    log::info!(
        "done: {} steps ({resumed} resumed), result at {}",
        out.steps.len(),
        a.out.join("result.png").display()
    );
    if let Some(m) = &out.metrics {
        println!("{}", serde_json::to_string_pretty(m).expect("metrics serialize"));
    }
    Ok(())
}

/// Inpaint spec for a CLI mode. `plain` keeps the configured dilation so
/// `guided --lambda 0` reproduces it exactly.
pub fn inpaint_spec(mode: InpaintMode, file: Option<&Path>, flags: &SpecFlags) -> Result<(InpaintSpec, Vec<String>), CliError> {
    let (mut spec, origin) = match file {
        Some(p) => (read_config::<InpaintSpec>(p)?, "config"),
        None => (InpaintSpec::default(), "default"),
    };
    spec.guide_mode = match mode {
        InpaintMode::Plain => GuideMode::None,
        InpaintMode::Guided => GuideMode::Global,
        InpaintMode::GuidedRows => GuideMode::RowWise,
    };
    let mut lines = vec![format!("guide_mode = {:?} (flag)", spec.guide_mode)];
    flags.apply(&mut spec, origin, &mut lines);
    spec.validate().map_err(|e| invalid("inpaint spec", e))?;
    Ok((spec, lines))
}

fn cmd_inpaint(a: InpaintArgs) -> Result<(), CliError> {
    let (spec, lines) = inpaint_spec(a.mode, a.config.as_deref(), &a.spec)?;
    log_settings("inpaint settings", &lines);
    let image = load_image(&a.image)?;
    let mask = Mask::load(&a.mask).map_err(|e| invalid(a.mask.display(), e))?;
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(invalid(
            a.mask.display(),
            format!(
                "mask is {}x{} but the image is {}x{}",
                mask.width, mask.height, image.width, image.height
            ),
        ));
    }
    let total = spec.iterations;
    let mut progress = |row: &sgedit_core::inpaint::TraceRow| {
        if (row.iteration + 1) % 100 == 0 || row.iteration + 1 == total {
            log::info!("iteration {}/{total}: loss {:.6}", row.iteration + 1, row.total);
        }
    };
    let out = inpaint_with_progress(&image, &mask, &spec, &mut progress).map_err(|e| match e {
        sgedit_core::inpaint::InpaintError::InvalidSpec(_) | sgedit_core::inpaint::InpaintError::Shape(_) => {
            invalid("inpaint", e)
        }
        other => runtime("inpaint", other),
    })?;
    out.image.quantized().save_png(&a.out).map_err(|e| runtime(a.out.display(), e))?;
    if let Some(path) = &a.trace {
        let f = fs::File::create(path).map_err(|e| runtime(path.display(), e))?;
        write_trace_csv(&out.trace, f).map_err(|e| runtime(path.display(), e))?;
    }
    log::info!("wrote {} in {:.1}s", a.out.display(), out.elapsed.as_secs_f64());
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Vec<sgedit_core::position::TrainingExample>, CliError> {
    let f = fs::File::open(path).map_err(|e| runtime(path.display(), e))?;
    read_jsonl(BufReader::new(f)).map_err(|e| invalid(path.display(), e))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let data = read_dataset(&a.dataset)?;
    let mut config = if a.clevr_mode {
        PositionConfig::clevr()
    } else {
        PositionConfig::default()
    };
    if let Some(h) = a.hidden_size {
        config.d_h = h;
    }
    let opts = TrainOptions {
        epochs: a.epochs,
        batch: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    log::info!("training on {} examples: {config:?} {opts:?}", data.len());
    let mut model = PositionModel::new(config, Vocabulary::from_examples(&data), a.seed);
    let rep = train(&mut model, &data, &opts).map_err(|e| runtime("training", e))?;
    if let (Some(first), Some(last)) = (rep.loss_curve.first(), rep.loss_curve.last()) {
        log::info!("loss {first:.6} -> {last:.6}");
    }
    model.save(&a.out).map_err(|e| runtime(a.out.display(), e))?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let model = PositionModel::load(&a.model).map_err(|e| invalid(a.model.display(), e))?;
    let data = read_dataset(&a.dataset)?;
    let rep = evaluate(&model, &data, a.resolution).map_err(|e| invalid("evaluation", e))?;
    println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
    Ok(())
}

/// Parses `x0,y0,x1,y1`; pixel coordinates are normalized by the image size.
pub fn parse_roi(text: &str, width: usize, height: usize) -> Result<BBox, CliError> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| invalid("--roi", e))?;
    let [x0, y0, x1, y1] = v[..] else {
        return Err(invalid("--roi", "expected four comma-separated numbers"));
    };
    let b = if v.iter().any(|&c| c > 1.0) {
        BBox::new(x0 / width as f64, y0 / height as f64, x1 / width as f64, y1 / height as f64)
    } else {
        BBox::new(x0, y0, x1, y1)
    };
    if !b.is_valid() {
        return Err(invalid("--roi", format!("{text} is not a box inside the image")));
    }
    Ok(b)
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CliError> {
    let before = load_image(&a.before)?;
    let after = load_image(&a.after)?;
    let reference = a.reference.as_deref().map(load_image).transpose()?;
    let roi = a
        .roi
        .as_deref()
        .map(|r| parse_roi(r, after.width, after.height))
        .transpose()?;
    let m = report(&before, &after, roi, reference.as_ref()).map_err(|e| invalid("metrics", e))?;
    if let Some(out) = &a.out {
        write_json(out, &m)?;
    }
    println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    options: SceneOptions,
    scenes: Vec<String>,
    position_examples: usize,
    position_skipped: usize,
}

/// Writes `<name>.png`, `<name>.json` (scene graph), `<name>_background.png`
/// and `<name>_objects.json` per scene, plus `manifest.json`.
pub fn generate(out: &Path, scenes: usize, seed: u64, size: usize, position_examples: usize) -> Result<(), CliError> {
    let opts = SceneOptions {
        size,
        ..Default::default()
    };
    fs::create_dir_all(out).map_err(|e| runtime(out.display(), e))?;
    let mut names = Vec::new();
    for i in 0..scenes {
        let scene = generate_scene(seed, i, &opts);
        let name = scene_name(i);
        let save = |file: String, img: &Image| {
            let p = out.join(file);
            img.clone().quantized().save_png(&p).map_err(|e| runtime(p.display(), e))
        };
        save(format!("{name}.png"), &scene.image)?;
        save(format!("{name}_background.png"), &scene.background)?;
        fs::write(out.join(format!("{name}.json")), scene.graph.to_json() + "\n")
            .map_err(|e| runtime(out.display(), e))?;
        write_json(&out.join(format!("{name}_objects.json")), &scene.objects)?;
        names.push(name);
    }
    let (mut n_pos, mut skipped) = (0, 0);
    if position_examples > 0 {
        let pairs = position_pairs(position_examples, seed, &opts);
        let (examples, s) = build_dataset(&pairs, PositionConfig::default().max_triplets).map_err(|e| runtime("dataset", e))?;
        let p = out.join("position.jsonl");
        let f = fs::File::create(&p).map_err(|e| runtime(p.display(), e))?;
        write_jsonl(&examples, std::io::BufWriter::new(f)).map_err(|e| runtime(p.display(), e))?;
        n_pos = examples.len();
        skipped = s;
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            seed,
            options: opts,
            scenes: names,
            position_examples: n_pos,
            position_skipped: skipped,
        },
    )
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    if a.size < 16 {
        return Err(invalid("--size", "must be at least 16"));
    }
    generate(&a.out, a.scenes, a.seed, a.size, a.position_examples)?;
    log::info!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let (default_spec, lines) = pipeline_config(a.config.as_deref(), &SpecFlags::default(), None, None, None)?;
    log_settings("default job settings", &lines);
    log::info!("data = {}, workers = {}", a.data.display(), a.workers);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| invalid("--host/--port", e))?;
    let store = Arc::new(Store::open(&a.data).map_err(|e| runtime(a.data.display(), e))?);
    let runner = Runner::start(Arc::clone(&store), a.workers).map_err(|e| runtime("job runner", e))?;
    let state = Arc::new(AppState {
        store,
        runner,
        default_spec,
        extra_predicates: Vec::new(),
    });
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| runtime("tokio", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| runtime(addr, e))?;
        log::info!("listening on http://{}", listener.local_addr().map_err(|e| runtime(addr, e))?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                log::info!("shutting down");
            })
            .await
            .map_err(|e| runtime("server", e))
    })
}
