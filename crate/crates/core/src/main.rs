use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use mtl_lab::attention::AttentionTrace;
use mtl_lab::config::RunConfig;
use mtl_lab::metrics::{render_table, MetricTable, MetricsReport};
use mtl_lab::synth::{assemble_dataset, load_all, sample_seed};
use mtl_lab::trainer::{
    evaluate, infer, load_checkpoint, prepare_dataset, run_training, CheckpointKind, Model, Trainer, Weights, EVAL_PROTOCOL,
};
use mtl_lab::viz::{self, FlowScale};
use mtl_lab::{store, Annotation, Raster, TaskId};

#[derive(Parser, Debug)]
#[command(name = "mtl-lab", version = mtl_lab::version(), about = "Multi-task latent regression on procedural toy scenes")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and data seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this command's artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root (overrides `data.root`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and held-out toy datasets.
    GenData,
    /// Train the single-stream model on all tasks.
    TrainStage1,
    /// Train the multi-stream model from a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a single-task baseline.
    TrainSingle {
        #[arg(long)]
        task: TaskId,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of single-task baseline runs (one subdirectory per task).
        #[arg(long)]
        baselines: Option<PathBuf>,
    },
    /// Predict one task for one input.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long)]
        frame_a: PathBuf,
        #[arg(long)]
        frame_b: Option<PathBuf>,
    },
    /// Color-code a flow file, or draw the color wheel legend when no input is given.
    VizFlow {
        #[arg(long)]
        input: Option<PathBuf>,
        /// `auto` or a magnitude.
        #[arg(long, default_value = "auto")]
        scale: String,
    },
    /// Normalized task-attention bar groups from a trace CSV or a multi-stream checkpoint.
    VizAttn {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated layer indices to keep.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Render a comparison table from metrics JSON files.
    Report {
        metrics: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mtl_lab::Error> for Failure {
    fn from(e: mtl_lab::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<serde_json::Value, Failure>;

struct Ctx {
    cfg: RunConfig,
    config_hash: String,
    out: PathBuf,
}

impl Ctx {
    fn data_root(&self) -> &Path {
        &self.cfg.data.root
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    {
        let n = std::env::var("MTL_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1);
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::TrainStage1 => "train-stage1",
        Command::TrainStage2 { .. } => "train-stage2",
        Command::TrainSingle { .. } => "train-single",
        Command::Eval { .. } => "eval",
        Command::Infer { .. } => "infer",
        Command::VizFlow { .. } => "viz-flow",
        Command::VizAttn { .. } => "viz-attn",
        Command::Report { .. } => "report",
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(anyhow!("config {}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    if let Some(d) = &cli.data {
        cfg.data.root = d.clone();
    }
    let name = command_name(&cli.cmd);
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(|o| o.join(name)))
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let config_hash = cfg.hash().map_err(|e| Failure::Runtime(e.into()))?;
    let ctx = Ctx { cfg, config_hash, out };

    let details = match &cli.cmd {
        Command::GenData => gen_data(&ctx),
        Command::TrainStage1 => train(&ctx, Stage::One),
        Command::TrainStage2 { checkpoint } => train(&ctx, Stage::Two(checkpoint.as_deref())),
        Command::TrainSingle { task } => train(&ctx, Stage::Single(*task)),
        Command::Eval { checkpoint, baselines } => eval(&ctx, checkpoint, baselines.as_deref()),
        Command::Infer { checkpoint, task, frame_a, frame_b } => infer_cmd(&ctx, checkpoint, *task, frame_a, frame_b.as_deref()),
        Command::VizFlow { input, scale } => viz_flow(&ctx, input.as_deref(), scale),
        Command::VizAttn { trace, checkpoint, layers } => viz_attn(&ctx, trace.as_deref(), checkpoint.as_deref(), layers.as_deref()),
        Command::Report { metrics } => report(&ctx, metrics),
    }?;

    let summary = json!({
        "command": name,
        "version": mtl_lab::version(),
        "config_hash": ctx.config_hash,
        "seed": ctx.cfg.train.seed,
        "details": details,
    });
    let path = ctx.out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn gen_data(ctx: &Ctx) -> CmdResult {
    let d = &ctx.cfg.data;
    let m = &ctx.cfg.model;
    let root = d.root.clone();
    let mut sets = Vec::new();
    for (split, n, seed) in [("train", d.samples_per_dataset, d.seed), ("eval", d.eval_samples.max(1), sample_seed(d.seed, 0xE7A1))] {
        for row in &d.coverage.rows {
            let manifest = assemble_dataset(&root.join(split), row, n, seed, m.image_height, m.image_width, m.codec.factor)
                .map_err(anyhow::Error::from)?;
            let checksum = store::tree_checksum(&root.join(split).join(&row.dataset_id)).map_err(anyhow::Error::from)?;
            println!("{split}/{}: {} samples, sha256 {checksum}", row.dataset_id, manifest.samples.len());
            sets.push(json!({"split": split, "dataset": row.dataset_id, "samples": manifest.samples.len(), "sha256": checksum}));
        }
    }
    Ok(json!({ "root": root, "datasets": sets }))
}

enum Stage<'a> {
    One,
    Two(Option<&'a Path>),
    Single(TaskId),
}

fn load_split(ctx: &Ctx, split: &str) -> anyhow::Result<Vec<mtl_lab::synth::Dataset>> {
    let dir = ctx.data_root().join(split);
    load_all(&dir).with_context(|| format!("loading datasets from {} (run gen-data first)", dir.display()))
}

fn train(ctx: &Ctx, stage: Stage) -> CmdResult {
    let mut tcfg = ctx.cfg.train.clone();
    let (model, weights, steps, kind) = match stage {
        Stage::Two(ckpt) => {
            let path = ckpt.ok_or_else(|| usage(anyhow!("train-stage2 needs --checkpoint pointing at a stage-1 checkpoint")))?;
            let c = load_checkpoint(&checkpoint_dir(path)).map_err(|e| usage(anyhow!("stage-1 checkpoint {}: {e}", path.display())))?;
            if c.manifest.kind != CheckpointKind::Stage1 {
                return Err(usage(anyhow!("{} is a {:?} checkpoint, not stage 1", path.display(), c.manifest.kind)));
            }
            let Weights::Single(p) = &c.weights else { unreachable!("stage-1 checkpoints hold single-stream weights") };
            let w = Weights::multi_from_single(&c.model, p, tcfg.seed);
            (c.model, w, tcfg.stage2_steps, CheckpointKind::Stage2)
        }
        Stage::One | Stage::Single(_) => {
            let model = Model::new(ctx.cfg.model.clone(), tcfg.seed).map_err(|e| usage(anyhow!(e)))?;
            let w = Weights::fresh(&model, tcfg.seed).map_err(anyhow::Error::from)?;
            match stage {
                Stage::Single(t) => {
                    tcfg.sampling = tcfg.sampling.single_task(t);
                    (model, w, tcfg.single_task_steps, CheckpointKind::Single(t))
                }
                _ => (model, w, tcfg.stage1_steps, CheckpointKind::Stage1),
            }
        }
    };
    let data = load_split(ctx, "train")?;
    let mut model = model;
    if matches!(kind, CheckpointKind::Stage1 | CheckpointKind::Single(_)) {
        let mse = model.prefit_codec(&data, tcfg.seed).map_err(anyhow::Error::from)?;
        if mse > 0.0 {
            println!("codec prefit reconstruction mse {mse:.6}");
        }
    }
    let prepared = data.iter().map(|d| prepare_dataset(&model, d)).collect::<Result<Vec<_>, _>>().map_err(anyhow::Error::from)?;
    let mut trainer = Trainer::new(model, weights, tcfg, &prepared).map_err(|e| usage(anyhow!(e)))?;
    let summary = run_training(&mut trainer, steps, kind, &ctx.out).map_err(anyhow::Error::from)?;
    println!(
        "{} steps, loss first decile {:.5} -> last decile {:.5}; checkpoints in {}",
        summary.steps,
        summary.first_decile_loss,
        summary.last_decile_loss,
        ctx.out.display()
    );
    Ok(serde_json::to_value(&summary).map_err(anyhow::Error::from)?)
}

/// Resolves a run directory to its `final` checkpoint; checkpoint directories pass through.
fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("manifest.json").is_file() {
        p.to_path_buf()
    } else {
        p.join("final")
    }
}

fn baseline_table(dir: &Path, datasets: &[mtl_lab::synth::Dataset]) -> anyhow::Result<(MetricTable, Vec<String>)> {
    let mut table = MetricTable::default();
    let mut used = Vec::new();
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading baselines {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let Ok(c) = load_checkpoint(&checkpoint_dir(&sub)) else { continue };
        let CheckpointKind::Single(task) = c.manifest.kind else { continue };
        let protocol: Vec<(TaskId, &str)> = EVAL_PROTOCOL.iter().copied().filter(|(t, _)| *t == task).collect();
        let out = evaluate(&c.model, &c.weights, &format!("single:{task}"), datasets, &protocol)?;
        for e in out.report.entries {
            table.insert(e.task, &e.dataset, e.value);
        }
        used.push(format!("{task}={}", sub.display()));
    }
    Ok((table, used))
}

fn eval(ctx: &Ctx, ckpt: &Path, baselines: Option<&Path>) -> CmdResult {
    let c = load_checkpoint(&checkpoint_dir(ckpt)).map_err(|e| usage(anyhow!(e)))?;
    let data = load_split(ctx, "eval")?;
    let name = match c.manifest.kind {
        CheckpointKind::Stage1 => "stage1".to_string(),
        CheckpointKind::Stage2 => "stage2".to_string(),
        CheckpointKind::Single(t) => format!("single:{t}"),
    };
    let mut out = evaluate(&c.model, &c.weights, &name, &data, &EVAL_PROTOCOL)?;
    let mut rows = Vec::new();
    if let Some(b) = baselines {
        let (table, used) = baseline_table(b, &data)?;
        out.report.attach_baseline(&table, &used.join(";"));
        rows.push(("single-task".to_string(), table, None));
    }
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    rows.push((name, out.report.table(), out.report.delta_m));
    let text = render_table(&rows);
    print!("{text}");
    write(&ctx.out.join("table.txt"), text.as_bytes())?;
    write(&ctx.out.join("metrics.json"), serde_json::to_string_pretty(&out.report).map_err(anyhow::Error::from)?.as_bytes())?;
    if !out.trace.rows.is_empty() {
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).map_err(anyhow::Error::from)?;
        write(&ctx.out.join("attention_trace.csv"), &buf)?;
    }
    Ok(json!({ "metrics": "metrics.json", "delta_m": out.report.delta_m, "warnings": out.report.warnings }))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn save_png(path: &Path, img: &Raster) -> anyhow::Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).ok_or_else(|| anyhow!("raster is not RGB"))?;
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Reads a frame from a PNG (mapped to `[-1, 1]`) or from a `.bin` raster with its sidecar.
fn read_frame(path: &Path) -> anyhow::Result<Raster> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => {
            let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
            let data = img.as_raw().iter().map(|&v| f64::from(v) / 127.5 - 1.0).collect();
            Ok(Raster::new(img.height() as usize, img.width() as usize, 3, data)?)
        }
        Some("bin") => read_bin(path),
        _ => bail!("{}: expected a .png or .bin frame", path.display()),
    }
}

fn read_bin(path: &Path) -> anyhow::Result<Raster> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| anyhow!("bad path {}", path.display()))?;
    Ok(store::read_raster(dir, stem)?)
}

fn infer_cmd(ctx: &Ctx, ckpt: &Path, task: TaskId, a: &Path, b: Option<&Path>) -> CmdResult {
    let c = load_checkpoint(&checkpoint_dir(ckpt)).map_err(|e| usage(anyhow!(e)))?;
    let fa = read_frame(a).map_err(usage)?;
    let fb = b.map(read_frame).transpose().map_err(usage)?;
    if task.frames_required() == 2 && fb.is_none() {
        eprintln!("warning: {task} expects two frames; repeating --frame-a");
    }
    let pred = infer(&c.model, &c.weights, &fa, fb.as_ref(), task)?;
    let view = match &pred {
        Annotation::Labels(l) => {
            store::write_labels(&ctx.out, "prediction", l, Some(task))?;
            viz::semantic_to_color(l, &c.model.palette)
        }
        Annotation::Map(r) => {
            store::write_raster(&ctx.out, "prediction", r, Some(task))?;
            match task {
                TaskId::OpticalFlow => viz::flow_to_color(r, FlowScale::Auto)?,
                TaskId::SceneFlow => viz::sceneflow_to_color(r, FlowScale::Auto, FlowScale::Auto)?,
                TaskId::Depth => viz::depth_to_color(r, None)?,
                TaskId::Shading => Raster::from_channels(r.height, r.width, &[r.channel(0), r.channel(0), r.channel(0)])
                    .map(|x| viz::signed_to_unit(&x))?,
                _ => viz::signed_to_unit(r),
            }
        }
    };
    save_png(&ctx.out.join("prediction.png"), &view)?;
    Ok(json!({ "task": task, "prediction": "prediction.bin", "preview": "prediction.png", "depth_colormap": viz::DEPTH_COLORMAP }))
}

fn parse_scale(s: &str) -> Result<FlowScale, Failure> {
    if s == "auto" {
        return Ok(FlowScale::Auto);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| *v > 0.0)
        .map(FlowScale::Value)
        .ok_or_else(|| usage(anyhow!("--scale must be `auto` or a positive number, got `{s}`")))
}

fn viz_flow(ctx: &Ctx, input: Option<&Path>, scale: &str) -> CmdResult {
    let scale = parse_scale(scale)?;
    let flow = match input {
        Some(p) => read_bin(p).map_err(usage)?,
        None => {
            let n = 64usize;
            let c = (n as f64 - 1.0) / 2.0;
            let data = (0..n * n).flat_map(|p| [(p % n) as f64 - c, (p / n) as f64 - c]).collect();
            Raster::new(n, n, 2, data)?
        }
    };
    let img = match flow.channels {
        2 => viz::flow_to_color(&flow, scale)?,
        3 => viz::sceneflow_to_color(&flow, scale, FlowScale::Auto)?,
        c => return Err(usage(anyhow!("flow must have 2 or 3 channels, got {c}"))),
    };
    save_png(&ctx.out.join("flow.png"), &img)?;
    Ok(json!({ "image": "flow.png", "channels": flow.channels }))
}

fn viz_attn(ctx: &Ctx, trace: Option<&Path>, ckpt: Option<&Path>, layers: Option<&[usize]>) -> CmdResult {
    let tr = match (trace, ckpt) {
        (Some(p), _) => {
            let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            AttentionTrace::read_csv(&s).map_err(|e| usage(anyhow!(e)))?
        }
        (None, Some(c)) => {
            let c = load_checkpoint(&checkpoint_dir(c)).map_err(|e| usage(anyhow!(e)))?;
            if !matches!(c.weights, Weights::Multi { .. }) {
                return Err(usage(anyhow!("attention traces need a stage-2 checkpoint")));
            }
            let data = load_split(ctx, "eval")?;
            evaluate(&c.model, &c.weights, "stage2", &data, &EVAL_PROTOCOL)?.trace
        }
        (None, None) => return Err(usage(anyhow!("viz-attn needs --trace or --checkpoint"))),
    };
    let groups = viz::attention_groups(&tr, layers).map_err(|e| usage(anyhow!(e)))?;
    let mut buf = Vec::new();
    viz::write_groups_csv(&groups, &mut buf).map_err(anyhow::Error::from)?;
    write(&ctx.out.join("attention_groups.csv"), &buf)?;
    save_png(&ctx.out.join("attention_bars.png"), &viz::render_bars(&groups, 64))?;
    Ok(json!({ "groups": groups.len(), "csv": "attention_groups.csv", "image": "attention_bars.png" }))
}

fn report(ctx: &Ctx, files: &[PathBuf]) -> CmdResult {
    if files.is_empty() {
        return Err(usage(anyhow!("report needs at least one metrics.json")));
    }
    let mut rows = Vec::new();
    for f in files {
        let s = fs::read_to_string(f).with_context(|| format!("reading {}", f.display())).map_err(usage)?;
        let r: MetricsReport = serde_json::from_str(&s).with_context(|| format!("parsing {}", f.display())).map_err(usage)?;
        rows.push((r.model.clone(), r.table(), r.delta_m));
    }
    let text = render_table(&rows);
    print!("{text}");
    write(&ctx.out.join("table.txt"), text.as_bytes())?;
    Ok(json!({ "rows": rows.len(), "table": "table.txt" }))
}
