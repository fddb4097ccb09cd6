//! Command-line driver: `pretrain`, `finetune`, `linprobe` and `attn-viz`.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures while running (non-finite loss, I/O, unreadable files).

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use macrl::checkpoint::{Checkpoint, CheckpointError};
use macrl::config::{RunConfig, Stage};
use macrl::data::{load_cifar_binary, synth_dataset, CifarMeta, ImageRecord};
use macrl::metrics::{MetricsRow, MetricsWriter};
use macrl::model::Macrl;
use macrl::rollout::{attention_maps, attention_rollout, heatmap, relevance, write_ppm};
use macrl::train::{finetune, linear_probe, FitOutcome, Observer, Pretrainer};
use macrl::Error;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const EFFECTIVE_CONFIG: &str = "effective.cfg";
/// Name of the held-out split inside a CIFAR directory.
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Parser)]
#[command(
    name = "macrl",
    version,
    about = "Masked contrastive pre-training for small vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train encoder, decoder and projector on unlabelled images.
    Pretrain(RunArgs),
    /// Train the encoder and a classification head end to end.
    Finetune(RunArgs),
    /// Train a classification head on the frozen encoder.
    Linprobe(RunArgs),
    /// Write attention-rollout heat maps next to the input images.
    #[command(name = "attn-viz")]
    AttnViz(VizArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Plain-text `key=value` configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CIFAR binary file or directory, or `synth` for generated stripes.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    /// Number of images to render.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(CheckpointError::Incompatible { .. }) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("io: {e}"))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Errors are printed to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn dispatch(cmd: Command) -> Outcome<()> {
    match cmd {
        Command::Pretrain(a) => pretrain(&a.common),
        Command::Finetune(a) => classify(&a.common, Stage::Finetune),
        Command::Linprobe(a) => classify(&a.common, Stage::Linprobe),
        Command::AttnViz(a) => attn_viz(&a.common, a.count),
    }
}

fn required<'a, T: ?Sized>(v: Option<&'a T>, flag: &str, cmd: &str) -> Outcome<&'a T> {
    v.ok_or_else(|| Failure::Usage(format!("{cmd} needs --{flag}")))
}

/// Stage defaults, optionally replaced by a checkpoint's model, then the
/// config file, the `--set` pairs and `--seed`.
fn build_config(
    c: &Common,
    stage: Stage,
    model: Option<&macrl::model::ModelConfig>,
) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::for_stage(stage);
    if let Some(m) = model {
        cfg.model = m.clone();
    }
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &c.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got `{pair}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    cfg.train.stage = stage;
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    if !path.is_file() {
        return Err(Failure::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?)
}

/// Training and held-out images. A CIFAR directory holding the test file
/// uses it as the held-out split; any other source holds out the last
/// `eval_fraction` of its records.
fn load_data(source: &str, cfg: &RunConfig) -> Outcome<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let meta = CifarMeta {
        num_classes: cfg.model.num_classes,
    };
    let (train, eval) = if source == "synth" {
        let all = synth_dataset(&cfg.data.synth(&cfg.model))?;
        split(all, cfg.train.eval_fraction)
    } else {
        let path = Path::new(source);
        if !path.exists() {
            return Err(Failure::Usage(format!(
                "data path {} does not exist",
                path.display()
            )));
        }
        if path.is_dir() {
            let test = path.join(CIFAR_TEST_FILE);
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin") && *p != test)
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Failure::Usage(format!(
                    "no training .bin files in {}",
                    path.display()
                )));
            }
            let mut train = Vec::new();
            for f in files {
                train.extend(load_cifar_binary(&f, meta)?);
            }
            if test.is_file() {
                (train, load_cifar_binary(&test, meta)?)
            } else {
                split(train, cfg.train.eval_fraction)
            }
        } else {
            split(load_cifar_binary(path, meta)?, cfg.train.eval_fraction)
        }
    };
    let m = &cfg.model;
    if let Some(bad) = train
        .iter()
        .chain(&eval)
        .find(|r| r.height != m.image_size || r.width != m.image_size || r.channels != m.channels)
    {
        return Err(Failure::Usage(format!(
            "image_size/channels: data is {}x{}x{}, model expects {}x{}x{}",
            bad.height, bad.width, bad.channels, m.image_size, m.image_size, m.channels
        )));
    }
    if train.is_empty() {
        return Err(Failure::Usage(format!("no training images in {source}")));
    }
    Ok((train, eval))
}

fn split(mut all: Vec<ImageRecord>, fraction: f64) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let held = (all.len() as f64 * fraction).round() as usize;
    let eval = all.split_off(all.len() - held.min(all.len()));
    (all, eval)
}

/// Writes metrics rows and checkpoints into the output directory.
struct Sink {
    dir: PathBuf,
    metrics: MetricsWriter,
}

impl Sink {
    fn open(dir: &Path, cfg: &RunConfig) -> Outcome<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(EFFECTIVE_CONFIG), cfg.to_text())?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            metrics: MetricsWriter::open(&dir.join(METRICS_FILE))?,
        })
    }
}

impl Observer for Sink {
    fn on_row(&mut self, row: &MetricsRow) -> macrl::Result<()> {
        self.metrics.write(row)
    }

    fn on_epoch_end(&mut self, _epoch: u64) -> macrl::Result<()> {
        self.metrics.flush()
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint, last: bool) -> macrl::Result<()> {
        self.metrics.flush()?;
        let name = if last {
            FINAL_CHECKPOINT.to_string()
        } else {
            format!("step_{}.ckpt", ckpt.step)
        };
        ckpt.save(&self.dir.join(name))
    }
}

fn pretrain(c: &Common) -> Outcome<()> {
    let data = required(c.data.as_deref(), "data", "pretrain")?;
    let out = required(c.out.as_deref(), "out", "pretrain")?;
    let resume = c.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let cfg = build_config(c, Stage::Pretrain, resume.as_ref().map(|k| &k.model))?;
    let (mut images, eval) = load_data(data, &cfg)?;
    // pre-training uses labels of neither split
    images.extend(eval);
    let mut trainer = match &resume {
        Some(ckpt) => Pretrainer::<f32>::from_checkpoint(cfg.clone(), ckpt)?,
        None => Pretrainer::<f32>::new(cfg.clone())?,
    };
    let mut sink = Sink::open(out, &cfg)?;
    trainer.run(&images, &mut sink)?;
    let r = trainer.last_report;
    println!("pretrain: {} steps, {r}", trainer.step);
    Ok(())
}

fn classify(c: &Common, stage: Stage) -> Outcome<()> {
    let cmd = stage.name();
    let data = required(c.data.as_deref(), "data", cmd)?;
    let out = required(c.out.as_deref(), "out", cmd)?;
    let path = required(c.checkpoint.as_deref(), "checkpoint", cmd)?;
    let ckpt = load_checkpoint(path)?;
    let cfg = build_config(c, stage, Some(&ckpt.model))?;
    ckpt.check_compatible(&cfg.model).map_err(Error::from)?;
    let (backbone, dropped) = ckpt.into_backbone();
    if !dropped.is_empty() {
        eprintln!("{cmd}: dropped {} from the checkpoint", dropped.join(", "));
    }
    let (train, eval) = load_data(data, &cfg)?;
    let mut sink = Sink::open(out, &cfg)?;
    let result: FitOutcome<f32> = match stage {
        Stage::Linprobe => linear_probe(&cfg, backbone, &train, &eval, &mut sink)?,
        _ => finetune(&cfg, backbone, &train, &eval, &mut sink)?,
    };
    println!(
        "{cmd}: {} steps, accuracy {:.4} (initial {:.4})",
        result.steps,
        result.final_accuracy(),
        result.initial_accuracy
    );
    Ok(())
}

fn attn_viz(c: &Common, count: usize) -> Outcome<()> {
    let data = required(c.data.as_deref(), "data", "attn-viz")?;
    let out = required(c.out.as_deref(), "out", "attn-viz")?;
    let path = required(c.checkpoint.as_deref(), "checkpoint", "attn-viz")?;
    let ckpt = load_checkpoint(path)?;
    let cfg = build_config(c, ckpt.stage, Some(&ckpt.model))?;
    let (mut images, eval) = load_data(data, &cfg)?;
    images.extend(eval);
    images.truncate(count);
    let model = Macrl::<f32>::new(cfg.model.clone())?;
    let (params, _) = ckpt.into_backbone();
    let maps = attention_maps(&model, &params, &images)?;
    let (grid, patch) = (cfg.model.grid(), cfg.model.patch_size);
    fs::create_dir_all(out)?;
    for (i, img) in images.iter().enumerate() {
        let rel = relevance(&attention_rollout(&maps, i)?, grid * grid);
        write_ppm(&out.join(format!("img{i:03}_orig.ppm")), img)?;
        write_ppm(
            &out.join(format!("img{i:03}_attn.ppm")),
            &heatmap(&rel, grid, patch),
        )?;
    }
    println!(
        "attn-viz: wrote {} image pairs to {}",
        images.len(),
        out.display()
    );
    Ok(())
}
