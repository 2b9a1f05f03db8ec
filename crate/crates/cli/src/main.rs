use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stylekernel::bench;
use stylekernel::config::RunConfig;
use stylekernel::decoder::{from_image, to_image};
use stylekernel::image_io::{load_image, save_image};
use stylekernel::trainer::{Dataset, LossReport, Trainer};
use stylekernel::vgg::Encoder;
use stylekernel::{GroupPermutation, RgbImage, StyleModel, Tensor};

#[derive(Parser)]
#[command(name = "stylekernel", version, about = "Arbitrary style transfer with predicted style kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Weight file (model weights, or the encoder when training).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// key=value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for anything random; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct Inference {
    /// Pad images to multiples of 16 by edge replication; outputs are cropped back.
    #[arg(long)]
    pad_to_16: bool,
    /// Random channel-group order instead of the identity.
    #[arg(long)]
    shuffle_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a content image in the style of another.
    Stylize {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        /// Output image (PNG, or PPM by extension).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
    },
    /// Blend two styles with each weight in `--alphas`.
    Interpolate {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style_a: PathBuf,
        #[arg(long)]
        style_b: PathBuf,
        /// Comma-separated weights of the first style, each in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
    },
    /// Train from the directories named in the config.
    Train {
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Total step count; overrides the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time inference over image sizes and filter lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the error chain on one line, skipping causes whose text the
/// message already contains.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string().replace('\n', " ");
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stylize {
            content,
            style,
            out,
            common,
            inference,
        } => stylize(&content, &style, &out, &common, &inference),
        Command::Interpolate {
            content,
            style_a,
            style_b,
            alphas,
            out,
            common,
            inference,
        } => interpolate(&content, [&style_a, &style_b], &alphas, &out, &common, &inference),
        Command::Train {
            out,
            steps,
            resume,
            common,
        } => train(out, steps, resume, &common),
        Command::Bench {
            sizes,
            ks,
            repeats,
            out,
            common,
        } => run_bench(&sizes, &ks, repeats, out.as_deref(), &common),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(w) = &common.weights {
        cfg.weights = Some(w.clone());
    }
    Ok(cfg)
}

fn load_model(cfg: &RunConfig) -> Result<StyleModel> {
    match &cfg.weights {
        Some(path) => StyleModel::load(path, cfg.train.model.clone())
            .with_context(|| format!("weights {}", path.display())),
        None => {
            log::warn!("no weights given; using random weights from seed {}", cfg.train.seed);
            Ok(StyleModel::seeded(cfg.train.model.clone(), cfg.train.seed)?)
        }
    }
}

fn permutation(cfg: &RunConfig, inference: &Inference) -> GroupPermutation {
    match inference.shuffle_seed.or(cfg.shuffle_seed) {
        Some(seed) => GroupPermutation::from_seed(seed),
        None => GroupPermutation::identity(),
    }
}

/// Loads an image as a model-domain tensor, padding if asked.
fn read_input(path: &Path, pad: bool) -> Result<(Tensor<f32>, (usize, usize))> {
    let img = load_image(path)?;
    let size = (img.width(), img.height());
    let img = if pad { img.pad_to_16() } else { img };
    if img.width() % 16 != 0 || img.height() % 16 != 0 {
        bail!(
            "{}: extents {}×{} must be multiples of 16 (use --pad-to-16)",
            path.display(),
            img.width(),
            img.height()
        );
    }
    Ok((from_image(&img), size))
}

fn write_output(x: &Tensor<f32>, (w, h): (usize, usize), path: &Path) -> Result<()> {
    let (img, clamped) = to_image(x)?;
    if clamped > 0 {
        log::info!("{clamped} pixel values clamped to [0, 255]");
    }
    let img: RgbImage = if (img.width(), img.height()) == (w, h) {
        img
    } else {
        img.crop_rect(0, 0, w, h)?
    };
    save_image(&img, path)?;
    Ok(())
}

fn stylize(content: &Path, style: &Path, out: &Path, common: &Common, inference: &Inference) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_model(&cfg)?;
    let (c, size) = read_input(content, inference.pad_to_16)?;
    let (s, _) = read_input(style, inference.pad_to_16)?;
    let y = model.stylize(&c, &s, &permutation(&cfg, inference))?;
    write_output(&y, size, out)
}

fn interpolate(
    content: &Path,
    styles: [&Path; 2],
    alphas: &[f64],
    out: &Path,
    common: &Common,
    inference: &Inference,
) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_model(&cfg)?;
    let (c, size) = read_input(content, inference.pad_to_16)?;
    let (a, _) = read_input(styles[0], inference.pad_to_16)?;
    let (b, _) = read_input(styles[1], inference.pad_to_16)?;
    let images = model.interpolate(&c, &a, &b, alphas, &permutation(&cfg, inference))?;
    fs::create_dir_all(out).map_err(|e| stylekernel::Error::io(out, e))?;
    for (i, (y, alpha)) in images.iter().zip(alphas).enumerate() {
        write_output(y, size, &out.join(format!("interp_{i:02}_alpha_{alpha:.3}.png")))?;
    }
    Ok(())
}

fn read_dir_images(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| stylekernel::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "ppm"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(load_image(p)?)).collect()
}

fn train(out: Option<PathBuf>, steps: Option<u64>, resume: Option<PathBuf>, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(steps) = steps {
        cfg.train.steps = steps;
    }
    let out = out
        .or(cfg.out_dir.clone())
        .context("no output directory (set out_dir or pass --out)")?;
    let (Some(cdir), Some(sdir)) = (&cfg.content_dir, &cfg.style_dir) else {
        bail!("config must set content_dir and style_dir");
    };
    let data = Dataset::new(read_dir_images(cdir)?, read_dir_images(sdir)?, cfg.train.crop)?;

    let mut trainer = match &resume {
        Some(path) => Trainer::load_checkpoint(path, cfg.train.clone())
            .with_context(|| format!("checkpoint {}", path.display()))?,
        None => {
            let encoder = match &cfg.weights {
                Some(p) => Some(Encoder::load(p, cfg.train.model.vgg_width)?),
                None => None,
            };
            Trainer::new(cfg.train.clone(), encoder)?
        }
    };

    fs::create_dir_all(&out).map_err(|e| stylekernel::Error::io(&out, e))?;
    let log_path = out.join("loss.csv");
    let fresh = resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| stylekernel::Error::io(&log_path, e))?;
    let io_err = |e| stylekernel::Error::io(&log_path, e);
    if fresh {
        writeln!(log, "{}", LossReport::CSV_HEADER).map_err(io_err)?;
    }

    let every = trainer.config.checkpoint_every;
    let mut saved = None;
    while trainer.step() < cfg.train.steps {
        let report = trainer.train_step(&data)?;
        writeln!(log, "{}", report.csv_row()).map_err(io_err)?;
        log::info!("step {} total {:.4}", report.step, report.total);
        if every > 0 && report.step % every == 0 {
            trainer.save_checkpoint(out.join(format!("checkpoint_{:06}.skw", report.step)))?;
            saved = Some(report.step);
        }
    }
    if saved != Some(trainer.step()) {
        trainer.save_checkpoint(out.join(format!("checkpoint_{:06}.skw", trainer.step())))?;
    }
    Ok(())
}

fn run_bench(sizes: &[usize], ks: &[usize], repeats: usize, out: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_model(&cfg)?;
    let rows = bench::run(&model.encoder, &model.config, sizes, ks, repeats, cfg.train.seed)?;
    let csv = bench::to_csv(&rows);
    match out {
        Some(path) => fs::write(path, csv).map_err(|e| stylekernel::Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}
