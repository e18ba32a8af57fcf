use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use specnet::fsutil::{write_atomic, write_string_atomic};
use specnet::image::{encode_mbt, load_mbt, load_png_rgb, save_png_rgb};
use specnet::networks::Checkpoint;
use specnet::pipeline::train::Models;
use specnet::pipeline::*;
use specnet::spectral::spectral_profile;
use specnet::{Error, ErrorCategory, ImagePair, MultiBandImage};

const CONFIG_ENV: &str = "SPECNET_CONFIG";
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "specnet", version, about = "Low-light enhancement through hyperspectral reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert between 8-bit RGB PNG and MBT multi-band files.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the radial spectral profile of an image as CSV.
    Profile {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep raw ring means instead of normalizing by the DC bin.
        #[arg(long)]
        raw: bool,
    },
    /// Generate a synthetic dataset (low/, high/, hsi/).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the cascade and write checkpoint, loss history and config.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a checkpoint on a paired dataset and write a per-image CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the normal image against itself.
        #[arg(long)]
        bypass: bool,
    },
    /// Train and score each ablation variant under one base config.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Evaluation set; defaults to the training data.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional markdown rendering of the table.
        #[arg(long)]
        markdown: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "model1,model2,full")]
        variants: Vec<Ablation>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write side-by-side panels (dark | enhanced | normal) as one PNG.
    Plot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set weights.lambda_spec=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Defaults, then the file, then `--set`, then `--seed`.
    fn resolve(&self) -> specnet::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn is_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn load_image(path: &Path) -> specnet::Result<MultiBandImage> {
    if is_ext(path, "png") {
        load_png_rgb(path)
    } else if is_ext(path, "mbt") {
        load_mbt(path)
    } else {
        Err(Error::Format(format!("{}: expected a .png or .mbt file", path.display())))
    }
}

fn save_mbt_atomic(img: &MultiBandImage, path: &Path) -> specnet::Result<()> {
    write_atomic(path, |w| encode_mbt(img, w))
}

fn convert(input: &Path, out: &Path) -> specnet::Result<()> {
    let img = load_image(input)?;
    if is_ext(out, "png") {
        save_png_rgb(&img, out)
    } else if is_ext(out, "mbt") {
        save_mbt_atomic(&img, out)
    } else {
        Err(Error::Format(format!("{}: expected a .png or .mbt file", out.display())))
    }
}

/// Builds the dataset in a sibling temp directory and renames it into place.
fn synth(out: &Path, count: usize, size: usize, seed: u64) -> specnet::Result<()> {
    if out.exists() {
        return Err(Error::Config(format!("{} already exists", out.display())));
    }
    let samples = synth_dataset(count, size, seed)?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::Builder::new()
        .prefix(".synth")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    write_dataset(tmp.path(), &samples)?;
    std::fs::rename(tmp.path(), out).map_err(|e| Error::io(out, e))?;
    info!("wrote {count} synthetic samples to {}", out.display());
    Ok(())
}

fn train_cmd(data: &Path, out: &Path, init: Option<&Path>, cfg: &TrainConfig) -> specnet::Result<()> {
    let (samples, skipped) = load_dataset(data)?;
    info!("{} samples ({} skipped)", samples.len(), skipped.len());
    let output = match init {
        Some(path) => train_from(cfg, &samples, Models::from_checkpoint(&Checkpoint::load(path)?)?)?,
        None => train(cfg, &samples)?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("model.ckpt"), |w| output.checkpoint(cfg).encode(w))?;
    write_string_atomic(&out.join("history.csv"), &output.history_csv())?;
    write_string_atomic(&out.join("config.txt"), &cfg.to_text())?;
    if let Some(last) = output.history.last() {
        info!("finished {} steps, final total loss {:.6}", output.history.len(), last.total);
    }
    Ok(())
}

fn eval_pairs(root: &Path) -> specnet::Result<Vec<ImagePair>> {
    let ingested = ingest_pairs(root)?;
    if !ingested.skipped.is_empty() {
        info!("skipped {} unmatched or mismatched pairs", ingested.skipped.len());
    }
    Ok(ingested.pairs)
}

fn eval_cmd(ckpt: &Path, data: &Path, out: &Path, bypass: bool) -> specnet::Result<()> {
    let cascade = Cascade::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let report = evaluate(&cascade, &eval_pairs(data)?, bypass)?;
    write_string_atomic(out, &report.to_csv())?;
    info!("mean SSIM {:.4}, mean PSNR {:.3} dB", report.mean_ssim(), report.mean_psnr());
    Ok(())
}

fn ablate_cmd(
    data: &Path,
    eval: Option<&Path>,
    out: &Path,
    markdown: Option<&Path>,
    variants: &[Ablation],
    cfg: &TrainConfig,
) -> specnet::Result<()> {
    let (samples, _) = load_dataset(data)?;
    let pairs = match eval {
        Some(root) => eval_pairs(root)?,
        None => samples.iter().map(|s| s.pair()).collect(),
    };
    let table = ablate(cfg, variants, &samples, &pairs)?;
    write_string_atomic(out, &table.to_csv())?;
    if let Some(md) = markdown {
        write_string_atomic(md, &table.to_markdown())?;
    }
    Ok(())
}

/// One row per pair, three tiles per row, separated by a white gutter.
fn panel(rows: &[[MultiBandImage; 3]]) -> specnet::Result<MultiBandImage> {
    const GAP: usize = 2;
    let (th, tw) = (rows[0][0].height(), rows[0][0].width());
    if rows.iter().flatten().any(|t| (t.height(), t.width(), t.bands()) != (th, tw, 3)) {
        return Err(Error::Contract("plot needs equally sized RGB images".into()));
    }
    let h = rows.len() * th + (rows.len() - 1) * GAP;
    let w = 3 * tw + 2 * GAP;
    MultiBandImage::from_fn(h, w, 3, |c, i, j| {
        let (r, di) = (i / (th + GAP), i % (th + GAP));
        let (k, dj) = (j / (tw + GAP), j % (tw + GAP));
        if di >= th || dj >= tw {
            1.0
        } else {
            rows[r][k].get(c, di, dj)
        }
    })
}

fn plot_cmd(ckpt: &Path, data: &Path, out: &Path, limit: usize) -> specnet::Result<()> {
    if limit == 0 {
        return Err(Error::Config("--limit must be >= 1".into()));
    }
    let cascade = Cascade::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let rows = eval_pairs(data)?
        .into_iter()
        .take(limit)
        .map(|p| Ok([p.low.clone(), cascade.enhance(&p.low)?, p.normal]))
        .collect::<specnet::Result<Vec<_>>>()?;
    save_png_rgb(&panel(&rows)?, out)
}

fn run(cli: Cli) -> specnet::Result<()> {
    match cli.command {
        Command::Convert { input, out } => convert(&input, &out),
        Command::Profile { input, out, raw } => {
            let profile = spectral_profile(&load_image(&input)?, !raw)?;
            write_string_atomic(&out, &profile.to_csv())
        }
        Command::Synth { out, count, size, seed } => synth(&out, count, size, seed),
        Command::Train { data, out, init, config } => train_cmd(&data, &out, init.as_deref(), &config.resolve()?),
        Command::Eval { ckpt, data, out, bypass } => eval_cmd(&ckpt, &data, &out, bypass),
        Command::Ablate {
            data,
            eval,
            out,
            markdown,
            variants,
            config,
        } => ablate_cmd(&data, eval.as_deref(), &out, markdown.as_deref(), &variants, &config.resolve()?),
        Command::Plot { ckpt, data, out, limit } => plot_cmd(&ckpt, &data, &out, limit),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match e.category() {
                ErrorCategory::Data => ("data", EXIT_DATA),
                ErrorCategory::Runtime => ("runtime", EXIT_RUNTIME),
            };
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(std::io::stderr(), "error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
