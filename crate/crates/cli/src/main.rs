//! `textsr` command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid input or a failed check, 2 on
//! I/O failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use textsr::attention::dump_heatmaps;
use textsr::checkpoint::load_checkpoint;
use textsr::eval::{emit_report, evaluate_sample};
use textsr::gradcheck::{format_table, run_suite};
use textsr::image::Image;
use textsr::synth::{generate_dataset, load_sample, BackgroundSource, Manifest, Split, SynthConfig};
use textsr::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "textsr", version, about = "Text-aware one-step diffusion super-resolution")]
struct Cli {
    /// Seed for synthesis, initialisation and data order.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic (low-res, high-res, mask) dataset.
    Synth {
        #[arg(long)]
        n: usize,
        /// Directory of PNG backgrounds; procedural when omitted.
        #[arg(long)]
        backgrounds: Option<PathBuf>,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Super-resolve a PNG or every sample of a dataset split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG file or a dataset directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// Also write attention heatmaps.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Score inference outputs against a dataset.
    Eval {
        /// Directory written by `infer` on a dataset.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
    },
    /// Dump per-layer keyword attention heatmaps for one image.
    Attnviz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train or test")),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| textsr::Error::io(path, e))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| textsr::Error::io(dir, e))?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Synth { n, backgrounds } => {
            let cfg: SynthConfig = read_config(cfg_path)?;
            let source = match backgrounds {
                Some(dir) => BackgroundSource::from_dir(&dir)?,
                None => BackgroundSource::Procedural,
            };
            let m = generate_dataset(&cli.out, n, &cfg, cli.seed, &source)?;
            println!("wrote {} samples to {}", m.samples.len(), cli.out.display());
        }
        Command::Train { data, steps } => {
            let mut cfg: TrainConfig = read_config(cfg_path)?;
            cfg.seed = cli.seed;
            cfg.out_dir = cli.out.clone();
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(s) = steps {
                cfg.max_steps = s;
            }
            let out = train(&cfg)?;
            let (first, last) = (out.log.first().unwrap(), out.log.last().unwrap());
            println!(
                "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
                out.log.len(),
                first.loss_total,
                last.loss_total,
                out.checkpoint.display()
            );
        }
        Command::Infer {
            checkpoint,
            input,
            split,
            heatmaps,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let jobs: Vec<(String, Image)> = if input.is_dir() {
                let m = Manifest::load(&input)?;
                m.split(split)
                    .map(|e| Ok((format!("{:06}", e.index), load_sample(&input, e)?.x_l)))
                    .collect::<textsr::Result<_>>()?
            } else {
                let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_owned();
                vec![(stem, Image::load_png(&input, 3)?)]
            };
            for sub in ["sr", "mask"] {
                create_dir(&cli.out.join(sub))?;
            }
            for (name, x_l) in &jobs {
                let r = model.infer(x_l)?;
                r.image.save_png(&cli.out.join("sr").join(format!("{name}.png")))?;
                r.mask.save_png(&cli.out.join("mask").join(format!("{name}.png")))?;
                if heatmaps {
                    dump_heatmaps(&cli.out.join("heatmaps").join(name), &r.tex_maps, Some(&r.aggregate), &r.image)?;
                }
            }
            println!("wrote {} outputs to {}", jobs.len(), cli.out.display());
        }
        Command::Eval { pred, data, split } => {
            let m = Manifest::load(&data)?;
            let mut rows = Vec::new();
            for e in m.split(split) {
                let gt = load_sample(&data, e)?;
                let name = format!("{:06}.png", e.index);
                let sr = Image::load_png(&pred.join("sr").join(&name), 3)?;
                let mask_path = pred.join("mask").join(&name);
                let mask = if mask_path.exists() {
                    Some(Image::load_png(&mask_path, 1)?)
                } else {
                    None
                };
                let masks = mask.as_ref().map(|p| (p, &gt.mask));
                rows.push(evaluate_sample(&format!("{:06}", e.index), &sr, &gt.x_h, masks, &e.boxes)?);
            }
            let config = serde_json::json!({ "data": data, "pred": pred, "split": split });
            let report = emit_report(&cli.out, &config, rows)?;
            print!("{}", report.to_markdown().lines().take(3).collect::<Vec<_>>().join("\n"));
            println!();
        }
        Command::Attnviz { checkpoint, input } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let x_l = Image::load_png(&input, 3)?;
            let r = model.infer(&x_l)?;
            dump_heatmaps(&cli.out, &r.tex_maps, Some(&r.aggregate), &r.upsampled)?;
            println!("wrote {} layer heatmaps to {}", r.tex_maps.len(), cli.out.display());
        }
        Command::Gradcheck { trials } => {
            if trials == 0 {
                bail!(textsr::Error::Parameter("trials must be at least 1".into()));
            }
            let rows = run_suite(trials, cli.seed)?;
            print!("{}", format_table(&rows));
            return Ok(rows.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

/// 2 for I/O failures anywhere in the chain, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>().is_some()
            || e.downcast_ref::<textsr::Error>()
                .is_some_and(textsr::Error::is_io)
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
