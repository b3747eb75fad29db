//! `gastwin` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gastwin_core::checkpoint;
use gastwin_core::data::{load_dataset, read_image, synth_generate, write_png, Split, SynthConfig};
use gastwin_core::infer::{class_name, infer};
use gastwin_core::profile::{count_flops, FlopConvention};
use gastwin_core::selftest;
use gastwin_core::train::{evaluate, train, TrainOptions};
use gastwin_core::{parse_config, Error, GasTwinFormer, ModelConfig, Result};
use gastwin_tensor::Real;

/// Environment variable overriding the configured seed.
const SEED_ENV: &str = "GASTWIN_SEED";

#[derive(Parser)]
#[command(
    name = "gastwin",
    version,
    about = "Gas-plume segmentation and diet classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl and checkpoints to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root holding train/ and val/ splits.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train in 64-bit precision.
        #[arg(long)]
        f64: bool,
        /// Overrides the config seed (and GASTWIN_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Do not echo log lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        f64: bool,
    },
    /// Predict a mask PNG and a JSON diet sidecar for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Mask PNG path; the sidecar goes next to it with a .json extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        f64: bool,
    },
    /// Count parameters and FLOPs analytically.
    Profile {
        /// Model config; the reference configuration when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "512x512")]
        input: String,
        /// FLOPs per multiply-accumulate: mac1 or mac2.
        #[arg(long, default_value = "mac1")]
        convention: String,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic plume dataset.
    Synth {
        /// Generator config (`synth.*` keys); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    parse_config(&read_text(path)?).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `--seed`, then `GASTWIN_SEED`, then the config value.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                Error::Config(format!("{SEED_ENV} = `{v}` is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--input `{s}`: expected HxW, e.g. 512x512"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn run_train<T: Real>(cfg: &ModelConfig, data: &Path, out: &Path, quiet: bool) -> Result<()> {
    let train_set = load_dataset(data, Split::Train)?;
    let val_set = load_dataset(data, Split::Val)?;
    if train_set.is_empty() {
        return Err(Error::Data(format!(
            "{}: no training frames",
            data.join("train").display()
        )));
    }
    if val_set.is_empty() {
        return Err(Error::Data(format!(
            "{}: no validation frames",
            data.join("val").display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.cfg");
    fs::write(&config_path, cfg.to_config_text()).map_err(|e| Error::io(&config_path, e))?;
    let model = GasTwinFormer::<T>::new(cfg)?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        verbose: !quiet,
    };
    let report = train(&model, &train_set, &val_set, &opts)?;
    if let Some(e) = report.final_evaluation() {
        println!(
            "final  mIoU {:.2}  mF1 {:.2}  fg IoU {:.4}  diet acc {:.2}  diet F1 {:.2}",
            e.seg.miou,
            e.seg.mf1,
            e.foreground_iou(),
            e.diet.accuracy,
            e.diet.macro_f1
        );
    }
    for (miou, iter, path) in &report.kept {
        let p = path
            .as_ref()
            .map_or(String::new(), |p| p.display().to_string());
        println!("kept   iter {iter:>6}  mIoU {miou:.2}  {p}");
    }
    Ok(())
}

fn run_eval<T: Real>(ckpt: &Path, data: &Path, split: Split) -> Result<()> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let samples = load_dataset(data, split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{}: no frames",
            data.join(split.name()).display()
        )));
    }
    let samples = gastwin_core::train::prepare(&samples, model.config.input_size)?;
    let e = evaluate(&model, &samples)?;
    println!("{:<12}{:>10}", "metric", "value");
    println!("{:<12}{:>10.2}", "mIoU", e.seg.miou);
    println!("{:<12}{:>10.2}", "mF1", e.seg.mf1);
    for c in &e.seg.per_class {
        if let Some(iou) = c.iou {
            println!("{:<12}{:>10.2}", format!("IoU[{}]", c.class), iou);
        }
    }
    println!("{:<12}{:>10.2}", "diet acc", e.diet.accuracy);
    println!("{:<12}{:>10.2}", "diet F1", e.diet.macro_f1);
    let json = serde_json::json!({
        "split": split.name(),
        "frames": samples.len(),
        "miou": e.seg.miou,
        "mf1": e.seg.mf1,
        "per_class": e.seg.per_class,
        "diet_accuracy": e.diet.accuracy,
        "diet_macro_f1": e.diet.macro_f1,
    });
    println!("{json}");
    Ok(())
}

fn run_infer<T: Real>(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let (h, w, gray) = read_image(image)?;
    let r = infer(&model, &gray, h, w)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_png(out, w, h, r.mask.clone())?;
    let sidecar = out.with_extension("json");
    fs::write(&sidecar, r.sidecar_json() + "\n").map_err(|e| Error::io(&sidecar, e))?;
    println!(
        "{}: {} of {} pixels plume, diet {} (p = {:.3}); sidecar {}",
        out.display(),
        r.foreground(),
        h * w,
        class_name(r.diet_class, r.diet_probs.len()),
        r.diet_probs[r.diet_class],
        sidecar.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            f64,
            seed,
            quiet,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed_override(seed)? {
                cfg.seed = s;
            }
            if f64 {
                run_train::<f64>(&cfg, &data, &out, quiet)?
            } else {
                run_train::<f32>(&cfg, &data, &out, quiet)?
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            f64,
        } => {
            let split = Split::parse(&split)?;
            if f64 {
                run_eval::<f64>(&checkpoint, &data, split)?
            } else {
                run_eval::<f32>(&checkpoint, &data, split)?
            }
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            f64,
        } => {
            if f64 {
                run_infer::<f64>(&checkpoint, &image, &out)?
            } else {
                run_infer::<f32>(&checkpoint, &image, &out)?
            }
        }
        Command::Profile {
            config,
            input,
            convention,
            json,
        } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ModelConfig::default(),
            };
            let (h, w) = parse_size(&input)?;
            let report =
                count_flops(&cfg, h, w)?.with_convention(FlopConvention::parse(&convention)?);
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.table());
            }
        }
        Command::Synth { config, out } => {
            let mut cfg = match config {
                Some(p) => SynthConfig::parse(&read_text(&p)?)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed_override(None)? {
                cfg.seed = s;
            }
            let [tr, va, te] = synth_generate(&cfg, &out)?;
            println!("{}: {tr} train, {va} val, {te} test frames", out.display());
        }
        Command::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
