use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use spike2former::checkpoint;
use spike2former::config::{parse_mode, DeviceScale, RunConfig};
use spike2former::data::{self, Scene};
use spike2former::run;
use spike2former_core::container;
use spike2former_core::model::Model;
use spike2former_core::Tensor;

#[derive(Parser)]
#[command(name = "spike2former", version, about = "Spiking segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (`key = value` text).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Execution mode: train (normalized-integer tape) or infer (binary spikes).
    #[arg(long, value_parser = ["train", "infer"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["toy", "small"])]
    device_scale: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputSource {
    Zeros,
    Random,
    Scene,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model and write a checkpoint plus metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Compare training-mode and spike-driven forwards; exits nonzero on FAIL.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; a freshly initialized model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Count operations and estimate energy; writes energy.csv, energy.txt, trace.csv.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "scene")]
        input: InputSource,
    },
    /// Per-class IoU and mIoU of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data; the config's evaluation scenes when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a synthetic dataset (scenes.bin, scenes.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

fn init_logging() -> Result<()> {
    let level = std::env::var("SPIKE2_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" => log::LevelFilter::Error,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        other => bail!("SPIKE2_LOG_LEVEL must be error, info or debug, got `{other}`"),
    };
    env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .try_init()
        .context("initializing logger")
}

/// Config from `--config` (or scale defaults), with flags applied on top.
fn resolve(c: &Common) -> Result<RunConfig> {
    let mut text = match &c.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => "version = 1\n".into(),
    };
    if let Some(s) = &c.device_scale {
        text.push_str(&format!("\ndevice_scale = {s}\n"));
    }
    let mut cfg = RunConfig::parse(&text).with_context(|| match &c.config {
        Some(p) => format!("config {}", p.display()),
        None => "config".into(),
    })?;
    apply_flags(&mut cfg, c)?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, c: &Common) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.mode {
        cfg.mode = parse_mode(m)?;
    }
    Ok(())
}

/// A checkpoint (validated against `--config` when given) or a fresh model.
fn model_for(c: &Common, ckpt: Option<&Path>) -> Result<(RunConfig, Model)> {
    match ckpt {
        Some(dir) => {
            let expected = match &c.config {
                Some(_) => Some(resolve(c)?),
                None => None,
            };
            let (mut cfg, model) = checkpoint::load(dir, expected.as_ref())
                .with_context(|| format!("loading checkpoint {}", dir.display()))?;
            if let Some(s) = &c.device_scale {
                if s.parse::<DeviceScale>()? != cfg.device_scale {
                    bail!("--device-scale {s} disagrees with checkpoint scale {}", cfg.device_scale);
                }
            }
            apply_flags(&mut cfg, c)?;
            Ok((cfg, model))
        }
        None => {
            let cfg = resolve(c)?;
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            Ok((cfg, model))
        }
    }
}

fn out_dir(c: &Common) -> Result<Option<PathBuf>> {
    if let Some(d) = &c.out {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(c.out.clone())
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "step,loss,miou")?;
    let outcome = run::train(&cfg, |s| {
        let miou = s.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        writeln!(metrics, "{},{:.9},{}", s.step, s.loss, miou)?;
        Ok(())
    })?;
    checkpoint::save(&dir, &cfg, &outcome.model)?;
    println!(
        "trained {} steps: final loss {:.6}, mIoU {:.4} (background baseline {:.4}), final neuron firing rate {:.5}",
        cfg.steps,
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        outcome.final_miou,
        outcome.baseline_miou,
        outcome.final_firing_rate
    );
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

fn cmd_verify(c: &Common, ckpt: Option<&Path>) -> Result<()> {
    let (cfg, model) = model_for(c, ckpt)?;
    let report = run::verify(&model, cfg.seed)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = out_dir(c)? {
        write(&dir, "verify.txt", &text)?;
    }
    if !report.pass() {
        bail!(
            "equivalence FAIL: end-to-end deviation {:.3e}, first failing layer {}",
            report.end_to_end,
            report.first_failure.as_deref().unwrap_or("<none>")
        );
    }
    Ok(())
}

fn cmd_profile(c: &Common, ckpt: Option<&Path>, input: InputSource) -> Result<()> {
    let (cfg, model) = model_for(c, ckpt)?;
    let s = cfg.model.image_size;
    let image = match input {
        InputSource::Zeros => Tensor::zeros(&[cfg.model.in_channels, s, s]),
        InputSource::Random => run::random_images(cfg.seed, 1, &cfg.model).remove(0),
        InputSource::Scene => data::generate(cfg.eval_data_seed(), 1, s).remove(0).image,
    };
    let p = run::profile(&model, &image, &cfg)?;
    let text = p.report.to_text();
    print!("{text}");
    if let Some(dir) = out_dir(c)? {
        write(&dir, "energy.txt", &text)?;
        write(&dir, "energy.csv", p.report.to_csv())?;
        write(&dir, "trace.csv", &p.trace_csv)?;
    }
    Ok(())
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join("scenes.bin");
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let tensors = container::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    if tensors.len() % 2 != 0 {
        bail!("{} holds an odd number of tensors", path.display());
    }
    tensors
        .chunks(2)
        .map(|pair| {
            let (img, lab) = (&pair[0].1, &pair[1].1);
            let size = lab.dim(0);
            let labels = lab
                .data()
                .iter()
                .map(|&v| {
                    if v < 0.0 || v.fract() != 0.0 || v >= data::NUM_CLASSES as f64 {
                        bail!("tensor `{}` holds invalid label {v}", pair[1].0);
                    }
                    Ok(v as usize)
                })
                .collect::<Result<_>>()?;
            Ok(Scene {
                image: img.clone(),
                labels,
                size,
            })
        })
        .collect()
}

fn cmd_eval(c: &Common, ckpt: &Path, data_dir: Option<&Path>) -> Result<()> {
    let (cfg, model) = model_for(c, Some(ckpt))?;
    let scenes = match data_dir {
        Some(d) => load_scenes(d)?,
        None => run::eval_scenes(&cfg),
    };
    if scenes.is_empty() {
        bail!("evaluation dataset is empty");
    }
    let acc = run::evaluate(&model, &scenes, cfg.mode)?;
    let mut csv = String::from("class,iou\n");
    for (k, iou) in acc.per_class().iter().enumerate() {
        let v = iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        println!("class {k}: IoU {}", if v.is_empty() { "n/a" } else { &v });
        csv.push_str(&format!("{k},{v}\n"));
    }
    let miou = acc.mean()?;
    println!("mIoU {miou:.6} over {} scenes", scenes.len());
    csv.push_str(&format!("mean,{miou:.6}\n"));
    if let Some(dir) = out_dir(c)? {
        write(&dir, "eval.csv", csv)?;
    }
    Ok(())
}

fn cmd_gen_data(c: &Common, count: usize) -> Result<()> {
    if count == 0 {
        bail!("--count must be >= 1");
    }
    let cfg = resolve(c)?;
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let s = cfg.model.image_size;
    let scenes = data::generate(cfg.seed, count, s);
    let mut named = Vec::with_capacity(2 * count);
    let mut csv = String::from("scene,background,rectangle,disk\n");
    for (i, sc) in scenes.iter().enumerate() {
        let labels = Tensor::new(&[s, s], sc.labels.iter().map(|&l| l as f64).collect())?;
        named.push((format!("scene{i:05}.image"), sc.image.clone()));
        named.push((format!("scene{i:05}.labels"), labels));
        let [b, r, d] = sc.class_pixels();
        csv.push_str(&format!("{i},{b},{r},{d}\n"));
    }
    write(&dir, "scenes.bin", container::encode(named.iter().map(|(n, t)| (n.as_str(), t))))?;
    write(&dir, "scenes.csv", csv)?;
    println!("wrote {count} scenes to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_logging().and_then(|()| match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Verify { common, checkpoint } => cmd_verify(common, checkpoint.as_deref()),
        Command::Profile {
            common,
            checkpoint,
            input,
        } => cmd_profile(common, checkpoint.as_deref(), *input),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(common, checkpoint, data.as_deref()),
        Command::GenData { common, count } => cmd_gen_data(common, *count),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
