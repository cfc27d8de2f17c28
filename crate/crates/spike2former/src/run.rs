//! Training, evaluation, verification and profiling drivers. Nothing here
//! touches the filesystem; the CLI layers output files on top.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use spike2former_core::infer::InferExec;
use spike2former_core::loss::Targets;
use spike2former_core::metrics::{semantic_map, IouAccumulator};
use spike2former_core::model::{Model, ModelConfig};
use spike2former_core::optim::AdamW;
use spike2former_core::profiler::{
    compare_modes, estimate_energy, firing_rate_probe, EnergyReport, Mode, ModeComparison, OpCounts,
};
use spike2former_core::train::{average, loss_and_grads, targets_from_labels};
use spike2former_core::Tensor;

use crate::config::RunConfig;
use crate::data::{self, Scene};

/// Stride between the input image and the mask resolution.
pub const MASK_STRIDE: usize = 4;

pub fn train_scenes(cfg: &RunConfig) -> Vec<Scene> {
    data::generate(cfg.train_data_seed(), cfg.train_images, cfg.model.image_size)
}

pub fn eval_scenes(cfg: &RunConfig) -> Vec<Scene> {
    data::generate(cfg.eval_data_seed(), cfg.eval_images, cfg.model.image_size)
}

pub fn targets(scene: &Scene, num_classes: usize) -> Result<Targets> {
    Ok(targets_from_labels(&scene.labels, scene.size, scene.size, MASK_STRIDE, num_classes)?)
}

/// Dataset IoU with predictions from the chosen execution mode.
pub fn evaluate(model: &Model, scenes: &[Scene], mode: Mode) -> Result<IouAccumulator> {
    if scenes.is_empty() {
        bail!("evaluation needs at least one scene");
    }
    let k = model.config.num_classes;
    let maps = scenes
        .par_iter()
        .map(|s| {
            let pred = match mode {
                Mode::Train => model.predict_train(&s.image)?,
                Mode::Infer => model.predict(&s.image)?,
            };
            Ok(semantic_map(&pred, k, MASK_STRIDE)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = IouAccumulator::new(k);
    for (m, s) in maps.iter().zip(scenes) {
        acc.update(m, &s.labels)?;
    }
    Ok(acc)
}

/// IoU of predicting background everywhere.
pub fn background_baseline(scenes: &[Scene], num_classes: usize) -> Result<IouAccumulator> {
    let mut acc = IouAccumulator::new(num_classes);
    for s in scenes {
        acc.update(&vec![0; s.labels.len()], &s.labels)?;
    }
    Ok(acc)
}

/// Mean firing rate of `layer` over the images, measured on the spike-driven
/// path.
pub fn firing_rate(model: &Model, images: &[Tensor], layer: &str) -> Result<f64> {
    let rates = images
        .par_iter()
        .map(|img| {
            let (e, _) = model.infer_forward(img, false, BTreeMap::new())?;
            Ok(firing_rate_probe(e.firing(), layer)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f64>,
    pub baseline_miou: f64,
    pub final_miou: f64,
    pub final_firing_rate: f64,
}

/// Initialize, calibrate on the training images, then run `cfg.steps`
/// full-batch AdamW steps. `on_step` sees every step in order.
pub fn train(cfg: &RunConfig, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenes = train_scenes(cfg);
    let held_out = eval_scenes(cfg);
    let k = cfg.model.num_classes;
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let images: Vec<Tensor> = scenes.iter().map(|s| s.image.clone()).collect();
    model.calibrate(&images)?;
    let batch: Vec<(Tensor, Targets)> = scenes
        .iter()
        .map(|s| Ok((s.image.clone(), targets(s, k)?)))
        .collect::<Result<_>>()?;
    let baseline_miou = background_baseline(&held_out, k)?.mean()?;
    info!("training {} steps on {} scenes; background mIoU {baseline_miou:.4}", cfg.steps, scenes.len());
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last_miou = None;
    for step in 1..=cfg.steps {
        let parts = batch
            .par_iter()
            .map(|(img, t)| loss_and_grads(&model, img, t, &cfg.loss))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (loss, grads) = average(parts.into_iter().map(|(l, g)| (l.total, g)))?;
        if !loss.is_finite() {
            bail!("divergence: non-finite loss {loss} at step {step}");
        }
        opt.step(&mut model.params, &grads)?;
        losses.push(loss);
        let miou = if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            Some(evaluate(&model, &held_out, Mode::Infer)?.mean()?)
        } else {
            None
        };
        match miou {
            Some(m) => info!("step {step} loss {loss:.6} mIoU {m:.4}"),
            None => debug!("step {step} loss {loss:.6}"),
        }
        if miou.is_some() {
            last_miou = miou;
        }
        on_step(&StepLog { step, loss, miou })?;
    }
    if let Some((name, _)) = model.params.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
        bail!("divergence: parameter `{name}` became non-finite");
    }
    let final_miou = match last_miou {
        Some(m) => m,
        None => evaluate(&model, &held_out, Mode::Infer)?.mean()?,
    };
    let eval_images: Vec<Tensor> = held_out.iter().map(|s| s.image.clone()).collect();
    let final_firing_rate = firing_rate(&model, &eval_images, ModelConfig::FINAL_NEURON)?;
    info!("final mIoU {final_miou:.4}, final neuron firing rate {final_firing_rate:.5}");
    Ok(TrainOutcome {
        model,
        losses,
        baseline_miou,
        final_miou,
        final_firing_rate,
    })
}

/// Uniform random images in `[0, 1]` for equivalence checks.
pub fn random_images(seed: u64, count: usize, cfg: &ModelConfig) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    (0..count)
        .map(|_| Tensor::from_fn(&[cfg.in_channels, s, s], |_| rng.gen_range(0.0..1.0)))
        .collect()
}

pub const VERIFY_INPUTS: usize = 10;

pub fn verify(model: &Model, seed: u64) -> Result<ModeComparison> {
    let images = random_images(seed ^ 0x7e57, VERIFY_INPUTS, &model.config);
    Ok(compare_modes(model, &images, &BTreeMap::new())?)
}

/// Spike trace as `layer,element,t,d` rows.
pub fn trace_csv(e: &InferExec<'_>) -> Result<String> {
    let events = e.trace().context("forward pass ran without tracing")?;
    let mut s = String::from("layer,element,t,d\n");
    for ev in events {
        let _ = writeln!(s, "{},{},{},{}", e.layers()[ev.layer].name, ev.element, ev.t, ev.d);
    }
    Ok(s)
}

pub struct Profile {
    pub report: EnergyReport,
    pub trace_csv: String,
}

pub fn profile(model: &Model, image: &Tensor, cfg: &RunConfig) -> Result<Profile> {
    if cfg.mode == Mode::Train {
        return Err(spike2former_core::Error::TrainModeCount.into());
    }
    let (e, _) = model.infer_forward(image, true, BTreeMap::new())?;
    let counts: Vec<OpCounts> = e.layers().iter().map(OpCounts::from_record).collect();
    let report = estimate_energy(&counts, &cfg.energy)?;
    Ok(Profile {
        report,
        trace_csv: trace_csv(&e)?,
    })
}
