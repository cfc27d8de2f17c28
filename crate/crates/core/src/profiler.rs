//! Operation accounting, energy estimates and train/infer comparison.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::graph::FiringStats;
use crate::infer::LayerRecord;
use crate::model::{prediction_from, prediction_from_graph, Model};
use crate::neuron::NeuronConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCounts {
    pub layer: String,
    /// Multiply-accumulates of one timestep at full density.
    pub dense_macs: u64,
    /// Accumulates actually performed, one per spike per target.
    pub spike_acs: u64,
    /// `spike_acs / (dense_macs * T * D)`; 1 for dense MAC layers.
    pub firing_rate: f64,
    /// `T * D`.
    pub timesteps_effective: u64,
    /// Continuous operands, charged as MACs.
    pub mac: bool,
    pub timesteps: u64,
}

impl OpCounts {
    pub fn from_record(r: &LayerRecord) -> Self {
        let te = r.timesteps as u64 * r.levels as u64;
        let mac = r.is_mac();
        let firing_rate = if mac {
            1.0
        } else if r.dense_macs == 0 {
            0.0
        } else {
            r.spike_acs as f64 / (r.dense_macs * te) as f64
        };
        Self {
            layer: r.name.clone(),
            dense_macs: r.dense_macs,
            spike_acs: r.spike_acs,
            firing_rate,
            timesteps_effective: te,
            mac,
            timesteps: r.timesteps as u64,
        }
    }

    /// An accumulate-only layer described by its mean firing rate.
    pub fn from_rate(layer: &str, dense_macs: u64, firing_rate: f64, timesteps: u64, levels: u64) -> Self {
        let te = timesteps * levels;
        Self {
            layer: layer.into(),
            dense_macs,
            spike_acs: libm::round(dense_macs as f64 * te as f64 * firing_rate) as u64,
            firing_rate,
            timesteps_effective: te,
            mac: false,
            timesteps,
        }
    }
}

/// Energy per operation in picojoules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    /// 45 nm figures: 4.6 pJ per 32-bit MAC, 0.9 pJ per AC.
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_ac > 0.0) {
            return Err(Error::Config(format!(
                "energy constants must be > 0, got e_mac={} e_ac={}",
                self.e_mac, self.e_ac
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub counts: OpCounts,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub model: EnergyModel,
    pub layers: Vec<LayerEnergy>,
    pub mac_pj: f64,
    pub ac_pj: f64,
}

impl EnergyReport {
    pub fn total_pj(&self) -> f64 {
        self.mac_pj + self.ac_pj
    }

    pub fn total_mj(&self) -> f64 {
        self.total_pj() * 1e-9
    }

    /// `layer,firing_rate,dense_macs,spike_acs,energy_pj` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,firing_rate,dense_macs,spike_acs,energy_pj\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{:.3}",
                l.counts.layer, l.counts.firing_rate, l.counts.dense_macs, l.counts.spike_acs, l.energy_pj
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "energy report");
        let _ = writeln!(
            s,
            "constants: e_mac = {} pJ, e_ac = {} pJ (45 nm convention)",
            self.model.e_mac, self.model.e_ac
        );
        let _ = writeln!(s, "dense MAC layers are charged dense_macs x T x e_mac; all others spike_acs x e_ac");
        let _ = writeln!(s, "{:<32} {:>5} {:>10} {:>14} {:>12} {:>14}", "layer", "kind", "rate", "dense_macs", "spike_acs", "energy_pj");
        for l in &self.layers {
            let c = &l.counts;
            let _ = writeln!(
                s,
                "{:<32} {:>5} {:>10.6} {:>14} {:>12} {:>14.3}",
                c.layer,
                if c.mac { "MAC" } else { "AC" },
                c.firing_rate,
                c.dense_macs,
                c.spike_acs,
                l.energy_pj
            );
        }
        let _ = writeln!(s, "MAC energy: {:.3} pJ", self.mac_pj);
        let _ = writeln!(s, "AC energy:  {:.3} pJ", self.ac_pj);
        let _ = writeln!(s, "total:      {:.3} pJ ({:.6e} mJ)", self.total_pj(), self.total_mj());
        s
    }
}

pub fn estimate_energy(counts: &[OpCounts], model: &EnergyModel) -> Result<EnergyReport> {
    model.validate()?;
    let mut layers = Vec::with_capacity(counts.len());
    let (mut mac_pj, mut ac_pj) = (0.0, 0.0);
    for c in counts {
        let energy_pj = if c.mac {
            let e = c.dense_macs as f64 * c.timesteps as f64 * model.e_mac;
            mac_pj += e;
            e
        } else {
            let e = c.spike_acs as f64 * model.e_ac;
            ac_pj += e;
            e
        };
        layers.push(LayerEnergy {
            counts: c.clone(),
            energy_pj,
        });
    }
    Ok(EnergyReport {
        model: *model,
        layers,
        mac_pj,
        ac_pj,
    })
}

/// Exact per-layer counts from a spike-driven forward on `image`.
pub fn count_ops(model: &Model, image: &Tensor, mode: Mode) -> Result<Vec<OpCounts>> {
    if mode == Mode::Train {
        return Err(Error::TrainModeCount);
    }
    let (e, _) = model.infer_forward(image, false, BTreeMap::new())?;
    Ok(e.layers().iter().map(OpCounts::from_record).collect())
}

/// Mean normalized output of the named neuron.
pub fn firing_rate_probe(firing: &BTreeMap<String, FiringStats>, layer: &str) -> Result<f64> {
    firing
        .get(layer)
        .map(FiringStats::rate)
        .ok_or_else(|| Error::UnknownLayer(layer.into()))
}

/// `max|a - b| / max|reference|`, with the denominator floored at 1e-12.
pub fn relative_deviation(reference: &Tensor, other: &Tensor) -> Result<f64> {
    let diff = reference.max_abs_diff(other)?;
    Ok(diff / reference.max_abs().max(1e-12))
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModeComparison {
    /// Worst deviation per neuron, in execution order.
    pub layers: Vec<(String, f64)>,
    pub end_to_end: f64,
    /// First neuron, in execution order, above the tolerance.
    pub first_failure: Option<String>,
    pub tolerance: f64,
}

impl ModeComparison {
    pub fn pass(&self) -> bool {
        self.end_to_end < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>14}", "layer", "max_rel_dev");
        for (name, d) in &self.layers {
            let _ = writeln!(s, "{name:<40} {d:>14.3e}");
        }
        let _ = writeln!(s, "end-to-end: {:.3e} (tolerance {:.0e})", self.end_to_end, self.tolerance);
        if let Some(f) = &self.first_failure {
            let _ = writeln!(s, "first failing layer: {f}");
        }
        let _ = writeln!(s, "{}", if self.pass() { "PASS" } else { "FAIL" });
        s
    }
}

/// Fold one input's recordings into running per-layer maxima.
pub fn compare_recordings(
    acc: &mut Vec<(String, f64)>,
    train: &[(String, Tensor)],
    infer: &[(String, Tensor)],
) -> Result<()> {
    if train.len() != infer.len() {
        return Err(Error::Config(format!(
            "train mode recorded {} neurons, infer mode {}",
            train.len(),
            infer.len()
        )));
    }
    let fresh = acc.is_empty();
    for (i, ((tn, tv), (iname, iv))) in train.iter().zip(infer).enumerate() {
        if tn != iname {
            return Err(Error::UnknownLayer(format!("{tn} vs {iname}")));
        }
        let d = relative_deviation(tv, iv)?;
        if fresh {
            acc.push((tn.clone(), d));
        } else {
            acc[i].1 = acc[i].1.max(d);
        }
    }
    Ok(())
}

/// Run both modes on every image and report per-neuron and end-to-end
/// deviations. `overrides` perturbs the inference side only.
pub fn compare_modes(
    model: &Model,
    images: &[Tensor],
    overrides: &BTreeMap<String, NeuronConfig>,
) -> Result<ModeComparison> {
    let mut layers = Vec::new();
    let mut end_to_end: f64 = 0.0;
    for img in images {
        let (g, tout) = model.train_forward(img, false)?;
        let (e, iout) = model.infer_forward(img, false, overrides.clone())?;
        let train: Vec<(String, Tensor)> = g.tags().map(|(n, t)| (String::from(n), t.clone())).collect();
        compare_recordings(&mut layers, &train, e.recorded())?;
        let tp = prediction_from_graph(&g, tout)?;
        let ip = prediction_from(&e, iout)?;
        end_to_end = end_to_end
            .max(relative_deviation(&tp.mask_logits, &ip.mask_logits)?)
            .max(relative_deviation(&tp.class_logits, &ip.class_logits)?);
    }
    let first_failure = layers
        .iter()
        .find(|(_, d)| *d >= EQUIVALENCE_TOLERANCE)
        .map(|(n, _)| n.clone());
    Ok(ModeComparison {
        layers,
        end_to_end,
        first_failure,
        tolerance: EQUIVALENCE_TOLERANCE,
    })
}
