//! Normalized-integer LIF neurons and their binary spike expansion.
//!
//! A neuron integrates `U[t] = H[t-1] + X[t] / theta`, emits the integer
//! level `Clip(round(U), 0, D)` and retains `H[t] = beta * (U - level)`.
//! NI-LIF reports the level divided by `D`; I-LIF reports it raw. At
//! inference the level is unrolled into `D` binary slices whose sum equals
//! the level, so a downstream weight layer only ever accumulates.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronVariant {
    NiLif,
    ILif,
}

/// Placement of the ones inside the `D` virtual steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeOrdering {
    #[default]
    FrontLoaded,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronConfig {
    /// Maximum integer level `D`, also the number of virtual timesteps.
    pub levels: u32,
    pub timesteps: usize,
    pub beta: f64,
    pub theta: f64,
    pub variant: NeuronVariant,
    pub ordering: SpikeOrdering,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            timesteps: 1,
            beta: 0.5,
            theta: 1.0,
            variant: NeuronVariant::NiLif,
            ordering: SpikeOrdering::FrontLoaded,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("neuron levels D must be >= 1".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("neuron timesteps T must be >= 1".into()));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(Error::Config(alloc::format!(
                "neuron threshold must be > 0, got {}",
                self.theta
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(alloc::format!(
                "neuron decay beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Value carried by a single binary spike: `1/D` for NI-LIF, `1` for I-LIF.
    pub fn quantum(&self) -> f64 {
        match self.variant {
            NeuronVariant::NiLif => 1.0 / self.levels as f64,
            NeuronVariant::ILif => 1.0,
        }
    }

    /// Output value of an integer level: `level/D` for NI-LIF, `level` for I-LIF.
    pub fn normalize(&self, level: f64) -> f64 {
        match self.variant {
            NeuronVariant::NiLif => level / self.levels as f64,
            NeuronVariant::ILif => level,
        }
    }

    pub fn with_variant(mut self, variant: NeuronVariant) -> Self {
        self.variant = variant;
        self
    }
}

/// Round half away from zero, then clip to `[0, D]`.
#[inline]
pub fn quantize_level(u: f64, levels: u32) -> u32 {
    let r = libm::round(u);
    if r <= 0.0 {
        0
    } else if r >= levels as f64 {
        levels
    } else {
        r as u32
    }
}

/// Straight-through derivative of the round+clip composite.
#[inline]
pub fn surrogate_grad(u: f64, levels: u32) -> f64 {
    if (0.0..=levels as f64).contains(&u) {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub h: Tensor,
    pub t: usize,
}

impl NeuronState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            h: Tensor::zeros(shape),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    Normalized,
    Expanded,
}

/// One timestep of layer output, as normalized values and optionally as
/// the `[D, ...]` binary expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikePlan {
    levels: u32,
    variant: NeuronVariant,
    counts: Vec<u32>,
    normalized: Tensor,
    expanded: Option<Tensor>,
}

impl SpikePlan {
    fn from_counts(shape: &[usize], counts: Vec<u32>, cfg: &NeuronConfig) -> Result<Self> {
        let normalized = Tensor::new(shape, counts.iter().map(|&c| cfg.normalize(c as f64)).collect())?;
        Ok(Self {
            levels: cfg.levels,
            variant: cfg.variant,
            counts,
            normalized,
            expanded: None,
        })
    }

    /// Wrap an externally produced activation; every value must sit on the
    /// neuron's quantization grid.
    pub fn from_normalized(values: Tensor, cfg: &NeuronConfig) -> Result<Self> {
        cfg.validate()?;
        let q = cfg.quantum();
        let mut counts = Vec::with_capacity(values.len());
        for &v in values.data() {
            let k = v / q;
            let r = libm::round(k);
            if !(libm::fabs(k - r) <= 1e-9 * (1.0 + r.abs())) || r < 0.0 || r > cfg.levels as f64 {
                return Err(Error::NotQuantized {
                    value: v,
                    levels: cfg.levels,
                });
            }
            counts.push(r as u32);
        }
        Ok(Self {
            levels: cfg.levels,
            variant: cfg.variant,
            counts,
            normalized: values,
            expanded: None,
        })
    }

    pub fn mode(&self) -> SpikeMode {
        if self.expanded.is_some() {
            SpikeMode::Expanded
        } else {
            SpikeMode::Normalized
        }
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn variant(&self) -> NeuronVariant {
        self.variant
    }

    pub fn shape(&self) -> &[usize] {
        self.normalized.shape()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    /// Integer level `S * D` (NI-LIF) or `S` (I-LIF) per element.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn expanded(&self) -> Option<&Tensor> {
        self.expanded.as_ref()
    }

    pub fn quantum(&self) -> f64 {
        match self.variant {
            NeuronVariant::NiLif => 1.0 / self.levels as f64,
            NeuronVariant::ILif => 1.0,
        }
    }

    pub fn total_spikes(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Check binarity and `sum_d S[d] == S * D` for every element. Returns
    /// the number of violating elements; a plan without an expansion has none
    /// to check.
    pub fn slice_sum_violations(&self) -> usize {
        let Some(exp) = &self.expanded else {
            return 0;
        };
        let n = self.counts.len();
        let inv_q = match self.variant {
            NeuronVariant::NiLif => self.levels as f64,
            NeuronVariant::ILif => 1.0,
        };
        let mut bad = 0;
        for i in 0..n {
            let mut sum = 0.0;
            let mut binary = true;
            for d in 0..self.levels as usize {
                let v = exp.data()[d * n + i];
                binary &= v == 0.0 || v == 1.0;
                sum += v;
            }
            let target = self.normalized.data()[i] * inv_q;
            if !binary || sum != self.counts[i] as f64 || sum != target {
                bad += 1;
            }
        }
        bad
    }

    /// `(element, d)` for every binary spike, in `d`-major order.
    pub fn events(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.counts.len();
        let d_max = self.levels as usize;
        let exp = self.expanded.as_ref();
        (0..d_max).flat_map(move |d| {
            (0..n).filter_map(move |i| match exp {
                Some(e) if e.data()[d * n + i] == 1.0 => Some((i, d)),
                _ => None,
            })
        })
    }
}

fn check_state(x: &Tensor, state: &NeuronState) -> Result<()> {
    if x.shape() != state.h.shape() {
        return Err(Error::Shape {
            context: "neuron input vs retained potential",
            lhs: x.shape().to_vec(),
            rhs: state.h.shape().to_vec(),
        });
    }
    Ok(())
}

fn lif_step(x: &Tensor, state: &NeuronState, cfg: &NeuronConfig) -> Result<(SpikePlan, NeuronState)> {
    cfg.validate()?;
    check_state(x, state)?;
    let mut counts = Vec::with_capacity(x.len());
    let mut h = Tensor::zeros(x.shape());
    for ((&xi, &hi), hn) in x.data().iter().zip(state.h.data()).zip(h.data_mut()) {
        let u = hi + xi / cfg.theta;
        let level = quantize_level(u, cfg.levels);
        *hn = cfg.beta * (u - level as f64);
        counts.push(level);
    }
    let plan = SpikePlan::from_counts(x.shape(), counts, cfg)?;
    Ok((plan, NeuronState { h, t: state.t + 1 }))
}

/// NI-LIF step: emits `Clip(round(U), 0, D) / D`.
pub fn ni_lif_step(x: &Tensor, state: &NeuronState, cfg: &NeuronConfig) -> Result<(SpikePlan, NeuronState)> {
    if cfg.variant != NeuronVariant::NiLif {
        return Err(Error::Config("ni_lif_step requires the NI-LIF variant".into()));
    }
    lif_step(x, state, cfg)
}

/// I-LIF step: emits the raw integer `Clip(round(U), 0, D)`.
pub fn i_lif_step(x: &Tensor, state: &NeuronState, cfg: &NeuronConfig) -> Result<(SpikePlan, NeuronState)> {
    if cfg.variant != NeuronVariant::ILif {
        return Err(Error::Config("i_lif_step requires the I-LIF variant".into()));
    }
    lif_step(x, state, cfg)
}

/// Step whichever variant the config names.
pub fn neuron_step(x: &Tensor, state: &NeuronState, cfg: &NeuronConfig) -> Result<(SpikePlan, NeuronState)> {
    lif_step(x, state, cfg)
}

/// Run a neuron over the leading time axis of `[T, ...]`, starting from rest.
pub fn neuron_run(x: &Tensor, cfg: &NeuronConfig) -> Result<Vec<SpikePlan>> {
    let steps = x.dim(0);
    let inner_shape: Vec<usize> = if x.rank() == 1 { vec![1] } else { x.shape()[1..].to_vec() };
    let mut state = NeuronState::zeros(&inner_shape);
    let mut plans = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = x.index0(t);
        let (plan, next) = lif_step(&xt, &state, cfg)?;
        plans.push(plan);
        state = next;
    }
    Ok(plans)
}

/// Unroll a normalized plan into `D` binary slices, `[D, ...]`.
pub fn expand_to_spikes(plan: &SpikePlan, cfg: &NeuronConfig) -> Result<SpikePlan> {
    cfg.validate()?;
    if plan.levels != cfg.levels || plan.variant != cfg.variant {
        return Err(Error::Config(alloc::format!(
            "plan has D={} {:?}, config has D={} {:?}",
            plan.levels,
            plan.variant,
            cfg.levels,
            cfg.variant
        )));
    }
    // Re-derive the levels from the values so a hand-built plan is checked too.
    let checked = SpikePlan::from_normalized(plan.normalized.clone(), cfg)?;
    if checked.counts != plan.counts {
        return Err(Error::NotQuantized {
            value: f64::NAN,
            levels: cfg.levels,
        });
    }
    let d = cfg.levels as usize;
    let n = plan.counts.len();
    let mut data = vec![0.0; d * n];
    for (i, &k) in plan.counts.iter().enumerate() {
        let k = k as usize;
        match cfg.ordering {
            SpikeOrdering::FrontLoaded => {
                for slice in 0..k {
                    data[slice * n + i] = 1.0;
                }
            }
            SpikeOrdering::Uniform => {
                for slice in 0..d {
                    if (slice + 1) * k / d > slice * k / d {
                        data[slice * n + i] = 1.0;
                    }
                }
            }
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(plan.shape());
    Ok(SpikePlan {
        expanded: Some(Tensor::new(&shape, data)?),
        ..plan.clone()
    })
}

/// Accumulate-only product of `[O, I]` weights with an expanded `[I]` plan.
///
/// Each binary spike adds the column `W * quantum`; nothing multiplies an
/// activation. Returns the output and the number of additions performed.
pub fn spike_matmul(weights: &Tensor, plan: &SpikePlan, levels: u32) -> Result<(Tensor, u64)> {
    let exp = plan
        .expanded()
        .ok_or_else(|| Error::Config("spike_matmul needs an expanded plan".into()))?;
    if levels != plan.levels {
        return Err(Error::Config(alloc::format!(
            "spike_matmul D={levels} but plan has D={}",
            plan.levels
        )));
    }
    if weights.rank() != 2 || weights.dim(1) != plan.len() {
        return Err(Error::Dim {
            context: "spike_matmul weight columns",
            axis: 1,
            expected: plan.len(),
            got: weights.shape().get(1).copied().unwrap_or(0),
        });
    }
    let (o, n) = (weights.dim(0), weights.dim(1));
    let scaled = weights.scale(plan.quantum());
    let mut out = vec![0.0; o];
    let mut acs = 0;
    for d in 0..levels as usize {
        for i in 0..n {
            let s = exp.data()[d * n + i];
            if s == 0.0 {
                continue;
            }
            if s != 1.0 {
                return Err(Error::NonBinary(s));
            }
            for (r, acc) in out.iter_mut().enumerate() {
                *acc += scaled.data()[r * n + i];
            }
            acs += o as u64;
        }
    }
    Ok((Tensor::new(&[o], out)?, acs))
}

/// Fold a positive input scale into the firing threshold:
/// stepping `scale * x` under `cfg` equals stepping `x` under the result.
pub fn reparam_scale_into_threshold(scale: f64, cfg: &NeuronConfig) -> Result<NeuronConfig> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Config(alloc::format!("scale must be > 0, got {scale}")));
    }
    let mut out = *cfg;
    if scale != 1.0 {
        out.theta = cfg.theta / scale;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(levels: u32, beta: f64) -> NeuronConfig {
        NeuronConfig {
            levels,
            beta,
            ..Default::default()
        }
    }

    fn step1(x: f64, h: f64, c: &NeuronConfig) -> (f64, f64) {
        let state = NeuronState {
            h: Tensor::scalar(h),
            t: 0,
        };
        let (plan, next) = neuron_step(&Tensor::scalar(x), &state, c).unwrap();
        (plan.normalized().item(), next.h.item())
    }

    #[test]
    fn ni_lif_examples() {
        let c = cfg(4, 0.5);
        let (s, h) = step1(2.3, 0.0, &c);
        assert_eq!(s, 0.5);
        assert!((h - 0.15).abs() < 1e-12);
        assert_eq!(step1(0.0, 0.0, &c), (0.0, 0.0));
        let (s, h) = step1(6.2, 0.0, &c);
        assert_eq!(s, 1.0);
        assert!((h - 0.5 * 2.2).abs() < 1e-12);
    }

    #[test]
    fn i_lif_emits_raw_integer() {
        let c = cfg(4, 0.5).with_variant(NeuronVariant::ILif);
        let st = NeuronState::zeros(&[1]);
        let (p, _) = i_lif_step(&Tensor::scalar(2.3), &st, &c).unwrap();
        assert_eq!(p.normalized().item(), 2.0);
        let (p, _) = i_lif_step(&Tensor::scalar(0.0), &st, &c).unwrap();
        assert_eq!(p.normalized().item(), 0.0);
        assert!(ni_lif_step(&Tensor::scalar(0.0), &st, &c).is_err());
        let x = Tensor::new(&[4], alloc::vec![0.3, 1.7, 2.6, 9.0]).unwrap();
        let st = NeuronState::zeros(&[4]);
        let (ni, _) = ni_lif_step(&x, &st, &cfg(4, 0.5)).unwrap();
        let (i, _) = i_lif_step(&x, &st, &c).unwrap();
        assert_eq!(ni.normalized().scale(4.0), *i.normalized());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(quantize_level(0.5, 4), 1);
        assert_eq!(quantize_level(1.5, 4), 2);
        assert_eq!(quantize_level(2.5, 4), 3);
        assert_eq!(quantize_level(-0.5, 4), 0);
        assert_eq!(quantize_level(0.49999, 4), 0);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!((quantize_level(2.3, 4), surrogate_grad(2.3, 4)), (2, 1.0));
        assert_eq!((quantize_level(-0.7, 4), surrogate_grad(-0.7, 4)), (0, 0.0));
        assert_eq!((quantize_level(6.2, 4), surrogate_grad(6.2, 4)), (4, 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let st = NeuronState::zeros(&[3]);
        assert!(ni_lif_step(&Tensor::zeros(&[2]), &st, &cfg(4, 0.5)).is_err());
    }

    #[test]
    fn expansion_examples() {
        let c = cfg(4, 0.5);
        let plan = SpikePlan::from_normalized(Tensor::new(&[3], alloc::vec![0.5, 0.0, 1.0]).unwrap(), &c).unwrap();
        assert_eq!(plan.mode(), SpikeMode::Normalized);
        let e = expand_to_spikes(&plan, &c).unwrap();
        assert_eq!(e.mode(), SpikeMode::Expanded);
        let x = e.expanded().unwrap();
        assert_eq!(x.shape(), &[4, 3]);
        let column = |i: usize| (0..4).map(|d| x.data()[d * 3 + i]).collect::<Vec<_>>();
        assert_eq!(column(0), [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(column(1), [0.0; 4]);
        assert_eq!(column(2), [1.0; 4]);
        assert_eq!(e.slice_sum_violations(), 0);
    }

    #[test]
    fn uniform_ordering_keeps_sum() {
        let c = NeuronConfig {
            levels: 5,
            ordering: SpikeOrdering::Uniform,
            ..Default::default()
        };
        let vals = Tensor::from_fn(&[6], |i| i as f64 / 5.0);
        let plan = SpikePlan::from_normalized(vals, &c).unwrap();
        let e = expand_to_spikes(&plan, &c).unwrap();
        for i in 0..6 {
            let s: f64 = (0..5).map(|d| e.expanded().unwrap().data()[d * 6 + i]).sum();
            assert_eq!(s, i as f64);
        }
    }

    #[test]
    fn off_grid_value_is_rejected() {
        let c = cfg(4, 0.5);
        let err = SpikePlan::from_normalized(Tensor::scalar(0.3), &c).unwrap_err();
        assert!(matches!(err, Error::NotQuantized { .. }));
    }

    #[test]
    fn spike_matmul_worked_example() {
        let c = cfg(2, 0.5);
        let w = Tensor::new(&[1, 2], alloc::vec![1.0, 2.0]).unwrap();
        let plan = SpikePlan::from_normalized(Tensor::new(&[2], alloc::vec![1.0, 0.5]).unwrap(), &c).unwrap();
        let e = expand_to_spikes(&plan, &c).unwrap();
        let (y, acs) = spike_matmul(&w, &e, 2).unwrap();
        assert!((y.item() - 2.0).abs() < 1e-12);
        assert_eq!(acs, 3);
        let zero = SpikePlan::from_normalized(Tensor::zeros(&[2]), &c).unwrap();
        let (y, acs) = spike_matmul(&w, &expand_to_spikes(&zero, &c).unwrap(), 2).unwrap();
        assert_eq!((y.item(), acs), (0.0, 0));
    }

    #[test]
    fn reparam_examples() {
        let c = cfg(4, 0.5);
        assert_eq!(reparam_scale_into_threshold(1.0, &c).unwrap(), c);
        let r = reparam_scale_into_threshold(2.0, &c).unwrap();
        let st = NeuronState::zeros(&[1]);
        let (a, _) = ni_lif_step(&Tensor::scalar(2.0 * 1.15), &st, &c).unwrap();
        let (b, _) = ni_lif_step(&Tensor::scalar(1.15), &st, &r).unwrap();
        assert_eq!(a.normalized(), b.normalized());
        assert_eq!(a.normalized().item(), quantize_level(2.3, 4) as f64 / 4.0);
        assert!(reparam_scale_into_threshold(0.0, &c).is_err());
        assert!(reparam_scale_into_threshold(-1.0, &c).is_err());
    }

    #[test]
    fn hard_reset_and_determinism() {
        let c = cfg(4, 0.0);
        let x = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.913).sin() * 4.0);
        let a = neuron_run(&x, &c).unwrap();
        let b = neuron_run(&x, &c).unwrap();
        assert_eq!(a, b);
        let mut st = NeuronState::zeros(&[5]);
        for t in 0..3 {
            let (_, next) = ni_lif_step(&x.index0(t), &st, &c).unwrap();
            assert!(next.h.data().iter().all(|&h| h == 0.0));
            st = next;
        }
    }
}
