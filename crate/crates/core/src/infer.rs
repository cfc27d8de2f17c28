//! Spike-driven inference executor.
//!
//! Activations leaving a neuron are unrolled into `D` binary slices per
//! timestep. Weight layers never multiply an activation: each binary spike
//! scatters its (batch-norm folded, quantum scaled) weights into the
//! output, and every such addition is counted. Layers that consume a
//! continuous operand must be designated as dense MAC layers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::{bias_name, bn_names, weight_name, ConvOpts, Exec, BN_EPSILON};
use crate::graph::{check_deform, deform_sample_forward, DeformGeometry, FiringStats};
use crate::neuron::{expand_to_spikes, neuron_run, reparam_scale_into_threshold, NeuronConfig, SpikePlan};
use crate::params::ParamStore;
use crate::tensor::{self, conv_scatter, BatchNormParams, ConvSpec, Tensor};

/// Binary spike trains of one layer: one expanded plan per timestep.
#[derive(Clone, Debug)]
pub struct SpikeTrain {
    shape: Vec<usize>,
    plans: Vec<SpikePlan>,
    levels: u32,
    quantum: f64,
}

impl SpikeTrain {
    /// `[T, ...]` shape of the normalized activation.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn plans(&self) -> &[SpikePlan] {
        &self.plans
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    fn inner(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Per-element level recovered by summing the binary slices.
    fn slice_sums(&self, t: usize) -> Vec<f64> {
        let n = self.inner();
        let mut out = vec![0.0; n];
        if let Some(e) = self.plans[t].expanded() {
            for d in 0..self.levels as usize {
                for (o, v) in out.iter_mut().zip(&e.data()[d * n..(d + 1) * n]) {
                    *o += v;
                }
            }
        }
        out
    }

    /// Normalized activation rebuilt from the slices alone.
    pub fn reconstruct(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.shape.iter().product());
        for t in 0..self.plans.len() {
            data.extend(self.slice_sums(t).into_iter().map(|s| s * self.quantum));
        }
        Tensor::new(&self.shape, data).expect("spike train shape")
    }

    fn events(&self, t: usize) -> Result<Vec<(usize, usize)>> {
        let plan = &self.plans[t];
        let e = plan
            .expanded()
            .ok_or_else(|| Error::Config("spike train without expansion".into()))?;
        if let Some(&v) = e.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary(v));
        }
        Ok(plan.events().collect())
    }
}

#[derive(Clone, Debug)]
pub enum Value {
    Dense(Tensor),
    Spikes(SpikeTrain),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Dense(t) => t.shape(),
            Value::Spikes(s) => s.shape(),
        }
    }

    /// The numeric value: continuous data or the slice reconstruction.
    pub fn to_tensor(&self) -> Tensor {
        match self {
            Value::Dense(t) => t.clone(),
            Value::Spikes(s) => s.reconstruct(),
        }
    }
}

/// Geometry of a counted layer, enough to recount its additions from a
/// spike trace.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Spike-gated convolution over a `[C, H, W]` input.
    Conv { spec: ConvSpec, in_hw: (usize, usize) },
    /// Every event of the gated operand adds into a fixed number of outputs.
    Fanout(u64),
    /// Continuous operands; counted as dense MACs.
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    /// Multiply-accumulates of one timestep at full density and one slice.
    pub dense_macs: u64,
    pub spike_acs: u64,
    pub timesteps: usize,
    pub levels: u32,
}

impl LayerRecord {
    pub fn is_mac(&self) -> bool {
        self.kind == LayerKind::Dense
    }
}

/// One binary spike consumed by a counted layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub layer: usize,
    pub t: usize,
    pub element: usize,
    pub d: usize,
}

/// Totals of the binarity and slice-sum checks on every expanded train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpikeAudit {
    pub elements: u64,
    pub violations: u64,
}

pub struct InferExec<'a> {
    params: &'a ParamStore,
    cfg: NeuronConfig,
    overrides: BTreeMap<String, NeuronConfig>,
    values: Vec<Value>,
    layers: Vec<LayerRecord>,
    trace: Option<Vec<TraceEvent>>,
    recorded: Vec<(String, Tensor)>,
    firing: BTreeMap<String, FiringStats>,
    audit: SpikeAudit,
}

impl<'a> InferExec<'a> {
    pub fn new(params: &'a ParamStore, cfg: NeuronConfig) -> Self {
        Self {
            params,
            cfg,
            overrides: BTreeMap::new(),
            values: Vec::new(),
            layers: Vec::new(),
            trace: None,
            recorded: Vec::new(),
            firing: BTreeMap::new(),
            audit: SpikeAudit::default(),
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Run the neuron `name` with a different configuration.
    pub fn with_overrides(mut self, overrides: BTreeMap<String, NeuronConfig>) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn value(&self, v: usize) -> &Value {
        &self.values[v]
    }

    /// Every spike train produced so far, in execution order.
    pub fn spike_trains(&self) -> impl Iterator<Item = &SpikeTrain> {
        self.values.iter().filter_map(|v| match v {
            Value::Spikes(s) => Some(s),
            Value::Dense(_) => None,
        })
    }

    pub fn layers(&self) -> &[LayerRecord] {
        &self.layers
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    /// Normalized output of every neuron, in execution order.
    pub fn recorded(&self) -> &[(String, Tensor)] {
        &self.recorded
    }

    pub fn firing(&self) -> &BTreeMap<String, FiringStats> {
        &self.firing
    }

    pub fn audit(&self) -> SpikeAudit {
        self.audit
    }

    fn push(&mut self, v: Value) -> usize {
        self.values.push(v);
        self.values.len() - 1
    }

    fn dense(&self, v: usize, context: &'static str) -> Result<&Tensor> {
        match &self.values[v] {
            Value::Dense(t) => Ok(t),
            Value::Spikes(_) => Err(Error::Config(alloc::format!("{context}: expected a continuous operand"))),
        }
    }

    fn spikes(&self, v: usize, layer: &str) -> Result<&SpikeTrain> {
        match &self.values[v] {
            Value::Spikes(s) => Ok(s),
            Value::Dense(_) => Err(Error::Config(alloc::format!(
                "layer `{layer}` would multiply a continuous activation"
            ))),
        }
    }

    fn open_layer(&mut self, name: &str, kind: LayerKind, dense_macs: u64, levels: u32) -> usize {
        self.layers.push(LayerRecord {
            name: name.into(),
            kind,
            dense_macs,
            spike_acs: 0,
            timesteps: self.cfg.timesteps,
            levels,
        });
        self.layers.len() - 1
    }

    fn log(&mut self, layer: usize, t: usize, element: usize, d: usize) {
        if let Some(tr) = &mut self.trace {
            tr.push(TraceEvent { layer, t, element, d });
        }
    }

    fn fire(&mut self, name: &str, x: &Tensor, cfg: &NeuronConfig) -> Result<usize> {
        let plans = neuron_run(x, cfg)?;
        let mut expanded = Vec::with_capacity(plans.len());
        let mut level_sum = 0u64;
        for p in &plans {
            let e = expand_to_spikes(p, cfg)?;
            self.audit.elements += e.len() as u64;
            self.audit.violations += e.slice_sum_violations() as u64;
            level_sum += e.total_spikes();
            expanded.push(e);
        }
        let train = SpikeTrain {
            shape: x.shape().to_vec(),
            plans: expanded,
            levels: cfg.levels,
            quantum: cfg.quantum(),
        };
        self.recorded.push((name.into(), train.reconstruct()));
        let stats = self.firing.entry(name.into()).or_default();
        stats.normalized_sum += level_sum as f64 / cfg.levels as f64;
        stats.elements += x.len();
        Ok(self.push(Value::Spikes(train)))
    }

    /// Batch-norm folded weights, bias and gain of a conv layer.
    fn folded(&self, name: &str, spec: &ConvSpec, opts: ConvOpts) -> Result<(Tensor, Tensor)> {
        let w = self.params.get(&weight_name(name))?;
        let b = if opts.bias {
            Some(self.params.get(&bias_name(name))?.clone())
        } else {
            None
        };
        let (mut w, mut b) = if opts.bn {
            let [g, bt, m, v] = bn_names(name);
            let bn = BatchNormParams {
                gamma: self.params.get(&g)?.data().to_vec(),
                beta: self.params.get(&bt)?.data().to_vec(),
                running_mean: self.params.get(&m)?.data().to_vec(),
                running_var: self.params.get(&v)?.data().to_vec(),
                epsilon: BN_EPSILON,
                momentum: 0.1,
            };
            tensor::fold_bn_into_conv(w, b.as_ref(), &bn)?
        } else {
            (w.clone(), b.unwrap_or_else(|| Tensor::zeros(&[spec.out_channels])))
        };
        if let Some(gain) = opts.gain {
            let s = self.params.get(gain)?.item();
            w = w.scale(s);
            b = b.scale(s);
        }
        Ok((w, b))
    }
}

impl Exec for InferExec<'_> {
    type V = usize;

    fn neuron(&self, name: &str) -> NeuronConfig {
        self.overrides.get(name).copied().unwrap_or(self.cfg)
    }

    fn timesteps(&self) -> usize {
        self.cfg.timesteps
    }

    fn shape(&self, v: usize) -> Vec<usize> {
        self.values[v].shape().to_vec()
    }

    fn image(&mut self, image: &Tensor) -> Result<usize> {
        let steps = self.cfg.timesteps;
        let mut shape = vec![steps];
        shape.extend_from_slice(image.shape());
        let n = image.len();
        let t = Tensor::from_fn(&shape, |i| image.data()[i % n]);
        Ok(self.push(Value::Dense(t)))
    }

    fn queries(&mut self, content: &str, pos: &str, channels: usize, count: usize) -> Result<usize> {
        let q = self.params.get(content)?.add(self.params.get(pos)?)?;
        if q.shape() != [1, channels, count, 1] {
            return Err(Error::Shape {
                context: "query embedding",
                lhs: q.shape().to_vec(),
                rhs: vec![1, channels, count, 1],
            });
        }
        let n = q.len();
        let t = Tensor::from_fn(&[self.cfg.timesteps, channels, count, 1], |i| q.data()[i % n]);
        Ok(self.push(Value::Dense(t)))
    }

    fn spike(&mut self, name: &str, x: usize) -> Result<usize> {
        let cfg = self.neuron(name);
        let input = self.dense(x, "neuron input")?.clone();
        self.fire(name, &input, &cfg)
    }

    fn conv(&mut self, name: &str, x: usize, spec: ConvSpec, opts: ConvOpts) -> Result<usize> {
        spec.validate()?;
        let (w, b) = self.folded(name, &spec, opts)?;
        let shape = self.values[x].shape().to_vec();
        if shape.len() != 4 || shape[1] != spec.in_channels {
            return Err(Error::Shape {
                context: "conv input",
                lhs: shape,
                rhs: vec![spec.in_channels],
            });
        }
        let (steps, h, wd) = (shape[0], shape[2], shape[3]);
        let (oh, ow) = spec.output_hw(h, wd)?;
        let macs = spec.dense_macs(h, wd)?;
        if let Value::Dense(input) = &self.values[x] {
            if !opts.mac {
                return Err(Error::Config(alloc::format!(
                    "layer `{name}` would multiply a continuous activation"
                )));
            }
            let out = tensor::conv2d(input, &spec, &w, Some(&b))?;
            let levels = self.cfg.levels;
            self.open_layer(name, LayerKind::Dense, macs, levels);
            return Ok(self.push(Value::Dense(out)));
        }
        let train = self.spikes(x, name)?.clone();
        let layer = self.open_layer(name, LayerKind::Conv { spec, in_hw: (h, wd) }, macs, train.levels);
        let per_spike = w.scale(train.quantum);
        let out_item = spec.out_channels * oh * ow;
        let mut out = vec![0.0; steps * out_item];
        let mut acs = 0;
        for t in 0..steps {
            let o = &mut out[t * out_item..(t + 1) * out_item];
            for oc in 0..spec.out_channels {
                o[oc * oh * ow..(oc + 1) * oh * ow].fill(b.data()[oc]);
            }
            for (element, d) in train.events(t)? {
                let (c, rem) = (element / (h * wd), element % (h * wd));
                acs += conv_scatter(&spec, (h, wd), per_spike.data(), c, rem / wd, rem % wd, o)?;
                self.log(layer, t, element, d);
            }
        }
        self.layers[layer].spike_acs = acs;
        let out = Tensor::new(&[steps, spec.out_channels, oh, ow], out)?;
        Ok(self.push(Value::Dense(out)))
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        let out = self.dense(a, "membrane add")?.add(self.dense(b, "membrane add")?)?;
        Ok(self.push(Value::Dense(out)))
    }

    fn upsample2(&mut self, x: usize) -> Result<usize> {
        let out = tensor::upsample2(self.dense(x, "upsample")?)?;
        Ok(self.push(Value::Dense(out)))
    }

    fn attention(&mut self, name: &str, q: usize, k: usize, v: usize, heads: usize, scale: f64) -> Result<usize> {
        let (qs, ks, vs) = (
            self.spikes(q, name)?.clone(),
            self.spikes(k, name)?.clone(),
            self.spikes(v, name)?.clone(),
        );
        let (steps, c) = (qs.shape[0], qs.shape[1]);
        if ks.shape != vs.shape || ks.shape[0] != steps || ks.shape[1] != c {
            return Err(Error::Shape {
                context: "attention operands",
                lhs: qs.shape.clone(),
                rhs: ks.shape.clone(),
            });
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "{c} channels are not divisible into {heads} heads"
            )));
        }
        let dh = c / heads;
        let n = qs.inner() / c;
        let m = ks.inner() / c;
        let kv_layer = self.open_layer(
            &alloc::format!("{name}.kv"),
            LayerKind::Fanout(dh as u64),
            (heads * dh * dh * m) as u64,
            ks.levels,
        );
        let q_layer = self.open_layer(
            &alloc::format!("{name}.qkv"),
            LayerKind::Fanout(dh as u64),
            (heads * dh * dh * n) as u64,
            qs.levels,
        );
        let mut counts = vec![0.0; steps * c * n];
        let (mut kv_acs, mut q_acs) = (0, 0);
        for t in 0..steps {
            // K^T V: each key spike adds the value levels of its head.
            let v_levels = vs.slice_sums(t);
            let mut kv = vec![0.0; c * dh];
            for (element, d) in ks.events(t)? {
                let (i, p) = (element / m, element % m);
                let base = (i / dh) * dh;
                for j in 0..dh {
                    kv[i * dh + j] += v_levels[(base + j) * m + p];
                }
                kv_acs += dh as u64;
                self.log(kv_layer, t, element, d);
            }
            // Q (K^T V): each query spike adds one row of the product.
            let out = &mut counts[t * c * n..(t + 1) * c * n];
            for (element, d) in qs.events(t)? {
                let (i, p) = (element / n, element % n);
                let base = (i / dh) * dh;
                for j in 0..dh {
                    out[(base + j) * n + p] += kv[i * dh + j];
                }
                q_acs += dh as u64;
                self.log(q_layer, t, element, d);
            }
        }
        self.layers[kv_layer].spike_acs = kv_acs;
        self.layers[q_layer].spike_acs = q_acs;
        // The product holds integer levels; the quanta and the attention
        // scale move into the neuron threshold.
        let folded = scale * qs.quantum * ks.quantum * vs.quantum;
        let cfg = reparam_scale_into_threshold(folded, &self.neuron(name))?;
        let input = Tensor::new(&qs.shape, counts)?;
        self.fire(name, &input, &cfg)
    }

    fn deform_sample(&mut self, name: &str, values: usize, offsets: usize, geom: &DeformGeometry) -> Result<usize> {
        let vals = self.dense(values, "deformable sampling values")?;
        let offs = self.dense(offsets, "deformable sampling offsets")?;
        let out = deform_sample_forward(vals, offs, geom)?;
        let (c, hw) = (vals.dim(1), vals.dim(2) * vals.dim(3));
        let levels = self.cfg.levels;
        self.open_layer(name, LayerKind::Dense, (4 * geom.points() * c * hw) as u64, levels);
        Ok(self.push(Value::Dense(out)))
    }

    fn group_gate(&mut self, name: &str, sampled: usize, attn: usize, geom: &DeformGeometry) -> Result<usize> {
        let kp = geom.points();
        let sshape = self.values[sampled].shape().to_vec();
        if sshape.len() != 4 || sshape[1] % kp != 0 {
            return Err(Error::InvalidShape(sshape));
        }
        let (steps, c, h, w) = (sshape[0], sshape[1] / kp, sshape[2], sshape[3]);
        let hw = h * w;
        let cg = c / geom.groups.max(1);
        let proto = Tensor::zeros(&[steps, c, h, w]);
        let ga = geom.groups * kp;
        let dense_macs = (c * kp * hw) as u64;
        let mut out = proto.clone();
        let mut acs = 0;
        match (&self.values[attn], &self.values[sampled]) {
            (Value::Spikes(a), Value::Dense(s)) => {
                let a = a.clone();
                let s = s.clone();
                check_deform(&proto, &Tensor::zeros(a.shape()), ga, geom)?;
                let layer = self.open_layer(name, LayerKind::Fanout(cg as u64), dense_macs, a.levels);
                for t in 0..steps {
                    for (element, d) in a.events(t)? {
                        let (gk, pos) = (element / hw, element % hw);
                        let (g, k) = (gk / kp, gk % kp);
                        for ch in g * cg..(g + 1) * cg {
                            out.data_mut()[(t * c + ch) * hw + pos] +=
                                a.quantum * s.data()[(t * kp * c + k * c + ch) * hw + pos];
                        }
                        acs += cg as u64;
                        self.log(layer, t, element, d);
                    }
                }
                self.layers[layer].spike_acs = acs;
            }
            (Value::Dense(a), Value::Spikes(s)) => {
                let a = a.clone();
                let s = s.clone();
                check_deform(&proto, &a, ga, geom)?;
                let layer = self.open_layer(name, LayerKind::Fanout(1), dense_macs, s.levels);
                for t in 0..steps {
                    for (element, d) in s.events(t)? {
                        let (kc, pos) = (element / hw, element % hw);
                        let (k, ch) = (kc / c, kc % c);
                        let g = ch / cg;
                        out.data_mut()[(t * c + ch) * hw + pos] +=
                            s.quantum * a.data()[(t * ga + g * kp + k) * hw + pos];
                        acs += 1;
                        self.log(layer, t, element, d);
                    }
                }
                self.layers[layer].spike_acs = acs;
            }
            _ => {
                return Err(Error::Config(alloc::format!(
                    "layer `{name}` needs exactly one spiking operand"
                )))
            }
        }
        Ok(self.push(Value::Dense(out)))
    }

    fn mask_dot(&mut self, name: &str, mask: usize, pixel: usize) -> Result<usize> {
        let ms = self.spikes(mask, name)?.clone();
        let ps = self.spikes(pixel, name)?.clone();
        if ms.shape.len() != 4 || ps.shape.len() != 4 || ms.shape[..2] != ps.shape[..2] {
            return Err(Error::Shape {
                context: "mask embedding vs pixel embedding",
                lhs: ms.shape.clone(),
                rhs: ps.shape.clone(),
            });
        }
        let (steps, c) = (ms.shape[0], ms.shape[1]);
        let n = ms.inner() / c;
        let p = ps.inner() / c;
        let layer = self.open_layer(name, LayerKind::Fanout(p as u64), (c * n * p) as u64, ms.levels);
        let mut out = Tensor::zeros(&[steps, n, ps.shape[2], ps.shape[3]]);
        let mut acs = 0;
        for t in 0..steps {
            let px = ps.slice_sums(t);
            let o = &mut out.data_mut()[t * n * p..(t + 1) * n * p];
            for (element, d) in ms.events(t)? {
                let (ch, q) = (element / n, element % n);
                for (ov, pv) in o[q * p..(q + 1) * p].iter_mut().zip(&px[ch * p..(ch + 1) * p]) {
                    *ov += pv;
                }
                acs += p as u64;
                self.log(layer, t, element, d);
            }
        }
        self.layers[layer].spike_acs = acs;
        let norm = ms.quantum * ps.quantum;
        Ok(self.push(Value::Dense(out.scale(norm))))
    }

    fn readout(&mut self, name: &str, x: usize) -> Result<usize> {
        let g = self.params.get(&alloc::format!("{name}.gain"))?.item();
        let b = self.params.get(&alloc::format!("{name}.bias"))?.item();
        let input = self.dense(x, "readout")?;
        let out = input.map(|v| v * g + b);
        let per_step = (input.len() / input.dim(0)) as u64;
        let levels = self.cfg.levels;
        self.open_layer(name, LayerKind::Dense, per_step, levels);
        Ok(self.push(Value::Dense(out)))
    }
}
