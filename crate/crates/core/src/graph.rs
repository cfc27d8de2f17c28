//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so creation order is already a
//! topological order and the default backward sweep walks it in reverse.
//! The spiking neuron op carries its own backward-through-time rule with a
//! straight-through estimator for the rounding.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::neuron::{quantize_level, surrogate_grad, NeuronConfig};
use crate::params::ParamStore;
use crate::tensor::{self, bilinear_tap_grads, bilinear_taps, ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics a batch-norm node normalizes with when it does not
/// use the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

/// Geometry shared by the deformable sampling and gating ops.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGeometry {
    pub groups: usize,
    /// Fixed kernel offsets `p_k` as `(dy, dx)`.
    pub stencil: Vec<(f64, f64)>,
}

impl DeformGeometry {
    pub fn points(&self) -> usize {
        self.stencil.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    TileTime(Var),
    Sum(Var),
    Mean(Var),
    Tanh(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Spike {
        x: Var,
        cfg: NeuronConfig,
        membrane: Tensor,
    },
    RoundClip {
        x: Var,
        levels: u32,
    },
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    DeformSample {
        values: Var,
        offsets: Var,
        geom: DeformGeometry,
    },
    GroupGate {
        sampled: Var,
        attn: Var,
        geom: DeformGeometry,
    },
    Upsample2(Var),
    MaskDot {
        mask: Var,
        pixel: Var,
    },
    MeanTime(Var),
    Custom {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Firing statistics of one named spiking layer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FiringStats {
    /// Sum of emitted levels divided by `D`.
    pub normalized_sum: f64,
    pub elements: usize,
}

impl FiringStats {
    pub fn rate(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.normalized_sum / self.elements as f64
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    relaxed: bool,
    tags: Vec<(String, Var)>,
    firing: BTreeMap<String, FiringStats>,
    batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose neurons skip the rounding and emit `Clip(U, 0, D)`.
    /// The backward rules are unchanged, so finite differences of this
    /// relaxed forward validate every surrogate-gradient path.
    pub fn relaxed() -> Self {
        Self {
            relaxed: true,
            ..Self::default()
        }
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, name: &str, store: &ParamStore) -> Result<Var> {
        let t = store.get(name)?.clone();
        Ok(self.push(t, Op::Param(name.into())))
    }

    /// Record `v` under `name` for later inspection.
    pub fn tag(&mut self, name: impl Into<String>, v: Var) {
        self.tags.push((name.into(), v));
    }

    pub fn tags(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tags.iter().map(|(n, v)| (n.as_str(), &self.nodes[v.0].value))
    }

    pub fn firing(&self) -> &BTreeMap<String, FiringStats> {
        &self.firing
    }

    /// Batch statistics `(name, mean, biased var)` of every batch-norm node
    /// that normalized with the batch.
    pub fn batch_statistics(&self) -> &[(String, Vec<f64>, Vec<f64>)] {
        &self.batch_stats
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiply a tensor by a one-element variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::InvalidShape(self.value(s).shape().to_vec()));
        }
        let v = self.value(a).scale(self.value(s).item());
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    /// Add a one-element variable to every entry.
    pub fn shift_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::InvalidShape(self.value(s).shape().to_vec()));
        }
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x + sv);
        Ok(self.push(v, Op::ShiftBy(a, s)))
    }

    /// Repeat a `[1, ...]` tensor `steps` times along the leading axis.
    pub fn tile_time(&mut self, a: Var, steps: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 || x.dim(0) != 1 {
            return Err(Error::InvalidShape(x.shape().to_vec()));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = steps;
        let n = x.len();
        let v = Tensor::from_fn(&shape, |i| x.data()[i % n]);
        Ok(self.push(v, Op::TileTime(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), &spec, self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(v, Op::Conv2d { x, w, b, spec }))
    }

    /// Batch norm over axis 1. With `batch == false` the supplied statistics
    /// are constants; otherwise the batch statistics are used and recorded
    /// under `name`.
    pub fn batchnorm(
        &mut self,
        name: &str,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats,
        batch: bool,
    ) -> Result<Var> {
        let input = self.value(x).clone();
        let c = self.value(gamma).len();
        if input.rank() < 2 || input.dim(1) != c {
            return Err(Error::Dim {
                context: "graph batchnorm channels",
                axis: 1,
                expected: c,
                got: input.shape().get(1).copied().unwrap_or(0),
            });
        }
        if !(stats.epsilon > 0.0) {
            return Err(Error::Epsilon(stats.epsilon));
        }
        let n = input.dim(0);
        let inner: usize = input.shape()[2..].iter().product();
        let count = (n * inner) as f64;
        let mut mean = stats.mean.clone();
        let mut var = stats.var.clone();
        if batch {
            for ch in 0..c {
                let idx = || (0..n).flat_map(move |b| (0..inner).map(move |i| (b * c + ch) * inner + i));
                let m = idx().map(|i| input.data()[i]).sum::<f64>() / count;
                let s = idx()
                    .map(|i| {
                        let d = input.data()[i] - m;
                        d * d
                    })
                    .sum::<f64>()
                    / count;
                mean[ch] = m;
                var[ch] = s;
            }
            self.batch_stats.push((name.into(), mean.clone(), var.clone()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + stats.epsilon)).collect();
        let mut xhat = input.clone();
        let mut out = input.clone();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let h = (input.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = h * g[ch] + bt[ch];
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
        ))
    }

    /// Spiking neuron over the leading time axis of `[T, ...]`; emits the
    /// normalized level (NI-LIF) or raw level (I-LIF).
    pub fn spike(&mut self, name: &str, x: Var, cfg: &NeuronConfig) -> Result<Var> {
        cfg.validate()?;
        let input = self.value(x).clone();
        let steps = input.dim(0);
        let inner = input.len() / steps;
        let mut membrane = Tensor::zeros(input.shape());
        let mut out = Tensor::zeros(input.shape());
        let mut h = vec![0.0; inner];
        let mut level_sum = 0.0;
        for t in 0..steps {
            for i in 0..inner {
                let idx = t * inner + i;
                let u = h[i] + input.data()[idx] / cfg.theta;
                let q = if self.relaxed {
                    u.clamp(0.0, cfg.levels as f64)
                } else {
                    quantize_level(u, cfg.levels) as f64
                };
                membrane.data_mut()[idx] = u;
                out.data_mut()[idx] = cfg.normalize(q);
                level_sum += q;
                h[i] = cfg.beta * (u - q);
            }
        }
        let stats = self.firing.entry(name.into()).or_default();
        stats.normalized_sum += level_sum / cfg.levels as f64;
        stats.elements += input.len();
        let v = self.push(out, Op::Spike { x, cfg: *cfg, membrane });
        self.tag(name, v);
        Ok(v)
    }

    /// `Clip(round(u), 0, D)` with the straight-through backward.
    pub fn round_clip(&mut self, x: Var, levels: u32) -> Var {
        let relaxed = self.relaxed;
        let v = self.value(x).map(|u| {
            if relaxed {
                u.clamp(0.0, levels as f64)
            } else {
                quantize_level(u, levels) as f64
            }
        });
        self.push(v, Op::RoundClip { x, levels })
    }

    /// Per-head `Q (K^T V)` with `q: [T, C, N...]`, `k, v: [T, C, M...]`;
    /// the output has the shape of `q`.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let out = linear_attention_forward(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(out, Op::LinearAttention { q, k, v, heads }))
    }

    /// Bilinear sampling of `values: [T, C, H, W]` at every reference point
    /// plus stencil offset plus learned offset (`offsets: [T, 2GK, H, W]`).
    /// Output `[T, K*C, H, W]`, channel `k*C + c`.
    pub fn deform_sample(&mut self, values: Var, offsets: Var, geom: &DeformGeometry) -> Result<Var> {
        let out = deform_sample_forward(self.value(values), self.value(offsets), geom)?;
        Ok(self.push(
            out,
            Op::DeformSample {
                values,
                offsets,
                geom: geom.clone(),
            },
        ))
    }

    /// `out[c] = sum_k attn[g(c)*K + k] * sampled[k*C + c]`.
    pub fn group_gate(&mut self, sampled: Var, attn: Var, geom: &DeformGeometry) -> Result<Var> {
        let out = group_gate_forward(self.value(sampled), self.value(attn), geom)?;
        Ok(self.push(
            out,
            Op::GroupGate {
                sampled,
                attn,
                geom: geom.clone(),
            },
        ))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let v = tensor::upsample2(self.value(x))?;
        Ok(self.push(v, Op::Upsample2(x)))
    }

    /// `mask: [T, C, N, 1]`, `pixel: [T, C, h, w]` -> `[T, N, h, w]`.
    pub fn mask_dot(&mut self, mask: Var, pixel: Var) -> Result<Var> {
        let out = mask_dot_forward(self.value(mask), self.value(pixel))?;
        Ok(self.push(out, Op::MaskDot { mask, pixel }))
    }

    /// Average over the leading time axis, keeping it with length 1.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let steps = input.dim(0);
        let inner = input.len() / steps;
        let mut shape = input.shape().to_vec();
        shape[0] = 1;
        let mut out = Tensor::zeros(&shape);
        for t in 0..steps {
            for i in 0..inner {
                out.data_mut()[i] += input.data()[t * inner + i] / steps as f64;
            }
        }
        self.push(out, Op::MeanTime(x))
    }

    /// A node whose value and local gradients were computed outside the
    /// tape. `grads[i]` is d(value)/d(inputs[i]) for a scalar value.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<Var>, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::Config("custom node needs one gradient per input".into()));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::Shape {
                    context: "custom node gradient",
                    lhs: g.shape().to_vec(),
                    rhs: self.value(*v).shape().to_vec(),
                });
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Custom { inputs, grads }))
    }

    fn inputs_of(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::ScaleBy(a, b)
            | Op::ShiftBy(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::Upsample2(a)
            | Op::MeanTime(a)
            | Op::TileTime(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Spike { x, .. } | Op::RoundClip { x, .. } => vec![*x],
            Op::LinearAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::DeformSample { values, offsets, .. } => vec![*values, *offsets],
            Op::GroupGate { sampled, attn, .. } => vec![*sampled, *attn],
            Op::MaskDot { mask, pixel } => vec![*mask, *pixel],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// A topological order of everything `loss` depends on, built by a
    /// depth-first walk that visits inputs last-to-first. Differs from
    /// creation order whenever branches interleave.
    pub fn dfs_order(&self, loss: Var) -> Vec<Var> {
        let mut seen = vec![false; self.nodes.len()];
        let mut post = Vec::new();
        let mut stack = vec![(loss, false)];
        while let Some((v, done)) = stack.pop() {
            if done {
                post.push(v);
                continue;
            }
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            stack.push((v, true));
            for i in self.inputs_of(v) {
                if !seen[i.0] {
                    stack.push((i, false));
                }
            }
        }
        post
    }

    /// Gradients of a scalar `loss` for every parameter in `store`;
    /// parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
        let order: Vec<Var> = (0..=loss.0).map(Var).collect();
        self.backward_with_order(loss, &order, store)
    }

    /// As [`Graph::backward`] but sweeping `order` (a topological order,
    /// inputs before consumers) in reverse.
    pub fn backward_with_order(
        &self,
        loss: Var,
        order: &[Var],
        store: &ParamStore,
    ) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.node_grads(loss, order)?;
        let mut out = BTreeMap::new();
        for (name, t) in store.iter() {
            out.insert(String::from(name), Tensor::zeros(t.shape()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads[i]) {
                match out.get_mut(name.as_str()) {
                    Some(acc) => acc.add_assign(g)?,
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to arbitrary nodes.
    pub fn grad_wrt(&self, loss: Var, targets: &[Var]) -> Result<Vec<Tensor>> {
        let order: Vec<Var> = (0..=loss.0).map(Var).collect();
        let grads = self.node_grads(loss, &order)?;
        Ok(targets
            .iter()
            .map(|v| grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.value(*v).shape())))
            .collect())
    }

    fn node_grads(&self, loss: Var, order: &[Var]) -> Result<Vec<Option<Tensor>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for &v in order.iter().rev() {
            let Some(g) = grads[v.0].take() else {
                continue;
            };
            for (input, gi) in self.local_grads(v, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[v.0] = Some(g);
        }
        Ok(grads)
    }

    fn local_grads(&self, v: Var, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[v.0];
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.mul(self.value(*b))?),
                (*b, g.mul(self.value(*a))?),
            ],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                let gs = g.mul(self.value(*a))?.sum();
                vec![(*a, g.scale(sv)), (*s, Tensor::full(self.value(*s).shape(), gs))]
            }
            Op::ShiftBy(a, s) => vec![(*a, g.clone()), (*s, Tensor::full(self.value(*s).shape(), g.sum()))],
            Op::TileTime(a) => {
                let n = self.value(*a).len();
                let mut ga = Tensor::zeros(self.value(*a).shape());
                for (i, gv) in g.data().iter().enumerate() {
                    ga.data_mut()[i % n] += gv;
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                vec![(*a, Tensor::full(self.value(*a).shape(), g.item() / n))]
            }
            Op::Tanh(a) => {
                let y = &node.value;
                vec![(*a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))?)]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                vec![(*a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?)]
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.matmul(&bv.transpose2d()?)?),
                    (*b, av.transpose2d()?.matmul(g)?),
                ]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape())?)],
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = tensor::conv2d_backward(self.value(*x), spec, self.value(*w), g)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let c = inv_std.len();
                let shape = xhat.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            gg[ch] += g.data()[i] * xhat.data()[i];
                            gb[ch] += g.data()[i];
                        }
                    }
                }
                let mut gx = Tensor::zeros(shape);
                let m = (n * inner) as f64;
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            gx.data_mut()[i] = if *batch {
                                gam[ch] * inv_std[ch] / m * (m * g.data()[i] - gb[ch] - xhat.data()[i] * gg[ch])
                            } else {
                                g.data()[i] * gam[ch] * inv_std[ch]
                            };
                        }
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor::new(&[c], gg)?),
                    (*beta, Tensor::new(&[c], gb)?),
                ]
            }
            Op::Spike { x, cfg, membrane } => {
                let steps = membrane.dim(0);
                let inner = membrane.len() / steps;
                let quantum = cfg.quantum();
                let mut gx = Tensor::zeros(membrane.shape());
                let mut gh = vec![0.0; inner];
                for t in (0..steps).rev() {
                    for i in 0..inner {
                        let idx = t * inner + i;
                        let sg = surrogate_grad(membrane.data()[idx], cfg.levels);
                        let gu = g.data()[idx] * quantum * sg + gh[i] * cfg.beta * (1.0 - sg);
                        gx.data_mut()[idx] = gu / cfg.theta;
                        gh[i] = gu;
                    }
                }
                vec![(*x, gx)]
            }
            Op::RoundClip { x, levels } => {
                let u = self.value(*x);
                vec![(*x, g.zip_map(u, |gv, uv| gv * surrogate_grad(uv, *levels))?)]
            }
            Op::LinearAttention { q, k, v, heads } => {
                let (gq, gk, gv) =
                    linear_attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, g)?;
                vec![(*q, gq), (*k, gk), (*v, gv)]
            }
            Op::DeformSample { values, offsets, geom } => {
                let (gv, go) = deform_sample_backward(self.value(*values), self.value(*offsets), geom, g)?;
                vec![(*values, gv), (*offsets, go)]
            }
            Op::GroupGate { sampled, attn, geom } => {
                let (gs, ga) = group_gate_backward(self.value(*sampled), self.value(*attn), geom, g)?;
                vec![(*sampled, gs), (*attn, ga)]
            }
            Op::Upsample2(x) => vec![(*x, tensor::upsample2_backward(g, self.value(*x).shape())?)],
            Op::MaskDot { mask, pixel } => {
                let (gm, gp) = mask_dot_backward(self.value(*mask), self.value(*pixel), g)?;
                vec![(*mask, gm), (*pixel, gp)]
            }
            Op::MeanTime(x) => {
                let input = self.value(*x);
                let steps = input.dim(0);
                let inner = input.len() / steps;
                let mut gx = Tensor::zeros(input.shape());
                for t in 0..steps {
                    for i in 0..inner {
                        gx.data_mut()[t * inner + i] = g.data()[i] / steps as f64;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Custom { inputs, grads } => inputs
                .iter()
                .zip(grads)
                .map(|(v, gl)| (*v, gl.scale(g.item())))
                .collect(),
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) struct AttnDims {
    pub steps: usize,
    pub channels: usize,
    pub queries: usize,
    pub keys: usize,
    pub head_dim: usize,
}

pub(crate) fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<AttnDims> {
    if q.rank() < 2 || k.shape() != v.shape() || k.rank() < 2 {
        return Err(Error::Shape {
            context: "linear attention operands",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (steps, channels) = (q.dim(0), q.dim(1));
    if k.dim(0) != steps || k.dim(1) != channels {
        return Err(Error::Shape {
            context: "linear attention query vs key",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Config(alloc::format!(
            "{channels} channels are not divisible into {heads} heads"
        )));
    }
    Ok(AttnDims {
        steps,
        channels,
        queries: q.len() / (steps * channels),
        keys: k.len() / (steps * channels),
        head_dim: channels / heads,
    })
}

fn linear_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let d = attention_dims(q, k, v, heads)?;
    let (n, m, dh, c) = (d.queries, d.keys, d.head_dim, d.channels);
    let mut out = Tensor::zeros(q.shape());
    for t in 0..d.steps {
        let qt = &q.data()[t * c * n..(t + 1) * c * n];
        let kt = &k.data()[t * c * m..(t + 1) * c * m];
        let vt = &v.data()[t * c * m..(t + 1) * c * m];
        let ot = &mut out.data_mut()[t * c * n..(t + 1) * c * n];
        for h in 0..heads {
            let base = h * dh;
            let mut kv = vec![0.0; dh * dh];
            for i in 0..dh {
                for j in 0..dh {
                    let mut acc = 0.0;
                    for p in 0..m {
                        acc += kt[(base + i) * m + p] * vt[(base + j) * m + p];
                    }
                    kv[i * dh + j] = acc;
                }
            }
            for j in 0..dh {
                for i in 0..dh {
                    let w = kv[i * dh + j];
                    if w == 0.0 {
                        continue;
                    }
                    for p in 0..n {
                        ot[(base + j) * n + p] += qt[(base + i) * n + p] * w;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn linear_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = attention_dims(q, k, v, heads)?;
    let (n, m, dh, c) = (d.queries, d.keys, d.head_dim, d.channels);
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    for t in 0..d.steps {
        let (qo, ko) = (t * c * n, t * c * m);
        for h in 0..heads {
            let base = h * dh;
            let mut kv = vec![0.0; dh * dh];
            for i in 0..dh {
                for j in 0..dh {
                    kv[i * dh + j] = (0..m)
                        .map(|p| k.data()[ko + (base + i) * m + p] * v.data()[ko + (base + j) * m + p])
                        .sum();
                }
            }
            let mut gkv = vec![0.0; dh * dh];
            for i in 0..dh {
                for j in 0..dh {
                    let mut acc = 0.0;
                    for p in 0..n {
                        acc += q.data()[qo + (base + i) * n + p] * g.data()[qo + (base + j) * n + p];
                    }
                    gkv[i * dh + j] = acc;
                }
            }
            for i in 0..dh {
                for p in 0..n {
                    let mut acc = 0.0;
                    for j in 0..dh {
                        acc += kv[i * dh + j] * g.data()[qo + (base + j) * n + p];
                    }
                    gq.data_mut()[qo + (base + i) * n + p] = acc;
                }
            }
            for i in 0..dh {
                for p in 0..m {
                    let mut ak = 0.0;
                    let mut av = 0.0;
                    for j in 0..dh {
                        ak += gkv[i * dh + j] * v.data()[ko + (base + j) * m + p];
                        av += gkv[j * dh + i] * k.data()[ko + (base + j) * m + p];
                    }
                    gk.data_mut()[ko + (base + i) * m + p] = ak;
                    gv.data_mut()[ko + (base + i) * m + p] = av;
                }
            }
        }
    }
    Ok((gq, gk, gv))
}

pub(crate) fn check_deform(values: &Tensor, aux: &Tensor, aux_channels: usize, geom: &DeformGeometry) -> Result<()> {
    if values.rank() != 4 || aux.rank() != 4 {
        return Err(Error::Shape {
            context: "deformable attention operands must be [T, C, H, W]",
            lhs: values.shape().to_vec(),
            rhs: aux.shape().to_vec(),
        });
    }
    let c = values.dim(1);
    if geom.groups == 0 || c % geom.groups != 0 {
        return Err(Error::Config(alloc::format!(
            "{} groups do not divide {c} channels",
            geom.groups
        )));
    }
    if geom.points() == 0 {
        return Err(Error::Config("deformable attention needs K >= 1".into()));
    }
    let expect = [values.dim(0), aux_channels, values.dim(2), values.dim(3)];
    if aux.shape() != expect {
        return Err(Error::Shape {
            context: "deformable attention auxiliary map",
            lhs: aux.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn deform_sample_forward(values: &Tensor, offsets: &Tensor, geom: &DeformGeometry) -> Result<Tensor> {
    let kp = geom.points();
    check_deform(values, offsets, 2 * geom.groups * kp, geom)?;
    let (steps, c, h, w) = (values.dim(0), values.dim(1), values.dim(2), values.dim(3));
    let cg = c / geom.groups;
    let hw = h * w;
    let mut out = Tensor::zeros(&[steps, kp * c, h, w]);
    for t in 0..steps {
        let vt = &values.data()[t * c * hw..(t + 1) * c * hw];
        let ot = &offsets.data()[t * 2 * geom.groups * kp * hw..];
        let st = &mut out.data_mut()[t * kp * c * hw..(t + 1) * kp * c * hw];
        for g in 0..geom.groups {
            for (k, &(sy, sx)) in geom.stencil.iter().enumerate() {
                let oc = 2 * (g * kp + k);
                for i in 0..h {
                    for j in 0..w {
                        let pos = i * w + j;
                        let y = i as f64 + sy + ot[oc * hw + pos];
                        let x = j as f64 + sx + ot[(oc + 1) * hw + pos];
                        for (idx, wt) in bilinear_taps(y, x, h, w).into_iter().flatten() {
                            for ch in g * cg..(g + 1) * cg {
                                st[(k * c + ch) * hw + pos] += wt * vt[ch * hw + idx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn deform_sample_backward(
    values: &Tensor,
    offsets: &Tensor,
    geom: &DeformGeometry,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let kp = geom.points();
    let (steps, c, h, w) = (values.dim(0), values.dim(1), values.dim(2), values.dim(3));
    let cg = c / geom.groups;
    let hw = h * w;
    let oc_total = 2 * geom.groups * kp;
    let mut gv = Tensor::zeros(values.shape());
    let mut go = Tensor::zeros(offsets.shape());
    for t in 0..steps {
        let vt = &values.data()[t * c * hw..(t + 1) * c * hw];
        let ot = &offsets.data()[t * oc_total * hw..(t + 1) * oc_total * hw];
        let gt = &g.data()[t * kp * c * hw..(t + 1) * kp * c * hw];
        for gi in 0..geom.groups {
            for (k, &(sy, sx)) in geom.stencil.iter().enumerate() {
                let oc = 2 * (gi * kp + k);
                for i in 0..h {
                    for j in 0..w {
                        let pos = i * w + j;
                        let y = i as f64 + sy + ot[oc * hw + pos];
                        let x = j as f64 + sx + ot[(oc + 1) * hw + pos];
                        let mut gy = 0.0;
                        let mut gx = 0.0;
                        for (idx, dy, dx) in bilinear_tap_grads(y, x, h, w).into_iter().flatten() {
                            for ch in gi * cg..(gi + 1) * cg {
                                let up = gt[(k * c + ch) * hw + pos];
                                gy += up * dy * vt[ch * hw + idx];
                                gx += up * dx * vt[ch * hw + idx];
                            }
                        }
                        go.data_mut()[t * oc_total * hw + oc * hw + pos] = gy;
                        go.data_mut()[t * oc_total * hw + (oc + 1) * hw + pos] = gx;
                        for (idx, wt) in bilinear_taps(y, x, h, w).into_iter().flatten() {
                            for ch in gi * cg..(gi + 1) * cg {
                                gv.data_mut()[t * c * hw + ch * hw + idx] += wt * gt[(k * c + ch) * hw + pos];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gv, go))
}

fn group_gate_forward(sampled: &Tensor, attn: &Tensor, geom: &DeformGeometry) -> Result<Tensor> {
    let kp = geom.points();
    if sampled.rank() != 4 || sampled.dim(1) % kp != 0 {
        return Err(Error::InvalidShape(sampled.shape().to_vec()));
    }
    let (steps, c, h, w) = (sampled.dim(0), sampled.dim(1) / kp, sampled.dim(2), sampled.dim(3));
    let proto = Tensor::zeros(&[steps, c, h, w]);
    check_deform(&proto, attn, geom.groups * kp, geom)?;
    let cg = c / geom.groups;
    let hw = h * w;
    let mut out = proto;
    for t in 0..steps {
        for ch in 0..c {
            let gi = ch / cg;
            for k in 0..kp {
                let a = &attn.data()[(t * geom.groups * kp + gi * kp + k) * hw..][..hw];
                let s = &sampled.data()[(t * kp * c + k * c + ch) * hw..][..hw];
                let o = &mut out.data_mut()[(t * c + ch) * hw..][..hw];
                for p in 0..hw {
                    o[p] += a[p] * s[p];
                }
            }
        }
    }
    Ok(out)
}

fn group_gate_backward(
    sampled: &Tensor,
    attn: &Tensor,
    geom: &DeformGeometry,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let kp = geom.points();
    let (steps, c, h, w) = (sampled.dim(0), sampled.dim(1) / kp, sampled.dim(2), sampled.dim(3));
    let cg = c / geom.groups;
    let hw = h * w;
    let mut gs = Tensor::zeros(sampled.shape());
    let mut ga = Tensor::zeros(attn.shape());
    for t in 0..steps {
        for ch in 0..c {
            let gi = ch / cg;
            for k in 0..kp {
                let ai = (t * geom.groups * kp + gi * kp + k) * hw;
                let si = (t * kp * c + k * c + ch) * hw;
                let oi = (t * c + ch) * hw;
                for p in 0..hw {
                    let up = g.data()[oi + p];
                    gs.data_mut()[si + p] = up * attn.data()[ai + p];
                    ga.data_mut()[ai + p] += up * sampled.data()[si + p];
                }
            }
        }
    }
    Ok((gs, ga))
}

pub(crate) fn mask_dims(mask: &Tensor, pixel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if mask.rank() != 4 || pixel.rank() != 4 || mask.dim(0) != pixel.dim(0) || mask.dim(1) != pixel.dim(1) {
        return Err(Error::Shape {
            context: "mask embedding vs pixel embedding",
            lhs: mask.shape().to_vec(),
            rhs: pixel.shape().to_vec(),
        });
    }
    Ok((
        mask.dim(0),
        mask.dim(1),
        mask.dim(2) * mask.dim(3),
        pixel.dim(2) * pixel.dim(3),
    ))
}

fn mask_dot_forward(mask: &Tensor, pixel: &Tensor) -> Result<Tensor> {
    let (steps, c, n, p) = mask_dims(mask, pixel)?;
    let mut out = Tensor::zeros(&[steps, n, pixel.dim(2), pixel.dim(3)]);
    for t in 0..steps {
        for q in 0..n {
            let o = &mut out.data_mut()[(t * n + q) * p..][..p];
            for ch in 0..c {
                let m = mask.data()[(t * c + ch) * n + q];
                if m == 0.0 {
                    continue;
                }
                let px = &pixel.data()[(t * c + ch) * p..][..p];
                for (ov, pv) in o.iter_mut().zip(px) {
                    *ov += m * pv;
                }
            }
        }
    }
    Ok(out)
}

fn mask_dot_backward(mask: &Tensor, pixel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (steps, c, n, p) = mask_dims(mask, pixel)?;
    let mut gm = Tensor::zeros(mask.shape());
    let mut gp = Tensor::zeros(pixel.shape());
    for t in 0..steps {
        for q in 0..n {
            let gq = &g.data()[(t * n + q) * p..][..p];
            for ch in 0..c {
                let px = &pixel.data()[(t * c + ch) * p..][..p];
                gm.data_mut()[(t * c + ch) * n + q] = gq.iter().zip(px).map(|(a, b)| a * b).sum();
                let m = mask.data()[(t * c + ch) * n + q];
                let gpx = &mut gp.data_mut()[(t * c + ch) * p..][..p];
                for (gv, gqv) in gpx.iter_mut().zip(gq) {
                    *gv += m * gqv;
                }
            }
        }
    }
    Ok((gm, gp))
}
