//! Executor abstraction shared by the training tape and the spike-driven
//! inference engine.
//!
//! Every block in the model is written once against [`Exec`]. The training
//! executor records onto a [`Graph`] with normalized spikes and unfolded
//! batch norm; [`crate::infer::InferExec`] folds batch norm, unrolls spikes
//! and accumulates weights per spike event.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::graph::{BnStats, DeformGeometry, Graph, Var};
use crate::neuron::NeuronConfig;
use crate::params::ParamStore;
use crate::tensor::{ConvSpec, Tensor};

pub const BN_EPSILON: f64 = 1e-5;

/// How a convolution node is parameterized and accounted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts<'a> {
    pub bn: bool,
    pub bias: bool,
    /// Scalar parameter multiplying the output (folded at inference).
    pub gain: Option<&'a str>,
    /// Consumes a continuous operand and is counted as dense MACs.
    pub mac: bool,
    /// Start from zero weights.
    pub zero_init: bool,
}

impl ConvOpts<'_> {
    /// Conv followed by batch norm, no bias: the default weight layer.
    pub const BN: ConvOpts<'static> = ConvOpts {
        bn: true,
        bias: false,
        gain: None,
        mac: false,
        zero_init: false,
    };
}

pub fn weight_name(layer: &str) -> String {
    alloc::format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    alloc::format!("{layer}.bias")
}

/// `(gamma, beta, running mean, running var)` parameter names.
pub fn bn_names(layer: &str) -> [String; 4] {
    [
        alloc::format!("{layer}.bn.gamma"),
        alloc::format!("{layer}.bn.beta"),
        alloc::format!("{layer}.bn.mean"),
        alloc::format!("{layer}.bn.var"),
    ]
}

pub trait Exec {
    type V: Copy;

    /// Neuron configuration used by the layer `name`.
    fn neuron(&self, name: &str) -> NeuronConfig;

    fn timesteps(&self) -> usize;

    fn shape(&self, v: Self::V) -> Vec<usize>;

    /// A `[C, H, W]` image repeated over the time axis.
    fn image(&mut self, image: &Tensor) -> Result<Self::V>;

    /// Learned `[C, N]` content and positional embeddings, summed and laid
    /// out as `[T, C, N, 1]`.
    fn queries(&mut self, content: &str, pos: &str, channels: usize, count: usize) -> Result<Self::V>;

    fn spike(&mut self, name: &str, x: Self::V) -> Result<Self::V>;

    fn conv(&mut self, name: &str, x: Self::V, spec: ConvSpec, opts: ConvOpts) -> Result<Self::V>;

    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;

    fn upsample2(&mut self, x: Self::V) -> Result<Self::V>;

    /// `SN(scale * Q (K^T V))` per head; the neuron is named `name`.
    fn attention(
        &mut self,
        name: &str,
        q: Self::V,
        k: Self::V,
        v: Self::V,
        heads: usize,
        scale: f64,
    ) -> Result<Self::V>;

    fn deform_sample(&mut self, name: &str, values: Self::V, offsets: Self::V, geom: &DeformGeometry)
        -> Result<Self::V>;

    fn group_gate(&mut self, name: &str, sampled: Self::V, attn: Self::V, geom: &DeformGeometry)
        -> Result<Self::V>;

    /// Per-query dot product of mask and pixel embeddings over channels.
    fn mask_dot(&mut self, name: &str, mask: Self::V, pixel: Self::V) -> Result<Self::V>;

    /// `x * gain + bias` with scalar parameters `{name}.gain`, `{name}.bias`.
    fn readout(&mut self, name: &str, x: Self::V) -> Result<Self::V>;
}

/// Batch-norm statistics source on the training tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BnMode {
    /// Normalize with the stored running statistics.
    #[default]
    Frozen,
    /// Normalize with batch statistics (calibration).
    Batch,
}

/// Scalar initial values used when a missing parameter is created.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScheme {
    pub query_range: f64,
    pub readout_gain: f64,
    pub readout_bias: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            query_range: 1.0,
            readout_gain: 1.0,
            readout_bias: -2.0,
        }
    }
}

/// Records the forward pass on a [`Graph`].
pub struct TrainExec<'a> {
    pub graph: Graph,
    params: Cow<'a, ParamStore>,
    cfg: NeuronConfig,
    overrides: BTreeMap<String, NeuronConfig>,
    bn_mode: BnMode,
    init: Option<(&'a mut dyn RngCore, InitScheme)>,
}

impl<'a> TrainExec<'a> {
    pub fn new(params: &'a ParamStore, cfg: NeuronConfig) -> Self {
        Self {
            graph: Graph::new(),
            params: Cow::Borrowed(params),
            cfg,
            overrides: BTreeMap::new(),
            bn_mode: BnMode::Frozen,
            init: None,
        }
    }

    /// An executor that creates every parameter it does not find, drawing
    /// weights from `rng`.
    pub fn initializing(params: ParamStore, cfg: NeuronConfig, rng: &'a mut dyn RngCore, scheme: InitScheme) -> Self {
        Self {
            graph: Graph::new(),
            params: Cow::Owned(params),
            cfg,
            overrides: BTreeMap::new(),
            bn_mode: BnMode::Frozen,
            init: Some((rng, scheme)),
        }
    }

    pub fn relaxed(mut self) -> Self {
        self.graph = Graph::relaxed();
        self
    }

    pub fn with_bn_mode(mut self, mode: BnMode) -> Self {
        self.bn_mode = mode;
        self
    }

    pub fn with_overrides(mut self, overrides: BTreeMap<String, NeuronConfig>) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn into_parts(self) -> (Graph, ParamStore) {
        (self.graph, self.params.into_owned())
    }

    fn ensure(&mut self, name: &str, shape: &[usize], fill: Fill) -> Result<()> {
        if self.params.contains(name) {
            let have = self.params.get(name)?.shape();
            if have != shape {
                return Err(Error::Shape {
                    context: "stored parameter shape",
                    lhs: have.to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            return Ok(());
        }
        let Some((rng, _)) = self.init.as_mut() else {
            return Err(Error::MissingParam(name.into()));
        };
        let t = match fill {
            Fill::Const(v) => Tensor::full(shape, v),
            Fill::Uniform(a) => Tensor::from_fn(shape, |_| rng.gen_range(-a..=a)),
        };
        self.params.to_mut().insert(name, t);
        Ok(())
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        self.graph.param(name, &self.params)
    }

    fn scheme(&self) -> InitScheme {
        self.init.as_ref().map(|(_, s)| *s).unwrap_or_default()
    }
}

#[derive(Clone, Copy)]
enum Fill {
    Const(f64),
    Uniform(f64),
}

impl Exec for TrainExec<'_> {
    type V = Var;

    fn neuron(&self, name: &str) -> NeuronConfig {
        self.overrides.get(name).copied().unwrap_or(self.cfg)
    }

    fn timesteps(&self) -> usize {
        self.cfg.timesteps
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.graph.value(v).shape().to_vec()
    }

    fn image(&mut self, image: &Tensor) -> Result<Var> {
        let mut shape = alloc::vec![1];
        shape.extend_from_slice(image.shape());
        let x = self.graph.input(image.reshape(&shape)?);
        self.graph.tile_time(x, self.cfg.timesteps)
    }

    fn queries(&mut self, content: &str, pos: &str, channels: usize, count: usize) -> Result<Var> {
        let shape = [1, channels, count, 1];
        let range = self.scheme().query_range;
        self.ensure(content, &shape, Fill::Uniform(range))?;
        self.ensure(pos, &shape, Fill::Uniform(range))?;
        let c = self.param(content)?;
        let p = self.param(pos)?;
        let q = self.graph.add(c, p)?;
        self.graph.tile_time(q, self.cfg.timesteps)
    }

    fn spike(&mut self, name: &str, x: Var) -> Result<Var> {
        let cfg = self.neuron(name);
        self.graph.spike(name, x, &cfg)
    }

    fn conv(&mut self, name: &str, x: Var, spec: ConvSpec, opts: ConvOpts) -> Result<Var> {
        spec.validate()?;
        let wname = weight_name(name);
        let fan_in = (spec.in_per_group() * spec.kernel.0 * spec.kernel.1) as f64;
        let bound = libm::sqrt(3.0 / fan_in);
        let fill = if opts.zero_init { Fill::Const(0.0) } else { Fill::Uniform(bound) };
        self.ensure(&wname, &spec.weight_shape(), fill)?;
        let w = self.param(&wname)?;
        let b = if opts.bias {
            let bname = bias_name(name);
            self.ensure(&bname, &[spec.out_channels], Fill::Const(0.0))?;
            Some(self.param(&bname)?)
        } else {
            None
        };
        let mut y = self.graph.conv2d(x, w, b, spec)?;
        if opts.bn {
            let c = spec.out_channels;
            let [g, bt, m, v] = bn_names(name);
            self.ensure(&g, &[c], Fill::Const(1.0))?;
            self.ensure(&bt, &[c], Fill::Const(0.0))?;
            if !self.params.contains(&m) {
                if self.init.is_none() {
                    return Err(Error::MissingParam(m));
                }
                let store = self.params.to_mut();
                store.insert_buffer(m.clone(), Tensor::zeros(&[c]));
                store.insert_buffer(v.clone(), Tensor::ones(&[c]));
            }
            let stats = BnStats {
                mean: self.params.get(&m)?.data().to_vec(),
                var: self.params.get(&v)?.data().to_vec(),
                epsilon: BN_EPSILON,
            };
            let gv = self.param(&g)?;
            let bv = self.param(&bt)?;
            y = self
                .graph
                .batchnorm(name, y, gv, bv, &stats, self.bn_mode == BnMode::Batch)?;
        }
        if let Some(gain) = opts.gain {
            self.ensure(gain, &[1], Fill::Const(1.0))?;
            let s = self.param(gain)?;
            y = self.graph.scale_by(y, s)?;
        }
        Ok(y)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.graph.add(a, b)
    }

    fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.graph.upsample2(x)
    }

    fn attention(&mut self, name: &str, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let prod = self.graph.linear_attention(q, k, v, heads)?;
        let scaled = self.graph.scale(prod, scale);
        self.spike(name, scaled)
    }

    fn deform_sample(&mut self, _name: &str, values: Var, offsets: Var, geom: &DeformGeometry) -> Result<Var> {
        self.graph.deform_sample(values, offsets, geom)
    }

    fn group_gate(&mut self, _name: &str, sampled: Var, attn: Var, geom: &DeformGeometry) -> Result<Var> {
        self.graph.group_gate(sampled, attn, geom)
    }

    fn mask_dot(&mut self, _name: &str, mask: Var, pixel: Var) -> Result<Var> {
        self.graph.mask_dot(mask, pixel)
    }

    fn readout(&mut self, name: &str, x: Var) -> Result<Var> {
        let (gname, bname) = (alloc::format!("{name}.gain"), alloc::format!("{name}.bias"));
        let scheme = self.scheme();
        self.ensure(&gname, &[1], Fill::Const(scheme.readout_gain))?;
        self.ensure(&bname, &[1], Fill::Const(scheme.readout_bias))?;
        let g = self.param(&gname)?;
        let b = self.param(&bname)?;
        let y = self.graph.scale_by(x, g)?;
        self.graph.shift_by(y, b)
    }
}
