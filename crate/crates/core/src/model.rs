//! Toy segmentation model: spiking conv backbone, pixel decoder (encoder
//! stack plus top-down pyramid), query decoder and mask head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{sdte, SddaConfig, SdteConfig};
use crate::error::{Error, Result};
use crate::exec::{bn_names, BnMode, ConvOpts, Exec, InitScheme, TrainExec};
use crate::graph::{sigmoid, Graph, Var};
use crate::infer::InferExec;
use crate::layers::{channel_mlp, sdca, sdsa, shortcut, AttentionConfig};
use crate::neuron::NeuronConfig;
use crate::params::ParamStore;
use crate::tensor::{ConvSpec, Tensor};

/// Switches for the architecture ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Parallel convolutional branch in the mask embedding.
    pub me_shortcut: bool,
    /// Spike sampled values rather than attention weights.
    pub spike_query: bool,
    /// Run the encoder stack on the deepest level.
    pub encoder: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            me_shortcut: true,
            spike_query: false,
            encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Widths at strides 4, 8, 16, 32.
    pub stage_channels: [usize; 4],
    pub embed: usize,
    pub queries: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub encoder_blocks: usize,
    pub groups: usize,
    pub points: usize,
    pub mlp_ratio: usize,
    /// Semantic classes including background.
    pub num_classes: usize,
    pub attn_scale: Option<f64>,
    pub neuron: NeuronConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            stem_channels: 8,
            stage_channels: [16, 16, 32, 32],
            embed: 32,
            queries: 8,
            heads: 2,
            decoder_layers: 2,
            encoder_blocks: 2,
            groups: 1,
            points: 4,
            mlp_ratio: 2,
            num_classes: 3,
            attn_scale: None,
            neuron: NeuronConfig::default(),
            ablation: Ablation::default(),
        }
    }

    /// A wider variant of the toy model.
    pub fn small() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [32, 32, 64, 64],
            embed: 64,
            queries: 16,
            heads: 4,
            decoder_layers: 3,
            groups: 2,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.queries == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("queries and decoder_layers must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        self.attention().validate()?;
        self.sdda().validate()?;
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            channels: self.embed,
            heads: self.heads,
            scale: self.attn_scale,
        }
    }

    pub fn sdda(&self) -> SddaConfig {
        SddaConfig {
            channels: self.embed,
            groups: self.groups,
            points: self.points,
            spike_query: self.ablation.spike_query,
        }
    }

    /// Spatial side of the pixel embedding (stride 4).
    pub fn mask_size(&self) -> usize {
        self.image_size / 4
    }

    /// Name of the neuron whose output is the mask embedding.
    pub const FINAL_NEURON: &'static str = "head.sn_mask";
}

/// Handles to the two model outputs: mask logits `[T, N, h, w]` and class
/// logits `[T, K + 1, N, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outputs<V> {
    pub mask_logits: V,
    pub class_logits: V,
}

/// Backbone pyramid at strides 4, 8, 16, 32.
pub fn backbone<E: Exec>(e: &mut E, cfg: &ModelConfig, image: &Tensor) -> Result<[E::V; 4]> {
    let s = cfg.image_size;
    if image.shape() != [cfg.in_channels, s, s] {
        return Err(Error::Shape {
            context: "input image",
            lhs: image.shape().to_vec(),
            rhs: vec![cfg.in_channels, s, s],
        });
    }
    let x = e.image(image)?;
    let stem = e.conv(
        "stem",
        x,
        ConvSpec::standard(cfg.in_channels, cfg.stem_channels, 3, 2, 1),
        ConvOpts { mac: true, ..ConvOpts::BN },
    )?;
    let mut h = stem;
    let mut cin = cfg.stem_channels;
    let mut levels = Vec::with_capacity(4);
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let s = e.spike(&format!("stage{i}.down.sn"), h)?;
        h = e.conv(&format!("stage{i}.down"), s, ConvSpec::standard(cin, c, 3, 2, 1), ConvOpts::BN)?;
        h = shortcut(e, h, |e, v| {
            let s = e.spike(&format!("stage{i}.res.sn"), v)?;
            e.conv(&format!("stage{i}.res"), s, ConvSpec::standard(c, c, 3, 1, 1), ConvOpts::BN)
        })?;
        levels.push(h);
        cin = c;
    }
    Ok([levels[0], levels[1], levels[2], levels[3]])
}

fn lateral<E: Exec>(e: &mut E, name: &str, x: E::V, cin: usize, cout: usize) -> Result<E::V> {
    let s = e.spike(&format!("{name}.sn"), x)?;
    e.conv(name, s, ConvSpec::pointwise(cin, cout), ConvOpts::BN)
}

/// Pixel decoder. Returns the spiking pixel embedding at stride 4 and the
/// membrane levels at strides 32, 16, 8 used by cross attention.
pub fn pixel_decoder<E: Exec>(e: &mut E, cfg: &ModelConfig, pyramid: [E::V; 4]) -> Result<(E::V, [E::V; 3])> {
    let c = cfg.embed;
    let [f0, f1, f2, f3] = pyramid;
    let [c0, c1, c2, c3] = cfg.stage_channels;
    let enc = if cfg.ablation.encoder {
        let sc = SdteConfig {
            in_channels: c2,
            channels: c,
            blocks: cfg.encoder_blocks,
            mlp_ratio: cfg.mlp_ratio,
            sdda: cfg.sdda(),
        };
        sdte(e, "encoder", f2, &sc)?
    } else {
        lateral(e, "fpn.lat2", f2, c2, c)?
    };
    let p3 = lateral(e, "fpn.lat3", f3, c3, c)?;
    let up = e.upsample2(p3)?;
    let p2 = e.add(enc, up)?;
    let l1 = lateral(e, "fpn.lat1", f1, c1, c)?;
    let up = e.upsample2(p2)?;
    let p1 = e.add(l1, up)?;
    let l0 = lateral(e, "fpn.lat0", f0, c0, c)?;
    let up = e.upsample2(p1)?;
    let p0 = e.add(l0, up)?;
    let pix = lateral(e, "fpn.pixel", p0, c, c)?;
    let zeta = e.spike("pixel.sn", pix)?;
    Ok((zeta, [p3, p2, p1]))
}

/// Query decoder: per layer, cross attention to one level (round robin),
/// self attention and a channel MLP, each with a membrane shortcut.
pub fn transformer_decoder<E: Exec>(e: &mut E, cfg: &ModelConfig, levels: &[E::V]) -> Result<E::V> {
    if levels.is_empty() {
        return Err(Error::Config("decoder needs at least one feature level".into()));
    }
    let att = cfg.attention();
    let mut q = e.queries("query.content", "query.pos", cfg.embed, cfg.queries)?;
    for l in 0..cfg.decoder_layers {
        let f = levels[l % levels.len()];
        q = shortcut(e, q, |e, v| sdca(e, &format!("decoder{l}.cross"), v, f, &att))?;
        q = shortcut(e, q, |e, v| sdsa(e, &format!("decoder{l}.self"), v, &att))?;
        q = shortcut(e, q, |e, v| channel_mlp(e, &format!("decoder{l}.mlp"), v, cfg.embed, cfg.mlp_ratio))?;
    }
    Ok(q)
}

/// Mask embedding with the optional membrane shortcut branch, the mask dot
/// product and the class head on the query membrane.
pub fn mask_head<E: Exec>(e: &mut E, cfg: &ModelConfig, q: E::V, zeta_pixel: E::V) -> Result<Outputs<E::V>> {
    let c = cfg.embed;
    let sq = e.spike("head.sn_q", q)?;
    let u = e.conv("head.mlp1", sq, ConvSpec::pointwise(c, c), ConvOpts::BN)?;
    let s = e.spike("head.mlp.sn", u)?;
    let mut emb = e.conv("head.mlp2", s, ConvSpec::pointwise(c, c), ConvOpts::BN)?;
    if cfg.ablation.me_shortcut {
        let sc = e.conv(
            "head.shortcut",
            sq,
            ConvSpec::pointwise(c, c),
            ConvOpts {
                gain: Some("head.w_s"),
                ..ConvOpts::BN
            },
        )?;
        emb = e.add(emb, sc)?;
    }
    let zeta_mask = e.spike(ModelConfig::FINAL_NEURON, emb)?;
    let dot = e.mask_dot("head.mask_dot", zeta_mask, zeta_pixel)?;
    let mask_logits = e.readout("head.readout", dot)?;
    let class_logits = e.conv(
        "head.class",
        q,
        ConvSpec::pointwise(c, cfg.num_classes + 1),
        ConvOpts {
            bn: false,
            bias: true,
            mac: true,
            ..ConvOpts::BN
        },
    )?;
    Ok(Outputs {
        mask_logits,
        class_logits,
    })
}

pub fn forward<E: Exec>(e: &mut E, cfg: &ModelConfig, image: &Tensor) -> Result<Outputs<E::V>> {
    let pyramid = backbone(e, cfg, image)?;
    let (zeta, levels) = pixel_decoder(e, cfg, pyramid)?;
    let q = transformer_decoder(e, cfg, &levels)?;
    mask_head(e, cfg, q, zeta)
}

/// Time-averaged model outputs in consumer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[N, h, w]` mask logits.
    pub mask_logits: Tensor,
    /// `[N, K + 1]` class logits; the last column is "no object".
    pub class_logits: Tensor,
}

impl Prediction {
    /// Per-query mask probabilities in `[0, 1]`.
    pub fn masks(&self) -> Tensor {
        self.mask_logits.map(sigmoid)
    }

    fn from_raw(mask: &Tensor, class: &Tensor) -> Result<Self> {
        let steps = mask.dim(0);
        let (n, h, w) = (mask.dim(1), mask.dim(2), mask.dim(3));
        let k1 = class.dim(1);
        let mut m = Tensor::zeros(&[n, h, w]);
        for t in 0..steps {
            for i in 0..n * h * w {
                m.data_mut()[i] += mask.data()[t * n * h * w + i] / steps as f64;
            }
        }
        let mut c = Tensor::zeros(&[n, k1]);
        for t in 0..steps {
            for k in 0..k1 {
                for q in 0..n {
                    c.data_mut()[q * k1 + k] += class.data()[(t * k1 + k) * n + q] / steps as f64;
                }
            }
        }
        Ok(Self {
            mask_logits: m,
            class_logits: c,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Random weights with identity batch-norm statistics.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::zeros(&[config.in_channels, config.image_size, config.image_size]);
        let mut e = TrainExec::initializing(ParamStore::new(), config.neuron, &mut rng, InitScheme::default());
        forward(&mut e, &config, &image)?;
        let (_, params) = e.into_parts();
        Ok(Self { config, params })
    }

    /// Random weights, batch-norm statistics calibrated on one random image.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let s = m.config.image_size;
        let image = Tensor::from_fn(&[m.config.in_channels, s, s], |_| rng.gen_range(0.0..1.0));
        m.calibrate(&[image])?;
        Ok(m)
    }

    /// Set every running mean and variance to the batch statistics of the
    /// given images, pooled over images. Channels with (near) zero variance
    /// keep unit variance so the frozen map stays well conditioned.
    pub fn calibrate(&mut self, images: &[Tensor]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Config("calibration needs at least one image".into()));
        }
        let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for img in images {
            let mut e = TrainExec::new(&self.params, self.config.neuron).with_bn_mode(BnMode::Batch);
            forward(&mut e, &self.config, img)?;
            for (name, mean, var) in e.graph.batch_statistics() {
                let entry = acc
                    .entry(name.clone())
                    .or_insert_with(|| (vec![0.0; mean.len()], vec![0.0; mean.len()]));
                for ch in 0..mean.len() {
                    entry.0[ch] += mean[ch];
                    entry.1[ch] += var[ch] + mean[ch] * mean[ch];
                }
            }
        }
        let n = images.len() as f64;
        for (name, (sum_m, sum_sq)) in acc {
            let mean: Vec<f64> = sum_m.iter().map(|v| v / n).collect();
            let var: Vec<f64> = sum_sq
                .iter()
                .zip(&mean)
                .map(|(s, m)| {
                    let v = (s / n - m * m).max(0.0);
                    if v < 1e-8 {
                        1.0
                    } else {
                        v
                    }
                })
                .collect();
            let [_, _, mn, vn] = bn_names(&name);
            let c = mean.len();
            self.params.set(&mn, Tensor::new(&[c], mean)?)?;
            self.params.set(&vn, Tensor::new(&[c], var)?)?;
        }
        Ok(())
    }

    /// Training-mode forward on a fresh tape.
    pub fn train_forward(&self, image: &Tensor, relaxed: bool) -> Result<(Graph, Outputs<Var>)> {
        let mut e = TrainExec::new(&self.params, self.config.neuron);
        if relaxed {
            e = e.relaxed();
        }
        let out = forward(&mut e, &self.config, image)?;
        let (g, _) = e.into_parts();
        Ok((g, out))
    }

    /// Spike-driven forward. `overrides` replaces the neuron configuration
    /// of individual named neurons.
    pub fn infer_forward(
        &self,
        image: &Tensor,
        trace: bool,
        overrides: BTreeMap<String, NeuronConfig>,
    ) -> Result<(InferExec<'_>, Outputs<usize>)> {
        let mut e = InferExec::new(&self.params, self.config.neuron).with_overrides(overrides);
        if trace {
            e = e.with_trace();
        }
        let out = forward(&mut e, &self.config, image)?;
        Ok((e, out))
    }

    pub fn predict_train(&self, image: &Tensor) -> Result<Prediction> {
        let (g, out) = self.train_forward(image, false)?;
        Prediction::from_raw(g.value(out.mask_logits), g.value(out.class_logits))
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let (e, out) = self.infer_forward(image, false, BTreeMap::new())?;
        Prediction::from_raw(
            &e.value(out.mask_logits).to_tensor(),
            &e.value(out.class_logits).to_tensor(),
        )
    }
}

/// Time-averaged prediction from infer-mode outputs.
pub fn prediction_from(e: &InferExec<'_>, out: Outputs<usize>) -> Result<Prediction> {
    Prediction::from_raw(
        &e.value(out.mask_logits).to_tensor(),
        &e.value(out.class_logits).to_tensor(),
    )
}

/// Time-averaged prediction from a training tape.
pub fn prediction_from_graph(g: &Graph, out: Outputs<Var>) -> Result<Prediction> {
    Prediction::from_raw(g.value(out.mask_logits), g.value(out.class_logits))
}
