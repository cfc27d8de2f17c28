//! Composite spiking blocks written against [`Exec`].
//!
//! Every block takes and returns membrane (pre-neuron) tensors, so callers
//! wire residuals as plain additions of continuous values.

use alloc::format;

use crate::error::{Error, Result};
use crate::exec::{ConvOpts, Exec};
use crate::tensor::ConvSpec;

/// Separable convolution: `SN -> pw -> SN -> dw3x3 -> SN -> pw`, each conv
/// followed by batch norm.
pub fn esc<E: Exec>(e: &mut E, name: &str, x: E::V, channels: usize, out_channels: usize) -> Result<E::V> {
    let hidden = 2 * channels;
    let s = e.spike(&format!("{name}.sn1"), x)?;
    let u = e.conv(&format!("{name}.pw1"), s, ConvSpec::pointwise(channels, hidden), ConvOpts::BN)?;
    let s = e.spike(&format!("{name}.sn2"), u)?;
    let u = e.conv(&format!("{name}.dw"), s, ConvSpec::depthwise(hidden, 3, 1, 1), ConvOpts::BN)?;
    let s = e.spike(&format!("{name}.sn3"), u)?;
    e.conv(&format!("{name}.pw2"), s, ConvSpec::pointwise(hidden, out_channels), ConvOpts::BN)
}

/// Two-layer channel MLP `SN -> Linear+BN -> SN -> Linear+BN`.
pub fn channel_mlp<E: Exec>(e: &mut E, name: &str, x: E::V, channels: usize, ratio: usize) -> Result<E::V> {
    let hidden = channels * ratio;
    let s = e.spike(&format!("{name}.sn1"), x)?;
    let u = e.conv(&format!("{name}.fc1"), s, ConvSpec::pointwise(channels, hidden), ConvOpts::BN)?;
    let s = e.spike(&format!("{name}.sn2"), u)?;
    e.conv(&format!("{name}.fc2"), s, ConvSpec::pointwise(hidden, channels), ConvOpts::BN)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Multiplier of the attention product; `None` means `1/sqrt(C/heads)`.
    pub scale: Option<f64>,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        Self {
            channels,
            heads,
            scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels are not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0) {
                return Err(Error::Config(format!("attention scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn effective_scale(&self) -> f64 {
        self.scale
            .unwrap_or_else(|| 1.0 / libm::sqrt((self.channels / self.heads) as f64))
    }
}

fn spiked_projection<E: Exec>(e: &mut E, name: &str, s: E::V, c: usize) -> Result<E::V> {
    let u = e.conv(name, s, ConvSpec::pointwise(c, c), ConvOpts::BN)?;
    e.spike(&format!("{name}.sn"), u)
}

/// Cross attention of queries `q: [T, C, N, 1]` over a feature map
/// `f: [T, C, H, W]`, returned on the membrane.
pub fn sdca<E: Exec>(e: &mut E, name: &str, q: E::V, f: E::V, cfg: &AttentionConfig) -> Result<E::V> {
    cfg.validate()?;
    let c = cfg.channels;
    let sq = e.spike(&format!("{name}.sn_q"), q)?;
    let sf = e.spike(&format!("{name}.sn_f"), f)?;
    let qs = spiked_projection(e, &format!("{name}.q"), sq, c)?;
    let ks = spiked_projection(e, &format!("{name}.k"), sf, c)?;
    let vs = spiked_projection(e, &format!("{name}.v"), sf, c)?;
    let a = e.attention(&format!("{name}.attn"), qs, ks, vs, cfg.heads, cfg.effective_scale())?;
    e.conv(&format!("{name}.proj"), a, ConvSpec::pointwise(c, c), ConvOpts::BN)
}

/// Self attention among queries, returned on the membrane.
pub fn sdsa<E: Exec>(e: &mut E, name: &str, q: E::V, cfg: &AttentionConfig) -> Result<E::V> {
    cfg.validate()?;
    let c = cfg.channels;
    let sq = e.spike(&format!("{name}.sn_q"), q)?;
    let qs = spiked_projection(e, &format!("{name}.q"), sq, c)?;
    let ks = spiked_projection(e, &format!("{name}.k"), sq, c)?;
    let vs = spiked_projection(e, &format!("{name}.v"), sq, c)?;
    let a = e.attention(&format!("{name}.attn"), qs, ks, vs, cfg.heads, cfg.effective_scale())?;
    e.conv(&format!("{name}.proj"), a, ConvSpec::pointwise(c, c), ConvOpts::BN)
}

/// `x + branch(x)` on membrane potentials.
pub fn shortcut<E: Exec>(e: &mut E, x: E::V, branch: impl FnOnce(&mut E, E::V) -> Result<E::V>) -> Result<E::V> {
    let b = branch(e, x)?;
    e.add(x, b)
}
