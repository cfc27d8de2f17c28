//! Spike-driven deformable attention and the encoder stack built on it.
//!
//! Attention weights pass through a neuron and are spike valued; sampling
//! offsets and sampled values stay continuous. Sample coordinates are in
//! the sampler's integer-grid convention, where `(i, j)` reads pixel
//! `(i, j)` exactly; a pixel-centre reference `(i + 0.5, j + 0.5)` maps to
//! that grid by subtracting one half.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::{ConvOpts, Exec};
use crate::graph::DeformGeometry;
use crate::layers::{channel_mlp, esc, shortcut};
use crate::tensor::{ConvSpec, Tensor};

/// Fixed kernel offsets `p_k` as `(dy, dx)`: the centre when `K` is odd,
/// then opposing pairs `(0, r), (r, 0), (r, r), (r, -r)` for growing `r`.
/// The layout always sums to zero.
pub fn stencil(k: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(k);
    if k % 2 == 1 {
        pts.push((0.0, 0.0));
    }
    let mut r = 1.0;
    'outer: loop {
        for (dy, dx) in [(0.0, r), (r, 0.0), (r, r), (r, -r)] {
            if pts.len() + 2 > k {
                break 'outer;
            }
            pts.push((dy, dx));
            pts.push((-dy, -dx));
        }
        r += 1.0;
    }
    pts
}

/// `[H*W, K, 2]` absolute sample locations `p_0 + p_k` in pixel
/// coordinates, with `p_0 = (i + 0.5, j + 0.5)`.
pub fn reference_points(h: usize, w: usize, k: usize) -> Tensor {
    let st = stencil(k);
    let mut data = Vec::with_capacity(h * w * k * 2);
    for i in 0..h {
        for j in 0..w {
            for &(dy, dx) in &st {
                data.push(i as f64 + 0.5 + dy);
                data.push(j as f64 + 0.5 + dx);
            }
        }
    }
    Tensor::new(&[h * w, k, 2], data).expect("reference grid shape")
}

/// Convert pixel-centre coordinates to the bilinear sampler's grid.
pub fn pixel_to_grid(coord: f64) -> f64 {
    coord - 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SddaConfig {
    pub channels: usize,
    pub groups: usize,
    pub points: usize,
    /// Spike the sampled values instead of the attention weights.
    pub spike_query: bool,
}

impl SddaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::Config("deformable attention needs K >= 1".into()));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "{} groups do not divide {} channels",
                self.groups, self.channels
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> DeformGeometry {
        DeformGeometry {
            groups: self.groups,
            stencil: stencil(self.points),
        }
    }
}

/// Deformable attention on a `[T, C, H, W]` membrane, returned on the
/// membrane.
pub fn sdda<E: Exec>(e: &mut E, name: &str, x: E::V, cfg: &SddaConfig) -> Result<E::V> {
    cfg.validate()?;
    let shape = e.shape(x);
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::Shape {
            context: "deformable attention input",
            lhs: shape,
            rhs: alloc::vec![cfg.channels],
        });
    }
    if shape[2] * shape[3] < cfg.points {
        return Err(Error::Config(format!(
            "{}x{} map has fewer positions than K = {}",
            shape[2], shape[3], cfg.points
        )));
    }
    let c = cfg.channels;
    let gk = cfg.groups * cfg.points;
    let geom = cfg.geometry();
    let sx = e.spike(&format!("{name}.sn_x"), x)?;
    let xp = e.conv(&format!("{name}.dw"), sx, ConvSpec::depthwise(c, 3, 1, 1), ConvOpts::BN)?;
    let sxp = e.spike(&format!("{name}.sn_xp"), xp)?;
    let attn_u = e.conv(&format!("{name}.attn"), sxp, ConvSpec::pointwise(c, gk), ConvOpts::BN)?;
    let offsets = e.conv(
        &format!("{name}.offset"),
        sxp,
        ConvSpec::pointwise(c, 2 * gk),
        ConvOpts {
            zero_init: true,
            ..ConvOpts::BN
        },
    )?;
    let values = e.conv(&format!("{name}.value"), sx, ConvSpec::pointwise(c, c), ConvOpts::BN)?;
    let sampled = e.deform_sample(&format!("{name}.sample"), values, offsets, &geom)?;
    let gathered = if cfg.spike_query {
        let ss = e.spike(&format!("{name}.sn_sample"), sampled)?;
        e.group_gate(&format!("{name}.gate"), ss, attn_u, &geom)?
    } else {
        let a = e.spike(&format!("{name}.sn_attn"), attn_u)?;
        e.group_gate(&format!("{name}.gate"), sampled, a, &geom)?
    };
    esc(e, &format!("{name}.proj"), gathered, c, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SdteConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub sdda: SddaConfig,
}

/// Encoder stack on the deepest single-scale feature: an input projection,
/// `blocks` x (ESC, SDDA, MLP) with membrane shortcuts, and a final ESC.
pub fn sdte<E: Exec>(e: &mut E, name: &str, x: E::V, cfg: &SdteConfig) -> Result<E::V> {
    let c = cfg.channels;
    let s = e.spike(&format!("{name}.in.sn"), x)?;
    let mut h = e.conv(&format!("{name}.in"), s, ConvSpec::pointwise(cfg.in_channels, c), ConvOpts::BN)?;
    for b in 0..cfg.blocks {
        let p = format!("{name}.block{b}");
        h = shortcut(e, h, |e, v| esc(e, &format!("{p}.esc"), v, c, c))?;
        h = shortcut(e, h, |e, v| sdda(e, &format!("{p}.sdda"), v, &cfg.sdda))?;
        h = shortcut(e, h, |e, v| channel_mlp(e, &format!("{p}.mlp"), v, c, cfg.mlp_ratio))?;
    }
    esc(e, &format!("{name}.out"), h, c, c)
}
