//! Supervised training step on top of the tape: forward, set loss with
//! analytic output gradients, reverse pass, optimizer update.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loss::{set_prediction_loss, LossOutput, LossWeights, Targets};
use crate::model::Model;
use crate::optim::AdamW;
use crate::tensor::Tensor;

/// Segments of a dense label map at `factor`-times-coarser resolution. Each
/// class present becomes one segment whose mask is the fraction of its
/// pixels in every `factor x factor` block.
pub fn targets_from_labels(labels: &[usize], h: usize, w: usize, factor: usize, num_classes: usize) -> Result<Targets> {
    if labels.len() != h * w {
        return Err(Error::InvalidShape(vec![h, w]));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(alloc::format!("{h}x{w} labels are not divisible by {factor}")));
    }
    let (mh, mw) = (h / factor, w / factor);
    let mut counts = vec![vec![0.0; mh * mw]; num_classes];
    let cell = (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x];
            if c >= num_classes {
                return Err(Error::Config(alloc::format!("label {c} out of range for {num_classes} classes")));
            }
            counts[c][(y / factor) * mw + x / factor] += 1.0 / cell;
        }
    }
    let mut present = Vec::new();
    let mut data = Vec::new();
    for (c, m) in counts.into_iter().enumerate() {
        if m.iter().any(|&v| v > 0.0) {
            present.push(c);
            data.extend(m);
        }
    }
    Ok(Targets {
        labels: present,
        pixels: mh * mw,
        masks: data,
    })
}

/// Loss on one image and its gradient for every trainable parameter.
pub fn loss_and_grads(
    model: &Model,
    image: &Tensor,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<(LossOutput, BTreeMap<String, Tensor>)> {
    let (mut g, out) = model.train_forward(image, false)?;
    let mask_mean = g.mean_time(out.mask_logits);
    let class_mean = g.mean_time(out.class_logits);
    let ms = g.value(mask_mean).shape().to_vec();
    let (n, p) = (ms[1], ms[2] * ms[3]);
    let k1 = g.value(class_mean).dim(1);
    let masks = g.value(mask_mean).reshape(&[n, p])?;
    let classes = g.value(class_mean).reshape(&[k1, n])?.transpose2d()?;
    let loss = set_prediction_loss(&masks, &classes, targets, weights)?;
    let gm = loss.grad_masks.reshape(&ms)?;
    let gc = loss
        .grad_classes
        .transpose2d()?
        .reshape(g.value(class_mean).shape())?;
    let node = g.custom_scalar(loss.total, vec![mask_mean, class_mean], vec![gm, gc])?;
    let grads = g.backward(node, &model.params)?;
    Ok((loss, grads))
}

/// Mean loss over a batch and the averaged gradients, accumulated in batch
/// order.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[(Tensor, Targets)],
    weights: &LossWeights,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let parts = batch
        .iter()
        .map(|(img, t)| loss_and_grads(model, img, t, weights))
        .collect::<Result<Vec<_>>>()?;
    average(parts.into_iter().map(|(l, g)| (l.total, g)))
}

/// Average per-image `(loss, grads)` in iteration order.
pub fn average(parts: impl IntoIterator<Item = (f64, BTreeMap<String, Tensor>)>) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut total = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut count = 0usize;
    for (l, grads) in parts {
        total += l;
        count += 1;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&g)?,
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let inv = 1.0 / count as f64;
    for g in acc.values_mut() {
        *g = g.scale(inv);
    }
    Ok((total * inv, acc))
}

/// One full-batch optimizer step; returns the loss before the update.
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &[(Tensor, Targets)], weights: &LossWeights) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(model, batch, weights)?;
    if !loss.is_finite() {
        return Err(Error::Config(alloc::format!("non-finite loss {loss}")));
    }
    opt.step(&mut model.params, &grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_fractions() {
        #[rustfmt::skip]
        let labels = [
            0, 0, 1, 1,
            0, 1, 1, 1,
            0, 0, 0, 0,
            0, 0, 0, 2,
        ];
        let t = targets_from_labels(&labels, 4, 4, 2, 3).unwrap();
        assert_eq!(t.labels, [0, 1, 2]);
        assert_eq!(t.masks, [0.75, 0.0, 1.0, 0.75, 0.25, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn average_is_elementwise_mean() {
        let mut a = BTreeMap::new();
        a.insert(String::from("w"), Tensor::full(&[2], 1.0));
        let mut b = BTreeMap::new();
        b.insert(String::from("w"), Tensor::full(&[2], 3.0));
        let (l, g) = average([(1.0, a), (5.0, b)]).unwrap();
        assert_eq!(l, 3.0);
        assert_eq!(g["w"].data(), &[2.0, 2.0]);
    }
}
