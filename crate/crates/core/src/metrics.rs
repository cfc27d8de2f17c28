//! Semantic assembly of mask-classification outputs and IoU accounting.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::model::Prediction;

/// Per-pixel class map at `factor` times the mask resolution. Each class
/// scores `sum_q p_q(class) * sigmoid(mask_q)`; the "no object" column is
/// ignored. Upsampling is nearest neighbour.
pub fn semantic_map(pred: &Prediction, num_classes: usize, factor: usize) -> Result<Vec<usize>> {
    let (n, h, w) = (
        pred.mask_logits.dim(0),
        pred.mask_logits.dim(1),
        pred.mask_logits.dim(2),
    );
    let k1 = pred.class_logits.dim(1);
    if k1 != num_classes + 1 || pred.class_logits.dim(0) != n {
        return Err(Error::Shape {
            context: "class logits vs classes",
            lhs: pred.class_logits.shape().to_vec(),
            rhs: vec![n, num_classes + 1],
        });
    }
    if factor == 0 {
        return Err(Error::Config("upsampling factor must be >= 1".into()));
    }
    let mut probs = vec![0.0; n * k1];
    for q in 0..n {
        let row = &pred.class_logits.data()[q * k1..(q + 1) * k1];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
        for k in 0..k1 {
            probs[q * k1 + k] = libm::exp(row[k] - m) / s;
        }
    }
    let mut low = vec![0usize; h * w];
    for (pix, out) in low.iter_mut().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..num_classes {
            let score: f64 = (0..n)
                .map(|q| probs[q * k1 + c] * sigmoid(pred.mask_logits.data()[q * h * w + pix]))
                .sum();
            if score > best.0 {
                best = (score, c);
            }
        }
        *out = best.1;
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut full = vec![0usize; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            full[y * ow + x] = low[(y / factor) * w + x / factor];
        }
    }
    Ok(full)
}

/// Dataset-level intersection and union counts per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
    images: usize,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            images: 0,
        }
    }

    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape {
                context: "prediction vs ground truth",
                lhs: vec![pred.len()],
                rhs: vec![truth.len()],
            });
        }
        let k = self.intersection.len();
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::Config(alloc::format!("label {} out of range for {k} classes", p.max(t))));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        self.images += 1;
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean over classes that appear.
    pub fn mean(&self) -> Result<f64> {
        if self.images == 0 {
            return Err(Error::Config("mIoU of an empty dataset".into()));
        }
        let seen: Vec<f64> = self.per_class().into_iter().flatten().collect();
        Ok(seen.iter().sum::<f64>() / seen.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hand_computed_four_by_four() {
        #[rustfmt::skip]
        let truth = [
            0, 0, 1, 1,
            0, 0, 1, 1,
            0, 2, 2, 0,
            0, 2, 2, 0,
        ];
        #[rustfmt::skip]
        let pred = [
            0, 1, 1, 1,
            0, 0, 1, 0,
            0, 0, 2, 0,
            0, 2, 2, 2,
        ];
        let mut acc = IouAccumulator::new(3);
        acc.update(&pred, &truth).unwrap();
        let per = acc.per_class();
        // class 0: truth 8, pred 8, both 6; class 1: truth 4, pred 4, both 3;
        // class 2: truth 4, pred 4, both 3.
        assert_eq!(per[0], Some(6.0 / 10.0));
        assert_eq!(per[1], Some(3.0 / 5.0));
        assert_eq!(per[2], Some(3.0 / 5.0));
        assert!((acc.mean().unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_background_only() {
        let truth = [0, 1, 2, 2];
        let mut acc = IouAccumulator::new(3);
        acc.update(&truth, &truth).unwrap();
        assert_eq!(acc.mean().unwrap(), 1.0);
        let mut acc = IouAccumulator::new(3);
        acc.update(&[0; 4], &truth).unwrap();
        assert_eq!(acc.per_class()[1], Some(0.0));
        assert_eq!(acc.per_class()[2], Some(0.0));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(IouAccumulator::new(2).mean().is_err());
    }

    #[test]
    fn assembly_follows_confident_query() {
        // query 0 claims class 1 on the left column, query 1 claims class 0
        // everywhere at low confidence.
        let mask = Tensor::new(&[2, 1, 2], alloc::vec![5.0, -5.0, 0.0, 0.0]).unwrap();
        let class = Tensor::new(&[2, 3], alloc::vec![-5.0, 5.0, -5.0, 5.0, -5.0, -5.0]).unwrap();
        let p = Prediction {
            mask_logits: mask,
            class_logits: class,
        };
        let map = semantic_map(&p, 2, 2).unwrap();
        assert_eq!(map, [1, 1, 0, 0, 1, 1, 0, 0]);
    }
}
