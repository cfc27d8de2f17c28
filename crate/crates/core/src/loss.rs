//! Set-prediction loss: bipartite matching of queries to target segments,
//! then classification, mask BCE and dice terms over the matched pairs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::tensor::Tensor;

/// Minimum-cost assignment of every row to a distinct column of a
/// `rows x cols` matrix. Requires `rows <= cols`; returns the column of
/// each row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(Error::Config(alloc::format!(
            "assignment needs rows <= cols, got {rows} x {cols}"
        )));
    }
    if cost.len() != rows * cols {
        return Err(Error::InvalidShape(vec![rows, cols]));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// Relative weight of the "no object" class in the classification term.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

/// Target segments of one image: a label and a `[P]` soft mask each.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<usize>,
    pub pixels: usize,
    /// Row-major `[M, P]`.
    pub masks: Vec<f64>,
}

impl Targets {
    pub fn mask(&self, i: usize) -> &[f64] {
        &self.masks[i * self.pixels..(i + 1) * self.pixels]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// `(query, target)` pairs.
    pub matching: Vec<(usize, usize)>,
    /// d total / d mask logits, `[N, P]`.
    pub grad_masks: Tensor,
    /// d total / d class logits, `[N, K + 1]`.
    pub grad_classes: Tensor,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean BCE-with-logits over pixels.
pub fn bce_with_logits(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&x, &y)| x.max(0.0) - x * y + libm::log1p(libm::exp(-x.abs())))
        .sum::<f64>()
        / n
}

/// `1 - (2 sum(p y) + 1) / (sum p + sum y + 1)` with `p = sigmoid(x)`.
pub fn dice_loss(logits: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&x, &y) in logits.iter().zip(target) {
        let p = sigmoid(x);
        inter += p * y;
        total += p + y;
    }
    1.0 - (2.0 * inter + 1.0) / (total + 1.0)
}

fn check_inputs(mask_logits: &Tensor, class_logits: &Tensor, targets: &Targets) -> Result<(usize, usize, usize)> {
    if mask_logits.rank() != 2 || class_logits.rank() != 2 || mask_logits.dim(0) != class_logits.dim(0) {
        return Err(Error::Shape {
            context: "mask logits [N, P] vs class logits [N, K+1]",
            lhs: mask_logits.shape().to_vec(),
            rhs: class_logits.shape().to_vec(),
        });
    }
    let (n, p, k1) = (mask_logits.dim(0), mask_logits.dim(1), class_logits.dim(1));
    let m = targets.labels.len();
    if targets.pixels != p || targets.masks.len() != m * p {
        return Err(Error::Shape {
            context: "target masks",
            lhs: vec![targets.masks.len() / targets.pixels.max(1), targets.pixels],
            rhs: vec![m, p],
        });
    }
    if let Some(&l) = targets.labels.iter().find(|&&l| l + 1 >= k1) {
        return Err(Error::Config(alloc::format!("target label {l} out of range for {k1} logits")));
    }
    if m > n {
        return Err(Error::Config(alloc::format!("{m} targets exceed {n} queries")));
    }
    Ok((n, p, k1))
}

/// Row-major `[M, N]` matching cost: weighted negative class probability,
/// BCE and dice.
pub fn matching_cost(mask_logits: &Tensor, class_logits: &Tensor, targets: &Targets, w: &LossWeights) -> Result<Vec<f64>> {
    let (n, p, k1) = check_inputs(mask_logits, class_logits, targets)?;
    let m = targets.len();
    let mut cost = vec![0.0; m * n];
    for q in 0..n {
        let probs = softmax(&class_logits.data()[q * k1..(q + 1) * k1]);
        let x = &mask_logits.data()[q * p..(q + 1) * p];
        for (t, &label) in targets.labels.iter().enumerate() {
            let y = targets.mask(t);
            cost[t * n + q] =
                -w.class * probs[label] + w.bce * bce_with_logits(x, y) + w.dice * dice_loss(x, y);
        }
    }
    Ok(cost)
}

/// Loss value and analytic gradients for one image.
pub fn set_prediction_loss(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    targets: &Targets,
    w: &LossWeights,
) -> Result<LossOutput> {
    let (n, p, k1) = check_inputs(mask_logits, class_logits, targets)?;
    let m = targets.len();
    let cost = matching_cost(mask_logits, class_logits, targets, w)?;
    let assign = hungarian(&cost, m, n)?;
    let mut matching: Vec<(usize, usize)> = assign.iter().enumerate().map(|(t, &q)| (q, t)).collect();
    matching.sort_unstable();

    let no_obj = k1 - 1;
    let mut class_target = vec![no_obj; n];
    for &(q, t) in &matching {
        class_target[q] = targets.labels[t];
    }
    let weight = |c: usize| if c == no_obj { w.no_object } else { 1.0 };
    let wsum: f64 = class_target.iter().map(|&c| weight(c)).sum();
    let mut grad_classes = Tensor::zeros(&[n, k1]);
    let mut class_loss = 0.0;
    for q in 0..n {
        let row = &class_logits.data()[q * k1..(q + 1) * k1];
        let probs = softmax(row);
        let c = class_target[q];
        let wq = weight(c) / wsum;
        class_loss += wq * -libm::log(probs[c].max(1e-300));
        for k in 0..k1 {
            let onehot = if k == c { 1.0 } else { 0.0 };
            grad_classes.data_mut()[q * k1 + k] = w.class * wq * (probs[k] - onehot);
        }
    }

    let mut grad_masks = Tensor::zeros(&[n, p]);
    let (mut bce, mut dice) = (0.0, 0.0);
    if m > 0 {
        let mf = m as f64;
        for &(q, t) in &matching {
            let x = &mask_logits.data()[q * p..(q + 1) * p];
            let y = targets.mask(t);
            bce += bce_with_logits(x, y) / mf;
            dice += dice_loss(x, y) / mf;
            let probs: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            let inter: f64 = probs.iter().zip(y).map(|(a, b)| a * b).sum();
            let s = probs.iter().sum::<f64>() + y.iter().sum::<f64>() + 1.0;
            let g = &mut grad_masks.data_mut()[q * p..(q + 1) * p];
            for j in 0..p {
                let pj = probs[j];
                let d_bce = (pj - y[j]) / p as f64;
                let d_dice_dp = -(2.0 * y[j] * s - (2.0 * inter + 1.0)) / (s * s);
                g[j] = (w.bce * d_bce + w.dice * d_dice_dp * pj * (1.0 - pj)) / mf;
            }
        }
    }
    Ok(LossOutput {
        total: w.class * class_loss + w.bce * bce + w.dice * dice,
        class: class_loss,
        bce,
        dice,
        matching,
        grad_masks,
        grad_classes,
    })
}
