//! Distribution-level segmentation metrics over sets of binary masks.

use serde::{Deserialize, Serialize};

use crate::assignment::{self, CostMatrix};
use crate::error::{Error, Result};

/// Threshold applied to decoder probabilities before scoring.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dimensions must be at least 1"));
        }
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// `p > threshold` per pixel.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        Self::new(
            height,
            width,
            probs.iter().map(|p| *p > BINARIZE_THRESHOLD).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op: "iou",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, q) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(*p && *q);
        union += usize::from(*p || *q);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn distance(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(1.0 - iou(a, b)?)
}

/// Empirical Wasserstein distance with the `1 - IoU` kernel.
///
/// Annotations are replicated to the prediction count, which must be a
/// positive multiple of the annotation count; the mean matched cost of the
/// optimal assignment is returned.
pub fn ewd(predictions: &[BinaryMask], annotations: &[BinaryMask]) -> Result<f64> {
    let (n, m) = (predictions.len(), annotations.len());
    if n == 0 || m == 0 || n % m != 0 {
        return Err(Error::invalid(format!(
            "prediction count {n} must be a positive multiple of annotation count {m}"
        )));
    }
    let mut entries = Vec::with_capacity(n * n);
    for p in predictions {
        for j in 0..n {
            entries.push(distance(p, &annotations[j % m])?);
        }
    }
    let solution = assignment::solve(&CostMatrix::new(n, entries)?);
    Ok(solution.total_cost / n as f64)
}

fn mean_pairwise(xs: &[BinaryMask], ys: &[BinaryMask], skip_diagonal: bool) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            total += distance(x, y)?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Generalized energy distance with `d = 1 - IoU`.
///
/// `GED² = 2 E[d(S, Y)] - E[d(S, S')] - E[d(Y, Y')]`, where the within-set
/// expectations run over distinct indices only. Returns `sqrt(max(GED², 0))`.
pub fn ged(predictions: &[BinaryMask], annotations: &[BinaryMask]) -> Result<f64> {
    if predictions.is_empty() || annotations.is_empty() {
        return Err(Error::invalid("ged needs non-empty prediction and annotation sets"));
    }
    let cross = mean_pairwise(predictions, annotations, false)?;
    let within_pred = mean_pairwise(predictions, predictions, true)?;
    let within_ann = mean_pairwise(annotations, annotations, true)?;
    Ok((2.0 * cross - within_pred - within_ann).max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ewd: f64,
    pub ged: f64,
    pub n_predictions: usize,
    pub n_annotations: usize,
}

pub fn evaluate(predictions: &[BinaryMask], annotations: &[BinaryMask]) -> Result<EvalReport> {
    Ok(EvalReport {
        ewd: ewd(predictions, annotations)?,
        ged: ged(predictions, annotations)?,
        n_predictions: predictions.len(),
        n_annotations: annotations.len(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
