//! Pixel confusion counting and the five challenge metrics: Jaccard (JA),
//! Dice (DI), accuracy (AC), sensitivity (SE), specificity (SP).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segnet::SegNet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub jaccard: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

fn as_bit<F: Scalar>(v: F, what: &str) -> Result<bool> {
    if v == F::one() {
        Ok(true)
    } else if v == F::zero() {
        Ok(false)
    } else {
        Err(Error::arg(format!(
            "{what} mask must be exactly 0 or 1, found {v}"
        )))
    }
}

/// Tally pixel agreement between a predicted and a reference binary mask.
pub fn confusion<F: Scalar>(pred: &Tensor<F>, truth: &Tensor<F>) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (as_bit(p, "predicted")?, as_bit(t, "reference")?) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// A degenerate denominator scores 1.0 when the metric's condition is
/// vacuously met (nothing to find, nothing found) and 0.0 otherwise.
fn ratio(num: u64, den: u64, vacuously_perfect: bool) -> f64 {
    if den == 0 {
        if vacuously_perfect {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let (tp, fp, fneg, tn) = (c.true_pos, c.false_pos, c.false_neg, c.true_neg);
    Metrics {
        jaccard: ratio(tp, tp + fp + fneg, true),
        dice: ratio(2 * tp, 2 * tp + fp + fneg, true),
        accuracy: ratio(tp + tn, c.total(), true),
        sensitivity: ratio(tp, tp + fneg, fp == 0),
        specificity: ratio(tn, tn + fp, fneg == 0),
    }
}

/// Arithmetic per-field mean of per-image metrics.
pub fn mean_metrics(items: &[Metrics]) -> Result<Metrics> {
    if items.is_empty() {
        return Err(Error::arg("cannot average an empty metric list"));
    }
    let n = items.len() as f64;
    let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    Ok(Metrics {
        jaccard: sum(|m| m.jaccard),
        dice: sum(|m| m.dice),
        accuracy: sum(|m| m.accuracy),
        sensitivity: sum(|m| m.sensitivity),
        specificity: sum(|m| m.specificity),
    })
}

fn as_batch<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let mut dims = vec![1];
    dims.extend_from_slice(x.dims());
    x.clone().reshape(&dims)
}

fn confusion_per_image<F: Scalar>(
    net: &SegNet<F>,
    data: &[(Tensor<F>, Tensor<F>)],
) -> Result<Vec<ConfusionCounts>> {
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate an empty dataset"));
    }
    data.par_iter()
        .map(|(image, mask)| {
            let pred = net.predict(&as_batch(image)?)?;
            confusion(&pred, &as_batch(mask)?)
        })
        .collect()
}

/// Predict every `([3,H,W] image, [1,H,W] mask)` pair and average the
/// per-image metrics. Images are independent, so prediction fans out over
/// a thread pool; the averaging order is fixed.
pub fn evaluate<F: Scalar>(net: &SegNet<F>, data: &[(Tensor<F>, Tensor<F>)]) -> Result<Metrics> {
    let per: Vec<Metrics> = confusion_per_image(net, data)?
        .iter()
        .map(metrics)
        .collect();
    mean_metrics(&per)
}

/// The pixel-pooled alternative: sum every image's confusion counts first,
/// then compute the metrics once over the pooled tallies.
pub fn evaluate_pooled<F: Scalar>(
    net: &SegNet<F>,
    data: &[(Tensor<F>, Tensor<F>)],
) -> Result<Metrics> {
    let mut pooled = ConfusionCounts::default();
    for c in confusion_per_image(net, data)? {
        pooled.true_pos += c.true_pos;
        pooled.false_pos += c.false_pos;
        pooled.false_neg += c.false_neg;
        pooled.true_neg += c.true_neg;
    }
    Ok(metrics(&pooled))
}
