//! Activation precision, accuracy, confusion counts, and the metrics CSV.

use std::fmt::Write as _;

use crate::data::{stack, LabeledImage, Mask};
use crate::error::{Result, XblError};
use crate::model::Classifier;
use crate::saliency::{gradcam_batch, Heatmap};

/// Default τ: the top 5% of heatmap values count as the explanation.
pub const DEFAULT_TAU: f64 = 5.0;

/// Instances per forward pass in the dataset-level helpers.
pub const EVAL_CHUNK: usize = 64;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 100.0 {
        Ok(())
    } else {
        Err(XblError::range("tau", tau, "(0, 100)"))
    }
}

/// The `q`-th percentile (0..=100) of `values` with linear interpolation
/// between closest ranks.
pub fn percentile(values: &[f32], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Ones where the value is at or above the `(100 − τ)` percentile.
pub fn threshold_top_tau(h: &Heatmap, tau: f64) -> Result<Mask> {
    check_tau(tau)?;
    let cut = percentile(h.values.data(), 100.0 - tau);
    let (rows, cols) = h.values.dims();
    let bits = h
        .values
        .data()
        .iter()
        .map(|&v| u8::from((v as f64) >= cut))
        .collect();
    Mask::new(rows, cols, bits)
}

/// Fraction of surviving top-τ pixels that fall inside `mask`.
pub fn activation_precision(h: &Heatmap, mask: &Mask, tau: f64) -> Result<f64> {
    if h.values.dims() != mask.dims() {
        return Err(XblError::dim(
            "activation_precision",
            format!("heatmap {:?} vs mask {:?}", h.values.dims(), mask.dims()),
        ));
    }
    let t = threshold_top_tau(h, tau)?;
    let survivors = t.count_ones();
    let hits = t
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(&a, &b)| a != 0 && b != 0)
        .count();
    Ok(hits as f64 / survivors as f64)
}

/// GradCAM at the predicted class for every image, computed in chunks.
pub fn heatmaps(model: &Classifier, data: &[LabeledImage]) -> Result<Vec<Heatmap>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        out.extend(gradcam_batch(model, &refs, None)?);
    }
    Ok(out)
}

/// Mean activation precision over the dataset.
pub fn dataset_ap(model: &Classifier, data: &[LabeledImage], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if data.is_empty() {
        return Err(XblError::Contract("activation precision of an empty dataset".into()));
    }
    let missing: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, im)| im.relevance_mask.is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(XblError::Contract(format!("relevance mask missing for instances {missing:?}")));
    }
    let maps = heatmaps(model, data)?;
    let mut total = 0.0;
    for (im, h) in data.iter().zip(&maps) {
        total += activation_precision(h, im.relevance_mask.as_ref().expect("checked above"), tau)?;
    }
    Ok(total / data.len() as f64)
}

/// Share of each heatmap's total mass inside the image's confounder mask,
/// averaged over images whose mask is nonempty. `None` if there are none.
pub fn confounder_mass(model: &Classifier, data: &[LabeledImage]) -> Result<Option<f64>> {
    let marked: Vec<LabeledImage> = data
        .iter()
        .filter(|im| im.confounder_mask.as_ref().is_some_and(|m| !m.is_empty_mask()))
        .cloned()
        .collect();
    if marked.is_empty() {
        return Ok(None);
    }
    let maps = heatmaps(model, &marked)?;
    let mut total = 0.0;
    for (im, h) in marked.iter().zip(&maps) {
        let m = im.confounder_mask.as_ref().expect("filtered above");
        total += mass_fraction(h, m);
    }
    Ok(Some(total / marked.len() as f64))
}

/// `Σ(h ⊙ m) / Σ h`, or 0 for an all-zero heatmap.
pub fn mass_fraction(h: &Heatmap, m: &Mask) -> f64 {
    let all: f64 = h.values.data().iter().map(|&v| v as f64).sum();
    if all == 0.0 {
        return 0.0;
    }
    let inside: f64 = h
        .values
        .data()
        .iter()
        .zip(m.data())
        .filter(|(_, &b)| b != 0)
        .map(|(&v, _)| v as f64)
        .sum();
    inside / all
}

/// Predicted classes for every image, computed in chunks.
pub fn predictions(model: &Classifier, data: &[LabeledImage]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        out.extend(model.predict_classes(&stack(&refs)?)?);
    }
    Ok(out)
}

/// Rows index the true class, columns the prediction.
pub fn confusion(model: &Classifier, data: &[LabeledImage]) -> Result<Vec<Vec<usize>>> {
    if data.is_empty() {
        return Err(XblError::Contract("confusion of an empty dataset".into()));
    }
    let k = model.num_classes();
    let mut table = vec![vec![0usize; k]; k];
    for (im, p) in data.iter().zip(predictions(model, data)?) {
        if im.label >= k {
            return Err(XblError::range("label", im.label, format!("0..{k}")));
        }
        table[im.label][p] += 1;
    }
    Ok(table)
}

pub fn accuracy(model: &Classifier, data: &[LabeledImage]) -> Result<f64> {
    let table = confusion(model, data)?;
    let correct: usize = (0..table.len()).map(|i| table[i][i]).sum();
    Ok(correct as f64 / data.len() as f64)
}

/// One line of the metrics CSV. `activation_precision` is `None` when the
/// split carries no relevance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub config_hash: String,
    pub split: String,
    pub accuracy: f64,
    pub activation_precision: Option<f64>,
    pub tau: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "run_id,config_hash,split,accuracy,activation_precision,tau,seed";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let ap = r.activation_precision.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{},{}",
            r.run_id, r.config_hash, r.split, r.accuracy, ap, r.tau, r.seed
        );
    }
    out
}
