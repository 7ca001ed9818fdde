//! Training losses: cross-entropy, L2, the mask and input-gradient
//! explanation penalties, and the exemplar triplet loss.
//!
//! Graph-building functions take the graph first and return a scalar
//! [`Var`]. The input-gradient penalty cannot be expressed on a first-order
//! tape, so it has its own value and gradient routines.

use crate::data::{LabeledImage, Mask};
use crate::error::{Result, XblError};
use crate::graph::{Graph, Var};
use crate::model::{Classifier, ForwardOptions};
use crate::saliency::{gradcam_graph, saliency_classes, Heatmap};
use crate::tensor::{Real, Tensor};

/// Probabilities are clipped to this floor before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub expl_scale: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l2: 1e-4,
            expl_scale: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_l2", self.lambda_l2),
            ("expl_scale", self.expl_scale),
            ("margin", self.margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(XblError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The two fixed exemplar products `x ⊙ heatmap`, each (1, h, w).
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarPair {
    pub c_good: Tensor<f32>,
    pub c_bad: Tensor<f32>,
    pub good_source_id: usize,
    pub bad_source_id: usize,
}

impl ExemplarPair {
    pub fn validate(&self) -> Result<()> {
        if self.c_good.shape() != self.c_bad.shape() || self.c_good.shape().len() != 3 {
            return Err(XblError::dim(
                "exemplar_pair",
                format!("{:?} vs {:?}", self.c_good.shape(), self.c_bad.shape()),
            ));
        }
        Ok(())
    }
}

/// Mean negative log-probability of the labels. `probs` is (n, K).
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(XblError::dim(
            "cross_entropy",
            format!("probabilities {shape:?} for {} labels", labels.len()),
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    let mut onehot = vec![F::zero(); n * k];
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(XblError::range("label", c, format!("0..{k}")));
        }
        onehot[i * k + c] = F::one();
    }
    let onehot = g.constant(Tensor::new([n, k], onehot)?);
    let logp = g.log(probs, PROB_FLOOR)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / n as f64)
}

/// `lambda · Σ θ²` over the given parameter vars.
pub fn l2_penalty<F: Real>(g: &mut Graph<F>, params: &[Var], lambda_l2: f64) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(F::zero()));
    for &p in params {
        let sq = g.square(p)?;
        let s = g.sum(sq)?;
        acc = g.add(acc, s)?;
    }
    g.scale(acc, lambda_l2)
}

/// Σ over batch and pixels of `mask ⊙ explanation`; both are (n, 1, h, w).
pub fn mask_explanation_graph<F: Real>(g: &mut Graph<F>, masks: Var, explanations: Var) -> Result<Var> {
    if g.shape(masks) != g.shape(explanations) {
        return Err(XblError::dim(
            "mask_explanation_loss",
            format!("{:?} vs {:?}", g.shape(masks), g.shape(explanations)),
        ));
    }
    let prod = g.mul(masks, explanations)?;
    g.sum(prod)
}

/// Value of the mask explanation loss on materialized heatmaps.
pub fn mask_explanation_loss(masks: &[Mask], explanations: &[Heatmap]) -> Result<f64> {
    if masks.len() != explanations.len() {
        return Err(XblError::Contract(format!(
            "{} masks for {} explanations",
            masks.len(),
            explanations.len()
        )));
    }
    let mut total = 0.0f64;
    for (m, h) in masks.iter().zip(explanations) {
        if m.dims() != h.values.dims() {
            return Err(XblError::dim(
                "mask_explanation_loss",
                format!("mask {:?} vs explanation {:?}", m.dims(), h.values.dims()),
            ));
        }
        total += m
            .data()
            .iter()
            .zip(h.values.data())
            .filter(|(&b, _)| b != 0)
            .map(|(_, &v)| v as f64)
            .sum::<f64>();
    }
    Ok(total)
}

/// Confounder masks of every image; missing ones are a contract error
/// naming the batch positions.
pub fn confounder_masks(images: &[&LabeledImage]) -> Result<Vec<Mask>> {
    let missing: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, im)| im.confounder_mask.is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(XblError::Contract(format!(
            "confounder mask missing for batch positions {missing:?}"
        )));
    }
    Ok(images.iter().filter_map(|im| im.confounder_mask.clone()).collect())
}

fn log_prob_sum_graph<F: Real>(
    model: &Classifier,
    batch: &Tensor<f32>,
    input_grad: bool,
) -> Result<(Graph<F>, Var, Var, Vec<Var>)> {
    let mut g = Graph::<F>::new();
    let xv = if input_grad {
        g.variable(batch.cast())
    } else {
        g.constant(batch.cast())
    };
    let fwd = model.forward(&mut g, xv, ForwardOptions::default())?;
    let logp = g.log(fwd.probs, PROB_FLOOR)?;
    let s = g.sum(logp)?;
    g.backward(s)?;
    Ok((g, xv, s, fwd.params))
}

/// Gradient of `Σ_n Σ_k log ŷ_nk` with respect to the input batch.
pub fn input_gradient<F: Real>(model: &Classifier, batch: &Tensor<f32>) -> Result<Tensor<F>> {
    let (g, xv, _, _) = log_prob_sum_graph::<F>(model, batch, true)?;
    let grad = g
        .grad(xv)
        .map(<[F]>::to_vec)
        .unwrap_or_else(|| vec![F::zero(); batch.numel()]);
    Tensor::new(batch.shape(), grad)
}

fn masked_input_gradient<F: Real>(model: &Classifier, batch: &Tensor<f32>, masks: &[Mask]) -> Result<Vec<F>> {
    let s = batch.shape();
    if s.len() != 4 || s[0] != masks.len() {
        return Err(XblError::Contract(format!(
            "{} masks for a batch of shape {s:?}",
            masks.len()
        )));
    }
    let plane = s[2] * s[3];
    for m in masks {
        if m.dims() != (s[2], s[3]) {
            return Err(XblError::dim(
                "rrr_loss",
                format!("mask {:?} vs input {:?}", m.dims(), &s[2..]),
            ));
        }
    }
    let grad = input_gradient::<F>(model, batch)?;
    let chans = s[1];
    Ok(grad
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let n = k / (chans * plane);
            if masks[n].data()[k % plane] != 0 {
                v
            } else {
                F::zero()
            }
        })
        .collect())
}

/// `Σ_n Σ_pixels (M_n ⊙ ∂/∂x_n Σ_k log ŷ_nk)²`.
pub fn rrr_loss<F: Real>(model: &Classifier, batch: &Tensor<f32>, masks: &[Mask]) -> Result<f64> {
    let v = masked_input_gradient::<F>(model, batch, masks)?;
    Ok(v.iter().map(|&x| x.as_f64() * x.as_f64()).sum())
}

/// Value of the input-gradient penalty and an approximation of its
/// parameter gradient, in [`Classifier::params`] order.
///
/// With `S(x)` the summed log-probabilities and `v = M ⊙ ∇ₓS`, the exact
/// gradient is `2 ∇_θ ⟨v, ∇ₓS⟩` with `v` held fixed. The inner product is
/// replaced by a central difference of `S` along `v`, which is exact when
/// `∇ₓS` is locally linear in `x`.
pub fn rrr_loss_and_param_grads(
    model: &Classifier,
    batch: &Tensor<f32>,
    masks: &[Mask],
) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let v = masked_input_gradient::<f64>(model, batch, masks)?;
    let value: f64 = v.iter().map(|x| x * x).sum();
    let nparams = model.params().len();
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Ok((value, vec![None; nparams]));
    }
    let eps = 1e-3 / peak;
    let shifted = |sign: f64| -> Result<Vec<Option<Vec<f64>>>> {
        let data: Vec<f32> = batch
            .data()
            .iter()
            .zip(&v)
            .map(|(&x, &d)| (x as f64 + sign * eps * d) as f32)
            .collect();
        let x = Tensor::new(batch.shape(), data)?;
        let (g, _, _, params) = log_prob_sum_graph::<f64>(model, &x, false)?;
        Ok(params.iter().map(|&p| g.grad(p).map(<[f64]>::to_vec)).collect())
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    let grads = plus
        .into_iter()
        .zip(minus)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(p, m)| ((p - m) / eps) as f32).collect()),
            _ => None,
        })
        .collect();
    Ok((value, grads))
}

/// `Σ_i max(‖p_i − c_good‖ − ‖p_i − c_bad‖ + margin, 0)` for products
/// `p` of shape (n, c, h, w).
pub fn triplet_graph<F: Real>(g: &mut Graph<F>, products: Var, pair: &ExemplarPair, margin: f64) -> Result<Var> {
    pair.validate()?;
    let shape = g.shape(products).to_vec();
    if shape.len() != 4 || shape[1..] != *pair.c_good.shape() {
        return Err(XblError::dim(
            "exbl_triplet_loss",
            format!("products {shape:?} vs exemplars {:?}", pair.c_good.shape()),
        ));
    }
    let n = shape[0];
    let per: usize = shape[1..].iter().product();
    let dist = |c: &Tensor<f32>, g: &mut Graph<F>| -> Result<Var> {
        let cv = g.constant(c.cast::<F>().reshaped([1, per])?);
        let flat = g.reshape(products, [n, per])?;
        let diff = g.sub(flat, cv)?;
        let sq = g.square(diff)?;
        let s = g.sum_axis(sq, 1)?;
        g.sqrt(s)
    };
    let dg = dist(&pair.c_good, g)?;
    let db = dist(&pair.c_bad, g)?;
    let gap = g.sub(dg, db)?;
    let gap = g.add_scalar(gap, margin)?;
    let hinge = g.max_with_scalar(gap, 0.0)?;
    g.sum(hinge)
}

/// Records `x ⊙ GradCAM(x)` for the batch var `xv` (holding `x`) using the
/// classifier's forward handles, and returns the triplet loss var.
pub fn exbl_triplet_graph<F: Real>(
    g: &mut Graph<F>,
    model: &Classifier,
    fwd: &crate::model::Forward,
    xv: Var,
    x: &Tensor<f32>,
    pair: &ExemplarPair,
    margin: f64,
) -> Result<Var> {
    let classes = saliency_classes(g, fwd, model.num_classes());
    let heat = gradcam_graph(g, model, fwd, x, &classes)?;
    let products = g.mul(xv, heat)?;
    triplet_graph(g, products, pair, margin)
}

/// Value of the triplet loss for a batch of images with the model in
/// evaluation mode.
pub fn exbl_triplet_loss(
    model: &Classifier,
    images: &[&LabeledImage],
    pair: &ExemplarPair,
    margin: f64,
) -> Result<f64> {
    let x = crate::data::stack(images)?;
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, xv, ForwardOptions::default())?;
    let loss = exbl_triplet_graph(&mut g, model, &fwd, xv, &x, pair, margin)?;
    Ok(g.value(loss).item()? as f64)
}

/// `ce + expl_scale · expl + l2`.
pub fn total_loss<F: Real>(g: &mut Graph<F>, ce: Var, expl: Var, l2: Var, w: &LossWeights) -> Result<Var> {
    let e = g.scale(expl, w.expl_scale)?;
    let s = g.add(ce, e)?;
    g.add(s, l2)
}
