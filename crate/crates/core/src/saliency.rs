//! GradCAM heatmaps and image ⊙ heatmap products.
//!
//! Two routes compute the same map. [`gradcam`] and [`gradcam_batch`] run a
//! backward pass to get the class-score gradient at the feature layer and
//! return plain [`Heatmap`]s. [`gradcam_graph`] builds the map inside an
//! existing graph so losses on it differentiate back into the parameters;
//! the channel weights come from the head in closed form (the head after
//! the feature layer is global pooling, dense, ReLU, dense, so the gradient
//! is the same at every spatial position and piecewise constant).

use std::path::Path;

use crate::data::pgm::write_pgm;
use crate::data::{stack, Grid, LabeledImage};
use crate::error::{Result, XblError};
use crate::graph::{Graph, Var};
use crate::io::write_atomic;
use crate::kernels;
use crate::model::{argmax, Classifier, Forward};
use crate::tensor::{Real, Tensor};

/// Added to the per-instance maximum before dividing inside the graph.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Values in [0, 1] at input resolution.
    pub values: Grid<f32>,
    pub source_class: usize,
    /// Maximum of the rectified map before upsampling and normalization.
    pub raw_max: f32,
}

impl Heatmap {
    /// Text for the `.meta` sidecar.
    pub fn meta_line(&self) -> String {
        format!("class={} raw_max={}\n", self.source_class, self.raw_max)
    }

    /// Writes `<path>` as PGM and `<path>.meta` next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_pgm(&self.values, path)?;
        let mut meta = path.as_os_str().to_owned();
        meta.push(".meta");
        write_atomic(Path::new(&meta), self.meta_line().as_bytes())
    }
}

/// Scales values so the maximum becomes 1. The rectified map is
/// nonnegative, so this is min-max normalization with the floor pinned at 0.
/// An all-zero map stays all zero.
pub fn normalize_in_place(values: &mut [f32]) {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

/// GradCAM from feature maps `a` and their gradients `da`, both (k, h, w).
pub fn gradcam_from_maps(
    a: &Tensor<f32>,
    da: &Tensor<f32>,
    out_size: (usize, usize),
    source_class: usize,
) -> Result<Heatmap> {
    let s = a.shape();
    if s.len() != 3 || da.shape() != s {
        return Err(XblError::dim(
            "gradcam",
            format!("{:?} vs {:?}", s, da.shape()),
        ));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut raw = vec![0.0f32; plane];
    for c in 0..k {
        let dac = &da.data()[c * plane..(c + 1) * plane];
        let alpha = dac.iter().sum::<f32>() / plane as f32;
        if alpha == 0.0 {
            continue;
        }
        let ac = &a.data()[c * plane..(c + 1) * plane];
        raw.iter_mut().zip(ac).for_each(|(r, &v)| *r += alpha * v);
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let raw_max = raw.iter().copied().fold(0.0f32, f32::max);
    let mut up = kernels::upsample_forward(&raw, 1, (h, w), out_size);
    normalize_in_place(&mut up);
    Ok(Heatmap {
        values: Grid::new(out_size.0, out_size.1, up)?,
        source_class,
        raw_max,
    })
}

/// GradCAM for a batch; `classes` defaults to the predicted classes.
pub fn gradcam_batch(
    model: &Classifier,
    images: &[&LabeledImage],
    classes: Option<&[usize]>,
) -> Result<Vec<Heatmap>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = stack(images)?;
    let predicted;
    let classes = match classes {
        Some(c) => c,
        None => {
            predicted = model.predict_classes(&x)?;
            &predicted
        }
    };
    let (a, da) = model.feature_maps_and_grads_batch(&x, classes)?;
    let [k, h, w] = model.feature_shape();
    let per = k * h * w;
    let out = images[0].pixels.dims();
    (0..images.len())
        .map(|i| {
            let ai = Tensor::new([k, h, w], a.data()[i * per..(i + 1) * per].to_vec())?;
            let di = Tensor::new([k, h, w], da.data()[i * per..(i + 1) * per].to_vec())?;
            gradcam_from_maps(&ai, &di, out, classes[i])
        })
        .collect()
}

/// GradCAM of one image; `class_index` defaults to the predicted class.
pub fn gradcam(model: &Classifier, x: &LabeledImage, class_index: Option<usize>) -> Result<Heatmap> {
    let classes = class_index.map(|c| vec![c]);
    Ok(gradcam_batch(model, &[x], classes.as_deref())?.remove(0))
}

/// Classes the saliency branch explains: the evaluation-mode prediction of
/// every instance. With a closed-form head this ignores any dropout applied
/// in a training graph.
pub fn saliency_classes<F: Real>(g: &Graph<F>, fwd: &Forward, num_classes: usize) -> Vec<usize> {
    match fwd.head {
        Some(head) => {
            let hp = g.value(head.hidden_pre);
            let hidden = hp.shape()[1];
            let w = g.value(head.out_weight).data();
            let b = g.value(head.out_bias).data();
            hp.data()
                .chunks(hidden)
                .map(|row| {
                    let logits: Vec<f32> = (0..num_classes)
                        .map(|c| {
                            let mut z = b[c];
                            for (j, &v) in row.iter().enumerate() {
                                if v > F::zero() {
                                    z += w[c * hidden + j] * v;
                                }
                            }
                            z.as_f64() as f32
                        })
                        .collect();
                    argmax(&logits)
                })
                .collect()
        }
        None => g
            .value(fwd.logits)
            .data()
            .chunks(num_classes)
            .map(|r| argmax(&r.iter().map(|v| v.as_f64() as f32).collect::<Vec<_>>()))
            .collect(),
    }
}

/// Records normalized GradCAM maps, (n, 1, H, W), on `g`.
///
/// With a closed-form head the channel weights are differentiable functions
/// of the head parameters. Otherwise they are computed by a separate
/// backward pass over `x` and enter the graph as constants.
pub fn gradcam_graph<F: Real>(
    g: &mut Graph<F>,
    model: &Classifier,
    fwd: &Forward,
    x: &Tensor<f32>,
    classes: &[usize],
) -> Result<Var> {
    let [k, h, w] = model.feature_shape();
    let n = classes.len();
    let kc = model.num_classes();
    let [_, in_h, in_w] = model.input_shape();
    if let Some(&bad) = classes.iter().find(|&&c| c >= kc) {
        return Err(XblError::range("class index", bad, format!("0..{kc}")));
    }
    let alpha = match fwd.head {
        Some(head) => {
            let mut onehot = vec![F::zero(); n * kc];
            for (i, &c) in classes.iter().enumerate() {
                onehot[i * kc + c] = F::one();
            }
            let onehot = g.constant(Tensor::new([n, kc], onehot)?);
            let gate: Vec<F> = g
                .value(head.hidden_pre)
                .data()
                .iter()
                .map(|&v| if v > F::zero() { F::one() } else { F::zero() })
                .collect();
            let hidden = gate.len() / n;
            let gate = g.constant(Tensor::new([n, hidden], gate)?);
            let rows = g.matmul(onehot, head.out_weight)?;
            let rows = g.mul(rows, gate)?;
            let alpha = g.matmul(rows, head.hidden_weight)?;
            g.scale(alpha, 1.0 / (h * w) as f64)?
        }
        None => {
            let (_, da) = model.feature_maps_and_grads_batch(x, classes)?;
            let plane = h * w;
            let alpha: Vec<F> = da
                .data()
                .chunks(plane)
                .map(|c| F::of(c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64))
                .collect();
            g.constant(Tensor::new([n, k], alpha)?)
        }
    };
    let alpha = g.reshape(alpha, [n, k, 1, 1])?;
    let weighted = g.mul(fwd.features, alpha)?;
    let cam = g.sum_axis(weighted, 1)?;
    let cam = g.relu(cam)?;
    let cam = g.reshape(cam, [n, 1, h, w])?;
    let up = g.upsample_bilinear(cam, in_h, in_w)?;
    let flat = g.reshape(up, [n, in_h * in_w])?;
    let peak = g.max_axis(flat, 1)?;
    let peak = g.add_scalar(peak, NORMALIZE_EPS)?;
    let peak = g.reshape(peak, [n, 1, 1, 1])?;
    g.div(up, peak)
}

/// Pixelwise image ⊙ heatmap, shaped (1, h, w).
pub fn explanation_product(x: &LabeledImage, h: &Heatmap) -> Result<Tensor<f32>> {
    if x.pixels.dims() != h.values.dims() {
        return Err(XblError::dim(
            "explanation_product",
            format!("image {:?} vs heatmap {:?}", x.pixels.dims(), h.values.dims()),
        ));
    }
    let data = x
        .pixels
        .data()
        .iter()
        .zip(h.values.data())
        .map(|(&p, &v)| p * v)
        .collect();
    let (rows, cols) = x.pixels.dims();
    Tensor::new([1, rows, cols], data)
}

/// Image, heatmap, and their even blend side by side, separated by single
/// white columns.
pub fn overlay_triptych(x: &LabeledImage, h: &Heatmap) -> Result<Grid<f32>> {
    if x.pixels.dims() != h.values.dims() {
        return Err(XblError::dim(
            "overlay",
            format!("image {:?} vs heatmap {:?}", x.pixels.dims(), h.values.dims()),
        ));
    }
    let (rows, cols) = x.pixels.dims();
    let width = 3 * cols + 2;
    let mut out = Grid::filled(rows, width, 1.0f32);
    for y in 0..rows {
        for c in 0..cols {
            let p = x.pixels.get(y, c);
            let v = h.values.get(y, c);
            out.set(y, c, p);
            out.set(y, cols + 1 + c, v);
            out.set(y, 2 * cols + 2 + c, 0.5 * p + 0.5 * v);
        }
    }
    Ok(out)
}

pub fn overlay_heatmap(x: &LabeledImage, h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&overlay_triptych(x, h)?, path)
}
