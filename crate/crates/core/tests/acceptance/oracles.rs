//! Straight-line recomputations of the losses and of activation precision.
//!
//! The network oracle walks the layer records in f64 with plain loops and
//! shares no code with the graph. GradCAM weights come from the chain rule
//! through the pool → dense → relu → dense head written out by hand, the
//! input gradient of the summed log-probabilities from central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbl_core::data::{Grid, LabeledImage, Mask};
use xbl_core::losses::{cross_entropy, exbl_triplet_loss, mask_explanation_loss, rrr_loss, ExemplarPair};
use xbl_core::model::{build_classifier, Classifier, Layer, ModelConfig};
use xbl_core::saliency::Heatmap;
use xbl_core::{Graph, Real, Result, Tensor};

pub const INPUTS: usize = 20;
pub const LOSS_TOL: f64 = 1e-5;
pub const AP_TRIPLES: usize = 1000;

const SIDE: usize = 8;
const CLASSES: usize = 3;

pub fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Small classifier with every parameter, biases included, drawn at random.
pub fn small_model(rng: &mut ChaCha8Rng) -> Result<Classifier> {
    let mut model = build_classifier(&ModelConfig {
        input_height: SIDE,
        input_width: SIDE,
        num_classes: CLASSES,
        conv_widths: vec![3, 4],
        pooled_blocks: 1,
        hidden: 6,
        seed: rng.gen(),
        ..ModelConfig::default()
    })?;
    for p in model.params_mut() {
        let spread = if p.name.ends_with("bias") { 0.2 } else { 0.6 };
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-spread..spread));
    }
    Ok(model)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Mask {
    let bits = (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect();
    Grid::new(h, w, bits).expect("sized")
}

pub fn random_image(rng: &mut ChaCha8Rng, label: usize) -> LabeledImage {
    let px = (0..SIDE * SIDE).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    LabeledImage {
        pixels: Grid::new(SIDE, SIDE, px).expect("sized"),
        label,
        relevance_mask: Some(random_mask(rng, SIDE, SIDE, 0.3)),
        confounder_mask: Some(random_mask(rng, SIDE, SIDE, 0.2)),
    }
}

/// One image as (channels, h, w) planes.
struct Planes {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Planes {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

/// Values the oracle needs from one evaluation-mode pass.
struct Pass {
    probs: Vec<f64>,
    features: Planes,
    hidden_pre: Vec<f64>,
    hidden_w: (Vec<f64>, usize),
    out_w: (Vec<f64>, usize),
}

fn f64s(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn forward(model: &Classifier, pixels: &[f64], h: usize, w: usize) -> Pass {
    let mut cur = Planes { c: 1, h, w, v: pixels.to_vec() };
    let mut vec: Vec<f64> = Vec::new();
    let mut features = None;
    let mut hidden_pre = Vec::new();
    let mut dense = Vec::new();
    let mut probs = Vec::new();
    let mut flat = false;
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Conv { weight, bias, padding } => {
                let s = weight.value.shape();
                let (o, k) = (s[0], s[2]);
                let wt = f64s(&weight.value);
                let b = f64s(&bias.value);
                let p = *padding as isize;
                let mut out = vec![0.0; o * cur.h * cur.w];
                for oc in 0..o {
                    for y in 0..cur.h {
                        for x in 0..cur.w {
                            let mut acc = b[oc];
                            for ic in 0..cur.c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let yy = y as isize + ky as isize - p;
                                        let xx = x as isize + kx as isize - p;
                                        if yy < 0 || xx < 0 || yy >= cur.h as isize || xx >= cur.w as isize {
                                            continue;
                                        }
                                        acc += wt[((oc * cur.c + ic) * k + ky) * k + kx]
                                            * cur.at(ic, yy as usize, xx as usize);
                                    }
                                }
                            }
                            out[(oc * cur.h + y) * cur.w + x] = acc;
                        }
                    }
                }
                cur = Planes { c: o, h: cur.h, w: cur.w, v: out };
            }
            Layer::Relu if flat => vec.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::Relu => cur.v.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::MaxPool { size } => {
                let (oh, ow) = (cur.h / size, cur.w / size);
                let mut out = Vec::with_capacity(cur.c * oh * ow);
                for c in 0..cur.c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    m = m.max(cur.at(c, y * size + dy, x * size + dx));
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                cur = Planes { c: cur.c, h: oh, w: ow, v: out };
            }
            Layer::GlobalAvgPool => {
                let plane = (cur.h * cur.w) as f64;
                vec = cur.v.chunks(cur.h * cur.w).map(|c| c.iter().sum::<f64>() / plane).collect();
                flat = true;
            }
            Layer::Dense { weight, bias } => {
                let s = weight.value.shape();
                let (o, n) = (s[0], s[1]);
                let wt = f64s(&weight.value);
                let b = f64s(&bias.value);
                vec = (0..o).map(|r| b[r] + (0..n).map(|j| wt[r * n + j] * vec[j]).sum::<f64>()).collect();
                if dense.is_empty() {
                    hidden_pre = vec.clone();
                }
                dense.push((wt, n));
            }
            Layer::Dropout { .. } => {}
            Layer::Softmax => {
                let top = vec.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = vec.iter().map(|v| (v - top).exp()).collect();
                let z: f64 = e.iter().sum();
                probs = e.iter().map(|v| v / z).collect();
            }
        }
        if i == model.feature_layer_index() {
            features = Some(Planes { c: cur.c, h: cur.h, w: cur.w, v: cur.v.clone() });
        }
    }
    let mut dense = dense.into_iter();
    Pass {
        probs,
        features: features.expect("feature layer"),
        hidden_pre,
        hidden_w: dense.next().expect("hidden dense"),
        out_w: dense.next().expect("output dense"),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Source index pairs and weights along one axis, half-pixel centres.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
            let a = (pos.floor() as usize).min(src - 1);
            let b = (a + 1).min(src - 1);
            (a, b, pos - a as f64)
        })
        .collect()
}

/// `x ⊙ GradCAM(x)` at the predicted class.
fn product(model: &Classifier, pixels: &[f64]) -> Vec<f64> {
    let pass = forward(model, pixels, SIDE, SIDE);
    let class = argmax(&pass.probs);
    let (w2, hidden) = &pass.out_w;
    let (w1, k) = &pass.hidden_w;
    let a = &pass.features;
    let plane = (a.h * a.w) as f64;
    // ∂score/∂A[c, y, x] = Σ_j w2[class, j] · 1[pre_j > 0] · w1[j, c] / (h·w)
    let alpha: Vec<f64> = (0..*k)
        .map(|c| {
            (0..*hidden)
                .filter(|&j| pass.hidden_pre[j] > 0.0)
                .map(|j| w2[class * hidden + j] * w1[j * k + c])
                .sum::<f64>()
                / plane
        })
        .collect();
    let mut cam = vec![0.0; a.h * a.w];
    for y in 0..a.h {
        for x in 0..a.w {
            let s: f64 = (0..a.c).map(|c| alpha[c] * a.at(c, y, x)).sum();
            cam[y * a.w + x] = s.max(0.0);
        }
    }
    let rows = axis_weights(a.h, SIDE);
    let cols = axis_weights(a.w, SIDE);
    let mut up = vec![0.0; SIDE * SIDE];
    for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
            let v = |y: usize, x: usize| cam[y * a.w + x];
            up[oy * SIDE + ox] = (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1))
                + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1));
        }
    }
    let peak = up.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-8;
    pixels.iter().zip(&up).map(|(x, u)| x * u / peak).collect()
}

fn pixels_of(im: &LabeledImage) -> Vec<f64> {
    im.pixels.data().iter().map(|&v| v as f64).collect()
}

pub fn triplet_oracle(model: &Classifier, images: &[LabeledImage], pair: &ExemplarPair, margin: f64) -> f64 {
    let good = f64s(&pair.c_good);
    let bad = f64s(&pair.c_bad);
    let dist = |p: &[f64], c: &[f64]| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    images
        .iter()
        .map(|im| {
            let p = product(model, &pixels_of(im));
            (dist(&p, &good) - dist(&p, &bad) + margin).max(0.0)
        })
        .sum()
}

/// `Σ_k log ŷ_k` of one image.
fn log_prob_sum(model: &Classifier, pixels: &[f64]) -> f64 {
    forward(model, pixels, SIDE, SIDE).probs.iter().map(|p| p.max(1e-12).ln()).sum()
}

pub fn rrr_oracle(model: &Classifier, images: &[LabeledImage], masks: &[Mask]) -> f64 {
    const H: f64 = 1e-6;
    let mut total = 0.0;
    for (im, m) in images.iter().zip(masks) {
        let mut x = pixels_of(im);
        for i in 0..x.len() {
            if m.data()[i] == 0 {
                continue;
            }
            let x0 = x[i];
            x[i] = x0 + H;
            let up = log_prob_sum(model, &x);
            x[i] = x0 - H;
            let down = log_prob_sum(model, &x);
            x[i] = x0;
            let d = (up - down) / (2.0 * H);
            total += d * d;
        }
    }
    total
}

pub fn mask_oracle(masks: &[Mask], maps: &[Heatmap]) -> f64 {
    let mut total = 0.0;
    for (m, h) in masks.iter().zip(maps) {
        for i in 0..m.data().len() {
            if m.data()[i] == 1 {
                total += h.values.data()[i] as f64;
            }
        }
    }
    total
}

pub fn ce_oracle(probs: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    -labels
        .iter()
        .enumerate()
        .map(|(i, &c)| probs[i * k + c].max(1e-12).ln())
        .sum::<f64>()
        / n as f64
}

fn ce_value<F: Real>(probs: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::<F>::new();
    let p = g.constant(Tensor::from_f64([labels.len(), k], probs)?);
    let l = cross_entropy(&mut g, p, labels)?;
    Ok(g.value(l).item()?.as_f64())
}

/// Worst relative error of each loss against its oracle, in the order
/// triplet, rrr, mask, cross-entropy (f32 and f64 graphs).
pub fn loss_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut worst = [0.0f64; 5];
    for seed in 0..INPUTS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e + seed);
        let model = small_model(&mut rng)?;
        let n = rng.gen_range(1..=4);
        let images: Vec<LabeledImage> = (0..n).map(|i| random_image(&mut rng, i % CLASSES)).collect();
        let refs: Vec<&LabeledImage> = images.iter().collect();

        let exemplar = |rng: &mut ChaCha8Rng| {
            let v = (0..SIDE * SIDE).map(|_| rng.gen_range(0.0f32..0.5)).collect();
            Tensor::new([1, SIDE, SIDE], v).expect("sized")
        };
        let pair = ExemplarPair {
            c_good: exemplar(&mut rng),
            c_bad: exemplar(&mut rng),
            good_source_id: 0,
            bad_source_id: 1,
        };
        let margin = rng.gen_range(0.5..2.0);
        let got = exbl_triplet_loss(&model, &refs, &pair, margin)?;
        worst[0] = worst[0].max(relative(got, triplet_oracle(&model, &images, &pair, margin)));

        let masks: Vec<Mask> = images.iter().map(|im| im.confounder_mask.clone().expect("set")).collect();
        let x = xbl_core::data::stack(&refs)?;
        let got = rrr_loss::<f64>(&model, &x, &masks)?;
        worst[1] = worst[1].max(relative(got, rrr_oracle(&model, &images, &masks)));

        let maps: Vec<Heatmap> = (0..n)
            .map(|_| {
                let v = (0..SIDE * SIDE).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
                Heatmap {
                    values: Grid::new(SIDE, SIDE, v).expect("sized"),
                    source_class: 0,
                    raw_max: 1.0,
                }
            })
            .collect();
        let got = mask_explanation_loss(&masks, &maps)?;
        worst[2] = worst[2].max(relative(got, mask_oracle(&masks, &maps)));

        let k = rng.gen_range(2..6);
        let rows = rng.gen_range(1..8);
        let mut probs = Vec::new();
        for _ in 0..rows {
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let z: f64 = logits.iter().map(|l| f64::exp(*l)).sum();
            probs.extend(logits.iter().map(|l| l.exp() / z));
        }
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
        let want = ce_oracle(&probs, k, &labels);
        worst[3] = worst[3].max(relative(ce_value::<f32>(&probs, k, &labels)?, want));
        worst[4] = worst[4].max(relative(ce_value::<f64>(&probs, k, &labels)?, want));
    }
    Ok(vec![
        ("exbl_triplet_loss", worst[0]),
        ("rrr_loss", worst[1]),
        ("mask_explanation_loss", worst[2]),
        ("cross_entropy f32", worst[3]),
        ("cross_entropy f64", worst[4]),
    ])
}

/// Activation precision by ranks: sort, locate the interpolated cut among
/// the order statistics, keep everything at or above it, count hits.
pub fn ap_oracle(values: &[f32], mask: &[u8], tau: f64) -> f64 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let pos = (100.0 - tau) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    // a cut strictly between two distinct order statistics keeps the upper one
    let keep_from = if frac > 0.0 && sorted[lo] < sorted[lo + 1] {
        sorted[lo + 1]
    } else {
        sorted[lo]
    };
    let mut kept = 0usize;
    let mut hits = 0usize;
    for (v, m) in values.iter().zip(mask) {
        if *v >= keep_from {
            kept += 1;
            if *m == 1 {
                hits += 1;
            }
        }
    }
    hits as f64 / kept as f64
}

/// Random heatmap of one of several kinds: continuous, coarsely quantized
/// (many ties), constant, or mostly zero.
pub fn random_heatmap(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    match rng.gen_range(0..4) {
        0 => (0..n).map(|_| rng.gen_range(0.0f32..=1.0)).collect(),
        1 => {
            let levels = rng.gen_range(1..6);
            (0..n).map(|_| rng.gen_range(0..=levels) as f32 / levels as f32).collect()
        }
        2 => vec![rng.gen_range(0.0f32..=1.0); n],
        _ => (0..n)
            .map(|_| if rng.gen_bool(0.1) { rng.gen_range(0.0f32..=1.0) } else { 0.0 })
            .collect(),
    }
}

pub fn random_tau(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..3) {
        0 => [5.0, 10.0, 25.0, 50.0][rng.gen_range(0..4)],
        _ => rng.gen_range(0.01..99.99),
    }
}

/// Number of AP disagreements with the oracle, and how many triples had a
/// constant or tied heatmap.
pub fn ap_disagreements() -> Result<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa9);
    let mut wrong = 0;
    let mut constant = 0;
    let mut tied = 0;
    for _ in 0..AP_TRIPLES {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let values = random_heatmap(&mut rng, h, w);
        let density = rng.gen_range(0.0..=1.0);
        let mask = random_mask(&mut rng, h, w, density);
        let tau = random_tau(&mut rng);
        let mut distinct = values.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        distinct.dedup();
        if distinct.len() == 1 {
            constant += 1;
        } else if distinct.len() < values.len() {
            tied += 1;
        }
        let heat = Heatmap {
            values: Grid::new(h, w, values.clone())?,
            source_class: 0,
            raw_max: 1.0,
        };
        let got = xbl_core::metrics::activation_precision(&heat, &mask, tau)?;
        if got.to_bits() != ap_oracle(&values, mask.data(), tau).to_bits() {
            wrong += 1;
        }
    }
    Ok((wrong, constant, tied))
}
