//! Finite-difference checks of every graph operation and of the composite
//! training objectives, in both precisions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbl_core::losses::{cross_entropy, exbl_triplet_graph, l2_penalty, total_loss, ExemplarPair, LossWeights};
use xbl_core::model::{build_classifier, ForwardOptions, ModelConfig};
use xbl_core::{finite_diff_check, max_relative_error, Graph, Real, Result, Tensor, Var};

pub const TRIALS: u64 = 100;
pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-6;

/// Step sizes per precision. Piecewise-linear ops take large steps (inputs
/// are kept further than the step from every kink); smooth ops take steps
/// that balance truncation against rounding.
///
/// `reference64` cases are whole networks. Their analytic gradients, in
/// either precision, are compared with 64-bit central differences of the
/// same graph at the same point, using steps that stay on one smooth piece.
/// A network evaluated in 32-bit rounds its loss at about 1e-7 relative,
/// which swamps its small gradient entries at any usable step.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub eps32: f64,
    pub eps64: f64,
    pub reference64: bool,
}

const fn case(name: &'static str, eps32: f64, eps64: f64) -> Case {
    Case {
        name,
        eps32,
        eps64,
        reference64: false,
    }
}

const fn network(name: &'static str, eps64: f64) -> Case {
    Case {
        name,
        eps32: eps64,
        eps64,
        reference64: true,
    }
}

const NET_EPS: f64 = 1e-3;
const MIN_STEP: f64 = 1e-7;

pub const CASES: &[Case] = &[
    case("conv2d", 0.05, 1e-3),
    case("dense", 0.05, 1e-3),
    case("matmul", 0.05, 1e-3),
    case("relu", 0.1, 1e-3),
    case("max_pool2d", 0.05, 1e-3),
    case("avg_pool2d_global", 0.05, 1e-3),
    case("softmax", 1e-2, 1e-5),
    case("elementwise_mul", 0.05, 1e-3),
    case("elementwise_sub", 0.05, 1e-3),
    case("elementwise_add", 0.05, 1e-3),
    case("elementwise_div", 5e-3, 1e-5),
    case("square", 0.05, 1e-3),
    case("sum", 0.05, 1e-3),
    case("sum_axis", 0.05, 1e-3),
    case("max_axis", 0.05, 1e-3),
    case("mean", 0.05, 1e-3),
    case("sqrt", 1e-2, 1e-5),
    case("log", 1e-2, 1e-5),
    case("scale", 0.05, 1e-3),
    case("add_scalar", 0.05, 1e-3),
    case("dropout", 0.05, 1e-3),
    case("upsample_bilinear", 0.05, 1e-3),
    case("max_with_scalar", 0.1, 1e-3),
    case("reshape", 0.05, 1e-3),
    network("classifier_ce_l2", NET_EPS),
    network("classifier_exbl", NET_EPS),
];

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Magnitudes in `[lo, hi)` with random signs.
fn signed(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// A shuffled ladder of values `step` apart, centered on 0.
fn spaced(rng: &mut ChaCha8Rng, n: usize, step: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|k| (k as f64 - n as f64 / 2.0) * step).collect();
    v.shuffle(rng);
    v
}

fn leaf<F: Real>(g: &mut Graph<F>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(g.variable(Tensor::from_f64(shape.to_vec(), data)?))
}

fn konst<F: Real>(g: &mut Graph<F>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::from_f64(shape.to_vec(), data)?))
}

/// `Σ r ⊙ y` with positive random weights `r`.
fn project<F: Real>(g: &mut Graph<F>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = shape.iter().product();
    let r = konst(g, &shape, &uniform(rng, n, 0.5, 1.5))?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Values exactly representable in 32-bit, so both precisions see the
/// same point.
fn uniform32(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    uniform(rng, n, lo, hi).into_iter().map(|v| v as f32 as f64).collect()
}

/// Freshly initialized biases are zero, which puts dead units exactly on
/// the ReLU kink; trained networks do not sit there.
fn tiny_model(rng: &mut ChaCha8Rng, dropout: f64) -> Result<xbl_core::model::Classifier> {
    let mut model = build_classifier(&ModelConfig {
        input_channels: 1,
        input_height: 6,
        input_width: 6,
        num_classes: 3,
        conv_widths: vec![2, 3],
        kernel_size: 3,
        pooled_blocks: 1,
        hidden: 4,
        dropout,
        feature_block: None,
        frozen_layers: 0,
        seed: rng.gen(),
    })?;
    for p in model.params_mut() {
        if p.value.shape().len() == 1 {
            let n = p.value.numel();
            let b: Vec<f32> = signed(rng, n, 0.05, 0.2).into_iter().map(|v| v as f32).collect();
            p.value.data_mut().copy_from_slice(&b);
        }
    }
    Ok(model)
}

fn build<F: Real>(name: &str, g: &mut Graph<F>, rng: &mut ChaCha8Rng) -> Result<(Var, Vec<Var>)> {
    Ok(match name {
        "conv2d" => {
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let x = leaf(g, &[2, 2, 5, 5], &uniform(rng, 100, 0.2, 1.0))?;
            let w = leaf(g, &[3, 2, 3, 3], &uniform(rng, 54, 0.2, 1.0))?;
            let b = leaf(g, &[3], &signed(rng, 3, 0.1, 1.0))?;
            let y = g.conv2d(x, w, b, stride, pad)?;
            (project(g, y, rng)?, vec![x, w, b])
        }
        "dense" => {
            let x = leaf(g, &[3, 4], &uniform(rng, 12, 0.2, 1.0))?;
            let w = leaf(g, &[5, 4], &uniform(rng, 20, 0.2, 1.0))?;
            let b = leaf(g, &[5], &signed(rng, 5, 0.1, 1.0))?;
            let y = g.dense(x, w, b)?;
            (project(g, y, rng)?, vec![x, w, b])
        }
        "matmul" => {
            let a = leaf(g, &[3, 4], &uniform(rng, 12, 0.2, 1.0))?;
            let b = leaf(g, &[4, 2], &uniform(rng, 8, 0.2, 1.0))?;
            let y = g.matmul(a, b)?;
            (project(g, y, rng)?, vec![a, b])
        }
        "relu" => {
            let x = leaf(g, &[2, 3, 4], &signed(rng, 24, 0.3, 1.5))?;
            let y = g.relu(x)?;
            (project(g, y, rng)?, vec![x])
        }
        "max_pool2d" => {
            let x = leaf(g, &[1, 2, 4, 4], &spaced(rng, 32, 0.25))?;
            let y = g.max_pool2d(x, 2)?;
            (project(g, y, rng)?, vec![x])
        }
        "avg_pool2d_global" => {
            let x = leaf(g, &[2, 3, 3, 3], &signed(rng, 54, 0.1, 1.0))?;
            let y = g.global_avg_pool(x)?;
            (project(g, y, rng)?, vec![x])
        }
        "softmax" => {
            let x = leaf(g, &[3, 4], &uniform(rng, 12, -1.0, 1.0))?;
            let y = g.softmax(x)?;
            let mut onehot = vec![0.0; 12];
            for row in 0..3 {
                onehot[row * 4 + rng.gen_range(0..4)] = 1.0;
            }
            let m = konst(g, &[3, 4], &onehot)?;
            let p = g.mul(y, m)?;
            (g.sum(p)?, vec![x])
        }
        "elementwise_mul" | "elementwise_sub" | "elementwise_add" | "elementwise_div" => {
            let bshape: &[usize] = [&[2usize, 3][..], &[1, 3], &[2, 1]][rng.gen_range(0..3)];
            let bn = bshape.iter().product();
            let a = leaf(g, &[2, 3], &uniform(rng, 6, 0.5, 1.5))?;
            let (blo, bhi) = if name == "elementwise_div" { (1.0, 2.0) } else { (0.5, 1.5) };
            let b = leaf(g, bshape, &uniform(rng, bn, blo, bhi))?;
            let y = match name {
                "elementwise_mul" => g.mul(a, b)?,
                "elementwise_sub" => g.sub(a, b)?,
                "elementwise_add" => g.add(a, b)?,
                _ => g.div(a, b)?,
            };
            (project(g, y, rng)?, vec![a, b])
        }
        "square" => {
            let x = leaf(g, &[3, 4], &signed(rng, 12, 0.3, 1.5))?;
            let y = g.square(x)?;
            (project(g, y, rng)?, vec![x])
        }
        "sum" => {
            let x = leaf(g, &[3, 4], &signed(rng, 12, 0.1, 1.0))?;
            (g.sum(x)?, vec![x])
        }
        "sum_axis" => {
            let x = leaf(g, &[3, 4, 2], &signed(rng, 24, 0.1, 1.0))?;
            let y = g.sum_axis(x, rng.gen_range(0..3))?;
            (project(g, y, rng)?, vec![x])
        }
        "max_axis" => {
            let x = leaf(g, &[3, 4], &spaced(rng, 12, 0.25))?;
            let y = g.max_axis(x, rng.gen_range(0..2))?;
            (project(g, y, rng)?, vec![x])
        }
        "mean" => {
            let x = leaf(g, &[3, 4], &signed(rng, 12, 0.1, 1.0))?;
            (g.mean(x)?, vec![x])
        }
        "sqrt" => {
            let x = leaf(g, &[3, 4], &uniform(rng, 12, 0.5, 2.0))?;
            let y = g.sqrt(x)?;
            (project(g, y, rng)?, vec![x])
        }
        "log" => {
            let x = leaf(g, &[3, 4], &uniform(rng, 12, 0.5, 2.0))?;
            let y = g.log(x, 1e-12)?;
            (project(g, y, rng)?, vec![x])
        }
        "scale" => {
            let x = leaf(g, &[3, 4], &signed(rng, 12, 0.1, 1.0))?;
            let y = g.scale(x, signed(rng, 1, 0.5, 2.0)[0])?;
            (project(g, y, rng)?, vec![x])
        }
        "add_scalar" => {
            let x = leaf(g, &[3, 4], &signed(rng, 12, 0.1, 1.0))?;
            let y = g.add_scalar(x, signed(rng, 1, 0.1, 2.0)[0])?;
            (project(g, y, rng)?, vec![x])
        }
        "dropout" => {
            let x = leaf(g, &[4, 5], &signed(rng, 20, 0.1, 1.0))?;
            let y = g.dropout(x, 0.5)?;
            (project(g, y, rng)?, vec![x])
        }
        "upsample_bilinear" => {
            let (oh, ow) = [(6, 6), (5, 7), (3, 3), (8, 4)][rng.gen_range(0..4)];
            let x = leaf(g, &[1, 2, 3, 3], &signed(rng, 18, 0.1, 1.0))?;
            let y = g.upsample_bilinear(x, oh, ow)?;
            (project(g, y, rng)?, vec![x])
        }
        "max_with_scalar" => {
            let s = rng.gen_range(-1.0..1.0);
            let data: Vec<f64> = signed(rng, 12, 0.3, 1.5).into_iter().map(|d| s + d).collect();
            let x = leaf(g, &[3, 4], &data)?;
            let y = g.max_with_scalar(x, s)?;
            (project(g, y, rng)?, vec![x])
        }
        "reshape" => {
            let x = leaf(g, &[2, 6], &signed(rng, 12, 0.1, 1.0))?;
            let y = g.reshape(x, [3, 4])?;
            (project(g, y, rng)?, vec![x])
        }
        "classifier_ce_l2" | "classifier_exbl" => {
            let model = tiny_model(rng, 0.5)?;
            let n = 2;
            let pixels = uniform32(rng, n * 36, 0.0, 1.0);
            let x = leaf(g, &[n, 1, 6, 6], &pixels)?;
            let fwd = model.forward(
                g,
                x,
                ForwardOptions {
                    grad_all_params: true,
                    ..Default::default()
                },
            )?;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let ce = cross_entropy(g, fwd.probs, &labels)?;
            let l2 = l2_penalty(g, &fwd.params, 1e-2)?;
            let w = LossWeights::default();
            let expl = if name == "classifier_exbl" {
                let exemplar = |rng: &mut ChaCha8Rng| {
                    Tensor::from_f64([1, 6, 6], &uniform32(rng, 36, 0.0, 0.5)).expect("fixed shape")
                };
                let pair = ExemplarPair {
                    c_good: exemplar(rng),
                    c_bad: exemplar(rng),
                    good_source_id: 0,
                    bad_source_id: 1,
                };
                let xt = Tensor::from_f64([n, 1, 6, 6], &pixels)?;
                exbl_triplet_graph(g, &model, &fwd, x, &xt, &pair, 1.0)?
            } else {
                g.constant(Tensor::scalar(F::zero()))
            };
            let loss = total_loss(g, ce, expl, l2, &w)?;
            (loss, fwd.params)
        }
        other => unreachable!("no gradient case {other}"),
    })
}

fn trial_rng(trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9d_0000 + trial)
}

fn self_checked<F: Real>(case: &Case, eps: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut g = Graph::<F>::training(trial);
        let (loss, wrt) = build(case.name, &mut g, &mut trial_rng(trial))?;
        for v in wrt {
            worst = worst.max(finite_diff_check(&mut g, loss, v, eps)?);
        }
    }
    Ok(worst)
}

/// Central difference of `loss` along element `k` of `wrt` with step `h`,
/// and whether both ends take the same branches as `centre`.
fn stencil(
    g: &mut Graph<f64>,
    loss: Var,
    wrt: Var,
    probe: &mut [f64],
    k: usize,
    h: f64,
    centre: &[usize],
) -> Result<(f64, bool)> {
    let x = probe[k];
    let mut ends = [0.0f64; 2];
    let mut stable = true;
    for (end, sign) in ends.iter_mut().zip([1.0, -1.0]) {
        probe[k] = x + sign * h;
        g.set_leaf_data(wrt, probe)?;
        g.recompute()?;
        *end = g.value(loss).item()?;
        stable &= g.branches() == centre;
    }
    probe[k] = x;
    Ok(((ends[0] - ends[1]) / (2.0 * h), stable))
}

/// Ridders' extrapolation of central differences, restricted to stencils
/// that stay on the smooth piece containing the evaluation point. The
/// starting step is cut tenfold until its stencil is stable. Returns the
/// derivatives and how many starting steps were cut.
fn piecewise_numeric(g: &mut Graph<f64>, loss: Var, wrt: Var, eps: f64) -> Result<(Vec<f64>, usize)> {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 10;
    let centre = g.branches();
    let original = g.value(wrt).data().to_vec();
    let mut probe = original.clone();
    let mut out = Vec::with_capacity(original.len());
    let mut shortened = 0;
    for k in 0..original.len() {
        let mut h = eps;
        let first = loop {
            let (d, stable) = stencil(g, loss, wrt, &mut probe, k, h, &centre)?;
            if stable || h < MIN_STEP {
                break d;
            }
            h /= 10.0;
            shortened += 1;
        };
        let mut table = vec![vec![0.0f64; LEVELS]; LEVELS];
        table[0][0] = first;
        let mut best = first;
        let mut err = f64::INFINITY;
        for i in 1..LEVELS {
            h /= SHRINK;
            let (d, stable) = stencil(g, loss, wrt, &mut probe, k, h, &centre)?;
            if !stable {
                break;
            }
            table[0][i] = d;
            let mut fac = SHRINK * SHRINK;
            for j in 1..=i {
                table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
                fac *= SHRINK * SHRINK;
                let e = (table[j][i] - table[j - 1][i])
                    .abs()
                    .max((table[j][i] - table[j - 1][i - 1]).abs());
                if e <= err {
                    err = e;
                    best = table[j][i];
                }
            }
            if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
                break;
            }
        }
        out.push(best);
    }
    g.set_leaf_data(wrt, &original)?;
    g.recompute()?;
    Ok((out, shortened))
}

/// Worst relative error of a network case, with the 64-bit reference taken
/// from [`piecewise_numeric`], against analytic gradients in precision `F`.
fn network_checked<F: Real>(case: &Case, shortened: &mut usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut ga = Graph::<F>::training(trial);
        let (loss_a, wrt_a) = build(case.name, &mut ga, &mut trial_rng(trial))?;
        let mut g64 = Graph::<f64>::training(trial);
        let (loss64, wrt64) = build(case.name, &mut g64, &mut trial_rng(trial))?;
        ga.backward(loss_a)?;
        for (va, v64) in wrt_a.into_iter().zip(wrt64) {
            let (numeric, s) = piecewise_numeric(&mut g64, loss64, v64, case.eps64)?;
            *shortened += s;
            let analytic: Vec<f64> = match ga.grad(va) {
                Some(d) => d.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; numeric.len()],
            };
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
    }
    Ok(worst)
}

pub struct CaseErrors {
    pub f32: f64,
    pub f64: f64,
    /// Stencils shortened to stay on one smooth piece (network cases).
    pub shortened: usize,
}

/// Worst relative error of one case over all trials and leaves.
pub fn worst_errors(case: &Case) -> Result<CaseErrors> {
    if case.reference64 {
        let mut shortened = 0;
        let e32 = network_checked::<f32>(case, &mut shortened)?;
        let e64 = network_checked::<f64>(case, &mut shortened)?;
        Ok(CaseErrors {
            f32: e32,
            f64: e64,
            shortened,
        })
    } else {
        Ok(CaseErrors {
            f32: self_checked::<f32>(case, case.eps32)?,
            f64: self_checked::<f64>(case, case.eps64)?,
            shortened: 0,
        })
    }
}
