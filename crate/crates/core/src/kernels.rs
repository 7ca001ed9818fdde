//! Raw numeric kernels behind the graph operations. Everything here works on
//! flat row-major slices; shape checking happens in `graph`.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfolds one image (c×h×w) into a (c·kh·kw) × (oh·ow) column matrix.
fn im2col<F: Real>(g: &ConvGeom, img: &[F], cols: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c {
        let chan = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of `im2col`, accumulating into `img`.
fn col2im<F: Real>(g: &ConvGeom, cols: &[F], img: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = ci * g.h * g.w + iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Real>(g: &ConvGeom, x: &[F], w: &[F], b: &[F]) -> Vec<F> {
    let plane = g.out_h() * g.out_w();
    let rows = g.rows();
    let mut out = vec![F::zero(); g.n * g.o * plane];
    let mut cols = vec![F::zero(); rows * plane];
    for n in 0..g.n {
        im2col(g, &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], &mut cols);
        let y = &mut out[n * g.o * plane..(n + 1) * g.o * plane];
        for o in 0..g.o {
            let yo = &mut y[o * plane..(o + 1) * plane];
            yo.fill(b[o]);
            let wo = &w[o * rows..(o + 1) * rows];
            for (r, &wv) in wo.iter().enumerate() {
                let cr = &cols[r * plane..(r + 1) * plane];
                for (acc, &cv) in yo.iter_mut().zip(cr) {
                    *acc += wv * cv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Option<Vec<F>>,
    pub db: Option<Vec<F>>,
}

pub(crate) fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    want: [bool; 3],
) -> ConvGrads<F> {
    let plane = g.out_h() * g.out_w();
    let rows = g.rows();
    let img = g.c * g.h * g.w;
    let mut dx = want[0].then(|| vec![F::zero(); g.n * img]);
    let mut dw = want[1].then(|| vec![F::zero(); g.o * rows]);
    let mut db = want[2].then(|| vec![F::zero(); g.o]);
    let mut cols = vec![F::zero(); rows * plane];
    let mut dcols = vec![F::zero(); if want[0] { rows * plane } else { 0 }];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.o * plane..(n + 1) * g.o * plane];
        if let Some(db) = db.as_mut() {
            for o in 0..g.o {
                db[o] += dyn_[o * plane..(o + 1) * plane].iter().copied().sum::<F>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * img..(n + 1) * img], &mut cols);
            for o in 0..g.o {
                let dyo = &dyn_[o * plane..(o + 1) * plane];
                for r in 0..rows {
                    dw[o * rows + r] += dot(dyo, &cols[r * plane..(r + 1) * plane]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(F::zero());
            for o in 0..g.o {
                let dyo = &dyn_[o * plane..(o + 1) * plane];
                for r in 0..rows {
                    let wv = w[o * rows + r];
                    let dc = &mut dcols[r * plane..(r + 1) * plane];
                    for (d, &a) in dc.iter_mut().zip(dyo) {
                        *d += wv * a;
                    }
                }
            }
            col2im(g, &dcols, &mut dx[n * img..(n + 1) * img]);
        }
    }
    ConvGrads { dx, dw, db }
}

const LANES: usize = 8;

/// Dot product with a fixed lane-wise summation order, so the compiler can
/// vectorize it without changing results between builds.
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let mut acc = [F::zero(); LANES];
    let split = n - n % LANES;
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = F::zero();
    for k in split..n {
        tail += a[k] * b[k];
    }
    let mut total = F::zero();
    for v in acc {
        total += v;
    }
    total + tail
}

/// `a` is m×k, `b` is k×n; returns m×n.
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a` is m×k, `b` is n×k; returns a·bᵀ (m×n).
pub(crate) fn matmul_bt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a` is k×m, `b` is k×n; returns aᵀ·b (m×n).
pub(crate) fn matmul_at<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Source sampling plan for one output axis of a half-pixel bilinear resize
/// (align-corners false): (lower index, upper index, weight of upper).
pub(crate) fn bilinear_plan(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<F: Real>(
    x: &[F],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<F> {
    let ys = bilinear_plan(h, oh);
    let xs = bilinear_plan(w, ow);
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = F::of(ly);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = F::of(lx);
                let top = src[y0 * w + x0] * (F::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (F::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (F::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<F: Real>(
    dy: &[F],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<F> {
    let ys = bilinear_plan(h, oh);
    let xs = bilinear_plan(w, ow);
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = F::of(ly);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = F::of(lx);
                let g = src[oy * ow + ox];
                let gt = g * (F::one() - ly);
                let gb = g * ly;
                dst[y0 * w + x0] += gt * (F::one() - lx);
                dst[y0 * w + x1] += gt * lx;
                dst[y1 * w + x0] += gb * (F::one() - lx);
                dst[y1 * w + x1] += gb * lx;
            }
        }
    }
    dx
}

/// Non-overlapping max pooling; returns values and the flat input index of each winner.
pub(crate) fn max_pool_forward<F: Real>(
    x: &[F],
    planes: usize,
    (h, w): (usize, usize),
    size: usize,
) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}
