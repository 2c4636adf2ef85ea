//! Naive reference implementations shared by the integration tests. They
//! trade speed for being easy to check by eye.
#![allow(dead_code)]

use camo_core::metrics::GrayMap;
use camo_core::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = f64::EPSILON;

// ---------------------------------------------------------------- tensors

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros([m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(&[i, t]) * b.get(&[t, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Direct convolution with zero padding `k / 2`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, depthwise: bool) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let ow = (wd + 2 * (k / 2) - k) / stride + 1;
    let mut out = Tensor::zeros([c_out, oh, ow]);
    for o in 0..c_out {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.get(&[o]);
                let inputs: Vec<usize> = if depthwise { vec![o] } else { (0..c_in).collect() };
                for (wi, &ci) in inputs.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride) as isize + ky as isize - pad;
                            let ix = (xx * stride) as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.get(&[o, wi, ky, kx]) * x.get(&[ci, iy as usize, ix as usize]);
                        }
                    }
                }
                out.set(&[o, y, xx], s);
            }
        }
    }
    out
}

/// Half-pixel-centre bilinear sampling with edge clamping.
pub fn bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Tensor::zeros([c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = src(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, fx) = src(xx, w, ow);
                let v = (1.0 - fy) * ((1.0 - fx) * x.get(&[ch, y0, x0]) + fx * x.get(&[ch, y0, x1]))
                    + fy * ((1.0 - fx) * x.get(&[ch, y1, x0]) + fx * x.get(&[ch, y1, x1]));
                out.set(&[ch, y, xx], v);
            }
        }
    }
    out
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros([r, c]);
    for i in 0..r {
        let m = (0..c).map(|j| x.get(&[i, j])).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|j| (x.get(&[i, j]) - m).exp()).sum();
        for j in 0..c {
            out.set(&[i, j], (x.get(&[i, j]) - m).exp() / z);
        }
    }
    out
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

// ---------------------------------------------------------------- metrics

fn mask(gt: &GrayMap) -> Vec<bool> {
    gt.values().iter().map(|&v| v >= 0.5).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let g = mask(gt);
    let n = g.len() as f64;
    pred.values()
        .iter()
        .zip(&g)
        .map(|(&p, &t)| (p - if t { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / n
}

/// Sample standard deviation (`n − 1`); 0 for a single value.
fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object(values: &[f64]) -> f64 {
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std(values) + EPS)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let sx = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sy = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure written out step by step from its textbook form:
/// `0.5·S_object + 0.5·S_region` with a centroid split into four blocks.
pub fn s_measure(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let g = mask(gt);
    let p = pred.values();
    let gf: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let y = mean(&gf);
    if y == 0.0 {
        return 1.0 - mean(p);
    }
    if y == 1.0 {
        return mean(p);
    }
    let fg: Vec<f64> = (0..g.len()).filter(|&i| g[i]).map(|i| p[i]).collect();
    let bg: Vec<f64> = (0..g.len()).filter(|&i| !g[i]).map(|i| 1.0 - p[i]).collect();
    let s_obj = y * object(&fg) + (1.0 - y) * object(&bg);

    // 1-based centroid, as in the column/row weighted sums
    let total: f64 = gf.iter().sum();
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 0..h {
        for c in 0..w {
            sx += gf[r * w + c] * (c + 1) as f64;
            sy += gf[r * w + c] * (r + 1) as f64;
        }
    }
    let cx = (sx / total).round() as usize;
    let cy = (sy / total).round() as usize;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                a.push(p[r * w + c]);
                b.push(gf[r * w + c]);
            }
        }
        (a, b)
    };
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let (p1, g1) = block(0, cy, 0, cx);
    let (p2, g2) = block(0, cy, cx, w);
    let (p3, g3) = block(cy, h, 0, cx);
    let (p4, g4) = block(cy, h, cx, w);
    let s_reg = w1 * ssim(&p1, &g1) + w2 * ssim(&p2, &g2) + w3 * ssim(&p3, &g3) + w4 * ssim(&p4, &g4);
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}

/// Brute-force nearest foreground pixel: every pair is compared, first in
/// raster order wins a tie.
pub fn nearest_foreground(g: &[bool], w: usize) -> Vec<(f64, usize)> {
    let fg: Vec<usize> = (0..g.len()).filter(|&i| g[i]).collect();
    (0..g.len())
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let mut best = (i64::MAX, 0);
            for &j in &fg {
                let (yy, xx) = ((j / w) as i64, (j % w) as i64);
                let d = (y - yy).pow(2) + (x - xx).pow(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            ((best.0 as f64).sqrt(), best.1)
        })
        .collect()
}

fn gauss7() -> Vec<f64> {
    let mut k = vec![0.0; 49];
    for y in 0..7 {
        for x in 0..7 {
            let (dy, dx) = (y as f64 - 3.0, x as f64 - 3.0);
            k[y * 7 + x] = (-(dx * dx + dy * dy) / 50.0).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Weighted error map of the weighted F-measure.
fn weighted_error(pred: &GrayMap, gt: &GrayMap) -> (Vec<f64>, Vec<bool>) {
    let (h, w) = (gt.height(), gt.width());
    let g = mask(gt);
    let p = pred.values();
    let e: Vec<f64> = (0..g.len())
        .map(|i| (p[i] - if g[i] { 1.0 } else { 0.0 }).abs())
        .collect();
    let near = nearest_foreground(&g, w);
    let et: Vec<f64> = (0..g.len()).map(|i| if g[i] { e[i] } else { e[near[i].1] }).collect();
    let k = gauss7();
    let mut ea = vec![0.0; g.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = 0.0;
            for ky in 0..7i64 {
                for kx in 0..7i64 {
                    let (yy, xx) = (y + ky - 3, x + kx - 3);
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                        s += k[(ky * 7 + kx) as usize] * et[yy as usize * w + xx as usize];
                    }
                }
            }
            ea[y as usize * w + x as usize] = s;
        }
    }
    let ew = (0..g.len())
        .map(|i| {
            if g[i] {
                if ea[i] < e[i] {
                    ea[i]
                } else {
                    e[i]
                }
            } else {
                e[i] * (2.0 - ((0.5f64).ln() / 5.0 * near[i].0).exp())
            }
        })
        .collect();
    (ew, g)
}

fn wf_from(ew: &[f64], g: &[bool], keep: &[bool]) -> Option<f64> {
    let fg: Vec<f64> = (0..g.len()).filter(|&i| keep[i] && g[i]).map(|i| ew[i]).collect();
    if fg.is_empty() {
        return None;
    }
    let bg_sum: f64 = (0..g.len()).filter(|&i| keep[i] && !g[i]).map(|i| ew[i]).sum();
    let tp = fg.len() as f64 - fg.iter().sum::<f64>();
    let r = 1.0 - mean(&fg);
    let p = tp / (EPS + tp + bg_sum);
    Some(2.0 * r * p / (EPS + r + p))
}

pub fn weighted_f(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let g = mask(gt);
    if !g.iter().any(|&b| b) {
        return if pred.values().iter().all(|&v| v == 0.0) {
            1.0
        } else {
            0.0
        };
    }
    let (ew, g) = weighted_error(pred, gt);
    wf_from(&ew, &g, &vec![true; g.len()]).unwrap()
}

/// Adaptive E-measure evaluated pixel by pixel.
pub fn e_measure(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let g = mask(gt);
    let p = pred.values();
    let n = g.len() as f64;
    let t = (2.0 * mean(p)).min(1.0);
    let fm: Vec<f64> = p.iter().map(|&v| if v >= t && v > 0.0 { 1.0 } else { 0.0 }).collect();
    let gf: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let enhanced: Vec<f64> = if gf.iter().all(|&v| v == 0.0) {
        fm.iter().map(|v| 1.0 - v).collect()
    } else if gf.iter().all(|&v| v == 1.0) {
        fm.clone()
    } else {
        let (mf, mg) = (mean(&fm), mean(&gf));
        fm.iter()
            .zip(&gf)
            .map(|(a, b)| {
                let (da, db) = (a - mf, b - mg);
                let align = 2.0 * da * db / (da * da + db * db + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n
}

/// `(precision, recall, fbeta)` at each of the 256 thresholds.
pub fn curves(pred: &GrayMap, gt: &GrayMap) -> Vec<(f64, f64, f64)> {
    let g = mask(gt);
    let q: Vec<u32> = pred
        .values()
        .iter()
        .map(|&v| (v * 255.0 + 0.5).floor() as u32)
        .collect();
    let pos = g.iter().filter(|&&b| b).count();
    (0..256u32)
        .map(|k| {
            let mut tp = 0;
            let mut fp = 0;
            for i in 0..g.len() {
                if q[i] > k {
                    if g[i] {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let p = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let r = tp as f64 / pos.max(1) as f64;
            let f = if 0.3 * p + r == 0.0 {
                0.0
            } else {
                1.3 * p * r / (0.3 * p + r)
            };
            (p, r, f)
        })
        .collect()
}

/// Square element of width `k` covering offsets `-(k/2) ..= k - 1 - k/2`.
fn element(k: usize) -> std::ops::RangeInclusive<i64> {
    let lo = -((k / 2) as i64);
    lo..=lo + k as i64 - 1
}

pub fn dilate(m: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let mut out = vec![false; m.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut hit = false;
            for dy in element(k) {
                for dx in element(k) {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && m[yy as usize * w + xx as usize] {
                        hit = true;
                    }
                }
            }
            out[y as usize * w + x as usize] = hit;
        }
    }
    out
}

/// Outside the image counts as background.
pub fn erode(m: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let mut out = vec![false; m.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut all = true;
            for dy in element(k) {
                for dx in element(k) {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64;
                    if !inside || !m[yy as usize * w + xx as usize] {
                        all = false;
                    }
                }
            }
            out[y as usize * w + x as usize] = all;
        }
    }
    out
}

pub fn border_region(gt: &GrayMap, k: usize) -> Vec<bool> {
    let (h, w) = (gt.height(), gt.width());
    let g = mask(gt);
    let er = erode(&g, h, w, 3);
    let edge: Vec<bool> = g.iter().zip(&er).map(|(a, b)| a != b).collect();
    dilate(&edge, h, w, k)
}

/// `(wF, MAE, empty)` over the border band.
pub fn border_scores(pred: &GrayMap, gt: &GrayMap, k: usize) -> (f64, f64, bool) {
    let band = border_region(gt, k);
    let g = mask(gt);
    let n = band.iter().filter(|&&b| b).count();
    if n == 0 || !g.iter().any(|&b| b) {
        return (1.0, 0.0, true);
    }
    let (ew, g) = weighted_error(pred, gt);
    let Some(wf) = wf_from(&ew, &g, &band) else {
        return (1.0, 0.0, true);
    };
    let p = pred.values();
    let err: f64 = (0..g.len())
        .filter(|&i| band[i])
        .map(|i| (p[i] - if g[i] { 1.0 } else { 0.0 }).abs())
        .sum();
    (wf, err / n as f64, false)
}

// ---------------------------------------------------------------- data

/// Random prediction/ground-truth pairs: rectangles and blobs for ground
/// truth, noisy or smooth 8-bit predictions, with a few empty and full maps.
pub fn random_pairs(count: usize, h: usize, w: usize, seed: u64) -> Vec<(GrayMap, GrayMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let gt: Vec<f64> = match i % 10 {
                0 => vec![0.0; h * w],
                1 => vec![1.0; h * w],
                2..=5 => {
                    let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                    let (y1, x1) = (rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1);
                    (0..h * w)
                        .map(|j| {
                            let (y, x) = (j / w, j % w);
                            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                }
                _ => {
                    let density = rng.gen_range(0.1..0.7);
                    (0..h * w)
                        .map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
                        .collect()
                }
            };
            let pred: Vec<f64> = match i % 4 {
                0 => (0..h * w).map(|_| f64::from(rng.gen::<u8>()) / 255.0).collect(),
                1 => gt
                    .iter()
                    .map(|&g| {
                        let v = 0.7 * g + 0.3 * rng.gen::<f64>();
                        (v * 255.0).round() / 255.0
                    })
                    .collect(),
                2 => {
                    let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
                    (0..h * w)
                        .map(|j| (a * (j / w) as f64 / h as f64 + b * (j % w) as f64 / w as f64) / 2.0)
                        .collect()
                }
                _ => (0..h * w)
                    .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen::<f64>() })
                    .collect(),
            };
            (GrayMap::new(h, w, pred).unwrap(), GrayMap::new(h, w, gt).unwrap())
        })
        .collect()
}

/// A `size × size` map holding an axis-aligned rectangle.
pub fn rectangle(size: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> GrayMap {
    let v = (0..size * size)
        .map(|j| {
            let (y, x) = (j / size, j % size);
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    GrayMap::new(size, size, v).unwrap()
}

// ---------------------------------------------------------------- attention

use camo_core::attention::TaBranch;
use camo_core::params::{Conv, ParamStore};

fn apply(store: &ParamStore, conv: &Conv, x: &Tensor) -> Tensor {
    conv2d(
        x,
        store.get(conv.weight),
        store.get(conv.bias),
        conv.opts.stride,
        conv.opts.depthwise,
    )
}

/// `(Q, K, V)` of a branch as `[C, H, W]` tensors, before any mask.
pub fn qkv(store: &ParamStore, b: &TaBranch, x: &Tensor) -> [Tensor; 3] {
    [(&b.q_proj, &b.q_dw), (&b.k_proj, &b.k_dw), (&b.v_proj, &b.v_dw)]
        .map(|(p, d)| apply(store, d, &apply(store, p, x)))
}

/// One branch evaluated head by head with plain loops. `mask` multiplies
/// `Q` and `K`.
pub fn ta_oracle(store: &ParamStore, b: &TaBranch, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let [mut q, mut k, v] = qkv(store, b, x);
    if let Some(m) = mask {
        for t in [&mut q, &mut k] {
            for c in 0..t.shape()[0] {
                for p in 0..hw {
                    let i = c * hw + p;
                    t.data_mut()[i] *= m.data()[p];
                }
            }
        }
    }
    let alpha = store.get(b.log_alpha);
    let d = b.head_dim;
    let mut out = Tensor::zeros([b.width(), h, w]);
    for head in 0..b.heads {
        let rows = |t: &Tensor| Tensor::new([d, hw], t.data()[head * d * hw..(head + 1) * d * hw].to_vec()).unwrap();
        let (qh, kh, vh) = (rows(&q), rows(&k), rows(&v));
        let mut kt = Tensor::zeros([hw, d]);
        for i in 0..d {
            for p in 0..hw {
                kt.set(&[p, i], kh.get(&[i, p]));
            }
        }
        let logits = matmul(&qh, &kt).map(|s| s / alpha.data()[head].exp());
        let a = softmax_rows(&logits);
        // out[c, p] = Σ_j V[j, p] · A[j, c]
        for c in 0..d {
            for p in 0..hw {
                let s: f64 = (0..d).map(|j| vh.get(&[j, p]) * a.get(&[j, c])).sum();
                out.data_mut()[(head * d + c) * hw + p] = s;
            }
        }
    }
    out
}
