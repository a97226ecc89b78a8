// SPDX-License-Identifier: Apache-2.0

//! Slow, literal loop transcriptions used as independent oracles, plus
//! random-instance generators shared by the integration tests.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradcheck;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sfseg::data::Mask;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// (vector, class) pairs.
pub type Cent = (Vec<f64>, usize);

/// Contrastive loss: per anchor, mean over positives of
/// −log(e^{s+} / (e^{s+} + Σ e^{s−})); mean over anchors that have positives.
pub fn fcl_loss(anchors: &[Cent], bank: &[Cent], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (v, k) in anchors {
        let u = unit(v);
        let pos: Vec<Vec<f64>> = bank.iter().filter(|(_, c)| c == k).map(|(b, _)| unit(b)).collect();
        let neg: Vec<Vec<f64>> = bank.iter().filter(|(_, c)| c != k).map(|(b, _)| unit(b)).collect();
        if pos.is_empty() {
            continue;
        }
        let mut neg_sum = 0.0;
        for n in &neg {
            neg_sum += (dot(&u, n) / tau).exp();
        }
        let mut l = 0.0;
        for p in &pos {
            let e = (dot(&u, p) / tau).exp();
            l += -(e / (e + neg_sum)).ln();
        }
        total += l / pos.len() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Pixel-major fused label.
pub fn fuse(current: &[f64], previous: &[f64], c: usize, alpha: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for px in 0..current.len() / c {
        let a = &current[px * c..(px + 1) * c];
        let b = &previous[px * c..(px + 1) * c];
        let mut s = 0.0;
        for i in 0..c {
            s += a[i] * a[i] + b[i] * b[i];
        }
        let t = if s == 0.0 { 1.0 } else { s.sqrt() };
        let sa = softmax(&a.iter().map(|x| x / t).collect::<Vec<_>>());
        let sb = softmax(&b.iter().map(|x| x / t).collect::<Vec<_>>());
        for i in 0..c {
            out.push(alpha * sa[i] + (1.0 - alpha) * sb[i]);
        }
    }
    out
}

pub fn soft_ce(p: &[f64], y: &[f64], c: usize) -> f64 {
    let n = p.len() / c;
    let mut s = 0.0;
    for i in 0..p.len() {
        s -= y[i] * p[i].max(1e-8).ln();
    }
    s / n as f64
}

/// Region centroids: returns (class, vector) for classes with ≥ min pixels.
pub fn centroids(feat: &[f64], k: usize, probs: &[f64], c: usize, min: usize) -> Vec<(usize, Vec<f64>)> {
    let n = probs.len() / c;
    let mut out = Vec::new();
    for class in 0..c {
        let mut sum = vec![0.0; k];
        let mut count = 0;
        for i in 0..n {
            let p = &probs[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if p[j] > p[best] {
                    best = j;
                }
            }
            if best != class {
                continue;
            }
            let w = 1.0 - entropy(p) / (c as f64).ln();
            for d in 0..k {
                sum[d] += feat[i * k + d] * w;
            }
            count += 1;
        }
        if count > 0 && count >= min {
            out.push((class, sum.iter().map(|s| s / count as f64).collect()));
        }
    }
    out
}

pub fn dice_iou(pred: &[f64], gt: &[u8]) -> (f64, f64) {
    let (mut i, mut a, mut b) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let pa = if *p >= 0.5 { 1.0 } else { 0.0 };
        let gb = *g as f64;
        i += pa * gb;
        a += pa;
        b += gb;
    }
    if a + b == 0.0 {
        return (1.0, 1.0);
    }
    (2.0 * i / (a + b), i / (a + b - i))
}

/// Weighted F-measure, transcribed step by step from the reference MATLAB
/// routine (bwdist nearest-foreground propagation, 7×7 σ=5 Gaussian with zero
/// padding, exponential distance decay).
pub fn weighted_f(pred: &[f64], gt: &[u8], h: usize, w: usize) -> Option<f64> {
    let eps = f64::EPSILON;
    let n = h * w;
    if gt.iter().all(|&g| g == 0) {
        return None;
    }
    let e: Vec<f64> = (0..n).map(|i| (pred[i] - gt[i] as f64).abs()).collect();
    // Nearest foreground by exhaustive search; ties go to the lowest index.
    let mut dist = vec![0.0; n];
    let mut et = e.clone();
    for i in 0..n {
        if gt[i] == 1 {
            continue;
        }
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        let mut best = (i64::MAX, 0);
        for j in 0..n {
            if gt[j] == 1 {
                let (yj, xj) = ((j / w) as i64, (j % w) as i64);
                let d2 = (y - yj).pow(2) + (x - xj).pow(2);
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
        }
        dist[i] = (best.0 as f64).sqrt();
        et[i] = e[best.1];
    }
    // fspecial('gaussian', 7, 5)
    let mut kern = [[0.0; 7]; 7];
    let mut ks = 0.0;
    for a in 0..7 {
        for b in 0..7 {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            kern[a][b] = (-(dy * dy + dx * dx) / (2.0 * 25.0)).exp();
            ks += kern[a][b];
        }
    }
    let mut ea = vec![0.0; n];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for a in 0..7i64 {
                for b in 0..7i64 {
                    let (yy, xx) = (y + a - 3, x + b - 3);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += kern[a as usize][b as usize] / ks * et[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            ea[(y * w as i64 + x) as usize] = acc;
        }
    }
    let mut min_e_ea = e.clone();
    for i in 0..n {
        if gt[i] == 1 && ea[i] < e[i] {
            min_e_ea[i] = ea[i];
        }
    }
    let mut b = vec![1.0; n];
    for i in 0..n {
        if gt[i] == 0 {
            b[i] = 2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp();
        }
    }
    let ew: Vec<f64> = (0..n).map(|i| min_e_ea[i] * b[i]).collect();
    let n_fg = gt.iter().filter(|&&g| g == 1).count() as f64;
    let mut ew_fg = 0.0;
    let mut ew_bg = 0.0;
    for i in 0..n {
        if gt[i] == 1 {
            ew_fg += ew[i];
        } else {
            ew_bg += ew[i];
        }
    }
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let p = tpw / (eps + tpw + ew_bg);
    Some(2.0 * r * p / (eps + r + p))
}

fn object(values: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sd + eps)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..p.len() {
        sx += (p[i] - x).powi(2);
        sy += (g[i] - y).powi(2);
        sxy += (p[i] - x) * (g[i] - y);
    }
    sx /= n - 1.0 + eps;
    sy /= n - 1.0 + eps;
    sxy /= n - 1.0 + eps;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + eps)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with α = 0.5.
pub fn s_measure(pred: &[f64], gt: &[u8], h: usize, w: usize) -> f64 {
    let n = (h * w) as f64;
    let y = gt.iter().map(|&g| g as f64).sum::<f64>() / n;
    let x = pred.iter().sum::<f64>() / n;
    let q = if y == 0.0 {
        1.0 - x
    } else if y == 1.0 {
        x
    } else {
        let fg: Vec<f64> = (0..h * w).filter(|&i| gt[i] == 1).map(|i| pred[i]).collect();
        let bg: Vec<f64> = (0..h * w).filter(|&i| gt[i] == 0).map(|i| 1.0 - pred[i]).collect();
        let s_obj = y * object(&fg) + (1.0 - y) * object(&bg);
        // centroid, 1-based
        let total: f64 = gt.iter().map(|&g| g as f64).sum();
        let mut cx = 0.0;
        let mut cy = 0.0;
        for r in 0..h {
            for c in 0..w {
                if gt[r * w + c] == 1 {
                    cx += (c + 1) as f64;
                    cy += (r + 1) as f64;
                }
            }
        }
        let bx = (cx / total).round() as usize;
        let by = (cy / total).round() as usize;
        let mut s_reg = 0.0;
        for (r0, r1, c0, c1) in [(0, by, 0, bx), (0, by, bx, w), (by, h, 0, bx), (by, h, bx, w)] {
            let area = (r1 - r0) * (c1 - c0);
            if area == 0 {
                continue;
            }
            let mut p = Vec::new();
            let mut g = Vec::new();
            for r in r0..r1 {
                for c in c0..c1 {
                    p.push(pred[r * w + c]);
                    g.push(gt[r * w + c] as f64);
                }
            }
            s_reg += area as f64 / n * ssim(&p, &g);
        }
        0.5 * s_obj + 0.5 * s_reg
    };
    q.max(0.0)
}

/// Max over 256 thresholds of the enhanced-alignment score (mean over N pixels).
pub fn e_measure_max(pred: &[f64], gt: &[u8]) -> f64 {
    let eps = f64::EPSILON;
    let n = pred.len();
    let g_sum: usize = gt.iter().map(|&g| g as usize).sum();
    let mut best = f64::NEG_INFINITY;
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let fm: Vec<f64> = pred.iter().map(|&p| if p >= t { 1.0 } else { 0.0 }).collect();
        let mut score = 0.0;
        if g_sum == 0 {
            for i in 0..n {
                score += 1.0 - fm[i];
            }
        } else if g_sum == n {
            for i in 0..n {
                score += fm[i];
            }
        } else {
            let mu_f = fm.iter().sum::<f64>() / n as f64;
            let mu_g = g_sum as f64 / n as f64;
            for i in 0..n {
                let af = fm[i] - mu_f;
                let ag = gt[i] as f64 - mu_g;
                let align = 2.0 * ag * af / (ag * ag + af * af + eps);
                score += (align + 1.0).powi(2) / 4.0;
            }
        }
        best = best.max(score / n as f64);
    }
    best
}

/// Random binary mask made of a few rectangles (sometimes empty or full).
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut v = vec![0u8; h * w];
    match rng.gen_range(0..20) {
        0 => {}
        1 => v.iter_mut().for_each(|x| *x = 1),
        2 => {
            for x in v.iter_mut() {
                *x = rng.gen_bool(0.3) as u8;
            }
        }
        _ => {
            for _ in 0..rng.gen_range(1..4) {
                let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (y1, x1) = (rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1);
                for y in y0..y1 {
                    for x in x0..x1 {
                        v[y * w + x] = 1;
                    }
                }
            }
        }
    }
    Mask::new(h, w, v).unwrap()
}

/// Random prediction: noisy version of the mask, or uniform noise, with
/// values sometimes snapped to the 1/255 grid to exercise threshold ties.
pub fn random_pred(rng: &mut ChaCha8Rng, gt: &Mask) -> Vec<f64> {
    let mode = rng.gen_range(0..3);
    gt.values()
        .iter()
        .map(|&g| {
            let v: f64 = match mode {
                0 => rng.gen_range(0.0..1.0),
                _ => (g as f64 * 0.7 + rng.gen_range(0.0..0.3f64)).clamp(0.0, 1.0),
            };
            if mode == 2 {
                (v * 255.0).round() / 255.0
            } else {
                v
            }
        })
        .collect()
}
