// SPDX-License-Identifier: Apache-2.0

//! Segmentation quality metrics: Dice, IoU, weighted F-measure, structure
//! measure, max enhanced-alignment measure and MAE.
//!
//! Every metric takes the foreground probability plane `pred` (raster order,
//! values in `[0, 1]`) and a binary ground-truth mask of the same size.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{softmax_map, ImageSample, Mask};
use crate::error::{Error, Result};
use crate::net::SegNet;

/// Matches the machine epsilon guard used by the reference formulas.
const EPS: f64 = f64::EPSILON;

/// Gaussian support and width for the weighted F-measure's error smoothing.
pub const WFM_KERNEL: usize = 7;
pub const WFM_SIGMA: f64 = 5.0;
pub const WFM_BETA2: f64 = 1.0;
/// Object/region balance of the structure measure.
pub const S_ALPHA: f64 = 0.5;
/// Thresholds `0, 1/255, …, 1` for the max E-measure.
pub const E_THRESHOLDS: usize = 256;

fn check(pred: &[f64], gt: &Mask) -> Result<()> {
    if pred.len() != gt.values().len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, mask has {}",
            pred.len(),
            gt.values().len()
        )));
    }
    Ok(())
}

/// Dice and IoU of the thresholded prediction; both are 1 when prediction
/// and ground truth are empty.
pub fn dice_iou(pred: &[f64], gt: &Mask, threshold: f64) -> Result<(f64, f64)> {
    check(pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.values()) {
        let pa = p >= threshold;
        let gb = g == 1;
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let union = a + b - inter;
    Ok((
        2.0 * inter as f64 / (a + b) as f64,
        inter as f64 / union as f64,
    ))
}

pub fn mae(pred: &[f64], gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p - g as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Nearest foreground pixel (squared distance, index) for every pixel.
/// Ties resolve to the lowest raster index.
pub(crate) fn nearest_foreground(gt: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (gt.height() as isize, gt.width() as isize);
    let v = gt.values();
    let mut out = Vec::with_capacity(v.len());
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if v[i] == 1 {
                out.push((0, i));
                continue;
            }
            let mut best: Option<(usize, usize)> = None;
            let max_r = h.max(w);
            for r in 1..=max_r {
                if let Some((d2, _)) = best {
                    if (r * r) as usize > d2 {
                        break;
                    }
                }
                let mut visit = |yy: isize, xx: isize| {
                    if yy < 0 || xx < 0 || yy >= h || xx >= w {
                        return;
                    }
                    let j = (yy * w + xx) as usize;
                    if v[j] != 1 {
                        return;
                    }
                    let d2 = ((yy - y) * (yy - y) + (xx - x) * (xx - x)) as usize;
                    if best.is_none_or(|b| (d2, j) < b) {
                        best = Some((d2, j));
                    }
                };
                for xx in (x - r)..=(x + r) {
                    visit(y - r, xx);
                    visit(y + r, xx);
                }
                for yy in (y - r + 1)..=(y + r - 1) {
                    visit(yy, x - r);
                    visit(yy, x + r);
                }
            }
            out.push(best.expect("mask has a foreground pixel"));
        }
    }
    out
}

/// Normalized 1-D Gaussian taps.
pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable same-size filtering with zero padding.
fn gaussian_filter(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && xx < w as isize {
                    acc += g * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && yy < h as isize {
                    acc += g * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Weighted F-measure. `None` when the ground truth has no foreground.
pub fn weighted_fmeasure(pred: &[f64], gt: &Mask) -> Result<Option<f64>> {
    check(pred, gt)?;
    let g = gt.values();
    let n_fg = g.iter().filter(|&&v| v == 1).count();
    if n_fg == 0 {
        return Ok(None);
    }
    let (h, w) = (gt.height(), gt.width());
    let err: Vec<f64> = pred
        .iter()
        .zip(g)
        .map(|(&p, &v)| (p - v as f64).abs())
        .collect();
    let nearest = nearest_foreground(gt);
    let spread: Vec<f64> = nearest.iter().map(|&(_, j)| err[j]).collect();
    let smoothed = gaussian_filter(&spread, h, w, &gaussian_taps(WFM_KERNEL, WFM_SIGMA));
    let decay = 0.5f64.ln() / 5.0;

    let (mut ew_fg, mut ew_bg) = (0.0, 0.0);
    for i in 0..g.len() {
        if g[i] == 1 {
            ew_fg += if smoothed[i] < err[i] { smoothed[i] } else { err[i] };
        } else {
            let dist = (nearest[i].0 as f64).sqrt();
            ew_bg += err[i] * (2.0 - (decay * dist).exp());
        }
    }
    let tp = n_fg as f64 - ew_fg;
    let recall = 1.0 - ew_fg / n_fg as f64;
    let precision = tp / (EPS + tp + ew_bg);
    Ok(Some(
        (1.0 + WFM_BETA2) * recall * precision / (EPS + recall + WFM_BETA2 * precision),
    ))
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0);
    for x in v {
        s += x;
        n += 1;
    }
    (if n > 0 { s / n as f64 } else { 0.0 }, n)
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, n) = mean(values.iter().cloned());
    let sigma = if n > 1 {
        (values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &[f64], g: &[u8]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(g).filter(|(_, &v)| v == 1).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(g)
        .filter(|(_, &v)| v == 0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let u = fg.len() as f64 / g.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// SSIM-like similarity of one block (whole-block statistics).
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.iter().sum::<f64>() / nf;
    let y = gt.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &q) in pred.iter().zip(gt) {
        sxx += (p - x) * (p - x);
        syy += (q - y) * (q - y);
        sxy += (p - x) * (q - y);
    }
    let d = nf - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Ground-truth centroid split point `(col, row)`: the number of columns and
/// rows in the left/top blocks.
fn split_point(g: &[u8], h: usize, w: usize) -> (usize, usize) {
    let total: usize = g.iter().map(|&v| v as usize).sum();
    if total == 0 {
        return (
            (w as f64 / 2.0).round() as usize,
            (h as f64 / 2.0).round() as usize,
        );
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] == 1 {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    (
        (sx / total as f64).round() as usize,
        (sy / total as f64).round() as usize,
    )
}

fn s_region(pred: &[f64], g: &[u8], h: usize, w: usize) -> f64 {
    let (cx, cy) = split_point(g, h, w);
    let area = (h * w) as f64;
    let blocks = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let weights = {
        let w1 = (cx * cy) as f64 / area;
        let w2 = ((w - cx) * cy) as f64 / area;
        let w3 = (cx * (h - cy)) as f64 / area;
        [w1, w2, w3, 1.0 - w1 - w2 - w3]
    };
    let mut score = 0.0;
    for ((y0, y1, x0, x1), wt) in blocks.into_iter().zip(weights) {
        let mut bp = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut bg = Vec::with_capacity(bp.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                bp.push(pred[y * w + x]);
                bg.push(g[y * w + x] as f64);
            }
        }
        if !bp.is_empty() {
            score += wt * block_ssim(&bp, &bg);
        }
    }
    score
}

/// Structure measure `α·S_object + (1 − α)·S_region`.
pub fn s_measure(pred: &[f64], gt: &Mask, alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    let g = gt.values();
    let y = gt.foreground_fraction();
    let (x, _) = mean(pred.iter().cloned());
    let q = if y == 0.0 {
        1.0 - x
    } else if y == 1.0 {
        x
    } else {
        alpha * s_object(pred, g) + (1.0 - alpha) * s_region(pred, g, gt.height(), gt.width())
    };
    Ok(q.max(0.0))
}

/// Index of the highest threshold `k/255` not exceeding `p`, or -1.
fn threshold_bin(p: f64) -> isize {
    let top = (E_THRESHOLDS - 1) as isize;
    let mut k = ((p * top as f64).floor() as isize).clamp(-1, top);
    while k < top && ((k + 1) as f64 / top as f64) <= p {
        k += 1;
    }
    while k >= 0 && (k as f64 / top as f64) > p {
        k -= 1;
    }
    k
}

/// Mean enhanced alignment for a binary map summarized by its confusion
/// counts; `tp`, `fm` and `g` count true positives, predicted and true foreground.
fn enhanced_score(tp: usize, fm: usize, g: usize, n: usize) -> f64 {
    if g == 0 {
        return (n - fm) as f64 / n as f64;
    }
    if g == n {
        return fm as f64 / n as f64;
    }
    let mu_fm = fm as f64 / n as f64;
    let mu_gt = g as f64 / n as f64;
    let enh = |f: f64, t: f64| {
        let af = f - mu_fm;
        let at = t - mu_gt;
        let align = 2.0 * at * af / (at * at + af * af + EPS);
        (align + 1.0) * (align + 1.0) / 4.0
    };
    let counts = [
        (tp, 1.0, 1.0),
        (fm - tp, 1.0, 0.0),
        (g - tp, 0.0, 1.0),
        (n + tp - fm - g, 0.0, 0.0),
    ];
    counts
        .iter()
        .map(|&(c, f, t)| c as f64 * enh(f, t))
        .sum::<f64>()
        / n as f64
}

/// Maximum over thresholds `t ∈ {0, 1/255, …, 1}` of the E-measure of `pred ≥ t`.
pub fn e_measure_max(pred: &[f64], gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let mut hist_fg = vec![0usize; E_THRESHOLDS];
    let mut hist_bg = vec![0usize; E_THRESHOLDS];
    for (&p, &g) in pred.iter().zip(gt.values()) {
        let b = threshold_bin(p);
        if b >= 0 {
            if g == 1 {
                hist_fg[b as usize] += 1;
            } else {
                hist_bg[b as usize] += 1;
            }
        }
    }
    let n = pred.len();
    let g_total = gt.values().iter().filter(|&&v| v == 1).count();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = f64::NEG_INFINITY;
    for k in (0..E_THRESHOLDS).rev() {
        tp += hist_fg[k];
        fp += hist_bg[k];
        best = best.max(enhanced_score(tp, tp + fp, g_total, n));
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub sample_id: String,
    pub dice: f64,
    pub iou: f64,
    /// Absent when the mask has no foreground.
    pub weighted_f: Option<f64>,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub dice: f64,
    pub iou: f64,
    pub weighted_f: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub per_image: Vec<ImageMetrics>,
    pub mean: MetricMeans,
}

pub fn image_metrics(sample_id: &str, pred: &[f64], gt: &Mask) -> Result<ImageMetrics> {
    let (dice, iou) = dice_iou(pred, gt, 0.5)?;
    Ok(ImageMetrics {
        sample_id: sample_id.to_string(),
        dice,
        iou,
        weighted_f: weighted_fmeasure(pred, gt)?,
        s_measure: s_measure(pred, gt, S_ALPHA)?,
        e_measure_max: e_measure_max(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}

impl EvalReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len();
        let avg = |f: &dyn Fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let wf: Vec<f64> = per_image.iter().filter_map(|m| m.weighted_f).collect();
        let mean = MetricMeans {
            dice: avg(&|m| m.dice),
            iou: avg(&|m| m.iou),
            weighted_f: if wf.is_empty() {
                0.0
            } else {
                wf.iter().sum::<f64>() / wf.len() as f64
            },
            s_measure: avg(&|m| m.s_measure),
            e_measure_max: avg(&|m| m.e_measure_max),
            mae: avg(&|m| m.mae),
        };
        EvalReport {
            n_images: n,
            per_image,
            mean,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,dice,iou,weighted_f,s_measure,e_measure_max,mae\n");
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for m in &self.per_image {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
                m.sample_id,
                m.dice,
                m.iou,
                fmt_opt(m.weighted_f),
                m.s_measure,
                m.e_measure_max,
                m.mae
            );
        }
        let a = &self.mean;
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            a.dice, a.iou, a.weighted_f, a.s_measure, a.e_measure_max, a.mae
        );
        s
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Foreground probability plane predicted by `model`.
pub fn predict_foreground(model: &SegNet, sample: &ImageSample) -> Result<Vec<f64>> {
    let (logits, _) = model.forward(&sample.image)?;
    Ok(softmax_map(&logits)?.foreground())
}

/// Runs the model over a labelled split and scores every image.
pub fn evaluate_dataset(model: &SegNet, samples: &[ImageSample]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s.mask.as_ref().ok_or_else(|| Error::Sample {
            sample_id: s.sample_id.clone(),
            message: "evaluation needs a ground-truth mask".into(),
        })?;
        let pred = predict_foreground(model, s)?;
        rows.push(image_metrics(&s.sample_id, &pred, gt)?);
    }
    Ok(EvalReport::from_images(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, fg: &[usize]) -> Mask {
        let mut v = vec![0u8; h * w];
        for &i in fg {
            v[i] = 1;
        }
        Mask::new(h, w, v).unwrap()
    }

    #[test]
    fn dice_iou_examples() {
        let gt = mask(4, 4, &[5, 6, 9, 10]);
        let perfect = gt.as_f64();
        assert_eq!(dice_iou(&perfect, &gt, 0.5).unwrap(), (1.0, 1.0));
        // prediction 4 px, truth 2 px inside it
        let gt2 = mask(4, 4, &[5, 6]);
        let (d, i) = dice_iou(&perfect, &gt2, 0.5).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        assert!((i - 0.5).abs() < 1e-12);
        let empty = mask(4, 4, &[]);
        assert_eq!(dice_iou(&[0.0; 16], &empty, 0.5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn mae_examples() {
        let gt = mask(4, 4, &[1, 2, 3]);
        assert_eq!(mae(&gt.as_f64(), &gt).unwrap(), 0.0);
        assert_eq!(mae(&[0.5; 16], &gt).unwrap(), 0.5);
        let inv: Vec<f64> = gt.as_f64().iter().map(|v| 1.0 - v).collect();
        assert_eq!(mae(&inv, &gt).unwrap(), 1.0);
    }

    #[test]
    fn wfm_perfect_and_empty() {
        let gt = mask(8, 8, &[18, 19, 26, 27, 28]);
        let q = weighted_fmeasure(&gt.as_f64(), &gt).unwrap().unwrap();
        assert!((q - 1.0).abs() < 1e-12);
        // Away from the border the smoothed error equals the raw error.
        let centre = mask(32, 32, &[16 * 32 + 15, 16 * 32 + 16]);
        let z = weighted_fmeasure(&[0.0; 1024], &centre).unwrap().unwrap();
        assert!(z.abs() < 1e-9, "{z}");
        assert_eq!(weighted_fmeasure(&[0.3; 64], &mask(8, 8, &[])).unwrap(), None);
    }

    #[test]
    fn s_measure_degenerate_cases() {
        let gt = mask(8, 8, &[18, 19, 26, 27, 28]);
        assert!((s_measure(&gt.as_f64(), &gt, 0.5).unwrap() - 1.0).abs() < 1e-6);
        let empty = mask(8, 8, &[]);
        assert_eq!(s_measure(&[0.0; 64], &empty, 0.5).unwrap(), 1.0);
        let full = mask(2, 2, &[0, 1, 2, 3]);
        assert_eq!(s_measure(&[0.25; 4], &full, 0.5).unwrap(), 0.25);
    }

    #[test]
    fn e_measure_extremes() {
        // balanced 4x4: left half foreground
        let gt = mask(4, 4, &[0, 1, 4, 5, 8, 9, 12, 13]);
        assert!((e_measure_max(&gt.as_f64(), &gt).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f64> = gt.as_f64().iter().map(|v| 1.0 - v).collect();
        assert!(e_measure_max(&inv, &gt).unwrap() <= 0.25 + 1e-12);
    }

    #[test]
    fn threshold_bins_agree_with_comparisons() {
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            let b = threshold_bin(p);
            let want = (0..E_THRESHOLDS)
                .filter(|&k| p >= k as f64 / 255.0)
                .max()
                .map_or(-1, |k| k as isize);
            assert_eq!(b, want, "p={p}");
        }
        for k in 0..256 {
            let p = k as f64 / 255.0;
            assert_eq!(threshold_bin(p), k as isize);
        }
    }

    #[test]
    fn nearest_foreground_ties_lowest_index() {
        // fg at (0,0) and (0,2); pixel (0,1) is equidistant.
        let gt = mask(1, 3, &[0, 2]);
        assert_eq!(nearest_foreground(&gt)[1], (1, 0));
    }
}
