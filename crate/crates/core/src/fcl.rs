// SPDX-License-Identifier: Apache-2.0

//! Foreground-aware contrastive learning over confidence-weighted region
//! centroids.
//!
//! Every image contributes up to one centroid per class: the mean feature
//! over the pixels predicted as that class, each pixel scaled by its
//! confidence `1 − entropy`. Centroids from the current batch are contrasted
//! against a per-class FIFO bank of centroids from earlier batches: same-class
//! bank entries are positives, other-class entries negatives.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{argmax, EntropyMap, FeatureMap, Map, ProbabilityMap, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FclConfig {
    pub temperature: f64,
    pub bank_capacity: usize,
    pub min_region_pixels: usize,
    /// Take region assignment and confidence weights from the frozen source
    /// model instead of the model being adapted.
    pub frozen_source_stats: bool,
}

impl Default for FclConfig {
    fn default() -> Self {
        FclConfig {
            temperature: 0.1,
            bank_capacity: 256,
            min_region_pixels: 16,
            frozen_source_stats: true,
        }
    }
}

impl FclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("fcl temperature must be > 0".into()));
        }
        if self.bank_capacity == 0 {
            return Err(Error::Config("fcl bank capacity must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centroid {
    pub vector: Vec<f64>,
    pub class_id: usize,
    pub source_sample_id: String,
    /// Sum of `1 − entropy` over the contributing pixels.
    pub weight_mass: f64,
}

/// Per-class FIFO queues of past centroids.
#[derive(Clone, Debug)]
pub struct CentroidBank {
    capacity: usize,
    queues: [VecDeque<Centroid>; NUM_CLASSES],
}

impl CentroidBank {
    pub fn new(capacity: usize) -> Self {
        CentroidBank {
            capacity: capacity.max(1),
            queues: Default::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn class(&self, k: usize) -> &VecDeque<Centroid> {
        &self.queues[k]
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends a centroid, evicting the oldest entry of its class when full.
    /// Zero vectors carry no direction and are dropped.
    pub fn push(&mut self, c: Centroid) {
        if norm(&c.vector) == 0.0 || c.class_id >= NUM_CLASSES {
            return;
        }
        let q = &mut self.queues[c.class_id];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(c);
    }
}

/// Natural-log entropy of one distribution, with `0·ln 0 = 0`.
pub(crate) fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Per-pixel Shannon entropy normalized by `ln C`.
pub fn entropy_map(probs: &ProbabilityMap) -> EntropyMap {
    let m = probs.map();
    let scale = (m.channels() as f64).ln();
    let values = m
        .iter_pixels()
        .map(|p| (entropy_nats(p) / scale).clamp(0.0, 1.0))
        .collect();
    EntropyMap::new(m.height(), m.width(), values).expect("entropy in range")
}

fn check_aligned(features: &Map, probs: &Map, entropy: &EntropyMap) -> Result<()> {
    if !features.same_grid(probs)
        || entropy.height() != probs.height()
        || entropy.width() != probs.width()
    {
        return Err(Error::Shape(
            "features, probabilities and entropy must share one grid".into(),
        ));
    }
    Ok(())
}

/// Confidence-weighted mean feature of each predicted region. The denominator
/// is the region's pixel count, so low-confidence regions shrink toward zero.
pub fn region_centroids(
    features: &FeatureMap,
    probs: &ProbabilityMap,
    entropy: &EntropyMap,
    cfg: &FclConfig,
    sample_id: &str,
) -> Result<Vec<Centroid>> {
    let (f, p) = (features.map(), probs.map());
    check_aligned(f, p, entropy)?;
    let k = f.channels();
    let mut sums = vec![vec![0.0; k]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    let mut mass = [0.0; NUM_CLASSES];
    for ((feat, px), &ent) in f.iter_pixels().zip(p.iter_pixels()).zip(entropy.values()) {
        let class = argmax(px);
        let weight = 1.0 - ent;
        counts[class] += 1;
        mass[class] += weight;
        for (s, &v) in sums[class].iter_mut().zip(feat) {
            *s += v * weight;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|&(class, _)| counts[class] > 0 && counts[class] >= cfg.min_region_pixels)
        .map(|(class, sum)| Centroid {
            vector: sum.into_iter().map(|s| s / counts[class] as f64).collect(),
            class_id: class,
            source_sample_id: sample_id.to_string(),
            weight_mass: mass[class],
        })
        .collect())
}

/// Backpropagates centroid gradients to the feature map and to the logits
/// (through the entropy weights). `dcentroids[k]` is the gradient for the
/// class-`k` centroid, if that centroid exists. Results are accumulated.
pub(crate) fn region_centroids_backward(
    features: &Map,
    probs: &Map,
    dcentroids: &[Option<Vec<f64>>; NUM_CLASSES],
    dfeatures: &mut [f64],
    dlogits: &mut [f64],
) {
    let k = features.channels();
    let c = probs.channels();
    let mut counts = [0usize; NUM_CLASSES];
    for px in probs.iter_pixels() {
        counts[argmax(px)] += 1;
    }
    let ln_c = (c as f64).ln();
    for (i, (feat, px)) in features.iter_pixels().zip(probs.iter_pixels()).enumerate() {
        let class = argmax(px);
        let Some(g) = &dcentroids[class] else {
            continue;
        };
        let n = counts[class] as f64;
        let h = entropy_nats(px);
        let weight = 1.0 - (h / ln_c).clamp(0.0, 1.0);
        let df = &mut dfeatures[i * k..(i + 1) * k];
        let mut dweight = 0.0;
        for ((d, &gv), &fv) in df.iter_mut().zip(g).zip(feat) {
            *d += gv * weight / n;
            dweight += gv * fv / n;
        }
        // weight = 1 − H/ln C, dH/dz_j = −p_j (ln p_j + H)
        let dl = &mut dlogits[i * c..(i + 1) * c];
        for (d, &pj) in dl.iter_mut().zip(px) {
            if pj > 0.0 {
                *d += dweight * pj * (pj.ln() + h) / ln_c;
            }
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Loss value plus gradients w.r.t. each batch centroid's raw vector.
#[derive(Clone, Debug)]
pub struct FclOutput {
    pub loss: f64,
    /// Number of anchors that had at least one positive.
    pub anchors: usize,
    /// `None` for anchors excluded from the mean.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Contrastive loss of the batch centroids against the bank, without
/// mutating the bank.
pub fn fcl_loss_with_grad(batch: &[Centroid], bank: &CentroidBank, cfg: &FclConfig) -> FclOutput {
    let tau = cfg.temperature;
    let bank_units: Vec<Vec<Vec<f64>>> = (0..NUM_CLASSES)
        .map(|k| {
            bank.class(k)
                .iter()
                .filter_map(|c| normalized(&c.vector))
                .collect()
        })
        .collect();

    let mut total = 0.0;
    let mut anchors = 0;
    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(batch.len());
    for m in batch {
        let positives = &bank_units[m.class_id];
        let raw_norm = norm(&m.vector);
        if positives.is_empty() || raw_norm == 0.0 {
            grads.push(None);
            continue;
        }
        let u: Vec<f64> = m.vector.iter().map(|x| x / raw_norm).collect();
        let negatives: Vec<&Vec<f64>> = (0..NUM_CLASSES)
            .filter(|&k| k != m.class_id)
            .flat_map(|k| bank_units[k].iter())
            .collect();
        let neg_logits: Vec<f64> = negatives.iter().map(|n| dot(&u, n) / tau).collect();
        let lse_neg = neg_logits
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &t| log_add_exp(acc, t));
        // Softmax-weighted mean of the negatives.
        let mut neg_mean = vec![0.0; u.len()];
        for (n, &t) in negatives.iter().zip(&neg_logits) {
            let w = (t - lse_neg).exp();
            for (a, &b) in neg_mean.iter_mut().zip(n.iter()) {
                *a += w * b;
            }
        }

        let inv_p = 1.0 / positives.len() as f64;
        let mut loss = 0.0;
        let mut du = vec![0.0; u.len()];
        for pvec in positives {
            let s = dot(&u, pvec) / tau;
            let denom = log_add_exp(s, lse_neg);
            loss += (denom - s) * inv_p;
            let coeff = (1.0 - (s - denom).exp()) * inv_p / tau;
            for ((d, &nb), &pb) in du.iter_mut().zip(&neg_mean).zip(pvec) {
                *d += coeff * (nb - pb);
            }
        }
        // Through u = m / |m|.
        let proj = dot(&u, &du);
        let dm: Vec<f64> = du
            .iter()
            .zip(&u)
            .map(|(&d, &ui)| (d - ui * proj) / raw_norm)
            .collect();
        total += loss;
        anchors += 1;
        grads.push(Some(dm));
    }
    if anchors > 0 {
        let inv = 1.0 / anchors as f64;
        total *= inv;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= inv);
        }
    }
    FclOutput {
        loss: total,
        anchors,
        grads,
    }
}

/// Computes the loss, then pushes the batch centroids into the bank.
pub fn fcl_loss(batch: &[Centroid], bank: &mut CentroidBank, cfg: &FclConfig) -> f64 {
    let out = fcl_loss_with_grad(batch, bank, cfg);
    for c in batch {
        bank.push(c.clone());
    }
    out.loss
}
