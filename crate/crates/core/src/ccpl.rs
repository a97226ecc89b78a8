// SPDX-License-Identifier: Apache-2.0

//! Confidence-calibrated soft pseudo-labels.
//!
//! The previous round's logits and the current logits are both divided by a
//! shared per-pixel temperature `φ(a, b) = sqrt(Σ aᵢ² + bᵢ²)` before the
//! softmax, then mixed with weight `alpha`. The result is a training target
//! for a soft-label cross-entropy.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{softmax_into, LogitMap, Map, ProbabilityMap};
use crate::error::{Error, Result};

/// Probabilities are clamped below at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcplConfig {
    pub alpha: f64,
    /// Carry the fused distribution (as log-probabilities) into the next
    /// round instead of the raw epoch-end logits.
    pub store_fused: bool,
}

impl Default for CcplConfig {
    fn default() -> Self {
        CcplConfig {
            alpha: 0.5,
            store_fused: false,
        }
    }
}

impl CcplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "ccpl alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-pixel class distributions used as a detached training target.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPseudoLabel(Map);

impl SoftPseudoLabel {
    pub fn new(map: Map) -> Result<Self> {
        ProbabilityMap::new(map).map(|p| SoftPseudoLabel(p.into_map()))
    }

    pub fn map(&self) -> &Map {
        &self.0
    }
}

const MAX_FUSE_CLASSES: usize = 8;

/// Shared fusion temperature; falls back to 1 when both vectors are zero.
pub fn phi_norm(a: &[f64], b: &[f64]) -> f64 {
    // Summed per argument so the result is bitwise symmetric.
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let s = sq(a) + sq(b);
    if s > 0.0 {
        s.sqrt()
    } else {
        1.0
    }
}

/// Fuses one pixel's current and previous logit vectors into `out`.
pub(crate) fn fuse_pixel(current: &[f64], previous: &[f64], alpha: f64, out: &mut [f64]) {
    let t = phi_norm(current, previous);
    let c = current.len();
    let mut scaled = [0.0; MAX_FUSE_CLASSES];
    let mut soft = [0.0; MAX_FUSE_CLASSES];
    debug_assert!(c <= MAX_FUSE_CLASSES);
    for (s, &v) in scaled.iter_mut().zip(current) {
        *s = v / t;
    }
    softmax_into(&scaled[..c], &mut soft[..c]);
    for (o, &p) in out.iter_mut().zip(&soft[..c]) {
        *o = alpha * p;
    }
    for (s, &v) in scaled.iter_mut().zip(previous) {
        *s = v / t;
    }
    softmax_into(&scaled[..c], &mut soft[..c]);
    for (o, &p) in out.iter_mut().zip(&soft[..c]) {
        *o += (1.0 - alpha) * p;
    }
}

pub(crate) fn fuse_maps(current: &Map, previous: &Map, alpha: f64) -> Result<Map> {
    if current.height() != previous.height()
        || current.width() != previous.width()
        || current.channels() != previous.channels()
    {
        return Err(Error::Shape(format!(
            "current logits {}x{}x{} vs previous {}x{}x{}",
            current.height(),
            current.width(),
            current.channels(),
            previous.height(),
            previous.width(),
            previous.channels()
        )));
    }
    let c = current.channels();
    if c > MAX_FUSE_CLASSES {
        return Err(Error::Shape(format!(
            "fusion supports at most {MAX_FUSE_CLASSES} classes, got {c}"
        )));
    }
    let mut out = Map::zeros(current.height(), current.width(), c);
    for ((a, b), o) in current
        .iter_pixels()
        .zip(previous.iter_pixels())
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        fuse_pixel(a, b, alpha, o);
    }
    Ok(out)
}

pub fn fuse_pseudo_label(
    current: &LogitMap,
    previous: &LogitMap,
    cfg: &CcplConfig,
) -> Result<SoftPseudoLabel> {
    Ok(SoftPseudoLabel(fuse_maps(
        current.map(),
        previous.map(),
        cfg.alpha,
    )?))
}

fn pixel_ce(p: &[f64], y: &[f64]) -> f64 {
    -p.iter()
        .zip(y)
        .map(|(&pc, &yc)| yc * pc.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Mean over pixels of `−Σ_c y_c log p_c`.
pub fn soft_ce_loss(pred: &ProbabilityMap, target: &SoftPseudoLabel) -> Result<f64> {
    let (p, y) = (pred.map(), target.map());
    if p.height() != y.height() || p.width() != y.width() || p.channels() != y.channels() {
        return Err(Error::Shape("prediction and pseudo-label differ in shape".into()));
    }
    let sum: f64 = p
        .iter_pixels()
        .zip(y.iter_pixels())
        .map(|(pp, yy)| pixel_ce(pp, yy))
        .sum();
    Ok(sum / p.pixels() as f64)
}

/// Accumulates `scale · ∂(soft_ce)/∂logits` given the softmax output `probs`.
pub(crate) fn soft_ce_backward(probs: &Map, target: &Map, scale: f64, dlogits: &mut [f64]) {
    let c = probs.channels();
    let inv_n = scale / probs.pixels() as f64;
    for ((p, y), d) in probs
        .iter_pixels()
        .zip(target.iter_pixels())
        .zip(dlogits.chunks_exact_mut(c))
    {
        // Classes whose probability sits on the floor contribute a constant.
        let active: f64 = p
            .iter()
            .zip(y)
            .filter(|(&pc, _)| pc >= PROB_FLOOR)
            .map(|(_, &yc)| yc)
            .sum();
        for j in 0..c {
            let own = if p[j] >= PROB_FLOOR { y[j] } else { 0.0 };
            d[j] += inv_n * (p[j] * active - own);
        }
    }
}

/// Previous-round logits for every target sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelStore {
    round: usize,
    shape: (usize, usize, usize),
    maps: BTreeMap<String, LogitMap>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreManifest {
    round: usize,
    samples: Vec<String>,
    shape: [usize; 3],
}

impl PseudoLabelStore {
    /// Round-1 store, typically filled with the source model's logits.
    pub fn new(initial: BTreeMap<String, LogitMap>) -> Result<Self> {
        let shape = initial
            .values()
            .next()
            .map(|m| (m.height(), m.width(), m.channels()))
            .ok_or_else(|| Error::Config("pseudo-label store needs at least one sample".into()))?;
        for (id, m) in &initial {
            if (m.height(), m.width(), m.channels()) != shape {
                return Err(Error::Sample {
                    sample_id: id.clone(),
                    message: "logit map shape differs from the rest of the store".into(),
                });
            }
        }
        Ok(PseudoLabelStore {
            round: 1,
            shape,
            maps: initial,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&LogitMap> {
        self.maps.get(sample_id)
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.maps.keys().map(String::as_str)
    }

    /// Replaces every stored map with this round's logits (or their fusion
    /// with the stored ones when `cfg.store_fused`) and bumps the round.
    pub fn advance_round(
        self,
        fresh: BTreeMap<String, LogitMap>,
        cfg: &CcplConfig,
    ) -> Result<PseudoLabelStore> {
        let mut fresh = fresh;
        let mut maps = BTreeMap::new();
        for (id, previous) in self.maps {
            let current = fresh.remove(&id).ok_or_else(|| Error::Sample {
                sample_id: id.clone(),
                message: "no fresh logits for this round".into(),
            })?;
            if (current.height(), current.width(), current.channels()) != self.shape {
                return Err(Error::Sample {
                    sample_id: id,
                    message: "fresh logits have the wrong shape".into(),
                });
            }
            let next = if cfg.store_fused {
                let mut fused = fuse_maps(current.map(), previous.map(), cfg.alpha)?;
                for v in fused.data_mut() {
                    *v = v.max(PROB_FLOOR).ln();
                }
                LogitMap::new(fused)?
            } else {
                current
            };
            maps.insert(id, next);
        }
        Ok(PseudoLabelStore {
            round: self.round + 1,
            shape: self.shape,
            maps,
        })
    }

    /// Writes `manifest.json` plus one little-endian `<id>.bin` per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = StoreManifest {
            round: self.round,
            samples: self.maps.keys().cloned().collect(),
            shape: [self.shape.0, self.shape.1, self.shape.2],
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        for (id, m) in &self.maps {
            let bytes: Vec<u8> = m.map().data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(format!("{id}.bin"));
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StoreManifest = serde_json::from_slice(&raw)?;
        let [h, w, c] = manifest.shape;
        let mut maps = BTreeMap::new();
        for id in manifest.samples {
            let path = dir.join(format!("{id}.bin"));
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != h * w * c * 8 {
                return Err(Error::Sample {
                    sample_id: id,
                    message: "stored logit map has the wrong size".into(),
                });
            }
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            maps.insert(id, LogitMap::new(Map::new(h, w, c, data)?)?);
        }
        if manifest.round == 0 {
            return Err(Error::Config("store round must be >= 1".into()));
        }
        Ok(PseudoLabelStore {
            round: manifest.round,
            shape: (h, w, c),
            maps,
        })
    }
}
