// SPDX-License-Identifier: Apache-2.0

//! Training-time augmentation: horizontal flip, centered rescale and
//! brightness jitter. The geometric part can be replayed on any per-pixel
//! map so stored logits stay aligned with the augmented view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Map, Mask};
use crate::layers::{Axis, Bilinear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    /// Maximum relative zoom, e.g. 0.1 for ±10%.
    pub scale: f64,
    /// Maximum relative brightness change.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip: true,
            scale: 0.1,
            brightness: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            horizontal_flip: false,
            scale: 0.0,
            brightness: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip: bool,
    pub zoom: f64,
    pub brightness: f64,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        flip: false,
        zoom: 1.0,
        brightness: 1.0,
    };

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        // Always draw the same number of values so the stream stays aligned.
        let flip = rng.gen::<bool>() && cfg.horizontal_flip;
        let z: f64 = rng.gen_range(-1.0..=1.0);
        let b: f64 = rng.gen_range(-1.0..=1.0);
        Augment {
            flip,
            zoom: 1.0 + cfg.scale * z,
            brightness: 1.0 + cfg.brightness * b,
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        !self.flip && self.zoom == 1.0
    }

    fn sampler(&self, h: usize, w: usize) -> Bilinear {
        let axis = |n: usize| {
            let s = 1.0 / self.zoom;
            Axis::affine(n, n, s, n as f64 / 2.0 * (1.0 - s))
        };
        let cols = if self.flip { axis(w).reversed() } else { axis(w) };
        Bilinear::new(h, w, axis(h), cols)
    }

    /// Applies the geometric transform to a pixel-major map.
    pub fn warp(&self, map: &Map) -> Map {
        if self.is_geometric_identity() {
            return map.clone();
        }
        let (h, w, c) = (map.height(), map.width(), map.channels());
        let data = self.sampler(h, w).apply_hwc(c, map.data());
        Map::new(h, w, c, data).expect("same grid")
    }

    pub fn apply_image(&self, image: &Map) -> Map {
        let mut out = self.warp(image);
        if self.brightness != 1.0 {
            for v in out.data_mut() {
                *v = (*v * self.brightness).clamp(0.0, 1.0);
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        if self.is_geometric_identity() {
            return mask.clone();
        }
        let (h, w) = (mask.height(), mask.width());
        let m = Map::new(h, w, 1, mask.as_f64()).expect("mask plane");
        let warped = self.warp(&m);
        let values = warped.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
        Mask::new(h, w, values).expect("same grid")
    }
}
