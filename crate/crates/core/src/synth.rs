// SPDX-License-Identifier: Apache-2.0

//! Synthetic paired source/target "polyp" datasets with a controllable
//! appearance shift.
//!
//! Each image is a textured background with one or more randomly deformed
//! elliptical blobs. Source and target splits share the geometry
//! distribution and differ only in their [`Style`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_mask_png, write_rgb_png, Domain, ImageSample, Map, Mask, SPLITS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Style {
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_sigma: f64,
    /// Background texture frequency in cycles per image.
    pub texture_freq: f64,
    pub texture_amp: f64,
    /// Applied as `v ↦ v^gamma` after noise.
    pub gamma: f64,
    /// Per-channel gain.
    pub tint: [f64; 3],
}

impl Style {
    pub fn source_default() -> Self {
        Style {
            fg_mean: 0.68,
            bg_mean: 0.38,
            noise_sigma: 0.04,
            texture_freq: 3.0,
            texture_amp: 0.07,
            gamma: 1.0,
            tint: [1.0, 0.82, 0.72],
        }
    }

    pub fn target_default() -> Self {
        Style {
            fg_mean: 0.58,
            bg_mean: 0.44,
            noise_sigma: 0.08,
            texture_freq: 3.0,
            texture_amp: 0.07,
            gamma: 1.35,
            tint: [1.0, 0.86, 0.78],
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if (self.fg_mean - self.bg_mean).abs() < 0.1 {
            return Err(Error::Config(format!(
                "{name}: foreground and background means must differ by at least 0.1"
            )));
        }
        if self.noise_sigma < 0.0 || self.texture_amp < 0.0 || !(self.gamma > 0.0) {
            return Err(Error::Config(format!("{name}: invalid noise, texture or gamma")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl SplitCounts {
    pub fn uniform(n: usize) -> Self {
        SplitCounts {
            source_train: n,
            source_val: n,
            target_train: n,
            target_test: n,
        }
    }

    fn get(&self, split: &str) -> usize {
        match split {
            "source_train" => self.source_train,
            "source_val" => self.source_val,
            "target_train" => self.target_train,
            _ => self.target_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_images: SplitCounts,
    pub image_size: usize,
    /// Inclusive range.
    pub blobs_per_image: [usize; 2],
    /// Inclusive range of mean blob radii in pixels.
    pub blob_radius: [f64; 2],
    pub source_style: Style,
    pub target_style: Style,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: SplitCounts {
                source_train: 200,
                source_val: 100,
                target_train: 200,
                target_test: 100,
            },
            image_size: 64,
            blobs_per_image: [1, 3],
            blob_radius: [5.0, 11.0],
            source_style: Style::source_default(),
            target_style: Style::target_default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        let [lo, hi] = self.blob_radius;
        if !(lo > 0.0) || hi < lo {
            return Err(Error::Config(format!("invalid blob radius range [{lo}, {hi}]")));
        }
        if hi >= self.image_size as f64 / 2.0 {
            return Err(Error::Config(format!(
                "blob radius {hi} must be below half the image size {}",
                self.image_size
            )));
        }
        let [bmin, bmax] = self.blobs_per_image;
        if bmin == 0 || bmax < bmin {
            return Err(Error::Config(format!(
                "invalid blobs_per_image range [{bmin}, {bmax}]"
            )));
        }
        self.source_style.validate("source_style")?;
        self.target_style.validate("target_style")
    }

    fn style(&self, domain: Domain) -> &Style {
        match domain {
            Domain::Source => &self.source_style,
            Domain::Target => &self.target_style,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub count: usize,
    pub mean_foreground_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub splits: Vec<SplitSummary>,
}

/// SplitMix64 finalizer; decorrelates per-image seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one image, so images can be produced in any order.
fn image_rng(seed: u64, split_index: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ mix(((split_index as u64) << 40) | index as u64)))
}

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64, radius: [f64; 2]) -> Self {
        let r = rng.gen_range(radius[0]..=radius[1]);
        let aspect: f64 = rng.gen_range(0.75..=1.3);
        let (a, b) = (r * aspect.sqrt(), r / aspect.sqrt());
        let margin = a.max(b) * 1.2 + 1.0;
        let span = (size - 2.0 * margin).max(1.0);
        Blob {
            cx: margin + rng.gen::<f64>() * span,
            cy: margin + rng.gen::<f64>() * span,
            a,
            b,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            harmonics: [
                (rng.gen_range(0.0..0.12), rng.gen_range(0.0..std::f64::consts::TAU)),
                (rng.gen_range(0.0..0.08), rng.gen_range(0.0..std::f64::consts::TAU)),
            ],
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let edge = 1.0
            + self.harmonics[0].0 * (2.0 * theta + self.harmonics[0].1).cos()
            + self.harmonics[1].0 * (3.0 * theta + self.harmonics[1].1).cos();
        rho <= edge
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Renders one image/mask pair.
fn render(cfg: &SynthConfig, style: &Style, rng: &mut ChaCha8Rng) -> (Map, Mask) {
    let n = cfg.image_size;
    let size = n as f64;
    let mask = loop {
        let count = rng.gen_range(cfg.blobs_per_image[0]..=cfg.blobs_per_image[1]);
        let blobs: Vec<Blob> = (0..count)
            .map(|_| Blob::random(rng, size, cfg.blob_radius))
            .collect();
        let values: Vec<u8> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                u8::from(blobs.iter().any(|b| b.contains(x, y)))
            })
            .collect();
        let fg = values.iter().filter(|&&v| v == 1).count();
        if fg >= 1 && 2 * fg <= n * n {
            break Mask::new(n, n, values).expect("square mask");
        }
    };

    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let f = style.texture_freq * rng.gen_range(0.7..1.3) * std::f64::consts::TAU / size;
            Wave {
                kx: f * dir.cos(),
                ky: f * dir.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let fg_jitter = rng.gen_range(-0.03..0.03);
    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).expect("finite sigma");

    let mut data = Vec::with_capacity(n * n * 3);
    for (i, &m) in mask.values().iter().enumerate() {
        let (x, y) = ((i % n) as f64, (i / n) as f64);
        let texture: f64 = waves
            .iter()
            .map(|w| (w.kx * x + w.ky * y + w.phase).sin())
            .sum::<f64>()
            / waves.len() as f64;
        let base = if m == 1 {
            style.fg_mean + fg_jitter + 0.5 * style.texture_amp * texture
        } else {
            style.bg_mean + style.texture_amp * texture
        };
        let v = if style.noise_sigma > 0.0 {
            base + noise.sample(rng)
        } else {
            base
        };
        let v = v.clamp(0.0, 1.0).powf(style.gamma);
        for gain in style.tint {
            data.push((v * gain).clamp(0.0, 1.0));
        }
    }
    (Map::new(n, n, 3, data).expect("rgb image"), mask)
}

/// Generates one split in memory; images are quantized to 8 bits so the
/// result equals what the loader reads back from disk.
pub fn generate_split(cfg: &SynthConfig, split: &str) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    let split_index = SPLITS
        .iter()
        .position(|s| *s == split)
        .ok_or_else(|| Error::Config(format!("unknown split {split}")))?;
    let domain = Domain::of_split(split);
    let style = cfg.style(domain);
    (0..cfg.n_images.get(split))
        .map(|i| {
            let mut rng = image_rng(cfg.seed, split_index, i);
            let (mut image, mask) = render(cfg, style, &mut rng);
            for v in image.data_mut() {
                *v = crate::data::to_u8(*v) as f64 / 255.0;
            }
            ImageSample::new(format!("img_{i:04}"), image, Some(mask), domain)
        })
        .collect()
}

/// Writes all four splits under `out_root` in the dataset layout, plus
/// `synth_config.json`.
pub fn generate_dataset(cfg: &SynthConfig, out_root: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let mut splits = Vec::new();
    for split in SPLITS {
        let samples = generate_split(cfg, split)?;
        let img_dir = out_root.join(split).join("images");
        let mask_dir = out_root.join(split).join("masks");
        for d in [&img_dir, &mask_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut fg = 0.0;
        for s in &samples {
            let mask = s.mask.as_ref().expect("generated with mask");
            write_rgb_png(&img_dir.join(format!("{}.png", s.sample_id)), &s.image)?;
            write_mask_png(&mask_dir.join(format!("{}.png", s.sample_id)), mask)?;
            fg += mask.foreground_fraction();
        }
        splits.push(SplitSummary {
            split: split.to_string(),
            count: samples.len(),
            mean_foreground_fraction: if samples.is_empty() {
                0.0
            } else {
                fg / samples.len() as f64
            },
        });
    }
    let path = out_root.join("synth_config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&path, e))?;
    Ok(SynthSummary { splits })
}
