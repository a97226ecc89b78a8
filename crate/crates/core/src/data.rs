// SPDX-License-Identifier: Apache-2.0

//! Shared data model: dense per-pixel maps, image samples and the on-disk
//! dataset layout (`<root>/<split>/images/<id>.png`, `<root>/<split>/masks/<id>.png`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes (background, foreground).
pub const NUM_CLASSES: usize = 2;

/// Foreground class index.
pub const FOREGROUND: usize = 1;

pub const SPLITS: [&str; 4] = ["source_train", "source_val", "target_train", "target_test"];

/// Dense `h × w × c` map stored pixel-major (channels fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Map {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "expected {}x{}x{} = {} values, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        Ok(Map { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Map {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.w + x) * self.c;
        &mut self.data[i..i + self.c]
    }

    /// Iterates over per-pixel channel vectors in raster order.
    pub fn iter_pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.c)
    }

    pub fn same_grid(&self, other: &Map) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

macro_rules! map_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Map);

        impl $name {
            pub fn map(&self) -> &Map {
                &self.0
            }

            pub fn into_map(self) -> Map {
                self.0
            }

            pub fn height(&self) -> usize {
                self.0.h
            }

            pub fn width(&self) -> usize {
                self.0.w
            }

            pub fn channels(&self) -> usize {
                self.0.c
            }

            pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
                self.0.pixel(y, x)
            }
        }
    };
}

map_newtype!(
    /// Pre-softmax class scores.
    LogitMap
);
map_newtype!(
    /// Per-pixel class distributions.
    ProbabilityMap
);
map_newtype!(
    /// Penultimate-layer activations at pixel resolution.
    FeatureMap
);

impl LogitMap {
    pub fn new(map: Map) -> Result<Self> {
        if !map.is_finite() {
            return Err(Error::NonFinite("logit map".into()));
        }
        Ok(LogitMap(map))
    }
}

impl ProbabilityMap {
    pub fn new(map: Map) -> Result<Self> {
        for (i, px) in map.iter_pixels().enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Shape(format!(
                    "pixel {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(ProbabilityMap(map))
    }

    /// Foreground probability as an `h × w` plane.
    pub fn foreground(&self) -> Vec<f64> {
        self.0.iter_pixels().map(|px| px[FOREGROUND]).collect()
    }

    /// Per-pixel argmax; ties resolve to the lower class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.0.iter_pixels().map(argmax).collect()
    }
}

impl FeatureMap {
    pub fn new(map: Map) -> Result<Self> {
        if !map.is_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(FeatureMap(map))
    }
}

/// Normalized per-pixel entropy in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape(format!(
                "entropy map expects {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("entropy values outside [0, 1]".into()));
        }
        Ok(EntropyMap { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one class vector.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-pixel softmax over the class channels.
pub fn softmax_map(logits: &LogitMap) -> Result<ProbabilityMap> {
    let m = logits.map();
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = Map::zeros(m.h, m.w, m.c);
    for (src, dst) in m.data.chunks_exact(m.c).zip(out.data.chunks_exact_mut(m.c)) {
        softmax_into(src, dst);
    }
    Ok(ProbabilityMap(out))
}

/// Binary segmentation mask, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape(format!(
                "mask expects {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Mask { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.values.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn of_split(split: &str) -> Domain {
        if split.starts_with("target") {
            Domain::Target
        } else {
            Domain::Source
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    /// `h × w × 3`, values in `[0, 1]`.
    pub image: Map,
    pub mask: Option<Mask>,
    pub domain: Domain,
}

impl ImageSample {
    pub fn new(
        sample_id: impl Into<String>,
        image: Map,
        mask: Option<Mask>,
        domain: Domain,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if image.channels() != 3 {
            return Err(Error::Sample {
                sample_id,
                message: format!("image has {} channels, expected 3", image.channels()),
            });
        }
        if let Some(m) = &mask {
            if m.h != image.h || m.w != image.w {
                return Err(Error::Sample {
                    sample_id,
                    message: format!(
                        "image is {}x{} but mask is {}x{}",
                        image.h, image.w, m.h, m.w
                    ),
                });
            }
        }
        Ok(ImageSample {
            sample_id,
            image,
            mask,
            domain,
        })
    }

    pub fn height(&self) -> usize {
        self.image.h
    }

    pub fn width(&self) -> usize {
        self.image.w
    }

    /// Returns a copy with the ground truth removed.
    pub fn without_mask(&self) -> ImageSample {
        ImageSample {
            mask: None,
            ..self.clone()
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if out.insert(stem.to_string(), path.clone()).is_some() {
            return Err(Error::DuplicateSample(stem.to_string()));
        }
    }
    Ok(out)
}

/// Loads every sample of `split`, sorted by sample id. Masks are attached
/// when a `masks/` directory exists next to `images/`.
pub fn load_dataset(root: impl AsRef<Path>, split: &str) -> Result<Vec<ImageSample>> {
    let split_dir = root.as_ref().join(split);
    let image_dir = split_dir.join("images");
    if !image_dir.is_dir() {
        return Err(Error::MissingDirectory(image_dir));
    }
    let mask_dir = split_dir.join("masks");
    let masks = if mask_dir.is_dir() {
        Some(png_stems(&mask_dir)?)
    } else {
        None
    };
    let domain = Domain::of_split(split);

    let mut samples = Vec::new();
    for (id, path) in png_stems(&image_dir)? {
        let image = read_rgb_png(&path)?;
        let mask = match &masks {
            Some(m) => {
                let mpath = m.get(&id).ok_or_else(|| Error::Sample {
                    sample_id: id.clone(),
                    message: "mask file missing".into(),
                })?;
                Some(read_mask_png(mpath)?)
            }
            None => None,
        };
        samples.push(ImageSample::new(id, image, mask, domain)?);
    }
    Ok(samples)
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads an 8-bit PNG as an `h × w × 3` map in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Map> {
    let (info, buf) = decode_png(path)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.color_type.samples();
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf.chunks_exact(stride) {
        match info.color_type {
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
                let v = px[0] as f64 / 255.0;
                data.extend_from_slice(&[v, v, v]);
            }
            _ => data.extend(px[..3].iter().map(|&v| v as f64 / 255.0)),
        }
    }
    Map::new(h, w, 3, data)
}

/// Reads a grayscale mask PNG; values ≥ 128 become foreground.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let (info, buf) = decode_png(path)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.color_type.samples();
    let values = buf
        .chunks_exact(stride)
        .map(|px| u8::from(px[0] >= 128))
        .collect();
    Mask::new(h, w, values)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(bytes).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, image: &Map) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape("rgb png needs 3 channels".into()));
    }
    let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    write_png(path, image.w, image.h, png::ColorType::Rgb, &bytes)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.values.iter().map(|&v| v * 255).collect();
    write_png(path, mask.w, mask.h, png::ColorType::Grayscale, &bytes)
}

/// Writes a plane of values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape("gray png size".into()));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}
