// SPDX-License-Identifier: Apache-2.0

//! Small encoder–decoder segmentation network with a penultimate feature tap,
//! plus checkpoint persistence.
//!
//! Layout (stride in brackets):
//!
//! ```text
//! image ─ conv(w0) [1] ─ pool ─ conv(w1) [2] ─ pool ─ conv(w2) [4] ─ pool ─ conv(w3) ─ conv(w3) [8]
//!                                                       │                                  │
//!                                                       └──────── concat ◄── upsample ◄────┘
//!                                                                   │
//!                                                       conv(K) [4] = features ─ 1×1 conv(C) = logits
//! ```
//!
//! Features and logits leave the decoder at stride 4 and are bilinearly
//! resampled to the input resolution.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMap, LogitMap, Map};
use crate::error::{Error, Result};
use crate::layers::{self, Bilinear, Conv, Tensor};

/// Input standardization applied inside the network.
const INPUT_MEAN: f64 = 0.5;
const INPUT_SCALE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    /// Encoder widths, one per stage.
    pub widths: [usize; 4],
    /// Penultimate feature channels (K).
    pub feature_channels: usize,
    /// Output classes (C).
    pub num_classes: usize,
    /// Subtract the per-pixel mean from the classifier output so logits sum
    /// to zero over classes.
    pub centered_logits: bool,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            in_channels: 3,
            widths: [16, 32, 64, 128],
            feature_channels: 64,
            num_classes: 2,
            centered_logits: true,
        }
    }
}

impl ArchDescriptor {
    /// Spatial dimensions must be multiples of this.
    pub const TOTAL_STRIDE: usize = 8;

    fn convs(&self) -> Vec<Conv> {
        let [w0, w1, w2, w3] = self.widths;
        let shapes = [
            (self.in_channels, w0, 3),
            (w0, w1, 3),
            (w1, w2, 3),
            (w2, w3, 3),
            (w3, w3, 3),
            (w3 + w2, self.feature_channels, 3),
            (self.feature_channels, self.num_classes, 1),
        ];
        let mut off = 0;
        shapes
            .iter()
            .map(|&(cin, cout, k)| {
                let conv = Conv {
                    cin,
                    cout,
                    k,
                    w_off: off,
                    b_off: off + cout * cin * k * k,
                };
                off += conv.param_len();
                conv
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(Conv::param_len).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.widths.contains(&0)
            || self.feature_channels == 0
            || self.num_classes < 2
        {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel channel centering of a CHW tensor; self-adjoint.
fn center_channels(t: &mut Tensor) {
    let plane = t.h * t.w;
    for i in 0..plane {
        let mean = (0..t.c).map(|k| t.data[k * plane + i]).sum::<f64>() / t.c as f64;
        for k in 0..t.c {
            t.data[k * plane + i] -= mean;
        }
    }
}

const LAYER_NAMES: [&str; 7] = ["enc1", "enc2", "enc3", "enc4", "enc4b", "dec", "classifier"];

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    arch: ArchDescriptor,
    convs: Vec<Conv>,
    params: Vec<f64>,
}

/// Intermediate state of one forward pass, consumed by `backward`.
pub(crate) struct Trace {
    h: usize,
    w: usize,
    cols: Vec<Vec<f64>>,
    acts: Vec<Tensor>,
    pools: Vec<(Vec<usize>, usize, usize, usize)>,
    up: Bilinear,
    /// Full-resolution logits, pixel-major.
    pub logits: Map,
    /// Full-resolution features, pixel-major.
    pub features: Map,
}

impl SegNet {
    /// He-initialized network.
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        let mut net = SegNet::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &net.convs {
            let fan_in = (conv.cin * conv.k * conv.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for p in &mut net.params[conv.w_off..conv.w_off + conv.weight_len()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(net)
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let convs = arch.convs();
        let params = vec![0.0; arch.num_params()];
        Ok(SegNet {
            arch,
            convs,
            params,
        })
    }

    pub fn from_params(arch: ArchDescriptor, params: Vec<f64>) -> Result<Self> {
        let mut net = SegNet::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(Error::Architecture(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check(name: &str, t: &Tensor) -> Result<()> {
        if t.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("activations of layer {name}")))
        }
    }

    pub(crate) fn forward_trace(&self, image: &Map) -> Result<Trace> {
        let (h, w) = (image.height(), image.width());
        let s = ArchDescriptor::TOTAL_STRIDE;
        if image.channels() != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.arch.in_channels,
                image.channels()
            )));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not a multiple of the network stride {s}"
            )));
        }
        let mut x = Tensor::from_hwc(h, w, image.channels(), image.data());
        for v in x.data.iter_mut() {
            *v = (*v - INPUT_MEAN) * INPUT_SCALE;
        }

        let mut cols = Vec::with_capacity(7);
        let mut acts = Vec::with_capacity(7);
        let mut pools = Vec::with_capacity(3);
        let conv_relu = |i: usize, input: &Tensor, cols: &mut Vec<Vec<f64>>| -> Result<Tensor> {
            let (mut y, col) = self.convs[i].forward(&self.params, input);
            layers::relu_inplace(&mut y);
            Self::check(LAYER_NAMES[i], &y)?;
            cols.push(col);
            Ok(y)
        };

        let a1 = conv_relu(0, &x, &mut cols)?;
        let (p1, i1) = layers::maxpool2(&a1);
        pools.push((i1, a1.c, a1.h, a1.w));
        let a2 = conv_relu(1, &p1, &mut cols)?;
        let (p2, i2) = layers::maxpool2(&a2);
        pools.push((i2, a2.c, a2.h, a2.w));
        let a3 = conv_relu(2, &p2, &mut cols)?;
        let (p3, i3) = layers::maxpool2(&a3);
        pools.push((i3, a3.c, a3.h, a3.w));
        let a4 = conv_relu(3, &p3, &mut cols)?;
        let a5 = conv_relu(4, &a4, &mut cols)?;
        let cat = layers::concat(&layers::upsample_nearest2(&a5), &a3);
        let feat = conv_relu(5, &cat, &mut cols)?;
        let (mut z, col) = self.convs[6].forward(&self.params, &feat);
        Self::check(LAYER_NAMES[6], &z)?;
        if self.arch.centered_logits {
            center_channels(&mut z);
        }
        cols.push(col);

        let up = Bilinear::resize(feat.h, feat.w, h, w);
        let logits = Map::new(h, w, z.c, up.apply_tensor(&z).to_hwc())?;
        let features = Map::new(h, w, feat.c, up.apply_tensor(&feat).to_hwc())?;
        acts.extend([a1, a2, a3, a4, a5, feat]);
        Ok(Trace {
            h,
            w,
            cols,
            acts,
            pools,
            up,
            logits,
            features,
        })
    }

    /// Evaluation forward pass: full-resolution logits and features.
    pub fn forward(&self, image: &Map) -> Result<(LogitMap, FeatureMap)> {
        let t = self.forward_trace(image)?;
        Ok((LogitMap::new(t.logits)?, FeatureMap::new(t.features)?))
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// derivatives w.r.t. the full-resolution logits (and optionally features)
    /// are given pixel-major.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        dfeatures: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        let (h, w) = (trace.h, trace.w);
        let c = self.arch.num_classes;
        let k = self.arch.feature_channels;
        let mut dz = trace.up.adjoint_tensor(&Tensor::from_hwc(h, w, c, dlogits));
        if self.arch.centered_logits {
            center_channels(&mut dz);
        }
        let mut dfeat = self.convs[6]
            .backward(&self.params, &trace.cols[6], &dz, grad, true)
            .expect("input grad requested");
        if let Some(df) = dfeatures {
            let extra = trace.up.adjoint_tensor(&Tensor::from_hwc(h, w, k, df));
            for (a, b) in dfeat.data.iter_mut().zip(&extra.data) {
                *a += b;
            }
        }
        let acts = &trace.acts;
        layers::relu_backward(&acts[5], &mut dfeat);
        let dcat = self.convs[5]
            .backward(&self.params, &trace.cols[5], &dfeat, grad, true)
            .unwrap();
        let (dup, mut da3) = layers::split(dcat, self.arch.widths[3]);
        let mut da5 = layers::upsample_nearest2_backward(&dup);
        layers::relu_backward(&acts[4], &mut da5);
        let mut da4 = self.convs[4]
            .backward(&self.params, &trace.cols[4], &da5, grad, true)
            .unwrap();
        layers::relu_backward(&acts[3], &mut da4);
        let dp3 = self.convs[3]
            .backward(&self.params, &trace.cols[3], &da4, grad, true)
            .unwrap();
        let (idx, pc, ph, pw) = &trace.pools[2];
        let from_pool = layers::maxpool2_backward(&dp3, idx, *pc, *ph, *pw);
        for (a, b) in da3.data.iter_mut().zip(&from_pool.data) {
            *a += b;
        }
        layers::relu_backward(&acts[2], &mut da3);
        let dp2 = self.convs[2]
            .backward(&self.params, &trace.cols[2], &da3, grad, true)
            .unwrap();
        let (idx, pc, ph, pw) = &trace.pools[1];
        let mut da2 = layers::maxpool2_backward(&dp2, idx, *pc, *ph, *pw);
        layers::relu_backward(&acts[1], &mut da2);
        let dp1 = self.convs[1]
            .backward(&self.params, &trace.cols[1], &da2, grad, true)
            .unwrap();
        let (idx, pc, ph, pw) = &trace.pools[0];
        let mut da1 = layers::maxpool2_backward(&dp1, idx, *pc, *ph, *pw);
        layers::relu_backward(&acts[0], &mut da1);
        self.convs[0].backward(&self.params, &trace.cols[0], &da1, grad, false);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Source,
    Adapted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: Stage,
    pub epochs: usize,
    pub config_hash: String,
}

/// Weights + architecture + provenance; stored on disk as a tar archive with
/// `descriptor.json`, `provenance.json` and little-endian `weights.bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModelCheckpoint {
    pub arch: ArchDescriptor,
    pub provenance: Provenance,
    pub weights: Vec<f64>,
}

impl SegModelCheckpoint {
    pub fn from_model(model: &SegNet, provenance: Provenance) -> Self {
        SegModelCheckpoint {
            arch: model.arch.clone(),
            provenance,
            weights: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> Result<SegNet> {
        SegNet::from_params(self.arch.clone(), self.weights.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut builder = tar::Builder::new(std::io::BufWriter::new(file));
        let weights: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        let entries: [(&str, Vec<u8>); 3] = [
            ("descriptor.json", serde_json::to_vec_pretty(&self.arch)?),
            ("provenance.json", serde_json::to_vec_pretty(&self.provenance)?),
            ("weights.bin", weights),
        ];
        for (name, bytes) in entries {
            let mut header = tar::Header::new_gnu();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder
                .append_data(&mut header, name, bytes.as_slice())
                .map_err(|e| Error::io(path, e))?;
        }
        let mut inner = builder.into_inner().map_err(|e| Error::io(path, e))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut archive = tar::Archive::new(std::io::BufReader::new(file));
        let (mut arch, mut prov, mut weights) = (None, None, None);
        for entry in archive.entries().map_err(|e| Error::io(path, e))? {
            let mut entry = entry.map_err(|e| Error::io(path, e))?;
            let name = entry
                .path()
                .map_err(|e| Error::io(path, e))?
                .to_string_lossy()
                .into_owned();
            let mut bytes = Vec::new();
            entry
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            match name.as_str() {
                "descriptor.json" => arch = Some(serde_json::from_slice(&bytes)?),
                "provenance.json" => prov = Some(serde_json::from_slice(&bytes)?),
                "weights.bin" => {
                    if bytes.len() % 8 != 0 {
                        return Err(Error::Checkpoint("truncated weights blob".into()));
                    }
                    weights = Some(
                        bytes
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect::<Vec<_>>(),
                    );
                }
                other => return Err(Error::Checkpoint(format!("unexpected entry {other}"))),
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("{} missing {what}", path.display()));
        let ckpt = SegModelCheckpoint {
            arch: arch.ok_or_else(|| missing("descriptor.json"))?,
            provenance: prov.ok_or_else(|| missing("provenance.json"))?,
            weights: weights.ok_or_else(|| missing("weights.bin"))?,
        };
        if ckpt.weights.len() != ckpt.arch.num_params() {
            return Err(Error::Checkpoint(format!(
                "weights blob has {} values, descriptor needs {}",
                ckpt.weights.len(),
                ckpt.arch.num_params()
            )));
        }
        Ok(ckpt)
    }
}

/// Builds the target model as an exact copy of the source weights.
pub fn init_target_from_source(
    source: &SegModelCheckpoint,
    arch: &ArchDescriptor,
) -> Result<SegNet> {
    if &source.arch != arch {
        return Err(Error::Architecture(format!(
            "checkpoint {:?} does not match requested {:?}",
            source.arch, arch
        )));
    }
    source.to_model()
}
