// SPDX-License-Identifier: Apache-2.0

//! Two-stage training: supervised source pre-training, then source-free
//! adaptation on unlabeled target images with the combined objective
//! `β·L_fcl + γ·L_ccpl`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{Augment, AugmentConfig};
use crate::ccpl::{self, CcplConfig, PseudoLabelStore};
use crate::data::{
    softmax_into, Domain, FeatureMap, ImageSample, LogitMap, Map, ProbabilityMap,
    NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::fcl::{self, Centroid, CentroidBank, FclConfig};
use crate::metrics::{evaluate_dataset, MetricMeans};
use crate::net::{init_target_from_source, ArchDescriptor, Provenance, SegModelCheckpoint, SegNet, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both loss terms.
    Full,
    NoFcl,
    NoCcpl,
    /// Neither term; only meaningful as "evaluate the source model as is".
    None,
}

impl Ablation {
    pub fn uses_fcl(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoCcpl)
    }

    pub fn uses_ccpl(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoFcl)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the contrastive term.
    pub beta: f64,
    /// Weight of the pseudo-label term.
    pub gamma: f64,
    /// Adaptation learning rate.
    pub lr0: f64,
    /// Source pre-training learning rate (the model starts from scratch).
    pub source_lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    /// Adaptation epochs.
    pub epochs: usize,
    /// Source pre-training epochs.
    pub source_epochs: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub fcl: FclConfig,
    pub ccpl: CcplConfig,
    pub arch: ArchDescriptor,
    /// Target images exported as heat/entropy maps during adaptation.
    pub viz_samples: usize,
    /// Export maps every this many epochs (and after the last one).
    pub viz_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            gamma: 1.0,
            lr0: 2.5e-4,
            source_lr0: 1e-2,
            momentum: 0.9,
            poly_power: 0.9,
            batch_size: 4,
            epochs: 20,
            source_epochs: 20,
            augment: AugmentConfig::default(),
            seed: 0,
            ablation: Ablation::Full,
            fcl: FclConfig::default(),
            ccpl: CcplConfig::default(),
            arch: ArchDescriptor::default(),
            viz_samples: 4,
            viz_every: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return bad("beta and gamma must be >= 0");
        }
        if self.epochs == 0 || self.source_epochs == 0 {
            return bad("epochs and source_epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr0 >= 0.0) || !(self.source_lr0 >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.poly_power >= 0.0) {
            return bad("poly_power must be >= 0");
        }
        self.fcl.validate()?;
        self.ccpl.validate()
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// `lr0 · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Config("poly_lr needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::Config(format!("iteration {iter} beyond {max_iter}")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    fn new(n: usize, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Per-pixel softmax of a raw logit map.
pub(crate) fn softmax_plain(logits: &Map) -> Map {
    let c = logits.channels();
    let mut out = Map::zeros(logits.height(), logits.width(), c);
    for (src, dst) in logits.iter_pixels().zip(out.data_mut().chunks_exact_mut(c)) {
        softmax_into(src, dst);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub ce: Option<f64>,
    pub fcl: Option<f64>,
    pub ccpl: Option<f64>,
    pub total: f64,
}

type LossColumn = (&'static str, fn(&EpochLog) -> Option<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: Option<f64>,
    pub fcl: Option<f64>,
    pub ccpl: Option<f64>,
    pub total: f64,
    pub eval: Option<MetricMeans>,
}

/// Everything a training stage produced.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: Option<PathBuf>,
    pub stage: Stage,
    pub config: TrainConfig,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub iterations: Vec<IterLog>,
}

impl RunRecord {
    fn new(dir: Option<&Path>, stage: Stage, config: &TrainConfig) -> Result<Self> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join("config.json");
            std::fs::write(&path, serde_json::to_vec_pretty(config)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunRecord {
            dir: dir.map(Path::to_path_buf),
            stage,
            config: config.clone(),
            config_hash: config.hash(),
            epochs: Vec::new(),
            iterations: Vec::new(),
        })
    }

    fn provenance(&self, epochs: usize) -> Provenance {
        Provenance {
            stage: self.stage,
            epochs,
            config_hash: self.config_hash.clone(),
        }
    }

    fn checkpoint(&self, model: &SegNet, epoch: usize) -> Result<SegModelCheckpoint> {
        let ckpt = SegModelCheckpoint::from_model(model, self.provenance(epoch));
        if let Some(d) = &self.dir {
            ckpt.save(&d.join(format!("ckpt_epoch_{epoch}")))?;
        }
        Ok(ckpt)
    }

    fn loss_columns(&self) -> Vec<LossColumn> {
        let mut cols: Vec<LossColumn> = Vec::new();
        match self.stage {
            Stage::Source => cols.push(("loss_ce", |e| e.ce)),
            Stage::Adapted => {
                if self.config.ablation.uses_fcl() {
                    cols.push(("loss_fcl", |e| e.fcl));
                }
                if self.config.ablation.uses_ccpl() {
                    cols.push(("loss_ccpl", |e| e.ccpl));
                }
            }
        }
        cols
    }

    /// `metrics.csv`: one row per epoch with each active loss term and the
    /// monitored metrics (blank when no labelled split was monitored).
    pub fn metrics_csv(&self) -> String {
        let cols = self.loss_columns();
        let mut s = String::from("epoch");
        for (name, _) in &cols {
            s.push(',');
            s.push_str(name);
        }
        s.push_str(",loss_total,dice,iou,weighted_f,s_measure,e_measure_max,mae\n");
        for e in &self.epochs {
            let _ = write!(s, "{}", e.epoch);
            for (_, get) in &cols {
                let _ = write!(s, ",{:.8}", get(e).unwrap_or(f64::NAN));
            }
            let _ = write!(s, ",{:.8}", e.total);
            match &e.eval {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                        m.dice, m.iou, m.weighted_f, m.s_measure, m.e_measure_max, m.mae
                    );
                }
                None => s.push_str(",,,,,,\n"),
            }
        }
        s
    }

    /// `losses.csv`: one row per iteration.
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("epoch,iter,lr,loss_ce,loss_fcl,loss_ccpl,loss_total\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        for it in &self.iterations {
            let _ = writeln!(
                s,
                "{},{},{:.6e},{},{},{},{:.10}",
                it.epoch,
                it.iter,
                it.lr,
                opt(it.ce),
                opt(it.fcl),
                opt(it.ccpl),
                it.total
            );
        }
        s
    }

    fn flush_logs(&self) -> Result<()> {
        if let Some(d) = &self.dir {
            for (name, body) in [
                ("metrics.csv", self.metrics_csv()),
                ("losses.csv", self.losses_csv()),
            ] {
                let path = d.join(name);
                std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    fn finish(&self, ckpt: &SegModelCheckpoint) -> Result<()> {
        self.flush_logs()?;
        if let Some(d) = &self.dir {
            ckpt.save(&d.join("model.ckpt"))?;
        }
        Ok(())
    }
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn one_hot(mask: &crate::data::Mask) -> Map {
    let mut m = Map::zeros(mask.height(), mask.width(), NUM_CLASSES);
    for (px, &v) in m.data_mut().chunks_exact_mut(NUM_CLASSES).zip(mask.values()) {
        px[v as usize] = 1.0;
    }
    m
}

/// Supervised cross-entropy training on labelled source images. Returns the
/// checkpoint with the best mean Dice on `val` (or the last one if `val` is empty).
pub fn pretrain_source(
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(SegModelCheckpoint, RunRecord)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("source pre-training needs at least one image".into()));
    }
    for s in train.iter().chain(val) {
        if s.mask.is_none() {
            return Err(Error::Sample {
                sample_id: s.sample_id.clone(),
                message: "source pre-training needs every sample to carry a mask".into(),
            });
        }
    }
    let mut record = RunRecord::new(run_dir, Stage::Source, cfg)?;
    let mut model = SegNet::new(cfg.arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001);
    let mut sgd = Sgd::new(model.num_params(), cfg.momentum);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let max_iter = per_epoch * cfg.source_epochs;
    let mut grad = vec![0.0; model.num_params()];
    let mut best: Option<(f64, SegModelCheckpoint)> = None;
    let mut iter = 0;

    for epoch in 1..=cfg.source_epochs {
        let mut epoch_loss = 0.0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in &batch {
                let s = &train[i];
                let aug = Augment::sample(&cfg.augment, &mut rng);
                let image = aug.apply_image(&s.image);
                let target = one_hot(&aug.apply_mask(s.mask.as_ref().expect("checked")));
                let trace = model.forward_trace(&image)?;
                let probs = softmax_plain(&trace.logits);
                loss += scale
                    * ccpl::soft_ce_loss(
                        &ProbabilityMap::new(probs.clone())?,
                        &ccpl::SoftPseudoLabel::new(target.clone())?,
                    )?;
                let mut dlogits = vec![0.0; probs.data().len()];
                ccpl::soft_ce_backward(&probs, &target, scale, &mut dlogits);
                model.backward(&trace, &dlogits, None, &mut grad);
            }
            let lr = poly_lr(iter, max_iter, cfg.source_lr0, cfg.poly_power)?;
            sgd.step(model.params_mut(), &grad, lr);
            record.iterations.push(IterLog {
                epoch,
                iter,
                lr,
                ce: Some(loss),
                fcl: None,
                ccpl: None,
                total: loss,
            });
            epoch_loss += loss;
            iter += 1;
        }
        let eval = if val.is_empty() {
            None
        } else {
            Some(evaluate_dataset(&model, val)?.mean)
        };
        let mean_loss = epoch_loss / per_epoch as f64;
        log::info!(
            "pretrain epoch {epoch}/{}: ce {mean_loss:.4} val dice {:.4}",
            cfg.source_epochs,
            eval.as_ref().map_or(f64::NAN, |m| m.dice)
        );
        let ckpt = record.checkpoint(&model, epoch)?;
        let score = eval.as_ref().map_or(epoch as f64, |m| m.dice);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, ckpt));
        }
        record.epochs.push(EpochLog {
            epoch,
            ce: Some(mean_loss),
            fcl: None,
            ccpl: None,
            total: mean_loss,
            eval,
        });
        record.flush_logs()?;
    }
    let (_, ckpt) = best.expect("at least one epoch");
    record.finish(&ckpt)?;
    Ok((ckpt, record))
}

/// Source of the CCPL training target for one image.
#[derive(Clone, Debug)]
pub enum PseudoTarget {
    /// Previous-round logits aligned with the view; fused with the current
    /// (detached) logits of the same forward pass.
    FuseWith(Map),
    /// A fixed soft label.
    Fixed(Map),
}

/// One augmented target view in an adaptation batch.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub sample_id: String,
    pub image: Map,
    pub target: Option<PseudoTarget>,
    /// Class probabilities from the frozen source model, used for region
    /// assignment and confidence weights instead of the current prediction.
    pub frozen_stats: Option<Map>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub fcl: Option<f64>,
    pub ccpl: Option<f64>,
    pub total: f64,
}

/// Evaluates `β·L_fcl + γ·L_ccpl` over a batch and accumulates its parameter
/// gradient into `grad`. Returns the batch centroids (not yet in the bank).
pub fn adaptation_objective(
    model: &SegNet,
    items: &[BatchItem],
    bank: &CentroidBank,
    cfg: &TrainConfig,
    grad: &mut [f64],
) -> Result<(StepLoss, Vec<Centroid>)> {
    let use_fcl = cfg.ablation.uses_fcl();
    let use_ccpl = cfg.ablation.uses_ccpl();
    let inv_b = 1.0 / items.len().max(1) as f64;
    let mut traces = Vec::with_capacity(items.len());
    let mut probs = Vec::with_capacity(items.len());
    for item in items {
        let t = model.forward_trace(&item.image)?;
        probs.push(softmax_plain(&t.logits));
        traces.push(t);
    }
    let mut dlogits: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.data().len()]).collect();

    let mut ccpl_loss = None;
    if use_ccpl {
        let mut sum = 0.0;
        for ((item, trace), (p, dl)) in items.iter().zip(&traces).zip(probs.iter().zip(&mut dlogits)) {
            let target = match &item.target {
                Some(PseudoTarget::FuseWith(prev)) => {
                    ccpl::fuse_maps(&trace.logits, prev, cfg.ccpl.alpha)?
                }
                Some(PseudoTarget::Fixed(t)) => t.clone(),
                None => {
                    return Err(Error::Sample {
                        sample_id: item.sample_id.clone(),
                        message: "pseudo-label term needs a target".into(),
                    })
                }
            };
            sum += ccpl::soft_ce_loss(
                &ProbabilityMap::new(p.clone())?,
                &ccpl::SoftPseudoLabel::new(target.clone())?,
            )?;
            if cfg.gamma != 0.0 {
                ccpl::soft_ce_backward(p, &target, cfg.gamma * inv_b, dl);
            }
        }
        ccpl_loss = Some(sum * inv_b);
    }

    let mut centroids = Vec::new();
    let mut dfeatures: Vec<Option<Vec<f64>>> = vec![None; items.len()];
    let mut fcl_loss = None;
    if use_fcl {
        let mut owner = Vec::new();
        for (i, (item, trace)) in items.iter().zip(&traces).enumerate() {
            let stats = item.frozen_stats.as_ref().unwrap_or(&probs[i]);
            let pm = ProbabilityMap::new(stats.clone())?;
            let ent = fcl::entropy_map(&pm);
            let fm = FeatureMap::new(trace.features.clone())?;
            for c in fcl::region_centroids(&fm, &pm, &ent, &cfg.fcl, &item.sample_id)? {
                owner.push(i);
                centroids.push(c);
            }
        }
        let out = fcl::fcl_loss_with_grad(&centroids, bank, &cfg.fcl);
        fcl_loss = Some(out.loss);
        if cfg.beta != 0.0 && out.anchors > 0 {
            for (i, (item, trace)) in items.iter().zip(&traces).enumerate() {
                let mut dcent: [Option<Vec<f64>>; NUM_CLASSES] = Default::default();
                for ((c, g), _) in centroids
                    .iter()
                    .zip(&out.grads)
                    .zip(&owner)
                    .filter(|(_, &o)| o == i)
                {
                    if let Some(g) = g {
                        dcent[c.class_id] = Some(g.iter().map(|v| v * cfg.beta).collect());
                    }
                }
                if dcent.iter().all(Option::is_none) {
                    continue;
                }
                let mut df = vec![0.0; trace.features.data().len()];
                match &item.frozen_stats {
                    Some(stats) => {
                        let mut sink = vec![0.0; stats.data().len()];
                        fcl::region_centroids_backward(&trace.features, stats, &dcent, &mut df, &mut sink);
                    }
                    None => fcl::region_centroids_backward(
                        &trace.features,
                        &probs[i],
                        &dcent,
                        &mut df,
                        &mut dlogits[i],
                    ),
                }
                dfeatures[i] = Some(df);
            }
        }
    }

    if cfg.beta != 0.0 || cfg.gamma != 0.0 {
        for ((trace, dl), df) in traces.iter().zip(&dlogits).zip(&dfeatures) {
            model.backward(trace, dl, df.as_deref(), grad);
        }
    }
    let total = cfg.beta * fcl_loss.unwrap_or(0.0) + cfg.gamma * ccpl_loss.unwrap_or(0.0);
    Ok((
        StepLoss {
            fcl: fcl_loss,
            ccpl: ccpl_loss,
            total,
        },
        centroids,
    ))
}

fn clean_logits(model: &SegNet, samples: &[ImageSample]) -> Result<BTreeMap<String, LogitMap>> {
    samples
        .iter()
        .map(|s| Ok((s.sample_id.clone(), model.forward(&s.image)?.0)))
        .collect()
}

fn write_viz(dir: &Path, logits: &BTreeMap<String, LogitMap>, ids: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for id in ids {
        if let Some(l) = logits.get(id) {
            crate::viz::write_maps(dir, id, l)?;
        }
    }
    Ok(())
}

/// Source-free adaptation. Only the source checkpoint and unlabeled target
/// images are used; any masks on `target_train` are stripped on entry.
/// `monitor`, when given, is a labelled split scored after every epoch for
/// logging only.
pub fn adapt(
    source: &SegModelCheckpoint,
    target_train: &[ImageSample],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    monitor: Option<&[ImageSample]>,
) -> Result<(SegModelCheckpoint, RunRecord)> {
    cfg.validate()?;
    if cfg.ablation == Ablation::None {
        return Err(Error::Config(
            "ablation 'none' leaves no training signal; evaluate the source checkpoint instead"
                .into(),
        ));
    }
    if target_train.is_empty() {
        return Err(Error::Config("adaptation needs at least one target image".into()));
    }
    if let Some(s) = target_train.iter().find(|s| s.domain != Domain::Target) {
        return Err(Error::Sample {
            sample_id: s.sample_id.clone(),
            message: "adaptation only accepts target-domain images".into(),
        });
    }
    let target: Vec<ImageSample> = target_train.iter().map(ImageSample::without_mask).collect();

    let mut record = RunRecord::new(run_dir, Stage::Adapted, cfg)?;
    let mut model = init_target_from_source(source, &cfg.arch)?;
    let frozen = if cfg.fcl.frozen_source_stats {
        Some(source.to_model()?)
    } else {
        None
    };
    let mut bank = CentroidBank::new(cfg.fcl.bank_capacity);
    let initial = clean_logits(&model, &target)?;
    let viz_ids: Vec<String> = target
        .iter()
        .take(cfg.viz_samples)
        .map(|s| s.sample_id.clone())
        .collect();
    if let Some(d) = run_dir {
        write_viz(&d.join("viz").join("epoch_0"), &initial, &viz_ids)?;
    }
    let mut store = PseudoLabelStore::new(initial)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0002);
    let mut sgd = Sgd::new(model.num_params(), cfg.momentum);
    let per_epoch = target.len().div_ceil(cfg.batch_size);
    let max_iter = per_epoch * cfg.epochs;
    let mut grad = vec![0.0; model.num_params()];
    let mut iter = 0;

    for epoch in 1..=cfg.epochs {
        let (mut sum_fcl, mut sum_ccpl, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in batches(target.len(), cfg.batch_size, &mut rng) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in &batch {
                let s = &target[i];
                let aug = Augment::sample(&cfg.augment, &mut rng);
                let image = aug.apply_image(&s.image);
                let prev = store.get(&s.sample_id).expect("store covers target");
                let frozen_stats = match &frozen {
                    Some(f) => Some(softmax_plain(f.forward(&image)?.0.map())),
                    None => None,
                };
                items.push(BatchItem {
                    sample_id: s.sample_id.clone(),
                    target: Some(PseudoTarget::FuseWith(aug.warp(prev.map()))),
                    image,
                    frozen_stats,
                });
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (loss, centroids) = adaptation_objective(&model, &items, &bank, cfg, &mut grad)?;
            let lr = poly_lr(iter, max_iter, cfg.lr0, cfg.poly_power)?;
            sgd.step(model.params_mut(), &grad, lr);
            for c in centroids {
                bank.push(c);
            }
            record.iterations.push(IterLog {
                epoch,
                iter,
                lr,
                ce: None,
                fcl: loss.fcl,
                ccpl: loss.ccpl,
                total: loss.total,
            });
            sum_fcl += loss.fcl.unwrap_or(0.0);
            sum_ccpl += loss.ccpl.unwrap_or(0.0);
            sum_total += loss.total;
            iter += 1;
        }

        let fresh = clean_logits(&model, &target)?;
        if let Some(d) = run_dir {
            if epoch % cfg.viz_every.max(1) == 0 || epoch == cfg.epochs {
                write_viz(&d.join("viz").join(format!("epoch_{epoch}")), &fresh, &viz_ids)?;
            }
        }
        store = store.advance_round(fresh, &cfg.ccpl)?;
        if let Some(d) = run_dir {
            store.save(&d.join("pseudo_store"))?;
        }
        let eval = match monitor {
            Some(m) if !m.is_empty() => Some(evaluate_dataset(&model, m)?.mean),
            _ => None,
        };
        let n = per_epoch as f64;
        let entry = EpochLog {
            epoch,
            ce: None,
            fcl: cfg.ablation.uses_fcl().then_some(sum_fcl / n),
            ccpl: cfg.ablation.uses_ccpl().then_some(sum_ccpl / n),
            total: sum_total / n,
            eval,
        };
        log::info!(
            "adapt epoch {epoch}/{}: fcl {:?} ccpl {:?} total {:.4} monitor dice {:.4}",
            cfg.epochs,
            entry.fcl,
            entry.ccpl,
            entry.total,
            entry.eval.as_ref().map_or(f64::NAN, |m| m.dice)
        );
        record.epochs.push(entry);
        record.checkpoint(&model, epoch)?;
        record.flush_logs()?;
    }
    let ckpt = SegModelCheckpoint::from_model(&model, record.provenance(cfg.epochs));
    record.finish(&ckpt)?;
    Ok((ckpt, record))
}
