// SPDX-License-Identifier: Apache-2.0

//! Finite-difference harness for the adaptation objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfseg::ccpl::fuse_pseudo_label;
use sfseg::data::{softmax_map, LogitMap, Map};
use sfseg::fcl::{entropy_map, Centroid, region_centroids, CentroidBank, FclConfig};
use sfseg::net::{ArchDescriptor, SegNet};
use sfseg::train::{adaptation_objective, Ablation, BatchItem, PseudoTarget, TrainConfig};

pub const SIDE: usize = 16;

pub fn arch() -> ArchDescriptor {
    ArchDescriptor {
        widths: [4, 6, 8, 8],
        feature_channels: 6,
        ..ArchDescriptor::default()
    }
}

pub fn random_image(rng: &mut ChaCha8Rng) -> Map {
    // A bright square on a darker background keeps both classes in play.
    let (y0, x0) = (rng.gen_range(2..7), rng.gen_range(2..7));
    let mut data = Vec::with_capacity(SIDE * SIDE * 3);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let inside = (y0..y0 + 7).contains(&y) && (x0..x0 + 7).contains(&x);
            let base = if inside { 0.7 } else { 0.3 };
            for _ in 0..3 {
                data.push((base + rng.gen_range(-0.15..0.15f64)).clamp(0.0, 1.0));
            }
        }
    }
    Map::new(SIDE, SIDE, 3, data).unwrap()
}

pub fn random_logits(rng: &mut ChaCha8Rng) -> Map {
    let data = (0..SIDE * SIDE * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Map::new(SIDE, SIDE, 2, data).unwrap()
}

pub struct Setup {
    pub model: SegNet,
    pub items: Vec<BatchItem>,
    pub bank: CentroidBank,
    pub cfg: TrainConfig,
}

pub fn setup(ablation: Ablation, frozen: bool, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        ablation,
        beta: 0.7,
        gamma: 1.3,
        arch: arch(),
        fcl: FclConfig {
            min_region_pixels: 1,
            ..FclConfig::default()
        },
        ..TrainConfig::default()
    };
    let model = SegNet::new(arch(), seed).unwrap();
    let other = SegNet::new(arch(), seed + 100).unwrap();
    let mut bank = CentroidBank::new(16);
    for i in 0..6 {
        let img = random_image(&mut rng);
        let (logits, feats) = other.forward(&img).unwrap();
        let probs = softmax_map(&logits).unwrap();
        let ent = entropy_map(&probs);
        for c in region_centroids(&feats, &probs, &ent, &cfg.fcl, &format!("bank{i}")).unwrap() {
            bank.push(c);
        }
    }
    // Guarantee positives and negatives for either class.
    for class_id in 0..2 {
        for j in 0..3 {
            bank.push(Centroid {
                vector: (0..arch().feature_channels).map(|_| rng.gen_range(0.0..1.0)).collect(),
                class_id,
                source_sample_id: format!("rand{class_id}_{j}"),
                weight_mass: 1.0,
            });
        }
    }
    let items = (0..3)
        .map(|i| {
            let image = random_image(&mut rng);
            // The fused label is a detached target: freeze it at the base point.
            let previous = LogitMap::new(random_logits(&mut rng)).unwrap();
            let (current, _) = model.forward(&image).unwrap();
            let fused = fuse_pseudo_label(&current, &previous, &cfg.ccpl).unwrap();
            let target = PseudoTarget::Fixed(fused.map().clone());
            let frozen_stats = frozen.then(|| {
                let (l, _) = other.forward(&image).unwrap();
                softmax_map(&l).unwrap().into_map()
            });
            BatchItem {
                sample_id: format!("t{i}"),
                image,
                target: Some(target),
                frozen_stats,
            }
        })
        .collect();
    Setup {
        model,
        items,
        bank,
        cfg,
    }
}

pub fn loss_at(s: &Setup, model: &SegNet) -> f64 {
    let mut sink = vec![0.0; model.num_params()];
    adaptation_objective(model, &s.items, &s.bank, &s.cfg, &mut sink)
        .unwrap()
        .0
        .total
}

/// Worst relative error over 50 sampled parameters with nonzero gradient.
pub fn check(s: &Setup, seed: u64) -> f64 {
    let n = s.model.num_params();
    let mut grad = vec![0.0; n];
    let (loss, _) = adaptation_objective(&s.model, &s.items, &s.bank, &s.cfg, &mut grad).unwrap();
    assert!(loss.total > 0.0);
    if s.cfg.ablation.uses_fcl() {
        assert!(loss.fcl.unwrap() > 0.0, "FCL term inactive");
    }
    // Dead-ReLU parameters have an exact zero gradient; sample among the rest.
    let live: Vec<usize> = (0..n).filter(|&i| grad[i].abs() > 1e-7).collect();
    assert!(live.len() >= 50, "only {} live parameters", live.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in rand::seq::index::sample(&mut rng, live.len(), 50).into_iter().map(|j| live[j]) {
        let mut plus = s.model.clone();
        plus.params_mut()[i] += eps;
        let mut minus = s.model.clone();
        minus.params_mut()[i] -= eps;
        let numeric = (loss_at(s, &plus) - loss_at(s, &minus)) / (2.0 * eps);
        let diff = (numeric - grad[i]).abs();
        worst = worst.max(diff / numeric.abs().max(grad[i].abs()));
    }
    worst
}
