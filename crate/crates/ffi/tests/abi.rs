// SPDX-License-Identifier: Apache-2.0

use std::ffi::{c_char, CString};
use std::ptr;

use sfseg::data::{softmax_map, Map, Mask};
use sfseg::net::{ArchDescriptor, Provenance, SegModelCheckpoint, SegNet, Stage};
use sfseg_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { sfseg_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    assert_eq!(bytes.len(), n.min(255));
    String::from_utf8(bytes).unwrap()
}

fn disc(h: usize, w: usize) -> Vec<u8> {
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 - 7.5, (i % w) as f64 - 7.5);
            u8::from(y * y + x * x < 16.0)
        })
        .collect()
}

#[test]
fn null_pointers_are_reported() {
    let mut v = 0.0;
    let st = unsafe { sfseg_mae(ptr::null(), [1u8].as_ptr(), 1, 1, &mut v) };
    assert_eq!(st, SfsegStatus::NullPointer);
    assert!(last_error().contains("pred"));
    let st = unsafe { sfseg_model_load(ptr::null(), ptr::null_mut()) };
    assert_eq!(st, SfsegStatus::NullPointer);
    unsafe { sfseg_model_free(ptr::null_mut()) };
}

#[test]
fn truncated_error_message_is_terminated() {
    let mut v = 0.0;
    unsafe { sfseg_mae([0.5].as_ptr(), [1u8].as_ptr(), 0, 1, &mut v) };
    let mut buf = [1 as c_char; 4];
    let n = unsafe { sfseg_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn metrics_match_library() {
    let (h, w) = (16, 16);
    let gt = disc(h, w);
    let pred: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let mask = Mask::new(h, w, gt.clone()).unwrap();
    let (mut d, mut i, mut m, mut s, mut e, mut f) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut defined = 9u8;
    unsafe {
        assert_eq!(sfseg_dice_iou(pred.as_ptr(), gt.as_ptr(), h, w, 0.5, &mut d, &mut i), SfsegStatus::Ok);
        assert_eq!(sfseg_mae(pred.as_ptr(), gt.as_ptr(), h, w, &mut m), SfsegStatus::Ok);
        assert_eq!(sfseg_s_measure(pred.as_ptr(), gt.as_ptr(), h, w, 0.5, &mut s), SfsegStatus::Ok);
        assert_eq!(sfseg_e_measure_max(pred.as_ptr(), gt.as_ptr(), h, w, &mut e), SfsegStatus::Ok);
        assert_eq!(
            sfseg_weighted_f(pred.as_ptr(), gt.as_ptr(), h, w, &mut f, &mut defined),
            SfsegStatus::Ok
        );
    }
    let (dd, ii) = sfseg::metrics::dice_iou(&pred, &mask, 0.5).unwrap();
    assert_eq!((d, i), (dd, ii));
    assert_eq!(m, sfseg::metrics::mae(&pred, &mask).unwrap());
    assert_eq!(s, sfseg::metrics::s_measure(&pred, &mask, 0.5).unwrap());
    assert_eq!(e, sfseg::metrics::e_measure_max(&pred, &mask).unwrap());
    assert_eq!(Some(f), sfseg::metrics::weighted_fmeasure(&pred, &mask).unwrap());
    assert_eq!(defined, 1);

    let empty = vec![0u8; h * w];
    unsafe { sfseg_weighted_f(pred.as_ptr(), empty.as_ptr(), h, w, &mut f, &mut defined) };
    assert_eq!(defined, 0);
    assert!(f.is_nan());
}

#[test]
fn fusion_and_losses() {
    let cur = [2.0, -1.0, 0.3, 0.4, -5.0, 5.0];
    let prev = [0.5, 0.1, -2.0, 2.0, 1.0, 1.0];
    let (mut ab, mut ba) = ([0.0; 6], [0.0; 6]);
    unsafe {
        assert_eq!(sfseg_fuse(cur.as_ptr(), prev.as_ptr(), 3, 2, 0.5, ab.as_mut_ptr()), SfsegStatus::Ok);
        assert_eq!(sfseg_fuse(prev.as_ptr(), cur.as_ptr(), 3, 2, 0.5, ba.as_mut_ptr()), SfsegStatus::Ok);
    }
    assert_eq!(ab, ba);
    for px in ab.chunks(2) {
        assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
    }
    let bad = unsafe { sfseg_fuse(cur.as_ptr(), prev.as_ptr(), 3, 2, 1.5, ab.as_mut_ptr()) };
    assert_eq!(bad, SfsegStatus::InvalidArgument);
    assert!(last_error().contains("alpha"));

    let mut phi = 0.0;
    unsafe { sfseg_phi_norm([3.0, 0.0].as_ptr(), [0.0, 4.0].as_ptr(), 2, &mut phi) };
    assert_eq!(phi, 5.0);

    let uniform = [0.5; 4];
    let mut ent = [0.0; 2];
    assert_eq!(unsafe { sfseg_entropy(uniform.as_ptr(), 2, 2, ent.as_mut_ptr()) }, SfsegStatus::Ok);
    assert_eq!(ent, [1.0, 1.0]);

    let mut ce = 0.0;
    unsafe { sfseg_soft_ce(uniform.as_ptr(), uniform.as_ptr(), 2, 2, &mut ce) };
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    let not_dist = [0.9, 0.9];
    let st = unsafe { sfseg_soft_ce(not_dist.as_ptr(), uniform.as_ptr(), 1, 2, &mut ce) };
    assert_eq!(st, SfsegStatus::Shape);
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchDescriptor {
        widths: [4, 4, 4, 4],
        feature_channels: 4,
        ..ArchDescriptor::default()
    };
    let net = SegNet::new(arch, 3).unwrap();
    let prov = Provenance {
        stage: Stage::Source,
        epochs: 0,
        config_hash: "0".into(),
    };
    let path = dir.path().join("model.ckpt");
    SegModelCheckpoint::from_model(&net, prov).save(&path).unwrap();

    let (h, w) = (8, 8);
    let image: Vec<f64> = (0..h * w * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let want = softmax_map(&net.forward(&Map::new(h, w, 3, image.clone()).unwrap()).unwrap().0)
        .unwrap()
        .foreground();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { sfseg_model_load(c_path.as_ptr(), &mut model) }, SfsegStatus::Ok);
    let (mut fg, mut ent) = (vec![0.0; h * w], vec![0.0; h * w]);
    let st = unsafe { sfseg_model_predict(model, image.as_ptr(), h, w, fg.as_mut_ptr(), ent.as_mut_ptr()) };
    assert_eq!(st, SfsegStatus::Ok);
    assert_eq!(fg, want);
    assert!(ent.iter().all(|e| (0.0..=1.0).contains(e)));
    let st = unsafe { sfseg_model_predict(model, image.as_ptr(), h, w, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, SfsegStatus::Ok);
    unsafe { sfseg_model_free(model) };

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { sfseg_model_load(missing.as_ptr(), &mut model) }, SfsegStatus::Io);
    assert!(model.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/sfseg.h");
    for name in [
        "sfseg_last_error", "sfseg_model_load", "sfseg_model_free", "sfseg_model_predict",
        "sfseg_dice_iou", "sfseg_mae", "sfseg_weighted_f", "sfseg_s_measure",
        "sfseg_e_measure_max", "sfseg_phi_norm", "sfseg_fuse", "sfseg_soft_ce", "sfseg_entropy",
        "typedef struct SfsegModel SfsegModel",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
