// SPDX-License-Identifier: Apache-2.0

//! Grayscale exports of foreground probability and normalized entropy.

use std::path::Path;

use crate::data::{softmax_map, write_gray_png, LogitMap};
use crate::error::Result;
use crate::fcl::entropy_map;

/// Writes `<id>_heat.png` (foreground probability) and `<id>_entropy.png`
/// (entropy scaled to [0, 1]) into `dir`.
pub fn write_maps(dir: &Path, sample_id: &str, logits: &LogitMap) -> Result<()> {
    let probs = softmax_map(logits)?;
    let (h, w) = (probs.height(), probs.width());
    write_gray_png(&dir.join(format!("{sample_id}_heat.png")), h, w, &probs.foreground())?;
    let ent = entropy_map(&probs);
    write_gray_png(&dir.join(format!("{sample_id}_entropy.png")), h, w, ent.values())
}
