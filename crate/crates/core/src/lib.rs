// SPDX-License-Identifier: Apache-2.0

//! Source-free domain adaptation for binary segmentation.
//!
//! A small encoder-decoder is pre-trained on a labelled source domain, then
//! adapted to an unlabeled target domain with two self-supervised terms:
//! an entropy-weighted region-centroid contrastive loss ([`fcl`]) and a
//! soft cross-entropy against fused cross-round pseudo-labels ([`ccpl`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod ccpl;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fcl;
mod layers;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
