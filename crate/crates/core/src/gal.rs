//! Group attention: one spatial mask per (tapped block, group), and the
//! masked spatial mean of the shared feature under that mask.
//!
//! Mask module: `conv3x3(C -> C/2) -> batchnorm -> relu -> conv1x1(C/2 -> 1)
//! -> sigmoid`, every conv with stride 1.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{self, Mode};
use crate::params::ParamStore;
use crate::tape::{Padding, Tape, Var};

fn prefix(block: usize, group: usize) -> String {
    format!("gal.block{block}.group{group}")
}

fn hidden(channels: usize) -> usize {
    (channels / 2).max(1)
}

/// Registers one attention module per `(block, group)`; `taps` pairs each
/// 1-based block number with its channel count.
pub fn register(store: &mut ParamStore, taps: &[(usize, usize)], groups: usize) -> Result<()> {
    for &(block, channels) in taps {
        for g in 0..groups {
            let p = prefix(block, g);
            let h = hidden(channels);
            nn::register_conv(store, &format!("{p}.conv1"), channels, h, 3)?;
            nn::register_bn(store, &format!("{p}.bn1"), h)?;
            nn::register_conv(store, &format!("{p}.conv2"), h, 1, 1)?;
        }
    }
    Ok(())
}

/// Attention mask `[batch, 1, H, W]` with entries in `[0, 1]`.
pub fn group_attention_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    feature: &FeatureMap,
    group: usize,
    mode: Mode,
) -> Result<Var> {
    let p = prefix(feature.block, group);
    let x = nn::conv(tape, store, &format!("{p}.conv1"), feature.var, 1, Padding::Same)?;
    let x = nn::batchnorm(tape, store, &format!("{p}.bn1"), x, mode)?;
    let x = tape.relu(x)?;
    let x = nn::conv(tape, store, &format!("{p}.conv2"), x, 1, Padding::Same)?;
    tape.sigmoid(x)
}

/// Spatial mean of `feature * mask` per channel: `[batch, C]`.
pub fn masked_pool(tape: &mut Tape, feature: Var, mask: Var) -> Result<Var> {
    let product = tape.mask_mul(feature, mask)?;
    tape.global_avg_pool(product)
}

/// Masks and pooled group features, indexed `[tap][group]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GalOutput {
    pub masks: Vec<Vec<Var>>,
    pub features: Vec<Vec<Var>>,
}

impl GalOutput {
    pub fn feature_count(&self) -> usize {
        self.features.iter().map(Vec::len).sum()
    }
}

pub fn gal_forward_all(
    tape: &mut Tape,
    store: &mut ParamStore,
    taps: &[FeatureMap],
    groups: usize,
    mode: Mode,
) -> Result<GalOutput> {
    if groups == 0 {
        return Err(Error::Config("group attention needs at least one group".into()));
    }
    let mut masks = Vec::with_capacity(taps.len());
    let mut features = Vec::with_capacity(taps.len());
    for tap in taps {
        let mut m = Vec::with_capacity(groups);
        let mut f = Vec::with_capacity(groups);
        for g in 0..groups {
            let mask = group_attention_forward(tape, store, tap, g, mode)?;
            f.push(masked_pool(tape, tap.var, mask)?);
            m.push(mask);
        }
        masks.push(m);
        features.push(f);
    }
    Ok(GalOutput { masks, features })
}
