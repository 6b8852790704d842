//! Per-attribute binary classifiers over every feature source, the fused
//! prediction, and the plain / class-balanced loss regimes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::log;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::GroupId;
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Plain,
    Balanced,
}

impl LossMode {
    pub fn label(self) -> &'static str {
        match self {
            LossMode::Plain => "bce",
            LossMode::Balanced => "weighted_bce",
        }
    }
}

/// Binary cross-entropy of one prediction, probability clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce(p: f64, label: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -log(p) * label - log(1.0 - p) * (1.0 - label)
}

/// Cross-entropy with the positive term weighted by `(S - S_a) / S` and the
/// negative term by `S_a / S`, where `S_a` counts positives in the batch.
pub fn weighted_bce(p: f64, label: f64, batch: usize, positives: usize) -> f64 {
    let (w_pos, w_neg) = class_weights(batch, positives);
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -log(p) * label * w_pos - log(1.0 - p) * (1.0 - label) * w_neg
}

/// `(positive weight, negative weight)` for a batch of `batch` samples with
/// `positives` positives.
pub fn class_weights(batch: usize, positives: usize) -> (f64, f64) {
    let s = batch as f64;
    let sa = positives as f64;
    ((s - sa) / s, sa / s)
}

/// Mean of the base prediction and the graph-refined predictions of every
/// tapped block.
pub fn fuse(base: f64, gcl: &[f64]) -> f64 {
    (base + gcl.iter().sum::<f64>()) / (1.0 + gcl.len() as f64)
}

/// Probability from one linear head: `sigmoid(feature W^T + b)`.
pub fn predict_head(tape: &mut Tape, feature: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = tape.linear(feature, weight, Some(bias))?;
    tape.sigmoid(z)
}

/// Differentiable fused prediction, `[batch]`.
pub fn fuse_predictions(tape: &mut Tape, base: Var, gcl: &[Var]) -> Result<Var> {
    if gcl.is_empty() {
        return Err(Error::Config("fusion needs at least one tapped block".into()));
    }
    let mut all = Vec::with_capacity(gcl.len() + 1);
    all.push(base);
    all.extend_from_slice(gcl);
    let s = tape.add_n(&all)?;
    tape.scale(s, 1.0 / all.len() as f64)
}

fn group_prefix(stage: &str, block: usize, group: usize) -> String {
    format!("heads.{stage}.block{block}.group{group}")
}

/// Registers the base head over `base_dim` features and, unless
/// `taps` is empty, one head stack per `(stage, block, group)`.
pub fn register(
    store: &mut ParamStore,
    base_dim: usize,
    n_attrs: usize,
    taps: &[(usize, usize)],
    group_sizes: &[usize],
) -> Result<()> {
    nn::register_linear(store, "heads.base", base_dim, n_attrs)?;
    for stage in ["gal", "gcl"] {
        for &(block, dim) in taps {
            for (g, &size) in group_sizes.iter().enumerate() {
                nn::register_linear(store, &group_prefix(stage, block, g), dim, size)?;
            }
        }
    }
    Ok(())
}

/// Per-attribute predictions, each `[batch]`. `gal` and `gcl` are indexed
/// `[tap][attribute]`; both are empty, as is `fused`, for a base-only model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub blocks: Vec<usize>,
    pub fused: Vec<Var>,
    pub base: Vec<Var>,
    pub gal: Vec<Vec<Var>>,
    pub gcl: Vec<Vec<Var>>,
}

impl PredictionSet {
    pub fn n_attrs(&self) -> usize {
        self.base.len()
    }

    pub fn is_base_only(&self) -> bool {
        self.fused.is_empty() && self.gal.is_empty() && self.gcl.is_empty()
    }

    /// The prediction that is evaluated: fused, or base for a base-only model.
    pub fn final_predictions(&self) -> &[Var] {
        if self.is_base_only() {
            &self.base
        } else {
            &self.fused
        }
    }
}

/// Evaluates all heads. `slots[a]` is the group of 0-based attribute `a`
/// and its row within that group's head stack.
pub fn predict_all(
    tape: &mut Tape,
    store: &ParamStore,
    slots: &[(GroupId, usize)],
    base_feature: Var,
    blocks: &[usize],
    gal_features: &[Vec<Var>],
    gcl_features: &[Vec<Var>],
) -> Result<PredictionSet> {
    let base_all = {
        let z = nn::linear(tape, store, "heads.base", base_feature)?;
        tape.sigmoid(z)?
    };
    let base = (0..slots.len()).map(|a| tape.column(base_all, a)).collect::<Result<Vec<_>>>()?;
    let mut per_stage = Vec::with_capacity(2);
    for (stage, feats) in [("gal", gal_features), ("gcl", gcl_features)] {
        let mut per_tap = Vec::with_capacity(blocks.len());
        for (&block, group_feats) in blocks.iter().zip(feats) {
            let probs = group_feats
                .iter()
                .enumerate()
                .map(|(g, &f)| {
                    let z = nn::linear(tape, store, &group_prefix(stage, block, g), f)?;
                    tape.sigmoid(z)
                })
                .collect::<Result<Vec<_>>>()?;
            let cols = slots.iter().map(|&(g, row)| tape.column(probs[g.0], row)).collect::<Result<Vec<_>>>()?;
            per_tap.push(cols);
        }
        per_stage.push(per_tap);
    }
    let gcl = per_stage.pop().unwrap_or_default();
    let gal = per_stage.pop().unwrap_or_default();
    let mut fused = Vec::new();
    if !gcl.is_empty() {
        for (a, &b) in base.iter().enumerate() {
            let refined: Vec<Var> = gcl.iter().map(|tap| tap[a]).collect();
            fused.push(fuse_predictions(tape, b, &refined)?);
        }
    }
    Ok(PredictionSet { blocks: blocks.to_vec(), fused, base, gal, gcl })
}

/// Binary labels, row-major `[batch][n_attrs]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub batch: usize,
    pub n_attrs: usize,
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(batch: usize, n_attrs: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * n_attrs || batch == 0 {
            return Err(Error::Dimension { op: "labels", detail: format!("{} values for {batch}x{n_attrs}", data.len()) });
        }
        Ok(Self { batch, n_attrs, data })
    }

    pub fn column(&self, attr: usize) -> Vec<f64> {
        (0..self.batch).map(|s| f64::from(self.data[s * self.n_attrs + attr])).collect()
    }

    pub fn positives(&self, attr: usize) -> usize {
        (0..self.batch).filter(|s| self.data[s * self.n_attrs + attr] != 0).count()
    }
}

/// Loss terms in attribute-then-source order, and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term_label,value\n");
        for (label, v) in &self.terms {
            out.push_str(&format!("{label},{v:e}\n"));
        }
        out
    }
}

/// Tape handles of every loss term plus their sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossTerms {
    pub labels: Vec<String>,
    pub terms: Vec<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let terms = self.labels.iter().zip(&self.terms).map(|(l, &v)| (l.clone(), tape.value(v).data()[0])).collect();
        LossReport { terms, total: tape.value(self.total).data()[0] }
    }
}

/// Sum of one batch-mean cross-entropy per (attribute, prediction source):
/// `2N(B + 1)` terms for the full model, `N` for a base-only model.
pub fn total_loss(tape: &mut Tape, preds: &PredictionSet, labels: &Labels, mode: LossMode) -> Result<LossTerms> {
    let n = labels.n_attrs;
    let missing = |what: &str| Err(Error::Config(format!("missing prediction source: {what}")));
    if preds.base.len() != n {
        return missing("base");
    }
    if !preds.is_base_only() {
        let taps = preds.blocks.len();
        if taps == 0 || preds.fused.len() != n {
            return missing("fused");
        }
        if preds.gal.len() != taps || preds.gal.iter().any(|t| t.len() != n) {
            return missing("gal");
        }
        if preds.gcl.len() != taps || preds.gcl.iter().any(|t| t.len() != n) {
            return missing("gcl");
        }
    }
    let kind = mode.label();
    let mut names = Vec::new();
    let mut terms = Vec::new();
    for a in 0..n {
        let y = labels.column(a);
        let (w_pos, w_neg) = match mode {
            LossMode::Plain => (1.0, 1.0),
            LossMode::Balanced => class_weights(labels.batch, labels.positives(a)),
        };
        let mut sources: Vec<(String, Var)> = Vec::new();
        if !preds.is_base_only() {
            sources.push((String::from("fused"), preds.fused[a]));
        }
        sources.push((String::from("base"), preds.base[a]));
        if !preds.is_base_only() {
            for (t, &block) in preds.blocks.iter().enumerate() {
                sources.push((format!("gal_b{block}"), preds.gal[t][a]));
            }
            for (t, &block) in preds.blocks.iter().enumerate() {
                sources.push((format!("gcl_b{block}"), preds.gcl[t][a]));
            }
        }
        for (source, p) in sources {
            let label = format!("{kind}/{source}/attr{:02}", a + 1);
            let term = tape.bce_mean(p, &y, w_pos, w_neg).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { term: label.clone() },
                other => other,
            })?;
            names.push(label);
            terms.push(term);
        }
    }
    let total = tape.add_n(&terms)?;
    Ok(LossTerms { labels: names, terms, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use core::f64::consts::LN_2;

    #[test]
    fn bce_closed_forms() {
        assert!((bce(0.5, 1.0) - LN_2).abs() < 1e-15);
        assert!((bce(0.5, 0.0) - LN_2).abs() < 1e-15);
        assert!(bce(1.0, 1.0) < 1e-11);
        assert!(bce(0.0, 0.0) < 1e-11);
        assert!((bce(0.8, 1.0) - 0.223_143_551_314_209_7).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_cases() {
        // (3/4) * -ln 0.8
        assert!((weighted_bce(0.8, 1.0, 4, 1) - 0.167_357_663_485_657_3).abs() < 1e-12);
        for &(p, y) in &[(0.3, 1.0), (0.9, 0.0), (0.5, 1.0)] {
            assert_eq!(weighted_bce(p, y, 8, 4), 0.5 * bce(p, y));
        }
        assert_eq!(weighted_bce(0.3, 1.0, 5, 5), 0.0);
        assert_eq!(weighted_bce(0.3, 0.0, 5, 0), 0.0);
    }

    #[test]
    fn fusion() {
        assert!((fuse(0.9, &[0.6, 0.6]) - 0.7).abs() < 1e-15);
        assert_eq!(fuse(0.25, &[0.25, 0.25]), 0.25);
    }

    #[test]
    fn predict_head_saturation() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(&[1, 3], 2.0));
        let w = tape.constant(Tensor::zeros(&[1, 3]));
        let b0 = tape.constant(Tensor::zeros(&[1]));
        let p = predict_head(&mut tape, f, w, b0).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5]);
        let b20 = tape.constant(Tensor::full(&[1], 20.0));
        let p = predict_head(&mut tape, f, w, b20).unwrap();
        assert!(tape.value(p).data()[0] > 0.999);
    }

    fn constant_predictions(tape: &mut Tape, n: usize, blocks: &[usize], batch: usize, p: f64) -> PredictionSet {
        let mut c = || tape.constant(Tensor::full(&[batch], p));
        PredictionSet {
            blocks: blocks.to_vec(),
            fused: (0..n).map(|_| c()).collect(),
            base: (0..n).map(|_| c()).collect(),
            gal: blocks.iter().map(|_| (0..n).map(|_| c()).collect()).collect(),
            gcl: blocks.iter().map(|_| (0..n).map(|_| c()).collect()).collect(),
        }
    }

    #[test]
    fn desk_term_count_and_labels() {
        let mut tape = Tape::new();
        let preds = constant_predictions(&mut tape, 6, &[3, 4], 4, 0.5);
        let labels = Labels::new(4, 6, (0..24).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let plain = total_loss(&mut tape, &preds, &labels, LossMode::Plain).unwrap();
        assert_eq!(plain.terms.len(), 36);
        assert_eq!(plain.labels[0], "bce/fused/attr01");
        assert_eq!(plain.labels[5], "bce/gcl_b4/attr01");
        let bal = total_loss(&mut tape, &preds, &labels, LossMode::Balanced).unwrap();
        assert!(bal.labels.iter().all(|l| l.starts_with("weighted_bce/")));
    }

    #[test]
    fn missing_source() {
        let mut tape = Tape::new();
        let mut preds = constant_predictions(&mut tape, 3, &[3, 4], 2, 0.5);
        preds.gal.pop();
        let labels = Labels::new(2, 3, vec![0; 6]).unwrap();
        assert!(total_loss(&mut tape, &preds, &labels, LossMode::Plain).is_err());
    }
}
