//! The full network: backbone taps, group attention, graph correlation,
//! per-attribute heads, and one SGD training step.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::gal::{self, GalOutput};
use crate::gcl::{self, GclOutput, DEFAULT_ALPHA};
use crate::groups::{validate, AttributeCatalog, GroupAssignment, GroupId};
use crate::heads::{self, Labels, LossMode, LossReport, LossTerms, PredictionSet};
use crate::nn::Mode;
use crate::params::{ParamStore, Sgd};
use crate::tape::{BackwardFault, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Group attention, graph correlation and all four prediction families.
    Full,
    /// Only the base head on the pooled final feature.
    BaseOnly,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_variant() -> Variant {
    Variant::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub n_attrs: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MggModel {
    config: ModelConfig,
    groups: GroupAssignment,
    slots: Vec<(GroupId, usize)>,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardOutput {
    pub taps: Vec<FeatureMap>,
    pub gal: Option<GalOutput>,
    pub gcl: Vec<GclOutput>,
    pub preds: PredictionSet,
}

impl MggModel {
    pub fn new(config: ModelConfig, groups: GroupAssignment) -> Result<Self> {
        config.backbone.validate()?;
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(Error::Alpha(config.alpha));
        }
        let violations = validate(&groups, &AttributeCatalog::numbered(config.n_attrs));
        if let Some(v) = violations.first() {
            return Err(Error::Config(format!("group assignment does not partition {} attributes: {v}", config.n_attrs)));
        }
        if config.variant == Variant::Full && groups.len() < 2 {
            return Err(Error::DegenerateGraph(groups.len()));
        }
        let slots = groups.slots(config.n_attrs)?;
        Ok(Self { config, groups, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn groups(&self) -> &GroupAssignment {
        &self.groups
    }

    pub fn n_attrs(&self) -> usize {
        self.config.n_attrs
    }

    /// `(block number, channels)` for each tap.
    fn taps(&self) -> Vec<(usize, usize)> {
        let cfg = &self.config.backbone;
        cfg.tap_blocks.iter().zip(cfg.tap_shapes()).map(|(&b, (c, _, _))| (b, c)).collect()
    }

    /// Registers every parameter: backbone, group attention, graph
    /// correlation, heads, in that order.
    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.config.backbone.register(store)?;
        let taps = self.taps();
        let k = self.groups.len();
        let base_dim = taps.last().map_or(0, |t| t.1);
        match self.config.variant {
            Variant::Full => {
                gal::register(store, &taps, k)?;
                gcl::register(store, &taps, k)?;
                let sizes: Vec<usize> = self.groups.groups().iter().map(|g| g.attrs.len()).collect();
                heads::register(store, base_dim, self.config.n_attrs, &taps, &sizes)
            }
            Variant::BaseOnly => heads::register(store, base_dim, self.config.n_attrs, &[], &[]),
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        self.register(&mut store)?;
        Ok(store)
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, images: Var, mode: Mode) -> Result<ForwardOutput> {
        let taps = backbone::backbone_forward(tape, store, &self.config.backbone, images, mode)?;
        let last = taps.last().ok_or_else(|| Error::Config("no tapped blocks".into()))?.var;
        let base_feature = tape.global_avg_pool(last)?;
        let blocks: Vec<usize> = taps.iter().map(|t| t.block).collect();
        match self.config.variant {
            Variant::BaseOnly => {
                let preds = heads::predict_all(tape, store, &self.slots, base_feature, &[], &[], &[])?;
                Ok(ForwardOutput { taps, gal: None, gcl: Vec::new(), preds })
            }
            Variant::Full => {
                let k = self.groups.len();
                let gal_out = gal::gal_forward_all(tape, store, &taps, k, mode)?;
                let mut gcl_out = Vec::with_capacity(taps.len());
                for (t, tap) in taps.iter().enumerate() {
                    let weights = gcl::load_weights(tape, store, tap.block, k)?;
                    gcl_out.push(gcl::gcl_update(tape, &gal_out.features[t], &weights, self.config.alpha)?);
                }
                let refined: Vec<Vec<Var>> = gcl_out.iter().map(|g| g.refined.clone()).collect();
                let preds = heads::predict_all(tape, store, &self.slots, base_feature, &blocks, &gal_out.features, &refined)?;
                Ok(ForwardOutput { taps, gal: Some(gal_out), gcl: gcl_out, preds })
            }
        }
    }

    /// Forward pass plus loss on a fresh tape.
    pub fn loss(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        labels: &Labels,
        mode: LossMode,
        train: Mode,
    ) -> Result<(Tape, LossTerms)> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, store, x, train)?;
        let terms = heads::total_loss(&mut tape, &out.preds, labels, mode)?;
        Ok((tape, terms))
    }

    /// One forward/backward pass and SGD update; returns the loss breakdown
    /// measured before the update.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        sgd: &Sgd,
        images: &Tensor,
        labels: &Labels,
        mode: LossMode,
        lr: f64,
    ) -> Result<LossReport> {
        let (tape, terms) = self.loss(store, images, labels, mode, Mode::Train)?;
        let report = terms.report(&tape);
        let grads = tape.backward(terms.total)?;
        store.accumulate(&tape, &grads);
        sgd.step(store, lr)?;
        Ok(report)
    }

    /// Gradients of the training loss without updating anything.
    pub fn gradients(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        labels: &Labels,
        mode: LossMode,
        fault: Option<BackwardFault>,
    ) -> Result<f64> {
        let (mut tape, terms) = self.loss(store, images, labels, mode, Mode::Train)?;
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let grads = tape.backward(terms.total)?;
        store.zero_grad();
        store.accumulate(&tape, &grads);
        Ok(tape.value(terms.total).data()[0])
    }

    /// Final per-attribute probabilities, `[sample][attribute]`, in eval mode.
    pub fn predict(&self, store: &mut ParamStore, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, store, x, Mode::Eval)?;
        Ok(collect_rows(&tape, out.preds.final_predictions()))
    }
}

/// Transposes per-attribute `[batch]` columns into per-sample rows.
pub fn collect_rows(tape: &Tape, cols: &[Var]) -> Vec<Vec<f64>> {
    let batch = cols.first().map_or(0, |&c| tape.shape(c)[0]);
    (0..batch).map(|s| cols.iter().map(|&c| tape.value(c).data()[s]).collect()).collect()
}
