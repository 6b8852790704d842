//! Central finite-difference check of the end-to-end training loss.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, BlockSpec, InputShape};
use crate::error::Result;
use crate::groups::{Group, GroupAssignment};
use crate::heads::{Labels, LossMode};
use crate::model::{MggModel, ModelConfig, Variant};
use crate::nn::Mode;
use crate::params::{owner, ParamKind, ParamStore};
use crate::tape::BackwardFault;
use crate::tensor::Tensor;

/// Left and right slopes differing by more than this fraction mark a kink.
const KINK_RATIO: f64 = 0.05;
const MAX_REDRAWS: usize = 20;

/// Parameter families every check draws from.
pub const FAMILIES: [&str; 4] = ["backbone", "gal", "gcl", "heads"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossMode,
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { samples: 100, step: 1e-4, tolerance: 1e-4, floor: 1e-6, batch: 4, seed: 11, loss: LossMode::Plain, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Draws rejected because the loss was not differentiable there.
    pub kinks_skipped: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn family_counts(&self) -> Vec<(&'static str, usize)> {
        FAMILIES.iter().map(|&f| (f, self.entries.iter().filter(|e| owner(&e.param) == f).count())).collect()
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Six attributes in three groups, two taps, 16x16 input.
pub fn tiny_model() -> Result<MggModel> {
    let backbone = BackboneConfig {
        input: InputShape { channels: 3, height: 16, width: 16 },
        blocks: vec![
            BlockSpec { out_channels: 4, conv_count: 1, downsample: 2 },
            BlockSpec { out_channels: 6, conv_count: 1, downsample: 2 },
            BlockSpec { out_channels: 8, conv_count: 1, downsample: 2 },
        ],
        tap_blocks: vec![2, 3],
    };
    let groups = GroupAssignment::from_groups(
        ["upper", "middle", "lower"]
            .iter()
            .enumerate()
            .map(|(g, n)| Group { name: n.to_string(), attrs: vec![2 * g + 1, 2 * g + 2] })
            .collect(),
    );
    MggModel::new(ModelConfig { backbone, n_attrs: 6, alpha: 0.5, variant: Variant::Full }, groups)
}

/// Compares analytic gradients against `(L(p + h) - L(p - h)) / 2h` for
/// `config.samples` parameter entries drawn evenly from [`FAMILIES`].
pub fn run(model: &MggModel, config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = model.init_params(config.seed)?;
    let input = model.config().backbone.input;
    let shape = [config.batch, input.channels, input.height, input.width];
    let n_pixels: usize = shape.iter().product();
    let images = Tensor::new(shape.to_vec(), (0..n_pixels).map(|_| rng.random::<f64>()).collect())?;
    let n = model.n_attrs();
    let labels = Labels::new(config.batch, n, (0..config.batch * n).map(|_| rng.random_bool(0.5) as u8).collect())?;

    let mut analytic_store = store.clone();
    model.gradients(&mut analytic_store, &images, &labels, config.loss, config.fault)?;

    let by_family: Vec<Vec<_>> = FAMILIES
        .iter()
        .map(|&f| {
            store
                .ids()
                .filter(|&id| {
                    owner(store.name(id)) == f
                        && store.get(store.name(id)).map(|p| p.kind == ParamKind::Trainable).unwrap_or(false)
                })
                .collect()
        })
        .collect();
    let loss_at = |store: &ParamStore| -> Result<f64> {
        let mut s = store.clone();
        let (tape, terms) = model.loss(&mut s, &images, &labels, config.loss, Mode::Train)?;
        Ok(tape.value(terms.total).data()[0])
    };
    let base = loss_at(&store)?;

    let mut entries = Vec::with_capacity(config.samples);
    let mut kinks_skipped = 0;
    for s in 0..config.samples {
        let family = &by_family[s % FAMILIES.len()];
        if family.is_empty() {
            continue;
        }
        // Redraw entries whose +-h interval straddles a relu kink; a central
        // difference is meaningless there.
        for _ in 0..MAX_REDRAWS {
            let id = family[rng.random_range(0..family.len())];
            let index = rng.random_range(0..store.value(id).numel());
            let orig = store.value(id).data()[index];
            store.value_mut(id).data_mut()[index] = orig + config.step;
            let plus = loss_at(&store)?;
            store.value_mut(id).data_mut()[index] = orig - config.step;
            let minus = loss_at(&store)?;
            store.value_mut(id).data_mut()[index] = orig;
            let right = (plus - base) / config.step;
            let left = (base - minus) / config.step;
            if (right - left).abs() > KINK_RATIO * right.abs().max(left.abs()).max(config.floor) {
                kinks_skipped += 1;
                continue;
            }
            let name = store.name(id).to_string();
            let analytic = analytic_store.get(&name)?.grad().map_or(0.0, |g| g[index]);
            let numeric = (plus - minus) / (2.0 * config.step);
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(config.floor);
            entries.push(GradcheckEntry { param: name, index, analytic, numeric, rel_err });
            break;
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { entries, max_rel_err, tolerance: config.tolerance, kinks_skipped })
}
