//! The work behind each subcommand; `main` only parses arguments.

use std::path::{Path, PathBuf};

use mgg_core::data::Dataset;
use mgg_core::gcl::AffinityAccumulator;
use mgg_core::gradcheck::{self, GradcheckConfig, GradcheckReport};
use mgg_core::metrics::EvalReport;
use mgg_core::model::MggModel;
use mgg_core::nn::Mode;
use mgg_core::synth::SyntheticSpec;
use mgg_core::tape::BackwardFault;
use mgg_core::train::{self, EpochLog};
use mgg_core::{ParamStore, Tape};

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, CliResult, Kind, ResultExt};
use crate::fsio;
use crate::manifest;
use crate::pgm;

/// Batch size for inference-only passes.
const EVAL_BATCH: usize = 64;

/// A validated configuration with its model.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: RunConfig,
    pub model: MggModel,
}

impl Session {
    pub fn new(config: RunConfig) -> CliResult<Self> {
        config.validate()?;
        let model = MggModel::new(config.model_config()?, config.groups()?).map_err(|e| CliError::config(e.to_string()))?;
        Ok(Self { config, model })
    }

    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let mut config = RunConfig::load(path)?;
        if let Some(s) = seed {
            config.training.seed = s;
        }
        Self::new(config)
    }

    fn check_data(&self, data: &Dataset, origin: &str) -> CliResult<()> {
        let input = self.model.config().backbone.input;
        if (data.width, data.height) != (input.width, input.height) {
            return Err(CliError::data(format!(
                "{origin}: images are {}x{}, the backbone expects {}x{}",
                data.width, data.height, input.width, input.height
            )));
        }
        if data.n_attrs != self.model.n_attrs() {
            return Err(CliError::data(format!(
                "{origin}: {} label columns, the model has {} attributes",
                data.n_attrs,
                self.model.n_attrs()
            )));
        }
        Ok(())
    }

    /// Every sample named by the config's data section.
    pub fn dataset(&self) -> CliResult<Dataset> {
        let (data, origin) = match self.config.data_source()? {
            DataSource::Manifest(p) => (manifest::load(&p)?, p.display().to_string()),
            DataSource::Generator { spec, count } => (Dataset::generate(&spec, count)?, "generator".to_string()),
        };
        self.check_data(&data, &origin)?;
        Ok(data)
    }

    /// `(train, val, test)` split with the training seed.
    pub fn splits(&self) -> CliResult<(Dataset, Dataset, Dataset)> {
        let data = self.dataset()?;
        data.split(self.config.data.split, self.config.training.seed).map_err(|e| CliError::config(e.to_string()))
    }

    /// The config's test split, or every sample of `manifest` when given.
    pub fn eval_set(&self, manifest_path: Option<&Path>) -> CliResult<Dataset> {
        match manifest_path {
            Some(p) => {
                let data = manifest::load(p)?;
                self.check_data(&data, &p.display().to_string())?;
                Ok(data)
            }
            None => Ok(self.splits()?.2),
        }
    }

    pub fn restore(&self, checkpoint_dir: &Path) -> CliResult<ParamStore> {
        let mut store = self.model.init_params(0)?;
        checkpoint::load(checkpoint_dir, &mut store)?;
        Ok(store)
    }

    pub fn names(&self) -> Vec<String> {
        match self.config.data_source() {
            Ok(DataSource::Generator { spec, .. }) => spec.attributes.iter().map(|a| a.name.clone()).collect(),
            _ if self.model.n_attrs() == 40 => mgg_core::groups::FACE_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            _ => (1..=self.model.n_attrs()).map(|a| format!("attr{a:02}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub val: Option<EvalReport>,
    pub out: PathBuf,
}

pub fn epoch_log_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("loss").join(format!("epoch_{epoch:03}.csv"))
}

/// Trains from the configured seed and writes, under `out`:
/// `loss/epoch_NNN.csv` per epoch, `loss_totals.csv`, `checkpoint/`,
/// `val_report.csv` and the resolved `config.json`.
pub fn train(session: &Session, out: &Path) -> CliResult<TrainSummary> {
    let (train_set, val_set, _) = session.splits()?;
    if train_set.is_empty() {
        return Err(CliError::data("training split is empty"));
    }
    let model = &session.model;
    let cfg = session.config.train_config()?;
    let mut store = model.init_params(cfg.seed)?;
    // Logs are kept in memory and published with the checkpoint, so a run
    // that diverges leaves no files behind.
    let epochs = train::train(model, &mut store, &train_set, &cfg, |_, _| Ok(()))?;
    let val = if val_set.is_empty() { None } else { Some(train::evaluate(model, &mut store, &val_set, EVAL_BATCH)?) };
    fsio::write_into_atomic(out, |stage| {
        let mut totals = String::from("epoch,lr,total\n");
        for log in &epochs {
            fsio::write_atomic(&epoch_log_path(stage, log.epoch), log.report.to_csv().as_bytes())?;
            totals.push_str(&format!("{},{:e},{:e}\n", log.epoch, log.lr, log.report.total));
        }
        fsio::write_atomic(&stage.join("loss_totals.csv"), totals.as_bytes())?;
        checkpoint::save(&stage.join("checkpoint"), &store)?;
        if let Some(report) = &val {
            fsio::write_atomic(&stage.join("val_report.csv"), report.to_csv(&session.names()).as_bytes())?;
        }
        fsio::write_atomic(&stage.join("config.json"), session.config.to_json().as_bytes())
    })?;
    Ok(TrainSummary { epochs, val, out: out.to_path_buf() })
}

pub fn eval(session: &Session, checkpoint_dir: &Path, manifest_path: Option<&Path>, out: &Path) -> CliResult<EvalReport> {
    let data = session.eval_set(manifest_path)?;
    if data.is_empty() {
        return Err(CliError::data("evaluation set is empty"));
    }
    let mut store = session.restore(checkpoint_dir)?;
    let report = train::evaluate(&session.model, &mut store, &data, EVAL_BATCH)?;
    fsio::write_atomic(&out.join("eval_report.csv"), report.to_csv(&session.names()).as_bytes())?;
    Ok(report)
}

pub fn mask_file_name(block: usize, group: usize, sample: u64) -> String {
    format!("mask_b{block}_g{group}_s{sample}.pgm")
}

/// One PGM per (tapped block, group) for each requested sample id.
pub fn export_attention(
    session: &Session,
    checkpoint_dir: &Path,
    manifest_path: Option<&Path>,
    ids: &[u64],
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let data = match manifest_path {
        Some(_) => session.eval_set(manifest_path)?,
        None => session.dataset()?,
    };
    let positions = ids
        .iter()
        .map(|&id| data.position_of(id).ok_or_else(|| CliError::data(format!("unknown sample id {id}"))))
        .collect::<CliResult<Vec<usize>>>()?;
    let mut store = session.restore(checkpoint_dir)?;
    let channels = session.model.config().backbone.input.channels;
    let mut images = Vec::new();
    for (&id, &pos) in ids.iter().zip(&positions) {
        let (x, _) = data.batch(&[pos], channels, None)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = session.model.forward(&mut tape, &mut store, xv, Mode::Eval)?;
        let gal = fwd.gal.ok_or_else(|| CliError::config("the base-only variant has no attention masks"))?;
        for (tap, masks) in fwd.taps.iter().zip(&gal.masks) {
            for (g, &m) in masks.iter().enumerate() {
                let t = tape.value(m);
                let (h, w) = (t.shape()[2], t.shape()[3]);
                images.push((mask_file_name(tap.block, g, id), pgm::from_unit(w, h, t.data())));
            }
        }
    }
    fsio::write_into_atomic(out, |stage| {
        images.iter().try_for_each(|(name, img)| fsio::write_atomic(&stage.join(name), &pgm::encode(img)))
    })?;
    Ok(images.into_iter().map(|(name, _)| out.join(name)).collect())
}

/// Mean affinity matrix per tapped block over the evaluation set, min-max
/// rescaled, as `affinity_b{b}.csv`.
pub fn export_affinity(
    session: &Session,
    checkpoint_dir: &Path,
    manifest_path: Option<&Path>,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let data = session.eval_set(manifest_path)?;
    if data.is_empty() {
        return Err(CliError::data("evaluation set is empty"));
    }
    let mut store = session.restore(checkpoint_dir)?;
    let model = &session.model;
    let k = model.groups().len();
    let blocks = model.config().backbone.tap_blocks.clone();
    let mut acc = vec![AffinityAccumulator::new(k); blocks.len()];
    let channels = model.config().backbone.input.channels;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk, channels, None)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, &mut store, xv, Mode::Eval)?;
        if fwd.gcl.is_empty() {
            return Err(CliError::config("the base-only variant has no affinity matrices"));
        }
        for (a, g) in acc.iter_mut().zip(&fwd.gcl) {
            a.add_batch(&tape, &g.affinity);
        }
    }
    let names = model.groups().names();
    let mut files = Vec::new();
    for (a, block) in acc.iter().zip(&blocks) {
        files.push((format!("affinity_b{block}.csv"), a.mean()?.rescaled().to_csv(&names)));
    }
    fsio::write_into_atomic(out, |stage| {
        files.iter().try_for_each(|(name, text)| fsio::write_atomic(&stage.join(name), text.as_bytes()))
    })?;
    Ok(files.into_iter().map(|(name, _)| out.join(name)).collect())
}

/// Renders `count` samples of `spec` into `out` as PGM files plus `manifest.csv`.
/// The spec's group partition goes to `groups.csv` so a config can point at it.
pub fn gen_data(spec: &SyntheticSpec, count: usize, out: &Path) -> CliResult<Dataset> {
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    let data = Dataset::generate(spec, count).map_err(|e| CliError::config(e.to_string()))?;
    fsio::write_into_atomic(out, |stage| {
        manifest::save(stage, &data)?;
        fsio::write_atomic(&stage.join("groups.csv"), spec.group_assignment().to_csv().as_bytes())
    })?;
    Ok(data)
}

pub fn gradcheck(config: &GradcheckConfig) -> CliResult<GradcheckReport> {
    let model = gradcheck::tiny_model()?;
    Ok(gradcheck::run(&model, config)?)
}

/// Optional overrides for `mgg gradcheck --config`; missing fields keep the
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSettings {
    pub samples: Option<usize>,
    pub step: Option<f64>,
    pub tolerance: Option<f64>,
    pub floor: Option<f64>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<mgg_core::heads::LossMode>,
}

impl GradcheckSettings {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).or_kind(Kind::Config, path.display())?;
        serde_json::from_str(&text).or_kind(Kind::Config, path.display())
    }

    pub fn resolve(&self) -> CliResult<GradcheckConfig> {
        let d = GradcheckConfig::default();
        let cfg = GradcheckConfig {
            samples: self.samples.unwrap_or(d.samples),
            step: self.step.unwrap_or(d.step),
            tolerance: self.tolerance.unwrap_or(d.tolerance),
            floor: self.floor.unwrap_or(d.floor),
            batch: self.batch.unwrap_or(d.batch),
            seed: self.seed.unwrap_or(d.seed),
            loss: self.mode.unwrap_or(d.loss),
            fault: None,
        };
        if cfg.samples == 0
            || cfg.batch < 2
            || cfg.step.is_nan()
            || cfg.step <= 0.0
            || cfg.tolerance.is_nan()
            || cfg.tolerance <= 0.0
        {
            return Err(CliError::config("gradcheck needs samples >= 1, batch >= 2 and positive step and tolerance"));
        }
        Ok(cfg)
    }
}

/// Parses `op:scale`, e.g. `conv2d:1.5`.
pub fn parse_fault(text: &str) -> CliResult<BackwardFault> {
    let (op, scale) = text.split_once(':').ok_or_else(|| CliError::config(format!("fault `{text}` is not op:scale")))?;
    let scale: f64 = scale.parse().or_kind(Kind::Config, format!("fault scale `{scale}`"))?;
    // The tape identifies ops by static names; a CLI process injects at most one.
    let op: &'static str = Box::leak(op.to_string().into_boxed_str());
    Ok(BackwardFault { op, scale })
}
