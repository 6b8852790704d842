//! Parameter checkpoints: a directory of `MGGT` files plus `manifest.csv`
//! listing `name,file` for each.

use std::fs;
use std::path::Path;

use mgg_core::ParamStore;

use crate::error::{CliError, CliResult, Kind, ResultExt};
use crate::fsio;
use crate::tensor_io;

pub const MANIFEST: &str = "manifest.csv";

fn file_name(name: &str) -> String {
    format!("{name}.mggt")
}

/// Writes every parameter and buffer of `store` into `dir`.
pub fn save(dir: &Path, store: &ParamStore) -> CliResult<()> {
    fsio::write_dir_atomic(dir, |tmp| {
        let mut manifest = String::from("name,file\n");
        for (name, p) in store.iter() {
            let file = file_name(name);
            fsio::write_atomic(&tmp.join(&file), &tensor_io::encode(&p.value))?;
            manifest.push_str(&format!("{name},{file}\n"));
        }
        fsio::write_atomic(&tmp.join(MANIFEST), manifest.as_bytes())
    })
}

/// Overwrites the values of `store` from `dir`. The checkpoint must hold
/// exactly the parameters of `store`, each with the same shape.
pub fn load(dir: &Path, store: &mut ParamStore) -> CliResult<()> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).or_kind(Kind::Data, manifest_path.display())?;
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let (name, file) = line
            .split_once(',')
            .ok_or_else(|| CliError::data(format!("{}: line {} is not `name,file`", manifest_path.display(), i + 1)))?;
        if !seen.insert(name.to_string()) {
            return Err(CliError::data(format!("{}: `{name}` listed twice", manifest_path.display())));
        }
        let id = store
            .id(name)
            .map_err(|_| CliError::shape(format!("checkpoint parameter `{name}` does not exist in the configured model")))?;
        let path = dir.join(file);
        let bytes = fs::read(&path).or_kind(Kind::Data, path.display())?;
        let tensor = tensor_io::decode(&bytes).or_kind(Kind::Data, path.display())?;
        let target = store.value_mut(id);
        if tensor.shape() != target.shape() {
            return Err(CliError::shape(format!(
                "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        *target = tensor;
    }
    if seen.len() != store.len() {
        return Err(CliError::shape(format!("checkpoint holds {} tensors, model has {}", seen.len(), store.len())));
    }
    Ok(())
}
