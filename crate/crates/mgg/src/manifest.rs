//! Dataset manifests: `sample_id,image_path,bit0,...,bit{N-1}` with image
//! paths relative to the manifest's directory.

use std::fs;
use std::path::Path;

use mgg_core::data::{Dataset, Sample};

use crate::error::{CliError, CliResult, Kind, ResultExt};
use crate::fsio;
use crate::pgm;

pub const IMAGE_DIR: &str = "images";

pub fn header(n_attrs: usize) -> String {
    let mut h = String::from("sample_id,image_path");
    for a in 0..n_attrs {
        h.push_str(&format!(",bit{a}"));
    }
    h
}

pub fn image_name(id: u64) -> String {
    format!("{IMAGE_DIR}/{id:06}.pgm")
}

/// Writes every image and the manifest into `dir`.
pub fn save(dir: &Path, data: &Dataset) -> CliResult<()> {
    let mut text = header(data.n_attrs);
    text.push('\n');
    for s in &data.samples {
        let rel = image_name(s.id);
        let img = pgm::Image { width: data.width, height: data.height, pixels: s.pixels.clone() };
        fsio::write_atomic(&dir.join(&rel), &pgm::encode(&img))?;
        text.push_str(&format!("{},{rel}", s.id));
        for b in &s.labels {
            text.push_str(&format!(",{b}"));
        }
        text.push('\n');
    }
    fsio::write_atomic(&dir.join("manifest.csv"), text.as_bytes())
}

/// Loads a manifest and its images. Every error names the offending row.
pub fn load(path: &Path) -> CliResult<Dataset> {
    let text = fs::read_to_string(path).or_kind(Kind::Data, path.display())?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| CliError::data(format!("{}: empty manifest", path.display())))?;
    let columns: Vec<&str> = head.split(',').collect();
    if columns.len() < 3 || columns[0] != "sample_id" || columns[1] != "image_path" {
        return Err(CliError::data(format!("{}: header must be `sample_id,image_path,bit0,...`", path.display())));
    }
    let n_attrs = columns.len() - 2;
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in lines {
        let row = i + 1;
        let bad = |what: String| CliError::data(format!("{} row {row}: {what}", path.display()));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n_attrs + 2 {
            return Err(bad(format!("{} fields, expected {}", fields.len(), n_attrs + 2)));
        }
        let id: u64 = fields[0].parse().map_err(|_| bad(format!("bad sample id `{}`", fields[0])))?;
        let labels = fields[2..]
            .iter()
            .map(|f| match *f {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(bad(format!("label `{other}` is not 0 or 1"))),
            })
            .collect::<CliResult<Vec<u8>>>()?;
        let img_path = root.join(fields[1]);
        let bytes = fs::read(&img_path).map_err(|e| bad(format!("{}: {e}", img_path.display())))?;
        let img = pgm::decode(&bytes).map_err(|e| bad(format!("{}: {e}", img_path.display())))?;
        match dims {
            None => dims = Some((img.width, img.height)),
            Some(d) if d != (img.width, img.height) => {
                return Err(bad(format!("image is {}x{}, earlier rows are {}x{}", img.width, img.height, d.0, d.1)));
            }
            Some(_) => {}
        }
        samples.push(Sample { id, pixels: img.pixels, labels });
    }
    let (width, height) = dims.ok_or_else(|| CliError::data(format!("{}: no samples", path.display())))?;
    Ok(Dataset { width, height, n_attrs, samples })
}
