//! `relative/path,label` sample lists.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_pgm, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    /// 0 benign, 1 malignant.
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::parse(source, format!("line {}: {m}", n + 1));
            let (path, label) = line
                .rsplit_once(',')
                .ok_or_else(|| err(format!("expected `path,label`, got `{line}`")))?;
            let path = path.trim();
            if path.is_empty() {
                return Err(err("empty path".into()));
            }
            let label = match label.trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(err(format!("label `{other}` is not 0 or 1"))),
            };
            if !seen.insert(path.to_string()) {
                return Err(err(format!("duplicate path `{path}`")));
            }
            records.push(ManifestRecord {
                path: PathBuf::from(path),
                label,
            });
        }
        Ok(Manifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, path)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in &manifest.records {
        writeln!(text, "{},{}", r.path.display(), r.label).unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every image listed in a manifest, resolving paths against the
/// manifest's directory. All images must share one size.
pub fn load_image_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::Data(format!(
            "{}: no samples in manifest",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut images = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let img = read_pgm(base.join(&r.path))?;
        if let Some(first) = images.first().map(|t: &Tensor| t.dims().to_vec()) {
            if img.dims() != first.as_slice() {
                return Err(Error::Data(format!(
                    "{}: image is {:?}, earlier images are {:?}",
                    r.path.display(),
                    img.dims(),
                    first
                )));
            }
        }
        images.push(img);
    }
    let labels = manifest.records.iter().map(|r| r.label).collect();
    Dataset::new(Tensor::stack(&images)?, labels)
}
