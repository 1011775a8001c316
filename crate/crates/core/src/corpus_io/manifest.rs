use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Synthetic,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Label::Real),
            "synthetic" => Ok(Label::Synthetic),
            other => Err(format!("label {other:?} is not one of real, synthetic")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    /// Free-form source name, e.g. `SDXL` or `real/COCO`.
    pub generator: String,
    /// Pairing key: real and synthetic entries sharing a group are compared
    /// against each other during evaluation.
    pub group: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.label == label)
    }
}

const COLUMNS: [&str; 4] = ["path", "label", "generator", "group"];

/// Loads a `path,label,generator,group` CSV. Relative paths are resolved
/// against the manifest's own directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&bytes, base, path)
}

/// Parses manifest CSV bytes; `origin` labels errors.
pub fn parse_manifest(bytes: &[u8], base_dir: &Path, origin: &Path) -> Result<CorpusManifest> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::format(origin, format!("unreadable manifest header: {e}")))?
        .clone();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(origin, format!("manifest header lacks column `{name}`")))?;
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::format(origin, format!("row {row}: malformed CSV: {e}")))?;
        let field = |k: usize| record.get(index[k]).unwrap_or("").trim();
        let raw_path = field(0);
        if raw_path.is_empty() {
            return Err(Error::format(origin, format!("row {row}: empty path")));
        }
        let label: Label = field(1)
            .parse()
            .map_err(|e: String| Error::format(origin, format!("row {row}: {e}")))?;
        let raw_path = Path::new(raw_path);
        let path = if raw_path.is_absolute() {
            raw_path.to_path_buf()
        } else {
            base_dir.join(raw_path)
        };
        if !seen.insert(path.clone()) {
            return Err(Error::format(
                origin,
                format!("row {row}: duplicate path {}", path.display()),
            ));
        }
        entries.push(ManifestEntry {
            path,
            label,
            generator: field(2).to_string(),
            group: field(3).to_string(),
        });
    }
    Ok(CorpusManifest { entries })
}
