use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rng_from_seed, DegradationCode, FundusImage, GradeLabel};
use crate::error::{Error, Result};

/// Column order of the manifest CSV.
pub const MANIFEST_HEADER: [&str; 4] = ["path", "label", "origin", "degradation_code"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest root unless absolute.
    pub path: PathBuf,
    pub label: GradeLabel,
    pub origin: String,
    pub degradation_code: DegradationCode,
}

#[derive(Serialize, Deserialize)]
struct Row {
    path: String,
    label: i64,
    origin: String,
    degradation_code: u8,
}

/// A labelled image list rooted at a directory (normally the CSV's own).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            root: root.into(),
            entries,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: ManifestEntry) {
        self.entries.push(entry);
    }

    /// Number of entries per grade.
    pub fn counts(&self) -> [usize; GradeLabel::COUNT] {
        let mut counts = [0; GradeLabel::COUNT];
        for e in &self.entries {
            counts[e.label.index()] += 1;
        }
        counts
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<FundusImage> {
        FundusImage::open(&self.resolve(entry))
    }

    /// Reads a manifest CSV; relative paths resolve against the CSV's directory.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(csv_path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", csv_path.display())))?;
        let root = csv_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let root = std::path::absolute(if root.as_os_str().is_empty() { Path::new(".") } else { &root })?;
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "expected header {:?}, found {:?}",
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 2)))?;
            let label = GradeLabel::new(row.label).map_err(|e| Error::Manifest(format!("row {}: {e}", line + 2)))?;
            let code = DegradationCode::new(row.degradation_code)
                .map_err(|e| Error::Manifest(format!("row {}: {e}", line + 2)))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(row.path),
                label,
                origin: row.origin,
                degradation_code: code,
            });
        }
        Ok(DatasetManifest { root, entries })
    }

    /// Serializes with paths written relative to `base` when they lie under it.
    pub fn to_csv(&self, base: &Path) -> Result<String> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        writer.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            let full = self.resolve(e);
            let path = full.strip_prefix(base).map(Path::to_path_buf).unwrap_or(full);
            writer.serialize(Row {
                path: path.to_string_lossy().replace('\\', "/"),
                label: i64::from(e.label.value()),
                origin: e.origin.clone(),
                degradation_code: e.degradation_code.value(),
            })?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let base = csv_path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(if base.as_os_str().is_empty() { Path::new(".") } else { base })?;
        if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(csv_path, self.to_csv(&base)?)?;
        Ok(())
    }

    /// Checks that every entry decodes; reports the first failure by path.
    pub fn validate(&self) -> Result<()> {
        self.entries
            .par_iter()
            .try_for_each(|e| self.load_image(e).map(|_| ()))
    }
}

/// Samples exactly `per_label` entries of every grade, without replacement,
/// from the union of `manifests`.
///
/// Entries resolving to the same file are counted once. Within each grade the
/// sampled entries keep their input order; grades are emitted 0 through 4.
/// The result is rooted at the first manifest's root.
pub fn build_balanced(manifests: &[DatasetManifest], per_label: usize, seed: u64) -> Result<DatasetManifest> {
    if per_label == 0 {
        return Err(Error::invalid("build_balanced", "per_label must be positive"));
    }
    let Some(first) = manifests.first() else {
        return Err(Error::invalid("build_balanced", "no manifests given"));
    };
    let mut seen = HashSet::new();
    let mut pools: [Vec<ManifestEntry>; GradeLabel::COUNT] = Default::default();
    for m in manifests {
        for e in &m.entries {
            let full = m.resolve(e);
            if seen.insert(full.clone()) {
                let path = full.strip_prefix(&first.root).map(Path::to_path_buf).unwrap_or(full);
                pools[e.label.index()].push(ManifestEntry { path, ..e.clone() });
            }
        }
    }
    for (label, pool) in pools.iter().enumerate() {
        if pool.len() < per_label {
            return Err(Error::InsufficientEntries {
                label: label as u8,
                needed: per_label,
                available: pool.len(),
                shortfall: per_label - pool.len(),
            });
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut entries = Vec::with_capacity(per_label * GradeLabel::COUNT);
    for pool in pools {
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), per_label).into_vec();
        picked.sort_unstable();
        entries.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    Ok(DatasetManifest::new(first.root.clone(), entries))
}
