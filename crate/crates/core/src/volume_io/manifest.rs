use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub ct: PathBuf,
    pub t1ce: PathBuf,
    pub flair: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub split: Split,
}

/// JSON list of cases. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    /// Modalities are already clipped/normalized.
    #[serde(default)]
    pub preprocessed: bool,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(num_classes: usize, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            num_classes,
            class_names: Vec::new(),
            preprocessed: false,
            entries,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "manifest num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Config(format!("duplicate case_id `{}`", e.case_id)));
            }
            if e.split == Split::Train && e.label.is_none() {
                return Err(Error::Config(format!("train case `{}` has no label", e.case_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, "manifest", e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        m.base_dir = fs::canonicalize(if dir.as_os_str().is_empty() { Path::new(".") } else { dir })
            .map_err(|e| Error::io(dir, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entry(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Copy restricted to the given case ids (order of `self` kept).
    pub fn subset(&self, case_ids: &[String]) -> Self {
        let mut m = self.clone();
        m.entries.retain(|e| case_ids.contains(&e.case_id));
        m
    }

    /// Copy whose entry paths are absolute, so it can be written elsewhere.
    pub fn absolutized(&self) -> Self {
        let mut m = self.clone();
        for e in &mut m.entries {
            e.ct = self.resolve(&e.ct);
            e.t1ce = self.resolve(&e.t1ce);
            e.flair = self.resolve(&e.flair);
            e.label = e.label.as_ref().map(|l| self.resolve(l));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split, label: bool) -> ManifestEntry {
        ManifestEntry {
            case_id: id.into(),
            ct: format!("{id}_ct.bin").into(),
            t1ce: format!("{id}_t1ce.bin").into(),
            flair: format!("{id}_flair.bin").into(),
            label: label.then(|| format!("{id}_label.bin").into()),
            split,
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = DatasetManifest::new(3, vec![entry("a", Split::Train, true), entry("a", Split::Test, false)]);
        assert!(r.is_err());
    }

    #[test]
    fn train_needs_label_test_does_not() {
        assert!(DatasetManifest::new(3, vec![entry("a", Split::Train, false)]).is_err());
        assert!(DatasetManifest::new(3, vec![entry("a", Split::Test, false)]).is_ok());
    }

    #[test]
    fn json_round_trip_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(3, vec![entry("a", Split::Train, true), entry("b", Split::Test, false)]).unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.entries, m.entries);
        let resolved = back.resolve(&back.entries[0].ct);
        assert!(resolved.is_absolute());
        assert!(resolved.ends_with("a_ct.bin"));
        assert_eq!(back.split(Split::Test).count(), 1);
    }
}
