//! Dataset manifests: which clouds exist, where their labels live and which
//! split they belong to.
//!
//! The file is TOML with one `[[entry]]` table per cloud:
//!
//! ```toml
//! [[entry]]
//! id = "bagel_003"
//! cloud = "clouds/bagel_003.xyz"
//! labels = "labels/bagel_003.labels"   # optional for test entries
//! split = "test"
//! rgb_features = "rgb/bagel_003"       # optional directory of view_XX.padf
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub cloud: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default)]
    entry: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(base_dir: PathBuf, entries: Vec<ManifestEntry>) -> Self {
        Self { base_dir, entries }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Check ids and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let ok = !e.id.is_empty()
                && e.id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
                && e.id != "."
                && e.id != "..";
            if !ok {
                return Err(Error::validation(format!(
                    "entry id '{}' must be non-empty and use only letters, digits, '_', '-' or '.'",
                    e.id
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::validation(format!("duplicate entry id '{}'", e.id)));
            }
            if !self.resolve(&e.cloud).is_file() {
                return Err(Error::validation(format!(
                    "{}: cloud file {} does not exist",
                    e.id,
                    self.resolve(&e.cloud).display()
                )));
            }
            match &e.labels {
                Some(l) if !self.resolve(l).is_file() => {
                    return Err(Error::validation(format!(
                        "{}: labels file {} does not exist",
                        e.id,
                        self.resolve(l).display()
                    )));
                }
                None if e.split == Split::Train => {
                    return Err(Error::validation(format!("{}: train entries need a labels file", e.id)));
                }
                _ => {}
            }
            if let Some(r) = &e.rgb_features {
                if !self.resolve(r).is_dir() {
                    return Err(Error::validation(format!(
                        "{}: RGB feature directory {} does not exist",
                        e.id,
                        self.resolve(r).display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parse and validate a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::new(base, file.entry);
    m.validate()?;
    Ok(m)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(&ManifestFile {
        entry: manifest.entries.clone(),
    })
    .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split, labels: bool) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            cloud: PathBuf::from(format!("{id}.xyz")),
            labels: labels.then(|| PathBuf::from(format!("{id}.labels"))),
            split,
            rgb_features: None,
        }
    }

    #[test]
    fn round_trip_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.xyz", "a.labels", "b.xyz"] {
            fs::write(dir.path().join(f), "0 0 0\n").unwrap();
        }
        let m = Manifest::new(
            dir.path().to_path_buf(),
            vec![entry("a", Split::Train, true), entry("b", Split::Test, false)],
        );
        let p = dir.path().join("m.toml");
        save_manifest(&p, &m).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.resolve(Path::new("a.xyz")), dir.path().join("a.xyz"));
        assert_eq!(back.split(Split::Test).count(), 1);
    }

    #[test]
    fn validation_failures() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.xyz"), "0 0 0\n").unwrap();
        let check = |entries: Vec<ManifestEntry>| Manifest::new(dir.path().to_path_buf(), entries).validate();
        assert!(check(vec![entry("a", Split::Train, false)])
            .unwrap_err()
            .to_string()
            .contains("labels"));
        assert!(check(vec![entry("a", Split::Test, true)]).is_err());
        assert!(check(vec![entry("a", Split::Test, false), entry("a", Split::Test, false)]).is_err());
        assert!(check(vec![entry("../x", Split::Test, false)]).is_err());
        assert!(check(vec![entry("a", Split::Test, false)]).is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        fs::write(&p, "[[entry]]\nid = \"a\"\ncloud = \"a.xyz\"\nsplit = \"test\"\ncolour = 1\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Format { .. })));
    }
}
