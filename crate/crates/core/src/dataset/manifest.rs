use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    /// Resolved image path.
    pub image_path: PathBuf,
    /// Dense identity index; train identities occupy `0..num_identities`.
    pub identity_id: usize,
    /// Identity id as written in the manifest.
    pub original_id: u64,
    pub camera_id: u64,
    /// Outfit index, scoped to the identity.
    pub clothes_id: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    /// Number of distinct train identities.
    pub num_identities: usize,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Directory the manifest was loaded from; relative paths resolve against it.
    pub root: PathBuf,
}

/// On-disk manifest record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub id: u64,
    pub cam: u64,
    pub clothes: u64,
    pub split: Split,
}

/// On-disk manifest document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub image_size: [usize; 2],
    pub records: Vec<ManifestRecord>,
}

impl ManifestFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_file(file, root)
}

impl DatasetManifest {
    /// Validates a parsed manifest and re-indexes identities densely.
    ///
    /// Train identities map to `0..M` in ascending order of their original ids;
    /// identities that only occur in query/gallery follow at `M..`.
    pub fn from_file(file: ManifestFile, root: PathBuf) -> Result<Self> {
        let [h, w] = file.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Dataset("image_size must be positive".into()));
        }
        let mut train_counts: BTreeMap<u64, usize> = BTreeMap::new();
        let mut other_ids = BTreeSet::new();
        for (i, r) in file.records.iter().enumerate() {
            if r.path.is_empty() {
                return Err(Error::Dataset(format!("record {i} has an empty path")));
            }
            match r.split {
                Split::Train => *train_counts.entry(r.id).or_default() += 1,
                _ => {
                    other_ids.insert(r.id);
                }
            }
        }
        if let Some((id, _)) = train_counts.iter().find(|(_, &n)| n < 2) {
            return Err(Error::Dataset(format!("identity {id} has <2 train images")));
        }
        let mut dense: BTreeMap<u64, usize> = train_counts
            .keys()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let num_identities = dense.len();
        for id in other_ids {
            let next = dense.len();
            dense.entry(id).or_insert(next);
        }
        let records = file
            .records
            .into_iter()
            .map(|r| SampleRecord {
                image_path: root.join(&r.path),
                identity_id: dense[&r.id],
                original_id: r.id,
                camera_id: r.cam,
                clothes_id: r.clothes,
                split: r.split,
            })
            .collect();
        Ok(DatasetManifest {
            records,
            num_identities,
            image_size: (h, w),
            root,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn train(&self) -> Vec<&SampleRecord> {
        self.split(Split::Train).collect()
    }

    /// Train records grouped by dense identity.
    pub fn train_by_identity(&self) -> Vec<Vec<&SampleRecord>> {
        let mut groups = vec![Vec::new(); self.num_identities];
        for r in self.split(Split::Train) {
            groups[r.identity_id].push(r);
        }
        groups
    }
}
