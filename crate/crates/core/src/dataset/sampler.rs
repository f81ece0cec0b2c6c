use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, SampleRecord};
use crate::error::{Error, Result};

/// `p` identities × `k` images, grouped by identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub p: usize,
    pub k: usize,
    pub samples: Vec<SampleRecord>,
}

impl PkBatch {
    /// Dense identity labels in sample order.
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity_id).collect()
    }
}

/// Draws a PK batch from the train split.
///
/// Identities with fewer than `k` images are sampled with replacement.
pub fn sample_pk_batch(manifest: &DatasetManifest, p: usize, k: usize, seed: u64) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be at least 1".into()));
    }
    let groups = manifest.train_by_identity();
    if p > groups.len() {
        return Err(Error::Config(format!(
            "P = {p} exceeds the {} train identities",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..groups.len()).collect();
    let (chosen, _) = ids.partial_shuffle(&mut rng, p);
    let mut samples = Vec::with_capacity(p * k);
    for &id in chosen.iter() {
        let pool = &groups[id];
        if pool.len() >= k {
            samples.extend(pool.choose_multiple(&mut rng, k).map(|r| (*r).clone()));
        } else {
            samples.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())].clone()));
        }
    }
    Ok(PkBatch { p, k, samples })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::path::PathBuf;

    use super::*;
    use crate::dataset::{ManifestFile, ManifestRecord, Split};

    fn manifest(ids: u64, per: u64) -> DatasetManifest {
        let records = (0..ids)
            .flat_map(|id| {
                (0..per).map(move |i| ManifestRecord {
                    path: format!("{id}_{i}.png"),
                    id,
                    cam: 0,
                    clothes: i % 2,
                    split: Split::Train,
                })
            })
            .collect();
        DatasetManifest::from_file(
            ManifestFile {
                image_size: [8, 8],
                records,
            },
            PathBuf::new(),
        )
        .unwrap()
    }

    #[test]
    fn default_batch_has_twenty_samples() {
        let b = sample_pk_batch(&manifest(8, 6), 5, 4, 1).unwrap();
        assert_eq!(b.samples.len(), 20);
        let labels = b.labels();
        let ids: HashSet<_> = labels.iter().collect();
        assert_eq!(ids.len(), 5);
        for chunk in labels.chunks(4) {
            assert!(chunk.iter().all(|&l| l == chunk[0]));
        }
    }

    #[test]
    fn degenerate_single_sample_batch() {
        let b = sample_pk_batch(&manifest(3, 2), 1, 1, 0).unwrap();
        assert_eq!(b.samples.len(), 1);
    }

    #[test]
    fn deterministic_for_seed() {
        let m = manifest(6, 5);
        assert_eq!(
            sample_pk_batch(&m, 3, 4, 11).unwrap(),
            sample_pk_batch(&m, 3, 4, 11).unwrap()
        );
    }

    #[test]
    fn small_identities_sample_with_replacement() {
        let b = sample_pk_batch(&manifest(2, 2), 2, 4, 5).unwrap();
        assert_eq!(b.samples.len(), 8);
    }

    #[test]
    fn too_many_identities_is_an_error() {
        assert!(sample_pk_batch(&manifest(2, 2), 3, 1, 0).is_err());
    }

    #[test]
    fn every_identity_is_eventually_covered() {
        let m = manifest(12, 4);
        for base in [0u64, 1000, 77_777] {
            let mut seen = HashSet::new();
            for s in 0..1000 {
                seen.extend(sample_pk_batch(&m, 5, 4, base + s).unwrap().labels());
            }
            assert_eq!(seen.len(), 12);
        }
    }
}
