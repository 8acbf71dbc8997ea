use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Track;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub test_ratio: f64,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_ratio: 0.5,
            test_ratio: 0.4,
            val_ratio: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train_ratio, self.test_ratio, self.val_ratio];
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("split ratios must be nonnegative".into()));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {}",
                r.iter().sum::<f64>()
            )));
        }
        Ok(())
    }

    /// Video counts per split by largest remainder, with every split that has
    /// a positive ratio receiving at least one video.
    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let ratios = [self.train_ratio, self.test_ratio, self.val_ratio];
        let wanted = ratios.iter().filter(|r| **r > 0.0).count();
        if n < wanted {
            return Err(Error::Config(format!(
                "{n} videos cannot fill {wanted} nonempty splits"
            )));
        }
        let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
        // guard the floor against representation error such as 0.4 * 10 = 3.9999..
        let mut counts: [usize; 3] =
            std::array::from_fn(|i| (exact[i] + 1e-9).floor() as usize);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - counts[a] as f64;
            let fb = exact[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if ratios[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        for i in 0..3 {
            if ratios[i] > 0.0 && counts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        Ok(counts)
    }
}

/// Video ids assigned to each split, as written next to derived datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Track>,
    pub test: Vec<Track>,
    pub val: Vec<Track>,
    pub manifest: SplitManifest,
}

impl DatasetSplit {
    /// Re-applies a stored manifest; tracks of unlisted videos are dropped.
    pub fn from_manifest(tracks: &[Track], manifest: &SplitManifest) -> Self {
        let pick = |ids: &[String]| -> Vec<Track> {
            let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            tracks
                .iter()
                .filter(|t| ids.contains(t.video_id.as_str()))
                .cloned()
                .collect()
        };
        Self {
            train: pick(&manifest.train),
            test: pick(&manifest.test),
            val: pick(&manifest.val),
            manifest: manifest.clone(),
        }
    }
}

/// Partitions tracks by video so overlapping windows never straddle splits.
pub fn split_dataset(tracks: &[Track], spec: &SplitSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut videos: Vec<String> = tracks
        .iter()
        .map(|t| t.video_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let [n_train, n_test, _] = spec.counts(videos.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    videos.shuffle(&mut rng);
    let mut train = videos[..n_train].to_vec();
    let mut test = videos[n_train..n_train + n_test].to_vec();
    let mut val = videos[n_train + n_test..].to_vec();
    train.sort();
    test.sort();
    val.sort();
    let manifest = SplitManifest {
        seed: spec.seed,
        train,
        test,
        val,
    };
    Ok(DatasetSplit::from_manifest(tracks, &manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoundingBox;

    fn corpus(videos: usize, per_video: usize) -> Vec<Track> {
        let mut out = Vec::new();
        for v in 0..videos {
            for p in 0..per_video {
                let b = BoundingBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
                out.push(Track::new(format!("video_{v:02}"), format!("{p}"), vec![0], vec![b], 30.0).unwrap());
            }
        }
        out
    }

    #[test]
    fn default_ratios_ten_videos() {
        let s = split_dataset(&corpus(10, 2), &SplitSpec::default()).unwrap();
        assert_eq!(
            (s.manifest.train.len(), s.manifest.test.len(), s.manifest.val.len()),
            (5, 4, 1)
        );
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (10, 8, 2));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let c = corpus(40, 1);
        let a = split_dataset(&c, &SplitSpec::default()).unwrap().manifest;
        let b = split_dataset(&c, &SplitSpec::default()).unwrap().manifest;
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let other = split_dataset(&c, &SplitSpec { seed: 99, ..Default::default() })
            .unwrap()
            .manifest;
        assert_ne!(a.train, other.train);
        assert_eq!(a.train.len(), other.train.len());
        assert_eq!(a.test.len(), other.test.len());
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        for n in 3..60 {
            for seed in 0..3 {
                let c = corpus(n, 1);
                let m = split_dataset(&c, &SplitSpec { seed, ..Default::default() })
                    .unwrap()
                    .manifest;
                let mut all: Vec<&String> = m.train.iter().chain(&m.test).chain(&m.val).collect();
                assert!(!m.train.is_empty() && !m.test.is_empty() && !m.val.is_empty());
                all.sort();
                all.dedup();
                assert_eq!(all.len(), n);
            }
        }
    }

    #[test]
    fn too_few_videos() {
        assert!(split_dataset(&corpus(2, 3), &SplitSpec::default()).is_err());
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let bad = SplitSpec { train_ratio: 0.6, ..Default::default() };
        assert!(split_dataset(&corpus(10, 1), &bad).is_err());
    }
}
