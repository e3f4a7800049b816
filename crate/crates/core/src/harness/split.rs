//! Scene-level test extraction and partial target splits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::lidar_io::{DatasetIndex, Scene};
use crate::seed;

/// Share of the non-test scans of a partial split kept for training.
pub const TRAIN_SHARE: f64 = 0.7;

/// Target data fraction of a partial-data study.
///
/// The nominal levels stand for 95, 235 and 470 of 950 scenes, so
/// "25%" is 235/950 rather than a quarter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Percent {
    P10,
    P25,
    P50,
    P100,
}

impl Percent {
    pub const ALL: [Percent; 4] = [Percent::P10, Percent::P25, Percent::P50, Percent::P100];

    pub fn value(self) -> u32 {
        match self {
            Percent::P10 => 10,
            Percent::P25 => 25,
            Percent::P50 => 50,
            Percent::P100 => 100,
        }
    }

    pub fn fraction(self) -> f64 {
        match self {
            Percent::P10 => 95.0 / 950.0,
            Percent::P25 => 235.0 / 950.0,
            Percent::P50 => 470.0 / 950.0,
            Percent::P100 => 1.0,
        }
    }

    /// Scenes kept out of `n_scenes`, at least one.
    pub fn n_scenes(self, n_scenes: usize) -> usize {
        ((n_scenes as f64 * self.fraction()).round() as usize).clamp(1, n_scenes.max(1))
    }
}

impl TryFrom<u32> for Percent {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Percent::ALL
            .into_iter()
            .find(|p| p.value() == v)
            .ok_or_else(|| format!("percent must be one of 10, 25, 50, 100, got {v}"))
    }
}

impl From<Percent> for u32 {
    fn from(p: Percent) -> u32 {
        p.value()
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.value())
    }
}

impl FromStr for Percent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: u32 = s
            .trim_end_matches('%')
            .parse()
            .map_err(|_| format!("invalid percent {s:?}"))?;
        Percent::try_from(v)
    }
}

fn shuffled_scene_ids(index: &DatasetIndex, seed: u64, tag: &str) -> Vec<String> {
    let mut ids: Vec<String> = index.scenes.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(&mut seed::rng(seed, &[tag.into(), index.dataset_name.as_str().into()]));
    ids
}

fn too_few(index: &DatasetIndex) -> HarnessError {
    HarnessError::TooFewScenes {
        dataset: index.dataset_name.clone(),
        scenes: index.scenes.len(),
    }
}

/// Splits off `round(fraction · scenes)` whole scenes, clamped to
/// `[1, scenes − 1]`; returns `(split_off, rest)`.
pub(crate) fn split_scenes(
    index: &DatasetIndex,
    fraction: f64,
    seed: u64,
    tag: &str,
) -> Result<(DatasetIndex, DatasetIndex), HarnessError> {
    let n = index.scenes.len();
    if n < 2 {
        return Err(too_few(index));
    }
    let n_off = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let ids = shuffled_scene_ids(index, seed, tag);
    let off: Vec<&str> = ids[..n_off].iter().map(String::as_str).collect();
    let rest: Vec<&str> = ids[n_off..].iter().map(String::as_str).collect();
    Ok((index.with_scenes(&off), index.with_scenes(&rest)))
}

/// Moves `round(fraction · scenes)` whole scenes, at least one and never
/// all, to the test side.
pub fn extract_test_split(
    index: &DatasetIndex,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex), HarnessError> {
    let n = index.scenes.len();
    if n < 2 {
        return Err(too_few(index));
    }
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(HarnessError::InvalidSpec(format!(
            "test fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if !(0.10..=0.20).contains(&fraction) {
        log::warn!("test fraction {fraction} is outside the usual 10-20% range");
    }
    let (test, train) = split_scenes(index, fraction, seed, "test_split")?;
    Ok((train, test))
}

/// Training and validation scans of a partial split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialSplit {
    pub percent: Percent,
    pub train: DatasetIndex,
    pub validation: DatasetIndex,
}

impl PartialSplit {
    /// Scene ids contributing scans to either side.
    pub fn selected_scenes(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .train
            .scenes
            .iter()
            .chain(&self.validation.scenes)
            .map(|s| s.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Selects whole scenes from a (test-free) index, then splits their scans
/// 70/30 into training and validation.
///
/// Scene selection is a prefix of one seeded permutation, so smaller
/// levels are subsets of larger ones for the same seed.
pub fn make_partial_split(
    index: &DatasetIndex,
    percent: Percent,
    seed: u64,
) -> Result<PartialSplit, HarnessError> {
    let n = index.scenes.len();
    if n == 0 {
        return Err(too_few(index));
    }
    let ids = shuffled_scene_ids(index, seed, "partial_scenes");
    let keep: Vec<&str> = ids[..percent.n_scenes(n)].iter().map(String::as_str).collect();
    let selected = index.with_scenes(&keep);

    let mut scans: Vec<(String, usize)> = selected
        .scenes
        .iter()
        .flat_map(|s| (0..s.scans.len()).map(move |i| (s.id.clone(), i)))
        .collect();
    if scans.len() < 2 {
        return Err(too_few(index));
    }
    scans.shuffle(&mut seed::rng(
        seed,
        &["partial_scans".into(), index.dataset_name.as_str().into()],
    ));
    let n_train = ((scans.len() as f64 * TRAIN_SHARE).round() as usize).clamp(1, scans.len() - 1);
    let (train, validation) = scans.split_at(n_train);
    let build = |picked: &[(String, usize)]| DatasetIndex {
        dataset_name: index.dataset_name.clone(),
        fine_vocabulary: index.fine_vocabulary.clone(),
        scenes: selected
            .scenes
            .iter()
            .filter_map(|scene| {
                let scans: Vec<_> = scene
                    .scans
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| picked.iter().any(|(id, j)| *id == scene.id && j == i))
                    .map(|(_, s)| s.clone())
                    .collect();
                (!scans.is_empty()).then(|| Scene {
                    id: scene.id.clone(),
                    scans,
                })
            })
            .collect(),
    };
    Ok(PartialSplit {
        percent,
        train: build(train),
        validation: build(validation),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_io::ScanEntry;
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    pub(crate) fn synthetic_index(n_scenes: usize, scans_per_scene: usize) -> DatasetIndex {
        DatasetIndex {
            dataset_name: "synthetic".into(),
            fine_vocabulary: Default::default(),
            scenes: (0..n_scenes)
                .map(|s| Scene {
                    id: format!("scene_{s:04}"),
                    scans: (0..scans_per_scene)
                        .map(|i| ScanEntry {
                            scan_id: format!("{i:06}"),
                            scan_path: PathBuf::from(format!("{s}/{i}.bin")),
                            label_path: PathBuf::from(format!("{s}/{i}.label")),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn scene_ids(index: &DatasetIndex) -> BTreeSet<String> {
        index.scenes.iter().map(|s| s.id.clone()).collect()
    }

    fn scan_keys(index: &DatasetIndex) -> BTreeSet<(String, String)> {
        index.scans().map(|(s, e)| (s.id.clone(), e.scan_id.clone())).collect()
    }

    #[test]
    fn ten_scenes_fifth_out() {
        let idx = synthetic_index(10, 3);
        let (train, test) = extract_test_split(&idx, 0.2, 1).unwrap();
        assert_eq!(test.scenes.len(), 2);
        assert_eq!(train.scenes.len(), 8);
        assert_eq!(extract_test_split(&idx, 0.2, 1).unwrap(), (train, test));
    }

    #[test]
    fn too_few_scenes() {
        assert!(matches!(
            extract_test_split(&synthetic_index(1, 4), 0.2, 0),
            Err(HarnessError::TooFewScenes { scenes: 1, .. })
        ));
        assert!(matches!(
            make_partial_split(&synthetic_index(1, 1), Percent::P100, 0),
            Err(HarnessError::TooFewScenes { .. })
        ));
    }

    #[test]
    fn reference_scene_counts() {
        let idx = synthetic_index(950, 1);
        for (p, n) in [(Percent::P10, 95), (Percent::P25, 235), (Percent::P50, 470), (Percent::P100, 950)] {
            assert_eq!(make_partial_split(&idx, p, 3).unwrap().selected_scenes().len(), n);
        }
    }

    #[test]
    fn hundred_percent_keeps_everything() {
        let idx = synthetic_index(12, 5);
        let split = make_partial_split(&idx, Percent::P100, 9).unwrap();
        let mut all = scan_keys(&split.train);
        all.extend(scan_keys(&split.validation));
        assert_eq!(all, scan_keys(&idx));
        assert_eq!(split.train.n_scans(), 42);
        assert_eq!(split.validation.n_scans(), 18);
    }

    #[test]
    fn levels_are_nested() {
        let idx = synthetic_index(40, 2);
        let sets: Vec<BTreeSet<String>> = Percent::ALL
            .iter()
            .map(|&p| make_partial_split(&idx, p, 5).unwrap().selected_scenes().into_iter().collect())
            .collect();
        for w in sets.windows(2) {
            assert!(w[0].is_subset(&w[1]));
        }
    }

    #[test]
    fn percent_parsing() {
        assert_eq!("25".parse::<Percent>().unwrap(), Percent::P25);
        assert_eq!("50%".parse::<Percent>().unwrap(), Percent::P50);
        assert!("30".parse::<Percent>().is_err());
    }

    proptest! {
        #[test]
        fn test_split_partitions(n in 2usize..60, frac in 0.1f64..0.2, seed in any::<u64>()) {
            let idx = synthetic_index(n, 2);
            let (train, test) = extract_test_split(&idx, frac, seed).unwrap();
            let (a, b) = (scene_ids(&train), scene_ids(&test));
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.union(&b).cloned().collect::<BTreeSet<_>>(), scene_ids(&idx));
            let target = n as f64 * frac;
            prop_assert!((b.len() as f64 - target).abs() <= 1.0);
        }

        #[test]
        fn partial_split_partitions_selected_scans(n in 1usize..40, spp in 2usize..6, seed in any::<u64>(), p in 0usize..4) {
            let idx = synthetic_index(n, spp);
            let split = make_partial_split(&idx, Percent::ALL[p], seed).unwrap();
            let (tr, va) = (scan_keys(&split.train), scan_keys(&split.validation));
            prop_assert!(tr.is_disjoint(&va));
            prop_assert!(!tr.is_empty() && !va.is_empty());
            let selected: BTreeSet<String> = split.selected_scenes().into_iter().collect();
            prop_assert_eq!(selected.len(), Percent::ALL[p].n_scenes(n));
            prop_assert_eq!(tr.len() + va.len(), selected.len() * spp);
        }
    }
}
