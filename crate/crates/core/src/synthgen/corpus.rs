//! Multi-dataset corpus generation.
//!
//! Corpus configs are TOML:
//!
//! ```toml
//! [[dataset]]
//! name = "urbis"
//! n_scenes = 30
//! scans_per_scene = 10
//! scan_spacing = 3.0          # meters the sensor advances between scans
//!
//! [dataset.scene]             # SceneConfig fields
//! extent = 30.0
//! counts = { car = 5, person = 3 }
//!
//! [dataset.scene.sensor]      # SensorModel fields
//! n_beams = 32
//!
//! [[dataset.labels]]          # archetype -> fine label
//! archetype = "car"
//! id = 10
//! name = "vehicle"
//! ```
//!
//! Each dataset is written as `<out>/<name>/` with `scans/*.bin`,
//! `labels/*.label`, `manifest.tsv`, `vocabulary.csv` and one fine→coarse
//! map per coarse variant under `maps/`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{place_scene, sample_scan, Archetype, Result, SceneConfig, SynthError};
use crate::lidar_io::{
    self, index_dataset, render_manifest, render_vocabulary, write_file, DatasetIndex, Layout,
    ScanEntry, Scene,
};
use crate::seed;
use crate::taxonomy::{coarse_set, LabelMap, Variant, IGNORE_ID};

/// Corpus behind the reference transfer benchmark.
pub const REFERENCE_CORPUS: &str = include_str!("../../benchmarks/reference_corpus.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelAssignment {
    pub archetype: Archetype,
    pub id: u16,
    pub name: String,
}

fn default_spacing() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub n_scenes: usize,
    pub scans_per_scene: usize,
    #[serde(default = "default_spacing")]
    pub scan_spacing: f64,
    #[serde(default)]
    pub scene: SceneConfig,
    pub labels: Vec<LabelAssignment>,
}

impl DatasetConfig {
    /// Fine vocabulary including the unlabeled class 0.
    pub fn vocabulary(&self) -> BTreeMap<u16, String> {
        let mut vocab = BTreeMap::from([(IGNORE_ID, "unlabeled".to_string())]);
        for l in &self.labels {
            vocab.insert(l.id, l.name.clone());
        }
        vocab
    }

    /// Scene config with this dataset's labels filled in.
    pub fn scene_config(&self) -> SceneConfig {
        let mut scene = self.scene.clone();
        scene.labels = self.labels.iter().map(|l| (l.archetype, l.id)).collect();
        scene
    }

    /// The fine→coarse map implied by the archetype assignment.
    pub fn label_map(&self, variant: Variant) -> Result<LabelMap> {
        let set = coarse_set(variant);
        let mut map = LabelMap::new(&self.name, variant);
        map.entries.insert(IGNORE_ID, IGNORE_ID);
        map.fine_names.insert(IGNORE_ID, "unlabeled".into());
        for l in &self.labels {
            let coarse = set
                .id_of(l.archetype.coarse_name(variant))
                .expect("archetype tables use known coarse names");
            if let Some(&prev) = map.entries.get(&l.id) {
                if prev != coarse {
                    return Err(SynthError::InvalidConfig(format!(
                        "{}: fine label {} ({}) spans several {variant} coarse classes",
                        self.name, l.id, l.name
                    )));
                }
            }
            map.entries.insert(l.id, coarse);
            map.fine_names.insert(l.id, l.name.clone());
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(format!("{}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("dataset name must be a plain, non-empty file name".into());
        }
        if self.n_scenes == 0 || self.scans_per_scene == 0 {
            return bad("n_scenes and scans_per_scene must be positive".into());
        }
        self.scene.validate()?;
        let mut seen = BTreeSet::new();
        let mut names: BTreeMap<u16, &str> = BTreeMap::new();
        for l in &self.labels {
            if l.id == IGNORE_ID {
                return bad(format!("{} uses the reserved id 0", l.archetype));
            }
            if !seen.insert(l.archetype) {
                return bad(format!("{} labeled twice", l.archetype));
            }
            if let Some(prev) = names.insert(l.id, &l.name) {
                if prev != l.name {
                    return bad(format!("id {} named both {prev:?} and {:?}", l.id, l.name));
                }
            }
        }
        // every variant must be derivable
        for v in Variant::ALL {
            self.label_map(v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetConfig>,
}

impl CorpusConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CorpusConfig =
            toml::from_str(text).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(SynthError::InvalidConfig(format!("duplicate dataset {}", d.name)));
            }
        }
        for (i, a) in self.datasets.iter().enumerate() {
            for b in &self.datasets[i + 1..] {
                if a.labels == b.labels {
                    log::warn!("datasets {} and {} share an identical label set", a.name, b.name);
                }
            }
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetConfig> {
        self.datasets.iter().find(|d| d.name == name)
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Write every dataset of `cfg` under `out_dir`; returns their indices in
/// config order. Output bytes depend only on `(cfg, seed)`.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64, out_dir: &Path) -> Result<Vec<DatasetIndex>> {
    cfg.validate()?;
    let mut indices = Vec::with_capacity(cfg.datasets.len());
    for ds in &cfg.datasets {
        indices.push(generate_dataset(ds, seed, &out_dir.join(&ds.name))?);
    }
    Ok(indices)
}

fn generate_dataset(ds: &DatasetConfig, seed: u64, root: &Path) -> Result<DatasetIndex> {
    let scene_cfg = ds.scene_config();
    let scenes: Vec<Scene> = (0..ds.n_scenes)
        .into_par_iter()
        .map(|s| -> Result<Scene> {
            let id = scene_id(s);
            let layout = place_scene(&scene_cfg, seed::derive(seed, &[ds.name.as_str().into(), id.as_str().into()]))?;
            let mut scans = Vec::with_capacity(ds.scans_per_scene);
            for i in 0..ds.scans_per_scene {
                let scan_seed = seed::derive(
                    seed,
                    &[ds.name.as_str().into(), id.as_str().into(), i.into()],
                );
                let x = (i as f64 - (ds.scans_per_scene as f64 - 1.0) / 2.0) * ds.scan_spacing;
                let (scan, labels) = sample_scan(&layout, &scene_cfg, [x, 0.0], scan_seed)?;
                let scan_id = format!("{id}_{i:06}");
                let scan_path = root.join("scans").join(format!("{scan_id}.{}", lidar_io::SCAN_EXTENSION));
                let label_path = root.join("labels").join(format!("{scan_id}.{}", lidar_io::LABEL_EXTENSION));
                write_file(&scan_path, &lidar_io::write_point_scan(&scan))?;
                write_file(&label_path, &lidar_io::write_label_file(&labels))?;
                scans.push(ScanEntry {
                    scan_id,
                    scan_path,
                    label_path,
                });
            }
            Ok(Scene { id, scans })
        })
        .collect::<Result<_>>()?;
    let index = DatasetIndex {
        dataset_name: ds.name.clone(),
        fine_vocabulary: ds.vocabulary(),
        scenes,
    };
    write_file(
        &root.join(lidar_io::MANIFEST_FILE),
        render_manifest(&index, root).as_bytes(),
    )?;
    write_file(
        &root.join(lidar_io::VOCABULARY_FILE),
        render_vocabulary(&index.fine_vocabulary).as_bytes(),
    )?;
    for v in Variant::ALL {
        let map = ds.label_map(v)?;
        write_file(&map_path(root, v), map.render().as_bytes())?;
    }
    Ok(index_dataset(root, &Layout::manifest())?)
}

/// Where `generate_corpus` writes the `variant` map of a dataset.
pub fn map_path(dataset_root: &Path, variant: Variant) -> std::path::PathBuf {
    dataset_root.join("maps").join(format!("{variant}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{load_label_map, remap, validate_label_map};

    const SMALL: &str = r#"
[[dataset]]
name = "alpha"
n_scenes = 2
scans_per_scene = 2
[dataset.scene]
extent = 20.0
counts = { car = 2, truck = 1, person = 1 }
[dataset.scene.sensor]
n_beams = 8
azimuth_resolution = 4.0
[[dataset.labels]]
archetype = "road"
id = 1
name = "road"
[[dataset.labels]]
archetype = "sidewalk"
id = 2
name = "sidewalk"
[[dataset.labels]]
archetype = "terrain"
id = 3
name = "terrain"
[[dataset.labels]]
archetype = "car"
id = 10
name = "vehicle"
[[dataset.labels]]
archetype = "truck"
id = 10
name = "vehicle"
[[dataset.labels]]
archetype = "person"
id = 30
name = "person"

[[dataset]]
name = "beta"
n_scenes = 1
scans_per_scene = 3
[dataset.scene]
counts = { car = 1, truck = 1 }
[dataset.scene.sensor]
n_beams = 4
azimuth_resolution = 6.0
[[dataset.labels]]
archetype = "road"
id = 5
name = "asphalt"
[[dataset.labels]]
archetype = "car"
id = 7
name = "car"
[[dataset.labels]]
archetype = "truck"
id = 8
name = "truck"
"#;

    #[test]
    fn writes_expected_files_deterministically() {
        let cfg = CorpusConfig::from_toml(SMALL).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ia = generate_corpus(&cfg, 42, a.path()).unwrap();
        let ib = generate_corpus(&cfg, 42, b.path()).unwrap();
        assert_eq!(ia.iter().map(DatasetIndex::n_scans).sum::<usize>(), 7);
        for (x, y) in ia.iter().zip(&ib) {
            for ((_, sa), (_, sb)) in x.scans().zip(y.scans()) {
                assert_eq!(std::fs::read(&sa.scan_path).unwrap(), std::fs::read(&sb.scan_path).unwrap());
                assert_eq!(std::fs::read(&sa.label_path).unwrap(), std::fs::read(&sb.label_path).unwrap());
            }
        }
        assert_eq!(ia[0].dataset_name, "alpha");
        assert_eq!(ia[0].fine_vocabulary.get(&10).map(String::as_str), Some("vehicle"));
    }

    #[test]
    fn vehicles_from_both_datasets_are_coarse_vehicles() {
        let cfg = CorpusConfig::from_toml(SMALL).unwrap();
        let eight = coarse_set(Variant::Eight);
        let vehicles = eight.id_of("vehicles").unwrap();
        let alpha = cfg.dataset("alpha").unwrap().label_map(Variant::Eight).unwrap();
        let beta = cfg.dataset("beta").unwrap().label_map(Variant::Eight).unwrap();
        assert_eq!(alpha.get(10), Some(vehicles));
        assert_eq!(beta.get(7), Some(vehicles));
        assert_eq!(beta.get(8), Some(vehicles));
    }

    #[test]
    fn written_maps_validate_and_match_ground_truth() {
        let cfg = CorpusConfig::from_toml(SMALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let indices = generate_corpus(&cfg, 1, dir.path()).unwrap();
        for (ds, index) in cfg.datasets.iter().zip(&indices) {
            for v in Variant::ALL {
                let text = std::fs::read_to_string(map_path(&dir.path().join(&ds.name), v)).unwrap();
                let map = load_label_map(&text, &coarse_set(v)).unwrap();
                let vocab: BTreeSet<u16> = index.fine_vocabulary.keys().copied().collect();
                assert!(validate_label_map(&map, &vocab).ok);
            }
        }
    }

    #[test]
    fn inconsistent_fine_label_rejected() {
        // one fine label for car and bicycle cannot be split under the ten-label set
        let text = SMALL.replace(
            "archetype = \"truck\"\nid = 10",
            "archetype = \"bicycle\"\nid = 10",
        );
        assert!(matches!(
            CorpusConfig::from_toml(&text),
            Err(SynthError::InvalidConfig(_))
        ));
    }

    #[test]
    fn duplicate_dataset_names_rejected() {
        let text = SMALL.replace("name = \"beta\"", "name = \"alpha\"");
        assert!(CorpusConfig::from_toml(&text).is_err());
    }

    #[test]
    fn remap_gives_archetype_category() {
        let cfg = CorpusConfig::from_toml(SMALL).unwrap();
        let ds = cfg.dataset("alpha").unwrap();
        let map = ds.label_map(Variant::Ten).unwrap();
        let mut scene = ds.scene_config();
        // archetype-indexed labels give the generator's own truth per point
        let truth = scene.clone().with_archetype_labels();
        scene.sensor.dropout_rate = 0.0;
        let (_, fine) = super::super::generate_scene(&scene, 3).unwrap();
        let mut truth_scene = truth;
        truth_scene.sensor.dropout_rate = 0.0;
        let (_, arch) = super::super::generate_scene(&truth_scene, 3).unwrap();
        let coarse = remap(&fine, &map).unwrap();
        let set = coarse_set(Variant::Ten);
        for (c, a) in coarse.semantic.iter().zip(&arch.semantic) {
            let archetype = Archetype::ALL[usize::from(*a) - 1];
            assert_eq!(set.name_of(*c), Some(archetype.coarse_name(Variant::Ten)));
        }
    }
}
