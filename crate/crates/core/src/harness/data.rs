//! Loaded datasets, class spaces and per-scan featurization.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::Array2;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::featurize::{
    augment_points, compute_features_points, to_f64, voxel_majority, voxelize_points, AugmentConfig,
    VoxelGrid,
};
use crate::lidar_io::{index_dataset, read_labels, read_scan, DatasetIndex, Layout, Point};
use crate::synthgen::corpus::map_path;
use crate::taxonomy::{self, coarse_set, validate_label_map, LabelMap, Variant, IGNORE_ID};
use crate::IGNORE_CLASS;

/// Voxel features of one scan with the majority label of each voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub features: Array2<f32>,
    pub labels: Vec<u16>,
}

fn featurize(points: &[[f64; 4]], labels: &[u16], voxel_size: f64) -> Result<(Featurized, VoxelGrid), HarnessError> {
    let grid = voxelize_points(points, voxel_size)?;
    let features = compute_features_points(points, &grid).data.mapv(|v| v as f32);
    let labels = voxel_majority(&grid, labels);
    Ok((Featurized { features, labels }, grid))
}

/// One scan held in memory.
#[derive(Debug)]
pub struct ScanData {
    pub scene_id: String,
    pub scan_id: String,
    pub points: Vec<Point>,
    /// Semantic label of each point.
    pub labels: Vec<u16>,
    cache: OnceLock<Featurized>,
}

impl ScanData {
    pub fn new(scene_id: String, scan_id: String, points: Vec<Point>, labels: Vec<u16>) -> Self {
        ScanData {
            scene_id,
            scan_id,
            points,
            labels,
            cache: OnceLock::new(),
        }
    }

    /// Features of the unaugmented scan, computed once.
    pub fn featurized(&self, voxel_size: f64) -> Result<&Featurized, HarnessError> {
        if let Some(f) = self.cache.get() {
            return Ok(f);
        }
        let (f, _) = featurize(&to_f64(&self.points), &self.labels, voxel_size)?;
        Ok(self.cache.get_or_init(|| f))
    }

    /// Features after augmenting the points with `seed`; the cache is used
    /// when `augment` is `None`.
    pub fn features_for(
        &self,
        voxel_size: f64,
        augment: Option<&AugmentConfig>,
        seed: u64,
    ) -> Result<Cow<'_, Featurized>, HarnessError> {
        match augment {
            None => Ok(Cow::Borrowed(self.featurized(voxel_size)?)),
            Some(cfg) => {
                let pts = augment_points(&to_f64(&self.points), cfg, seed)?;
                Ok(Cow::Owned(featurize(&pts, &self.labels, voxel_size)?.0))
            }
        }
    }

    /// Uncached features plus the voxel grid, for point-level evaluation.
    pub fn featurize_with_grid(&self, voxel_size: f64) -> Result<(Featurized, VoxelGrid), HarnessError> {
        featurize(&to_f64(&self.points), &self.labels, voxel_size)
    }
}

/// A dataset read fully into memory, in index order.
#[derive(Debug)]
pub struct DatasetData {
    pub name: String,
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub voxel_size: f64,
    pub scans: Vec<ScanData>,
    lookup: BTreeMap<(String, String), usize>,
    digest: [u8; 32],
}

impl DatasetData {
    pub fn load(root: &Path, voxel_size: f64) -> Result<Self, HarnessError> {
        let index = index_dataset(root, &Layout::detect(root))?;
        let entries: Vec<_> = index.scans().collect();
        let scans = entries
            .par_iter()
            .map(|(scene, entry)| {
                let scan = read_scan(&entry.scan_path)?;
                let labels = read_labels(&entry.label_path, scan.points.len())?;
                Ok(ScanData::new(scene.id.clone(), entry.scan_id.clone(), scan.points, labels.semantic))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(Self::from_parts(root.to_path_buf(), index, voxel_size, scans))
    }

    pub fn from_parts(root: PathBuf, index: DatasetIndex, voxel_size: f64, scans: Vec<ScanData>) -> Self {
        let lookup = scans
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.scene_id.clone(), s.scan_id.clone()), i))
            .collect();
        let mut hasher = Sha256::new();
        hasher.update(index.dataset_name.as_bytes());
        for s in &scans {
            hasher.update(s.scene_id.as_bytes());
            hasher.update([0]);
            hasher.update(s.scan_id.as_bytes());
            hasher.update([0]);
            for p in &s.points {
                for v in [p.x, p.y, p.z, p.intensity] {
                    hasher.update(v.to_le_bytes());
                }
            }
            for l in &s.labels {
                hasher.update(l.to_le_bytes());
            }
        }
        DatasetData {
            name: index.dataset_name.clone(),
            root,
            index,
            voxel_size,
            scans,
            lookup,
            digest: hasher.finalize().into(),
        }
    }

    /// Content digest over names, points and labels.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Loaded scans listed by `index`, in its order.
    pub fn select(&self, index: &DatasetIndex) -> Result<Vec<&ScanData>, HarnessError> {
        index
            .scans()
            .map(|(scene, entry)| {
                self.lookup
                    .get(&(scene.id.clone(), entry.scan_id.clone()))
                    .map(|&i| &self.scans[i])
                    .ok_or_else(|| {
                        HarnessError::InvalidSpec(format!(
                            "{}: scan {}/{} is not loaded",
                            self.name, scene.id, entry.scan_id
                        ))
                    })
            })
            .collect()
    }

    /// Non-zero label ids from the vocabulary and the data.
    pub fn label_ids(&self) -> BTreeSet<u16> {
        let mut ids: BTreeSet<u16> = self.index.fine_vocabulary.keys().copied().collect();
        for s in &self.scans {
            ids.extend(s.labels.iter().copied());
        }
        ids.remove(&IGNORE_ID);
        ids
    }

    /// The dataset's own `maps/<variant>.csv`, else the bundled map of the
    /// same name, validated against every label id in use.
    pub fn label_map(&self, variant: Variant) -> Result<LabelMap, HarnessError> {
        let path = map_path(&self.root, variant);
        let map = if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(crate::lidar_io::io_err(&path))?;
            taxonomy::load_label_map(&text, &coarse_set(variant))?
        } else {
            taxonomy::bundled::label_map(&self.name, variant).ok_or_else(|| HarnessError::ValidationFailure {
                dataset: self.name.clone(),
                detail: format!("no {variant} label map at {}", path.display()),
            })?
        };
        let report = validate_label_map(&map, &self.label_ids());
        if !report.ok {
            let ids: Vec<String> = report
                .unmapped_fine_ids
                .iter()
                .chain(&report.out_of_range_coarse_ids)
                .map(u16::to_string)
                .collect();
            return Err(HarnessError::ValidationFailure {
                dataset: self.name.clone(),
                detail: format!("unmapped or invalid label ids: {}", ids.join(", ")),
            });
        }
        Ok(map)
    }
}

/// Label id predicted by each network output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpace {
    pub ids: Vec<u16>,
    pub names: Vec<String>,
}

impl ClassSpace {
    pub fn coarse(variant: Variant) -> Self {
        let set = coarse_set(variant);
        ClassSpace {
            ids: set.labels.iter().map(|l| l.id).collect(),
            names: set.labels.iter().map(|l| l.name.to_string()).collect(),
        }
    }

    /// Every non-zero id of `ids`, named from the vocabulary where possible.
    pub fn fine(vocabulary: &BTreeMap<u16, String>, ids: &BTreeSet<u16>) -> Self {
        let ids: Vec<u16> = ids.iter().copied().filter(|&i| i != IGNORE_ID).collect();
        let names = ids
            .iter()
            .map(|i| vocabulary.get(i).cloned().unwrap_or_else(|| format!("label_{i}")))
            .collect();
        ClassSpace { ids, names }
    }

    pub fn of_dataset(data: &DatasetData) -> Self {
        ClassSpace::fine(&data.index.fine_vocabulary, &data.label_ids())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u16) -> Option<u32> {
        self.ids.binary_search(&id).ok().map(|i| i as u32)
    }
}

/// Dense lookup from a dataset's label id to a class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    table: Vec<u32>,
}

impl Encoder {
    pub fn new(pairs: impl IntoIterator<Item = (u16, u32)>) -> Self {
        let pairs: Vec<(u16, u32)> = pairs.into_iter().collect();
        let len = pairs.iter().map(|p| p.0 as usize + 1).max().unwrap_or(0);
        let mut table = vec![IGNORE_CLASS; len];
        for (id, class) in pairs {
            table[id as usize] = class;
        }
        Encoder { table }
    }

    /// Each id of the space to its own index.
    pub fn identity(space: &ClassSpace) -> Self {
        Encoder::new(space.ids.iter().enumerate().map(|(i, &id)| (id, i as u32)))
    }

    /// Fine ids through `map` into the coarse space.
    pub fn coarse(map: &LabelMap, space: &ClassSpace) -> Self {
        Encoder::new(map.entries.iter().filter_map(|(&fine, &coarse)| {
            space.index_of(coarse).map(|c| (fine, c))
        }))
    }

    /// Fine ids shifted by `offset` into a concatenated space.
    pub fn offset(ids: &BTreeSet<u16>, offset: u32, space: &ClassSpace) -> Self {
        Encoder::new(ids.iter().filter(|&&id| id != IGNORE_ID).filter_map(|&id| {
            u16::try_from(id as u32 + offset)
                .ok()
                .and_then(|shifted| space.index_of(shifted))
                .map(|c| (id, c))
        }))
    }

    pub fn encode(&self, id: u16) -> u32 {
        self.table.get(id as usize).copied().unwrap_or(IGNORE_CLASS)
    }
}
