//! Coarse label sets and fine→coarse label maps.
//!
//! The eight-label set is the reference taxonomy. The five-label variant
//! merges the two ground classes and folds structure, static and dynamic
//! objects together; the ten-label variant splits static objects into poles
//! and the rest, and vehicles into two- and four-wheeled.
//!
//! Label maps are plain data (CSV) so that new datasets need no rebuild.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lidar_io::LabelArray;

pub const IGNORE_ID: u16 = 0;
pub const IGNORE_NAME: &str = "ignore";
pub const MAP_HEADER: &str = "dataset,fine_id,fine_name,coarse_id,coarse_name";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: fine id {fine_id} mapped twice")]
    DuplicateFineId { line: usize, fine_id: u16 },
    #[error("line {line}: unknown coarse label {name:?} for the {variant} set")]
    UnknownCoarseName {
        line: usize,
        name: String,
        variant: Variant,
    },
    #[error("label id {0} has no entry in the label map")]
    UnmappedLabel(u16),
    #[error("unknown coarse variant {0:?} (expected five, eight or ten)")]
    UnknownVariant(String),
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Five,
    Eight,
    Ten,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Five, Variant::Eight, Variant::Ten];

    pub fn n_labels(self) -> usize {
        self.names().len()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Five => "five",
            Variant::Eight => "eight",
            Variant::Ten => "ten",
        }
    }

    /// Stable one-byte tag used by checkpoints.
    pub fn tag(self) -> u8 {
        self.n_labels() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.tag() == tag)
    }

    fn names(self) -> &'static [&'static str] {
        match self {
            Variant::Five => &FIVE,
            Variant::Eight => &EIGHT,
            Variant::Ten => &TEN,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "five" | "5" => Ok(Variant::Five),
            "eight" | "8" => Ok(Variant::Eight),
            "ten" | "10" => Ok(Variant::Ten),
            _ => Err(TaxonomyError::UnknownVariant(s.to_string())),
        }
    }
}

const EIGHT: [&str; 8] = [
    "driveable_ground",
    "other_ground",
    "structure",
    "vehicles",
    "nature",
    "living_being",
    "dynamic_objects",
    "static_objects",
];

const FIVE: [&str; 5] = [
    "ground",
    "structure_and_objects",
    "vehicles",
    "nature",
    "living_being",
];

const TEN: [&str; 10] = [
    "driveable_ground",
    "other_ground",
    "structure",
    "two_wheeled_vehicles",
    "four_wheeled_vehicles",
    "nature",
    "living_being",
    "dynamic_objects",
    "poles",
    "other_static_objects",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseLabel {
    pub id: u16,
    pub name: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseLabelSet {
    pub variant: Variant,
    pub labels: Vec<CoarseLabel>,
}

impl CoarseLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        if name == IGNORE_NAME {
            return Some(IGNORE_ID);
        }
        self.labels.iter().find(|l| l.name == name).map(|l| l.id)
    }

    pub fn name_of(&self, id: u16) -> Option<&'static str> {
        if id == IGNORE_ID {
            return Some(IGNORE_NAME);
        }
        self.labels.iter().find(|l| l.id == id).map(|l| l.name)
    }

    pub fn contains(&self, id: u16) -> bool {
        id >= 1 && usize::from(id) <= self.labels.len()
    }

    /// Human-readable name, e.g. "driveable ground".
    pub fn display_name(&self, id: u16) -> String {
        self.name_of(id).unwrap_or("?").replace('_', " ")
    }
}

pub fn coarse_set(variant: Variant) -> CoarseLabelSet {
    let labels = variant
        .names()
        .iter()
        .enumerate()
        .map(|(i, &name)| CoarseLabel {
            id: i as u16 + 1,
            name,
        })
        .collect();
    CoarseLabelSet { variant, labels }
}

/// Project a coarse id onto a coarser variant (Ten → Eight → Five).
/// Returns `None` when `to` is finer than `from` or the id is out of range.
pub fn project(from: Variant, id: u16, to: Variant) -> Option<u16> {
    if id == IGNORE_ID {
        return Some(IGNORE_ID);
    }
    if !coarse_set(from).contains(id) {
        return None;
    }
    let name = coarse_set(from).name_of(id)?;
    let eight = match from {
        Variant::Five => return (to == Variant::Five).then_some(id),
        Variant::Eight => name,
        Variant::Ten => match name {
            "two_wheeled_vehicles" | "four_wheeled_vehicles" => "vehicles",
            "poles" | "other_static_objects" => "static_objects",
            other => other,
        },
    };
    match to {
        Variant::Ten => (from == Variant::Ten).then_some(id),
        Variant::Eight => coarse_set(Variant::Eight).id_of(eight),
        Variant::Five => {
            let five = match eight {
                "driveable_ground" | "other_ground" => "ground",
                "structure" | "dynamic_objects" | "static_objects" => "structure_and_objects",
                other => other,
            };
            coarse_set(Variant::Five).id_of(five)
        }
    }
}

/// A dataset's fine → coarse mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub dataset_name: String,
    pub variant: Variant,
    pub entries: BTreeMap<u16, u16>,
    pub fine_names: BTreeMap<u16, String>,
}

impl LabelMap {
    pub fn new(dataset_name: impl Into<String>, variant: Variant) -> Self {
        LabelMap {
            dataset_name: dataset_name.into(),
            variant,
            entries: BTreeMap::new(),
            fine_names: BTreeMap::new(),
        }
    }

    /// The map that sends every coarse id of `variant` to itself.
    pub fn identity(variant: Variant) -> Self {
        let set = coarse_set(variant);
        let mut map = LabelMap::new(variant.as_str(), variant);
        for label in &set.labels {
            map.entries.insert(label.id, label.id);
            map.fine_names.insert(label.id, label.name.to_string());
        }
        map
    }

    pub fn get(&self, fine_id: u16) -> Option<u16> {
        if fine_id == IGNORE_ID {
            return Some(self.entries.get(&IGNORE_ID).copied().unwrap_or(IGNORE_ID));
        }
        self.entries.get(&fine_id).copied()
    }

    pub fn render(&self) -> String {
        let set = coarse_set(self.variant);
        let mut out = format!("{MAP_HEADER}\n");
        for (&fine, &coarse) in &self.entries {
            let fine_name = self.fine_names.get(&fine).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.dataset_name,
                fine,
                fine_name,
                coarse,
                set.name_of(coarse).unwrap_or("?")
            );
        }
        out
    }
}

pub fn load_label_map(text: &str, coarse: &CoarseLabelSet) -> Result<LabelMap> {
    let mut dataset: Option<String> = None;
    let mut map = LabelMap::new("", coarse.variant);
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') || line == MAP_HEADER {
            continue;
        }
        let parse_err = |msg: String| TaxonomyError::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [ds, fine_id, fine_name, coarse_id, coarse_name] = fields.as_slice() else {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        };
        let fine_id: u16 = fine_id
            .parse()
            .map_err(|_| parse_err(format!("bad fine id {fine_id:?}")))?;
        let coarse_id: u16 = coarse_id
            .parse()
            .map_err(|_| parse_err(format!("bad coarse id {coarse_id:?}")))?;
        if coarse.id_of(coarse_name).is_none() {
            return Err(TaxonomyError::UnknownCoarseName {
                line: line_no,
                name: coarse_name.to_string(),
                variant: coarse.variant,
            });
        }
        if fine_id == IGNORE_ID && coarse_id != IGNORE_ID {
            return Err(parse_err("fine id 0 must map to ignore".into()));
        }
        match &dataset {
            None => dataset = Some(ds.to_string()),
            Some(d) if d != ds => {
                return Err(parse_err(format!("mixed datasets {d:?} and {ds:?}")));
            }
            Some(_) => {}
        }
        if map.entries.insert(fine_id, coarse_id).is_some() {
            return Err(TaxonomyError::DuplicateFineId {
                line: line_no,
                fine_id,
            });
        }
        map.fine_names.insert(fine_id, fine_name.to_string());
    }
    map.dataset_name = dataset.unwrap_or_default();
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub unmapped_fine_ids: BTreeSet<u16>,
    pub out_of_range_coarse_ids: BTreeSet<u16>,
    pub ok: bool,
}

pub fn validate_label_map(map: &LabelMap, fine_vocabulary: &BTreeSet<u16>) -> ValidationReport {
    let set = coarse_set(map.variant);
    let unmapped_fine_ids: BTreeSet<u16> = fine_vocabulary
        .iter()
        .copied()
        .filter(|&id| map.get(id).is_none())
        .collect();
    let out_of_range_coarse_ids: BTreeSet<u16> = map
        .entries
        .values()
        .copied()
        .filter(|&c| c != IGNORE_ID && !set.contains(c))
        .collect();
    let ok = unmapped_fine_ids.is_empty() && out_of_range_coarse_ids.is_empty();
    ValidationReport {
        unmapped_fine_ids,
        out_of_range_coarse_ids,
        ok,
    }
}

/// Coarse labels that receive no fine label. Informational: a dataset may
/// genuinely lack a category.
pub fn coverage_gaps(map: &LabelMap) -> Vec<u16> {
    let hit: BTreeSet<u16> = map.entries.values().copied().collect();
    coarse_set(map.variant)
        .labels
        .iter()
        .map(|l| l.id)
        .filter(|id| !hit.contains(id))
        .collect()
}

pub fn remap(labels: &LabelArray, map: &LabelMap) -> Result<LabelArray> {
    let semantic = labels
        .semantic
        .iter()
        .map(|&id| map.get(id).ok_or(TaxonomyError::UnmappedLabel(id)))
        .collect::<Result<Vec<u16>>>()?;
    Ok(LabelArray {
        semantic,
        instance: labels.instance.clone(),
    })
}

/// Label maps and vocabularies shipped with the crate.
///
/// SemanticKITTI follows its standard class list; nuScenes and SemanticPOSS
/// are best-effort reconstructions.
pub mod bundled {
    use super::*;

    pub const DATASETS: [&str; 3] = ["semantickitti", "nuscenes", "semanticposs"];

    pub fn vocabulary_text(dataset: &str) -> Option<&'static str> {
        Some(match dataset {
            "semantickitti" => include_str!("../data/vocab/semantickitti.csv"),
            "nuscenes" => include_str!("../data/vocab/nuscenes.csv"),
            "semanticposs" => include_str!("../data/vocab/semanticposs.csv"),
            _ => return None,
        })
    }

    pub fn map_text(dataset: &str, variant: Variant) -> Option<&'static str> {
        use Variant::*;
        Some(match (dataset, variant) {
            ("semantickitti", Five) => include_str!("../data/maps/semantickitti_five.csv"),
            ("semantickitti", Eight) => include_str!("../data/maps/semantickitti_eight.csv"),
            ("semantickitti", Ten) => include_str!("../data/maps/semantickitti_ten.csv"),
            ("nuscenes", Five) => include_str!("../data/maps/nuscenes_five.csv"),
            ("nuscenes", Eight) => include_str!("../data/maps/nuscenes_eight.csv"),
            ("nuscenes", Ten) => include_str!("../data/maps/nuscenes_ten.csv"),
            ("semanticposs", Five) => include_str!("../data/maps/semanticposs_five.csv"),
            ("semanticposs", Eight) => include_str!("../data/maps/semanticposs_eight.csv"),
            ("semanticposs", Ten) => include_str!("../data/maps/semanticposs_ten.csv"),
            _ => return None,
        })
    }

    pub fn vocabulary(dataset: &str) -> Option<BTreeMap<u16, String>> {
        let text = vocabulary_text(dataset)?;
        Some(crate::lidar_io::parse_vocabulary(text).expect("bundled vocabulary parses"))
    }

    pub fn label_map(dataset: &str, variant: Variant) -> Option<LabelMap> {
        let text = map_text(dataset, variant)?;
        Some(load_label_map(text, &coarse_set(variant)).expect("bundled label map parses"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eight() -> CoarseLabelSet {
        coarse_set(Variant::Eight)
    }

    #[test]
    fn set_sizes_and_members() {
        assert_eq!(coarse_set(Variant::Five).len(), 5);
        assert_eq!(eight().len(), 8);
        assert_eq!(coarse_set(Variant::Ten).len(), 10);
        let names: Vec<_> = eight().labels.iter().map(|l| l.name).collect();
        assert_eq!(names, EIGHT);
        assert_eq!(eight().display_name(1), "driveable ground");
        assert!(coarse_set(Variant::Ten).id_of("poles").is_some());
        assert_eq!(coarse_set(Variant::Ten).id_of("static_objects"), None);
    }

    #[test]
    fn five_merges_grounds() {
        let a = project(Variant::Eight, eight().id_of("driveable_ground").unwrap(), Variant::Five);
        let b = project(Variant::Eight, eight().id_of("other_ground").unwrap(), Variant::Five);
        assert_eq!(a, b);
        assert_eq!(a, coarse_set(Variant::Five).id_of("ground"));
        let s = project(Variant::Eight, 3, Variant::Five);
        assert_eq!(s, project(Variant::Eight, 7, Variant::Five));
        assert_eq!(s, project(Variant::Eight, 8, Variant::Five));
        assert_eq!(project(Variant::Five, 1, Variant::Eight), None);
        assert_eq!(project(Variant::Eight, 9, Variant::Five), None);
    }

    #[test]
    fn ten_refines_eight() {
        let ten = coarse_set(Variant::Ten);
        let poles = ten.id_of("poles").unwrap();
        let other = ten.id_of("other_static_objects").unwrap();
        assert_eq!(project(Variant::Ten, poles, Variant::Eight), eight().id_of("static_objects"));
        assert_eq!(project(Variant::Ten, other, Variant::Eight), eight().id_of("static_objects"));
        let two = ten.id_of("two_wheeled_vehicles").unwrap();
        assert_eq!(project(Variant::Ten, two, Variant::Eight), eight().id_of("vehicles"));
        for id in 1..=10 {
            let via = project(Variant::Ten, id, Variant::Eight)
                .and_then(|e| project(Variant::Eight, e, Variant::Five));
            assert_eq!(via, project(Variant::Ten, id, Variant::Five));
        }
    }

    #[test]
    fn load_single_line() {
        let map = load_label_map("semkitti,40,road,1,driveable_ground\n", &eight()).unwrap();
        assert_eq!(map.dataset_name, "semkitti");
        assert_eq!(map.get(40), Some(1));
        assert_eq!(map.get(0), Some(0));
    }

    #[test]
    fn load_errors() {
        let dup = "d,40,road,1,driveable_ground\nd,40,road,1,driveable_ground\n";
        assert!(matches!(
            load_label_map(dup, &eight()),
            Err(TaxonomyError::DuplicateFineId { fine_id: 40, .. })
        ));
        assert!(matches!(
            load_label_map("d,40,road,1,spaceship\n", &eight()),
            Err(TaxonomyError::UnknownCoarseName { .. })
        ));
        assert!(matches!(
            load_label_map("d,40,road\n", &eight()),
            Err(TaxonomyError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            load_label_map("d,x,road,1,vehicles\n", &eight()),
            Err(TaxonomyError::Parse { .. })
        ));
    }

    #[test]
    fn validation() {
        let text = format!("{MAP_HEADER}\nd,0,unlabeled,0,ignore\nd,40,road,1,driveable_ground\nd,44,parking,1,driveable_ground\n");
        let map = load_label_map(&text, &eight()).unwrap();
        let report = validate_label_map(&map, &BTreeSet::from([0, 40, 44]));
        assert!(report.ok);

        let report = validate_label_map(&map, &BTreeSet::from([0, 40, 99]));
        assert!(!report.ok);
        assert_eq!(report.unmapped_fine_ids, BTreeSet::from([99]));

        let mut bad = map.clone();
        bad.entries.insert(50, 12);
        let report = validate_label_map(&bad, &BTreeSet::from([0, 40]));
        assert_eq!(report.out_of_range_coarse_ids, BTreeSet::from([12]));
        assert!(!report.ok);
    }

    #[test]
    fn remap_labels() {
        let map = bundled::label_map("semantickitti", Variant::Eight).unwrap();
        let labels = LabelArray::new(vec![40, 0, 10], vec![0, 0, 7]);
        let out = remap(&labels, &map).unwrap();
        assert_eq!(eight().name_of(out.semantic[0]), Some("driveable_ground"));
        assert_eq!(out.semantic[1], 0);
        assert_eq!(eight().name_of(out.semantic[2]), Some("vehicles"));
        assert_eq!(out.instance, labels.instance);
        assert_eq!(
            remap(&LabelArray::semantic_only(vec![999]), &map),
            Err(TaxonomyError::UnmappedLabel(999))
        );
    }

    #[test]
    fn identity_remap_is_identity() {
        let labels = LabelArray::new(vec![0, 1, 5, 8, 3], vec![1, 2, 3, 4, 5]);
        assert_eq!(remap(&labels, &LabelMap::identity(Variant::Eight)).unwrap(), labels);
    }

    #[test]
    fn render_round_trip() {
        let map = bundled::label_map("nuscenes", Variant::Ten).unwrap();
        let again = load_label_map(&map.render(), &coarse_set(Variant::Ten)).unwrap();
        assert_eq!(again, map);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("Eight".parse::<Variant>().unwrap(), Variant::Eight);
        assert_eq!("10".parse::<Variant>().unwrap(), Variant::Ten);
        assert!("seven".parse::<Variant>().is_err());
        for v in Variant::ALL {
            assert_eq!(Variant::from_tag(v.tag()), Some(v));
        }
    }
}
