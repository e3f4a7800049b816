//! Scan and label files in the SemanticKITTI-family on-disk convention.
//!
//! A scan file (`.bin`) is a flat run of little-endian `f32` quadruplets
//! `(x, y, z, intensity)`. A label file (`.label`) holds one little-endian
//! `u32` per point: the low 16 bits are the semantic class, the high 16 bits
//! the instance id. Class 0 is reserved as "ignore".
//!
//! Datasets are indexed either from sequence folders
//! (`sequences/<scene>/velodyne/<scan>.bin` next to
//! `sequences/<scene>/labels/<scan>.label`) or from a tab-separated manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const SCAN_EXTENSION: &str = "bin";
pub const LABEL_EXTENSION: &str = "label";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const VOCABULARY_FILE: &str = "vocabulary.csv";

const POINT_STRIDE: usize = 16;

#[derive(Debug, Error)]
pub enum LidarIoError {
    #[error("scan byte length {len} is not a multiple of 16")]
    MalformedScan { len: usize },
    #[error("non-finite value in point {point}")]
    NonFiniteValue { point: usize },
    #[error("label file has {actual} bytes, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("scan {0} has no label file")]
    MissingLabel(PathBuf),
    #[error("no scans found under {0}")]
    EmptyDataset(PathBuf),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LidarIoError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LidarIoError + '_ {
    move |source| LidarIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One LiDAR return. Stored in the on-disk precision so that
/// write/parse round-trips are bit-exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [f64::from(self.x), f64::from(self.y), f64::from(self.z)]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// A single sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointScan {
    pub scan_id: String,
    pub points: Vec<Point>,
}

impl PointScan {
    pub fn new(scan_id: impl Into<String>, points: Vec<Point>) -> Self {
        PointScan {
            scan_id: scan_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-point semantic and instance ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelArray {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
}

impl LabelArray {
    pub fn new(semantic: Vec<u16>, instance: Vec<u16>) -> Self {
        assert_eq!(semantic.len(), instance.len(), "semantic/instance length differ");
        LabelArray { semantic, instance }
    }

    /// Semantic labels with all instance ids zero.
    pub fn semantic_only(semantic: Vec<u16>) -> Self {
        let instance = vec![0; semantic.len()];
        LabelArray { semantic, instance }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

pub fn parse_point_scan(bytes: &[u8]) -> Result<PointScan> {
    if bytes.len() % POINT_STRIDE != 0 {
        return Err(LidarIoError::MalformedScan { len: bytes.len() });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut points = Vec::with_capacity(bytes.len() / POINT_STRIDE);
    for (i, chunk) in bytes.chunks_exact(POINT_STRIDE).enumerate() {
        let p = Point::new(f(&chunk[0..4]), f(&chunk[4..8]), f(&chunk[8..12]), f(&chunk[12..16]));
        if !p.is_finite() {
            return Err(LidarIoError::NonFiniteValue { point: i });
        }
        points.push(p);
    }
    Ok(PointScan::new(String::new(), points))
}

pub fn write_point_scan(scan: &PointScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * POINT_STRIDE);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_label_file(bytes: &[u8], n_points: usize) -> Result<LabelArray> {
    let expected = 4 * n_points;
    if bytes.len() != expected {
        return Err(LidarIoError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let mut semantic = Vec::with_capacity(n_points);
    let mut instance = Vec::with_capacity(n_points);
    for chunk in bytes.chunks_exact(4) {
        let v = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        semantic.push((v & 0xffff) as u16);
        instance.push((v >> 16) as u16);
    }
    Ok(LabelArray { semantic, instance })
}

pub fn write_label_file(labels: &LabelArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for (&s, &i) in labels.semantic.iter().zip(&labels.instance) {
        let v = u32::from(s) | (u32::from(i) << 16);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Read a `.bin` file; the scan id is the file stem.
pub fn read_scan(path: &Path) -> Result<PointScan> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut scan = parse_point_scan(&bytes)?;
    scan.scan_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(scan)
}

pub fn read_labels(path: &Path, n_points: usize) -> Result<LabelArray> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_label_file(&bytes, n_points)
}

/// Write `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// How scans and labels are arranged under a dataset root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layout {
    /// `sequences/<scene>/velodyne/*.bin` with `sequences/<scene>/labels/*.label`.
    SequenceFolders,
    /// A manifest file (relative to the root) listing
    /// `scene_id<TAB>scan_path<TAB>label_path` per line.
    Manifest(PathBuf),
}

impl Layout {
    pub fn manifest() -> Self {
        Layout::Manifest(PathBuf::from(MANIFEST_FILE))
    }

    /// Manifest if `manifest.tsv` exists under `root`, sequence folders otherwise.
    pub fn detect(root: &Path) -> Self {
        if root.join(MANIFEST_FILE).is_file() {
            Layout::manifest()
        } else {
            Layout::SequenceFolders
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanEntry {
    pub scan_id: String,
    pub scan_path: PathBuf,
    pub label_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub id: String,
    pub scans: Vec<ScanEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub dataset_name: String,
    pub fine_vocabulary: BTreeMap<u16, String>,
    pub scenes: Vec<Scene>,
}

impl DatasetIndex {
    pub fn n_scans(&self) -> usize {
        self.scenes.iter().map(|s| s.scans.len()).sum()
    }

    pub fn scans(&self) -> impl Iterator<Item = (&Scene, &ScanEntry)> {
        self.scenes
            .iter()
            .flat_map(|scene| scene.scans.iter().map(move |scan| (scene, scan)))
    }

    /// A copy restricted to the given scene ids (order preserved).
    pub fn with_scenes(&self, keep: &[&str]) -> DatasetIndex {
        DatasetIndex {
            dataset_name: self.dataset_name.clone(),
            fine_vocabulary: self.fine_vocabulary.clone(),
            scenes: self
                .scenes
                .iter()
                .filter(|s| keep.contains(&s.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    fn sort(&mut self) {
        for scene in &mut self.scenes {
            scene.scans.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
        }
        self.scenes.sort_by(|a, b| a.id.cmp(&b.id));
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn index_dataset(root: &Path, layout: &Layout) -> Result<DatasetIndex> {
    let dataset_name = root
        .canonicalize()
        .ok()
        .as_deref()
        .and_then(Path::file_name)
        .or_else(|| root.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let vocab_path = root.join(VOCABULARY_FILE);
    let fine_vocabulary = if vocab_path.is_file() {
        read_vocabulary(&vocab_path)?
    } else {
        BTreeMap::new()
    };
    let scenes = match layout {
        Layout::SequenceFolders => index_sequences(root)?,
        Layout::Manifest(file) => index_manifest(root, &root.join(file))?,
    };
    if scenes.iter().all(|s| s.scans.is_empty()) {
        return Err(LidarIoError::EmptyDataset(root.to_path_buf()));
    }
    let mut index = DatasetIndex {
        dataset_name,
        fine_vocabulary,
        scenes,
    };
    index.sort();
    Ok(index)
}

fn index_sequences(root: &Path) -> Result<Vec<Scene>> {
    let seq_root = root.join("sequences");
    if !seq_root.is_dir() {
        return Err(LidarIoError::EmptyDataset(root.to_path_buf()));
    }
    let mut scenes = Vec::new();
    for entry in fs::read_dir(&seq_root).map_err(io_err(&seq_root))? {
        let entry = entry.map_err(io_err(&seq_root))?;
        let scene_dir = entry.path();
        let velodyne = scene_dir.join("velodyne");
        if !velodyne.is_dir() {
            continue;
        }
        let mut scans = Vec::new();
        for f in fs::read_dir(&velodyne).map_err(io_err(&velodyne))? {
            let scan_path = f.map_err(io_err(&velodyne))?.path();
            if scan_path.extension().and_then(|e| e.to_str()) != Some(SCAN_EXTENSION) {
                continue;
            }
            let scan_id = stem(&scan_path);
            let label_path = scene_dir
                .join("labels")
                .join(format!("{scan_id}.{LABEL_EXTENSION}"));
            if !label_path.is_file() {
                return Err(LidarIoError::MissingLabel(scan_path));
            }
            scans.push(ScanEntry {
                scan_id,
                scan_path,
                label_path,
            });
        }
        scenes.push(Scene {
            id: entry.file_name().to_string_lossy().into_owned(),
            scans,
        });
    }
    Ok(scenes)
}

fn index_manifest(root: &Path, manifest: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let mut scenes: BTreeMap<String, Vec<ScanEntry>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: &str| LidarIoError::Parse {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            msg: msg.to_string(),
        };
        match fields.as_slice() {
            [scene, scan, label] if !scene.is_empty() && !scan.is_empty() => {
                let scan_path = root.join(scan);
                if label.is_empty() || !root.join(label).is_file() {
                    return Err(LidarIoError::MissingLabel(scan_path));
                }
                scenes.entry(scene.to_string()).or_default().push(ScanEntry {
                    scan_id: stem(&scan_path),
                    scan_path,
                    label_path: root.join(label),
                });
            }
            [_, scan] => return Err(LidarIoError::MissingLabel(root.join(scan))),
            _ => return Err(parse_err("expected scene_id<TAB>scan_path<TAB>label_path")),
        }
    }
    Ok(scenes
        .into_iter()
        .map(|(id, scans)| Scene { id, scans })
        .collect())
}

/// Render a manifest; paths are written relative to `root` when possible.
pub fn render_manifest(index: &DatasetIndex, root: &Path) -> String {
    let rel = |p: &Path| {
        p.strip_prefix(root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    let mut out = String::from("# scene_id\tscan_path\tlabel_path\n");
    for (scene, scan) in index.scans() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            scene.id,
            rel(&scan.scan_path),
            rel(&scan.label_path)
        );
    }
    out
}

pub fn read_vocabulary(path: &Path) -> Result<BTreeMap<u16, String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_vocabulary(&text).map_err(|(line, msg)| LidarIoError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

/// `id,name` rows with an optional header.
pub fn parse_vocabulary(text: &str) -> std::result::Result<BTreeMap<u16, String>, (usize, String)> {
    let mut vocab = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "id,name" {
            continue;
        }
        let (id, name) = line
            .split_once(',')
            .ok_or((lineno + 1, "expected id,name".to_string()))?;
        let id: u16 = id
            .trim()
            .parse()
            .map_err(|_| (lineno + 1, format!("bad class id {id:?}")))?;
        if vocab.insert(id, name.trim().to_string()).is_some() {
            return Err((lineno + 1, format!("duplicate class id {id}")));
        }
    }
    Ok(vocab)
}

pub fn render_vocabulary(vocab: &BTreeMap<u16, String>) -> String {
    let mut out = String::from("id,name\n");
    for (id, name) in vocab {
        let _ = writeln!(out, "{id},{name}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn le(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn parses_two_points() {
        let bytes = le(&[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.5]);
        let scan = parse_point_scan(&bytes).unwrap();
        assert_eq!(
            scan.points,
            vec![Point::new(0.0, 0.0, 0.0, 0.0), Point::new(1.0, 2.0, 3.0, 0.5)]
        );
        assert_eq!(write_point_scan(&scan), bytes);
    }

    #[test]
    fn empty_scan() {
        let scan = parse_point_scan(&[]).unwrap();
        assert!(scan.is_empty());
        assert!(write_point_scan(&scan).is_empty());
    }

    #[test]
    fn malformed_and_non_finite() {
        assert!(matches!(
            parse_point_scan(&[0u8; 17]),
            Err(LidarIoError::MalformedScan { len: 17 })
        ));
        let bytes = le(&[1.0, 2.0, 3.0, 0.5, 0.0, f32::NAN, 0.0, 0.0]);
        assert!(matches!(
            parse_point_scan(&bytes),
            Err(LidarIoError::NonFiniteValue { point: 1 })
        ));
        let bytes = le(&[f32::INFINITY, 0.0, 0.0, 0.0]);
        assert!(parse_point_scan(&bytes).is_err());
    }

    #[test]
    fn label_bit_layout() {
        let labels = parse_label_file(&0x0001_0009u32.to_le_bytes(), 1).unwrap();
        assert_eq!(labels.semantic, vec![9]);
        assert_eq!(labels.instance, vec![1]);
        let zero = parse_label_file(&[0; 4], 1).unwrap();
        assert_eq!(zero.semantic, vec![0]);
        assert_eq!(zero.instance, vec![0]);
        assert!(matches!(
            parse_label_file(&[0; 8], 1),
            Err(LidarIoError::LengthMismatch { expected: 4, actual: 8 })
        ));
        let out = write_label_file(&LabelArray::new(vec![9], vec![1]));
        assert_eq!(out, 0x0001_0009u32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn scan_round_trip(vals in proptest::collection::vec(-1.0e4f32..1.0e4, 0..64)) {
            let n = vals.len() / 4 * 4;
            let bytes = le(&vals[..n]);
            let scan = parse_point_scan(&bytes).unwrap();
            prop_assert_eq!(write_point_scan(&scan), bytes);
        }

        #[test]
        fn label_round_trip(raw in proptest::collection::vec(any::<u32>(), 0..64)) {
            let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
            let labels = parse_label_file(&bytes, raw.len()).unwrap();
            prop_assert_eq!(write_label_file(&labels), bytes);
        }
    }

    fn write_scan_pair(dir: &Path, scan: &str, label: bool) {
        write_file(&dir.join("velodyne").join(format!("{scan}.bin")), &le(&[1.0, 2.0, 3.0, 0.1]))
            .unwrap();
        if label {
            write_file(&dir.join("labels").join(format!("{scan}.label")), &[9, 0, 0, 0]).unwrap();
        }
    }

    #[test]
    fn sequence_layout_index() {
        let tmp = tempfile::tempdir().unwrap();
        for scene in ["01", "00"] {
            for scan in ["000002", "000000", "000001"] {
                write_scan_pair(&tmp.path().join("sequences").join(scene), scan, true);
            }
        }
        let index = index_dataset(tmp.path(), &Layout::SequenceFolders).unwrap();
        assert_eq!(index.scenes.len(), 2);
        assert_eq!(index.n_scans(), 6);
        assert_eq!(index.scenes[0].id, "00");
        assert_eq!(index.scenes[0].scans[0].scan_id, "000000");
        let again = index_dataset(tmp.path(), &Layout::SequenceFolders).unwrap();
        assert_eq!(index, again);
    }

    #[test]
    fn missing_label_and_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let scene = tmp.path().join("sequences").join("00");
        write_scan_pair(&scene, "000000", true);
        write_scan_pair(&scene, "000001", false);
        assert!(matches!(
            index_dataset(tmp.path(), &Layout::SequenceFolders),
            Err(LidarIoError::MissingLabel(_))
        ));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            index_dataset(empty.path(), &Layout::SequenceFolders),
            Err(LidarIoError::EmptyDataset(_))
        ));
    }

    #[test]
    fn manifest_layout_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let mut manifest = String::from("# comment\n");
        for (scene, scan) in [("b", "s1"), ("a", "s2"), ("a", "s0")] {
            write_file(&root.join(format!("scans/{scan}.bin")), &le(&[0.0; 4])).unwrap();
            write_file(&root.join(format!("labels/{scan}.label")), &[0; 4]).unwrap();
            manifest.push_str(&format!("{scene}\tscans/{scan}.bin\tlabels/{scan}.label\n"));
        }
        write_file(&root.join(MANIFEST_FILE), manifest.as_bytes()).unwrap();
        write_file(&root.join(VOCABULARY_FILE), b"id,name\n0,unlabeled\n9,thing\n").unwrap();
        let index = index_dataset(root, &Layout::detect(root)).unwrap();
        assert_eq!(index.scenes.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(index.scenes[0].scans[0].scan_id, "s0");
        assert_eq!(index.fine_vocabulary.len(), 2);

        let rendered = render_manifest(&index, root);
        write_file(&root.join(MANIFEST_FILE), rendered.as_bytes()).unwrap();
        assert_eq!(index_dataset(root, &Layout::manifest()).unwrap(), index);
    }

    #[test]
    fn manifest_missing_label_file() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        write_file(&root.join("scans/x.bin"), &le(&[0.0; 4])).unwrap();
        write_file(&root.join(MANIFEST_FILE), b"s\tscans/x.bin\tlabels/x.label\n").unwrap();
        assert!(matches!(
            index_dataset(root, &Layout::manifest()),
            Err(LidarIoError::MissingLabel(_))
        ));
    }
}
