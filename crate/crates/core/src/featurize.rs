//! Sparse voxelization and hand-crafted per-voxel features.
//!
//! Feature columns, in order:
//!
//! | # | name | definition |
//! |---|------|------------|
//! | 0 | `log_count` | ln(1 + points in voxel) |
//! | 1 | `centroid_z` | mean z |
//! | 2 | `z_extent` | max z − min z |
//! | 3 | `intensity_mean` | |
//! | 4 | `intensity_std` | population std |
//! | 5 | `linearity` | (λ1 − λ2) / λ1 |
//! | 6 | `planarity` | (λ2 − λ3) / λ1 |
//! | 7 | `sphericity` | λ3 / λ1 |
//! | 8–13 | `adj_{-x,+x,-y,+y,-z,+z}` | 1 if the face neighbour is occupied |
//!
//! λ1 ≥ λ2 ≥ λ3 are the eigenvalues of the population covariance of the
//! voxel's points. Voxels with fewer than 3 points or λ1 = 0 get zero
//! eigen-features.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lidar_io::{LabelArray, Point, PointScan};
use crate::seed;
use crate::taxonomy::IGNORE_ID;

pub const N_FEATURES: usize = 14;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "log_count",
    "centroid_z",
    "z_extent",
    "intensity_mean",
    "intensity_std",
    "linearity",
    "planarity",
    "sphericity",
    "adj_nx",
    "adj_px",
    "adj_ny",
    "adj_py",
    "adj_nz",
    "adj_pz",
];

pub const DEFAULT_VOXEL_SIZE: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum FeaturizeError {
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(String),
}

pub type Result<T> = std::result::Result<T, FeaturizeError>;

/// `(x, y, z, intensity)` in double precision.
pub type Point64 = [f64; 4];

pub fn to_f64(points: &[Point]) -> Vec<Point64> {
    points
        .iter()
        .map(|p| {
            [
                f64::from(p.x),
                f64::from(p.y),
                f64::from(p.z),
                f64::from(p.intensity),
            ]
        })
        .collect()
}

pub type VoxelKey = [i32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// Occupied cells in key order with their member point indices.
    pub cells: BTreeMap<VoxelKey, Vec<u32>>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Row (cell position in key order) of every point.
    pub fn point_rows(&self, n_points: usize) -> Vec<usize> {
        let mut rows = vec![usize::MAX; n_points];
        for (row, members) in self.cells.values().enumerate() {
            for &m in members {
                rows[m as usize] = row;
            }
        }
        rows
    }
}

pub fn voxel_key(xyz: [f64; 3], voxel_size: f64) -> VoxelKey {
    [
        (xyz[0] / voxel_size).floor() as i32,
        (xyz[1] / voxel_size).floor() as i32,
        (xyz[2] / voxel_size).floor() as i32,
    ]
}

pub fn voxelize(scan: &PointScan, voxel_size: f64) -> Result<VoxelGrid> {
    voxelize_points(&to_f64(&scan.points), voxel_size)
}

pub fn voxelize_points(points: &[Point64], voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(FeaturizeError::InvalidVoxelSize(voxel_size));
    }
    let mut cells: BTreeMap<VoxelKey, Vec<u32>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        cells
            .entry(voxel_key([p[0], p[1], p[2]], voxel_size))
            .or_default()
            .push(i as u32);
    }
    Ok(VoxelGrid { voxel_size, cells })
}

/// Per-voxel features keyed by voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub keys: Vec<VoxelKey>,
    pub data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    /// Comma-separated text with a header row.
    pub fn to_csv(&self, labels: Option<&[u16]>) -> String {
        let mut out = String::from("i,j,k");
        for name in FEATURE_NAMES {
            out.push(',');
            out.push_str(name);
        }
        if labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for (r, key) in self.keys.iter().enumerate() {
            let _ = write!(out, "{},{},{}", key[0], key[1], key[2]);
            for v in self.data.row(r) {
                let _ = write!(out, ",{v}");
            }
            if let Some(l) = labels {
                let _ = write!(out, ",{}", l[r]);
            }
            out.push('\n');
        }
        out
    }
}

/// Eigenvalues of a symmetric 3×3 matrix, descending, clamped at 0.
pub fn sorted_eigenvalues(cov: [[f64; 3]; 3]) -> [f64; 3] {
    let m = Matrix3::from_fn(|i, j| cov[i][j]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let mut ev = [eig[0].max(0.0), eig[1].max(0.0), eig[2].max(0.0)];
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// (linearity, planarity, sphericity); zeros for degenerate voxels.
pub fn eigen_features(points: &[Point64]) -> [f64; 3] {
    let n = points.len();
    if n < 3 {
        return [0.0; 3];
    }
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let [l1, l2, l3] = sorted_eigenvalues(cov);
    if l1 <= 0.0 {
        return [0.0; 3];
    }
    [(l1 - l2) / l1, (l2 - l3) / l1, l3 / l1]
}

const FACE_OFFSETS: [[i32; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

pub fn compute_features(scan: &PointScan, grid: &VoxelGrid) -> FeatureMatrix {
    compute_features_points(&to_f64(&scan.points), grid)
}

pub fn compute_features_points(points: &[Point64], grid: &VoxelGrid) -> FeatureMatrix {
    let mut data = Array2::<f64>::zeros((grid.len(), N_FEATURES));
    let mut keys = Vec::with_capacity(grid.len());
    let mut members: Vec<Point64> = Vec::new();
    for (row, (key, idx)) in grid.cells.iter().enumerate() {
        keys.push(*key);
        members.clear();
        members.extend(idx.iter().map(|&i| points[i as usize]));
        // canonical order makes the sums independent of input order
        members.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = members.len() as f64;
        let (mut zsum, mut zmin, mut zmax, mut isum) = (0.0, f64::MAX, f64::MIN, 0.0);
        for p in &members {
            zsum += p[2];
            zmin = zmin.min(p[2]);
            zmax = zmax.max(p[2]);
            isum += p[3];
        }
        let imean = isum / n;
        let ivar = members.iter().map(|p| (p[3] - imean).powi(2)).sum::<f64>() / n;
        let [lin, pla, sph] = eigen_features(&members);
        let mut r = data.row_mut(row);
        r[0] = n.ln_1p();
        r[1] = zsum / n;
        r[2] = zmax - zmin;
        r[3] = imean;
        r[4] = ivar.sqrt();
        r[5] = lin;
        r[6] = pla;
        r[7] = sph;
        for (c, off) in FACE_OFFSETS.iter().enumerate() {
            let nb = [key[0] + off[0], key[1] + off[1], key[2] + off[2]];
            r[8 + c] = if grid.cells.contains_key(&nb) { 1.0 } else { 0.0 };
        }
    }
    FeatureMatrix { keys, data }
}

/// Majority label per voxel, ignoring label 0; ties go to the smaller id.
pub fn voxel_labels(grid: &VoxelGrid, labels: &LabelArray) -> Vec<u16> {
    voxel_majority(grid, &labels.semantic)
}

pub fn voxel_majority(grid: &VoxelGrid, semantic: &[u16]) -> Vec<u16> {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    grid.cells
        .values()
        .map(|members| {
            counts.clear();
            for &m in members {
                let l = semantic[m as usize];
                if l != IGNORE_ID {
                    *counts.entry(l).or_default() += 1;
                }
            }
            // BTreeMap iterates ascending, so max_by keeps the first (smallest) on ties
            counts
                .iter()
                .fold(None, |best: Option<(u16, usize)>, (&l, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((l, c)),
                })
                .map_or(IGNORE_ID, |(l, _)| l)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation about z drawn from ±yaw_range degrees.
    pub yaw_range: f64,
    pub scale_range: [f64; 2],
    /// Per-coordinate Gaussian jitter, meters.
    pub jitter_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            yaw_range: 180.0,
            scale_range: [0.95, 1.05],
            jitter_sigma: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            yaw_range: 0.0,
            scale_range: [1.0, 1.0],
            jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi < 2.0 && lo <= hi) {
            return Err(FeaturizeError::InvalidAugment(format!(
                "scale_range {:?} must satisfy 0 < min <= max < 2",
                self.scale_range
            )));
        }
        if !(self.jitter_sigma >= 0.0) || !(self.yaw_range >= 0.0) {
            return Err(FeaturizeError::InvalidAugment(
                "yaw_range and jitter_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Yaw rotation, then uniform scale about the origin, then jitter.
pub fn augment_points(points: &[Point64], cfg: &AugmentConfig, seed: u64) -> Result<Vec<Point64>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &["augment".into()]);
    let yaw = if cfg.yaw_range > 0.0 {
        rng.random_range(-cfg.yaw_range..=cfg.yaw_range).to_radians()
    } else {
        0.0
    };
    let [lo, hi] = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (s, c) = yaw.sin_cos();
    let mut out: Vec<Point64> = points
        .iter()
        .map(|p| {
            [
                scale * (c * p[0] - s * p[1]),
                scale * (s * p[0] + c * p[1]),
                scale * p[2],
                p[3],
            ]
        })
        .collect();
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("finite sigma");
        for p in &mut out {
            for v in &mut p[..3] {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

pub fn augment(scan: &PointScan, cfg: &AugmentConfig, seed: u64) -> Result<PointScan> {
    let out = augment_points(&to_f64(&scan.points), cfg, seed)?;
    Ok(PointScan::new(
        scan.scan_id.clone(),
        out.iter()
            .map(|p| Point::new(p[0] as f32, p[1] as f32, p[2] as f32, p[3] as f32))
            .collect(),
    ))
}

/// Column-wise standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(d: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Statistics over the rows of all matrices. Constant columns get std 1.
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let mut acc = StatsAccumulator::new();
        for m in matrices {
            acc.add(m.view());
        }
        acc.finish()
    }

    pub fn apply(&self, data: &Array2<f64>) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        (data - &mean) / &std
    }
}

/// Streaming column mean and variance; each added block is centered on its
/// own mean and blocks are merged pairwise.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    n: usize,
    mean: Array1<f64>,
    m2: Array1<f64>,
}

impl Default for StatsAccumulator {
    fn default() -> Self {
        StatsAccumulator::new()
    }
}

impl StatsAccumulator {
    pub fn new() -> Self {
        StatsAccumulator {
            n: 0,
            mean: Array1::zeros(N_FEATURES),
            m2: Array1::zeros(N_FEATURES),
        }
    }

    pub fn add(&mut self, block: ndarray::ArrayView2<f64>) {
        let nb = block.nrows();
        if nb == 0 {
            return;
        }
        let mean_b = block.sum_axis(Axis(0)) / nb as f64;
        let centered = &block - &mean_b;
        let m2_b = (&centered * &centered).sum_axis(Axis(0));
        let n = self.n + nb;
        let delta = &mean_b - &self.mean;
        let (na, nb, nf) = (self.n as f64, nb as f64, n as f64);
        self.m2 = &self.m2 + &m2_b + &delta.mapv(|d| d * d * na * nb / nf);
        self.mean = &self.mean + &(delta * (nb / nf));
        self.n = n;
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> FeatureStats {
        if self.n == 0 {
            return FeatureStats::identity(N_FEATURES);
        }
        let std = self.m2.mapv(|v| {
            let s = (v / self.n as f64).sqrt();
            if s > 1e-9 {
                s
            } else {
                1.0
            }
        });
        FeatureStats {
            mean: self.mean.to_vec(),
            std: std.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn scan_of(pts: &[[f32; 4]]) -> PointScan {
        PointScan::new("t", pts.iter().map(|p| Point::new(p[0], p[1], p[2], p[3])).collect())
    }

    #[test]
    fn floor_rule() {
        let grid = voxelize(&scan_of(&[[0.25, 0.49, -0.1, 0.0]]), 0.5).unwrap();
        assert_eq!(grid.cells.keys().next(), Some(&[0, 0, -1]));
        assert_eq!(
            voxelize(&scan_of(&[]), 0.0),
            Err(FeaturizeError::InvalidVoxelSize(0.0))
        );
        assert!(voxelize(&scan_of(&[]), f64::NAN).is_err());
    }

    #[test]
    fn huge_voxel_single_cell() {
        let scan = scan_of(&[[0.1, 0.2, 0.3, 0.0], [5.0, 5.0, 5.0, 0.0], [9.9, 0.0, 1.0, 0.0]]);
        let grid = voxelize(&scan, 100.0).unwrap();
        assert_eq!(grid.len(), 1);
    }

    #[test]
    fn conservation_and_partition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f32; 4]> = (0..1000)
            .map(|_| {
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let scan = scan_of(&pts);
        let grid = voxelize(&scan, 0.7).unwrap();
        assert_eq!(grid.cells.values().map(Vec::len).sum::<usize>(), 1000);
        let mut seen = vec![false; 1000];
        for (key, members) in &grid.cells {
            assert!(!members.is_empty());
            for &m in members {
                assert!(!seen[m as usize]);
                seen[m as usize] = true;
                let p = scan.points[m as usize].xyz();
                assert_eq!(voxel_key(p, 0.7), *key);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn single_point_voxel() {
        let scan = scan_of(&[[0.05, 0.05, 0.05, 0.4]]);
        let grid = voxelize(&scan, 0.2).unwrap();
        let f = compute_features(&scan, &grid);
        let r = f.data.row(0);
        assert!((r[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(r[2], 0.0);
        assert_eq!([r[5], r[6], r[7]], [0.0; 3]);
        // isolated
        assert!(r.iter().skip(8).all(|&v| v == 0.0));
        assert!((r[3] - 0.4f32 as f64).abs() < 1e-15);
    }

    #[test]
    fn adjacency_columns() {
        let scan = scan_of(&[[0.1, 0.1, 0.1, 0.0], [0.3, 0.1, 0.1, 0.0], [0.1, 0.1, 0.3, 0.0]]);
        let grid = voxelize(&scan, 0.2).unwrap();
        let f = compute_features(&scan, &grid);
        let row = f.keys.iter().position(|k| *k == [0, 0, 0]).unwrap();
        let adj: Vec<f64> = f.data.row(row).iter().skip(8).copied().collect();
        assert_eq!(adj, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    /// Jacobi rotations: an eigenvalue routine independent of nalgebra.
    fn jacobi_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
        for _ in 0..100 {
            let (mut p, mut q, mut off) = (0, 1, 0.0);
            for i in 0..3 {
                for j in i + 1..3 {
                    if a[i][j].abs() > off {
                        off = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = a;
            for k in 0..3 {
                r[k][p] = c * a[k][p] - s * a[k][q];
                r[k][q] = s * a[k][p] + c * a[k][q];
            }
            let mut out = r;
            for k in 0..3 {
                out[p][k] = c * r[p][k] - s * r[q][k];
                out[q][k] = s * r[p][k] + c * r[q][k];
            }
            a = out;
        }
        let mut ev = [a[0][0], a[1][1], a[2][2]];
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn eigenvalues_match_jacobi() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    m[i][j] = rng.random_range(-2.0..2.0);
                    m[j][i] = m[i][j];
                }
            }
            // make it PSD
            let mut psd = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    psd[i][j] = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                }
            }
            let a = sorted_eigenvalues(psd);
            let b = jacobi_eigenvalues(psd);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9 * (1.0 + b[0]), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn horizontal_plane_features() {
        // points on a z = 0 grid inside one voxel
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push([0.02 + 0.03 * i as f64, 0.02 + 0.03 * j as f64, 0.1, 0.5]);
            }
        }
        let [lin, pla, sph] = eigen_features(&pts);
        // covariance diag(v, v, 0): independent eigenvalues
        let ev = jacobi_eigenvalues({
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
            let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
            let vxx = pts.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n;
            let vyy = pts.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / n;
            let vxy = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n;
            [[vxx, vxy, 0.0], [vxy, vyy, 0.0], [0.0, 0.0, 0.0]]
        });
        assert!(sph.abs() < 1e-12);
        assert!((pla - (ev[1] - ev[2]) / ev[0]).abs() < 1e-9);
        assert!(pla > 0.9, "planarity {pla}");
        assert!(lin < 0.1);
    }

    #[test]
    fn majority_labels() {
        let scan = scan_of(&[
            [0.0, 0.0, 0.0, 0.0],
            [0.01, 0.0, 0.0, 0.0],
            [0.02, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [1.01, 0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0],
            [2.01, 0.0, 0.0, 0.0],
        ]);
        let grid = voxelize(&scan, 0.5).unwrap();
        let labels = LabelArray::semantic_only(vec![2, 2, 5, 5, 2, 0, 0]);
        assert_eq!(voxel_labels(&grid, &labels), vec![2, 2, 0]);
        let labels = LabelArray::semantic_only(vec![7, 0, 0, 9, 3, 0, 4]);
        assert_eq!(voxel_labels(&grid, &labels), vec![7, 3, 4]);
    }

    #[test]
    fn augment_identity_and_yaw() {
        let scan = scan_of(&[[1.0, 2.0, 3.0, 0.5], [-4.0, 0.5, -1.0, 0.1]]);
        let same = augment(&scan, &AugmentConfig::identity(), 1).unwrap();
        assert_eq!(same, scan);
        let cfg = AugmentConfig {
            yaw_range: 180.0,
            scale_range: [1.0, 1.0],
            jitter_sigma: 0.0,
        };
        let rot = augment(&scan, &cfg, 2).unwrap();
        for (a, b) in rot.points.iter().zip(&scan.points) {
            assert_eq!(a.z, b.z);
            assert_eq!(a.intensity, b.intensity);
        }
    }

    #[test]
    fn augment_scale_norms() {
        let scan = scan_of(&[[1.0, 2.0, 3.0, 0.5], [-4.0, 0.5, -1.0, 0.1]]);
        let pts = to_f64(&scan.points);
        let cfg = AugmentConfig {
            yaw_range: 30.0,
            scale_range: [1.1, 1.1],
            jitter_sigma: 0.0,
        };
        let out = augment_points(&pts, &cfg, 5).unwrap();
        let norm = |p: &Point64| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        for (a, b) in out.iter().zip(&pts) {
            assert!((norm(a) - 1.1 * norm(b)).abs() < 1e-12 * norm(b));
        }
    }

    #[test]
    fn augment_rejects_bad_config() {
        let bad = AugmentConfig {
            scale_range: [0.0, 1.0],
            ..AugmentConfig::identity()
        };
        assert!(augment_points(&[], &bad, 0).is_err());
        let bad = AugmentConfig {
            jitter_sigma: -1.0,
            ..AugmentConfig::identity()
        };
        assert!(augment_points(&[], &bad, 0).is_err());
    }

    #[test]
    fn stats_standardize() {
        let m = Array2::from_shape_fn((10, N_FEATURES), |(r, c)| (r * c) as f64);
        let stats = FeatureStats::fit([&m]);
        let z = stats.apply(&m);
        for c in 0..N_FEATURES {
            let col = z.column(c);
            assert!(col.mean().unwrap().abs() < 1e-12);
        }
        // column 0 is constant → std 1
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn accumulator_blocks_match_whole() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m = Array2::from_shape_simple_fn((57, N_FEATURES), || rng.random_range(-5.0..20.0));
        let whole = FeatureStats::fit([&m]);
        let mut acc = StatsAccumulator::new();
        for start in [0, 3, 20, 21, 40] {
            let end = match start {
                0 => 3,
                3 => 20,
                20 => 21,
                21 => 40,
                _ => 57,
            };
            acc.add(m.slice(ndarray::s![start..end, ..]));
        }
        let parts = acc.finish();
        assert_eq!(acc.n_rows(), 57);
        for c in 0..N_FEATURES {
            let col = m.column(c);
            let mean = col.sum() / 57.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 57.0;
            assert!((parts.mean[c] - mean).abs() < 1e-12);
            assert!((parts.std[c] - var.sqrt()).abs() < 1e-12);
            assert!((whole.std[c] - parts.std[c]).abs() < 1e-12);
        }
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point64>> {
        proptest::collection::vec(
            (-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y, z, i)| [x, y, z, i]),
            1..120,
        )
    }

    proptest! {
        #[test]
        fn eigen_features_bounded(pts in arb_points()) {
            let grid = voxelize_points(&pts, 0.8).unwrap();
            let f = compute_features_points(&pts, &grid);
            for r in f.data.rows() {
                for c in 5..8 {
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&r[c]));
                }
                prop_assert!(r[5] + r[6] + r[7] <= 1.0 + 1e-9);
                prop_assert!(r.iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn features_permutation_invariant(pts in arb_points(), seed in any::<u64>()) {
            let mut shuffled = pts.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let a = compute_features_points(&pts, &voxelize_points(&pts, 0.5).unwrap());
            let b = compute_features_points(&shuffled, &voxelize_points(&shuffled, 0.5).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn yaw_preserves_distances(pts in arb_points(), seed in any::<u64>()) {
            let cfg = AugmentConfig { yaw_range: 180.0, scale_range: [1.0, 1.0], jitter_sigma: 0.0 };
            let out = augment_points(&pts, &cfg, seed).unwrap();
            prop_assert_eq!(out.len(), pts.len());
            let d = |a: &Point64, b: &Point64| ((a[0]-b[0]).powi(2) + (a[1]-b[1]).powi(2) + (a[2]-b[2]).powi(2)).sqrt();
            for i in 0..pts.len().min(20) {
                for j in 0..i {
                    let d0 = d(&pts[i], &pts[j]);
                    let d1 = d(&out[i], &out[j]);
                    prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1e-12));
                }
            }
        }
    }
}
