//! Procedural multi-dataset LiDAR corpus.
//!
//! Scenes are a straight corridor: a road band flanked by raised sidewalks
//! and open terrain, populated with analytic primitives (boxes, vertical
//! cylinders, ellipsoids). A spinning sensor model casts a ring pattern of
//! rays and keeps the nearest hit per ray. Every point carries the fine
//! label its dataset assigns to the archetype it hit, so the generator is
//! its own labeling oracle.
//!
//! Ray-level randomness (dropout, range and intensity noise) is keyed by a
//! hash of the ray's elevation and azimuth fractions. Doubling the beam
//! count therefore yields a superset of rays with identical per-ray
//! outcomes.

mod archetype;
pub mod corpus;
pub mod geometry;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archetype::{Archetype, Zone};
pub use corpus::{generate_corpus, CorpusConfig, DatasetConfig, LabelAssignment};

use crate::lidar_io::{LabelArray, LidarIoError, Point, PointScan};
use crate::seed::{self, mix64, unit_f64};
use geometry::{Ray, Shape};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place {archetype} #{index} after {attempts} attempts")]
    PlacementFailure {
        archetype: Archetype,
        index: usize,
        attempts: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] LidarIoError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

const PLACEMENT_ATTEMPTS: usize = 200;
const PLACEMENT_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub n_beams: usize,
    /// Degrees between consecutive azimuth samples.
    pub azimuth_resolution: f64,
    /// (min, max) elevation in degrees; beams span [min, max).
    pub vertical_fov: [f64; 2],
    pub max_range: f64,
    pub dropout_rate: f64,
    /// Mounting height above the road surface, meters.
    pub height: f64,
    /// Standard deviation of the range noise, meters.
    pub range_noise: f64,
    pub intensity_noise: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            n_beams: 32,
            azimuth_resolution: 1.0,
            vertical_fov: [-25.0, 3.0],
            max_range: 40.0,
            dropout_rate: 0.05,
            height: 1.8,
            range_noise: 0.01,
            intensity_noise: 0.05,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_beams == 0 {
            return bad("n_beams must be at least 1");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.azimuth_resolution > 0.0 && self.azimuth_resolution <= 360.0) {
            return bad("azimuth_resolution must lie in (0, 360]");
        }
        if !(self.vertical_fov[0] < self.vertical_fov[1])
            || self.vertical_fov[0] < -90.0
            || self.vertical_fov[1] > 90.0
        {
            return bad("vertical_fov must be an increasing pair within [-90, 90]");
        }
        if !(self.height > 0.0) || self.range_noise < 0.0 || self.intensity_noise < 0.0 {
            return bad("height must be positive and noise levels non-negative");
        }
        Ok(())
    }

    fn n_azimuth(&self) -> usize {
        ((360.0 / self.azimuth_resolution).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Half-size of the populated area, meters (x along the road, y across).
    pub extent: f64,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub curb_height: f64,
    /// Object counts per archetype; ground archetypes are always present.
    pub counts: BTreeMap<Archetype, usize>,
    pub sensor: SensorModel,
    /// Fine label per archetype. Archetypes without an entry are written
    /// as 0 (unlabeled).
    #[serde(skip)]
    pub labels: BTreeMap<Archetype, u16>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: 30.0,
            road_half_width: 4.0,
            sidewalk_width: 3.0,
            curb_height: 0.15,
            counts: BTreeMap::new(),
            sensor: SensorModel::default(),
            labels: BTreeMap::new(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if !(self.extent > 0.0) {
            return Err(SynthError::InvalidConfig("extent must be positive".into()));
        }
        if !(self.road_half_width > 0.0) || !(self.sidewalk_width > 0.0) || self.curb_height < 0.0
        {
            return Err(SynthError::InvalidConfig(
                "road/sidewalk widths must be positive and curb height non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Label every archetype with its 1-based position in [`Archetype::ALL`].
    pub fn with_archetype_labels(mut self) -> Self {
        self.labels = Archetype::ALL
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, i as u16 + 1))
            .collect();
        self
    }

    fn ground_z(&self) -> f64 {
        -self.sensor.height
    }
}

/// A labeled surface in the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub archetype: Archetype,
    pub instance: u16,
}

/// Placed scene geometry, independent of the sensor pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub ground_z: f64,
    pub road_half_width: f64,
    pub primitives: Vec<Primitive>,
}

impl SceneLayout {
    /// Nearest hit as (t, archetype, instance).
    fn cast(&self, ray: &Ray) -> Option<(f64, Archetype, u16)> {
        let mut best: Option<(f64, Archetype, u16)> = None;
        if let Some(t) = (Shape::Plane {
            height: self.ground_z,
        })
        .intersect(ray)
        {
            let y = ray.at(t)[1];
            let a = if y.abs() < self.road_half_width {
                Archetype::Road
            } else {
                Archetype::Terrain
            };
            best = Some((t, a, 0));
        }
        for p in &self.primitives {
            if let Some(t) = p.shape.intersect(ray) {
                if best.is_none_or(|(b, _, _)| t < b) {
                    best = Some((t, p.archetype, p.instance));
                }
            }
        }
        best
    }
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] - margin < b[2] && b[0] - margin < a[2] && a[1] - margin < b[3] && b[1] - margin < a[3]
}

fn union_footprint(shapes: &[Shape]) -> [f64; 4] {
    shapes
        .iter()
        .filter_map(Shape::footprint)
        .fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |acc, f| {
            [acc[0].min(f[0]), acc[1].min(f[1]), acc[2].max(f[2]), acc[3].max(f[3])]
        })
}

/// Draw one object of `archetype` at a random position of its zone.
/// Returns the labeled shapes (a tree is a trunk plus a canopy).
fn sample_object<R: Rng>(
    rng: &mut R,
    cfg: &SceneConfig,
    archetype: Archetype,
) -> Option<Vec<(Shape, Archetype)>> {
    let g = cfg.ground_z();
    let top = g + cfg.curb_height;
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    // (half length along x, half width along y)
    let (hx, hy, height) = match archetype {
        Archetype::Car => (u(1.9, 2.3), u(0.85, 0.95), u(1.4, 1.6)),
        Archetype::Truck => (u(3.0, 4.0), u(1.15, 1.25), u(2.8, 3.5)),
        Archetype::Bicycle => (u(0.8, 0.9), u(0.04, 0.06), u(0.9, 1.1)),
        Archetype::Stroller => (u(0.4, 0.5), u(0.25, 0.3), u(0.9, 1.1)),
        Archetype::Person => (u(0.25, 0.3), u(0.2, 0.25), u(1.6, 1.9)),
        Archetype::Pole => {
            let r = u(0.06, 0.1);
            (r, r, u(4.0, 7.0))
        }
        Archetype::TrafficSign => (0.35, 0.35, u(2.6, 3.0)),
        Archetype::Trashcan => {
            let r = u(0.25, 0.35);
            (r, r, u(0.9, 1.1))
        }
        Archetype::Building => (u(4.0, 8.0), u(2.5, 5.0), u(5.0, 12.0)),
        Archetype::Fence => (u(2.0, 5.0), u(0.03, 0.05), u(1.0, 1.6)),
        Archetype::Trunk => {
            let r = u(0.15, 0.3);
            (r, r, u(2.5, 4.0))
        }
        Archetype::Vegetation => (u(0.6, 1.5), u(0.6, 1.5), u(1.0, 2.0)),
        Archetype::Road | Archetype::Sidewalk | Archetype::Terrain => return None,
    };
    let (y_lo, y_hi) = match archetype.zone() {
        Zone::Road => (-cfg.road_half_width + hy + 0.2, cfg.road_half_width - hy - 0.2),
        Zone::Sidewalk => {
            let lo = cfg.road_half_width + hy + 0.2;
            let hi = cfg.road_half_width + cfg.sidewalk_width - hy - 0.2;
            (lo, hi)
        }
        Zone::Roadside => {
            let lo = cfg.road_half_width + cfg.sidewalk_width + 0.5 + hy;
            (lo, cfg.extent - hy)
        }
        Zone::Ground => return None,
    };
    if y_lo > y_hi || hx >= cfg.extent {
        return None;
    }
    let x = u(-cfg.extent + hx, cfg.extent - hx);
    let mut y = u(y_lo, y_hi);
    if archetype.zone() != Zone::Road && u(0.0, 1.0) < 0.5 {
        y = -y;
    }
    let base = if archetype.zone() == Zone::Sidewalk { top } else { g };
    let b = |z0: f64, z1: f64| Shape::Box {
        min: [x - hx, y - hy, z0],
        max: [x + hx, y + hy, z1],
    };
    let cyl = |r: f64, z0: f64, z1: f64| Shape::Cylinder {
        center: [x, y],
        radius: r,
        z0,
        z1,
    };
    let shapes = match archetype {
        Archetype::Car => vec![(b(base + 0.15, base + height), archetype)],
        Archetype::Truck => vec![(b(base + 0.3, base + height), archetype)],
        Archetype::Bicycle | Archetype::Stroller | Archetype::Building | Archetype::Fence => {
            vec![(b(base, base + height), archetype)]
        }
        Archetype::Person => vec![(
            Shape::Ellipsoid {
                center: [x, y, base + height / 2.0],
                radii: [hx, hy, height / 2.0],
            },
            archetype,
        )],
        Archetype::Pole | Archetype::Trashcan => vec![(cyl(hx, base, base + height), archetype)],
        Archetype::TrafficSign => {
            let post_top = base + height - 0.7;
            let plate = Shape::Box {
                min: [x - 0.025, y - 0.35, post_top],
                max: [x + 0.025, y + 0.35, post_top + 0.7],
            };
            vec![(cyl(0.04, base, post_top), archetype), (plate, archetype)]
        }
        Archetype::Trunk => {
            let (rx, ry, rz) = (u(1.2, 2.2), u(1.2, 2.2), u(1.0, 1.8));
            let canopy = Shape::Ellipsoid {
                center: [x, y, base + height + 0.6 * rz],
                radii: [rx, ry, rz],
            };
            vec![(cyl(hx, base, base + height), archetype), (canopy, Archetype::Vegetation)]
        }
        Archetype::Vegetation => vec![(
            Shape::Ellipsoid {
                center: [x, y, base + 0.35 * height],
                radii: [hx, hy, height / 2.0],
            },
            archetype,
        )],
        Archetype::Road | Archetype::Sidewalk | Archetype::Terrain => unreachable!(),
    };
    Some(shapes)
}

/// Place all objects of `cfg` without footprint overlap.
pub fn place_scene(cfg: &SceneConfig, layout_seed: u64) -> Result<SceneLayout> {
    cfg.validate()?;
    let mut rng = seed::rng(layout_seed, &["layout".into()]);
    let g = cfg.ground_z();
    // Sidewalk slabs run the full length so moving sensors always see them.
    let reach = cfg.extent + 2.0 * cfg.sensor.max_range;
    let mut primitives: Vec<Primitive> = [1.0, -1.0]
        .iter()
        .map(|&side| {
            let (y0, y1) = (
                side * cfg.road_half_width,
                side * (cfg.road_half_width + cfg.sidewalk_width),
            );
            Primitive {
                shape: Shape::Box {
                    min: [-reach, y0.min(y1), g - 0.5],
                    max: [reach, y0.max(y1), g + cfg.curb_height],
                },
                archetype: Archetype::Sidewalk,
                instance: 0,
            }
        })
        .collect();
    let mut footprints: Vec<[f64; 4]> = Vec::new();
    let mut instance: u16 = 0;
    for (&archetype, &count) in &cfg.counts {
        if archetype.zone() == Zone::Ground {
            continue;
        }
        for index in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let Some(shapes) = sample_object(&mut rng, cfg, archetype) else {
                    break;
                };
                let raw: Vec<Shape> = shapes.iter().map(|(s, _)| *s).collect();
                let mut fp = union_footprint(&raw[..1]);
                if archetype == Archetype::Trunk {
                    // keep canopies apart from neighbours without using their full extent
                    fp = [fp[0] - 1.0, fp[1] - 1.0, fp[2] + 1.0, fp[3] + 1.0];
                }
                if footprints.iter().any(|f| overlaps(f, &fp, PLACEMENT_MARGIN)) {
                    continue;
                }
                footprints.push(fp);
                instance = instance.wrapping_add(1);
                primitives.extend(shapes.into_iter().map(|(shape, archetype)| Primitive {
                    shape,
                    archetype,
                    instance,
                }));
                placed = true;
                break;
            }
            if !placed {
                return Err(SynthError::PlacementFailure {
                    archetype,
                    index,
                    attempts: PLACEMENT_ATTEMPTS,
                });
            }
        }
    }
    Ok(SceneLayout {
        ground_z: g,
        road_half_width: cfg.road_half_width,
        primitives,
    })
}

fn ray_hash(seed: u64, elev_key: u64, az_key: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(elev_key ^ mix64(az_key.rotate_left(17) ^ mix64(stream))))
}

fn gaussian(h: u64) -> f64 {
    let u1 = unit_f64(mix64(h ^ 0x5151)).max(1e-300);
    let u2 = unit_f64(mix64(h ^ 0xa3a3));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Cast the sensor pattern from `(x, y)` on the road axis. Points are
/// returned in the sensor frame.
pub fn sample_scan(
    layout: &SceneLayout,
    cfg: &SceneConfig,
    sensor_xy: [f64; 2],
    ray_seed: u64,
) -> Result<(PointScan, LabelArray)> {
    cfg.validate()?;
    let s = &cfg.sensor;
    let n_az = s.n_azimuth();
    let [fov_lo, fov_hi] = s.vertical_fov;
    let mut points = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for beam in 0..s.n_beams {
        // beam/n_beams is correctly rounded, so 2*beam/(2*n_beams) gives the same key
        let frac = beam as f64 / s.n_beams as f64;
        let elev = (fov_lo + (fov_hi - fov_lo) * frac).to_radians();
        let (se, ce) = elev.sin_cos();
        for k in 0..n_az {
            let az_frac = k as f64 / n_az as f64;
            let az = 2.0 * std::f64::consts::PI * az_frac;
            let (sa, ca) = az.sin_cos();
            let ray = Ray {
                origin: [sensor_xy[0], sensor_xy[1], 0.0],
                dir: [ce * ca, ce * sa, se],
            };
            let Some((t, archetype, inst)) = layout.cast(&ray) else {
                continue;
            };
            if t > s.max_range {
                continue;
            }
            let key = |stream| ray_hash(ray_seed, frac.to_bits(), az_frac.to_bits(), stream);
            if unit_f64(key(1)) < s.dropout_rate {
                continue;
            }
            let t = (t + s.range_noise * gaussian(key(2))).clamp(0.0, s.max_range);
            let intensity =
                (archetype.base_intensity() + s.intensity_noise * gaussian(key(3))).clamp(0.0, 1.0);
            points.push(Point::new(
                (ray.dir[0] * t) as f32,
                (ray.dir[1] * t) as f32,
                (ray.dir[2] * t) as f32,
                intensity as f32,
            ));
            semantic.push(cfg.labels.get(&archetype).copied().unwrap_or(0));
            instance.push(inst);
        }
    }
    Ok((
        PointScan::new(String::new(), points),
        LabelArray::new(semantic, instance),
    ))
}

/// Place and sample a single scan with the sensor at the scene origin.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<(PointScan, LabelArray)> {
    let layout = place_scene(cfg, seed::derive(seed, &["layout".into()]))?;
    sample_scan(&layout, cfg, [0.0, 0.0], seed::derive(seed, &["rays".into()]))
}
