//! Analytic ray/primitive intersection.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit direction.
    pub dir: [f64; 3],
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Horizontal plane `z = height`.
    Plane { height: f64 },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder with flat caps.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z0: f64,
        z1: f64,
    },
    /// Axis-aligned ellipsoid.
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl Shape {
    /// Smallest positive ray parameter at which the ray hits the surface.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match *self {
            Shape::Plane { height } => {
                let dz = ray.dir[2];
                if dz.abs() < EPS {
                    return None;
                }
                let t = (height - ray.origin[2]) / dz;
                (t > EPS).then_some(t)
            }
            Shape::Box { min, max } => intersect_box(ray, min, max),
            Shape::Cylinder {
                center,
                radius,
                z0,
                z1,
            } => intersect_cylinder(ray, center, radius, z0, z1),
            Shape::Ellipsoid { center, radii } => intersect_ellipsoid(ray, center, radii),
        }
    }

    /// Planar footprint `(min_x, min_y, max_x, max_y)`; `None` for unbounded shapes.
    pub fn footprint(&self) -> Option<[f64; 4]> {
        match *self {
            Shape::Plane { .. } => None,
            Shape::Box { min, max } => Some([min[0], min[1], max[0], max[1]]),
            Shape::Cylinder { center, radius, .. } => Some([
                center[0] - radius,
                center[1] - radius,
                center[0] + radius,
                center[1] + radius,
            ]),
            Shape::Ellipsoid { center, radii } => Some([
                center[0] - radii[0],
                center[1] - radii[1],
                center[0] + radii[0],
                center[1] + radii[1],
            ]),
        }
    }
}

fn intersect_box(ray: &Ray, min: [f64; 3], max: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.dir[axis];
        if d.abs() < EPS {
            if o < min[axis] || o > max[axis] {
                return None;
            }
            continue;
        }
        let mut t0 = (min[axis] - o) / d;
        let mut t1 = (max[axis] - o) / d;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > EPS {
        Some(t_near)
    } else if t_far > EPS {
        // origin inside the box
        Some(t_far)
    } else {
        None
    }
}

fn intersect_cylinder(ray: &Ray, c: [f64; 2], r: f64, z0: f64, z1: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > EPS && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let (ox, oy) = (ray.origin[0] - c[0], ray.origin[1] - c[1]);
    let (dx, dy) = (ray.dir[0], ray.dir[1]);
    let a = dx * dx + dy * dy;
    if a > EPS {
        let b = 2.0 * (ox * dx + oy * dy);
        let cc = ox * ox + oy * oy - r * r;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = ray.origin[2] + t * ray.dir[2];
                if z >= z0 && z <= z1 {
                    consider(t);
                }
            }
        }
    }
    let dz = ray.dir[2];
    if dz.abs() > EPS {
        for zc in [z0, z1] {
            let t = (zc - ray.origin[2]) / dz;
            let x = ox + t * dx;
            let y = oy + t * dy;
            if x * x + y * y <= r * r {
                consider(t);
            }
        }
    }
    best
}

fn intersect_ellipsoid(ray: &Ray, c: [f64; 3], radii: [f64; 3]) -> Option<f64> {
    // Scale into the unit sphere frame; t is unchanged by the scaling.
    let o: Vec<f64> = (0..3).map(|i| (ray.origin[i] - c[i]) / radii[i]).collect();
    let d: Vec<f64> = (0..3).map(|i| ray.dir[i] / radii[i]).collect();
    let a: f64 = d.iter().map(|v| v * v).sum();
    let b: f64 = 2.0 * o.iter().zip(&d).map(|(o, d)| o * d).sum::<f64>();
    let cc: f64 = o.iter().map(|v| v * v).sum::<f64>() - 1.0;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    if t0 > EPS {
        Some(t0)
    } else if t1 > EPS {
        Some(t1)
    } else {
        None
    }
}
