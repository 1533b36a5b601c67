//! Synthetic table-top scenes rendered by ray casting.
//!
//! A pinhole camera looks down at a ground plane `z = 0` carrying spheres
//! and boxes. Objects flagged transparent corrupt the raw depth the way a
//! structured-light sensor does: the pixel is either dropped or reports the
//! surface behind the object, with a little noise.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::geometry::{look_at, CameraModel, DepthMap};

/// A rendered sample with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// `3×H×W`, values are multiples of 1/255 in [0, 1].
    pub rgb: Array3<f64>,
    pub raw_depth: DepthMap,
    pub gt_depth: DepthMap,
    /// Transparent or specular pixels.
    pub mask: Array2<bool>,
    pub camera: CameraModel,
}

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub sphere_radius: (f64, f64),
    pub box_half_extent: (f64, f64),
    /// Chance that an object is transparent or specular.
    pub transparent_prob: f64,
    /// Chance that a transparent pixel reads as a hole.
    pub hole_prob: f64,
    /// Meters.
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            focal: 60.0,
            min_objects: 3,
            max_objects: 8,
            sphere_radius: (0.04, 0.1),
            box_half_extent: (0.03, 0.08),
            transparent_prob: 0.5,
            hole_prob: 0.6,
            noise_sigma: 0.005,
        }
    }
}

impl SceneSpec {
    pub fn with_size(width: usize, height: usize, focal: f64) -> Self {
        Self {
            width,
            height,
            focal,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::input(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        let ranges = [self.sphere_radius, self.box_half_extent];
        if ranges.iter().any(|&(a, b)| !(a > 0.0 && a <= b)) {
            return Err(Error::input("object size ranges must satisfy 0 < lo ≤ hi"));
        }
        for p in [self.transparent_prob, self.hole_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::input("probabilities must lie in [0, 1]"));
            }
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::input("image size, focal length and noise must be positive"));
        }
        Ok(())
    }
}

/// Scene primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Box rotated by `yaw` about the vertical axis.
    Cuboid { center: [f64; 3], half: [f64; 3], yaw: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: [f64; 3],
    pub transparent: bool,
}

/// Entry and exit distances along a ray, if it hits.
fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, Vector3<f64>)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let c = Vector3::from(center);
            let oc = o - c;
            let a = d.dot(d);
            let b = oc.dot(d);
            let cc = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * cc;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t0 = (-b - s) / a;
            let t1 = (-b + s) / a;
            if t1 <= 0.0 {
                return None;
            }
            let n = (o + d * t0 - c) / radius;
            Some((t0, t1, n))
        }
        Shape::Cuboid { center, half, yaw } => {
            let rot = Matrix3::new(yaw.cos(), yaw.sin(), 0.0, -yaw.sin(), yaw.cos(), 0.0, 0.0, 0.0, 1.0);
            let lo = rot * (o - Vector3::from(center));
            let ld = rot * d;
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for a in 0..3 {
                if ld[a].abs() < 1e-15 {
                    if lo[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let mut ta = (-half[a] - lo[a]) / ld[a];
                let mut tb = (half[a] - lo[a]) / ld[a];
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                }
                t1 = t1.min(tb);
            }
            if t0 > t1 || t1 <= 0.0 {
                return None;
            }
            let mut nl = Vector3::zeros();
            nl[axis] = -ld[axis].signum();
            Some((t0, t1, rot.transpose() * nl))
        }
    }
}

/// Camera looking at the table from about 0.9 m, slightly jittered.
fn random_camera(spec: &SceneSpec, rng: &mut Xoshiro256PlusPlus) -> Result<CameraModel> {
    let eye = [
        rng.gen_range(-0.05..0.05),
        -0.5 + rng.gen_range(-0.05..0.05),
        0.7 + rng.gen_range(-0.05..0.05),
    ];
    let target = [rng.gen_range(-0.03..0.03), 0.1 + rng.gen_range(-0.03..0.03), 0.0];
    let ext = look_at(eye, target, [0.0, 0.0, 1.0])?;
    CameraModel::from_pinhole(
        spec.focal,
        spec.focal,
        (spec.width as f64 - 1.0) / 2.0,
        (spec.height as f64 - 1.0) / 2.0,
        spec.width,
        spec.height,
        ext,
    )
}

fn random_objects(spec: &SceneSpec, rng: &mut Xoshiro256PlusPlus) -> Vec<SceneObject> {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objs: Vec<SceneObject> = (0..n)
        .map(|_| {
            let x = rng.gen_range(-0.28..0.28);
            let y = rng.gen_range(-0.1..0.32);
            let shape = if rng.gen_bool(0.5) {
                let r = rng.gen_range(spec.sphere_radius.0..=spec.sphere_radius.1);
                Shape::Sphere { center: [x, y, r], radius: r }
            } else {
                let (lo, hi) = spec.box_half_extent;
                let half = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
                Shape::Cuboid {
                    center: [x, y, half[2]],
                    half,
                    yaw: rng.gen_range(0.0..std::f64::consts::PI),
                }
            };
            SceneObject {
                shape,
                color: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
                transparent: rng.gen_bool(spec.transparent_prob),
            }
        })
        .collect();
    if spec.transparent_prob > 0.0 && !objs.iter().any(|o| o.transparent) {
        objs[0].transparent = true;
    }
    objs
}

/// Renders a random scene. Identical seeds give identical samples.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let camera = random_camera(spec, &mut rng)?;
    let objects = random_objects(spec, &mut rng);
    let mut sample = render(&camera, &objects, spec, &mut rng)?;
    sample.id = format!("scene_{seed:08}");
    Ok(sample)
}

/// Ray-casts `objects` over the ground plane as seen by `camera`.
pub fn render(
    camera: &CameraModel,
    objects: &[SceneObject],
    spec: &SceneSpec,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<SceneSample> {
    let (w, h) = (camera.width(), camera.height());
    let t = camera.extrinsics();
    let r = t.fixed_view::<3, 3>(0, 0).into_owned();
    let origin = -(r.transpose() * t.fixed_view::<3, 1>(0, 3).into_owned());
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).map_err(|e| Error::input(e.to_string()))?;
    let light = Vector3::new(0.3, -0.4, 0.85).normalize();
    let mut rgb = Array3::zeros((3, h, w));
    let mut gt = Array2::zeros((h, w));
    let mut raw = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), false);
    for v in 0..h {
        for u in 0..w {
            // camera-frame direction with unit z, so the ray parameter is depth
            let dc = Vector3::new((u as f64 - camera.cx()) / camera.fx(), (v as f64 - camera.cy()) / camera.fy(), 1.0);
            let dir = r.transpose() * dc;
            let mut hits: Vec<(f64, Option<usize>, Vector3<f64>)> = Vec::new();
            if dir.z < 0.0 {
                hits.push((-origin.z / dir.z, None, Vector3::z()));
            }
            for (i, o) in objects.iter().enumerate() {
                if let Some((t0, _, n)) = intersect(&o.shape, &origin, &dir) {
                    if t0 > 0.0 {
                        hits.push((t0, Some(i), n));
                    }
                }
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0));
            let Some(&(depth, who, normal)) = hits.first() else {
                continue;
            };
            gt[[v, u]] = depth;
            let point = origin + dir * depth;
            let shade = |color: [f64; 3], n: &Vector3<f64>| {
                let k = 0.35 + 0.65 * n.dot(&light).max(0.0);
                color.map(|c| c * k)
            };
            let ground = |p: &Vector3<f64>| {
                let check = ((p.x / 0.05).floor() + (p.y / 0.05).floor()).rem_euclid(2.0);
                let c = 0.45 + 0.25 * check;
                [c, c * 0.95, c * 0.9]
            };
            let mut color = match who {
                None => shade(ground(&point), &normal),
                Some(i) => shade(objects[i].color, &normal),
            };
            raw[[v, u]] = depth;
            if let Some(i) = who.filter(|&i| objects[i].transparent) {
                mask[[v, u]] = true;
                let behind = hits.iter().find(|hit| hit.1 != Some(i));
                if let Some(&(db, wb, nb)) = behind {
                    let pb = origin + dir * db;
                    let back = match wb {
                        None => shade(ground(&pb), &nb),
                        Some(j) => shade(objects[j].color, &nb),
                    };
                    let spec_hl = normal.dot(&light).max(0.0).powi(16);
                    for c in 0..3 {
                        color[c] = 0.3 * color[c] + 0.7 * back[c] + 0.5 * spec_hl;
                    }
                }
                if rng.gen_bool(spec.hole_prob) {
                    raw[[v, u]] = 0.0;
                } else {
                    raw[[v, u]] = match behind {
                        Some(&(db, _, _)) => (db + noise.sample(rng)).max(0.0),
                        None => 0.0,
                    };
                }
            }
            for c in 0..3 {
                rgb[[c, v, u]] = (color[c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Ok(SceneSample {
        id: String::new(),
        rgb,
        raw_depth: DepthMap::new(raw)?,
        gt_depth: DepthMap::new(gt)?,
        mask,
        camera: camera.clone(),
    })
}

/// Scene seeds for a dataset split: training uses `seed·1_000_000 + i`,
/// evaluation `seed·1_000_000 + 500_000 + i`.
pub fn split_seeds(seed: u64, count: usize, eval: bool) -> Vec<u64> {
    let base = seed.wrapping_mul(1_000_000) + if eval { 500_000 } else { 0 };
    (0..count as u64).map(|i| base + i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(5, &spec).unwrap(), generate_scene(5, &spec).unwrap());
        assert_ne!(generate_scene(5, &spec).unwrap().gt_depth, generate_scene(6, &spec).unwrap().gt_depth);
    }

    #[test]
    fn every_pixel_sees_a_surface() {
        let s = generate_scene(1, &SceneSpec::default()).unwrap();
        assert!(s.gt_depth.values().iter().all(|&d| d > 0.0));
        assert!(s.mask.iter().any(|&m| m));
    }

    #[test]
    fn opaque_scene_is_clean() {
        let spec = SceneSpec {
            transparent_prob: 0.0,
            ..SceneSpec::default()
        };
        let s = generate_scene(3, &spec).unwrap();
        assert_eq!(s.raw_depth, s.gt_depth);
        assert!(!s.mask.iter().any(|&m| m));
    }

    #[test]
    fn zero_objects_rejected() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(0, &spec).is_err());
    }
}
