//! Pinhole camera model, depth maps and point sets.
//!
//! Pixels are addressed 0-based at their centers: `u` runs over columns
//! `0..width`, `v` over rows `0..height`. A pixel `(u, v)` with depth `d`
//! lifts to the world point
//!
//! ```text
//! [x, y, z, 1]ᵀ = T⁻¹ · K⁻¹ · [u·d, v·d, d, 1]ᵀ
//! ```
//!
//! where `K` is the 4×4 intrinsic matrix and `T` the camera-from-world
//! extrinsic transform. Depth is metric (meters) everywhere; a depth of
//! exactly `0.0` marks a sensor hole and is never lifted.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector4};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RIGID_TOL: f64 = 1e-6;

/// Intrinsics, extrinsics and image size of a single pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix4<f64>,
    extrinsics: Matrix4<f64>,
    width: usize,
    height: usize,
}

impl CameraModel {
    /// Builds a camera after validating the pinhole and rigidity invariants.
    pub fn new(
        intrinsics: Matrix4<f64>,
        extrinsics: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config("camera image size must be positive"));
        }
        let k = &intrinsics;
        if k.iter().any(|v| !v.is_finite()) || extrinsics.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("camera matrices must be finite"));
        }
        let pinhole_rows = k.row(2) == Vector4::new(0.0, 0.0, 1.0, 0.0).transpose()
            && k.row(3) == Vector4::new(0.0, 0.0, 0.0, 1.0).transpose();
        if !pinhole_rows {
            return Err(Error::config(
                "intrinsics rows 3 and 4 must be (0,0,1,0) and (0,0,0,1)",
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::config("focal lengths fx, fy must be positive"));
        }
        check_rigid(&extrinsics)?;
        if intrinsics.determinant().abs() < 1e-12 {
            return Err(Error::config("intrinsics are not invertible"));
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
        })
    }

    /// Convenience constructor from the usual pinhole parameters.
    pub fn from_pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsics: Matrix4<f64>,
    ) -> Result<Self> {
        #[rustfmt::skip]
        let k = Matrix4::new(
            fx, 0.0, cx, 0.0,
            0.0, fy, cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        Self::new(k, extrinsics, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix4<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// Camera for an image resampled by `scale`: the first two intrinsic rows
    /// are multiplied by `scale` and the image size rounded accordingly.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::config(format!("invalid camera scale {scale}")));
        }
        let mut k = self.intrinsics;
        for c in 0..4 {
            k[(0, c)] *= scale;
            k[(1, c)] *= scale;
        }
        let w = (self.width as f64 * scale).round() as usize;
        let h = (self.height as f64 * scale).round() as usize;
        Self::new(k, self.extrinsics, w, h)
    }

    /// `T⁻¹ · K⁻¹`, the pixel-to-world transform applied to `[u·d, v·d, d, 1]`.
    pub fn pixel_to_world(&self) -> Result<Matrix4<f64>> {
        let k_inv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::config("intrinsics are not invertible"))?;
        let t_inv = self
            .extrinsics
            .try_inverse()
            .ok_or_else(|| Error::config("extrinsics are not invertible"))?;
        Ok(t_inv * k_inv)
    }

    /// `K · T`, the world-to-pixel transform.
    pub fn world_to_pixel(&self) -> Matrix4<f64> {
        self.intrinsics * self.extrinsics
    }

    /// Lifts a single pixel; `None` when the depth is not positive.
    pub fn lift(&self, u: f64, v: f64, d: f64) -> Result<Option<[f64; 3]>> {
        if !(d > 0.0) {
            return Ok(None);
        }
        let m = self.pixel_to_world()?;
        Ok(Some(apply_lift(&m, u, v, d)))
    }

    pub fn to_json(&self) -> CameraJson {
        let mut extrinsics = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                extrinsics[r * 4 + c] = self.extrinsics[(r, c)];
            }
        }
        CameraJson {
            fx: self.fx(),
            fy: self.fy(),
            cx: self.cx(),
            cy: self.cy(),
            width: self.width,
            height: self.height,
            extrinsics: extrinsics.to_vec(),
        }
    }

    pub fn from_json(json: &CameraJson) -> Result<Self> {
        if json.extrinsics.len() != 16 {
            return Err(Error::config(format!(
                "extrinsics must hold 16 row-major values, got {}",
                json.extrinsics.len()
            )));
        }
        let t = Matrix4::from_row_slice(&json.extrinsics);
        Self::from_pinhole(
            json.fx,
            json.fy,
            json.cx,
            json.cy,
            json.width,
            json.height,
            t,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json: CameraJson = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: byte_offset(&text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::from_json(&json)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())
            .map_err(|e| Error::input(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    start + column.saturating_sub(1)
}

/// On-disk camera description; `extrinsics` is row-major camera-from-world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsics: Vec<f64>,
}

fn check_rigid(t: &Matrix4<f64>) -> Result<()> {
    if t.row(3) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
        return Err(Error::config("extrinsics bottom row must be (0,0,0,1)"));
    }
    let r: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    let gram = r.transpose() * r;
    if (gram - Matrix3::identity()).abs().max() > RIGID_TOL {
        return Err(Error::config("extrinsics rotation block is not orthonormal"));
    }
    if (r.determinant() - 1.0).abs() > RIGID_TOL {
        return Err(Error::config("extrinsics rotation determinant is not +1"));
    }
    Ok(())
}

#[inline]
fn apply_lift(m: &Matrix4<f64>, u: f64, v: f64, d: f64) -> [f64; 3] {
    let p = m * Vector4::new(u * d, v * d, d, 1.0);
    [p.x / p.w, p.y / p.w, p.z / p.w]
}

/// Row-major H×W depth in meters; `0.0` marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::input(format!(
                "depth values must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Depth at column `u`, row `v`.
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[(v, u)]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|d| **d > 0.0).count()
    }
}

/// Ordered 3D points with optional per-point features and pixel provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    positions: Vec<[f64; 3]>,
    features: Option<Array2<f64>>,
    pixel_origin: Option<Vec<[usize; 2]>>,
}

impl PointSet {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::input("point positions must be finite"));
        }
        Ok(Self {
            positions,
            features: None,
            pixel_origin: None,
        })
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.positions.len() {
            return Err(Error::input(format!(
                "feature rows {} do not match point count {}",
                features.nrows(),
                self.positions.len()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Attaches `(u, v)` provenance, checked against a `width`×`height` image.
    pub fn with_pixel_origin(
        mut self,
        origin: Vec<[usize; 2]>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if origin.len() != self.positions.len() {
            return Err(Error::input("pixel origin length does not match point count"));
        }
        if origin.iter().any(|&[u, v]| u >= width || v >= height) {
            return Err(Error::input("pixel origin outside image bounds"));
        }
        self.pixel_origin = Some(origin);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn pixel_origin(&self) -> Option<&[[usize; 2]]> {
        self.pixel_origin.as_deref()
    }

    /// N×3 array view of the positions.
    pub fn positions_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 3), |(i, c)| self.positions[i][c])
    }
}

/// Lifts every pixel with positive depth to a world-frame point.
///
/// Points are emitted in row-major pixel order and remember their source
/// pixel in [`PointSet::pixel_origin`].
pub fn back_project(depth: &DepthMap, camera: &CameraModel) -> Result<PointSet> {
    if depth.width() != camera.width() || depth.height() != camera.height() {
        return Err(Error::input(format!(
            "depth map is {}×{} but camera expects {}×{}",
            depth.width(),
            depth.height(),
            camera.width(),
            camera.height()
        )));
    }
    let m = camera.pixel_to_world()?;
    let mut positions = Vec::with_capacity(depth.valid_count());
    let mut origin = Vec::with_capacity(positions.capacity());
    for ((v, u), &d) in depth.values().indexed_iter() {
        if d > 0.0 {
            positions.push(apply_lift(&m, u as f64, v as f64, d));
            origin.push([u, v]);
        }
    }
    PointSet::new(positions)?.with_pixel_origin(origin, camera.width(), camera.height())
}

/// Result of [`project`]: surviving points and how many fell behind the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `(u, v, d)` per projected point, pixels and meters.
    pub pixels: Vec<[f64; 3]>,
    /// Index into the input point set for each entry of `pixels`.
    pub source_index: Vec<usize>,
    pub behind_camera: usize,
}

/// Maps world points to `(u, v, d)`; points with camera depth `≤ 0` are
/// dropped and counted in [`Projection::behind_camera`].
pub fn project(points: &PointSet, camera: &CameraModel) -> Projection {
    let m = camera.world_to_pixel();
    let mut out = Projection {
        pixels: Vec::with_capacity(points.len()),
        source_index: Vec::with_capacity(points.len()),
        behind_camera: 0,
    };
    for (i, p) in points.positions().iter().enumerate() {
        let h = m * Vector4::new(p[0], p[1], p[2], 1.0);
        let d = h.z / h.w;
        if d <= 0.0 {
            out.behind_camera += 1;
            continue;
        }
        out.pixels.push([h.x / h.w / d, h.y / h.w / d, d]);
        out.source_index.push(i);
    }
    out
}

/// Rigid transform from a rotation (row-major 3×3) and translation.
pub fn rigid_transform(rotation: Matrix3<f64>, translation: [f64; 3]) -> Matrix4<f64> {
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
    t[(0, 3)] = translation[0];
    t[(1, 3)] = translation[1];
    t[(2, 3)] = translation[2];
    t
}

/// Camera-from-world transform for a camera at `eye` looking at `target`,
/// with image rows pointing away from `up` (the usual "y down" convention).
pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Matrix4<f64>> {
    use nalgebra::Vector3;
    let eye = Vector3::from(eye);
    let forward = Vector3::from(target) - eye;
    if forward.norm() == 0.0 {
        return Err(Error::config("look_at target coincides with eye"));
    }
    let forward = forward.normalize();
    let right = forward.cross(&Vector3::from(up));
    if right.norm() < 1e-12 {
        return Err(Error::config("look_at up vector is parallel to view direction"));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -(r * eye);
    Ok(rigid_transform(r, [t.x, t.y, t.z]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_camera(w: usize, h: usize) -> CameraModel {
        CameraModel::from_pinhole(1.0, 1.0, 0.0, 0.0, w, h, Matrix4::identity()).unwrap()
    }

    #[test]
    fn lifts_single_pixel_with_identity_transforms() {
        let mut d = Array2::zeros((4, 3));
        d[(3, 2)] = 0.5;
        let pts = back_project(&DepthMap::new(d).unwrap(), &unit_camera(3, 4)).unwrap();
        assert_eq!(pts.positions(), &[[1.0, 1.5, 0.5]]);
        assert_eq!(pts.pixel_origin().unwrap(), &[[2, 3]]);
    }

    #[test]
    fn all_zero_depth_gives_empty_cloud() {
        let pts = back_project(&DepthMap::zeros(5, 6), &unit_camera(6, 5)).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let err = back_project(&DepthMap::zeros(5, 6), &unit_camera(5, 5)).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn point_at_camera_origin_is_behind() {
        let pts = PointSet::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let proj = project(&pts, &unit_camera(4, 4));
        assert_eq!(proj.behind_camera, 1);
        assert_eq!(proj.source_index, vec![1]);
    }

    #[test]
    fn rejects_non_rigid_extrinsics() {
        let mut t = Matrix4::identity();
        t[(0, 0)] = 2.0;
        let err = CameraModel::from_pinhole(1.0, 1.0, 0.0, 0.0, 2, 2, t).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut reflect = Matrix4::identity();
        reflect[(2, 2)] = -1.0;
        assert!(CameraModel::from_pinhole(1.0, 1.0, 0.0, 0.0, 2, 2, reflect).is_err());
    }

    #[test]
    fn rejects_negative_depth() {
        assert!(DepthMap::new(array![[0.0, -1.0]]).is_err());
        assert!(DepthMap::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let t = look_at([0.0, -0.5, 0.7], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let cam = CameraModel::from_pinhole(50.0, 50.0, 16.0, 12.0, 32, 24, t).unwrap();
        let target = PointSet::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let p = project(&target, &cam).pixels[0];
        assert!((p[0] - 16.0).abs() < 1e-9 && (p[1] - 12.0).abs() < 1e-9);
        assert!((p[2] - (0.25f64 + 0.49).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scaled_camera_multiplies_intrinsics() {
        let cam = CameraModel::from_pinhole(60.0, 62.0, 31.5, 23.5, 64, 48, Matrix4::identity())
            .unwrap();
        let s = cam.scaled(0.25).unwrap();
        assert_eq!((s.width(), s.height()), (16, 12));
        assert_eq!((s.fx(), s.fy(), s.cx(), s.cy()), (15.0, 15.5, 7.875, 5.875));
    }

    #[test]
    fn camera_json_round_trip() {
        let t = look_at([0.1, -0.4, 0.8], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let cam = CameraModel::from_pinhole(60.0, 60.0, 31.5, 23.5, 64, 48, t).unwrap();
        let text = serde_json::to_string(&cam.to_json()).unwrap();
        let back = CameraModel::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn malformed_camera_json_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("camera.json");
        std::fs::write(&path, "{\n  \"fx\": 1.0,\n  \"fy\": oops }").unwrap();
        match CameraModel::load(&path).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 23),
            other => panic!("unexpected {other}"),
        }
    }
}
