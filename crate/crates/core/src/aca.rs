//! Adaptive correlation aggregation.
//!
//! Every pixel of a scale is lifted to a reference point using the previous
//! depth estimate. Its neighbors in the completed point cloud are collected
//! with a ball whose radius shrinks as the previous confidence grows, then
//! weighted per channel by a small position-aware network and summed into a
//! dense map of 3D features aligned with the image.
//!
//! Neighbor selection is hard and carries no gradient: [`query_geometry`]
//! runs on plain values, and only [`aggregate_relevant_features`] touches
//! the tape.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap};
use crate::spatial::SpatialIndex;
use crate::tensor::{Dense, Graph, ParamStore, Var};

/// Length of a position encoding.
pub const ENCODING_DIM: usize = 10;

const HIDDEN_B: usize = 32;

/// Neighborhood query used to build the aggregated map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No 3D features; the aggregated map is zero.
    None,
    Knn,
    /// Ball query with `r = r_max` everywhere.
    FixedBall,
    /// Ball query with a confidence-driven radius.
    Adaptive,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "knn" => Ok(Self::Knn),
            "ball" | "fixed_ball" => Ok(Self::FixedBall),
            "adaptive" | "aca" => Ok(Self::Adaptive),
            _ => Err(Error::input(format!(
                "unknown neighborhood strategy `{s}` (expected none, knn, ball or adaptive)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Knn => "knn",
            Self::FixedBall => "ball",
            Self::Adaptive => "adaptive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcaConfig {
    pub k: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub strategy: Strategy,
}

impl Default for AcaConfig {
    fn default() -> Self {
        Self {
            k: 16,
            r_min: 0.05,
            r_max: 0.1,
            strategy: Strategy::Adaptive,
        }
    }
}

impl AcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("ACA neighbor count must be at least 1"));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max.is_finite()) {
            return Err(Error::config(format!(
                "ACA radii need 0 < r_min < r_max, got {} and {}",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }
}

/// `r = C·r_min + (1 − C)·r_max` with `C` clamped to `[0, 1]` (NaN counts as 0).
pub fn adaptive_radius(confidence: f64, r_min: f64, r_max: f64) -> f64 {
    let c = if confidence.is_nan() { 0.0 } else { confidence.clamp(0.0, 1.0) };
    (c * r_min + (1.0 - c) * r_max).clamp(r_min, r_max)
}

/// `[X_p, X_k, X_p − X_k, ‖X_p − X_k‖]`.
pub fn position_encoding(xp: [f64; 3], xk: [f64; 3]) -> [f64; ENCODING_DIM] {
    let d = [xp[0] - xk[0], xp[1] - xk[1], xp[2] - xk[2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [xp[0], xp[1], xp[2], xk[0], xk[1], xk[2], d[0], d[1], d[2], norm]
}

/// Per-channel attention weights `sigmoid(MLP_a([F, MLP_b(P)]))`.
#[derive(Debug, Clone)]
pub struct AcaWeights {
    b1: Dense,
    b2: Dense,
    a1: Dense,
    a2: Dense,
    pub feat_dim: usize,
}

impl AcaWeights {
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize) -> Result<Self> {
        Ok(Self {
            b1: Dense::new(store, &format!("{name}.pos1"), ENCODING_DIM, HIDDEN_B)?,
            b2: Dense::new(store, &format!("{name}.pos2"), HIDDEN_B, feat_dim)?,
            a1: Dense::new(store, &format!("{name}.att1"), 2 * feat_dim, feat_dim)?,
            a2: Dense::new(store, &format!("{name}.att2"), feat_dim, feat_dim)?,
            feat_dim,
        })
    }

    /// Weights for `features: M×F` and `encoding: M×10`, shape `M×F`, in (0, 1).
    pub fn attention_weights<'g>(&self, features: Var<'g>, encoding: Var<'g>) -> Result<Var<'g>> {
        let fs = features.shape();
        let es = encoding.shape();
        if fs.len() != 2 || es.len() != 2 || fs[0] != es[0] || fs[1] != self.feat_dim || es[1] != ENCODING_DIM {
            return Err(Error::input(format!(
                "attention_weights: features {fs:?} and encoding {es:?} do not agree (F = {})",
                self.feat_dim
            )));
        }
        let pos = self.b2.forward(self.b1.forward(encoding)?.elu())?;
        let h = self.a1.forward(Var::concat(&[features, pos], 1))?.elu();
        Ok(self.a2.forward(h)?.sigmoid())
    }
}

/// `Σ_k w_k ⊙ F_k` for `features, weights: K×F`, returns `1×F`.
pub fn aggregate<'g>(features: Var<'g>, weights: Var<'g>) -> Result<Var<'g>> {
    if features.shape() != weights.shape() || features.shape().len() != 2 {
        return Err(Error::input(format!(
            "aggregate: features {:?} and weights {:?} differ",
            features.shape(),
            weights.shape()
        )));
    }
    Ok(features.mul(weights).sum_axis(0))
}

/// Hard neighbor selection for every pixel of one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AcaGeometry {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// `P·K` point indices, pixels row-major, neighbors nearest first.
    pub neighbors: Arc<Vec<usize>>,
    /// `(P·K)×10` position encodings matching `neighbors`.
    pub encoding: Array2<f64>,
    /// Query radius per pixel; NaN for knn or pixels without a reference point.
    pub radii: Vec<f64>,
    /// 1 where the pixel has a reference point, 0 otherwise.
    pub valid: Vec<f64>,
    /// Pixels whose ball was empty or that had no reference depth.
    pub fallback_mask: Array2<bool>,
}

/// Reference points and neighbor sets for a scale.
///
/// Returns `None` for [`Strategy::None`]. `camera` must already be scaled
/// to the depth map's size.
pub fn query_geometry(
    prev_depth: &DepthMap,
    prev_conf: &Array2<f64>,
    camera: &CameraModel,
    index: &SpatialIndex,
    cfg: &AcaConfig,
) -> Result<Option<AcaGeometry>> {
    cfg.validate()?;
    let (h, w) = (prev_depth.height(), prev_depth.width());
    if prev_conf.dim() != (h, w) || camera.width() != w || camera.height() != h {
        return Err(Error::input(format!(
            "ACA inputs disagree: depth {h}×{w}, confidence {:?}, camera {}×{}",
            prev_conf.dim(),
            camera.height(),
            camera.width()
        )));
    }
    if index.is_empty() {
        return Err(Error::config("ACA needs a non-empty spatial index"));
    }
    if cfg.strategy == Strategy::None {
        return Ok(None);
    }
    if cfg.strategy == Strategy::Knn && cfg.k > index.len() {
        return Err(Error::config(format!(
            "knn strategy needs K = {} ≤ point count {}",
            cfg.k,
            index.len()
        )));
    }
    let inv = camera.pixel_to_world()?;
    let k = cfg.k;
    let p = h * w;
    let mut neighbors = vec![0usize; p * k];
    let mut encoding = Array2::zeros((p * k, ENCODING_DIM));
    let mut radii = vec![f64::NAN; p];
    let mut valid = vec![0.0; p];
    let mut fallback = Array2::from_elem((h, w), false);
    let pts = index.positions();
    for v in 0..h {
        for u in 0..w {
            let pix = v * w + u;
            let d = prev_depth.get(u, v);
            if d <= 0.0 {
                fallback[[v, u]] = true;
                continue;
            }
            let x = inv * nalgebra::Vector4::new(u as f64 * d, v as f64 * d, d, 1.0);
            let xp = [x[0] / x[3], x[1] / x[3], x[2] / x[3]];
            let hood = match cfg.strategy {
                Strategy::Knn => index.knn_query(xp, k)?,
                Strategy::FixedBall => {
                    radii[pix] = cfg.r_max;
                    index.ball_query(xp, cfg.r_max, k)?
                }
                Strategy::Adaptive => {
                    let r = adaptive_radius(prev_conf[[v, u]], cfg.r_min, cfg.r_max);
                    radii[pix] = r;
                    index.ball_query(xp, r, k)?
                }
                Strategy::None => unreachable!(),
            };
            valid[pix] = 1.0;
            fallback[[v, u]] = hood.out_of_ball;
            for (j, &i) in hood.indices.iter().enumerate() {
                let row = pix * k + j;
                neighbors[row] = i;
                for (c, e) in position_encoding(xp, pts[i]).into_iter().enumerate() {
                    encoding[[row, c]] = e;
                }
            }
        }
    }
    Ok(Some(AcaGeometry {
        height: h,
        width: w,
        k,
        neighbors: Arc::new(neighbors),
        encoding,
        radii,
        valid,
        fallback_mask: fallback,
    }))
}

/// Dense `F×H×W` map of aggregated point features.
#[derive(Debug, Clone)]
pub struct AggregatedFeatureMap<'g> {
    pub values: Var<'g>,
    pub fallback_mask: Array2<bool>,
}

/// How neighbor weights are produced.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    Learned(&'a AcaWeights),
    /// Every weight is 1: a plain neighbor-feature sum.
    Unit,
}

/// Gathers, weights and sums neighbor features for each pixel.
///
/// `geometry = None` yields the all-zero map of the `none` strategy with an
/// empty fallback mask.
pub fn aggregate_relevant_features<'g>(
    graph: &'g Graph,
    geometry: Option<&AcaGeometry>,
    point_features: Var<'g>,
    weighting: Weighting<'_>,
    height: usize,
    width: usize,
) -> Result<AggregatedFeatureMap<'g>> {
    let fs = point_features.shape();
    if fs.len() != 2 || fs[0] == 0 {
        return Err(Error::input(format!("point features must be N×F, got {fs:?}")));
    }
    let f = fs[1];
    let Some(geo) = geometry else {
        return Ok(AggregatedFeatureMap {
            values: graph.constant(ArrayD::zeros(IxDyn(&[f, height, width]))),
            fallback_mask: Array2::from_elem((height, width), false),
        });
    };
    if (geo.height, geo.width) != (height, width) {
        return Err(Error::input(format!(
            "geometry is {}×{}, expected {height}×{width}",
            geo.height, geo.width
        )));
    }
    if let Some(&bad) = geo.neighbors.iter().find(|&&i| i >= fs[0]) {
        return Err(Error::input(format!(
            "neighbor index {bad} outside {} point features",
            fs[0]
        )));
    }
    let p = height * width;
    let gathered = point_features.gather_rows(geo.neighbors.clone());
    let weighted = match weighting {
        Weighting::Learned(weights) => {
            let enc = graph.constant(geo.encoding.clone().into_dyn());
            gathered.mul(weights.attention_weights(gathered, enc)?)
        }
        Weighting::Unit => gathered,
    };
    let mut pooled = weighted
        .reshape(&[p, geo.k, f])
        .sum_axis(1)
        .reshape(&[p, f]);
    if geo.valid.iter().any(|&v| v == 0.0) {
        let mask = ArrayD::from_shape_vec(IxDyn(&[p, 1]), geo.valid.clone())
            .map_err(|e| Error::input(e.to_string()))?;
        pooled = pooled.mul(graph.constant(mask));
    }
    Ok(AggregatedFeatureMap {
        values: pooled.t().reshape(&[f, height, width]),
        fallback_mask: geo.fallback_mask.clone(),
    })
}
