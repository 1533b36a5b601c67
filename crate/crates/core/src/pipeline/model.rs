//! The complete network: image branch, point branch, ACA and fusion.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayD, IxDyn};

use crate::aca::{aggregate_relevant_features, query_geometry, AcaConfig, AcaGeometry, AcaWeights, Weighting};
use crate::error::{Error, Result};
use crate::gcmf::{GcmfBlock, Scale};
use crate::geometry::{back_project, CameraModel, DepthMap, PointSet};
use crate::image_branch::{area_downsample, fill_holes, rgbd_input, FeatureExtractor, Hourglass, StageOutput};
use crate::pipeline::config::{FusionMode, TrainConfig};
use crate::pipeline::scene::SceneSample;
use crate::point_branch::{points_of, sample_fixed, PmdStepOutput, PointBranch};
use crate::spatial::SpatialIndex;
use crate::tensor::{Conv2d, Graph, ParamStore, Var};

/// Network inputs and training targets derived once per sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    /// `4×H×W`: RGB and normalized raw depth.
    pub input: ArrayD<f64>,
    /// Cameras for scales 1/4, 1/2, 1/1.
    pub cameras: [CameraModel; 3],
    /// Stage-1 reference depth: hole-filled raw depth, area-downsampled to 1/4 (meters).
    pub quarter_reference: Array2<f64>,
    /// Fraction of valid raw pixels per 1/4-scale cell.
    pub quarter_confidence: Array2<f64>,
    /// Fixed-size cloud lifted from raw depth; `None` when raw depth is empty.
    pub cloud: Option<PointSet>,
    /// Ground-truth depth at scales 1/4, 1/2, 1/1.
    pub gt: [Array2<f64>; 3],
    pub gt_cloud: Option<Vec<[f64; 3]>>,
    pub gt_depth: DepthMap,
    pub mask: Array2<bool>,
}

impl PreparedSample {
    pub fn new(sample: &SceneSample, n_fixed: usize, max_depth: f64) -> Result<Self> {
        Self::from_parts(
            &sample.id,
            &sample.rgb,
            &sample.raw_depth,
            &sample.camera,
            Some((&sample.gt_depth, &sample.mask)),
            n_fixed,
            max_depth,
        )
    }

    /// Inference-only preparation; ground truth is left empty.
    pub fn from_parts(
        id: &str,
        rgb: &ndarray::Array3<f64>,
        raw: &DepthMap,
        camera: &CameraModel,
        truth: Option<(&DepthMap, &Array2<bool>)>,
        n_fixed: usize,
        max_depth: f64,
    ) -> Result<Self> {
        let input = rgbd_input(rgb, raw, max_depth)?;
        if (camera.height(), camera.width()) != (raw.height(), raw.width()) {
            return Err(Error::input("camera size differs from the depth map"));
        }
        let cameras = [camera.scaled(0.25)?, camera.scaled(0.5)?, camera.clone()];
        let filled = fill_holes(raw);
        let (quarter_reference, _) = area_downsample(filled.values(), 4)?;
        let validity = raw.values().mapv(|d| if d > 0.0 { 1.0 } else { 0.0 });
        let (_, quarter_confidence) = area_downsample(&validity, 4)?;
        let lifted = back_project(raw, camera)?;
        let cloud = if lifted.is_empty() {
            None
        } else {
            Some(sample_fixed(&lifted, n_fixed)?)
        };
        let (gt, gt_cloud, gt_depth, mask) = match truth {
            Some((g, m)) => {
                let gt = [
                    area_downsample(g.values(), 4)?.0,
                    area_downsample(g.values(), 2)?.0,
                    g.values().clone(),
                ];
                let lifted = back_project(g, camera)?;
                let cloud = if lifted.is_empty() {
                    None
                } else {
                    Some(sample_fixed(&lifted, n_fixed)?.positions().to_vec())
                };
                (gt, cloud, g.clone(), m.clone())
            }
            None => {
                let (h, w) = (raw.height(), raw.width());
                (
                    [Array2::zeros((h / 4, w / 4)), Array2::zeros((h / 2, w / 2)), Array2::zeros((h, w))],
                    None,
                    DepthMap::zeros(h, w),
                    Array2::from_elem((h, w), false),
                )
            }
        };
        Ok(Self {
            id: id.to_string(),
            input,
            cameras,
            quarter_reference,
            quarter_confidence,
            cloud,
            gt,
            gt_cloud,
            gt_depth,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.input.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.input.shape()[2]
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput<'g> {
    pub stages: [StageOutput<'g>; 3],
    /// Point-branch steps, when the branch ran.
    pub points: Option<Vec<PmdStepOutput<'g>>>,
    /// Neighbor selection used at each scale.
    pub geometry: [Option<AcaGeometry>; 3],
    /// Empty-ball fallbacks per scale (all false when nothing was aggregated).
    pub fallback: [Array2<bool>; 3],
}

/// Geometry supplied from outside instead of being queried.
pub type FrozenGeometry = [Option<AcaGeometry>; 3];

/// Parameters of every component plus the fusion wiring.
#[derive(Debug)]
pub struct DepthModel {
    pub store: ParamStore,
    pub trunk: FeatureExtractor,
    pub hourglass: [Hourglass; 3],
    pub point: PointBranch,
    pub aca_weights: [AcaWeights; 3],
    pub gcmf: [GcmfBlock; 3],
    /// 1×1 projections of the 3D features for additive fusion.
    pub add_proj: [Conv2d; 3],
    pub modes: [FusionMode; 3],
    pub aca: AcaConfig,
    pub max_depth: f64,
    pub detach_point_features: bool,
    point_calls: AtomicUsize,
}

impl DepthModel {
    /// Builds all parameters, seeded. Every component is created whatever
    /// the fusion modes, so checkpoints load across ablation settings.
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let widths = m.widths.as_array();
        let mut store = ParamStore::new(seed);
        let trunk = FeatureExtractor::new(&mut store, "trunk", m.widths)?;
        let hourglass = build3(|i| Hourglass::new(&mut store, &format!("stage{}", i + 1), widths[i]))?;
        let point = PointBranch::new(&mut store, m.point_features)?;
        let aca_weights = build3(|i| AcaWeights::new(&mut store, &format!("aca{}", i + 1), m.point_features))?;
        let gcmf = build3(|i| {
            GcmfBlock::new(
                &mut store,
                &format!("gcmf{}", i + 1),
                Scale::ALL[i],
                widths[i],
                m.point_features,
                m.layer_norm,
            )
        })?;
        let add_proj = build3(|i| {
            Conv2d::bias_free(&mut store, &format!("add{}", i + 1), m.point_features, widths[i], 1, 1)
        })?;
        Ok(Self {
            store,
            trunk,
            hourglass,
            point,
            aca_weights,
            gcmf,
            add_proj,
            modes: cfg.fusion_modes(),
            aca: cfg.aca,
            max_depth: m.max_depth,
            detach_point_features: m.detach_point_features,
            point_calls: AtomicUsize::new(0),
        })
    }

    /// Applies fusion and ACA settings from `cfg` without touching parameters.
    pub fn configure(&mut self, cfg: &TrainConfig) {
        self.modes = cfg.fusion_modes();
        self.aca = cfg.aca;
        self.detach_point_features = cfg.model.detach_point_features;
    }

    /// How many times the point branch has run.
    pub fn point_branch_calls(&self) -> usize {
        self.point_calls.load(Ordering::Relaxed)
    }

    pub fn point_branch_active(&self) -> bool {
        self.modes.iter().any(|&m| m != FusionMode::Off)
    }

    /// Runs the cascade. `frozen` replaces the per-scale neighbor queries.
    pub fn forward<'g>(
        &self,
        graph: &'g Graph,
        sample: &PreparedSample,
        frozen: Option<&FrozenGeometry>,
    ) -> Result<ForwardOutput<'g>> {
        let feats = self.trunk.forward(graph.constant(sample.input.clone()))?;
        let points = match (&sample.cloud, self.point_branch_active()) {
            (Some(cloud), true) => {
                self.point_calls.fetch_add(1, Ordering::Relaxed);
                Some(self.point.complete(graph, cloud)?)
            }
            _ => None,
        };
        let mut stages: Vec<StageOutput<'g>> = Vec::with_capacity(3);
        let mut geometry: FrozenGeometry = [None, None, None];
        let mut fallback = Vec::with_capacity(3);
        for (s, feat) in feats.maps.iter().copied().enumerate() {
            let shape = feat.shape();
            let (h, w) = (shape[1], shape[2]);
            let (reference, ref_meters, conf) = match stages.last() {
                None => {
                    let r = &sample.quarter_reference;
                    let normalized = r.mapv(|d| d / self.max_depth).into_shape_with_order(IxDyn(&[1, h, w]));
                    (
                        graph.constant(normalized.map_err(|e| Error::input(e.to_string()))?),
                        r.clone(),
                        sample.quarter_confidence.clone(),
                    )
                }
                Some(prev) => {
                    let up = upsample_reference(prev.depth, self.max_depth, h, w);
                    let meters = crate::image_branch::plane(&up.value()).mapv(|d| d * self.max_depth);
                    let conf = crate::image_branch::plane(&prev.confidence.detach().resize_bilinear_to(h, w).value());
                    (up, meters, conf)
                }
            };
            let mode = self.modes[s];
            let fused = if mode == FusionMode::Off {
                fallback.push(Array2::from_elem((h, w), false));
                None
            } else {
                let agg = match &points {
                    Some(steps) => {
                        let step = &steps[s];
                        let geo = match frozen {
                            Some(f) => f[s].clone(),
                            None => {
                                let moved_values = step.moved_points.value();
                                ensure_finite(moved_values.iter(), || format!("moved points of step {}", s + 1))?;
                                ensure_finite(ref_meters.iter(), || format!("reference depth of stage {}", s + 1))?;
                                let index = SpatialIndex::build(&points_of(&moved_values)?)?;
                                query_geometry(&DepthMap::new(ref_meters)?, &conf, &sample.cameras[s], &index, &self.aca)?
                            }
                        };
                        let pf = if self.detach_point_features {
                            step.features.detach()
                        } else {
                            step.features
                        };
                        let agg = aggregate_relevant_features(
                            graph,
                            geo.as_ref(),
                            pf,
                            Weighting::Learned(&self.aca_weights[s]),
                            h,
                            w,
                        )?;
                        geometry[s] = geo;
                        agg
                    }
                    None => aggregate_relevant_features(
                        graph,
                        None,
                        graph.constant(ArrayD::zeros(IxDyn(&[1, self.point.feat_dim]))),
                        Weighting::Unit,
                        h,
                        w,
                    )?,
                };
                fallback.push(agg.fallback_mask.clone());
                Some(match mode {
                    FusionMode::Add => feat.add(self.add_proj[s].forward(agg.values)?),
                    FusionMode::Gcmf => self.gcmf[s].forward(feat, agg.values)?,
                    FusionMode::Off => unreachable!(),
                })
            };
            stages.push(self.hourglass[s].forward(reference, feat, fused, self.max_depth)?);
        }
        Ok(ForwardOutput {
            stages: [stages[0], stages[1], stages[2]],
            points,
            geometry,
            fallback: fallback.try_into().unwrap(),
        })
    }
}

/// Normalized reference for the next stage: the previous depth (meters)
/// resized bilinearly to `h×w` and divided by `max_depth`.
fn ensure_finite<'a>(mut values: impl Iterator<Item = &'a f64>, what: impl FnOnce() -> String) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {}", what())))
    }
}

pub fn upsample_reference<'g>(prev_depth: Var<'g>, max_depth: f64, h: usize, w: usize) -> Var<'g> {
    prev_depth.resize_bilinear_to(h, w).scale(1.0 / max_depth)
}

fn build3<T>(mut f: impl FnMut(usize) -> Result<T>) -> Result<[T; 3]> {
    Ok([f(0)?, f(1)?, f(2)?])
}
