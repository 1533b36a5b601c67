//! Joint training objective: image loss plus weighted point loss.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::image_branch::StageOutput;
use crate::point_branch::{point_loss, PmdStepOutput, DISPLACEMENT_WEIGHT};
use crate::tensor::Var;

/// Per-stage weights, quarter to full.
pub const STAGE_WEIGHTS: [f64; 3] = [0.25, 0.5, 1.0];
/// Weight of the confidence term inside each stage.
pub const CONFIDENCE_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.01, tau: 0.05 }
    }
}

/// Loss pieces from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub image: Var<'g>,
    pub point: Option<Var<'g>>,
}

/// `Σ_s w_s [masked L1 + 0.5·MSE(conf, exp(−|err|/τ))]` over pixels with
/// positive ground truth. The confidence target is a constant.
pub fn image_loss<'g>(stages: &[StageOutput<'g>], gt: &[Array2<f64>], tau: f64) -> Result<Var<'g>> {
    if stages.len() != gt.len() || stages.is_empty() {
        return Err(Error::input("image loss needs one ground-truth map per stage"));
    }
    let mut total: Option<Var<'g>> = None;
    for (i, (st, g)) in stages.iter().zip(gt).enumerate() {
        let (h, w) = g.dim();
        if st.depth.shape() != [1, h, w] || st.confidence.shape() != [1, h, w] {
            return Err(Error::input(format!(
                "stage {} predicts {:?}, ground truth is {h}×{w}",
                i + 1,
                st.depth.shape()
            )));
        }
        let graph = st.depth.graph();
        let mask = g.mapv(|d| if d > 0.0 { 1.0 } else { 0.0 });
        let count = mask.sum();
        if count == 0.0 {
            return Err(Error::input(format!("no valid ground truth at stage {}", i + 1)));
        }
        let mask = graph.constant(mask.into_shape_with_order(IxDyn(&[1, h, w])).unwrap());
        let target = graph.constant(to_plane(g));
        let err = st.depth.sub(target);
        let l1 = err.abs().mul(mask).sum().scale(1.0 / count);
        let conf_target = err.value().mapv(|e| (-e.abs() / tau).exp());
        let conf = st
            .confidence
            .sub(graph.constant(conf_target))
            .square()
            .mul(mask)
            .sum()
            .scale(CONFIDENCE_WEIGHT / count);
        let w = STAGE_WEIGHTS[STAGE_WEIGHTS.len() - stages.len() + i];
        let term = l1.add(conf).scale(w);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.unwrap())
}

fn to_plane(a: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = a.dim();
    a.clone().into_shape_with_order(IxDyn(&[1, h, w])).unwrap()
}

/// `L = L_I + λ·L_P`. Without point outputs the total is the image loss.
pub fn joint_loss<'g>(
    stages: &[StageOutput<'g>],
    gt: &[Array2<f64>],
    points: Option<(&[PmdStepOutput<'g>], &[[f64; 3]])>,
    cfg: LossConfig,
) -> Result<LossTerms<'g>> {
    let image = image_loss(stages, gt, cfg.tau)?;
    let point = match points {
        Some((steps, cloud)) => Some(point_loss(steps, cloud, DISPLACEMENT_WEIGHT)?),
        None => None,
    };
    let total = match point {
        Some(p) => image.add(p.scale(cfg.lambda)),
        None => image,
    };
    Ok(LossTerms { total, image, point })
}
