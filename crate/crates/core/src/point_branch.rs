//! Point-cloud completion branch.
//!
//! A fixed-size cloud passes through three point-moving steps. Each step
//! encodes every point, max-pools a global feature, concatenates it back
//! onto every point, and emits per-point features plus a displacement that
//! moves the cloud for the next step. Step `t` features are consumed by the
//! fusion block at image scale 1/4, 1/2 and 1/1 for `t = 1, 2, 3`.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::tensor::{Dense, Graph, ParamStore, Var};

/// Number of cascaded point-moving steps.
pub const STEPS: usize = 3;

/// Weight of the displacement regularizer in the point loss.
pub const DISPLACEMENT_WEIGHT: f64 = 0.01;

/// Resamples to exactly `n` points.
///
/// Farthest-point sampling starting from index 0, ties broken by lower
/// index. When the input has fewer than `n` points it is repeated
/// cyclically instead.
pub fn sample_fixed(points: &PointSet, n: usize) -> Result<PointSet> {
    if points.is_empty() {
        return Err(Error::input("sample_fixed needs at least one point"));
    }
    let idx = if points.len() <= n {
        (0..n).map(|j| j % points.len()).collect()
    } else {
        farthest_point_indices(points.positions(), n)
    };
    let pos = points.positions();
    let mut out = PointSet::new(idx.iter().map(|&i| pos[i]).collect())?;
    if let Some(origin) = points.pixel_origin() {
        let (w, h) = origin
            .iter()
            .fold((0, 0), |(w, h), &[u, v]| (w.max(u + 1), h.max(v + 1)));
        out = out.with_pixel_origin(idx.iter().map(|&i| origin[i]).collect(), w, h)?;
    }
    Ok(out)
}

/// Indices chosen by farthest-point sampling, starting at index 0.
pub fn farthest_point_indices(positions: &[[f64; 3]], n: usize) -> Vec<usize> {
    let n = n.min(positions.len());
    let mut min_d2 = vec![f64::INFINITY; positions.len()];
    let mut taken = vec![false; positions.len()];
    let mut chosen = Vec::with_capacity(n);
    let mut current = 0;
    for _ in 0..n {
        chosen.push(current);
        taken[current] = true;
        let c = positions[current];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in positions.iter().enumerate() {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if !taken[i] && min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
    }
    chosen
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance from
/// `a` to `b` plus the same from `b` to `a` (meters²).
pub fn chamfer_distance(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("chamfer distance of an empty set"));
    }
    let (ab, _) = nearest(a.positions(), b.positions());
    let (ba, _) = nearest(b.positions(), a.positions());
    Ok(mean(&ab) + mean(&ba))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// For each point of `from`, the squared distance to and index of its
/// nearest point in `to` (ties to the lower index).
fn nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> (Vec<f64>, Vec<usize>) {
    from.iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, q) in to.iter().enumerate() {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            best
        })
        .unzip()
}

/// Differentiable Chamfer distance between `a` (N×3, on the tape) and a
/// fixed target cloud.
pub fn chamfer_var<'g>(a: Var<'g>, target: &[[f64; 3]]) -> Result<Var<'g>> {
    let shape = a.shape();
    if shape.len() != 2 || shape[1] != 3 || shape[0] == 0 || target.is_empty() {
        return Err(Error::input(format!(
            "chamfer: expected non-empty N×3 and target, got {shape:?} and {}",
            target.len()
        )));
    }
    let pts = to_points(&a.value());
    let (ab, nn_ab) = nearest(&pts, target);
    let (ba, nn_ba) = nearest(target, &pts);
    let value = mean(&ab) + mean(&ba);
    let target: Arc<Vec<[f64; 3]>> = Arc::new(target.to_vec());
    Ok(a.graph().push_op(
        "chamfer",
        ArrayD::from_elem(IxDyn(&[]), value),
        &[a],
        Box::new(move |g, p, _, _| {
            let g = g.iter().copied().next().unwrap_or(0.0);
            let x = p[0];
            let (n, m) = (x.shape()[0], target.len());
            let mut d = ArrayD::zeros(x.raw_dim());
            for i in 0..n {
                let q = target[nn_ab[i]];
                for c in 0..3 {
                    d[[i, c]] += g * 2.0 * (x[[i, c]] - q[c]) / n as f64;
                }
            }
            for (j, &i) in nn_ba.iter().enumerate() {
                let q = target[j];
                for c in 0..3 {
                    d[[i, c]] += g * 2.0 * (x[[i, c]] - q[c]) / m as f64;
                }
            }
            vec![Some(d)]
        }),
    ))
}

fn to_points(t: &ArrayD<f64>) -> Vec<[f64; 3]> {
    t.outer_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

/// One point-moving step.
#[derive(Debug, Clone)]
pub struct PmdStep {
    encode1: Dense,
    encode2: Dense,
    propagate1: Dense,
    propagate2: Dense,
    displace: Dense,
    in_dim: usize,
}

/// Per-step outputs, all on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PmdStepOutput<'g> {
    /// N×F per-point features.
    pub features: Var<'g>,
    /// N×3 displacement in meters.
    pub displacement: Var<'g>,
    /// N×3 positions after the move: input positions + displacement.
    pub moved_points: Var<'g>,
}

impl PmdStep {
    /// `with_prev` adds the previous step's features to the encoder input.
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize, with_prev: bool) -> Result<Self> {
        let in_dim = 3 + if with_prev { feat_dim } else { 0 };
        Ok(Self {
            encode1: Dense::new(store, &format!("{name}.encode1"), in_dim, feat_dim)?,
            encode2: Dense::new(store, &format!("{name}.encode2"), feat_dim, feat_dim)?,
            propagate1: Dense::new(store, &format!("{name}.propagate1"), 2 * feat_dim, feat_dim)?,
            propagate2: Dense::new(store, &format!("{name}.propagate2"), feat_dim, feat_dim)?,
            displace: Dense::zeroed(store, &format!("{name}.displace"), feat_dim, 3)?,
            in_dim,
        })
    }

    pub fn forward<'g>(&self, points: Var<'g>, prev: Option<Var<'g>>) -> Result<PmdStepOutput<'g>> {
        let shape = points.shape();
        if shape.len() != 2 || shape[1] != 3 || shape[0] == 0 {
            return Err(Error::input(format!("pmd_step expects N×3 points, got {shape:?}")));
        }
        let n = shape[0];
        let input = match prev {
            Some(f) => {
                if f.shape()[0] != n {
                    return Err(Error::input("previous features do not match point count"));
                }
                Var::concat(&[points, f], 1)
            }
            None => points,
        };
        if input.shape()[1] != self.in_dim {
            return Err(Error::input(format!(
                "pmd_step expects {} input channels, got {}",
                self.in_dim,
                input.shape()[1]
            )));
        }
        let local = self.encode2.forward(self.encode1.forward(input)?.elu())?.elu();
        let global = local.max_rows();
        let width = global.shape()[1];
        let spread = global.broadcast_to(&[n, width]);
        let h = self
            .propagate1
            .forward(Var::concat(&[local, spread], 1))?
            .elu();
        let features = self.propagate2.forward(h)?.elu();
        let displacement = self.displace.forward(features)?;
        let moved_points = points.add(displacement);
        Ok(PmdStepOutput {
            features,
            displacement,
            moved_points,
        })
    }
}

/// Three cascaded [`PmdStep`]s.
#[derive(Debug, Clone)]
pub struct PointBranch {
    steps: Vec<PmdStep>,
    pub feat_dim: usize,
}

impl PointBranch {
    pub fn new(store: &mut ParamStore, feat_dim: usize) -> Result<Self> {
        let steps = (0..STEPS)
            .map(|t| PmdStep::new(store, &format!("point.step{}", t + 1), feat_dim, t > 0))
            .collect::<Result<_>>()?;
        Ok(Self { steps, feat_dim })
    }

    pub fn step(&self, t: usize) -> &PmdStep {
        &self.steps[t]
    }

    /// Runs all steps on a fixed-size cloud.
    pub fn complete<'g>(&self, graph: &'g Graph, points: &PointSet) -> Result<Vec<PmdStepOutput<'g>>> {
        if points.is_empty() {
            return Err(Error::input("point branch needs a non-empty cloud"));
        }
        let mut current = graph.constant(points.positions_array().into_dyn());
        let mut prev = None;
        let mut outs = Vec::with_capacity(STEPS);
        for step in &self.steps {
            let out = step.forward(current, prev)?;
            current = out.moved_points;
            prev = Some(out.features);
            outs.push(out);
        }
        Ok(outs)
    }
}

/// Point loss: `Σ_t Chamfer(moved_t, target) + β · mean_i ‖displacement_t,i‖²`.
pub fn point_loss<'g>(steps: &[PmdStepOutput<'g>], target: &[[f64; 3]], beta: f64) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for s in steps {
        let n = s.displacement.shape()[0] as f64;
        let term = chamfer_var(s.moved_points, target)?
            .add(s.displacement.square().sum().scale(beta / n));
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::input("point loss over zero steps"))
}

/// Positions of an N×3 tensor as a [`PointSet`].
pub fn points_of(t: &ArrayD<f64>) -> Result<PointSet> {
    PointSet::new(to_points(t))
}

/// N×3 array of a slice of points.
pub fn array_of(points: &[[f64; 3]]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, c)| points[i][c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[[f64; 3]]) -> PointSet {
        PointSet::new(points.to_vec()).unwrap()
    }

    #[test]
    fn replication_when_too_small() {
        let p = set(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let s = sample_fixed(&p, 5).unwrap();
        let xs: Vec<f64> = s.positions().iter().map(|q| q[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn exact_size_keeps_every_point() {
        let pts: Vec<[f64; 3]> = (0..7).map(|i| [i as f64 * 0.3, (i * i) as f64, 0.0]).collect();
        let s = sample_fixed(&set(&pts), 7).unwrap();
        let mut got = s.positions().to_vec();
        let mut want = pts.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn chamfer_reference_values() {
        let a = set(&[[0.0; 3]]);
        let b = set(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!(chamfer_distance(&a, &PointSet::default()).is_err());
    }

    #[test]
    fn zero_displacement_head_is_identity() {
        let mut store = ParamStore::new(3);
        let branch = PointBranch::new(&mut store, 8).unwrap();
        let pts = set(&[[0.1, 0.2, 0.3], [0.5, -0.1, 0.9], [1.0, 1.0, 0.0]]);
        let g = Graph::with_params(&store);
        let outs = branch.complete(&g, &pts).unwrap();
        assert_eq!(outs.len(), 3);
        let last = outs[2].moved_points.value();
        assert_eq!(*last, pts.positions_array().into_dyn());
        for o in &outs {
            assert_eq!(o.features.shape(), vec![3, 8]);
            assert_eq!(o.displacement.shape(), vec![3, 3]);
        }
    }
}
