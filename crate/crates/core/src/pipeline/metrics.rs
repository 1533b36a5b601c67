//! Masked depth-accuracy metrics.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::DepthMap;

/// δ thresholds, compared with strict `<`.
pub const DELTA_THRESHOLDS: [f64; 3] = [1.05, 1.10, 1.25];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Metrics {
    /// Meters.
    pub rmse: f64,
    pub rel: f64,
    /// Meters.
    pub mae: f64,
    /// Percentages for [`DELTA_THRESHOLDS`].
    pub delta: [f64; 3],
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "rmse,rel,mae,delta_1.05,delta_1.10,delta_1.25";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.rmse, self.rel, self.mae, self.delta[0], self.delta[1], self.delta[2]
        )
    }

    /// Componentwise mean. Fails on an empty slice.
    pub fn mean(all: &[Metrics]) -> Result<Metrics> {
        if all.is_empty() {
            return Err(Error::input("mean of zero metric rows"));
        }
        let n = all.len() as f64;
        let mut m = Metrics::default();
        for x in all {
            m.rmse += x.rmse / n;
            m.rel += x.rel / n;
            m.mae += x.mae / n;
            for i in 0..3 {
                m.delta[i] += x.delta[i] / n;
            }
        }
        Ok(m)
    }
}

/// RMSE, REL, MAE and δ over the pixels where `mask` is true.
pub fn metrics(pred: &DepthMap, gt: &DepthMap, mask: &Array2<bool>) -> Result<Metrics> {
    let shape = (gt.height(), gt.width());
    if (pred.height(), pred.width()) != shape || mask.dim() != shape {
        return Err(Error::input(format!(
            "metrics: prediction {}×{}, ground truth {}×{} and mask {:?} differ",
            pred.height(),
            pred.width(),
            shape.0,
            shape.1,
            mask.dim()
        )));
    }
    let (mut n, mut sq, mut rel, mut abs) = (0usize, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((&m, &p), &g) in mask.iter().zip(pred.values()).zip(gt.values()) {
        if !m {
            continue;
        }
        if g <= 0.0 {
            return Err(Error::input("ground truth is zero inside the evaluation mask"));
        }
        let e = p - g;
        n += 1;
        sq += e * e;
        abs += e.abs();
        rel += e.abs() / g;
        let ratio = (p / g).max(g / p);
        for (hit, t) in hits.iter_mut().zip(DELTA_THRESHOLDS) {
            if ratio < t {
                *hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::input("evaluation mask is empty"));
    }
    let nf = n as f64;
    Ok(Metrics {
        rmse: (sq / nf).sqrt(),
        rel: rel / nf,
        mae: abs / nf,
        delta: hits.map(|h| 100.0 * h as f64 / nf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn boundary_ratio_is_excluded() {
        let p = DepthMap::new(array![[1.1]]).unwrap();
        let g = DepthMap::new(array![[1.0]]).unwrap();
        let m = metrics(&p, &g, &array![[true]]).unwrap();
        assert!((m.rmse - 0.1).abs() < 1e-12 && (m.rel - 0.1).abs() < 1e-12);
        assert_eq!(m.delta, [0.0, 0.0, 100.0]);
    }

    #[test]
    fn perfect_prediction() {
        let g = DepthMap::new(array![[1.0, 2.0], [0.5, 0.7]]).unwrap();
        let m = metrics(&g, &g, &array![[true, false], [true, true]]).unwrap();
        assert_eq!(m, Metrics { rmse: 0.0, rel: 0.0, mae: 0.0, delta: [100.0; 3] });
    }

    #[test]
    fn empty_mask_and_zero_gt_rejected() {
        let g = DepthMap::new(array![[0.0, 1.0]]).unwrap();
        assert!(metrics(&g, &g, &array![[false, false]]).is_err());
        assert!(metrics(&g, &g, &array![[true, false]]).is_err());
    }
}
