//! RGB-D feature trunk and hourglass refinement stages.
//!
//! The trunk sees RGB concatenated with normalized raw depth and taps
//! features at full, half and quarter resolution. Each hourglass stage takes
//! a reference depth at its scale, refines it through a two-level
//! encoder-decoder and predicts depth and confidence. Depth is predicted as
//! a residual on the reference in softplus space, so a zero head returns the
//! reference.

use std::collections::VecDeque;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::tensor::{Conv2d, ParamStore, Var};

/// Reference depths are clamped to this (normalized) floor before the
/// inverse softplus.
pub const REF_FLOOR: f64 = 1e-3;

/// Channel widths at scales 1/4, 1/2 and 1/1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub quarter: usize,
    pub half: usize,
    pub full: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            quarter: 32,
            half: 48,
            full: 64,
        }
    }
}

impl Widths {
    /// Widths ordered quarter, half, full.
    pub fn as_array(&self) -> [usize; 3] {
        [self.quarter, self.half, self.full]
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1)?,
            c2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1)?,
        })
    }

    fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.c2.forward(self.c1.forward(x)?.elu())?;
        Ok(x.add(y).elu())
    }
}

/// Small residual trunk over the 4-channel RGB-D input.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stem: Conv2d,
    res_full: ResBlock,
    down_half: Conv2d,
    res_half: ResBlock,
    down_quarter: Conv2d,
    res_quarter: ResBlock,
}

/// Feature maps ordered quarter, half, full.
#[derive(Debug, Clone, Copy)]
pub struct MultiScaleFeatures<'g> {
    pub maps: [Var<'g>; 3],
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, name: &str, widths: Widths) -> Result<Self> {
        Ok(Self {
            stem: Conv2d::new(store, &format!("{name}.stem"), 4, widths.full, 3, 1)?,
            res_full: ResBlock::new(store, &format!("{name}.res_full"), widths.full)?,
            down_half: Conv2d::new(store, &format!("{name}.down_half"), widths.full, widths.half, 3, 2)?,
            res_half: ResBlock::new(store, &format!("{name}.res_half"), widths.half)?,
            down_quarter: Conv2d::new(store, &format!("{name}.down_quarter"), widths.half, widths.quarter, 3, 2)?,
            res_quarter: ResBlock::new(store, &format!("{name}.res_quarter"), widths.quarter)?,
        })
    }

    /// `rgbd: 4×H×W` with depth already normalized.
    pub fn forward<'g>(&self, rgbd: Var<'g>) -> Result<MultiScaleFeatures<'g>> {
        let s = rgbd.shape();
        if s.len() != 3 || s[0] != 4 {
            return Err(Error::input(format!("feature trunk expects 4×H×W, got {s:?}")));
        }
        check_divisible(s[1], s[2])?;
        let full = self.res_full.forward(self.stem.forward(rgbd)?.elu())?;
        let half = self.res_half.forward(self.down_half.forward(full)?.elu())?;
        let quarter = self.res_quarter.forward(self.down_quarter.forward(half)?.elu())?;
        Ok(MultiScaleFeatures {
            maps: [quarter, half, full],
        })
    }
}

pub(crate) fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::input(format!(
            "image size {w}×{h} must be non-zero and divisible by 4"
        )));
    }
    Ok(())
}

/// Stacks `rgb: 3×H×W` and `depth / max_depth` into the trunk input.
pub fn rgbd_input(rgb: &Array3<f64>, raw_depth: &DepthMap, max_depth: f64) -> Result<ArrayD<f64>> {
    let (c, h, w) = rgb.dim();
    if c != 3 || (h, w) != (raw_depth.height(), raw_depth.width()) {
        return Err(Error::input(format!(
            "rgb {:?} and depth {}×{} are not registered",
            rgb.dim(),
            raw_depth.height(),
            raw_depth.width()
        )));
    }
    check_divisible(h, w)?;
    let mut x = ArrayD::zeros(IxDyn(&[4, h, w]));
    for ((ch, v, u), &val) in rgb.indexed_iter() {
        x[[ch, v, u]] = val;
    }
    for ((v, u), &d) in raw_depth.values().indexed_iter() {
        x[[3, v, u]] = d / max_depth;
    }
    Ok(x)
}

/// Depth and confidence of one stage, both `1×h×w` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput<'g> {
    /// Meters.
    pub depth: Var<'g>,
    /// In [0, 1].
    pub confidence: Var<'g>,
    /// Normalized reference depth the stage refined.
    pub reference: Var<'g>,
}

impl StageOutput<'_> {
    pub fn depth_map(&self) -> Result<DepthMap> {
        DepthMap::new(plane(&self.depth.value()))
    }

    pub fn confidence_map(&self) -> Array2<f64> {
        plane(&self.confidence.value())
    }
}

/// First channel of a `C×H×W` tensor as an `H×W` array.
pub fn plane(t: &ArrayD<f64>) -> Array2<f64> {
    let s = t.shape();
    Array2::from_shape_fn((s[1], s[2]), |(v, u)| t[[0, v, u]])
}

/// Two-level encoder-decoder with depth and confidence heads.
#[derive(Debug, Clone)]
pub struct Hourglass {
    inp: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    up1: Conv2d,
    up0: Conv2d,
    out: Conv2d,
    depth_head: Conv2d,
    conf_head: Conv2d,
    pub channels: usize,
}

impl Hourglass {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        let depth_head = Conv2d::new(store, &format!("{name}.depth_head"), ch, 1, 1, 1)?;
        let k = store.get(depth_head.kernel).raw_dim();
        store.set(depth_head.kernel, ArrayD::zeros(k))?;
        Ok(Self {
            inp: Conv2d::new(store, &format!("{name}.in"), ch + 1, ch, 3, 1)?,
            down1: Conv2d::new(store, &format!("{name}.down1"), ch, ch, 3, 2)?,
            down2: Conv2d::new(store, &format!("{name}.down2"), ch, ch, 3, 2)?,
            mid: Conv2d::new(store, &format!("{name}.mid"), ch, ch, 3, 1)?,
            up1: Conv2d::new(store, &format!("{name}.up1"), ch, ch, 3, 1)?,
            up0: Conv2d::new(store, &format!("{name}.up0"), ch, ch, 3, 1)?,
            out: Conv2d::new(store, &format!("{name}.out"), 2 * ch, ch, 3, 1)?,
            depth_head,
            conf_head: Conv2d::new(store, &format!("{name}.conf_head"), ch, 1, 1, 1)?,
            channels: ch,
        })
    }

    /// Refines `reference: 1×h×w` (normalized depth) using `features:
    /// C×h×w`. The decoder reads `fused` instead of `features` when given.
    pub fn forward<'g>(
        &self,
        reference: Var<'g>,
        features: Var<'g>,
        fused: Option<Var<'g>>,
        max_depth: f64,
    ) -> Result<StageOutput<'g>> {
        let rs = reference.shape();
        let fs = features.shape();
        if rs.len() != 3 || rs[0] != 1 || fs.len() != 3 || fs[0] != self.channels || rs[1..] != fs[1..] {
            return Err(Error::input(format!(
                "hourglass with {} channels got reference {rs:?} and features {fs:?}",
                self.channels
            )));
        }
        if let Some(f) = fused {
            if f.shape() != fs {
                return Err(Error::input(format!(
                    "fused features {:?} do not match stage features {fs:?}",
                    f.shape()
                )));
            }
        }
        let (h, w) = (fs[1], fs[2]);
        let x0 = self.inp.forward(Var::concat(&[reference, features], 0))?.elu();
        let e1 = self.down1.forward(x0)?.elu();
        let e2 = self.down2.forward(e1)?.elu();
        let m = self.mid.forward(e2)?.elu();
        let s1 = e1.shape();
        let u1 = self.up1.forward(m.resize_bilinear_to(s1[1], s1[2]).add(e1))?.elu();
        let u0 = self.up0.forward(u1.resize_bilinear_to(h, w))?.elu();
        let skip = fused.unwrap_or(features);
        let f = self.out.forward(Var::concat(&[u0.add(x0), skip], 0))?.elu();
        let base = reference.clamp_min(REF_FLOOR).inv_softplus();
        let depth = self.depth_head.forward(f)?.add(base).softplus().scale(max_depth);
        let confidence = self.conf_head.forward(f)?.sigmoid();
        Ok(StageOutput {
            depth,
            confidence,
            reference,
        })
    }
}

/// Nearest-valid fill: every zero pixel takes the depth of the closest
/// valid pixel in 4-connected steps (ties go to whichever is reached first
/// in a row-major multi-source breadth-first search). An all-zero map is
/// returned unchanged.
pub fn fill_holes(depth: &DepthMap) -> DepthMap {
    let (h, w) = (depth.height(), depth.width());
    let mut out = depth.values().clone();
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for ((v, u), &d) in depth.values().indexed_iter() {
        if d > 0.0 {
            seen[[v, u]] = true;
            queue.push_back((v, u));
        }
    }
    while let Some((v, u)) = queue.pop_front() {
        let d = out[[v, u]];
        let nbrs = [
            (v.wrapping_sub(1), u),
            (v, u.wrapping_sub(1)),
            (v, u + 1),
            (v + 1, u),
        ];
        for (nv, nu) in nbrs {
            if nv < h && nu < w && !seen[[nv, nu]] {
                seen[[nv, nu]] = true;
                out[[nv, nu]] = d;
                queue.push_back((nv, nu));
            }
        }
    }
    DepthMap::new(out).expect("fill copies finite non-negative depths")
}

/// Block average over valid (positive) pixels, plus the fraction of valid
/// pixels per block. Blocks with no valid pixel get depth 0.
pub fn area_downsample(depth: &Array2<f64>, factor: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = depth.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::input(format!(
            "cannot downsample {w}×{h} by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::zeros((oh, ow));
    let mut frac = Array2::zeros((oh, ow));
    for v in 0..oh {
        for u in 0..ow {
            let (mut sum, mut n) = (0.0, 0usize);
            for dv in 0..factor {
                for du in 0..factor {
                    let d = depth[[v * factor + dv, u * factor + du]];
                    if d > 0.0 {
                        sum += d;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                out[[v, u]] = sum / n as f64;
            }
            frac[[v, u]] = n as f64 / (factor * factor) as f64;
        }
    }
    Ok((out, frac))
}
