//! Differentiable operations on [`Var`].
//!
//! Shape mismatches inside these primitives are programming errors and
//! panic, in the same way ndarray does. The layer-level functions in
//! [`super::nn`] validate user-facing shapes and return [`Error::Input`].
//!
//! [`Error::Input`]: crate::error::Error::Input

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn, Zip};

use super::graph::Var;
use super::Tensor;

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

fn view3(t: &Tensor) -> ArrayView3<'_, f64> {
    t.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a 3-D tensor")
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

/// Concatenation of contiguous tensors by copying interleaved blocks.
fn concat_flat(values: &[Arc<Tensor>], axis: usize) -> Option<Tensor> {
    let first = values[0].shape();
    let mut shape = first.to_vec();
    shape[axis] = 0;
    let mut slices = Vec::with_capacity(values.len());
    for v in values {
        let same = v.ndim() == first.len()
            && v.shape().iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
        if !same {
            return None;
        }
        shape[axis] += v.shape()[axis];
        slices.push(v.as_slice()?);
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (v, s) in values.iter().zip(&slices) {
            let block = v.shape()[axis] * inner;
            data.extend_from_slice(&s[o * block..(o + 1) * block]);
        }
    }
    Some(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    // IxDyn iteration is slow; contiguous equal shapes and row broadcasts
    // go through flat slices instead.
    if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
        if a.shape() == b.shape() {
            let v = x.iter().zip(y).map(|(&x, &y)| f(x, y)).collect();
            return ArrayD::from_shape_vec(a.raw_dim(), v).unwrap();
        }
        let n = a.ndim().max(b.ndim());
        if a.ndim() == n && a.shape().last() == b.shape().last() && b.len() == *b.shape().last().unwrap_or(&1) {
            let v = x.chunks(y.len().max(1)).flat_map(|row| row.iter().zip(y).map(|(&x, &y)| f(x, y))).collect();
            return ArrayD::from_shape_vec(a.raw_dim(), v).unwrap();
        }
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

impl<'g> Var<'g> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let value = self.value().mapv(f);
        self.graph.push_op(
            op,
            value,
            &[self],
            Box::new(move |g, p, out, _| {
                if let (Some(x), Some(y), Some(gs)) = (p[0].as_slice(), out.as_slice(), g.as_slice()) {
                    let v = x.iter().zip(y).zip(gs).map(|((&x, &y), &g)| df(x, y) * g).collect();
                    return vec![Some(ArrayD::from_shape_vec(out.raw_dim(), v).unwrap())];
                }
                let mut d = Zip::from(p[0])
                    .and(out)
                    .map_collect(|&x, &y| df(x, y));
                d *= g;
                vec![Some(d)]
            }),
        )
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let value = broadcast_binary(&self.value(), &other.value(), |x, y| x + y);
        self.graph.push_op(
            "add",
            value,
            &[self, other],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(g, p[0].shape())),
                    need[1].then(|| reduce_to(g, p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let value = broadcast_binary(&self.value(), &other.value(), |x, y| x - y);
        self.graph.push_op(
            "sub",
            value,
            &[self, other],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(g, p[0].shape())),
                    need[1].then(|| reduce_to(&-g, p[1].shape())),
                ]
            }),
        )
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let value = broadcast_binary(&self.value(), &other.value(), |x, y| x * y);
        self.graph.push_op(
            "mul",
            value,
            &[self, other],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(&broadcast_binary(g, p[1], |a, b| a * b), p[0].shape())),
                    need[1].then(|| reduce_to(&broadcast_binary(g, p[0], |a, b| a * b), p[1].shape())),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let value = broadcast_binary(&self.value(), &other.value(), |x, y| x / y);
        self.graph.push_op(
            "div",
            value,
            &[self, other],
            Box::new(|g, p, out, need| {
                vec![
                    need[0].then(|| reduce_to(&broadcast_binary(g, p[1], |a, b| a / b), p[0].shape())),
                    need[1].then(|| {
                        // d(x/y)/dy = -out / y
                        let t = broadcast_binary(g, out, |a, o| a * o);
                        reduce_to(&broadcast_binary(&t, p[1], |a, b| -a / b), p[1].shape())
                    }),
                ]
            }),
        )
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let value = self.value().mapv(|x| x * c);
        self.graph.push_op(
            "scale",
            value,
            &[self],
            Box::new(move |g, _, _, _| vec![Some(g.mapv(|x| x * c))]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let value = self.value().mapv(|x| x + c);
        self.graph
            .push_op("add_scalar", value, &[self], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        self.neg().add_scalar(1.0)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(self) -> Var<'g> {
        self.unary("elu", elu, |x, y| if x > 0.0 { 1.0 } else { y + 1.0 })
    }

    pub fn relu(self) -> Var<'g> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `ln(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Inverse of softplus, `ln(exp(x) - 1)`, for `x > 0`.
    pub fn inv_softplus(self) -> Var<'g> {
        self.unary("inv_softplus", inv_softplus, |x, _| 1.0 / (-(-x).exp_m1()))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary("abs", f64::abs, |x, _| x.signum() * (x != 0.0) as u8 as f64)
    }

    pub fn square(self) -> Var<'g> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        self.unary("clamp_min", move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    /// Adds `eps` wherever the value is below `threshold` (identity gradient).
    pub fn stabilize(self, threshold: f64, eps: f64) -> Var<'g> {
        self.unary(
            "stabilize",
            move |x| if x < threshold { x + eps } else { x },
            |_, _| 1.0,
        )
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let value = {
            let (a, b) = (self.value(), other.value());
            view2(&a).dot(&view2(&b)).into_dyn()
        };
        self.graph.push_op(
            "matmul",
            value,
            &[self, other],
            Box::new(|g, p, _, need| {
                let g = view2(g);
                vec![
                    need[0].then(|| g.dot(&view2(p[1]).t()).into_dyn()),
                    need[1].then(|| view2(p[0]).t().dot(&g).into_dyn()),
                ]
            }),
        )
    }

    /// Axis permutation (`transpose` for 2-D is `permute(&[1, 0])`).
    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let axes = axes.to_vec();
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(&axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.push_op(
            "permute",
            value,
            &[self],
            Box::new(move |g, _, _, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        )
    }

    pub fn t(self) -> Var<'g> {
        self.permute(&[1, 0])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape to {shape:?}: {e}"));
        self.graph.push_op(
            "reshape",
            value,
            &[self],
            Box::new(|g, p, _, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(p[0].raw_dim())
                        .unwrap(),
                )]
            }),
        )
    }

    /// Broadcast to a larger shape; the gradient is summed back.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", self.shape()))
            .to_owned();
        self.graph.push_op(
            "broadcast_to",
            value,
            &[self],
            Box::new(|g, p, _, _| vec![Some(reduce_to(g, p[0].shape()))]),
        )
    }

    /// Half-open slice `start..end` along `axis`.
    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Var<'g> {
        let value = self
            .value()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.graph.push_op(
            "slice_axis",
            value,
            &[self],
            Box::new(move |g, p, _, _| {
                let mut d = ArrayD::zeros(p[0].raw_dim());
                d.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                    .assign(g);
                vec![Some(d)]
            }),
        )
    }

    /// Rows of a 2-D tensor selected by `index` (repeats allowed).
    pub fn gather_rows(self, index: Arc<Vec<usize>>) -> Var<'g> {
        let value = {
            let x = self.value();
            let x = view2(&x);
            let mut out = Array2::zeros((index.len(), x.ncols()));
            for (mut row, &i) in out.rows_mut().into_iter().zip(index.iter()) {
                row.assign(&x.row(i));
            }
            out.into_dyn()
        };
        self.graph.push_op(
            "gather_rows",
            value,
            &[self],
            Box::new(move |g, p, _, _| {
                let g = view2(g);
                let mut d = Array2::zeros((p[0].shape()[0], p[0].shape()[1]));
                for (row, &i) in g.rows().into_iter().zip(index.iter()) {
                    let mut target = d.row_mut(i);
                    target += &row;
                }
                vec![Some(d.into_dyn())]
            }),
        )
    }

    /// Sum of all elements (0-d result).
    pub fn sum(self) -> Var<'g> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.graph.push_op(
            "sum",
            value,
            &[self],
            Box::new(|g, p, _, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(p[0].raw_dim(), gv))]
            }),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a length-1 axis.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let value = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.graph.push_op(
            "sum_axis",
            value,
            &[self],
            Box::new(|g, p, _, _| vec![Some(g.broadcast(p[0].raw_dim()).unwrap().to_owned())]),
        )
    }

    /// Column-wise maximum of a 2-D tensor, shape `1×F`. The gradient is
    /// routed to the first row attaining the maximum.
    pub fn max_rows(self) -> Var<'g> {
        let (value, argmax) = {
            let x = self.value();
            let x = view2(&x);
            let mut best = x.row(0).to_owned();
            let mut arg = vec![0usize; x.ncols()];
            for (i, row) in x.rows().into_iter().enumerate().skip(1) {
                for (c, &v) in row.iter().enumerate() {
                    if v > best[c] {
                        best[c] = v;
                        arg[c] = i;
                    }
                }
            }
            (best.insert_axis(Axis(0)).into_dyn(), arg)
        };
        self.graph.push_op(
            "max_rows",
            value,
            &[self],
            Box::new(move |g, p, _, _| {
                let mut d = Array2::zeros((p[0].shape()[0], p[0].shape()[1]));
                for (c, &r) in argmax.iter().enumerate() {
                    d[(r, c)] = g[[0, c]];
                }
                vec![Some(d.into_dyn())]
            }),
        )
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax(self) -> Var<'g> {
        let value = softmax_last_axis(&self.value());
        self.graph.push_op(
            "softmax",
            value,
            &[self],
            Box::new(|g, _, y, _| {
                let last = Axis(y.ndim() - 1);
                let gy = g * y;
                let dot = gy.sum_axis(last).insert_axis(last);
                vec![Some(&gy - &(y * &dot))]
            }),
        )
    }

    /// Normalizes each row of a 2-D tensor to zero mean and unit variance.
    pub fn normalize_rows(self, eps: f64) -> Var<'g> {
        let (value, inv_std) = {
            let x = self.value();
            let x = view2(&x);
            let d = x.ncols() as f64;
            let mut out = x.to_owned();
            let mut inv_std = Vec::with_capacity(x.nrows());
            for mut row in out.rows_mut() {
                let mu = row.sum() / d;
                row.mapv_inplace(|v| v - mu);
                let var = row.iter().map(|v| v * v).sum::<f64>() / d;
                let is = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|v| v * is);
                inv_std.push(is);
            }
            (out.into_dyn(), inv_std)
        };
        self.graph.push_op(
            "normalize_rows",
            value,
            &[self],
            Box::new(move |g, _, y, _| {
                let (g, y) = (view2(g), view2(y));
                let d = y.ncols() as f64;
                let mut dx = Array2::zeros(y.raw_dim());
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mean_g = gr.sum() / d;
                    let mean_gy = gr.dot(&yr) / d;
                    Zip::from(&mut row)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gi, &yi| *o = inv_std[i] * (gi - mean_g - yi * mean_gy));
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = concat_flat(&values, axis).unwrap_or_else(|| {
            ndarray::concatenate(Axis(axis), &views).unwrap_or_else(|e| panic!("concat along {axis}: {e}"))
        });
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        graph.push_op(
            "concat",
            value,
            parts,
            Box::new(move |g, _, _, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&n, &want)| {
                        let piece = want.then(|| {
                            g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + n))
                                .to_owned()
                        });
                        start += n;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// Cross-correlation of a `C×H×W` input with a `Co×C×kh×kw` kernel.
    pub fn conv2d_raw(self, kernel: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let (value, geom) = {
            let (x, k) = (self.value(), kernel.value());
            let x = view3(&x);
            let ks = k.shape();
            let geom = ConvGeom::new(x.dim(), (ks[2], ks[3]), stride, pad);
            let kmat = k
                .view()
                .into_shape_with_order((ks[0], ks[1] * ks[2] * ks[3]))
                .unwrap();
            let cols = im2col(x, &geom);
            let mut out = kmat.dot(&cols);
            if !out.is_standard_layout() {
                out = out.as_standard_layout().into_owned();
            }
            let out = out
                .into_shape_with_order((ks[0], geom.out_h, geom.out_w))
                .unwrap();
            (out.into_dyn(), geom)
        };
        self.graph.push_op(
            "conv2d",
            value,
            &[self, kernel],
            Box::new(move |g, p, _, need| {
                let k = p[1];
                let ks = k.shape();
                let g = g.as_standard_layout();
                let g2 = g
                    .view()
                    .into_shape_with_order((ks[0], geom.out_h * geom.out_w))
                    .unwrap();
                let dx = need[0].then(|| {
                    let kmat = k
                        .view()
                        .into_shape_with_order((ks[0], ks[1] * ks[2] * ks[3]))
                        .unwrap();
                    let dcols = kmat.t().dot(&g2);
                    col2im(dcols.view(), &geom).into_dyn()
                });
                let dk = need[1].then(|| {
                    let cols = im2col(view3(p[0]), &geom);
                    g2.dot(&cols.t())
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(ks))
                        .unwrap()
                });
                vec![dx, dk]
            }),
        )
    }

    /// Bilinear resampling of a `C×H×W` tensor to `C×out_h×out_w` using
    /// half-pixel centers (`align_corners = false`).
    pub fn resize_bilinear_to(self, out_h: usize, out_w: usize) -> Var<'g> {
        let shape = self.shape();
        let mh = Arc::new(interp_matrix(out_h, shape[1]));
        let mw = Arc::new(interp_matrix(out_w, shape[2]));
        let value = {
            let x = self.value();
            let x = view3(&x);
            let mut out = Array3::zeros((shape[0], out_h, out_w));
            for (c, mut plane) in out.outer_iter_mut().enumerate() {
                plane.assign(&mh.dot(&x.index_axis(Axis(0), c)).dot(&mw.t()));
            }
            out.into_dyn()
        };
        self.graph.push_op(
            "resize_bilinear",
            value,
            &[self],
            Box::new(move |g, p, _, _| {
                let g = view3(g);
                let in_shape = p[0].shape();
                let mut d = Array3::zeros((in_shape[0], in_shape[1], in_shape[2]));
                for (c, mut plane) in d.outer_iter_mut().enumerate() {
                    plane.assign(&mh.t().dot(&g.index_axis(Axis(0), c)).dot(&*mw));
                }
                vec![Some(d.into_dyn())]
            }),
        )
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn inv_softplus(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

pub(crate) fn softmax_last_axis(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let last = Axis(y.ndim() - 1);
    for mut lane in y.lanes_mut(last) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    y
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new((c, h, w): (usize, usize, usize), (kh, kw): (usize, usize), stride: usize, pad: usize) -> Self {
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        Self { c, h, w, kh, kw, stride, pad, out_h, out_w }
    }
}

fn im2col(x: ArrayView3<'_, f64>, geom: &ConvGeom) -> Array2<f64> {
    let g = geom;
    let mut cols = Array2::zeros((g.c * g.kh * g.kw, g.out_h * g.out_w));
    for c in 0..g.c {
        let plane = x.index_axis(Axis(0), c);
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: ArrayView2<'_, f64>, geom: &ConvGeom) -> Array3<f64> {
    let g = geom;
    let mut x = Array3::zeros((g.c, g.h, g.w));
    for c in 0..g.c {
        let mut plane = x.index_axis_mut(Axis(0), c);
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = cols.row(row);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let mut dst = plane.slice_mut(s![iy as usize, ..]);
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out×in` linear-interpolation matrix with half-pixel centers; source
/// coordinates are clamped to the valid range.
pub(crate) fn interp_matrix(out: usize, input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out, input));
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let w1 = src - i0 as f64;
        m[(i, i0)] += 1.0 - w1;
        m[(i, i1)] += w1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use ndarray::array;

    #[test]
    fn reduce_to_sums_broadcast_axes() {
        let g = ArrayD::ones(IxDyn(&[2, 3, 4]));
        assert_eq!(reduce_to(&g, &[4]), ArrayD::from_elem(IxDyn(&[4]), 6.0));
        assert_eq!(reduce_to(&g, &[3, 1]), ArrayD::from_elem(IxDyn(&[3, 1]), 8.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::new();
        let x = g.input(array![2.0].into_dyn());
        let y = x.mul(x).add(x).sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap()[[0]], 5.0);
    }

    #[test]
    fn softmax_is_stable_and_shift_invariant() {
        let g = Graph::new();
        let big = g.constant(array![1000.0, 1000.0].into_dyn()).softmax();
        assert_eq!(*big.value(), array![0.5, 0.5].into_dyn());
        let a = softmax_last_axis(&array![[0.3, -1.2, 2.0]].into_dyn());
        let b = softmax_last_axis(&array![[10.3, 8.8, 12.0]].into_dyn());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(elu(0.0), 0.0);
        assert!(elu(-30.0) > -1.0);
        assert!((inv_softplus(softplus(0.3)) - 0.3).abs() < 1e-12);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn interp_matrix_rows_sum_to_one() {
        for (o, i) in [(2, 4), (8, 4), (5, 3), (3, 7)] {
            let m = interp_matrix(o, i);
            for r in m.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn max_rows_routes_to_first_max() {
        let g = Graph::new();
        let x = g.input(array![[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]].into_dyn());
        let m = x.max_rows();
        assert_eq!(*m.value(), array![[3.0, 5.0]].into_dyn());
        let grads = g.backward(m.sum()).unwrap();
        assert_eq!(
            grads.wrt(x).unwrap(),
            &array![[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]].into_dyn()
        );
    }
}
