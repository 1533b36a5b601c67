//! Parameters and the layer set used by every model component.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::graph::Var;
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Ordered collection of uniquely named parameters plus the seeded
/// generator used to initialize them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    rng: Xoshiro256PlusPlus,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
        });
        Ok(id)
    }

    /// Kaiming-uniform tensor: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::input(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.params[id.0].name,
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub(crate) fn snapshot(&self) -> Vec<Arc<Tensor>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}

/// Spatial padding policy for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad by `k / 2` so stride 1 keeps the spatial size.
    Same,
    Valid,
}

/// `y = x·W + b` for `x` of shape `[..., Cin]`.
pub fn dense<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] || b.shape() != [ws[1]] {
        return Err(Error::input(format!(
            "dense: x {xs:?}, W {ws:?}, b {:?} do not agree",
            b.shape()
        )));
    }
    let rows: usize = xs[..xs.len() - 1].iter().product();
    let flat = if xs.len() == 2 { x } else { x.reshape(&[rows, ws[0]]) };
    let y = flat.matmul(w).add(b);
    if xs.len() == 2 {
        Ok(y)
    } else {
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        Ok(y.reshape(&out_shape))
    }
}

/// Cross-correlation of `x: C×H×W` with `k: Co×C×kh×kw`, output
/// `Co×H'×W'` with `H' = floor((H + 2p − kh)/stride) + 1`.
pub fn conv2d<'g>(x: Var<'g>, k: Var<'g>, stride: usize, padding: Padding) -> Result<Var<'g>> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
        return Err(Error::input(format!("conv2d: input {xs:?} and kernel {ks:?} do not agree")));
    }
    if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
        return Err(Error::input("conv2d: kernel sizes must be odd"));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::input(format!("conv2d: unsupported stride {stride}")));
    }
    let pad = match padding {
        Padding::Same => ks[2] / 2,
        Padding::Valid => 0,
    };
    if padding == Padding::Same && ks[2] != ks[3] {
        return Err(Error::input("conv2d: same padding needs a square kernel"));
    }
    if xs[1] + 2 * pad < ks[2] || xs[2] + 2 * pad < ks[3] {
        return Err(Error::input(format!(
            "conv2d: kernel {}×{} larger than padded input {}×{}",
            ks[2],
            ks[3],
            xs[1] + 2 * pad,
            xs[2] + 2 * pad
        )));
    }
    Ok(x.conv2d_raw(k, stride, pad))
}

/// Resizes `C×H×W` by a factor of 2 (`up = true`) or 1/2.
pub fn resize_bilinear(x: Var<'_>, up: bool) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::input(format!("resize_bilinear expects C×H×W, got {s:?}")));
    }
    if up {
        Ok(x.resize_bilinear_to(s[1] * 2, s[2] * 2))
    } else {
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::input(format!(
                "cannot halve {}×{}: dimensions must be even",
                s[1], s[2]
            )));
        }
        Ok(x.resize_bilinear_to(s[1] / 2, s[2] / 2))
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.kaiming(format!("{name}.weight"), &[in_dim, out_dim], in_dim)?,
            bias: store.zeros(format!("{name}.bias"), &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    /// Layer whose weights and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.zeros(format!("{name}.weight"), &[in_dim, out_dim])?,
            bias: store.zeros(format!("{name}.bias"), &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        dense(x, g.param(self.weight), g.param(self.bias))
    }
}

/// 2-D convolution layer on `C×H×W` maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * ksize * ksize;
        Ok(Self {
            kernel: store.kaiming(format!("{name}.kernel"), &[out_ch, in_ch, ksize, ksize], fan_in)?,
            bias: Some(store.zeros(format!("{name}.bias"), &[out_ch, 1, 1])?),
            stride,
            padding: Padding::Same,
        })
    }

    /// Same as [`Conv2d::new`] but with no bias term.
    pub fn bias_free(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * ksize * ksize;
        Ok(Self {
            kernel: store.kaiming(format!("{name}.kernel"), &[out_ch, in_ch, ksize, ksize], fan_in)?,
            bias: None,
            stride,
            padding: Padding::Same,
        })
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let y = conv2d(x, g.param(self.kernel), self.stride, self.padding)?;
        Ok(match self.bias {
            Some(b) => y.add(g.param(b)),
            None => y,
        })
    }
}

/// Per-row normalization with learned gain and bias, for `N×d` tokens.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.filled(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.zeros(format!("{name}.bias"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        x.normalize_rows(self.eps)
            .mul(g.param(self.gain))
            .add(g.param(self.bias))
    }
}

/// Row-wise normalization without affine parameters, as applied by
/// [`LayerNorm`] at initialization. Handy for checking residual paths.
pub fn layer_norm_plain(x: &Tensor, eps: f64) -> Tensor {
    let g = super::Graph::new();
    (*g.constant(x.clone()).normalize_rows(eps).value()).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use ndarray::array;

    #[test]
    fn dense_identity_weights() {
        let g = Graph::new();
        let y = dense(
            g.constant(array![[1.0, 2.0]].into_dyn()),
            g.constant(array![[1.0, 0.0], [0.0, 1.0]].into_dyn()),
            g.constant(array![0.0, 0.0].into_dyn()),
        )
        .unwrap();
        assert_eq!(*y.value(), array![[1.0, 2.0]].into_dyn());
    }

    #[test]
    fn dense_bias_only() {
        let g = Graph::new();
        let y = dense(
            g.constant(ArrayD::zeros(IxDyn(&[3, 2]))),
            g.constant(ArrayD::ones(IxDyn(&[2, 4]))),
            g.constant(array![1.0, -2.0, 3.0, 0.5].into_dyn()),
        )
        .unwrap();
        for row in y.value().outer_iter() {
            assert_eq!(row, array![1.0, -2.0, 3.0, 0.5].into_dyn());
        }
    }

    #[test]
    fn dense_accepts_leading_batch_dims() {
        let g = Graph::new();
        let y = dense(
            g.constant(ArrayD::ones(IxDyn(&[2, 3, 4]))),
            g.constant(ArrayD::ones(IxDyn(&[4, 5]))),
            g.constant(ArrayD::zeros(IxDyn(&[5]))),
        )
        .unwrap();
        assert_eq!(y.shape(), vec![2, 3, 5]);
        assert!(y.value().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn dense_shape_mismatch() {
        let g = Graph::new();
        let err = dense(
            g.constant(ArrayD::zeros(IxDyn(&[1, 3]))),
            g.constant(ArrayD::zeros(IxDyn(&[2, 2]))),
            g.constant(ArrayD::zeros(IxDyn(&[2]))),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn conv_identity_kernel() {
        let g = Graph::new();
        let x = array![[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]].into_dyn();
        let k = ArrayD::ones(IxDyn(&[1, 1, 1, 1]));
        let y = conv2d(g.constant(x.clone()), g.constant(k), 1, Padding::Same).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn conv_valid_all_ones() {
        let g = Graph::new();
        let x = ArrayD::ones(IxDyn(&[1, 4, 4]));
        let k = ArrayD::ones(IxDyn(&[1, 1, 3, 3]));
        let y = conv2d(g.constant(x), g.constant(k), 1, Padding::Valid).unwrap();
        assert_eq!(*y.value(), ArrayD::from_elem(IxDyn(&[1, 2, 2]), 9.0));
    }

    #[test]
    fn conv_output_size_with_stride() {
        let g = Graph::new();
        let x = g.constant(ArrayD::ones(IxDyn(&[2, 7, 6])));
        let k = g.constant(ArrayD::ones(IxDyn(&[3, 2, 3, 3])));
        assert_eq!(conv2d(x, k, 2, Padding::Same).unwrap().shape(), vec![3, 4, 3]);
        assert_eq!(conv2d(x, k, 2, Padding::Valid).unwrap().shape(), vec![3, 3, 2]);
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        let g = Graph::new();
        let x = g.constant(ArrayD::ones(IxDyn(&[1, 2, 2])));
        let k = g.constant(ArrayD::ones(IxDyn(&[1, 1, 3, 3])));
        assert!(matches!(
            conv2d(x, k, 1, Padding::Valid).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn resize_constant_images() {
        let g = Graph::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 7.0));
        let half = resize_bilinear(x, false).unwrap();
        assert_eq!(*half.value(), ArrayD::from_elem(IxDyn(&[1, 2, 2]), 7.0));
        let back = resize_bilinear(resize_bilinear(x, true).unwrap(), false).unwrap();
        assert_eq!(*back.value(), *x.value());
        let odd = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 4])));
        assert!(resize_bilinear(odd, false).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(0);
        store.zeros("a", &[1]).unwrap();
        assert!(store.zeros("a", &[2]).is_err());
    }

    #[test]
    fn kaiming_is_seeded() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        let ia = a.kaiming("w", &[4, 4], 4).unwrap();
        let ib = b.kaiming("w", &[4, 4], 4).unwrap();
        assert_eq!(a.get(ia), b.get(ib));
        assert!(a.get(ia).iter().all(|v| v.abs() <= (1.5f64).sqrt()));
    }
}
