//! Gated cross-modal fusion.
//!
//! Image features at one scale are flattened into tokens, self-attend with
//! linear attention, then query the aggregated 3D features of the same
//! pixels through cross-attention. The attended map and the original
//! features meet in a single convolutional GRU step whose output feeds the
//! hourglass decoder.

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix2, Zip};

use crate::error::{Error, Result};
use crate::tensor::{elu, Conv2d, Dense, LayerNorm, ParamStore, Tensor, Var};

/// Denominators below this are shifted by [`DENOM_EPS`].
pub const DENOM_THRESHOLD: f64 = 1e-12;
pub const DENOM_EPS: f64 = 1e-6;

/// Image scale a token map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Quarter,
    Half,
    Full,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Quarter, Scale::Half, Scale::Full];

    /// Downsampling factor relative to the full image.
    pub fn divisor(self) -> usize {
        match self {
            Scale::Quarter => 4,
            Scale::Half => 2,
            Scale::Full => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Scale::Quarter => 0,
            Scale::Half => 1,
            Scale::Full => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scale::Quarter => "1/4",
            Scale::Half => "1/2",
            Scale::Full => "1/1",
        }
    }
}

/// `N×d` tokens of a `d×H×W` map in row-major pixel order.
#[derive(Debug, Clone, Copy)]
pub struct TokenMap<'g> {
    pub tokens: Var<'g>,
    pub height: usize,
    pub width: usize,
    pub scale: Scale,
}

impl<'g> TokenMap<'g> {
    pub fn from_map(map: Var<'g>, scale: Scale) -> Result<Self> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::input(format!("expected a d×H×W map, got {s:?}")));
        }
        Ok(Self {
            tokens: map.reshape(&[s[0], s[1] * s[2]]).t(),
            height: s[1],
            width: s[2],
            scale,
        })
    }

    pub fn to_map(&self) -> Var<'g> {
        let d = self.tokens.shape()[1];
        self.tokens.t().reshape(&[d, self.height, self.width])
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn check_qkv(q: &Var<'_>, k: &Var<'_>, v: &Var<'_>) -> Result<()> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] || ks[0] == 0 {
        return Err(Error::input(format!(
            "attention shapes Q {qs:?}, K {ks:?}, V {vs:?} do not agree"
        )));
    }
    Ok(())
}

/// `softmax(QKᵀ/√d)·V`.
pub fn softmax_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    check_qkv(&q, &k, &v)?;
    let d = q.shape()[1] as f64;
    Ok(q.matmul(k.t()).scale(1.0 / d.sqrt()).softmax().matmul(v))
}

/// Linear attention with feature map `φ = elu + 1`.
///
/// Evaluated as `V̄ + φ(Q)·S / φ(Q)·z` with `S = Σ_j φ(K_j)ᵀ(V_j − V̄)` and
/// `z = Σ_j φ(K_j)`. Centering on the value mean `V̄` leaves the result
/// unchanged because the attention weights sum to one, and makes a single
/// key return its value bit for bit.
///
/// One fused tape op: the forward pass streams over rows and allocates only
/// the output, so time and memory stay linear in N and M.
pub fn linear_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    check_qkv(&q, &k, &v)?;
    let (qt, kt, vt) = (q.value(), k.value(), v.value());
    let (q2, k2, v2) = (matrix(&qt), matrix(&kt), matrix(&vt));
    let (n, d) = q2.dim();
    let (m, e) = v2.dim();
    let v_mean = v2.sum_axis(Axis(0)) * (1.0 / m as f64);

    let mut s = Array2::<f64>::zeros((d, e));
    let mut z = Array1::<f64>::zeros(d);
    let mut phi = Array1::<f64>::zeros(d);
    let mut centered = Array1::<f64>::zeros(e);
    for (kr, vr) in k2.rows().into_iter().zip(v2.rows()) {
        phi.zip_mut_with(&kr, |p, &x| *p = feature(x));
        Zip::from(&mut centered).and(&vr).and(&v_mean).for_each(|c, &x, &mu| *c = x - mu);
        z += &phi;
        for (&a, mut row) in phi.iter().zip(s.rows_mut()) {
            row.scaled_add(a, &centered);
        }
    }

    let mut out = Array2::<f64>::zeros((n, e));
    let mut den = Array1::<f64>::zeros(n);
    for ((qr, mut orow), dn) in q2.rows().into_iter().zip(out.rows_mut()).zip(den.iter_mut()) {
        phi.zip_mut_with(&qr, |p, &x| *p = feature(x));
        let mut t = phi.dot(&z);
        if t < DENOM_THRESHOLD {
            t += DENOM_EPS;
        }
        *dn = t;
        for (&a, row) in phi.iter().zip(s.rows()) {
            orow.scaled_add(a, &row);
        }
        orow.zip_mut_with(&v_mean, |o, &mu| *o = mu + *o / t);
    }

    let graph = q.graph();
    Ok(graph.push_op(
        "linear_attention",
        out.into_dyn(),
        &[q, k, v],
        Box::new(move |g, p, _, need| {
            let g = matrix(g);
            let (q2, k2, v2) = (matrix(p[0]), matrix(p[1]), matrix(p[2]));
            let phi_q = q2.mapv(feature);
            let num = phi_q.dot(&s);
            let den_col = den.view().insert_axis(Axis(1));
            // d/d num and d/d den per query row
            let dnum = &g / &den_col;
            let dden = (&g * &num).sum_axis(Axis(1)) / den.mapv(|t| -t * t);
            let ds = phi_q.t().dot(&dnum);
            let dz = phi_q.t().dot(&dden);
            let dq = need[0].then(|| {
                let mut da = dnum.dot(&s.t());
                da += &dden.view().insert_axis(Axis(1)).dot(&z.view().insert_axis(Axis(0)));
                (da * q2.mapv(feature_slope)).into_dyn()
            });
            let centered = &v2 - &v_mean.view().insert_axis(Axis(0));
            let dk = need[1].then(|| {
                let dphi = centered.dot(&ds.t()) + &dz.view().insert_axis(Axis(0));
                (dphi * k2.mapv(feature_slope)).into_dyn()
            });
            let dv = need[2].then(|| {
                let mut dv = k2.mapv(feature).dot(&ds);
                let dmean = (g.sum_axis(Axis(0)) - ds.t().dot(&z)) * (1.0 / m as f64);
                dv += &dmean.view().insert_axis(Axis(0));
                dv.into_dyn()
            });
            vec![dq, dk, dv]
        }),
    ))
}

#[inline]
fn feature(x: f64) -> f64 {
    elu(x) + 1.0
}

#[inline]
fn feature_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("attention operands are 2-D")
}

/// Self-attention over one token map with residual and optional norm.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Dense,
    k: Dense,
    v: Dense,
    norm: Option<LayerNorm>,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, layer_norm: bool) -> Result<Self> {
        Ok(Self {
            q: Dense::new(store, &format!("{name}.q"), dim, dim)?,
            k: Dense::new(store, &format!("{name}.k"), dim, dim)?,
            v: Dense::new(store, &format!("{name}.v"), dim, dim)?,
            norm: if layer_norm {
                Some(LayerNorm::new(store, &format!("{name}.norm"), dim)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'g>(&self, x: TokenMap<'g>) -> Result<TokenMap<'g>> {
        let t = x.tokens;
        let att = linear_attention(self.q.forward(t)?, self.k.forward(t)?, self.v.forward(t)?)?;
        let mut y = t.add(att);
        if let Some(n) = &self.norm {
            y = n.forward(y);
        }
        Ok(TokenMap { tokens: y, ..x })
    }
}

/// Image tokens query aggregated 3D features of the same pixels.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q: Dense,
    k: Dense,
    v: Dense,
    norm: Option<LayerNorm>,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, point_dim: usize, layer_norm: bool) -> Result<Self> {
        Ok(Self {
            q: Dense::new(store, &format!("{name}.q"), dim, dim)?,
            k: Dense::new(store, &format!("{name}.k"), point_dim, dim)?,
            v: Dense::new(store, &format!("{name}.v"), point_dim, dim)?,
            norm: if layer_norm {
                Some(LayerNorm::new(store, &format!("{name}.norm"), dim)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'g>(&self, queries: TokenMap<'g>, kv: TokenMap<'g>) -> Result<TokenMap<'g>> {
        if queries.scale != kv.scale || (queries.height, queries.width) != (kv.height, kv.width) {
            return Err(Error::input(format!(
                "cross-attention between scale {} ({}×{}) and {} ({}×{})",
                queries.scale.label(),
                queries.height,
                queries.width,
                kv.scale.label(),
                kv.height,
                kv.width
            )));
        }
        let t = queries.tokens;
        let att = linear_attention(self.q.forward(t)?, self.k.forward(kv.tokens)?, self.v.forward(kv.tokens)?)?;
        let mut y = t.add(att);
        if let Some(n) = &self.norm {
            y = n.forward(y);
        }
        Ok(TokenMap { tokens: y, ..queries })
    }
}

/// Pins the update gate `z` to 0 or 1 everywhere, for testing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateOverride {
    Closed,
    Open,
}

/// Convolutional GRU cell with 3×3 kernels.
#[derive(Debug, Clone)]
pub struct ConvGru {
    z: Conv2d,
    r: Conv2d,
    h: Conv2d,
    pub gate_override: Option<GateOverride>,
}

impl ConvGru {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            z: Conv2d::new(store, &format!("{name}.z"), 2 * dim, dim, 3, 1)?,
            r: Conv2d::new(store, &format!("{name}.r"), 2 * dim, dim, 3, 1)?,
            h: Conv2d::new(store, &format!("{name}.h"), 2 * dim, dim, 3, 1)?,
            gate_override: None,
        })
    }

    /// One gated update of `h` by `x`, both `d×H×W`.
    pub fn forward<'g>(&self, h: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
        if h.shape() != x.shape() || h.shape().len() != 3 {
            return Err(Error::input(format!(
                "conv GRU state {:?} and input {:?} differ",
                h.shape(),
                x.shape()
            )));
        }
        let cand = self.candidate(h, x)?;
        let z = match self.gate_override {
            None => self.z.forward(Var::concat(&[h, x], 0))?.sigmoid(),
            Some(o) => {
                let fill = if o == GateOverride::Open { 1.0 } else { 0.0 };
                h.graph().constant(ndarray::ArrayD::from_elem(h.value().raw_dim(), fill))
            }
        };
        Ok(z.one_minus().mul(h).add(z.mul(cand)))
    }

    /// Candidate state `h̃ = tanh(W_h * [r ⊙ h, x])`.
    pub fn candidate<'g>(&self, h: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let r = self.r.forward(Var::concat(&[h, x], 0))?.sigmoid();
        Ok(self.h.forward(Var::concat(&[r.mul(h), x], 0))?.tanh())
    }
}

/// Self-attention, cross-attention and GRU fusion at one scale.
#[derive(Debug, Clone)]
pub struct GcmfBlock {
    pub self_attention: SelfAttention,
    pub cross_attention: CrossAttention,
    pub gru: ConvGru,
    pub scale: Scale,
}

impl GcmfBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scale: Scale,
        dim: usize,
        point_dim: usize,
        layer_norm: bool,
    ) -> Result<Self> {
        Ok(Self {
            self_attention: SelfAttention::new(store, &format!("{name}.self"), dim, layer_norm)?,
            cross_attention: CrossAttention::new(store, &format!("{name}.cross"), dim, point_dim, layer_norm)?,
            gru: ConvGru::new(store, &format!("{name}.gru"), dim)?,
            scale,
        })
    }

    /// Fuses `feat2d: d×H×W` with `agg3d: F×H×W`.
    pub fn forward<'g>(&self, feat2d: Var<'g>, agg3d: Var<'g>) -> Result<Var<'g>> {
        let fs = feat2d.shape();
        let a = agg3d.shape();
        if fs.len() != 3 || a.len() != 3 || fs[1..] != a[1..] {
            return Err(Error::input(format!(
                "GCMF at {}: image features {fs:?} and 3D features {a:?} are not aligned",
                self.scale.label()
            )));
        }
        let tokens = TokenMap::from_map(feat2d, self.scale)?;
        let attended = self.self_attention.forward(tokens)?;
        let kv = TokenMap::from_map(agg3d, self.scale)?;
        let fused = self.cross_attention.forward(attended, kv)?;
        self.gru.forward(feat2d, fused.to_map())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use ndarray::{ArrayD, IxDyn};

    fn t<'a>(g: &'a Graph, shape: &[usize], data: Vec<f64>) -> Var<'a> {
        g.constant(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    #[test]
    fn single_key_returns_its_value() {
        let g = Graph::new();
        let q = t(&g, &[3, 2], vec![0.3, -1.0, 2.0, 0.1, -0.5, 0.5]);
        let k = t(&g, &[1, 2], vec![0.7, -0.2]);
        let v = t(&g, &[1, 2], vec![1.25, -3.5]);
        for out in [linear_attention(q, k, v).unwrap(), softmax_attention(q, k, v).unwrap()] {
            for row in out.value().outer_iter() {
                assert_eq!(row.as_slice().unwrap(), &[1.25, -3.5]);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let g = Graph::new();
        let q = t(&g, &[1, 2], vec![0.4, 0.9]);
        let k = t(&g, &[2, 2], vec![0.1, 0.2, 0.1, 0.2]);
        let v = t(&g, &[2, 2], vec![1.0, 0.0, 3.0, 4.0]);
        let out = softmax_attention(q, k, v).unwrap();
        let vals: Vec<f64> = out.value().iter().copied().collect();
        assert!((vals[0] - 2.0).abs() < 1e-12 && (vals[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_width_rejected() {
        let g = Graph::new();
        let q = t(&g, &[1, 2], vec![0.0; 2]);
        let k = t(&g, &[1, 3], vec![0.0; 3]);
        let v = t(&g, &[1, 3], vec![0.0; 3]);
        assert!(linear_attention(q, k, v).is_err());
        assert!(softmax_attention(q, k, v).is_err());
    }

    #[test]
    fn token_round_trip() {
        let g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let m = t(&g, &[2, 3, 4], data);
        let tm = TokenMap::from_map(m, Scale::Half).unwrap();
        assert_eq!(tm.tokens.shape(), vec![12, 2]);
        assert_eq!(tm.tokens.value()[[5, 1]], 12.0 + 5.0);
        assert_eq!(*tm.to_map().value(), *m.value());
    }
}
