//! Gradient checks and throughput benchmarks run by the `gradcheck` and
//! `bench` commands.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::aca::{aggregate_relevant_features, query_geometry, AcaConfig, AcaWeights, Weighting};
use crate::error::Result;
use crate::gcmf::{linear_attention, softmax_attention, ConvGru, CrossAttention, GcmfBlock, Scale, SelfAttention, TokenMap};
use crate::geometry::{CameraModel, DepthMap, PointSet};
use crate::image_branch::{FeatureExtractor, Hourglass, Widths};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::model::{DepthModel, PreparedSample};
use crate::pipeline::scene::{generate_scene, SceneSpec};
use crate::point_branch::{chamfer_var, point_loss, PointBranch, DISPLACEMENT_WEIGHT};
use crate::spatial::{brute_force_ball_query, brute_force_knn, SpatialIndex};
use crate::tensor::gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{Graph, LayerNorm, ParamStore, Tensor, Var};

/// Largest relative error a gradient check may report.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// One finished gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCase {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl GradientCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADIENT_TOLERANCE
    }
}

pub fn gradient_csv(cases: &[GradientCase]) -> String {
    let mut s = String::from("case,seed,coordinates,refined,max_rel_error,pass\n");
    for c in cases {
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{}",
            c.name,
            c.seed,
            c.report.coordinates,
            c.report.refined,
            c.report.max_rel_error,
            c.passed()
        );
    }
    s
}

struct Draw(Xoshiro256PlusPlus);

impl Draw {
    fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Values in ±[0.05, 1], away from the kinks of relu and abs.
    fn signed(&mut self, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let m = self.0.gen_range(0.05..1.0);
            if self.0.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || self.0.gen_range(0.2..2.0))
    }
}

/// Scalar read-out with fixed random weights so every output element
/// contributes a distinct gradient.
fn probe<'g>(v: Var<'g>, seed: u64) -> Var<'g> {
    let w = Draw::new(seed ^ 0xA5A5).signed(&v.shape());
    v.mul(v.graph().constant(w)).sum()
}

type OpFn = for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>;

fn op_case(name: &str, seed: u64, f: OpFn, inputs: Vec<Tensor>) -> Result<GradientCase> {
    let report = grad_check(
        move |g, v| Ok(probe(f(g, v)?, seed)),
        &inputs,
        DEFAULT_STEP,
    )?;
    Ok(GradientCase {
        name: format!("op/{name}"),
        seed,
        report,
    })
}

/// Every differentiable primitive on small random inputs.
pub fn op_gradient_cases(seed: u64) -> Result<Vec<GradientCase>> {
    let mut d = Draw::new(seed);
    let s34 = [3, 4];
    let mut cases = Vec::new();
    let unary: [(&str, OpFn); 15] = [
        ("sigmoid", |_, v| Ok(v[0].sigmoid())),
        ("tanh", |_, v| Ok(v[0].tanh())),
        ("elu", |_, v| Ok(v[0].elu())),
        ("relu", |_, v| Ok(v[0].relu())),
        ("softplus", |_, v| Ok(v[0].softplus())),
        ("exp", |_, v| Ok(v[0].exp())),
        ("abs", |_, v| Ok(v[0].abs())),
        ("square", |_, v| Ok(v[0].square())),
        ("clamp_min", |_, v| Ok(v[0].clamp_min(0.0))),
        ("stabilize", |_, v| Ok(v[0].stabilize(0.0, 1e-3))),
        ("scale", |_, v| Ok(v[0].scale(-2.5))),
        ("add_scalar", |_, v| Ok(v[0].add_scalar(0.7))),
        ("one_minus", |_, v| Ok(v[0].one_minus())),
        ("softmax", |_, v| Ok(v[0].softmax())),
        ("normalize_rows", |_, v| Ok(v[0].normalize_rows(1e-5))),
    ];
    for (name, f) in unary {
        cases.push(op_case(name, seed, f, vec![d.signed(&s34)])?);
    }
    let positive: [(&str, OpFn); 3] = [
        ("ln", |_, v| Ok(v[0].ln())),
        ("sqrt", |_, v| Ok(v[0].sqrt())),
        ("inv_softplus", |_, v| Ok(v[0].inv_softplus())),
    ];
    for (name, f) in positive {
        cases.push(op_case(name, seed, f, vec![d.positive(&s34)])?);
    }
    let binary: [(&str, OpFn); 4] = [
        ("add", |_, v| Ok(v[0].add(v[1]))),
        ("sub", |_, v| Ok(v[0].sub(v[1]))),
        ("mul", |_, v| Ok(v[0].mul(v[1]))),
        ("div", |_, v| Ok(v[0].div(v[1]))),
    ];
    for (name, f) in binary {
        let rhs = |d: &mut Draw, shape: &[usize]| if name == "div" { d.positive(shape) } else { d.signed(shape) };
        cases.push(op_case(name, seed, f, vec![d.signed(&s34), rhs(&mut d, &s34)])?);
        let row = rhs(&mut d, &[4]);
        cases.push(op_case(&format!("{name}_row_broadcast"), seed, f, vec![d.signed(&s34), row])?);
        let col = rhs(&mut d, &[3, 1]);
        cases.push(op_case(&format!("{name}_column_broadcast"), seed, f, vec![d.signed(&s34), col])?);
    }
    let shaped: [(&str, OpFn, Vec<Vec<usize>>); 14] = [
        ("matmul", |_, v| Ok(v[0].matmul(v[1])), vec![vec![3, 4], vec![4, 2]]),
        ("permute", |_, v| Ok(v[0].permute(&[2, 0, 1])), vec![vec![2, 3, 4]]),
        ("transpose", |_, v| Ok(v[0].t()), vec![vec![3, 4]]),
        ("reshape", |_, v| Ok(v[0].reshape(&[2, 6])), vec![vec![3, 4]]),
        ("broadcast_to", |_, v| Ok(v[0].broadcast_to(&[3, 4])), vec![vec![1, 4]]),
        ("slice_axis", |_, v| Ok(v[0].slice_axis(1, 1, 3)), vec![vec![3, 4]]),
        ("gather_rows", |_, v| Ok(v[0].gather_rows(Arc::new(vec![2, 0, 2, 1, 2]))), vec![vec![3, 4]]),
        ("sum", |_, v| Ok(v[0].sum()), vec![vec![3, 4]]),
        ("mean", |_, v| Ok(v[0].mean()), vec![vec![3, 4]]),
        ("sum_axis", |_, v| Ok(v[0].sum_axis(1)), vec![vec![2, 3, 4]]),
        ("max_rows", |_, v| Ok(v[0].max_rows()), vec![vec![5, 4]]),
        ("concat_rows", |_, v| Ok(Var::concat(&[v[0], v[1]], 0)), vec![vec![2, 4], vec![3, 4]]),
        ("concat_columns", |_, v| Ok(Var::concat(&[v[0], v[1]], 1)), vec![vec![3, 2], vec![3, 4]]),
        ("chamfer", |_, v| chamfer_var(v[0], &[[0.1, 0.2, 0.3], [-0.4, 0.0, 0.5], [0.3, -0.2, -0.1]]), vec![vec![4, 3]]),
    ];
    for (name, f, shapes) in shaped {
        let inputs = shapes.iter().map(|s| d.signed(s)).collect();
        cases.push(op_case(name, seed, f, inputs)?);
    }
    let spatial: [(&str, OpFn, Vec<Vec<usize>>); 5] = [
        ("conv2d", |_, v| Ok(v[0].conv2d_raw(v[1], 1, 1)), vec![vec![2, 5, 4], vec![3, 2, 3, 3]]),
        ("conv2d_stride2", |_, v| Ok(v[0].conv2d_raw(v[1], 2, 1)), vec![vec![2, 5, 6], vec![2, 2, 3, 3]]),
        ("conv2d_1x1", |_, v| Ok(v[0].conv2d_raw(v[1], 1, 0)), vec![vec![3, 3, 4], vec![2, 3, 1, 1]]),
        ("resize_up", |_, v| Ok(v[0].resize_bilinear_to(6, 8)), vec![vec![2, 3, 4]]),
        ("resize_down", |_, v| Ok(v[0].resize_bilinear_to(2, 3)), vec![vec![2, 5, 6]]),
    ];
    for (name, f, shapes) in spatial {
        let inputs = shapes.iter().map(|s| d.signed(s)).collect();
        cases.push(op_case(name, seed, f, inputs)?);
    }
    Ok(cases)
}

/// Parameter gradients of a block, with its inputs registered as
/// parameters so their gradients are checked too.
fn block_case(
    name: &str,
    seed: u64,
    store: &mut ParamStore,
    coords: Option<usize>,
    f: impl Fn(&Graph) -> Result<Var<'_>>,
) -> Result<GradientCase> {
    let report = grad_check_params(
        store,
        &[],
        |g| Ok(probe(f(g)?, seed)),
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords_per_param: coords,
            seed,
        },
    )?;
    Ok(GradientCase {
        name: format!("block/{name}"),
        seed,
        report,
    })
}

/// Random points on a tilted plane in front of `camera`, with a depth map
/// that sees them.
fn aca_fixture(d: &mut Draw, h: usize, w: usize, n: usize) -> Result<(DepthMap, Array2<f64>, CameraModel, SpatialIndex)> {
    let camera = CameraModel::from_pinhole(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h, nalgebra::Matrix4::identity())?;
    let depth = Array2::from_shape_fn((h, w), |(v, u)| 1.0 + 0.02 * v as f64 + 0.01 * u as f64);
    let depth = DepthMap::new(depth)?;
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let u = d.0.gen_range(0.0..w as f64);
        let v = d.0.gen_range(0.0..h as f64);
        let z = 1.0 + 0.02 * v + 0.01 * u + d.0.gen_range(-0.02..0.02);
        pts.push([(u - w as f64 / 2.0) * z / w as f64, (v - h as f64 / 2.0) * z / w as f64, z]);
    }
    let conf = Array2::from_shape_fn((h, w), |_| d.0.gen_range(0.0..1.0));
    let index = SpatialIndex::build(&PointSet::new(pts)?)?;
    Ok((depth, conf, camera, index))
}

/// Attention, GRU, GCMF, ACA, point branch, hourglass and trunk.
pub fn block_gradient_cases(seed: u64) -> Result<Vec<GradientCase>> {
    let mut d = Draw::new(seed);
    let mut cases = Vec::new();

    for (name, f) in [
        ("linear_attention", linear_attention as for<'g> fn(Var<'g>, Var<'g>, Var<'g>) -> Result<Var<'g>>),
        ("softmax_attention", softmax_attention),
    ] {
        let inputs = vec![d.signed(&[5, 3]), d.signed(&[6, 3]), d.signed(&[6, 2])];
        let report = grad_check(|_, v| Ok(probe(f(v[0], v[1], v[2])?, seed)), &inputs, DEFAULT_STEP)?;
        cases.push(GradientCase {
            name: format!("block/{name}"),
            seed,
            report,
        });
    }

    let mut store = ParamStore::new(seed);
    let ln = LayerNorm::new(&mut store, "ln", 4)?;
    let x = store.add("x", d.signed(&[3, 4]))?;
    cases.push(block_case("layer_norm", seed, &mut store, None, |g| Ok(ln.forward(g.param(x))))?);

    let mut store = ParamStore::new(seed);
    let sa = SelfAttention::new(&mut store, "self", 4, true)?;
    let x = store.add("x", d.signed(&[4, 3, 2]))?;
    cases.push(block_case("self_attention", seed, &mut store, None, |g| {
        Ok(sa.forward(TokenMap::from_map(g.param(x), Scale::Half)?)?.to_map())
    })?);

    let mut store = ParamStore::new(seed);
    let ca = CrossAttention::new(&mut store, "cross", 4, 3, true)?;
    let q = store.add("q", d.signed(&[4, 3, 2]))?;
    let kv = store.add("kv", d.signed(&[3, 3, 2]))?;
    cases.push(block_case("cross_attention", seed, &mut store, None, |g| {
        let q = TokenMap::from_map(g.param(q), Scale::Half)?;
        let kv = TokenMap::from_map(g.param(kv), Scale::Half)?;
        Ok(ca.forward(q, kv)?.to_map())
    })?);

    let mut store = ParamStore::new(seed);
    let gru = ConvGru::new(&mut store, "gru", 3)?;
    let h = store.add("h", d.signed(&[3, 4, 3]))?;
    let x = store.add("x", d.signed(&[3, 4, 3]))?;
    cases.push(block_case("conv_gru", seed, &mut store, Some(12), |g| gru.forward(g.param(h), g.param(x)))?);

    let mut store = ParamStore::new(seed);
    let block = GcmfBlock::new(&mut store, "gcmf", Scale::Quarter, 4, 3, true)?;
    let f2 = store.add("feat2d", d.signed(&[4, 4, 3]))?;
    let f3 = store.add("agg3d", d.signed(&[3, 4, 3]))?;
    cases.push(block_case("gcmf", seed, &mut store, Some(12), |g| block.forward(g.param(f2), g.param(f3)))?);

    let (depth, conf, camera, index) = aca_fixture(&mut d, 4, 5, 24)?;
    let cfg = AcaConfig {
        k: 4,
        r_min: 0.05,
        r_max: 0.1,
        ..AcaConfig::default()
    };
    let geo = query_geometry(&depth, &conf, &camera, &index, &cfg)?;
    let mut store = ParamStore::new(seed);
    let weights = AcaWeights::new(&mut store, "aca", 3)?;
    let feats = store.add("point_features", d.signed(&[24, 3]))?;
    cases.push(block_case("aca", seed, &mut store, Some(12), |g| {
        Ok(aggregate_relevant_features(g, geo.as_ref(), g.param(feats), Weighting::Learned(&weights), 4, 5)?.values)
    })?);

    let mut store = ParamStore::new(seed);
    let branch = PointBranch::new(&mut store, 4)?;
    let cloud: Vec<[f64; 3]> = (0..6).map(|_| [d.0.gen(), d.0.gen(), d.0.gen()]).collect();
    let target: Vec<[f64; 3]> = (0..5).map(|_| [d.0.gen(), d.0.gen(), d.0.gen()]).collect();
    // Zero-initialized displacement heads would leave most of the branch
    // without a gradient signal; nudge them.
    for t in 0..3 {
        let id = store.id(&format!("point.step{}.displace.weight", t + 1)).expect("displace weight");
        let shape = store.get(id).shape().to_vec();
        store.set(id, d.signed(&shape).mapv(|v| 0.1 * v))?;
    }
    let cloud = PointSet::new(cloud)?;
    cases.push(block_case("point_branch", seed, &mut store, Some(8), |g| {
        let steps = branch.complete(g, &cloud)?;
        let feats = steps.iter().map(|s| s.features.sum()).reduce(|a, b| a.add(b)).unwrap();
        Ok(point_loss(&steps, &target, 0.01)?.add(feats.scale(1e-2)))
    })?);

    let mut store = ParamStore::new(seed);
    let hg = Hourglass::new(&mut store, "hg", 3)?;
    let head = store.id("hg.depth_head.kernel").expect("depth head");
    let shape = store.get(head).shape().to_vec();
    store.set(head, d.signed(&shape).mapv(|v| 0.1 * v))?;
    let reference = store.add("reference", d.positive(&[1, 8, 8]).mapv(|v| v / 4.0))?;
    let feat = store.add("features", d.signed(&[3, 8, 8]))?;
    let fused = store.add("fused", d.signed(&[3, 8, 8]))?;
    cases.push(block_case("hourglass", seed, &mut store, Some(8), |g| {
        let out = hg.forward(g.param(reference), g.param(feat), Some(g.param(fused)), 2.0)?;
        Ok(out.depth.add(out.confidence))
    })?);

    let mut store = ParamStore::new(seed);
    let trunk = FeatureExtractor::new(
        &mut store,
        "trunk",
        Widths {
            quarter: 2,
            half: 3,
            full: 3,
        },
    )?;
    let input = store.add("rgbd", d.signed(&[4, 8, 8]))?;
    cases.push(block_case("feature_extractor", seed, &mut store, Some(6), |g| {
        let maps = trunk.forward(g.param(input))?.maps;
        Ok(maps[0].sum().add(probe(maps[1], seed)).add(probe(maps[2], seed + 1)))
    })?);

    Ok(cases)
}

/// Small end-to-end configuration used by the pipeline gradient check.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.data.width = 16;
    cfg.data.height = 16;
    cfg.data.focal = 16.0;
    cfg.model.widths = Widths {
        quarter: 3,
        half: 3,
        full: 4,
    };
    cfg.model.point_features = 4;
    cfg.model.n_fixed = 24;
    cfg.aca.k = 4;
    cfg
}

/// Joint loss of the whole model with neighbor selection frozen, so the
/// loss is a smooth function of every parameter.
pub fn pipeline_gradient_case(seed: u64, coords_per_param: usize) -> Result<GradientCase> {
    let cfg = tiny_config();
    let mut model = DepthModel::new(&cfg, seed)?;
    let mut d = Draw::new(seed);
    for t in 0..3 {
        for name in [format!("point.step{}.displace.weight", t + 1), format!("stage{}.depth_head.kernel", t + 1)] {
            let id = model.store.id(&name).expect("zero-initialized parameter");
            let shape = model.store.get(id).shape().to_vec();
            model.store.set(id, d.signed(&shape).mapv(|v| 0.05 * v))?;
        }
    }
    let mut spec = SceneSpec::with_size(cfg.data.width, cfg.data.height, cfg.data.focal);
    spec.transparent_prob = 1.0;
    let scene = generate_scene(seed, &spec)?;
    let sample = PreparedSample::new(&scene, cfg.model.n_fixed, cfg.model.max_depth)?;
    let frozen = {
        let g = Graph::with_params(&model.store);
        model.forward(&g, &sample, None)?.geometry
    };
    // The forward pass reads parameters only through the graph, so the
    // store can be moved out and perturbed on its own.
    let mut store = std::mem::replace(&mut model.store, ParamStore::new(0));
    let report = grad_check_params(
        &mut store,
        &[],
        |g| {
            // The training loss treats its confidence target as a constant,
            // which finite differences cannot; read the stage outputs
            // directly and add the point loss.
            let out = model.forward(g, &sample, Some(&frozen))?;
            let mut total = g.scalar(0.0);
            for (s, st) in out.stages.iter().enumerate() {
                let s = s as u64;
                total = total.add(probe(st.depth, seed + 2 * s)).add(probe(st.confidence, seed + 2 * s + 1));
            }
            if let (Some(steps), Some(cloud)) = (&out.points, &sample.gt_cloud) {
                total = total.add(point_loss(steps, cloud, DISPLACEMENT_WEIGHT)?);
            }
            Ok(total)
        },
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords_per_param: Some(coords_per_param),
            seed,
        },
    )?;
    Ok(GradientCase {
        name: "pipeline/frozen_geometry".into(),
        seed,
        report,
    })
}

/// One row of the spatial benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBench {
    pub query: &'static str,
    pub points: usize,
    pub queries: usize,
    pub queries_per_second: f64,
    /// Fraction of queries whose result equals the exhaustive scan.
    pub agreement: f64,
}

/// k-d tree throughput against brute force on uniform random clouds.
pub fn spatial_bench(points: usize, queries: usize, k: usize, radius: f64, seed: u64) -> Result<Vec<SpatialBench>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..points).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let centers: Vec<[f64; 3]> = (0..queries).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let index = SpatialIndex::from_positions(pts.clone())?;
    let mut rows = Vec::new();
    for query in ["knn", "ball"] {
        let start = Instant::now();
        let mut results = Vec::with_capacity(queries);
        for &c in &centers {
            results.push(match query {
                "knn" => index.knn_query(c, k)?,
                _ => index.ball_query(c, radius, k)?,
            });
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        let mut agree = 0;
        for (&c, r) in centers.iter().zip(&results) {
            let oracle = match query {
                "knn" => brute_force_knn(&pts, c, k)?,
                _ => brute_force_ball_query(&pts, c, radius, k)?,
            };
            agree += usize::from(oracle == *r);
        }
        rows.push(SpatialBench {
            query,
            points,
            queries,
            queries_per_second: queries as f64 / secs,
            agreement: agree as f64 / queries.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn spatial_csv(rows: &[SpatialBench]) -> String {
    let mut s = String::from("query,points,queries,queries_per_second,oracle_agreement\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.1},{}", r.query, r.points, r.queries, r.queries_per_second, r.agreement);
    }
    s
}

/// Forward time of one attention variant at one token count.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBench {
    pub kind: &'static str,
    pub tokens: usize,
    pub dim: usize,
    pub seconds: f64,
}

/// Median forward time over `repeats` runs with `tokens` queries and keys.
pub fn time_attention(kind: &'static str, tokens: usize, dim: usize, repeats: usize, seed: u64) -> Result<AttentionBench> {
    let mut d = Draw::new(seed);
    let (q, k, v) = (d.signed(&[tokens, dim]), d.signed(&[tokens, dim]), d.signed(&[tokens, dim]));
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let start = Instant::now();
        let out = match kind {
            "softmax" => softmax_attention(q, k, v)?,
            _ => linear_attention(q, k, v)?,
        };
        std::hint::black_box(out.value());
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(AttentionBench {
        kind,
        tokens,
        dim,
        seconds: times[times.len() / 2],
    })
}

pub fn attention_csv(rows: &[AttentionBench]) -> String {
    let mut s = String::from("attention,tokens,dim,seconds,tokens_per_second\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.1}", r.kind, r.tokens, r.dim, r.seconds, r.tokens as f64 / r.seconds.max(1e-12));
    }
    s
}
