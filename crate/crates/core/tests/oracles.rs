//! Independent reference computations checked against the library.

use approx::assert_abs_diff_eq;
use depthfuse::aca::{adaptive_radius, aggregate, aggregate_relevant_features, query_geometry, AcaConfig, Weighting};
use depthfuse::gcmf::{linear_attention, softmax_attention};
use depthfuse::geometry::{back_project, look_at, project, CameraModel, DepthMap, PointSet};
use depthfuse::pipeline::loss::{joint_loss, LossConfig};
use depthfuse::pipeline::scene::{render, SceneObject, SceneSpec, Shape};
use depthfuse::pipeline::{metrics, Metrics};
use depthfuse::point_branch::{chamfer_distance, farthest_point_indices};
use depthfuse::spatial::SpatialIndex;
use depthfuse::image_branch::StageOutput;
use depthfuse::tensor::Graph;
use nalgebra::Matrix4;
use ndarray::{arr2, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[test]
fn back_projection_matches_pinhole_formula() {
    let mut r = rng(1);
    let cam = CameraModel::from_pinhole(52.0, 49.0, 15.5, 11.25, 32, 24, Matrix4::identity()).unwrap();
    let depth = Array2::from_shape_fn((24, 32), |_| if r.gen_bool(0.8) { r.gen_range(0.3..2.0) } else { 0.0 });
    let map = DepthMap::new(depth.clone()).unwrap();
    let cloud = back_project(&map, &cam).unwrap();
    let mut i = 0;
    for v in 0..24 {
        for u in 0..32 {
            let d = depth[[v, u]];
            if d == 0.0 {
                continue;
            }
            let p = cloud.positions()[i];
            assert_abs_diff_eq!(p[0], (u as f64 - 15.5) * d / 52.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p[1], (v as f64 - 11.25) * d / 49.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p[2], d, epsilon = 1e-12);
            i += 1;
        }
    }
    assert_eq!(i, cloud.len());
}

#[test]
fn projection_inverts_back_projection_with_a_moved_camera() {
    let mut r = rng(2);
    let ext = look_at([0.4, -0.9, 0.7], [0.0, 0.1, 0.0], [0.0, 0.0, 1.0]).unwrap();
    let cam = CameraModel::from_pinhole(60.0, 60.0, 32.0, 24.0, 64, 48, ext).unwrap();
    let depth = DepthMap::new(Array2::from_shape_fn((48, 64), |_| r.gen_range(0.2..3.0))).unwrap();
    let cloud = back_project(&depth, &cam).unwrap();
    let proj = project(&cloud, &cam);
    assert_eq!(proj.behind_camera, 0);
    for (k, px) in proj.pixels.iter().enumerate() {
        let [u, v] = cloud.pixel_origin().unwrap()[proj.source_index[k]];
        assert!((px[0] - u as f64).abs() < 1e-5 && (px[1] - v as f64).abs() < 1e-5);
        assert!((px[2] - depth.get(u, v)).abs() < 1e-9);
    }
}

/// Depth along the pixel ray through `(u, v)` to the front of a sphere,
/// camera at the origin looking down +z.
fn ray_sphere(u: f64, v: f64, cam: &CameraModel, c: [f64; 3], radius: f64) -> Option<f64> {
    let d = [(u - cam.cx()) / cam.fx(), (v - cam.cy()) / cam.fy(), 1.0];
    let dd = d[0] * d[0] + d[1] * d[1] + 1.0;
    let dc = d[0] * c[0] + d[1] * c[1] + d[2] * c[2];
    let cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
    let disc = dc * dc - dd * (cc - radius * radius);
    (disc >= 0.0).then(|| (dc - disc.sqrt()) / dd)
}

#[test]
fn rendered_sphere_depth_is_the_analytic_intersection() {
    let cam = CameraModel::from_pinhole(60.0, 60.0, 32.0, 24.0, 64, 48, Matrix4::identity()).unwrap();
    let center = [0.05, -0.03, 1.2];
    let radius = 0.15;
    let objects = [SceneObject {
        shape: Shape::Sphere { center, radius },
        color: [0.8, 0.2, 0.2],
        transparent: false,
    }];
    let s = render(&cam, &objects, &SceneSpec::default(), &mut rng(0)).unwrap();
    let closed_form = center[2] - (radius * radius - center[0] * center[0] - center[1] * center[1]).sqrt();
    assert!((s.gt_depth.get(32, 24) - closed_form).abs() < 1e-9);
    let mut hits = 0;
    for v in 0..48 {
        for u in 0..64 {
            match ray_sphere(u as f64, v as f64, &cam, center, radius) {
                Some(t) => {
                    hits += 1;
                    assert!((s.gt_depth.get(u, v) - t).abs() < 1e-9, "pixel ({u}, {v})");
                }
                None => assert_eq!(s.gt_depth.get(u, v), 0.0),
            }
        }
    }
    assert!(hits > 100);
    assert_eq!(s.raw_depth, s.gt_depth);
}

fn metrics_oracle(pred: &[f64], gt: &[f64]) -> [f64; 6] {
    let n = pred.len() as f64;
    let (mut se, mut rel, mut ae) = (0.0, 0.0, 0.0);
    let mut hits = [0.0; 3];
    for i in 0..pred.len() {
        let e = pred[i] - gt[i];
        se += e * e;
        ae += e.abs();
        rel += e.abs() / gt[i];
        let ratio = if pred[i] / gt[i] > gt[i] / pred[i] { pred[i] / gt[i] } else { gt[i] / pred[i] };
        for (k, t) in [1.05, 1.10, 1.25].iter().enumerate() {
            if ratio < *t {
                hits[k] += 1.0;
            }
        }
    }
    [(se / n).sqrt(), rel / n, ae / n, 100.0 * hits[0] / n, 100.0 * hits[1] / n, 100.0 * hits[2] / n]
}

fn as_array(m: &Metrics) -> [f64; 6] {
    [m.rmse, m.rel, m.mae, m.delta[0], m.delta[1], m.delta[2]]
}

#[test]
fn metrics_match_scalar_oracle_on_ten_pixels() {
    let mut r = rng(3);
    let gt: Vec<f64> = (0..10).map(|_| r.gen_range(0.5..2.0)).collect();
    let pred: Vec<f64> = gt.iter().map(|g| g * r.gen_range(0.8..1.2)).collect();
    let m = metrics(
        &DepthMap::new(Array2::from_shape_vec((2, 5), pred.clone()).unwrap()).unwrap(),
        &DepthMap::new(Array2::from_shape_vec((2, 5), gt.clone()).unwrap()).unwrap(),
        &Array2::from_elem((2, 5), true),
    )
    .unwrap();
    for (a, b) in as_array(&m).iter().zip(metrics_oracle(&pred, &gt)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn metrics_boundary_case_is_strict() {
    let one = |v: f64| DepthMap::new(Array2::from_elem((1, 1), v)).unwrap();
    let m = metrics(&one(1.1), &one(1.0), &Array2::from_elem((1, 1), true)).unwrap();
    assert!((m.rmse - 0.1).abs() < 1e-12 && (m.rel - 0.1).abs() < 1e-12 && (m.mae - 0.1).abs() < 1e-12);
    assert_eq!(m.delta, [0.0, 0.0, 100.0]);
}

#[test]
fn softmax_attention_matches_loops() {
    let mut r = rng(4);
    let (n, m, d, dv) = (4, 6, 3, 2);
    let mk = |r: &mut Xoshiro256PlusPlus, a: usize, b: usize| Array2::from_shape_fn((a, b), |_| r.gen_range(-1.0..1.0));
    let (q, k, v) = (mk(&mut r, n, d), mk(&mut r, m, d), mk(&mut r, m, dv));
    let g = Graph::new();
    let out = softmax_attention(
        g.constant(q.clone().into_dyn()),
        g.constant(k.clone().into_dyn()),
        g.constant(v.clone().into_dyn()),
    )
    .unwrap()
    .value();
    for i in 0..n {
        let scores: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..dv {
            let want: f64 = (0..m).map(|j| e[j] / z * v[[j, c]]).sum();
            assert!((out[[i, c]] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_attention_matches_uncentered_loops() {
    let mut r = rng(5);
    let (n, m, d, dv) = (5, 7, 3, 4);
    let mk = |r: &mut Xoshiro256PlusPlus, a: usize, b: usize| Array2::from_shape_fn((a, b), |_| r.gen_range(-2.0..2.0));
    let (q, k, v) = (mk(&mut r, n, d), mk(&mut r, m, d), mk(&mut r, m, dv));
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let g = Graph::new();
    let out = linear_attention(
        g.constant(q.clone().into_dyn()),
        g.constant(k.clone().into_dyn()),
        g.constant(v.clone().into_dyn()),
    )
    .unwrap()
    .value();
    for i in 0..n {
        let w: Vec<f64> = (0..m).map(|j| (0..d).map(|c| phi(q[[i, c]]) * phi(k[[j, c]])).sum()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..dv {
            let want: f64 = (0..m).map(|j| w[j] * v[[j, c]]).sum::<f64>() / z;
            assert!((out[[i, c]] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn farthest_point_sampling_matches_greedy_max_min() {
    let mut r = rng(6);
    let pts: Vec<[f64; 3]> = (0..200).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let got = farthest_point_indices(&pts, 32);
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
    let mut want = vec![0usize];
    while want.len() < 32 {
        let next = (0..pts.len())
            .filter(|i| !want.contains(i))
            .map(|i| (want.iter().map(|&j| d2(&pts[i], &pts[j])).fold(f64::INFINITY, f64::min), i))
            .fold((f64::NEG_INFINITY, 0), |best, c| if c.0 > best.0 { c } else { best });
        want.push(next.1);
    }
    assert_eq!(got, want);
}

#[test]
fn chamfer_matches_double_loop() {
    let mut r = rng(7);
    let a: Vec<[f64; 3]> = (0..13).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let b: Vec<[f64; 3]> = (0..9).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let one_way = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    let got = chamfer_distance(&PointSet::new(a.clone()).unwrap(), &PointSet::new(b.clone()).unwrap()).unwrap();
    assert!((got - one_way(&a, &b) - one_way(&b, &a)).abs() < 1e-12);
}

#[test]
fn radius_at_default_constants() {
    for (c, r) in [(0.0, 0.10), (0.5, 0.075), (1.0, 0.05)] {
        assert!((adaptive_radius(c, 0.05, 0.1) - r).abs() < 1e-15);
    }
}

#[test]
fn weighted_sum_matches_loop() {
    let f = arr2(&[[1.0, -2.0], [0.5, 3.0], [2.0, 0.25]]);
    let w = arr2(&[[0.5, 0.1], [1.0, 0.0], [0.25, 2.0]]);
    let g = Graph::new();
    let out = aggregate(g.constant(f.clone().into_dyn()), g.constant(w.clone().into_dyn()))
        .unwrap()
        .value();
    for c in 0..2 {
        let want: f64 = (0..3).map(|k| w[[k, c]] * f[[k, c]]).sum();
        assert_eq!(out[[0, c]], want);
    }
}

#[test]
fn unit_aggregation_sums_neighbor_features() {
    let mut r = rng(8);
    let cam = CameraModel::from_pinhole(6.0, 6.0, 3.0, 2.0, 6, 4, Matrix4::identity()).unwrap();
    let depth = DepthMap::new(Array2::from_shape_fn((4, 6), |(v, u)| if (u + v) % 5 == 0 { 0.0 } else { 1.0 })).unwrap();
    let pts: Vec<[f64; 3]> = (0..40)
        .map(|_| [r.gen_range(-0.6..0.6), r.gen_range(-0.4..0.4), r.gen_range(0.9..1.1)])
        .collect();
    let index = SpatialIndex::from_positions(pts.clone()).unwrap();
    let conf = Array2::from_elem((4, 6), 0.3);
    let cfg = AcaConfig { k: 5, ..AcaConfig::default() };
    let geo = query_geometry(&depth, &conf, &cam, &index, &cfg).unwrap().unwrap();
    let feats = Array2::from_shape_fn((40, 3), |_| r.gen_range(-1.0..1.0));
    let g = Graph::new();
    let map = aggregate_relevant_features(&g, Some(&geo), g.constant(feats.clone().into_dyn()), Weighting::Unit, 4, 6)
        .unwrap()
        .values
        .value();
    for v in 0..4 {
        for u in 0..6 {
            let pix = v * 6 + u;
            for c in 0..3 {
                let want: f64 = if depth.get(u, v) > 0.0 {
                    (0..5).map(|j| feats[[geo.neighbors[pix * 5 + j], c]]).sum()
                } else {
                    0.0
                };
                assert!((map[[c, v, u]] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn joint_loss_on_a_two_by_two_case() {
    // Three stages of 2×2, weights 0.25, 0.5, 1 and τ = 0.05:
    // per stage, L1 = mean|d − g|, conf term = 0.5·mean(c − exp(−|d − g|/τ))².
    let g = Graph::new();
    let gt = arr2(&[[1.0, 2.0], [0.0, 1.5]]);
    let depth = arr2(&[[1.1, 1.9], [0.7, 1.5]]);
    let conf = arr2(&[[0.5, 0.2], [0.9, 1.0]]);
    let plane = |a: &Array2<f64>| ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), a.iter().cloned().collect()).unwrap();
    let stage = || StageOutput {
        depth: g.constant(plane(&depth)),
        confidence: g.constant(plane(&conf)),
        reference: g.constant(plane(&depth)),
    };
    let stages = [stage(), stage(), stage()];
    let gts = [gt.clone(), gt.clone(), gt.clone()];
    let terms = joint_loss(&stages, &gts, None, LossConfig { lambda: 0.01, tau: 0.05 }).unwrap();
    let e = (-0.1f64 / 0.05).exp();
    // valid pixels: (0,0), (0,1), (1,1)
    let l1 = (0.1 + 0.1 + 0.0) / 3.0;
    let conf_term = 0.5 * ((0.5 - e).powi(2) + (0.2 - e).powi(2) + 0.0) / 3.0;
    let want = (0.25 + 0.5 + 1.0) * (l1 + conf_term);
    assert!((terms.total.item() - want).abs() < 1e-9);
}
