//! Training loop, persistence and fusion wiring on a tiny configuration.

use depthfuse::pipeline::checkpoint::Checkpoint;
use depthfuse::pipeline::diagnostics::tiny_config;
use depthfuse::pipeline::io::{load_sample, read_depth, save_sample, write_depth};
use depthfuse::pipeline::loss::{joint_loss, LossConfig};
use depthfuse::pipeline::scene::split_seeds;
use depthfuse::pipeline::train::{complete_files, iterations_csv, prepare_all, scene_spec, synthetic_split};
use depthfuse::pipeline::{generate_scene, DepthModel, FusionMode, PreparedSample, TrainConfig, Trainer};
use depthfuse::tensor::Graph;
use depthfuse::Error;

fn tiny_data(cfg: &TrainConfig, n: usize) -> Vec<PreparedSample> {
    let mut spec = scene_spec(cfg);
    spec.transparent_prob = 0.9;
    let scenes: Vec<_> = split_seeds(cfg.seed, n, false)
        .into_iter()
        .map(|s| generate_scene(s, &spec).unwrap())
        .collect();
    prepare_all(cfg, &scenes).unwrap()
}

#[test]
fn baseline_never_runs_the_point_branch() {
    let mut cfg = tiny_config();
    cfg.set_gcmf_flag("baseline").unwrap();
    assert_eq!(cfg.fusion_modes(), [FusionMode::Off; 3]);
    let data = tiny_data(&cfg, 2);
    let mut t = Trainer::new(cfg).unwrap();
    for s in &data {
        t.step(s, 1e-3).unwrap();
    }
    assert_eq!(t.model.point_branch_calls(), 0);
    assert!(t.iterations.iter().all(|r| r.point_loss.is_nan()));
}

#[test]
fn fusion_rows_map_to_modes() {
    use FusionMode::*;
    let mut cfg = tiny_config();
    for (flag, modes) in [
        ("none", [Add, Add, Add]),
        ("1/4", [Gcmf, Add, Add]),
        ("1/4,1/2", [Gcmf, Gcmf, Add]),
        ("all", [Gcmf, Gcmf, Gcmf]),
    ] {
        cfg.set_gcmf_flag(flag).unwrap();
        assert_eq!(cfg.fusion_modes(), modes, "{flag}");
    }
}

#[test]
fn stages_refine_the_previous_stage() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg, 1);
    let model = DepthModel::new(&cfg, 3).unwrap();
    let g = Graph::with_params(&model.store);
    let out = model.forward(&g, &data[0], None).unwrap();
    let max = cfg.model.max_depth;
    let r0 = out.stages[0].reference.value();
    for (a, b) in r0.iter().zip(data[0].quarter_reference.iter()) {
        assert_eq!(*a, b / max);
    }
    for s in 1..3 {
        let (h, w) = (out.stages[s].depth.shape()[1], out.stages[s].depth.shape()[2]);
        let want = out.stages[s - 1].depth.resize_bilinear_to(h, w).scale(1.0 / max).value();
        assert_eq!(*out.stages[s].reference.value(), *want);
    }
    // Zero-initialized heads reproduce the (floored) reference.
    let d0 = out.stages[0].depth.value();
    for (d, r) in d0.iter().zip(r0.iter()) {
        assert!((d / max - r.max(1e-3)).abs() < 1e-12);
    }
}

#[test]
fn point_term_decomposes_exactly() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg, 1);
    let mut model = DepthModel::new(&cfg, 5).unwrap();
    // displacement layers start at zero; move the points so both point terms are live
    for t in 1..=3 {
        let id = model.store.id(&format!("point.step{t}.displace.weight")).unwrap();
        let mut k = 0.0;
        model.store.get_mut(id).mapv_inplace(|_| {
            k += 1.0;
            0.05 * (k * 0.7f64).sin()
        });
    }
    let g = Graph::with_params(&model.store);
    let out = model.forward(&g, &data[0], None).unwrap();
    let steps = out.points.as_ref().unwrap();
    let cloud = data[0].gt_cloud.as_ref().unwrap();
    let with = joint_loss(&out.stages, &data[0].gt, Some((steps, cloud)), LossConfig { lambda: 0.01, tau: 0.05 }).unwrap();
    let without = joint_loss(&out.stages, &data[0].gt, Some((steps, cloud)), LossConfig { lambda: 0.0, tau: 0.05 }).unwrap();
    let p = with.point.unwrap().item();
    assert_eq!(without.total.item(), with.image.item());
    assert_eq!(with.total.item(), with.image.item() + 0.01 * p);
    assert!(p > 0.0);
}

fn point_params_after_steps(detach: bool) -> (Vec<f64>, Vec<f64>) {
    let mut cfg = tiny_config();
    cfg.train.lambda = 0.0;
    cfg.model.detach_point_features = detach;
    let data = tiny_data(&cfg, 2);
    let mut t = Trainer::new(cfg).unwrap();
    let flat = |t: &Trainer| -> Vec<f64> {
        t.model
            .store
            .ids_with_prefix("point.")
            .into_iter()
            .flat_map(|id| t.model.store.get(id).iter().cloned().collect::<Vec<_>>())
            .collect()
    };
    let before = flat(&t);
    for s in &data {
        t.step(s, 1e-3).unwrap();
    }
    (before, flat(&t))
}

#[test]
fn zero_lambda_with_detached_features_freezes_the_point_branch() {
    let (before, after) = point_params_after_steps(true);
    assert_eq!(before, after);
    let (before, after) = point_params_after_steps(false);
    assert_ne!(before, after, "without detaching, the image loss must reach the point branch");
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let mut cfg = tiny_config();
    cfg.train.epochs = 3;
    cfg.train.milestones = vec![2];
    let data = tiny_data(&cfg, 3);

    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.fit(&data, None).unwrap();
    let mut b = Trainer::new(cfg.clone()).unwrap();
    b.fit(&data, None).unwrap();
    assert_eq!(iterations_csv(&a.iterations), iterations_csv(&b.iterations));

    let mut c = Trainer::new(cfg.clone()).unwrap();
    c.run_epoch(&data).unwrap();
    c.run_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.gaat");
    c.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::resume(cfg, &Checkpoint::load(&path).unwrap()).unwrap();
    resumed.fit(&data, None).unwrap();
    let tail: Vec<u64> = a.iterations[6..].iter().map(|r| r.loss.to_bits()).collect();
    let again: Vec<u64> = resumed.iterations.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(tail, again);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg, 1);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.step(&data[0], 1e-3).unwrap();
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gaat");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let mut fresh = DepthModel::new(&cfg, 99).unwrap();
    loaded.restore_params(&mut fresh.store).unwrap();
    for ((_, a), (_, b)) in fresh.store.iter().zip(t.model.store.iter()) {
        assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(loaded.config_hash().unwrap(), cfg.model_hash());
}

#[test]
fn non_finite_loss_names_the_sample() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg, 1);
    let mut t = Trainer::new(cfg).unwrap();
    let id = t.model.store.id("trunk.stem.bias").unwrap();
    t.model.store.get_mut(id).fill(f64::INFINITY);
    match t.step(&data[0], 1e-3) {
        Err(Error::Numeric(msg)) => assert!(msg.contains(&data[0].id), "{msg}"),
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}

#[test]
fn sample_files_round_trip() {
    let cfg = tiny_config();
    let scene = &synthetic_split(&cfg, false).unwrap()[0];
    let dir = tempfile::tempdir().unwrap();
    let at = dir.path().join(&scene.id);
    save_sample(&at, scene).unwrap();
    let back = load_sample(&at).unwrap();
    assert_eq!(back.id, scene.id);
    assert_eq!(back.rgb, scene.rgb);
    assert_eq!(back.mask, scene.mask);
    assert_eq!(back.camera, scene.camera);
    for (a, b) in back.gt_depth.values().iter().zip(scene.gt_depth.values()) {
        assert!((a - b).abs() <= 0.0005 + 1e-12);
    }
    for (a, b) in back.raw_depth.values().iter().zip(scene.raw_depth.values()) {
        assert!((a - b).abs() <= 0.0005 + 1e-12);
    }
}

#[test]
fn scenes_without_transparent_objects_have_clean_depth() {
    let cfg = tiny_config();
    let mut spec = scene_spec(&cfg);
    spec.transparent_prob = 0.0;
    let s = generate_scene(4, &spec).unwrap();
    assert_eq!(s.raw_depth, s.gt_depth);
    assert!(!s.mask.iter().any(|&m| m));
    let again = generate_scene(4, &spec).unwrap();
    assert_eq!(again, s);
}

#[test]
fn completion_writes_full_resolution_maps() {
    let cfg = tiny_config();
    let scene = &synthetic_split(&cfg, true).unwrap()[0];
    let dir = tempfile::tempdir().unwrap();
    save_sample(dir.path(), scene).unwrap();
    let model = DepthModel::new(&cfg, 0).unwrap();
    let out = dir.path().join("out");
    let files = complete_files(
        &model,
        &cfg,
        &dir.path().join("rgb.ppm"),
        &dir.path().join("raw_depth.pgm"),
        &dir.path().join("camera.json"),
        &out,
    )
    .unwrap();
    let depth = read_depth(&files.depth).unwrap();
    assert_eq!((depth.height(), depth.width()), (cfg.data.height, cfg.data.width));
    let conf = depthfuse::pipeline::io::read_pnm(&files.confidence).unwrap();
    assert_eq!((conf.height, conf.width, conf.maxval), (cfg.data.height, cfg.data.width, 255));
    // written depth re-reads within the millimeter quantization
    let path = out.join("again.pgm");
    write_depth(&path, &depth).unwrap();
    assert_eq!(read_depth(&path).unwrap(), depth);
}

#[test]
fn malformed_depth_file_reports_an_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.pgm");
    std::fs::write(&path, b"P5\n4 4\n65535\n\x00\x01").unwrap();
    match read_depth(&path) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 15),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shipped_configs_spell_out_the_profiles() {
    use depthfuse::pipeline::Profile;
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, profile) in [("desk.toml", Profile::Desk), ("paper.toml", Profile::Paper)] {
        let cfg = TrainConfig::load(&root.join(file)).unwrap();
        assert_eq!(cfg, TrainConfig::for_profile(profile), "{file}");
    }
}
