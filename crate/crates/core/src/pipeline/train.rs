//! Training, evaluation, inference and ablation sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::aca::Strategy;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::io;
use crate::pipeline::loss::{joint_loss, LossConfig};
use crate::pipeline::metrics::{metrics, Metrics};
use crate::pipeline::model::{DepthModel, PreparedSample};
use crate::pipeline::scene::{generate_scene, split_seeds, SceneSample, SceneSpec};
use crate::tensor::{Adam, AdamConfig, Graph};

/// Losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub sample: String,
    pub lr: f64,
    pub loss: f64,
    pub image_loss: f64,
    /// Point loss before weighting; NaN when the point branch did not run.
    pub point_loss: f64,
}

/// Summary of one epoch. Metrics come from the forward passes of the
/// epoch's own steps, before each update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub metrics: Option<Metrics>,
}

/// Model, optimizer and progress of a training run.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: DepthModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let model = DepthModel::new(&cfg, cfg.seed)?;
        let adam = Adam::new(&model.store, AdamConfig::default());
        Ok(Self {
            cfg,
            model,
            adam,
            epoch: 0,
            iterations: Vec::new(),
            epochs: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        ckpt.restore_params(&mut t.model.store)?;
        t.adam.state = ckpt.restore_adam(&t.model.store)?;
        t.epoch = ckpt.epoch()? as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.store, &self.adam.state, self.epoch as u64, self.cfg.model_hash())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.cfg.train.lambda,
            tau: self.cfg.train.tau,
        }
    }

    /// One forward/backward/update on `sample`.
    pub fn step(&mut self, sample: &PreparedSample, lr: f64) -> Result<(IterationRecord, Option<Metrics>)> {
        let loss_cfg = self.loss_config();
        let (record, grads, m) = {
            let g = Graph::with_params(&self.model.store);
            let numeric = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("sample {} at epoch {}: {m}", sample.id, self.epoch)),
                other => other,
            };
            let out = self.model.forward(&g, sample, None).map_err(numeric)?;
            let points = match (&out.points, &sample.gt_cloud) {
                (Some(p), Some(c)) => Some((p.as_slice(), c.as_slice())),
                _ => None,
            };
            let terms = joint_loss(&out.stages, &sample.gt, points, loss_cfg)?;
            let loss = terms.total.item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} on sample {} at epoch {}",
                    sample.id, self.epoch
                )));
            }
            g.check_finite().map_err(|e| {
                Error::Numeric(format!("sample {} at epoch {}: {e}", sample.id, self.epoch))
            })?;
            let m = if sample.mask.iter().any(|&b| b) {
                Some(metrics(&out.stages[2].depth_map()?, &sample.gt_depth, &sample.mask)?)
            } else {
                None
            };
            let record = IterationRecord {
                epoch: self.epoch,
                iteration: self.iterations.len(),
                sample: sample.id.clone(),
                lr,
                loss,
                image_loss: terms.image.item(),
                point_loss: terms.point.map_or(f64::NAN, |p| p.item()),
            };
            let grads = g.backward(terms.total)?;
            (record, grads, m)
        };
        self.adam.step(&mut self.model.store, grads.params(), lr);
        self.iterations.push(record.clone());
        Ok((record, m))
    }

    /// Sample order for `epoch`: a shuffle seeded by the run seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `data`.
    pub fn run_epoch(&mut self, data: &[PreparedSample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        let lr = self.cfg.lr(self.epoch);
        let mut losses = Vec::with_capacity(data.len());
        let mut ms = Vec::new();
        for i in self.epoch_order(data.len(), self.epoch) {
            let (rec, m) = self.step(&data[i], lr)?;
            losses.push(rec.loss);
            ms.extend(m);
        }
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            metrics: Metrics::mean(&ms).ok(),
        };
        self.epoch += 1;
        self.epochs.push(record.clone());
        Ok(record)
    }

    /// Trains until `cfg.train.epochs` epochs are complete. With `out_dir`,
    /// writes CSV logs and a checkpoint after every epoch, and a diagnostic
    /// file when a step goes non-finite.
    pub fn fit(&mut self, data: &[PreparedSample], out_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.cfg.train.epochs {
            match self.run_epoch(data) {
                Ok(_) => {}
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = out_dir {
                        let path = dir.join("nan_dump.txt");
                        let body = format!("epoch {}\n{e}\n", self.epoch);
                        std::fs::write(&path, body).map_err(|err| Error::io(&path, err))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let Some(dir) = out_dir {
                self.write_logs(dir)?;
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(format!("epoch_{:03}.gaat", self.epoch)))?;
                ckpt.save(&dir.join("latest.gaat"))?;
            }
        }
        Ok(())
    }

    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        let path = dir.join("iterations.csv");
        std::fs::write(&path, iterations_csv(&self.iterations)).map_err(|e| Error::io(&path, e))?;
        let mut s = format!("epoch,lr,loss,{}\n", Metrics::CSV_HEADER);
        for r in &self.epochs {
            let m = r.metrics.map_or_else(|| ",,,,,".to_string(), |m| m.csv_row());
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.mean_loss, m);
        }
        let path = dir.join("epochs.csv");
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }
}

/// Per-iteration loss log. Floats use the shortest exact representation.
pub fn iterations_csv(records: &[IterationRecord]) -> String {
    let mut s = String::from("epoch,iteration,sample,lr,loss,image_loss,point_loss\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.iteration, r.sample, r.lr, r.loss, r.image_loss, r.point_loss
        );
    }
    s
}

/// Full-resolution depth (meters) and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub depth: DepthMap,
    pub confidence: Array2<f64>,
}

pub fn predict(model: &DepthModel, sample: &PreparedSample) -> Result<Prediction> {
    let g = Graph::with_params(&model.store);
    let out = model.forward(&g, sample, None)?;
    g.check_finite()?;
    Ok(Prediction {
        depth: out.stages[2].depth_map()?,
        confidence: out.stages[2].confidence_map(),
    })
}

/// Mean masked metrics over `data`. Samples with an empty mask are skipped.
pub fn evaluate(model: &DepthModel, data: &[PreparedSample]) -> Result<Metrics> {
    let mut all = Vec::with_capacity(data.len());
    for s in data.iter().filter(|s| s.mask.iter().any(|&m| m)) {
        let p = predict(model, s)?;
        all.push(metrics(&p.depth, &s.gt_depth, &s.mask)?);
    }
    Metrics::mean(&all).map_err(|_| Error::input("no sample with a non-empty mask to evaluate"))
}

/// Scene generator settings matching `cfg.data`.
pub fn scene_spec(cfg: &TrainConfig) -> SceneSpec {
    SceneSpec::with_size(cfg.data.width, cfg.data.height, cfg.data.focal)
}

/// Renders the training (`eval = false`) or evaluation split.
pub fn synthetic_split(cfg: &TrainConfig, eval: bool) -> Result<Vec<SceneSample>> {
    let count = if eval { cfg.data.eval_samples } else { cfg.data.train_samples };
    let spec = scene_spec(cfg);
    split_seeds(cfg.seed, count, eval)
        .into_iter()
        .map(|s| generate_scene(s, &spec))
        .collect()
}

pub fn prepare_all(cfg: &TrainConfig, samples: &[SceneSample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| PreparedSample::new(s, cfg.model.n_fixed, cfg.model.max_depth))
        .collect()
}

/// Loads every sample directory under `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let dirs = io::list_samples(dir)?;
    if dirs.is_empty() {
        return Err(Error::input(format!("no samples under {}", dir.display())));
    }
    dirs.iter().map(|d| io::load_sample(d)).collect()
}

/// Loads a checkpoint into a fresh model built from `cfg`. A config-hash
/// mismatch is reported through `warn` and otherwise ignored.
pub fn load_model(cfg: &TrainConfig, ckpt_path: &Path, warn: &mut dyn FnMut(String)) -> Result<DepthModel> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut model = DepthModel::new(cfg, cfg.seed)?;
    if ckpt.config_hash()? != cfg.model_hash() {
        warn(format!(
            "checkpoint {} was trained with a different configuration; using the current flags",
            ckpt_path.display()
        ));
    }
    ckpt.restore_params(&mut model.store)?;
    Ok(model)
}

/// Output paths of [`complete_files`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedFiles {
    pub depth: PathBuf,
    pub confidence: PathBuf,
}

/// Runs inference on files and writes `depth.pgm` (16-bit millimeters)
/// and `confidence.pgm` (8-bit) into `out_dir`.
pub fn complete_files(
    model: &DepthModel,
    cfg: &TrainConfig,
    rgb: &Path,
    depth: &Path,
    camera: &Path,
    out_dir: &Path,
) -> Result<CompletedFiles> {
    let rgb = io::read_rgb(rgb)?;
    let raw = io::read_depth(depth)?;
    let camera = CameraModel::load(camera)?;
    let sample = PreparedSample::from_parts("input", &rgb, &raw, &camera, None, cfg.model.n_fixed, cfg.model.max_depth)?;
    let pred = predict(model, &sample)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = CompletedFiles {
        depth: out_dir.join("depth.pgm"),
        confidence: out_dir.join("confidence.pgm"),
    };
    io::write_depth(&files.depth, &pred.depth)?;
    io::write_unit_map(&files.confidence, &pred.confidence)?;
    Ok(files)
}

/// Which ablation table to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// Baseline, +3D, GCMF at 1/4, at 1/4 and 1/2, and everywhere.
    Fusion,
    /// None, KNN, ball query and adaptive aggregation, with full GCMF.
    Strategy,
}

impl std::str::FromStr for Sweep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcmf" | "fusion" => Ok(Self::Fusion),
            "aca" | "strategy" => Ok(Self::Strategy),
            _ => Err(Error::input(format!("unknown sweep `{s}` (expected gcmf or aca)"))),
        }
    }
}

/// Row labels and configurations of a sweep, derived from `base`.
pub fn sweep_variants(base: &TrainConfig, sweep: Sweep) -> Result<Vec<(String, TrainConfig)>> {
    let mut rows = Vec::new();
    match sweep {
        Sweep::Fusion => {
            for (label, flag) in [
                ("Baseline", "baseline"),
                ("+3D", "none"),
                ("GCMF_1/4", "1/4"),
                ("GCMF_1/2", "1/4,1/2"),
                ("Full", "all"),
            ] {
                let mut c = base.clone();
                c.set_gcmf_flag(flag)?;
                rows.push((label.to_string(), c));
            }
        }
        Sweep::Strategy => {
            for (label, s) in [
                ("None", Strategy::None),
                ("KNN", Strategy::Knn),
                ("Ball Query", Strategy::FixedBall),
                ("ACA", Strategy::Adaptive),
            ] {
                let mut c = base.clone();
                c.set_gcmf_flag("all")?;
                c.aca.strategy = s;
                rows.push((label.to_string(), c));
            }
        }
    }
    Ok(rows)
}

/// One trained and evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Trains every variant of `sweep` for each seed and evaluates it.
/// `progress` sees each row as it completes.
pub fn run_sweep(
    base: &TrainConfig,
    sweep: Sweep,
    seeds: &[u64],
    train: &[PreparedSample],
    eval: &[PreparedSample],
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for (label, mut cfg) in sweep_variants(base, sweep)? {
            cfg.seed = seed;
            let mut t = Trainer::new(cfg)?;
            t.fit(train, None)?;
            let row = AblationRow {
                label,
                seed,
                metrics: evaluate(&t.model, eval)?,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("config,seed,{}\n", Metrics::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.label, r.seed, r.metrics.csv_row());
    }
    s
}
