//! Run configuration, loaded from TOML.
//!
//! Two profiles ship with the crate: `desk` (64×48 images, small clouds,
//! trains on a laptop CPU) and `paper` (320×240, 2048-point clouds).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aca::{AcaConfig, Strategy};
use crate::error::{Error, Result};
use crate::gcmf::Scale;
use crate::image_branch::Widths;

/// Named configuration presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::input(format!("unknown profile `{s}` (expected desk or paper)"))),
        }
    }
}

/// How point features reach the decoder at one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Image features only.
    Off,
    /// Image features plus a 1×1 projection of the aggregated 3D features.
    Add,
    Gcmf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Widths,
    pub point_features: usize,
    pub n_fixed: usize,
    /// Meters; depth is divided by this before entering the network.
    pub max_depth: f64,
    pub layer_norm: bool,
    /// Run the point branch at all. Off gives the image-only baseline.
    pub point_branch: bool,
    /// Scales fused with GCMF, as "1/4", "1/2", "1/1". Other scales add a
    /// projection of the 3D features when the point branch is on.
    pub gcmf: Vec<String>,
    /// Cut the gradient from the image loss into the point branch.
    pub detach_point_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    /// Weight of the point loss.
    pub lambda: f64,
    /// Error scale of the confidence target, meters.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub aca: AcaConfig,
    pub train: OptimConfig,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        TrainConfig::desk().data
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        TrainConfig::desk().model
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        TrainConfig::desk().train
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            data: DataConfig {
                width: 64,
                height: 48,
                focal: 60.0,
                train_samples: 100,
                eval_samples: 20,
                dir: PathBuf::from("data/desk"),
            },
            model: ModelConfig {
                widths: Widths::default(),
                point_features: 64,
                n_fixed: 256,
                max_depth: 3.0,
                layer_norm: true,
                point_branch: true,
                gcmf: vec!["1/4".into(), "1/2".into(), "1/1".into()],
                detach_point_features: false,
            },
            aca: AcaConfig::default(),
            train: OptimConfig {
                epochs: 40,
                lr: 1e-3,
                milestones: vec![5, 15, 25, 35],
                lr_factor: 5.0,
                lambda: 0.01,
                tau: 0.05,
            },
            out_dir: PathBuf::from("runs/desk"),
        }
    }

    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.profile = Profile::Paper;
        c.data.width = 320;
        c.data.height = 240;
        c.data.focal = 300.0;
        c.data.train_samples = 1000;
        c.data.eval_samples = 100;
        c.data.dir = PathBuf::from("data/paper");
        c.model.n_fixed = 2048;
        c.out_dir = PathBuf::from("runs/paper");
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses TOML; fields not given take the values of the file's
    /// `profile` (desk when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let profile = match value.get("profile") {
            Some(p) => p
                .as_str()
                .ok_or_else(|| Error::config("`profile` must be a string"))?
                .parse()?,
            None => Profile::Desk,
        };
        let mut base = toml::Value::try_from(Self::for_profile(profile))
            .map_err(|e| Error::config(e.to_string()))?;
        merge(&mut base, value);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.aca.validate()?;
        let d = &self.data;
        crate::image_branch::check_divisible(d.height, d.width)
            .map_err(|e| Error::config(e.to_string()))?;
        if !(d.focal > 0.0) {
            return Err(Error::config("focal length must be positive"));
        }
        let m = &self.model;
        if m.point_features == 0 || m.n_fixed == 0 {
            return Err(Error::config("point feature width and N_fixed must be positive"));
        }
        if [m.widths.quarter, m.widths.half, m.widths.full].contains(&0) {
            return Err(Error::config("channel widths must be positive"));
        }
        if !(m.max_depth > 0.0) {
            return Err(Error::config("max_depth must be positive"));
        }
        self.gcmf_scales()?;
        let t = &self.train;
        if !(t.lambda >= 0.0) || !t.lambda.is_finite() {
            return Err(Error::config(format!("λ must be finite and ≥ 0, got {}", t.lambda)));
        }
        if t.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lr milestones must be strictly ascending"));
        }
        if !(t.lr > 0.0) || !(t.lr_factor > 0.0) || !(t.tau > 0.0) {
            return Err(Error::config("lr, lr_factor and tau must be positive"));
        }
        Ok(())
    }

    fn gcmf_scales(&self) -> Result<Vec<Scale>> {
        self.model.gcmf.iter().map(|s| parse_scale(s)).collect()
    }

    /// Fusion mode per scale, ordered quarter, half, full.
    pub fn fusion_modes(&self) -> [FusionMode; 3] {
        let scales = self.gcmf_scales().unwrap_or_default();
        Scale::ALL.map(|s| {
            if !self.model.point_branch {
                FusionMode::Off
            } else if scales.contains(&s) {
                FusionMode::Gcmf
            } else {
                FusionMode::Add
            }
        })
    }

    /// Applies a `--gcmf` value: `baseline` (no point branch), `none` (point
    /// branch with additive fusion only), `all`, or a comma list of scales.
    pub fn set_gcmf_flag(&mut self, flag: &str) -> Result<()> {
        match flag {
            "baseline" => {
                self.model.point_branch = false;
                self.model.gcmf.clear();
            }
            "none" | "" => {
                self.model.point_branch = true;
                self.model.gcmf.clear();
            }
            "all" => {
                self.model.point_branch = true;
                self.model.gcmf = Scale::ALL.iter().map(|s| s.label().to_string()).collect();
            }
            list => {
                let scales = list
                    .split(',')
                    .map(|s| parse_scale(s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.model.point_branch = true;
                self.model.gcmf = scales.iter().map(|s| s.label().to_string()).collect();
            }
        }
        Ok(())
    }

    pub fn set_aca_flag(&mut self, flag: &str) -> Result<()> {
        self.aca.strategy = flag.parse::<Strategy>()?;
        Ok(())
    }

    /// Learning rate for `epoch` under the multi-step schedule.
    pub fn lr(&self, epoch: usize) -> f64 {
        crate::tensor::MultiStepLr {
            base: self.train.lr,
            milestones: self.train.milestones.clone(),
            factor: self.train.lr_factor,
        }
        .lr(epoch)
    }

    /// Hash of everything that shapes the network's parameters and forward
    /// pass. Stored in checkpoints.
    pub fn model_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(toml::to_string(&self.model).expect("model config serializes"));
        h.update(toml::to_string(&self.aca).expect("aca config serializes"));
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

pub fn parse_scale(s: &str) -> Result<Scale> {
    match s {
        "1/4" => Ok(Scale::Quarter),
        "1/2" => Ok(Scale::Half),
        "1/1" | "1" => Ok(Scale::Full),
        _ => Err(Error::input(format!("unknown scale `{s}` (expected 1/4, 1/2 or 1/1)"))),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.fusion_modes(), [FusionMode::Gcmf; 3]);
    }

    #[test]
    fn partial_file_inherits_profile() {
        let c = TrainConfig::from_toml("profile = \"paper\"\n[model]\nn_fixed = 512\n").unwrap();
        assert_eq!((c.data.width, c.model.n_fixed), (320, 512));
        assert!(TrainConfig::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("[train]\nmilestones = [5, 3]\n").is_err());
    }

    #[test]
    fn gcmf_flags_map_to_modes() {
        use FusionMode::*;
        let mut c = TrainConfig::desk();
        c.set_gcmf_flag("baseline").unwrap();
        assert_eq!(c.fusion_modes(), [Off; 3]);
        c.set_gcmf_flag("none").unwrap();
        assert_eq!(c.fusion_modes(), [Add; 3]);
        c.set_gcmf_flag("1/4,1/2").unwrap();
        assert_eq!(c.fusion_modes(), [Gcmf, Gcmf, Add]);
        assert!(c.set_gcmf_flag("1/3").is_err());
    }

    #[test]
    fn hash_tracks_model_only() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.n_fixed = 128;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
