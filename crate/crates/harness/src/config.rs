//! TOML run configuration with `[network]`, `[train]` and `[data]` sections.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ddt_core::NetworkConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchStage {
    /// First iteration that uses this crop side.
    pub start: u64,
    pub side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Progressive crop schedule, sorted by `start`, first stage at 0.
    pub patch_schedule: Vec<PatchStage>,
    /// Uniformly sampled flips and quarter turns.
    pub augment: bool,
    pub seed: u64,
    /// Per-sample σ is uniform in this range (0–255 scale).
    pub sigma_range: [f64; 2],
    /// Fresh noise every iteration; when false each image keeps one fixed
    /// noise field for the whole run.
    pub resample_noise: bool,
    pub log_every: u64,
    /// Periodic checkpoint cadence in iterations; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Write elapsed seconds to the metrics log; when false the column holds
    /// 0 so that logs of identical runs are byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            lr_init: 3e-4,
            lr_final: 1e-6,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            eps: 1e-8,
            batch_size: 4,
            patch_schedule: vec![PatchStage { start: 0, side: 64 }],
            augment: true,
            seed: 0,
            sigma_range: [0.0, 50.0],
            resample_noise: true,
            log_every: 50,
            checkpoint_every: 0,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Crop side in effect at iteration `it`.
    pub fn patch_side(&self, it: u64) -> usize {
        self.patch_schedule
            .iter()
            .rev()
            .find(|s| s.start <= it)
            .map_or(self.patch_schedule[0].side, |s| s.side)
    }

    pub fn max_patch(&self) -> usize {
        self.patch_schedule
            .iter()
            .map(|s| s.side)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_init) {
            return bad(format!(
                "need 0 <= lr_final ({}) <= lr_init ({})",
                self.lr_final, self.lr_init
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return bad("beta1, beta2 must lie in [0, 1) and eps must be positive".into());
        }
        let [lo, hi] = self.sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "sigma_range [{lo}, {hi}] must satisfy 0 <= lo <= hi"
            ));
        }
        if self.patch_schedule.first().map(|s| s.start) != Some(0) {
            return bad("patch_schedule must start at iteration 0".into());
        }
        if self
            .patch_schedule
            .windows(2)
            .any(|w| w[0].start >= w[1].start)
        {
            return bad("patch_schedule starts must be strictly increasing".into());
        }
        let m = net.size_multiple();
        if let Some(s) = self
            .patch_schedule
            .iter()
            .find(|s| s.side == 0 || s.side % m != 0)
        {
            return bad(format!(
                "patch side {} is not a positive multiple of {m} required by the network",
                s.side
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of clean training images; procedural images are used when
    /// absent.
    pub train_dir: Option<PathBuf>,
    pub procedural_images: usize,
    pub procedural_size: usize,
    /// Directory of clean test images for `eval`; procedural held-out images
    /// otherwise.
    pub test_dir: Option<PathBuf>,
    pub test_images: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            procedural_images: 8,
            procedural_size: 128,
            test_dir: None,
            test_images: 4,
            test_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate(&self.network)?;
        if self.data.train_dir.is_none() && self.data.procedural_size < self.train.max_patch() {
            return Err(HarnessError::Config(format!(
                "procedural_size {} is smaller than the largest patch {}",
                self.data.procedural_size,
                self.train.max_patch()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `DDT_SEED` overrides the configured seed when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("DDT_SEED") {
            self.train.seed = v.parse().map_err(|_| {
                HarnessError::Config(format!("DDT_SEED={v} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[network]\nbase_chanels = 8\n",
            "[train]\nlr = 1\n",
            "[extra]\n",
        ] {
            assert!(
                matches!(Config::from_toml(text), Err(HarnessError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = Config::from_toml(
            "[network]\nbase_channels = 8\nheads = [1, 1, 2, 2]\np_loc = 4\np_glob = 4\n\
             [train]\niterations = 10\npatch_schedule = [{ start = 0, side = 32 }, { start = 5, side = 64 }]\n",
        )
        .unwrap();
        assert_eq!(cfg.network.base_channels, 8);
        assert_eq!(cfg.train.patch_side(4), 32);
        assert_eq!(cfg.train.patch_side(5), 64);
        assert_eq!(cfg.train.lr_init, 3e-4);
    }

    #[test]
    fn patch_divisibility_checked_at_load() {
        let text = "[train]\npatch_schedule = [{ start = 0, side = 48 }]\n";
        let err = Config::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("multiple of 64"), "{err}");
    }

    #[test]
    fn inverted_lr_rejected() {
        assert!(Config::from_toml("[train]\nlr_init = 1e-6\nlr_final = 1e-3\n").is_err());
    }
}
