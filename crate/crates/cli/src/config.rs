use std::path::{Path, PathBuf};

use deformreg::dataset::DatasetConfig;
use deformreg::io::{read_json, write_json};
use deformreg::net::{AdamWConfig, LrSchedule, NetworkConfig};
use deformreg::{Error, Result};
use serde::{Deserialize, Serialize};

/// File locations. Relative paths resolve against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Preoperative CT (`.raw` with `.json` sidecar).
    pub preop: PathBuf,
    /// Segmentation mask for overlays.
    pub mask: Option<PathBuf>,
    /// Landmark list for evaluation; phantom landmarks when unset.
    pub landmarks: Option<PathBuf>,
    /// Dataset root (holds `manifest.jsonl`).
    pub data_dir: PathBuf,
    /// Training run directory (checkpoint, metrics, snapshot).
    pub run_dir: PathBuf,
    /// Checkpoint; `<run_dir>/checkpoint` when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            preop: PathBuf::from("phantom/ct.raw"),
            mask: Some(PathBuf::from("phantom/mask.raw")),
            landmarks: Some(PathBuf::from("phantom/landmarks.json")),
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Nodes per axis.
    pub size: usize,
    pub spacing_mm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 32,
            spacing_mm: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    /// Wall-clock budget; runs that hit it are not reproducible.
    pub max_seconds: Option<f64>,
    /// Stop once validation MSE is at most this fraction of the
    /// zero-predictor validation MSE.
    pub target_val_ratio: Option<f64>,
    pub deterministic: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 80,
            batch_size: 4,
            schedule: LrSchedule::desk(),
            optimizer: AdamWConfig::default(),
            max_seconds: None,
            target_val_ratio: None,
            deterministic: false,
        }
    }
}

/// Everything a run needs. `seed` is the master seed: it overrides the
/// dataset and network seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `DEFORMREG_WORKERS` or all cores when unset.
    pub workers: Option<usize>,
    pub paths: Paths,
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    /// Paper-scale values: 256×256 projections, `N_c = 6`, `C_0 = 64`,
    /// 10,000 samples, 75 epochs with a 10× drop after epoch 30.
    pub fn paper() -> Self {
        let network = NetworkConfig::paper();
        RunConfig {
            dataset: DatasetConfig {
                n: 10_000,
                detector: [network.input_size[1], network.input_size[0]],
                target_lattice: network.output_size,
                ..DatasetConfig::default()
            },
            network,
            training: TrainingConfig {
                epochs: 75,
                schedule: LrSchedule::paper(),
                ..TrainingConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c: RunConfig = read_json(path)?;
        c.resolve();
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Propagates the master seed.
    pub fn resolve(&mut self) {
        self.dataset.seed = self.seed;
        self.network.seed = self.seed;
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.run_dir.join("checkpoint"))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.network.validate()?;
        if !self.dataset.matches_network(&self.network) {
            return Err(Error::InvalidArgument(format!(
                "dataset detector {:?} / target lattice {:?} do not match network input {:?} / output {:?}",
                self.dataset.detector, self.dataset.target_lattice, self.network.input_size, self.network.output_size
            )));
        }
        if self.training.batch_size == 0 {
            return Err(Error::InvalidArgument("training.batch_size must be positive".into()));
        }
        if self.phantom.size < 3 || !(self.phantom.spacing_mm > 0.0) {
            return Err(Error::InvalidArgument(
                "phantom needs size >= 3 and positive spacing".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidArgument("workers must be positive".into()));
        }
        Ok(())
    }

    /// Copy for `dir/config.json`, with the output directory recorded as `.`
    /// so snapshots of identical runs are identical files.
    pub fn snapshot(&self, own_dir: &Path) -> Self {
        let mut c = self.clone();
        for p in [&mut c.paths.data_dir, &mut c.paths.run_dir] {
            if p.as_path() == own_dir {
                *p = PathBuf::from(".");
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        RunConfig::default().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = RunConfig::paper();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.training, TrainingConfig::default());
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let mut c = RunConfig::default();
        c.dataset.detector = [32, 32];
        assert!(c.validate().is_err());
    }
}
