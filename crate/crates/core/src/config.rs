//! Experiment configuration.
//!
//! Defaults reproduce the reference protocol: 100 clients, 1000 rounds,
//! 10% client sampling, learning rate 0.01, batch size 128, one local
//! iteration, label skew `q = 0.5`, 30% malicious clients, attacks starting
//! at round 200. Attack and defense default to `none`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec};
use crate::defenses::DefenseSpec;
use crate::error::{Error, Result};
use crate::nn::{dense_stack, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Fmnist,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fmnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fmnist" => Ok(DatasetKind::Fmnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::config(format!("unknown dataset `{s}`"))),
        }
    }
}

/// Gaussian-cluster dataset used when `dataset = "synthetic"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 200,
            test_per_class: 100,
            dim: 8,
            spread: crate::data::SYNTHETIC_SPREAD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory holding the four IDX files. Defaults to `data/<dataset>`.
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Hidden layer widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub clients: usize,
    pub rounds: usize,
    pub sample_rate: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub local_iters: usize,
    pub q: f64,
    pub malicious_frac: f64,
    pub attack: AttackSpec,
    pub defense: DefenseSpec,
    pub seed: u64,
    /// Evaluate test accuracy every this many rounds (the final round is
    /// always evaluated).
    pub eval_every: usize,
    /// Attack-free rounds used to calibrate a missing clip bound.
    pub clip_calibration_rounds: usize,
    /// Train sampled clients on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            synthetic: SyntheticSpec::default(),
            hidden: vec![128, 64],
            clients: 100,
            rounds: 1000,
            sample_rate: 0.1,
            lr: 0.01,
            batch_size: 128,
            local_iters: 1,
            q: 0.5,
            malicious_frac: 0.3,
            attack: AttackSpec::default(),
            defense: DefenseSpec::default(),
            seed: 1,
            eval_every: 1,
            clip_calibration_rounds: 100,
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Mnist | DatasetKind::Fmnist => 10,
            DatasetKind::Synthetic => self.synthetic.classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.dataset {
            DatasetKind::Mnist | DatasetKind::Fmnist => 784,
            DatasetKind::Synthetic => self.synthetic.dim,
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.num_classes());
        dense_stack(&dims)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("data").join(self.dataset.name()))
    }

    /// `⌊K · sample_rate⌋` clients per round.
    pub fn clients_per_round(&self) -> usize {
        (self.clients as f64 * self.sample_rate + 1e-9).floor() as usize
    }

    /// `⌊p · K⌋` malicious clients.
    pub fn malicious_count(&self) -> usize {
        (self.malicious_frac * self.clients as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 {
            return Err(Error::config("synthetic.classes must be >= 2"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::config(format!(
                "sample_rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if self.clients_per_round() < 1 {
            return Err(Error::config(
                "sample_rate: clients * sample_rate must select at least one client",
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.local_iters == 0 {
            return Err(Error::config("local_iters must be >= 1"));
        }
        if !(self.q >= 1.0 / c as f64 - 1e-12 && self.q <= 1.0) {
            return Err(Error::config(format!(
                "q must lie in [1/C, 1] = [{}, 1], got {}",
                1.0 / c as f64,
                self.q
            )));
        }
        if self.clients < c || !self.clients.is_multiple_of(c) {
            return Err(Error::config(format!(
                "clients ({}) must be a positive multiple of the class count ({c})",
                self.clients
            )));
        }
        if !(self.malicious_frac >= 0.0 && self.malicious_frac < 1.0) {
            return Err(Error::config(format!(
                "malicious_frac must be in [0, 1), got {}",
                self.malicious_frac
            )));
        }
        if self.attack.kind != AttackKind::None && self.attack.start_round > self.rounds {
            return Err(Error::config(format!(
                "attack.start_round ({}) exceeds rounds ({})",
                self.attack.start_round, self.rounds
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be >= 1"));
        }
        if self.dataset == DatasetKind::Synthetic {
            let s = &self.synthetic;
            if s.train_per_class == 0 || s.test_per_class == 0 || s.dim == 0 {
                return Err(Error::config(
                    "synthetic sizes (train_per_class, test_per_class, dim) must be >= 1",
                ));
            }
        }
        self.attack.validate()?;
        self.defense.validate()?;
        Ok(())
    }
}
