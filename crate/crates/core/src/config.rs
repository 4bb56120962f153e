//! Experiment configuration: a flat TOML key/value file. Every key is
//! optional and falls back to [`ExperimentConfig::default`]; unknown keys are
//! rejected. See `configs/default.toml` for an annotated example.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comm::{ClusterConfig, Transport};
use crate::data::{CorpusSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::models::{LstmSpec, MlpSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub checkpoints_per_epoch: usize,

    pub model: ModelKind,
    /// Hidden layer sizes of the MLP.
    pub mlp_hidden: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,

    pub num_workers: usize,
    pub block_size: usize,
    pub transport: Transport,
    /// Whole utterances per local mini-batch.
    pub batch_utterances: usize,

    pub block_momentum: f64,
    pub block_learning_rate: f64,
    pub ema_rate: f64,
    /// Track the MA/EMA shadow models.
    pub shadows: bool,

    pub learning_rate: f64,
    pub momentum: f64,
    pub reset_momentum_on_broadcast: bool,

    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub frames_per_utterance: usize,
    pub base_dim: usize,
    pub num_classes: usize,
    pub label_change_prob: f64,
    pub class_spread: f64,
    pub speaker_spread: f64,
    pub frame_noise: f64,
    pub stack: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    /// Also write every checkpoint to `<out>/checkpoints/`.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            epochs: 4,
            checkpoints_per_epoch: 4,

            model: ModelKind::Mlp,
            mlp_hidden: vec![32],
            lstm_hidden: 16,
            lstm_layers: 2,

            num_workers: 8,
            block_size: 1,
            transport: Transport::Decentralized,
            batch_utterances: 1,

            block_momentum: 0.9,
            block_learning_rate: 1.0,
            ema_rate: 0.99,
            shadows: true,

            learning_rate: 0.002,
            momentum: 0.9,
            reset_momentum_on_broadcast: false,

            num_speakers: 200,
            utterances_per_speaker: 60,
            frames_per_utterance: 30,
            base_dim: 12,
            num_classes: 8,
            label_change_prob: 0.15,
            class_spread: 0.6,
            speaker_spread: 0.6,
            frame_noise: 1.0,
            stack: 3,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,

            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("checkpoints_per_epoch", self.checkpoints_per_epoch),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("batch_utterances", self.batch_utterances),
            ("stack", self.stack),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be at least 1"));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::config("mlp_hidden", "layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.block_momentum) {
            return Err(Error::config("block_momentum", "must lie in [0, 1)"));
        }
        if !(self.block_learning_rate > 0.0 && self.block_learning_rate.is_finite()) {
            return Err(Error::config("block_learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::config("ema_rate", "must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.num_speakers < 3 {
            return Err(Error::config("num_speakers", "speaker split needs at least 3 speakers"));
        }
        if self.frames_per_utterance < self.stack {
            return Err(Error::config("frames_per_utterance", "must be at least `stack`"));
        }
        self.cluster_config().validate()?;
        self.corpus_spec().validate()?;
        self.split_spec().validate()?;
        Ok(())
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            num_workers: self.num_workers,
            block_size: self.block_size,
            transport: self.transport,
            seed: self.seed,
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            num_speakers: self.num_speakers,
            utterances_per_speaker: self.utterances_per_speaker,
            frames_per_utterance: self.frames_per_utterance,
            base_dim: self.base_dim,
            num_classes: self.num_classes,
            label_change_prob: self.label_change_prob,
            class_spread: self.class_spread,
            speaker_spread: self.speaker_spread,
            frame_noise: self.frame_noise,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.train_fraction,
            val: self.val_fraction,
            test: self.test_fraction,
        }
    }

    /// Network input is `stack` base frames wide.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let input = self.base_dim * self.stack;
        let spec = match self.model {
            ModelKind::Mlp => {
                let mut sizes = vec![input];
                sizes.extend(&self.mlp_hidden);
                sizes.push(self.num_classes);
                ModelSpec::Mlp(MlpSpec::new(sizes)?)
            }
            ModelKind::Lstm => ModelSpec::Lstm(LstmSpec::new(input, self.lstm_hidden, self.lstm_layers, self.num_classes)?),
        };
        Ok(spec)
    }
}
