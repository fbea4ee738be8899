//! Experiment configuration file.

use std::path::{Path, PathBuf};

use axvec_core::backend::BackendConfig;
use axvec_core::data::CorpusSpec;
use axvec_core::metrics::MetricsConfig;
use axvec_core::model::{ArchConfig, Variant};
use axvec_core::training::TrainConfig;
use axvec_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_target: 700,
            n_nontarget: 3000,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPlan {
    /// Systems trained and scored by `run`.
    pub systems: Vec<Variant>,
    /// Systems whose scores are averaged into the `fusion` system.
    pub fusion: Vec<Variant>,
    pub sweep_variant: Variant,
    pub sweep_pool_sizes: Vec<usize>,
}

impl Default for RunPlan {
    fn default() -> Self {
        Self {
            systems: Variant::ALL.to_vec(),
            fusion: vec![Variant::Acnn, Variant::Abn],
            sweep_variant: Variant::Acnn,
            sweep_pool_sizes: vec![2, 4, 6, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output root; the `--out` flag and `AXVEC_OUT` take precedence.
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub eval_corpus: CorpusSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub backend: BackendConfig,
    pub trials: TrialConfig,
    pub metrics: MetricsConfig,
    pub run: RunPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            corpus: CorpusSpec::default(),
            eval_corpus: CorpusSpec {
                num_speakers: 20,
                utts_per_speaker: 10,
                prefix: "eval".into(),
                seed: 2,
                ..CorpusSpec::default()
            },
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            backend: BackendConfig::default(),
            trials: TrialConfig::default(),
            metrics: MetricsConfig::default(),
            run: RunPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Fills derived values and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.arch.num_speakers = self.corpus.num_speakers;
        self.arch.input_dim = self.corpus.feature_dim;
        if self.eval_corpus.feature_dim != self.corpus.feature_dim {
            return Err(Error::Config(format!(
                "eval_corpus.feature_dim {} differs from corpus.feature_dim {}",
                self.eval_corpus.feature_dim, self.corpus.feature_dim
            )));
        }
        if self.eval_corpus.prefix == self.corpus.prefix {
            return Err(Error::Config("corpus and eval_corpus need different prefixes".into()));
        }
        self.corpus.validate()?;
        self.eval_corpus.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.train.crop_frames_min < self.arch.min_frames() {
            return Err(Error::Config(format!(
                "train.crop_frames_min {} is below the network's minimum input of {} frames",
                self.train.crop_frames_min,
                self.arch.min_frames()
            )));
        }
        if self.corpus.frames_min < self.arch.min_frames() || self.eval_corpus.frames_min < self.arch.min_frames() {
            return Err(Error::Config(format!(
                "corpora must have at least {} frames per utterance",
                self.arch.min_frames()
            )));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nbatch_sise = 3\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_toml(
            "[corpus]\nnum_speakers = 5\n[arch]\nvariant = \"acnn-abn\"\n",
            Path::new("x.toml"),
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(cfg.arch.num_speakers, 5);
        assert_eq!(cfg.arch.variant, Variant::AcnnAbn);
        let again = RunConfig::from_toml(&cfg.to_toml(), Path::new("r.toml")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn crops_below_the_receptive_field_are_rejected() {
        let cfg = RunConfig::from_toml("[train]\ncrop_frames_min = 10\ncrop_frames_max = 20\n", Path::new("x"))
            .unwrap();
        assert!(cfg.resolve().is_err());
    }
}
