//! Run configuration: one TOML file per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use denoise_tts::audio::FrontendConfig;
use denoise_tts::corpus::{ArtificialConfig, Split, ToyCorpusConfig};
use denoise_tts::model::{Granularity, ModelConfig};
use denoise_tts::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "DENOISE_TTS_OUTPUT_ROOT";
pub const WORKERS_ENV: &str = "DENOISE_TTS_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Toy,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub source: CorpusSource,
    /// Speaker subdirectories of `<id>.wav` / `<id>.lab` / `<id>.txt`.
    pub speech_dir: Option<PathBuf>,
    /// Flat directory of noise recordings.
    pub noise_dir: Option<PathBuf>,
    pub toy: ToyCorpusConfig,
    pub mixing: ArtificialConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            source: CorpusSource::Toy,
            speech_dir: None,
            noise_dir: None,
            toy: ToyCorpusConfig::default(),
            mixing: ArtificialConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: Preset::Desk }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub granularity: Granularity,
    pub fix_extractor: bool,
    pub adversarial_ctc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            granularity: Granularity::Frame,
            fix_extractor: false,
            adversarial_ctc: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub griffin_lim_iterations: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            griffin_lim_iterations: denoise_tts::synth::DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    pub max_plots: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Validation,
            max_plots: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Keys that exist on the library structs but are owned by another part of
/// the run config.
const RESERVED: &[(&[&str], &str)] = &[
    (&["train", "seed"], "use the top-level `seed`"),
    (&["corpus", "toy", "seed"], "use the top-level `seed`"),
    (&["corpus", "mixing", "seed"], "use the top-level `seed`"),
    (&["train", "fix_extractor"], "set `ablation.fix_extractor`"),
    (&["train", "use_adversarial_ctc"], "set `ablation.adversarial_ctc`"),
];

fn lookup<'a>(v: &'a toml::Value, path: &[&str]) -> Option<&'a toml::Value> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for (path, hint) in RESERVED {
            if lookup(&raw, path).is_some() {
                return Err(CliError::Config(format!("`{}` is not accepted here; {hint}", path.join("."))));
            }
        }
        let mut cfg: RunConfig = raw.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for p in [&mut cfg.corpus.speech_dir, &mut cfg.corpus.noise_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Spread the top-level seed and ablation flags into the library configs.
    pub fn sync_seeds(&mut self) {
        self.corpus.toy.seed = self.seed;
        self.corpus.mixing.seed = self.seed.wrapping_add(1);
        self.train.seed = self.seed.wrapping_add(2);
        self.train.fix_extractor = self.ablation.fix_extractor;
        self.train.use_adversarial_ctc = self.ablation.adversarial_ctc;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.frontend.validate()?;
        self.corpus.mixing.validate()?;
        self.train.validate()?;
        if self.corpus.source == CorpusSource::Directory
            && (self.corpus.speech_dir.is_none() || self.corpus.noise_dir.is_none())
        {
            return Err(CliError::Config(
                "corpus.source = \"directory\" needs corpus.speech_dir and corpus.noise_dir".into(),
            ));
        }
        if self.synth.griffin_lim_iterations == 0 {
            return Err(CliError::Config("synth.griffin_lim_iterations must be positive".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir is empty".into()));
        }
        Ok(())
    }

    /// Output directory, placed under `$DENOISE_TTS_OUTPUT_ROOT` when relative.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn model_config(&self, n_phonemes: usize, n_speakers: usize) -> ModelConfig {
        let base = ModelConfig {
            frontend: self.frontend.clone(),
            ..ModelConfig::new(n_phonemes, n_speakers)
        };
        let mut cfg = match self.model.preset {
            Preset::Paper => base,
            Preset::Desk => base.desk(),
        };
        cfg.granularity = self.ablation.granularity;
        cfg
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        let mut v = toml::Value::try_from(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        for (path, _) in RESERVED {
            let (last, parents) = path.split_last().unwrap();
            let mut t = &mut v;
            for k in parents {
                t = t.get_mut(k).expect("serialized section");
            }
            t.as_table_mut().expect("table").remove(*last);
        }
        toml::to_string_pretty(&v).map_err(|e| CliError::Runtime(e.to_string()))
    }
}
