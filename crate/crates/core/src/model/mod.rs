//! The acoustic model with its noise-condition module.
//!
//! Parameter namespaces: `backbone.`, `extractor.`, `noise_encoder.`, `ctc_head.`.

mod backbone;
mod noise;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{
    durations_from_log, length_regulate, log_duration_target, regulate_indices, Backbone, PitchQuantizer,
    VariancePredictor,
};
pub use noise::{CtcHead, Granularity, NoiseEncoder, NoiseExtractor};

use crate::audio::{silence_mel, FrontendConfig, MelSpectrogram};
use crate::corpus::{ConditionClass, Utterance};
use crate::error::{config, invalid, Error, Result};
use crate::graph::Var;
use crate::nn::layers::Ctx;
use crate::nn::ValueRange;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NAMESPACES: [&str; 4] = ["backbone.", "extractor.", "noise_encoder.", "ctc_head."];
pub const EXTRACTOR: &str = "extractor.";
pub const CTC_HEAD: &str = "ctc_head.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub predictor_filter: usize,
    pub predictor_kernel: usize,
    /// Voiced pitch bins; one more bin is reserved for unvoiced frames.
    pub pitch_bins: usize,
    pub noise_encoder_kernel: usize,
    pub unet_base_channels: usize,
    pub unet_depth: usize,
    pub ctc_layers: usize,
    pub granularity: Granularity,
}

impl ModelConfig {
    /// Full-size model for a corpus with the given inventories.
    pub fn new(n_phonemes: usize, n_speakers: usize) -> Self {
        Self {
            frontend: FrontendConfig::default(),
            n_phonemes,
            n_speakers,
            d_model: 256,
            heads: 2,
            ffn_dim: 1024,
            encoder_layers: 4,
            decoder_layers: 4,
            dropout: 0.1,
            predictor_filter: 256,
            predictor_kernel: 3,
            pitch_bins: 256,
            noise_encoder_kernel: 3,
            unet_base_channels: 32,
            unet_depth: 4,
            ctc_layers: 2,
            granularity: Granularity::Frame,
        }
    }

    /// Narrow variant for CPU-budget runs; layer counts and topology are unchanged.
    pub fn desk(self) -> Self {
        Self {
            d_model: 64,
            ffn_dim: 256,
            predictor_filter: 64,
            unet_base_channels: 8,
            ..self
        }
    }

    pub fn n_mels(&self) -> usize {
        self.frontend.n_mels
    }

    pub fn mel_range(&self) -> ValueRange {
        self.frontend.value_range()
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        let positive = [
            ("n_phonemes", self.n_phonemes),
            ("n_speakers", self.n_speakers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("predictor_filter", self.predictor_filter),
            ("pitch_bins", self.pitch_bins),
            ("unet_base_channels", self.unet_base_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(config("model.d_model must be divisible by model.heads"));
        }
        if self.predictor_kernel % 2 == 0 || self.noise_encoder_kernel % 2 == 0 {
            return Err(config("convolution kernels must be odd"));
        }
        if self.n_mels() % (1 << self.unet_depth) != 0 {
            return Err(config(format!(
                "{} mel bins cannot be halved {} times by the extractor",
                self.n_mels(),
                self.unet_depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("model.dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub extractor: NoiseExtractor,
    pub noise_encoder: NoiseEncoder,
    pub ctc_head: CtcHead,
}

/// Options for one training-mode forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub use_adversarial_ctc: bool,
    /// `None` replaces gradient reversal by the identity.
    pub lambda_grl: Option<f64>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            use_adversarial_ctc: true,
            lambda_grl: Some(1.0),
        }
    }
}

/// Scalar loss nodes for one utterance. Absent terms are not eligible.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceTerms {
    pub mel_mae: Var,
    pub mel_mssim: Var,
    pub duration: Var,
    pub pitch: Var,
    pub extractor: Option<Var>,
    pub adversarial: Option<Var>,
    /// The transcript could not fit in the available frames.
    pub adversarial_skipped: bool,
    pub mel_pred: Var,
}

/// Eval-mode predictions with ground-truth durations and pitch.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub mel: MelSpectrogram,
    pub log_durations: Vec<f64>,
    pub pitch: Vec<f64>,
    /// Extractor output on the utterance's own mel.
    pub extracted_noise: MelSpectrogram,
    /// What the noise encoder consumed.
    pub noise_input: MelSpectrogram,
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub mel: MelSpectrogram,
    pub durations: Vec<usize>,
    pub f0: Vec<f64>,
    pub noise_input: MelSpectrogram,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, &mut rng);
        let extractor = NoiseExtractor::new(&mut store, &config, &mut rng);
        let noise_encoder = NoiseEncoder::new(&mut store, &config, &mut rng);
        let ctc_head = CtcHead::new(&mut store, &config, &mut rng);
        Ok(Self {
            config,
            store,
            backbone,
            extractor,
            noise_encoder,
            ctc_head,
        })
    }

    /// Build the architecture for `config` and take every value from `tensors`.
    ///
    /// Names and shapes must match exactly; a missing or extra tensor is an error.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if tensors.len() != m.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors but the model expects {}",
                tensors.len(),
                m.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = m
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if m.store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    m.store.value(id).shape()
                )));
            }
            m.store.set(id, t.clone());
        }
        Ok(m)
    }

    /// Copy every tensor under `prefix` from `other`, which must share the architecture.
    pub fn copy_namespace(&mut self, other: &Model, prefix: &str) -> Result<()> {
        for id in other.store.ids_with_prefix(prefix).collect::<Vec<_>>() {
            let p = other.store.get(id);
            let mine = self
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("{} is missing from this model", p.name)))?;
            if self.store.value(mine).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{}: shape mismatch", p.name)));
            }
            self.store.set(mine, (*p.value).clone());
        }
        Ok(())
    }

    fn check_utterance(&self, u: &Utterance) -> Result<()> {
        if u.mel.n_mels() != self.config.n_mels() {
            return Err(invalid(format!("{}: mel has {} bins", u.id, u.mel.n_mels())));
        }
        u.validate()
    }

    /// Noise-encoder input for an utterance: ground-truth noise for paired data,
    /// extractor output for unpaired data, silence for clean data.
    fn route_noise(&self, ctx: &mut Ctx, u: &Utterance, extracted: Option<Var>) -> Result<Var> {
        Ok(match u.class {
            ConditionClass::PairedNoisy => ctx.g.constant(u.noise_mel.as_ref().unwrap().values.clone()),
            ConditionClass::UnpairedNoisy => extracted.expect("extractor output for unpaired data"),
            ConditionClass::Clean => ctx.g.constant(silence_mel(u.frames(), &self.config.frontend)?.values),
        })
    }

    /// Build all loss terms of one utterance on `ctx`.
    pub fn utterance_terms(&self, ctx: &mut Ctx, u: &Utterance, opts: ForwardOptions) -> Result<UtteranceTerms> {
        self.check_utterance(u)?;
        let t = u.frames();
        let mel = ctx.g.constant(u.mel.values.clone());

        let h = self.backbone.encode_with_speaker(ctx, &u.phoneme_ids, u.speaker_id)?;
        let dur_pred = self.backbone.duration.forward(ctx, h);
        let dur_target = Tensor::new(
            vec![u.durations.len(), 1],
            u.durations.iter().map(|&d| log_duration_target(d)).collect(),
        );
        let dur_target = ctx.g.constant(dur_target);
        let duration = ctx.g.mse(dur_pred, dur_target, None);

        let h = length_regulate(ctx, h, &u.durations)?;

        let mut extractor = None;
        let mut adversarial = None;
        let mut adversarial_skipped = false;
        let extracted = match u.class {
            ConditionClass::Clean => None,
            _ => Some(self.extractor.forward(ctx, mel)),
        };
        if let (ConditionClass::PairedNoisy, Some(e)) = (u.class, extracted) {
            let target = ctx.g.constant(u.noise_mel.as_ref().unwrap().values.clone());
            extractor = Some(ctx.g.mae(e, target, None));
        }
        if let (ConditionClass::UnpairedNoisy, Some(e), true) = (u.class, extracted, opts.use_adversarial_ctc) {
            adversarial = self.ctc_head.loss(ctx, e, &u.transcript, opts.lambda_grl);
            adversarial_skipped = adversarial.is_none();
            if adversarial_skipped {
                log::warn!("{}: transcript does not fit in {t} frames; adversarial term skipped", u.id);
            }
        }
        let noise_in = self.route_noise(ctx, u, extracted)?;
        let cond = self.noise_encoder.forward(ctx, noise_in, t, self.config.granularity)?;
        let h = ctx.g.add(h, cond);

        let pitch_pred = self.backbone.pitch.forward(ctx, h);
        let q = self.backbone.quantizer;
        let pitch_target = Tensor::new(vec![t, 1], u.pitch.f0.iter().map(|&f| q.target(f)).collect());
        let pitch_target = ctx.g.constant(pitch_target);
        let pitch = ctx.g.mae(pitch_pred, pitch_target, None);
        let h = self.backbone.add_pitch(ctx, h, &u.pitch.f0);

        let mel_pred = self.backbone.decode(ctx, h);
        let mel_mae = ctx.g.mae(mel_pred, mel, None);
        let mel_mssim = crate::nn::ssim::mssim_loss(&mut ctx.g, mel_pred, mel, self.config.mel_range(), None);
        Ok(UtteranceTerms {
            mel_mae,
            mel_mssim,
            duration,
            pitch,
            extractor,
            adversarial,
            adversarial_skipped,
            mel_pred,
        })
    }

    /// Eval-mode forward with ground-truth durations, pitch and noise routing.
    pub fn teacher_forced(&self, u: &Utterance) -> Result<TeacherForced> {
        self.check_utterance(u)?;
        let fe = &self.config.frontend;
        let mut ctx = Ctx::eval(&self.store);
        let t = u.frames();
        let mel = ctx.g.constant(u.mel.values.clone());
        let h = self.backbone.encode_with_speaker(&mut ctx, &u.phoneme_ids, u.speaker_id)?;
        let dur = self.backbone.duration.forward(&mut ctx, h);
        let h = length_regulate(&mut ctx, h, &u.durations)?;
        let extracted = self.extractor.forward(&mut ctx, mel);
        let noise_in = self.route_noise(&mut ctx, u, Some(extracted))?;
        let cond = self.noise_encoder.forward(&mut ctx, noise_in, t, self.config.granularity)?;
        let h = ctx.g.add(h, cond);
        let pitch = self.backbone.pitch.forward(&mut ctx, h);
        let h = self.backbone.add_pitch(&mut ctx, h, &u.pitch.f0);
        let mel_pred = self.backbone.decode(&mut ctx, h);
        let v = |x: Var| ctx.g.value(x).clone();
        Ok(TeacherForced {
            mel: MelSpectrogram::new(v(mel_pred), fe)?,
            log_durations: v(dur).into_data(),
            pitch: v(pitch).into_data(),
            extracted_noise: MelSpectrogram::new(v(extracted), fe)?,
            noise_input: MelSpectrogram::new(v(noise_in), fe)?,
        })
    }

    /// Inference with silence as the noise-encoder input.
    pub fn synthesize(&self, phonemes: &[usize], speaker: usize, durations: Option<&[usize]>) -> Result<SynthesisOutput> {
        let fe = &self.config.frontend;
        let mut ctx = Ctx::eval(&self.store);
        let h = self.backbone.encode_with_speaker(&mut ctx, phonemes, speaker)?;
        let durations = match durations {
            Some(d) => {
                if d.len() != phonemes.len() {
                    return Err(invalid(format!("{} durations for {} phonemes", d.len(), phonemes.len())));
                }
                d.to_vec()
            }
            None => {
                let p = self.backbone.duration.forward(&mut ctx, h);
                durations_from_log(ctx.g.value(p).data())
            }
        };
        let h = length_regulate(&mut ctx, h, &durations)?;
        let t = ctx.g.shape(h)[0];
        let silence = silence_mel(t, fe)?;
        let noise_in = ctx.g.constant(silence.values.clone());
        let cond = self.noise_encoder.forward(&mut ctx, noise_in, t, self.config.granularity)?;
        let h = ctx.g.add(h, cond);
        let p = self.backbone.pitch.forward(&mut ctx, h);
        let q = self.backbone.quantizer;
        let f0: Vec<f64> = ctx.g.value(p).data().iter().map(|&v| q.f0_from_prediction(v)).collect();
        let h = self.backbone.add_pitch(&mut ctx, h, &f0);
        let mel = self.backbone.decode(&mut ctx, h);
        Ok(SynthesisOutput {
            mel: MelSpectrogram::new(ctx.g.value(mel).clone(), fe)?,
            durations,
            f0,
            noise_input: MelSpectrogram::new(ctx.g.value(noise_in).clone(), fe)?,
        })
    }
}
