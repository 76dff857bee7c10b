//! Phoneme encoder, duration predictor, length regulator, pitch predictor and
//! pitch embedding, and mel decoder.

use rand::Rng;

use super::ModelConfig;
use crate::error::{invalid, Result};
use crate::graph::Var;
use crate::nn::layers::{positional_encoding, Conv1d, Ctx, Embedding, LayerNorm, Linear};
use crate::nn::TransformerStack;
use crate::params::ParamStore;

/// Conv → ReLU → LayerNorm → dropout, twice, then a linear head to one value per row.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    head: Linear,
    dropout: f64,
}

impl VariancePredictor {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, f, k) = (cfg.d_model, cfg.predictor_filter, cfg.predictor_kernel);
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), d, f, k, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), f),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), f, f, k, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), f),
            head: Linear::new(store, &format!("{name}.head"), f, 1, rng),
            dropout: cfg.dropout,
        }
    }

    /// `[t, d] -> [t, 1]`
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for (conv, norm) in [(&self.conv1, &self.norm1), (&self.conv2, &self.norm2)] {
            h = conv.forward(ctx, h);
            h = ctx.g.relu(h);
            h = norm.forward(ctx, h);
            h = ctx.g.dropout(h, self.dropout);
        }
        self.head.forward(ctx, h)
    }
}

/// Index map of the length regulator: phoneme `i` repeated `durations[i]` times.
pub fn regulate_indices(durations: &[usize]) -> Result<Vec<usize>> {
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(invalid("durations sum to zero"));
    }
    let mut idx = Vec::with_capacity(total);
    for (i, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat(i).take(d));
    }
    Ok(idx)
}

/// Repeat row `i` of `h` `durations[i]` times.
pub fn length_regulate(ctx: &mut Ctx, h: Var, durations: &[usize]) -> Result<Var> {
    if ctx.g.shape(h)[0] != durations.len() {
        return Err(invalid(format!(
            "{} durations for {} hidden rows",
            durations.len(),
            ctx.g.shape(h)[0]
        )));
    }
    let idx = regulate_indices(durations)?;
    Ok(ctx.g.gather_rows(h, &idx))
}

/// Training target for the duration predictor.
pub fn log_duration_target(d: usize) -> f64 {
    ((d + 1) as f64).ln()
}

/// Inference rounding: never fewer than one frame per phoneme.
pub fn durations_from_log(pred: &[f64]) -> Vec<usize> {
    pred.iter()
        .map(|&p| {
            let d = (p.exp() - 1.0).round();
            if d.is_finite() && d >= 1.0 {
                d as usize
            } else {
                1
            }
        })
        .collect()
}

/// Log-spaced pitch quantiser with bin 0 reserved for unvoiced frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchQuantizer {
    pub bins: usize,
    pub f0_min: f64,
    pub f0_max: f64,
}

impl PitchQuantizer {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            bins: cfg.pitch_bins,
            f0_min: cfg.frontend.f0_min_hz,
            f0_max: cfg.frontend.f0_max_hz,
        }
    }

    fn width(&self) -> f64 {
        (self.f0_max.ln() - self.f0_min.ln()) / self.bins as f64
    }

    /// Embedding-table size including the unvoiced bin.
    pub fn table_size(&self) -> usize {
        self.bins + 1
    }

    pub fn bin(&self, f0: f64) -> usize {
        if !(f0 > 0.0) {
            return 0;
        }
        let k = ((f0.ln() - self.f0_min.ln()) / self.width()).floor();
        1 + (k.max(0.0) as usize).min(self.bins - 1)
    }

    /// Geometric centre of voiced bin `k` (1-based); 0 for the unvoiced bin.
    pub fn center(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        (self.f0_min.ln() + (k as f64 - 0.5) * self.width()).exp()
    }

    /// Regression target: log-Hz for voiced frames, 0 for unvoiced.
    pub fn target(&self, f0: f64) -> f64 {
        if f0 > 0.0 {
            f0.ln()
        } else {
            0.0
        }
    }

    /// Inverse of [`Self::target`]; predictions below half of `ln f0_min` are unvoiced.
    pub fn f0_from_prediction(&self, p: f64) -> f64 {
        if p < 0.5 * self.f0_min.ln() {
            0.0
        } else {
            p.exp()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub phoneme_embedding: Embedding,
    pub speaker_embedding: Embedding,
    pub encoder: TransformerStack,
    pub duration: VariancePredictor,
    pub pitch: VariancePredictor,
    pub pitch_embedding: Embedding,
    pub quantizer: PitchQuantizer,
    pub decoder: TransformerStack,
    pub mel_out: Linear,
    d_model: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let quantizer = PitchQuantizer::from_config(cfg);
        Self {
            phoneme_embedding: Embedding::new(store, "backbone.phoneme_embedding", cfg.n_phonemes, d, rng),
            speaker_embedding: Embedding::new(store, "backbone.speaker_embedding", cfg.n_speakers, d, rng),
            encoder: TransformerStack::new(
                store,
                "backbone.encoder",
                cfg.encoder_layers,
                d,
                cfg.heads,
                cfg.ffn_dim,
                cfg.dropout,
                rng,
            ),
            duration: VariancePredictor::new(store, "backbone.duration", cfg, rng),
            pitch: VariancePredictor::new(store, "backbone.pitch", cfg, rng),
            pitch_embedding: Embedding::new(store, "backbone.pitch_embedding", quantizer.table_size(), d, rng),
            quantizer,
            decoder: TransformerStack::new(
                store,
                "backbone.decoder",
                cfg.decoder_layers,
                d,
                cfg.heads,
                cfg.ffn_dim,
                cfg.dropout,
                rng,
            ),
            mel_out: Linear::new(store, "backbone.mel_out", d, cfg.n_mels(), rng),
            d_model: d,
        }
    }

    fn add_positions(&self, ctx: &mut Ctx, x: Var) -> Var {
        let t = ctx.g.shape(x)[0];
        let pe = ctx.g.constant(positional_encoding(t, self.d_model));
        ctx.g.add(x, pe)
    }

    /// Phoneme ids to `[p, d]` hidden states.
    pub fn encode(&self, ctx: &mut Ctx, phonemes: &[usize]) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(invalid("empty phoneme sequence"));
        }
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.phoneme_embedding.size) {
            return Err(invalid(format!("phoneme id {bad} is outside the vocabulary")));
        }
        let e = self.phoneme_embedding.forward(ctx, phonemes);
        let e = self.add_positions(ctx, e);
        Ok(self.encoder.forward(ctx, e, None))
    }

    /// Encoder output plus the speaker embedding on every row.
    pub fn encode_with_speaker(&self, ctx: &mut Ctx, phonemes: &[usize], speaker: usize) -> Result<Var> {
        if speaker >= self.speaker_embedding.size {
            return Err(invalid(format!("speaker id {speaker} is outside the speaker table")));
        }
        let h = self.encode(ctx, phonemes)?;
        let s = self.speaker_embedding.forward(ctx, &[speaker]);
        let s = ctx.g.reshape(s, &[self.d_model]);
        Ok(ctx.g.add_row(h, s))
    }

    /// Add the embedding of quantised pitch to frame-level states.
    pub fn add_pitch(&self, ctx: &mut Ctx, h: Var, f0: &[f64]) -> Var {
        assert_eq!(ctx.g.shape(h)[0], f0.len(), "pitch length differs from frame count");
        let bins: Vec<usize> = f0.iter().map(|&f| self.quantizer.bin(f)).collect();
        let e = self.pitch_embedding.forward(ctx, &bins);
        ctx.g.add(h, e)
    }

    /// Frame-level `[t, d]` states to a `[t, n_mels]` mel prediction.
    pub fn decode(&self, ctx: &mut Ctx, h: Var) -> Var {
        let h = self.add_positions(ctx, h);
        let h = self.decoder.forward(ctx, h, None);
        self.mel_out.forward(ctx, h)
    }
}
