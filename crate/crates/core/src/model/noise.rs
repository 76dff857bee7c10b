//! Noise extractor (2-D UNet over the mel image), noise encoder, and the
//! adversarial CTC head that reads extracted noise through gradient reversal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::audio::MelSpectrogram;
use crate::corpus::CharVocab;
use crate::error::{invalid, Result};
use crate::graph::Var;
use crate::nn::layers::{positional_encoding, BatchNorm, Conv1d, Conv2d3x3, Ctx, Linear};
use crate::nn::{TransformerStack, ValueRange};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How the noise condition is laid out over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One vector per frame.
    Frame,
    /// The time-mean of the frame vectors, repeated at every frame.
    Utterance,
    /// No condition; the noise input is ignored.
    None,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Frame, Granularity::Utterance, Granularity::None];

    pub fn label(self) -> &'static str {
        match self {
            Granularity::Frame => "frame",
            Granularity::Utterance => "utterance",
            Granularity::None => "none",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.label() == s)
            .ok_or_else(|| crate::error::config(format!("unknown granularity {s:?} (frame, utterance, none)")))
    }
}

fn normalized(ctx: &mut Ctx, x: Var, r: ValueRange) -> Var {
    let s = ctx.g.scale(x, 1.0 / (r.hi - r.lo));
    ctx.g.add_scalar(s, -r.lo / (r.hi - r.lo))
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: Conv2d3x3,
    bn1: BatchNorm,
    conv2: Conv2d3x3,
    bn2: BatchNorm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d3x3::new(store, &format!("{name}.conv1"), c_in, c_out, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv2d3x3::new(store, &format!("{name}.conv2"), c_out, c_out, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c_out),
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.conv1.forward(ctx, x);
        let h = ctx.g.relu(h);
        let h = self.bn1.forward(ctx, h);
        let h = self.conv2.forward(ctx, h);
        let h = ctx.g.relu(h);
        self.bn2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
struct UpLevel {
    up_conv: Conv2d3x3,
    block: ConvBlock,
}

/// Mel-domain UNet: `[t, n_mels]` noisy log-mel to `[t, n_mels]` noise log-mel.
///
/// Frequency runs along the image height and time along the width. The width is
/// padded to a multiple of `2^depth` with the log floor and cropped afterwards.
#[derive(Clone, Debug)]
pub struct NoiseExtractor {
    down: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    up: Vec<UpLevel>,
    out_weight: ParamId,
    out_bias: ParamId,
    depth: usize,
    range: ValueRange,
}

impl NoiseExtractor {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let b = cfg.unet_base_channels;
        let depth = cfg.unet_depth;
        let mut down = Vec::with_capacity(depth);
        let mut c_in = 1;
        for i in 0..depth {
            down.push(ConvBlock::new(store, &format!("extractor.down{i}"), c_in, b << i, rng));
            c_in = b << i;
        }
        let bottleneck = ConvBlock::new(store, "extractor.bottleneck", c_in, b << depth, rng);
        let mut up = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            up.push(UpLevel {
                up_conv: Conv2d3x3::new(store, &format!("extractor.up{i}.up_conv"), b << (i + 1), b << i, rng),
                block: ConvBlock::new(store, &format!("extractor.up{i}.block"), 2 * (b << i), b << i, rng),
            });
        }
        let limit = (6.0 / (b + 1) as f64).sqrt();
        let w = (0..b).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            down,
            bottleneck,
            up,
            out_weight: store.add("extractor.out.weight", Tensor::new(vec![1, b], w)),
            out_bias: store.add("extractor.out.bias", Tensor::zeros(&[1])),
            depth,
            range: cfg.mel_range(),
        }
    }

    pub fn padded_frames(&self, t: usize) -> usize {
        let m = 1 << self.depth;
        t.div_ceil(m) * m
    }

    pub fn forward(&self, ctx: &mut Ctx, mel: Var) -> Var {
        let s = ctx.g.shape(mel).to_vec();
        let (t, f) = (s[0], s[1]);
        let x = normalized(ctx, mel, self.range);
        let x = ctx.g.transpose(x);
        let x = ctx.g.reshape(x, &[1, f, t]);
        let mut h = ctx.g.resize_last(x, self.padded_frames(t), 0.0);

        let mut skips = Vec::with_capacity(self.depth);
        for block in &self.down {
            h = block.forward(ctx, h);
            skips.push(h);
            h = ctx.g.max_pool_2x2(h);
        }
        h = self.bottleneck.forward(ctx, h);
        for level in &self.up {
            let skip = skips.pop().unwrap();
            h = ctx.g.upsample_2x(h);
            h = level.up_conv.forward(ctx, h);
            let ss = ctx.g.shape(skip).to_vec();
            let hc = ctx.g.shape(h)[0];
            let a = ctx.g.reshape(skip, &[ss[0], ss[1] * ss[2]]);
            let bb = ctx.g.reshape(h, &[hc, ss[1] * ss[2]]);
            let cat = ctx.g.concat_rows(&[a, bb]);
            let cat = ctx.g.reshape(cat, &[ss[0] + hc, ss[1], ss[2]]);
            h = level.block.forward(ctx, cat);
        }
        let hs = ctx.g.shape(h).to_vec();
        let flat = ctx.g.reshape(h, &[hs[0], hs[1] * hs[2]]);
        let w = ctx.p(self.out_weight);
        let bias = ctx.p(self.out_bias);
        let y = ctx.g.matmul(w, flat);
        let y = ctx.g.add_col(y, bias);
        let y = ctx.g.reshape(y, &[1, hs[1], hs[2]]);
        let y = ctx.g.resize_last(y, t, 0.0);
        let y = ctx.g.reshape(y, &[f, t]);
        let y = ctx.g.transpose(y);
        let y = ctx.g.scale(y, self.range.hi - self.range.lo);
        ctx.g.add_scalar(y, self.range.lo)
    }

    /// Inference convenience on a plain spectrogram.
    pub fn extract(&self, store: &ParamStore, mel: &MelSpectrogram) -> MelSpectrogram {
        let mut ctx = Ctx::eval(store);
        let x = ctx.g.constant(mel.values.clone());
        let y = self.forward(&mut ctx, x);
        MelSpectrogram {
            values: ctx.g.value(y).clone(),
            ..mel.clone()
        }
    }
}

/// Noise log-mel to a per-frame condition in the model dimension.
#[derive(Clone, Debug)]
pub struct NoiseEncoder {
    conv1: Conv1d,
    conv2: Conv1d,
    proj: Linear,
    range: ValueRange,
    d_model: usize,
}

impl NoiseEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            conv1: Conv1d::new(store, "noise_encoder.conv1", cfg.n_mels(), d, cfg.noise_encoder_kernel, rng),
            conv2: Conv1d::new(store, "noise_encoder.conv2", d, d, cfg.noise_encoder_kernel, rng),
            proj: Linear::new(store, "noise_encoder.proj", d, d, rng),
            range: cfg.mel_range(),
            d_model: d,
        }
    }

    /// `[t, n_mels] -> [t, d]` laid out according to `granularity`.
    pub fn forward(&self, ctx: &mut Ctx, noise: Var, target_frames: usize, granularity: Granularity) -> Result<Var> {
        let t = ctx.g.shape(noise)[0];
        if t != target_frames {
            return Err(invalid(format!(
                "noise input has {t} frames but the target has {target_frames}"
            )));
        }
        if granularity == Granularity::None {
            return Ok(ctx.g.constant(Tensor::zeros(&[t, self.d_model])));
        }
        let x = normalized(ctx, noise, self.range);
        let h = self.conv1.forward(ctx, x);
        let h = ctx.g.relu(h);
        let h = self.conv2.forward(ctx, h);
        let h = ctx.g.relu(h);
        let h = self.proj.forward(ctx, h);
        Ok(match granularity {
            Granularity::Utterance => {
                let m = ctx.g.mean_rows(h);
                ctx.g.gather_rows(m, &vec![0; t])
            }
            _ => h,
        })
    }
}

/// Character classifier over extracted noise, trained with CTC.
#[derive(Clone, Debug)]
pub struct CtcHead {
    input: Linear,
    encoder: TransformerStack,
    output: Linear,
    range: ValueRange,
    d_model: usize,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            input: Linear::new(store, "ctc_head.input", cfg.n_mels(), d, rng),
            encoder: TransformerStack::new(
                store,
                "ctc_head.encoder",
                cfg.ctc_layers,
                d,
                cfg.heads,
                cfg.ffn_dim,
                cfg.dropout,
                rng,
            ),
            output: Linear::new(store, "ctc_head.output", d, CharVocab::SIZE, rng),
            range: cfg.mel_range(),
            d_model: d,
        }
    }

    /// Per-frame character log-probabilities `[t, vocab]`.
    ///
    /// With `grl = Some(λ)` the input passes through gradient reversal; `None`
    /// is the plain identity path.
    pub fn log_probs(&self, ctx: &mut Ctx, noise: Var, grl: Option<f64>) -> Var {
        let x = match grl {
            Some(l) => ctx.g.gradient_reversal(noise, l),
            None => noise,
        };
        let x = normalized(ctx, x, self.range);
        let h = self.input.forward(ctx, x);
        let t = ctx.g.shape(h)[0];
        let pe = ctx.g.constant(positional_encoding(t, self.d_model));
        let h = ctx.g.add(h, pe);
        let h = self.encoder.forward(ctx, h, None);
        let logits = self.output.forward(ctx, h);
        ctx.g.log_softmax_rows(logits)
    }

    /// CTC loss against `transcript`, or `None` when it cannot fit in the available frames.
    pub fn loss(&self, ctx: &mut Ctx, noise: Var, transcript: &[usize], grl: Option<f64>) -> Option<Var> {
        let t = ctx.g.shape(noise)[0];
        if crate::nn::ctc::min_frames(transcript) > t {
            return None;
        }
        let lp = self.log_probs(ctx, noise, grl);
        Some(ctx.g.ctc_loss(lp, transcript, CharVocab::BLANK))
    }
}
