//! Synthetic speech-like corpus with exactly known durations and transcripts.
//!
//! Each phoneme is a harmonic tone with its own formant position and pitch
//! offset (every fifth phoneme is a noise burst instead). A speaker scales the
//! base pitch. Phoneme `k` is spelled with letter `k` of the alphabet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CharVocab, PhonemeInventory};
use crate::audio::{FrontendConfig, Waveform};
use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub n_speakers: usize,
    /// Total utterances, spread round-robin over speakers.
    pub n_utterances: usize,
    pub phoneme_vocab: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_frames_per_phoneme: usize,
    pub max_frames_per_phoneme: usize,
    pub n_noise_files: usize,
    pub noise_seconds: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            n_utterances: 32,
            phoneme_vocab: 12,
            min_phonemes: 3,
            max_phonemes: 6,
            min_frames_per_phoneme: 3,
            max_frames_per_phoneme: 7,
            n_noise_files: 4,
            noise_seconds: 1.5,
            seed: 7,
        }
    }
}

/// A clean utterance before any noise is mixed in.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceUtterance {
    pub id: String,
    pub speaker: String,
    pub phonemes: Vec<String>,
    pub durations: Vec<usize>,
    pub transcript: String,
    pub audio: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanCorpus {
    pub inventory: PhonemeInventory,
    pub utterances: Vec<SourceUtterance>,
}

impl CleanCorpus {
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

fn phoneme_symbol(k: usize) -> String {
    format!("p{k:02}")
}

pub fn generate_toy_corpus(cfg: &ToyCorpusConfig, frontend: &FrontendConfig) -> Result<CleanCorpus> {
    if cfg.n_speakers == 0 || cfg.n_utterances == 0 {
        return Err(config("toy corpus needs at least one speaker and one utterance"));
    }
    if cfg.phoneme_vocab == 0 || cfg.phoneme_vocab > 26 {
        return Err(config("toy phoneme vocabulary must hold 1..=26 symbols"));
    }
    if cfg.min_phonemes == 0 || cfg.min_phonemes > cfg.max_phonemes {
        return Err(config("invalid phoneme count range"));
    }
    if cfg.min_frames_per_phoneme == 0 || cfg.min_frames_per_phoneme > cfg.max_frames_per_phoneme {
        return Err(config("invalid per-phoneme frame range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sr = frontend.sample_rate as f64;
    let hop = frontend.hop_samples;
    let speaker_f0: Vec<f64> = (0..cfg.n_speakers).map(|_| rng.gen_range(100.0..200.0)).collect();
    // Per-phoneme formant centre (Hz) and pitch multiplier.
    let formant: Vec<f64> = (0..cfg.phoneme_vocab).map(|k| 400.0 + 230.0 * k as f64).collect();
    let pitch_mult: Vec<f64> = (0..cfg.phoneme_vocab).map(|_| rng.gen_range(0.85..1.25)).collect();

    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    for u in 0..cfg.n_utterances {
        let spk = u % cfg.n_speakers;
        let n_ph = rng.gen_range(cfg.min_phonemes..=cfg.max_phonemes);
        let ids: Vec<usize> = (0..n_ph).map(|_| rng.gen_range(0..cfg.phoneme_vocab)).collect();
        let durations: Vec<usize> = (0..n_ph)
            .map(|_| rng.gen_range(cfg.min_frames_per_phoneme..=cfg.max_frames_per_phoneme))
            .collect();
        let frames: usize = durations.iter().sum();
        // frames_for(len) == frames for any len in [(frames-1)*hop, frames*hop).
        let len = frames * hop - hop / 2;
        let mut samples = vec![0.0f64; len];
        let mut phase = 0.0f64;
        let mut start_frame = 0usize;
        for (&k, &d) in ids.iter().zip(&durations) {
            let lo = (start_frame * hop).saturating_sub(hop / 2);
            let hi = ((start_frame + d) * hop - hop / 2).min(len);
            let f0 = speaker_f0[spk] * pitch_mult[k];
            let ramp = (0.01 * sr) as usize;
            for (i, s) in samples[lo..hi].iter_mut().enumerate() {
                let env = ((i.min(hi - lo - 1 - i) as f64) / ramp as f64).min(1.0);
                let v = if k % 5 == 4 {
                    rng.gen_range(-1.0..1.0) * 0.15
                } else {
                    let mut acc = 0.0;
                    let mut h = 1;
                    while h as f64 * f0 < 4000.0 {
                        let fh = h as f64 * f0;
                        let a = (-((fh - formant[k]) / 300.0).powi(2)).exp() + 0.15 / h as f64;
                        acc += a * (phase * h as f64).sin();
                        h += 1;
                    }
                    phase += 2.0 * std::f64::consts::PI * f0 / sr;
                    0.12 * acc
                };
                *s = env * v;
            }
            start_frame += d;
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm = if peak > 0.0 { 0.5 / peak } else { 1.0 };
        let audio = Waveform::new(samples.iter().map(|v| (v * norm) as f32).collect(), frontend.sample_rate)?;
        let transcript: String = ids.iter().map(|&k| (b'a' + k as u8) as char).collect();
        debug_assert!(CharVocab::default().encode(&transcript).is_ok());
        utterances.push(SourceUtterance {
            id: format!("spk{spk}_{u:04}"),
            speaker: format!("spk{spk}"),
            phonemes: ids.iter().map(|&k| phoneme_symbol(k)).collect(),
            durations,
            transcript,
            audio,
        });
    }
    Ok(CleanCorpus {
        inventory: PhonemeInventory::new((0..cfg.phoneme_vocab).map(phoneme_symbol).collect()),
        utterances,
    })
}

/// Background-noise bank: a cycle of low rumble, mains hum, hiss, band noise,
/// amplitude-modulated babble-like noise and intermittent beeps.
pub fn generate_toy_noise_bank(cfg: &ToyCorpusConfig, frontend: &FrontendConfig) -> Result<Vec<super::NoiseSource>> {
    let sr = frontend.sample_rate as f64;
    let len = (cfg.noise_seconds * sr) as usize;
    let mut out = Vec::with_capacity(cfg.n_noise_files);
    for n in 0..cfg.n_noise_files {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(7919).wrapping_add(n as u64 + 1));
        let kind = n % 6;
        let mut lp = 0.0f64;
        let mut lp2 = 0.0f64;
        let mut prev = 0.0f64;
        let samples: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 / sr;
                let w: f64 = rng.gen_range(-1.0..1.0);
                match kind {
                    0 => {
                        lp += 0.02 * (w - lp);
                        lp * 4.0
                    }
                    1 => {
                        let base = 50.0 + 10.0 * (n / 6) as f64;
                        (1..6).map(|h| (2.0 * std::f64::consts::PI * base * h as f64 * t).sin() / h as f64).sum::<f64>()
                            * 0.5
                            + 0.05 * w
                    }
                    2 => {
                        let hp = w - prev;
                        prev = w;
                        hp * 0.5
                    }
                    3 => {
                        lp += 0.3 * (w - lp);
                        lp2 += 0.3 * (lp - lp2);
                        (lp - lp2) * 2.0
                    }
                    4 => {
                        lp += 0.1 * (w - lp);
                        lp * (1.0 + (2.0 * std::f64::consts::PI * 3.0 * t).sin()) * 1.5
                    }
                    _ => {
                        let on = (t * 4.0).fract() < 0.3;
                        let beep = if on { (2.0 * std::f64::consts::PI * 2500.0 * t).sin() } else { 0.0 };
                        beep * 0.6 + 0.02 * w
                    }
                }
            })
            .collect();
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm = if peak > 0.0 { 0.5 / peak } else { 1.0 };
        out.push(super::NoiseSource {
            name: format!("noise{n:02}"),
            audio: Waveform::new(samples.iter().map(|v| (v * norm) as f32).collect(), frontend.sample_rate)?,
        });
    }
    Ok(out)
}
