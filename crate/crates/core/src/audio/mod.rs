//! Signal processing front end: waveforms, log-mel features, pitch, noise mixing.

pub(crate) mod mel;
mod mix;
mod pitch;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::ValueRange;
use crate::tensor::Tensor;

pub use mel::{mel_filterbank, mel_spectrogram, mel_to_hz, hz_to_mel, silence_mel, stft_magnitude, MelFilterbank};
pub use mix::{fit_noise, mix_at_snr, rms, snr_db, Mixture};
pub use pitch::extract_f0;
pub use wav::{read_wav, write_wav};

/// Amplitude floor applied before the logarithm.
pub const AMPLITUDE_FLOOR: f64 = 1e-5;

/// `ln(AMPLITUDE_FLOOR)`: the value every silent mel cell takes.
pub fn log_floor() -> f64 {
    AMPLITUDE_FLOOR.ln()
}

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Self { samples, sample_rate };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if self.samples.is_empty() {
            return Err(invalid("empty waveform"));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("waveform contains non-finite samples"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Feature-extraction settings. One instance is pinned per corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// 1100 samples ≈ 49.9 ms at 22.05 kHz.
    pub win_samples: usize,
    /// 275 samples ≈ 12.47 ms; exactly a quarter of the window.
    pub hop_samples: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Upper end of the log-mel range used to scale features into `[0, 1]`.
    pub log_ceiling: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Minimum normalised autocorrelation peak for a frame to count as voiced.
    pub voicing_threshold: f64,
    /// Frames quieter than this RMS are unvoiced regardless of periodicity.
    pub silence_rms: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            win_samples: 1100,
            hop_samples: 275,
            n_fft: 2048,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_ceiling: 7.0,
            f0_min_hz: 50.0,
            f0_max_hz: 800.0,
            voicing_threshold: 0.6,
            silence_rms: 1e-4,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::config;
        if self.sample_rate == 0 || self.hop_samples == 0 || self.n_mels == 0 {
            return Err(config("sample rate, hop and mel count must be positive"));
        }
        if self.win_samples < self.hop_samples {
            return Err(config("window must be at least the hop length"));
        }
        if self.n_fft < self.win_samples {
            return Err(config("FFT size must be at least the window length"));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= self.sample_rate as f64 / 2.0) {
            return Err(config("mel band must satisfy 0 <= fmin < fmax <= Nyquist"));
        }
        if !(self.f0_min_hz > 0.0 && self.f0_min_hz < self.f0_max_hz) {
            return Err(config("F0 range must satisfy 0 < min < max"));
        }
        if self.log_ceiling <= log_floor() {
            return Err(config("log ceiling must exceed the log floor"));
        }
        Ok(())
    }

    /// Frames produced for `samples` samples with centred framing.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples / self.hop_samples + 1
    }

    pub fn value_range(&self) -> ValueRange {
        ValueRange {
            lo: log_floor(),
            hi: self.log_ceiling,
        }
    }
}

/// Log-amplitude mel spectrogram, `[frames, n_mels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub hop_samples: usize,
    pub win_samples: usize,
}

impl MelSpectrogram {
    pub fn new(values: Tensor, cfg: &FrontendConfig) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[1] != cfg.n_mels {
            return Err(invalid(format!(
                "mel matrix must be [frames, {}], got {:?}",
                cfg.n_mels,
                values.shape()
            )));
        }
        if values.rows() == 0 {
            return Err(invalid("mel spectrogram needs at least one frame"));
        }
        Ok(Self {
            values,
            hop_samples: cfg.hop_samples,
            win_samples: cfg.win_samples,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }
}

/// Per-frame fundamental frequency in Hz, 0 for unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    pub f0: Vec<f64>,
}

impl PitchContour {
    pub fn voiced_fraction(&self) -> f64 {
        self.f0.iter().filter(|&&v| v > 0.0).count() as f64 / self.f0.len().max(1) as f64
    }
}
