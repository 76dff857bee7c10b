use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{log_floor, FrontendConfig, MelSpectrogram, Waveform, AMPLITUDE_FLOOR};
use crate::error::{config, invalid, Result};
use crate::tensor::Tensor;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak on the HTK mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[n_mels, n_fft/2 + 1]`.
    pub weights: Tensor,
    /// Centre frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

pub fn mel_filterbank(cfg: &FrontendConfig) -> MelFilterbank {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut weights = Tensor::zeros(&[cfg.n_mels, n_bins]);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
        let row = weights.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
        }
    }
    MelFilterbank {
        weights,
        centers_hz: points[1..=cfg.n_mels].to_vec(),
    }
}

/// Index into a signal of length `len` with mirror reflection beyond either end
/// (the edge sample is not repeated). Works for any `len >= 1`.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Periodic Hann window of `win` samples, centred inside `n_fft`.
pub(crate) fn padded_window(cfg: &FrontendConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let off = (cfg.n_fft - cfg.win_samples) / 2;
    for n in 0..cfg.win_samples {
        w[off + n] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.win_samples as f64).cos();
    }
    w
}

pub(crate) struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
    hop: usize,
}

impl Stft {
    pub(crate) fn new(cfg: &FrontendConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft: planner.plan_fft_forward(cfg.n_fft),
            window: padded_window(cfg),
            n_fft: cfg.n_fft,
            hop: cfg.hop_samples,
        }
    }

    /// Complex spectra of centred, reflect-padded frames: `frames × (n_fft/2 + 1)`.
    pub(crate) fn forward(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let frames = samples.len() / self.hop + 1;
        let pad = (self.n_fft / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        (0..frames)
            .map(|f| {
                let start = (f * self.hop) as isize - pad;
                for (n, b) in buf.iter_mut().enumerate() {
                    let s = samples[reflect_index(start + n as isize, samples.len())];
                    *b = Complex::new(s * self.window[n], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..self.n_fft / 2 + 1].to_vec()
            })
            .collect()
    }
}

/// Magnitude spectrogram `[frames, n_fft/2 + 1]`.
pub fn stft_magnitude(w: &Waveform, cfg: &FrontendConfig) -> Result<Tensor> {
    w.validate()?;
    let samples: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    let spec = Stft::new(cfg).forward(&samples);
    let rows: Vec<Vec<f64>> = spec.iter().map(|r| r.iter().map(|c| c.norm()).collect()).collect();
    Ok(Tensor::from_rows(&rows))
}

pub fn mel_spectrogram(w: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    if w.samples.is_empty() {
        return Err(invalid("empty waveform"));
    }
    if w.sample_rate != cfg.sample_rate {
        return Err(config(format!(
            "waveform sample rate {} does not match configured {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let mag = stft_magnitude(w, cfg)?;
    let fb = mel_filterbank(cfg);
    let mut mel = crate::tensor::matmul(&mag, &fb.weights.transpose());
    for v in mel.data_mut() {
        *v = v.max(AMPLITUDE_FLOOR).ln();
    }
    MelSpectrogram::new(mel, cfg)
}

/// The log-mel of digital silence: every cell at the log floor.
pub fn silence_mel(frames: usize, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    if frames == 0 {
        return Err(invalid("silence needs at least one frame"));
    }
    MelSpectrogram::new(Tensor::full(&[frames, cfg.n_mels], log_floor()), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, phase: f64, cfg: &FrontendConfig) -> Waveform {
        let n = (seconds * cfg.sample_rate as f64) as usize;
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / cfg.sample_rate as f64 + phase).sin()) as f32)
            .collect();
        Waveform::new(s, cfg.sample_rate).unwrap()
    }

    #[test]
    fn one_second_gives_81_frames() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.0; 22050], 22050).unwrap();
        assert_eq!(mel_spectrogram(&w, &cfg).unwrap().frames(), 81);
    }

    #[test]
    fn frame_count_formula_for_short_and_odd_lengths() {
        let cfg = FrontendConfig::default();
        for len in [1, 2, 3, 274, 275, 276, 1023, 1024, 1025, 2049, 5000] {
            let w = Waveform::new(vec![0.1; len], 22050).unwrap();
            assert_eq!(mel_spectrogram(&w, &cfg).unwrap().frames(), len / 275 + 1, "len {len}");
        }
    }

    #[test]
    fn zeros_sit_on_the_floor_and_match_silence() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.0; 2750], 22050).unwrap();
        let m = mel_spectrogram(&w, &cfg).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 1e-5f64.ln()));
        assert!((log_floor() + 11.5129).abs() < 1e-4);
        assert_eq!(m, silence_mel(11, &cfg).unwrap());
        assert_eq!(silence_mel(1, &cfg).unwrap().values.shape(), &[1, 80]);
        assert!(silence_mel(0, &cfg).is_err());
    }

    #[test]
    fn sine_peaks_in_the_nearest_filter() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg);
        for freq in [440.0, 1000.0, 3000.0] {
            let nearest = (0..cfg.n_mels)
                .min_by(|&a, &b| (fb.centers_hz[a] - freq).abs().total_cmp(&(fb.centers_hz[b] - freq).abs()))
                .unwrap();
            // Cosine phase: the mirrored padding then continues the tone smoothly,
            // so the edge frames are clean too.
            let m = mel_spectrogram(&tone(freq, 1.0, std::f64::consts::FRAC_PI_2, &cfg), &cfg).unwrap();
            for f in 0..m.frames() {
                let row = m.values.row(f);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(arg, nearest, "{freq} Hz frame {f}");
            }
            // Any phase: interior frames are unaffected by the padding.
            let m = mel_spectrogram(&tone(freq, 1.0, 0.3, &cfg), &cfg).unwrap();
            for f in 4..m.frames() - 4 {
                let row = m.values.row(f);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(arg, nearest, "{freq} Hz frame {f}");
            }
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let cfg = FrontendConfig::default();
        let w = tone(330.0, 0.3, 0.0, &cfg);
        assert_eq!(mel_spectrogram(&w, &cfg).unwrap(), mel_spectrogram(&w, &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = FrontendConfig::default();
        let w = Waveform { samples: vec![], sample_rate: 22050 };
        assert!(matches!(mel_spectrogram(&w, &cfg), Err(crate::Error::InvalidInput(_))));
        let w = Waveform::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(mel_spectrogram(&w, &cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn reflection_handles_tiny_signals() {
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(5, 1), 0);
        assert_eq!(reflect_index(-1, 3), 1);
        assert_eq!(reflect_index(3, 3), 1);
        assert_eq!(reflect_index(-5, 3), 1);
    }
}
