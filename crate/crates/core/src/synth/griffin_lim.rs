use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::mel::{mel_filterbank, padded_window, Stft};
use crate::audio::{log_floor, FrontendConfig, MelSpectrogram, Waveform};
use crate::error::{config, Result};

pub const DEFAULT_ITERATIONS: usize = 60;

/// Linear magnitude `[frames, n_fft/2 + 1]` from a log-mel: floor cells become
/// exact zeros, the rest go through the filterbank pseudo-inverse and are
/// clipped at zero.
fn linear_magnitude(mel: &MelSpectrogram, cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let fb = mel_filterbank(cfg);
    let (m, k) = (fb.weights.rows(), fb.weights.cols());
    let w = DMatrix::from_row_slice(m, k, fb.weights.data());
    let pinv = w.pseudo_inverse(1e-10).expect("SVD of a finite filterbank");
    let floor = log_floor();
    (0..mel.frames())
        .map(|f| {
            let amp: Vec<f64> = mel
                .values
                .row(f)
                .iter()
                .map(|&v| if v <= floor + 1e-9 { 0.0 } else { v.exp() })
                .collect();
            let amp = DMatrix::from_column_slice(m, 1, &amp);
            (&pinv * amp).iter().map(|v| v.max(0.0)).collect()
        })
        .collect()
}

/// Windowed overlap-add inverse of [`Stft::forward`], trimmed to `len` samples.
fn istft(spec: &[Vec<Complex<f64>>], cfg: &FrontendConfig, len: usize, ifft: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let n = cfg.n_fft;
    let hop = cfg.hop_samples;
    let window = padded_window(cfg);
    let total = (spec.len() - 1) * hop + n;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (f, half) in spec.iter().enumerate() {
        buf[..half.len()].copy_from_slice(half);
        for k in 1..n - half.len() + 1 {
            buf[n - k] = half[k].conj();
        }
        ifft.process(&mut buf);
        let start = f * hop;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let pad = n / 2;
    (0..len)
        .map(|i| {
            let j = i + pad;
            if norm[j] > 1e-8 {
                out[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Phase reconstruction from a log-mel spectrogram. The result has
/// `(frames − 1)·hop + 1` samples, which re-analyses to the same frame count.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &FrontendConfig, iterations: usize) -> Result<Waveform> {
    cfg.validate()?;
    if mel.n_mels() != cfg.n_mels || mel.hop_samples != cfg.hop_samples {
        return Err(config("mel spectrogram was not produced with this frontend"));
    }
    let mag = linear_magnitude(mel, cfg);
    let len = (mel.frames() - 1) * cfg.hop_samples + 1;
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(cfg.n_fft);
    let stft = Stft::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut spec: Vec<Vec<Complex<f64>>> = mag
        .iter()
        .map(|row| {
            row.iter()
                .map(|&a| Complex::from_polar(a, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut signal = istft(&spec, cfg, len, ifft.as_ref());
    for _ in 0..iterations {
        let est = stft.forward(&signal);
        for ((row, est_row), target) in spec.iter_mut().zip(&est).zip(&mag) {
            for ((c, e), &a) in row.iter_mut().zip(est_row).zip(target) {
                let norm = e.norm();
                *c = if norm > 1e-12 { e * (a / norm) } else { Complex::new(a, 0.0) };
            }
        }
        signal = istft(&spec, cfg, len, ifft.as_ref());
    }
    Waveform::new(signal.into_iter().map(|v| v as f32).collect(), cfg.sample_rate)
}
