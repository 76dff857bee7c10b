use super::Waveform;
use crate::error::{invalid, Result};

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Power ratio of `signal` to `noise` in dB.
pub fn snr_db(signal: &[f32], noise: &[f32]) -> f64 {
    10.0 * (rms(signal).powi(2) / rms(noise).powi(2)).log10()
}

/// Noise cut to `len` samples, starting at `offset` and wrapping around (tiling)
/// as often as needed.
pub fn fit_noise(noise: &[f32], len: usize, offset: usize) -> Vec<f32> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Result of [`mix_at_snr`].
#[derive(Clone, Debug)]
pub struct Mixture {
    pub noisy: Waveform,
    /// The exact additive noise inside `noisy` (the paired noise target).
    pub scaled_noise: Waveform,
    /// Gain applied to the length-fitted noise before the clipping guard.
    pub noise_gain: f64,
    /// Common gain applied to speech and noise so the mixture stays in [-1, 1]; 1 when unused.
    pub clip_gain: f64,
}

/// Add `noise` to `clean` at `snr_db` dB (power ratio).
///
/// Noise is tiled or trimmed to the clean length starting at `offset`. If the
/// mixture would leave [-1, 1], speech and noise are scaled down together,
/// which leaves the ratio untouched.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, offset: usize) -> Result<Mixture> {
    clean.validate()?;
    noise.validate()?;
    if clean.sample_rate != noise.sample_rate {
        return Err(invalid(format!(
            "sample rates differ: speech {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(invalid("SNR must be finite"));
    }
    let fitted = fit_noise(&noise.samples, clean.len(), offset % noise.len());
    let (rc, rn) = (rms(&clean.samples), rms(&fitted));
    if rc == 0.0 {
        return Err(invalid("speech has zero power"));
    }
    if rn == 0.0 {
        return Err(invalid("noise segment has zero power"));
    }
    let gain = rc / (rn * 10f64.powf(snr_db / 20.0));
    let mut scaled: Vec<f64> = fitted.iter().map(|&v| v as f64 * gain).collect();
    let mut noisy: Vec<f64> = clean.samples.iter().zip(&scaled).map(|(&c, &n)| c as f64 + n).collect();
    let peak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clip_gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if clip_gain < 1.0 {
        for v in noisy.iter_mut().chain(scaled.iter_mut()) {
            *v *= clip_gain;
        }
    }
    let to_wave = |v: Vec<f64>| Waveform {
        samples: v.into_iter().map(|s| s as f32).collect(),
        sample_rate: clean.sample_rate,
    };
    Ok(Mixture {
        noisy: to_wave(noisy),
        scaled_noise: to_wave(scaled),
        noise_gain: gain,
        clip_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f32>) -> Waveform {
        Waveform::new(v, 22050).unwrap()
    }

    #[test]
    fn equal_power_gains() {
        let c = wave(vec![0.5, -0.5, 0.5, -0.5]);
        let n = wave(vec![-0.5, 0.5, 0.5, -0.5]);
        assert!((mix_at_snr(&c, &n, 0.0, 0).unwrap().noise_gain - 1.0).abs() < 1e-12);
        assert!((mix_at_snr(&c, &n, 20.0, 0).unwrap().noise_gain - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_power_is_rejected() {
        let c = wave(vec![0.0; 8]);
        let n = wave(vec![0.1; 8]);
        assert!(matches!(mix_at_snr(&c, &n, 10.0, 0), Err(crate::Error::InvalidInput(_))));
        assert!(mix_at_snr(&n, &c, 10.0, 0).is_err());
    }

    #[test]
    fn clipping_guard_keeps_range_and_ratio() {
        let c = wave(vec![0.9, -0.9, 0.9, -0.9]);
        let n = wave(vec![0.9, 0.9, -0.9, -0.9]);
        let m = mix_at_snr(&c, &n, 0.0, 0).unwrap();
        assert!(m.clip_gain < 1.0);
        assert!(m.noisy.samples.iter().all(|v| v.abs() <= 1.0));
        let speech: Vec<f32> = m.noisy.samples.iter().zip(&m.scaled_noise.samples).map(|(a, b)| a - b).collect();
        assert!(snr_db(&speech, &m.scaled_noise.samples).abs() < 1e-4);
    }

    #[test]
    fn short_noise_is_tiled_from_offset() {
        assert_eq!(fit_noise(&[1.0, 2.0, 3.0], 7, 2), vec![3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(fit_noise(&[1.0, 2.0, 3.0, 4.0], 2, 1), vec![2.0, 3.0]);
    }

    #[test]
    fn achieved_snr_matches_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = wave((0..3000).map(|_| rng.gen_range(-0.3..0.3)).collect());
            let n = wave((0..1000).map(|_| rng.gen_range(-0.5..0.5)).collect());
            let snr = rng.gen_range(5.0..25.0);
            let m = mix_at_snr(&c, &n, snr, rng.gen_range(0..1000)).unwrap();
            let speech: Vec<f32> = m.noisy.samples.iter().zip(&m.scaled_noise.samples).map(|(a, b)| a - b).collect();
            assert!((snr_db(&speech, &m.scaled_noise.samples) - snr).abs() < 0.01);
        }
    }
}
