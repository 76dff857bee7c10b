use super::{FrontendConfig, PitchContour, Waveform};
use crate::error::{config, Result};

/// Autocorrelation pitch tracker, one value per mel frame.
///
/// Each frame analyses `win_samples` samples centred on the frame position, with
/// zeros outside the signal (mirrored padding creates false periodicities at the
/// edges). The normalised cross-correlation is
/// searched over lags covering `[f0_min, f0_max]`; the first local peak within
/// 90% of the best one is taken to avoid sub-harmonic errors and refined by
/// parabolic interpolation.
pub fn extract_f0(w: &Waveform, cfg: &FrontendConfig) -> Result<PitchContour> {
    w.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(config("waveform sample rate does not match the front end"));
    }
    let sr = cfg.sample_rate as f64;
    let frames = cfg.frames_for(w.len());
    let win = cfg.win_samples;
    let min_lag = (sr / cfg.f0_max_hz).floor().max(1.0) as usize;
    let max_lag = ((sr / cfg.f0_min_hz).ceil() as usize).min(win - 1);
    let samples: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    let at = |i: isize| -> f64 {
        if i < 0 || i as usize >= samples.len() {
            0.0
        } else {
            samples[i as usize]
        }
    };

    let mut f0 = Vec::with_capacity(frames);
    let mut buf = vec![0.0; win];
    let mut nccf = vec![0.0; max_lag + 2];
    for f in 0..frames {
        let start = (f * cfg.hop_samples) as isize - (win / 2) as isize;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = at(start + n as isize);
        }
        let energy = buf.iter().map(|v| v * v).sum::<f64>();
        if (energy / win as f64).sqrt() < cfg.silence_rms {
            f0.push(0.0);
            continue;
        }
        // Prefix sums of squares give both window energies per lag in O(1).
        let mut cum = vec![0.0; win + 1];
        for n in 0..win {
            cum[n + 1] = cum[n] + buf[n] * buf[n];
        }
        let lo = min_lag.saturating_sub(1).max(1);
        for lag in lo..=max_lag + 1 {
            if lag >= win {
                nccf[lag] = 0.0;
                continue;
            }
            let r: f64 = buf[..win - lag].iter().zip(&buf[lag..]).map(|(a, b)| a * b).sum();
            let e0 = cum[win - lag];
            let e1 = cum[win] - cum[lag];
            nccf[lag] = if e0 > 0.0 && e1 > 0.0 { r / (e0 * e1).sqrt() } else { 0.0 };
        }
        let best = (min_lag..=max_lag).map(|l| nccf[l]).fold(f64::NEG_INFINITY, f64::max);
        if best < cfg.voicing_threshold {
            f0.push(0.0);
            continue;
        }
        let is_peak = |l: usize| nccf[l] >= nccf[l - 1] && nccf[l] >= nccf[l + 1];
        let lag = (min_lag..=max_lag)
            .find(|&l| nccf[l] >= 0.9 * best && is_peak(l))
            .unwrap_or_else(|| (min_lag..=max_lag).max_by(|&a, &b| nccf[a].total_cmp(&nccf[b])).unwrap());
        let (a, b, c) = (nccf[lag - 1], nccf[lag], nccf[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let hz = sr / (lag as f64 + shift);
        f0.push(hz.clamp(cfg.f0_min_hz, cfg.f0_max_hz));
    }
    Ok(PitchContour { f0 })
}
