use std::path::Path;

use image::{Rgb, RgbImage};

use crate::audio::MelSpectrogram;
use crate::error::{invalid, Result};
use crate::nn::ssim::ValueRange;

const SCALE: u32 = 2;
const GAP: u32 = 4;

/// Five-stop dark-blue → yellow ramp.
fn color(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [13.0, 8.0, 135.0],
        [126.0, 3.0, 168.0],
        [204.0, 71.0, 120.0],
        [248.0, 149.0, 64.0],
        [240.0, 249.0, 33.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Stacked heatmaps, low frequencies at the bottom of each panel, separated by
/// white bands.
pub fn mel_panels_png(path: &Path, panels: &[&MelSpectrogram], range: ValueRange) -> Result<()> {
    if panels.is_empty() {
        return Err(invalid("no spectrograms to plot"));
    }
    let frames = panels.iter().map(|m| m.frames()).max().unwrap_or(1) as u32;
    let mels = panels.iter().map(|m| m.n_mels()).max().unwrap_or(1) as u32;
    let n = panels.len() as u32;
    let mut img = RgbImage::from_pixel(frames * SCALE, n * mels * SCALE + (n - 1) * GAP, Rgb([255, 255, 255]));
    for (p, mel) in panels.iter().enumerate() {
        let top = p as u32 * (mels * SCALE + GAP);
        for f in 0..mel.frames() {
            let row = mel.values.row(f);
            for (m, &v) in row.iter().enumerate() {
                let c = color(range.normalize(v));
                let y0 = top + (mels - 1 - m as u32) * SCALE;
                for dx in 0..SCALE {
                    for dy in 0..SCALE {
                        img.put_pixel(f as u32 * SCALE + dx, y0 + dy, c);
                    }
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Line chart of several series over steps; each series is scaled to its own
/// min–max range so curves of different magnitudes remain readable.
pub fn loss_curve_png(path: &Path, series: &[(String, Vec<(usize, f64)>)], width: u32, height: u32) -> Result<()> {
    let points: Vec<&(usize, f64)> = series.iter().flat_map(|(_, s)| s).collect();
    if points.is_empty() {
        return Err(invalid("no loss values to plot"));
    }
    let max_step = points.iter().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let k = series.len().max(2) - 1;
    for (i, (_, s)) in series.iter().enumerate() {
        let finite: Vec<f64> = s.iter().map(|p| p.1).filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let c = color(i as f64 / k as f64);
        let to_px = |&(step, v): &(usize, f64)| {
            let x = step as f64 / max_step * (width - 1) as f64;
            let y = (1.0 - (v - lo) / span) * (height - 1) as f64;
            (x, y)
        };
        let pts: Vec<(f64, f64)> = s.iter().filter(|p| p.1.is_finite()).map(to_px).collect();
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for j in 0..=n {
                let t = j as f64 / n as f64;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                img.put_pixel(x.round() as u32, y.round() as u32, c);
            }
        }
        if let [(x, y)] = pts[..] {
            img.put_pixel(x.round() as u32, y.round() as u32, c);
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{silence_mel, FrontendConfig};

    #[test]
    fn heatmap_dimensions() {
        let fe = FrontendConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let a = silence_mel(10, &fe).unwrap();
        let b = silence_mel(7, &fe).unwrap();
        mel_panels_png(&path, &[&a, &b], fe.value_range()).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (20, 2 * 160 + GAP));
    }

    #[test]
    fn loss_curve_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let s = vec![
            ("a".to_string(), vec![(0, 3.0), (5, 1.0), (9, 0.5)]),
            ("b".to_string(), vec![(0, 0.1)]),
        ];
        loss_curve_png(&path, &s, 64, 32).unwrap();
        assert!(loss_curve_png(&path, &[], 64, 32).is_err());
    }
}
