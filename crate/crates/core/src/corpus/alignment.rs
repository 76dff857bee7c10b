use std::path::Path;

use crate::audio::FrontendConfig;
use crate::error::{invalid, Error, Result};

/// One row of an alignment file: `phoneme<TAB>start_s<TAB>end_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSpan {
    pub phoneme: String,
    pub start_s: f64,
    pub end_s: f64,
}

pub fn parse_alignment(text: &str) -> Result<Vec<AlignedSpan>> {
    let mut spans = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Data(format!("alignment line {}: expected 3 tab-separated fields", n + 1)));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("alignment line {}: bad time {s:?}", n + 1)))
        };
        let (start_s, end_s) = (num(cols[1])?, num(cols[2])?);
        if !(start_s >= 0.0 && end_s >= start_s) {
            return Err(Error::Data(format!("alignment line {}: span must satisfy 0 <= start <= end", n + 1)));
        }
        if let Some(prev) = spans.last() {
            let prev: &AlignedSpan = prev;
            if start_s + 1e-9 < prev.end_s {
                return Err(Error::Data(format!("alignment line {}: spans overlap", n + 1)));
            }
        }
        spans.push(AlignedSpan {
            phoneme: cols[0].trim().to_string(),
            start_s,
            end_s,
        });
    }
    Ok(spans)
}

/// Integer frame counts for aligned spans.
///
/// Span boundaries are rounded to the nearest frame on a cumulative basis so
/// rounding errors do not accumulate; whatever is left over (positive or
/// negative) goes to the final phoneme so the counts sum to `mel_frames`.
pub fn durations_from_spans(spans: &[AlignedSpan], mel_frames: usize, cfg: &FrontendConfig) -> Result<Vec<usize>> {
    if spans.is_empty() {
        return Err(invalid("empty alignment"));
    }
    if mel_frames == 0 {
        return Err(invalid("mel has no frames"));
    }
    let frames_per_s = cfg.sample_rate as f64 / cfg.hop_samples as f64;
    let aligned_frames = spans.last().unwrap().end_s * frames_per_s;
    if (aligned_frames - mel_frames as f64).abs() > 1.0 {
        return Err(Error::Alignment(format!(
            "alignment covers {aligned_frames:.2} frames but the audio has {mel_frames}"
        )));
    }
    let mut durations = Vec::with_capacity(spans.len());
    let mut prev = 0usize;
    for span in spans {
        let boundary = ((span.end_s * frames_per_s).round() as usize).max(prev);
        durations.push(boundary - prev);
        prev = boundary;
    }
    let last = durations.last_mut().unwrap();
    let adjusted = *last as isize + mel_frames as isize - prev as isize;
    if adjusted < 0 {
        return Err(Error::Alignment("rounding residual exceeds the final phoneme".into()));
    }
    *last = adjusted as usize;
    Ok(durations)
}

pub fn load_durations(path: impl AsRef<Path>, mel_frames: usize, cfg: &FrontendConfig) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    durations_from_spans(&parse_alignment(&text)?, mel_frames, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_spans_sum_to_mel_frames() {
        let cfg = FrontendConfig::default();
        let spans = parse_alignment("a\t0.0\t0.1\nb\t0.1\t0.2\n").unwrap();
        let samples = (0.2 * 22050.0) as usize;
        let frames = cfg.frames_for(samples);
        assert_eq!(frames, 17);
        let d = durations_from_spans(&spans, frames, &cfg).unwrap();
        // 0.1 s = 8.02 frames -> boundary 8; 0.2 s = 16.04 -> 16; residual +1 to the last.
        assert_eq!(d, vec![8, 9]);
        assert_eq!(d.iter().sum::<usize>(), frames);
    }

    #[test]
    fn single_span_takes_all_frames() {
        let cfg = FrontendConfig::default();
        let spans = parse_alignment("x\t0\t0.5").unwrap();
        let frames = cfg.frames_for(11025);
        assert_eq!(durations_from_spans(&spans, frames, &cfg).unwrap(), vec![frames]);
    }

    #[test]
    fn empty_and_mismatched_alignments_fail() {
        let cfg = FrontendConfig::default();
        assert!(durations_from_spans(&[], 10, &cfg).is_err());
        let spans = parse_alignment("a\t0\t1.0").unwrap();
        assert!(matches!(durations_from_spans(&spans, 40, &cfg), Err(Error::Alignment(_))));
        assert!(parse_alignment("a\t0.2\t0.1").is_err());
        assert!(parse_alignment("a 0 0.1").is_err());
    }
}
