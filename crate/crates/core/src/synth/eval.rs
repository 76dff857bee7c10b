use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::mel_panels_png;
use crate::audio::MelSpectrogram;
use crate::corpus::{ConditionClass, Utterance};
use crate::error::{config, Result};
use crate::model::durations_from_log;
use crate::model::{Model, TeacherForced};
use crate::nn::ssim::{mssim_loss_value, ValueRange};

pub const PERCEPTUAL_NOTE: &str =
    "objective proxies only; perceptual listening scores (MOS/CMOS) are not computed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub class: ConditionClass,
    pub frames: usize,
    /// Mean absolute error of the extracted noise mel; paired utterances only.
    pub extractor_mae: Option<f64>,
    /// Reduction of noise energy by subtracting the extracted noise, in dB
    /// over linear mel amplitudes; paired utterances only.
    pub snr_gain_db: Option<f64>,
    pub mel_mae: f64,
    /// `1 − mean SSIM` between predicted and target mels.
    pub mel_mssim_loss: f64,
    /// Mean absolute per-phoneme frame error of the predicted durations.
    pub duration_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub utterances: usize,
    pub extractor_mae: Option<f64>,
    pub snr_gain_db: Option<f64>,
    pub mel_mae: f64,
    pub mel_mssim_loss: f64,
    pub duration_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub aggregate: Aggregate,
    pub utterances: Vec<UtteranceMetrics>,
    pub plots: Vec<String>,
}

fn mae(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
    let d = a.values.data().iter().zip(b.values.data()).map(|(x, y)| (x - y).abs());
    d.sum::<f64>() / a.values.len() as f64
}

fn snr_gain_db(noise: &MelSpectrogram, extracted: &MelSpectrogram) -> f64 {
    let (mut energy, mut residual) = (0.0, 0.0);
    for (&n, &e) in noise.values.data().iter().zip(extracted.values.data()) {
        let (n, e) = (n.exp(), e.exp());
        energy += n * n;
        residual += (n - e) * (n - e);
    }
    10.0 * (energy / residual.max(f64::MIN_POSITIVE)).log10()
}

pub fn utterance_metrics(u: &Utterance, tf: &TeacherForced, range: ValueRange) -> UtteranceMetrics {
    let paired = match (&u.class, &u.noise_mel) {
        (ConditionClass::PairedNoisy, Some(n)) => Some(n),
        _ => None,
    };
    let predicted = durations_from_log(&tf.log_durations);
    let dur_err = predicted
        .iter()
        .zip(&u.durations)
        .map(|(&p, &d)| (p as f64 - d as f64).abs())
        .sum::<f64>()
        / u.durations.len() as f64;
    UtteranceMetrics {
        id: u.id.clone(),
        class: u.class,
        frames: u.frames(),
        extractor_mae: paired.map(|n| mae(&tf.extracted_noise, n)),
        snr_gain_db: paired.map(|n| snr_gain_db(n, &tf.extracted_noise)),
        mel_mae: mae(&tf.mel, &u.mel),
        mel_mssim_loss: mssim_loss_value(&tf.mel.values, &u.mel.values, range),
        duration_error: dur_err,
    }
}

fn mean<I: Iterator<Item = f64>>(it: I) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Aggregate {
    pub fn of(rows: &[UtteranceMetrics]) -> Self {
        Self {
            utterances: rows.len(),
            extractor_mae: mean(rows.iter().filter_map(|r| r.extractor_mae)),
            snr_gain_db: mean(rows.iter().filter_map(|r| r.snr_gain_db)),
            mel_mae: mean(rows.iter().map(|r| r.mel_mae)).unwrap_or(0.0),
            mel_mssim_loss: mean(rows.iter().map(|r| r.mel_mssim_loss)).unwrap_or(0.0),
            duration_error: mean(rows.iter().map(|r| r.duration_error)).unwrap_or(0.0),
        }
    }
}

/// Teacher-forced evaluation over `utts`. When `plot_dir` is given, the first
/// `max_plots` utterances get a target / predicted / extracted-noise heatmap.
pub fn evaluate(model: &Model, utts: &[Utterance], plot_dir: Option<&Path>, max_plots: usize) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(config("evaluation split is empty"));
    }
    let range = model.config.mel_range();
    let outputs: Vec<(UtteranceMetrics, TeacherForced)> = utts
        .par_iter()
        .map(|u| model.teacher_forced(u).map(|tf| (utterance_metrics(u, &tf, range), tf)))
        .collect::<Result<_>>()?;
    let mut plots = Vec::new();
    if let Some(dir) = plot_dir {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        for (u, (_, tf)) in utts.iter().zip(&outputs).take(max_plots) {
            let path = dir.join(format!("{}.png", u.id));
            mel_panels_png(
                &path,
                &[&u.mel, &tf.mel, &tf.extracted_noise],
                range,
            )?;
            plots.push(path.display().to_string());
        }
    }
    let rows: Vec<UtteranceMetrics> = outputs.into_iter().map(|(m, _)| m).collect();
    Ok(EvalReport {
        note: PERCEPTUAL_NOTE.to_string(),
        aggregate: Aggregate::of(&rows),
        utterances: rows,
        plots,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
    }
}
