//! Padding a list of utterances into rectangular arrays with validity masks.

use super::{ConditionClass, Utterance};
use crate::audio::{log_floor, MelSpectrogram, PitchContour};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Rectangular view of a batch. Padded mel cells hold the log floor, other padding is zero.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub ids: Vec<String>,
    pub classes: Vec<ConditionClass>,
    pub speaker_ids: Vec<usize>,
    /// `[B, P]`
    pub phonemes: Vec<Vec<usize>>,
    pub durations: Vec<Vec<usize>>,
    pub phoneme_mask: Vec<Vec<bool>>,
    /// `[B, T, n_mels]`
    pub mel: Tensor,
    /// `[B, T, n_mels]`; rows of non-paired utterances are all floor.
    pub noise_mel: Tensor,
    pub has_noise: Vec<bool>,
    /// `[B, T]`
    pub f0: Tensor,
    pub frame_mask: Vec<Vec<bool>>,
    pub transcripts: Vec<Vec<usize>>,
    hop_samples: usize,
    win_samples: usize,
}

/// Pad `utts` to the longest utterance, or to `pad_to` frames if that is longer.
pub fn make_batch(utts: &[Utterance], pad_to: Option<usize>) -> Result<PaddedBatch> {
    let first = utts.first().ok_or_else(|| invalid("cannot batch zero utterances"))?;
    let n_mels = first.mel.n_mels();
    let b = utts.len();
    let t_max = utts.iter().map(Utterance::frames).max().unwrap().max(pad_to.unwrap_or(0));
    let p_max = utts.iter().map(|u| u.phoneme_ids.len()).max().unwrap();
    let floor = log_floor();
    let mut mel = Tensor::full(&[b, t_max, n_mels], floor);
    let mut noise_mel = Tensor::full(&[b, t_max, n_mels], floor);
    let mut f0 = Tensor::zeros(&[b, t_max]);
    let mut out = PaddedBatch {
        ids: Vec::with_capacity(b),
        classes: Vec::with_capacity(b),
        speaker_ids: Vec::with_capacity(b),
        phonemes: Vec::with_capacity(b),
        durations: Vec::with_capacity(b),
        phoneme_mask: Vec::with_capacity(b),
        mel: Tensor::zeros(&[0]),
        noise_mel: Tensor::zeros(&[0]),
        has_noise: Vec::with_capacity(b),
        f0: Tensor::zeros(&[0]),
        frame_mask: Vec::with_capacity(b),
        transcripts: Vec::with_capacity(b),
        hop_samples: first.mel.hop_samples,
        win_samples: first.mel.win_samples,
    };
    for (i, u) in utts.iter().enumerate() {
        if u.mel.n_mels() != n_mels {
            return Err(invalid("utterances disagree on mel bin count"));
        }
        let t = u.frames();
        let stride = t_max * n_mels;
        mel.data_mut()[i * stride..i * stride + t * n_mels].copy_from_slice(u.mel.values.data());
        if let Some(n) = &u.noise_mel {
            noise_mel.data_mut()[i * stride..i * stride + t * n_mels].copy_from_slice(n.values.data());
        }
        f0.data_mut()[i * t_max..i * t_max + t].copy_from_slice(&u.pitch.f0);
        let p = u.phoneme_ids.len();
        let pad = |v: &[usize]| v.iter().copied().chain(std::iter::repeat(0)).take(p_max).collect();
        out.ids.push(u.id.clone());
        out.classes.push(u.class);
        out.speaker_ids.push(u.speaker_id);
        out.phonemes.push(pad(&u.phoneme_ids));
        out.durations.push(pad(&u.durations));
        out.phoneme_mask.push((0..p_max).map(|j| j < p).collect());
        out.has_noise.push(u.noise_mel.is_some());
        out.frame_mask.push((0..t_max).map(|j| j < t).collect());
        out.transcripts.push(u.transcript.clone());
    }
    out.mel = mel;
    out.noise_mel = noise_mel;
    out.f0 = f0;
    Ok(out)
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.frame_mask.first().map_or(0, Vec::len)
    }

    pub fn frames(&self, i: usize) -> usize {
        self.frame_mask[i].iter().filter(|&&m| m).count()
    }

    fn slice_mel(&self, src: &Tensor, i: usize) -> MelSpectrogram {
        let n_mels = src.shape()[2];
        let start = i * self.max_frames() * n_mels;
        let t = self.frames(i);
        MelSpectrogram {
            values: Tensor::new(vec![t, n_mels], src.data()[start..start + t * n_mels].to_vec()),
            hop_samples: self.hop_samples,
            win_samples: self.win_samples,
        }
    }

    /// Recover utterance `i` with padding stripped. Speaker names and split are not kept.
    pub fn utterance(&self, i: usize) -> Utterance {
        let p = self.phoneme_mask[i].iter().filter(|&&m| m).count();
        let t = self.frames(i);
        let t_max = self.max_frames();
        Utterance {
            id: self.ids[i].clone(),
            speaker: String::new(),
            speaker_id: self.speaker_ids[i],
            class: self.classes[i],
            split: super::Split::Train,
            phoneme_ids: self.phonemes[i][..p].to_vec(),
            durations: self.durations[i][..p].to_vec(),
            transcript: self.transcripts[i].clone(),
            mel: self.slice_mel(&self.mel, i),
            noise_mel: self.has_noise[i].then(|| self.slice_mel(&self.noise_mel, i)),
            pitch: PitchContour {
                f0: self.f0.data()[i * t_max..i * t_max + t].to_vec(),
            },
        }
    }

    pub fn utterances(&self) -> Vec<Utterance> {
        (0..self.len()).map(|i| self.utterance(i)).collect()
    }
}
