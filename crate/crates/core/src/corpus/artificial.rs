//! Noisy-corpus construction from clean speech and a noise bank.
//!
//! Half the speakers (rounded up) become noisy. Noisy speakers are divided into
//! a paired group, whose noise track is kept, and an unpaired group; the two
//! groups draw from disjoint halves of the noise bank.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, ManifestEntry, ManifestHeader, NoisePartition};
use super::{CharVocab, CleanCorpus, ConditionClass, Split, Utterance};
use crate::audio::{extract_f0, mel_spectrogram, mix_at_snr, FrontendConfig, Waveform};
use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtificialConfig {
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Fraction of noisy speakers (and of noise files) assigned to the paired group.
    pub paired_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ArtificialConfig {
    fn default() -> Self {
        Self {
            snr_min_db: 5.0,
            snr_max_db: 25.0,
            paired_fraction: 0.5,
            validation_fraction: 0.1,
            seed: 7,
        }
    }
}

impl ArtificialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_min_db.is_finite() && self.snr_max_db.is_finite() && self.snr_min_db <= self.snr_max_db) {
            return Err(config("SNR range must be finite with min <= max"));
        }
        if !(0.0..=1.0).contains(&self.paired_fraction) || !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(config("fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSource {
    pub name: String,
    pub audio: Waveform,
}

/// Audio for one manifest entry.
#[derive(Clone, Debug)]
pub struct BuiltAudio {
    pub speech: Waveform,
    /// Scaled additive noise, kept for paired entries only.
    pub noise: Option<Waveform>,
}

#[derive(Clone, Debug)]
pub struct BuiltCorpus {
    pub manifest: CorpusManifest,
    /// Parallel to `manifest.entries`.
    pub audio: Vec<BuiltAudio>,
}

/// `k` of `n` items for a fraction, keeping at least one on each side.
/// Held-out utterances of one class: the rounded fraction, but at least one
/// and never all of them once the class has two or more members.
fn validation_count(n: usize, fraction: f64) -> usize {
    if n < 2 || fraction <= 0.0 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

fn split_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

pub fn build_artificial_corpus(
    clean: &CleanCorpus,
    noise_bank: &[NoiseSource],
    cfg: &ArtificialConfig,
    frontend: &FrontendConfig,
) -> Result<BuiltCorpus> {
    cfg.validate()?;
    let speakers = clean.speakers();
    if speakers.len() < 2 {
        return Err(config("at least two speakers are required"));
    }
    let n_noisy = speakers.len().div_ceil(2);
    if n_noisy < 2 {
        return Err(config(format!(
            "{} speakers give {n_noisy} noisy speaker(s); paired and unpaired groups need two",
            speakers.len()
        )));
    }
    if noise_bank.len() < 2 {
        return Err(config("the noise bank needs at least two files for disjoint paired/unpaired noise"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut shuffled = speakers.clone();
    shuffled.shuffle(&mut rng);
    let noisy = &shuffled[..n_noisy];
    let n_paired = split_count(n_noisy, cfg.paired_fraction);
    let mut paired_speakers: Vec<String> = noisy[..n_paired].to_vec();
    let mut unpaired_speakers: Vec<String> = noisy[n_paired..].to_vec();
    paired_speakers.sort();
    unpaired_speakers.sort();

    let mut noise_idx: Vec<usize> = (0..noise_bank.len()).collect();
    noise_idx.shuffle(&mut rng);
    let n_paired_noise = split_count(noise_bank.len(), cfg.paired_fraction);
    let paired_noise = &noise_idx[..n_paired_noise];
    let unpaired_noise = &noise_idx[n_paired_noise..];

    let mut entries = Vec::with_capacity(clean.utterances.len());
    let mut audio = Vec::with_capacity(clean.utterances.len());
    let vocab = CharVocab::default();
    for u in &clean.utterances {
        vocab.encode(&u.transcript)?;
        clean.inventory.encode(&u.phonemes)?;
        let class = if paired_speakers.contains(&u.speaker) {
            ConditionClass::PairedNoisy
        } else if unpaired_speakers.contains(&u.speaker) {
            ConditionClass::UnpairedNoisy
        } else {
            ConditionClass::Clean
        };
        let mut entry = ManifestEntry {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            class,
            split: Split::Train,
            audio: format!("audio/{}.wav", u.id),
            noise: None,
            features: None,
            phonemes: u.phonemes.clone(),
            durations: u.durations.clone(),
            transcript: u.transcript.clone(),
            noise_source: None,
            snr_db: None,
            noise_offset: None,
            noise_gain: None,
            clip_gain: None,
        };
        let built = if class == ConditionClass::Clean {
            BuiltAudio {
                speech: u.audio.clone(),
                noise: None,
            }
        } else {
            let pool = if class == ConditionClass::PairedNoisy { paired_noise } else { unpaired_noise };
            let src = &noise_bank[pool[rng.gen_range(0..pool.len())]];
            let snr = if cfg.snr_min_db == cfg.snr_max_db {
                cfg.snr_min_db
            } else {
                rng.gen_range(cfg.snr_min_db..cfg.snr_max_db)
            };
            let offset = rng.gen_range(0..src.audio.len());
            let mix = mix_at_snr(&u.audio, &src.audio, snr, offset)?;
            entry.noise_source = Some(src.name.clone());
            entry.snr_db = Some(snr);
            entry.noise_offset = Some(offset);
            entry.noise_gain = Some(mix.noise_gain);
            entry.clip_gain = Some(mix.clip_gain);
            let keep = class == ConditionClass::PairedNoisy;
            if keep {
                entry.noise = Some(format!("noise/{}.wav", u.id));
            }
            BuiltAudio {
                speech: mix.noisy,
                noise: keep.then_some(mix.scaled_noise),
            }
        };
        entries.push(entry);
        audio.push(built);
    }
    for class in [ConditionClass::Clean, ConditionClass::PairedNoisy, ConditionClass::UnpairedNoisy] {
        let mut idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].class == class).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..validation_count(idx.len(), cfg.validation_fraction)] {
            entries[i].split = Split::Validation;
        }
    }

    let names = |idx: &[usize]| {
        let mut v: Vec<String> = idx.iter().map(|&i| noise_bank[i].name.clone()).collect();
        v.sort();
        v
    };
    let manifest = CorpusManifest {
        header: ManifestHeader::new(
            frontend.clone(),
            clean.inventory.clone(),
            speakers,
            NoisePartition {
                paired_speakers,
                unpaired_speakers,
                paired_noise: names(paired_noise),
                unpaired_noise: names(unpaired_noise),
            },
            [cfg.snr_min_db, cfg.snr_max_db],
            cfg.seed,
        ),
        entries,
    };
    manifest.validate_partition()?;
    Ok(BuiltCorpus { manifest, audio })
}

impl BuiltCorpus {
    /// Extract features from the in-memory audio.
    pub fn utterances(&self) -> Result<Vec<Utterance>> {
        let fe = &self.manifest.header.frontend;
        self.manifest
            .entries
            .par_iter()
            .zip(&self.audio)
            .map(|(e, a)| self.manifest.featurize(e, &a.speech, a.noise.as_ref(), fe))
            .collect()
    }
}

impl CorpusManifest {
    pub(crate) fn featurize(
        &self,
        e: &ManifestEntry,
        speech: &Waveform,
        noise: Option<&Waveform>,
        fe: &FrontendConfig,
    ) -> Result<Utterance> {
        let mel = mel_spectrogram(speech, fe)?;
        let pitch = extract_f0(speech, fe)?;
        let noise_mel = noise.map(|n| mel_spectrogram(n, fe)).transpose()?;
        self.assemble(e, mel, noise_mel, pitch)
    }

    pub(crate) fn assemble(
        &self,
        e: &ManifestEntry,
        mel: crate::audio::MelSpectrogram,
        noise_mel: Option<crate::audio::MelSpectrogram>,
        pitch: crate::audio::PitchContour,
    ) -> Result<Utterance> {
        let speaker_id = self
            .header
            .speakers
            .iter()
            .position(|s| s == &e.speaker)
            .ok_or_else(|| crate::Error::Data(format!("{}: speaker {} missing from header", e.id, e.speaker)))?;
        let u = Utterance {
            id: e.id.clone(),
            speaker: e.speaker.clone(),
            speaker_id,
            class: e.class,
            split: e.split,
            phoneme_ids: self.header.phonemes.encode(&e.phonemes)?,
            durations: e.durations.clone(),
            transcript: CharVocab::default().encode(&e.transcript)?,
            mel,
            noise_mel,
            pitch,
        };
        u.validate()?;
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::snr_db;
    use crate::corpus::{generate_toy_corpus, generate_toy_noise_bank, ToyCorpusConfig};

    fn toy(n_speakers: usize, n_noise: usize) -> (CleanCorpus, Vec<NoiseSource>, FrontendConfig) {
        let fe = FrontendConfig::default();
        let cfg = ToyCorpusConfig {
            n_speakers,
            n_utterances: 2 * n_speakers,
            n_noise_files: n_noise,
            ..Default::default()
        };
        (
            generate_toy_corpus(&cfg, &fe).unwrap(),
            generate_toy_noise_bank(&cfg, &fe).unwrap(),
            fe,
        )
    }

    #[test]
    fn every_class_keeps_a_validation_utterance() {
        assert_eq!(validation_count(1, 0.5), 0);
        assert_eq!(validation_count(2, 0.01), 1);
        assert_eq!(validation_count(10, 0.25), 3);
        assert_eq!(validation_count(3, 0.99), 2);
        assert_eq!(validation_count(5, 0.0), 0);
        let (clean, bank, fe) = toy(4, 2);
        let built = build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe).unwrap();
        for class in [ConditionClass::Clean, ConditionClass::PairedNoisy, ConditionClass::UnpairedNoisy] {
            let of = |s: Split| built.manifest.entries.iter().filter(|e| e.class == class && e.split == s).count();
            assert_eq!(of(Split::Validation), 1, "{class:?}");
            assert!(of(Split::Train) >= 1);
        }
    }

    #[test]
    fn four_speakers_two_noise_files() {
        let (clean, bank, fe) = toy(4, 2);
        let built = build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe).unwrap();
        let p = &built.manifest.header.noise_partition;
        assert_eq!(p.paired_speakers.len(), 1);
        assert_eq!(p.unpaired_speakers.len(), 1);
        assert_eq!(p.paired_noise.len(), 1);
        assert_eq!(p.unpaired_noise.len(), 1);
        assert_ne!(p.paired_noise, p.unpaired_noise);
        for (e, a) in built.manifest.entries.iter().zip(&built.audio) {
            assert_eq!(e.noise.is_some(), e.class == ConditionClass::PairedNoisy);
            assert_eq!(a.noise.is_some(), e.class == ConditionClass::PairedNoisy);
            match e.class {
                ConditionClass::PairedNoisy => assert_eq!(e.noise_source.as_ref(), p.paired_noise.first()),
                ConditionClass::UnpairedNoisy => assert_eq!(e.noise_source.as_ref(), p.unpaired_noise.first()),
                ConditionClass::Clean => assert!(e.noise_source.is_none()),
            }
        }
    }

    #[test]
    fn collapsed_snr_range_is_exact() {
        let (clean, bank, fe) = toy(6, 4);
        let cfg = ArtificialConfig {
            snr_min_db: 10.0,
            snr_max_db: 10.0,
            ..Default::default()
        };
        let built = build_artificial_corpus(&clean, &bank, &cfg, &fe).unwrap();
        let mut checked = 0;
        for a in &built.audio {
            if let Some(n) = &a.noise {
                let speech: Vec<f32> = a.speech.samples.iter().zip(&n.samples).map(|(x, y)| x - y).collect();
                assert!((snr_db(&speech, &n.samples) - 10.0).abs() < 0.01);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn unsatisfiable_splits_are_config_errors() {
        let (clean, bank, fe) = toy(2, 4);
        assert!(matches!(
            build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe),
            Err(crate::Error::Config(_))
        ));
        let (clean, bank, fe) = toy(4, 1);
        assert!(matches!(
            build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_manifest() {
        let (clean, bank, fe) = toy(5, 4);
        let a = build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe).unwrap();
        let b = build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.manifest.header.noise_partition.paired_speakers.len() + a.manifest.header.noise_partition.unpaired_speakers.len(), 3);
    }
}
