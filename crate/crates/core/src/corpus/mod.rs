//! Corpora: toy data generation, noisy-corpus construction, manifests,
//! alignment ingestion and batching.

mod alignment;
mod artificial;
mod batch;
mod disk;
mod manifest;
mod toy;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, PitchContour};

pub use alignment::{durations_from_spans, load_durations, parse_alignment, AlignedSpan};
pub use artificial::{build_artificial_corpus, ArtificialConfig, BuiltAudio, BuiltCorpus, NoiseSource};
pub use batch::{make_batch, PaddedBatch};
pub use disk::{load_clean_directory, load_noise_directory};
pub use manifest::{load_utterances, CorpusManifest, ManifestEntry, ManifestHeader, NoisePartition, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use toy::{generate_toy_corpus, generate_toy_noise_bank, CleanCorpus, SourceUtterance, ToyCorpusConfig};
pub use vocab::{CharVocab, PhonemeInventory};

/// Which noise-conditioning route an utterance takes during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionClass {
    Clean,
    /// Noisy speech stored with its exact additive noise.
    PairedNoisy,
    /// Noisy speech without a noise reference.
    UnpairedNoisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// One training record with features extracted.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub speaker_id: usize,
    pub class: ConditionClass,
    pub split: Split,
    pub phoneme_ids: Vec<usize>,
    pub durations: Vec<usize>,
    /// Character ids (blank excluded) used as CTC targets.
    pub transcript: Vec<usize>,
    pub mel: MelSpectrogram,
    /// Present exactly for paired noisy utterances.
    pub noise_mel: Option<MelSpectrogram>,
    pub pitch: PitchContour,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.frames()
    }

    /// Check the record-level invariants.
    pub fn validate(&self) -> crate::Result<()> {
        use crate::error::Error;
        let bad = |m: String| Err(Error::Data(format!("utterance {}: {m}", self.id)));
        if self.phoneme_ids.is_empty() {
            return bad("no phonemes".into());
        }
        if self.durations.len() != self.phoneme_ids.len() {
            return bad(format!(
                "{} durations for {} phonemes",
                self.durations.len(),
                self.phoneme_ids.len()
            ));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.frames() {
            return bad(format!("durations sum to {total} but the mel has {} frames", self.frames()));
        }
        if self.pitch.f0.len() != self.frames() {
            return bad("pitch length differs from mel frames".into());
        }
        match (&self.noise_mel, self.class) {
            (Some(n), ConditionClass::PairedNoisy) if n.frames() != self.frames() => {
                bad("noise mel length differs from mel".into())
            }
            (Some(_), ConditionClass::PairedNoisy) | (None, ConditionClass::Clean | ConditionClass::UnpairedNoisy) => Ok(()),
            (None, ConditionClass::PairedNoisy) => bad("paired utterance without noise".into()),
            (Some(_), _) => bad("noise reference on a non-paired utterance".into()),
        }
    }
}
