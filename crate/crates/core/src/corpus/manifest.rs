//! JSON-lines corpus manifest: one header line followed by one line per utterance.
//!
//! Relative paths inside entries are resolved against the manifest's directory.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::artificial::BuiltCorpus;
use super::{ConditionClass, PhonemeInventory, Split, Utterance};
use crate::archive::TensorArchive;
use crate::audio::{read_wav, write_wav, FrontendConfig, MelSpectrogram, PitchContour};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "denoise-tts-manifest";
pub const MANIFEST_VERSION: u32 = 1;
const FEATURES_KIND: &str = "features";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePartition {
    pub paired_speakers: Vec<String>,
    pub unpaired_speakers: Vec<String>,
    pub paired_noise: Vec<String>,
    pub unpaired_noise: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub frontend: FrontendConfig,
    pub phonemes: PhonemeInventory,
    /// Speaker names in embedding-table order.
    pub speakers: Vec<String>,
    pub noise_partition: NoisePartition,
    pub snr_range_db: [f64; 2],
    pub seed: u64,
}

impl ManifestHeader {
    pub fn new(
        frontend: FrontendConfig,
        phonemes: PhonemeInventory,
        speakers: Vec<String>,
        noise_partition: NoisePartition,
        snr_range_db: [f64; 2],
        seed: u64,
    ) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            frontend,
            phonemes,
            speakers,
            noise_partition,
            snr_range_db,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub class: ConditionClass,
    pub split: Split,
    /// Speech waveform (noisy for noisy classes).
    pub audio: String,
    /// Additive noise waveform, paired entries only.
    pub noise: Option<String>,
    /// Cached feature archive.
    pub features: Option<String>,
    pub phonemes: Vec<String>,
    pub durations: Vec<usize>,
    pub transcript: String,
    pub noise_source: Option<String>,
    pub snr_db: Option<f64>,
    pub noise_offset: Option<usize>,
    pub noise_gain: Option<f64>,
    pub clip_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_reader(r: impl BufRead, origin: &str) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(l) if l.trim().is_empty()));
        let data_err = |line: usize, m: String| Error::Data(format!("{origin}:{}: {m}", line + 1));
        let (n, first) = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{origin}: empty manifest")))?;
        let first = first.map_err(|e| Error::io(origin, e))?;
        let header: ManifestHeader =
            serde_json::from_str(&first).map_err(|e| data_err(n, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(data_err(
                n,
                format!("unsupported manifest {} v{}", header.format, header.version),
            ));
        }
        header.frontend.validate()?;
        let mut entries = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(origin, e))?;
            entries.push(serde_json::from_str(&line).map_err(|e| data_err(n, format!("bad entry: {e}")))?);
        }
        let m = Self { header, entries };
        m.validate_partition()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f), &path.display().to_string())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized manifest.
    pub fn checksum(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_jsonl()?.as_bytes())))
    }

    /// Check ids, speaker/noise disjointness and per-entry consistency with the partition.
    pub fn validate_partition(&self) -> Result<()> {
        let p = &self.header.noise_partition;
        let err = |m: String| Err(Error::Data(m));
        let overlap = |a: &[String], b: &[String]| a.iter().find(|x| b.contains(x)).cloned();
        if let Some(s) = overlap(&p.paired_speakers, &p.unpaired_speakers) {
            return err(format!("speaker {s} is both paired and unpaired"));
        }
        if let Some(n) = overlap(&p.paired_noise, &p.unpaired_noise) {
            return err(format!("noise file {n} is shared by paired and unpaired speakers"));
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return err(format!("duplicate utterance id {}", e.id));
            }
            if !self.header.speakers.contains(&e.speaker) {
                return err(format!("{}: unknown speaker {}", e.id, e.speaker));
            }
            let expected = if p.paired_speakers.contains(&e.speaker) {
                ConditionClass::PairedNoisy
            } else if p.unpaired_speakers.contains(&e.speaker) {
                ConditionClass::UnpairedNoisy
            } else {
                ConditionClass::Clean
            };
            if e.class != expected {
                return err(format!("{}: class {:?} contradicts speaker partition", e.id, e.class));
            }
            if (e.class == ConditionClass::PairedNoisy) != e.noise.is_some() {
                return err(format!("{}: noise reference must be present exactly for paired entries", e.id));
            }
            let pool = match e.class {
                ConditionClass::Clean => None,
                ConditionClass::PairedNoisy => Some(&p.paired_noise),
                ConditionClass::UnpairedNoisy => Some(&p.unpaired_noise),
            };
            match (pool, &e.noise_source) {
                (None, None) => {}
                (Some(pool), Some(src)) if pool.contains(src) => {}
                _ => return err(format!("{}: noise source outside its partition", e.id)),
            }
            if e.phonemes.len() != e.durations.len() {
                return err(format!("{}: phoneme and duration counts differ", e.id));
            }
        }
        Ok(())
    }

    fn load_entry(&self, e: &ManifestEntry, root: &Path) -> Result<Utterance> {
        let fe = &self.header.frontend;
        if let Some(rel) = &e.features {
            let path = root.join(rel);
            if path.exists() {
                let (mel, noise_mel, pitch) = read_features(&path, fe)?;
                return self.assemble(e, mel, noise_mel, pitch);
            }
        }
        let speech = read_wav(root.join(&e.audio))?;
        let noise = e.noise.as_ref().map(|n| read_wav(root.join(n))).transpose()?;
        self.featurize(e, &speech, noise.as_ref(), fe)
    }
}

fn features_archive(u: &Utterance, fe: &FrontendConfig) -> Result<TensorArchive> {
    let mut a = TensorArchive::new(serde_json::json!({
        "kind": FEATURES_KIND,
        "id": u.id,
        "frontend": fe,
    }));
    a.push("mel", u.mel.values.clone());
    a.push("f0", Tensor::new(vec![u.pitch.f0.len()], u.pitch.f0.clone()));
    if let Some(n) = &u.noise_mel {
        a.push("noise_mel", n.values.clone());
    }
    Ok(a)
}

fn read_features(path: &Path, fe: &FrontendConfig) -> Result<(MelSpectrogram, Option<MelSpectrogram>, PitchContour)> {
    let a = TensorArchive::read(path)?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if a.meta.get("kind").and_then(|k| k.as_str()) != Some(FEATURES_KIND) {
        return Err(bad("not a feature archive"));
    }
    let stored: FrontendConfig =
        serde_json::from_value(a.meta["frontend"].clone()).map_err(|_| bad("missing front-end settings"))?;
    if &stored != fe {
        return Err(bad("features were extracted with different front-end settings"));
    }
    let mel = MelSpectrogram::new(a.get("mel").ok_or_else(|| bad("no mel tensor"))?.clone(), fe)?;
    let f0 = a.get("f0").ok_or_else(|| bad("no f0 tensor"))?.data().to_vec();
    let noise_mel = a.get("noise_mel").map(|t| MelSpectrogram::new(t.clone(), fe)).transpose()?;
    Ok((mel, noise_mel, PitchContour { f0 }))
}

/// Read a manifest and every utterance it lists, using cached features when present.
pub fn load_utterances(path: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<Utterance>)> {
    let path = path.as_ref();
    let manifest = CorpusManifest::read(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let utts = manifest
        .entries
        .par_iter()
        .map(|e| manifest.load_entry(e, &root))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, utts))
}

impl BuiltCorpus {
    /// Write WAVs, feature archives and `manifest.jsonl` under `dir`; returns the manifest path.
    ///
    /// Features are extracted from the written 16-bit files so that cached and
    /// recomputed features agree.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for sub in ["audio", "noise", "features"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut manifest = self.manifest.clone();
        for e in &mut manifest.entries {
            e.features = Some(format!("features/{}.bin", e.id));
        }
        manifest
            .entries
            .par_iter()
            .zip(&self.audio)
            .try_for_each(|(e, a)| -> Result<()> {
                write_wav(dir.join(&e.audio), &a.speech)?;
                if let (Some(rel), Some(n)) = (&e.noise, &a.noise) {
                    write_wav(dir.join(rel), n)?;
                }
                let mut bare = e.clone();
                bare.features = None;
                let u = manifest.load_entry(&bare, dir)?;
                features_archive(&u, &manifest.header.frontend)?.write(dir.join(e.features.as_ref().unwrap()))
            })?;
        let path = dir.join("manifest.jsonl");
        manifest.write(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_artificial_corpus, generate_toy_corpus, generate_toy_noise_bank, ArtificialConfig, ToyCorpusConfig};

    fn built() -> BuiltCorpus {
        let fe = FrontendConfig::default();
        let cfg = ToyCorpusConfig {
            n_speakers: 4,
            n_utterances: 8,
            ..Default::default()
        };
        let clean = generate_toy_corpus(&cfg, &fe).unwrap();
        let bank = generate_toy_noise_bank(&cfg, &fe).unwrap();
        build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe).unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let b = built();
        let text = b.manifest.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 1 + b.manifest.entries.len());
        let back = CorpusManifest::from_reader(text.as_bytes(), "mem").unwrap();
        assert_eq!(back, b.manifest);
    }

    #[test]
    fn cached_and_recomputed_features_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = built().write(dir.path()).unwrap();
        let (m, cached) = load_utterances(&path).unwrap();
        for f in std::fs::read_dir(dir.path().join("features")).unwrap() {
            std::fs::remove_file(f.unwrap().path()).unwrap();
        }
        let (_, fresh) = load_utterances(&path).unwrap();
        assert_eq!(cached.len(), m.entries.len());
        for (a, b) in cached.iter().zip(&fresh) {
            assert_eq!(a.mel.values, b.mel.values);
            assert_eq!(a.pitch.f0, b.pitch.f0);
            assert_eq!(a.noise_mel.as_ref().map(|n| &n.values), b.noise_mel.as_ref().map(|n| &n.values));
        }
    }

    #[test]
    fn contradictory_partition_is_rejected() {
        let mut m = built().manifest;
        let p = m.header.noise_partition.paired_speakers[0].clone();
        m.header.noise_partition.unpaired_speakers.push(p);
        assert!(matches!(m.validate_partition(), Err(Error::Data(_))));

        let mut m = built().manifest;
        let shared = m.header.noise_partition.paired_noise[0].clone();
        m.header.noise_partition.unpaired_noise.push(shared);
        assert!(m.validate_partition().is_err());

        let mut m = built().manifest;
        let e = m.entries.iter_mut().find(|e| e.class == ConditionClass::PairedNoisy).unwrap();
        e.noise = None;
        assert!(m.validate_partition().is_err());
    }

    #[test]
    fn bad_header_is_a_data_error() {
        let r = CorpusManifest::from_reader("{\"format\":\"x\"}\n".as_bytes(), "mem");
        assert!(matches!(r, Err(Error::Data(_))));
        assert!(matches!(CorpusManifest::from_reader("".as_bytes(), "mem"), Err(Error::Data(_))));
    }
}
