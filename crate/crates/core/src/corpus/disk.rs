//! Clean speech and noise banks stored as plain directories.
//!
//! Speech: `<root>/<speaker>/<id>.wav` with a tab-separated alignment
//! `<id>.lab` and a transcript `<id>.txt` next to each file. Noise: every
//! `*.wav` directly under the noise root.

use std::path::{Path, PathBuf};

use super::alignment::{durations_from_spans, parse_alignment};
use super::{CleanCorpus, NoiseSource, PhonemeInventory, SourceUtterance};
use crate::audio::{read_wav, FrontendConfig};
use crate::error::{config, Error, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_wav(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

pub fn load_clean_directory(root: impl AsRef<Path>, frontend: &FrontendConfig) -> Result<CleanCorpus> {
    let root = root.as_ref();
    let mut utterances = Vec::new();
    for speaker_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let speaker = speaker_dir.file_name().unwrap().to_string_lossy().into_owned();
        for wav in sorted_entries(&speaker_dir)?.into_iter().filter(|p| is_wav(p)) {
            let id = wav.file_stem().unwrap().to_string_lossy().into_owned();
            let audio = read_wav(&wav)?;
            if audio.sample_rate != frontend.sample_rate {
                return Err(config(format!(
                    "{} is {} Hz; the frontend expects {} Hz",
                    wav.display(),
                    audio.sample_rate,
                    frontend.sample_rate
                )));
            }
            let spans = parse_alignment(&read_text(&wav.with_extension("lab"))?)?;
            let durations = durations_from_spans(&spans, frontend.frames_for(audio.len()), frontend)?;
            let transcript = read_text(&wav.with_extension("txt"))?.trim().to_string();
            utterances.push(SourceUtterance {
                id: format!("{speaker}_{id}"),
                speaker: speaker.clone(),
                phonemes: spans.into_iter().map(|s| s.phoneme).collect(),
                durations,
                transcript,
                audio,
            });
        }
    }
    if utterances.is_empty() {
        return Err(Error::Data(format!("no speech found under {}", root.display())));
    }
    let mut symbols: Vec<String> = utterances.iter().flat_map(|u| u.phonemes.iter().cloned()).collect();
    symbols.sort();
    symbols.dedup();
    Ok(CleanCorpus {
        inventory: PhonemeInventory::new(symbols),
        utterances,
    })
}

pub fn load_noise_directory(root: impl AsRef<Path>, frontend: &FrontendConfig) -> Result<Vec<NoiseSource>> {
    let root = root.as_ref();
    let mut bank = Vec::new();
    for wav in sorted_entries(root)?.into_iter().filter(|p| is_wav(p)) {
        let audio = read_wav(&wav)?;
        if audio.sample_rate != frontend.sample_rate {
            return Err(config(format!("{} has the wrong sample rate", wav.display())));
        }
        bank.push(NoiseSource {
            name: wav.file_stem().unwrap().to_string_lossy().into_owned(),
            audio,
        });
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, Waveform};

    #[test]
    fn loads_speaker_directories() {
        let fe = FrontendConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let frames = 20;
        let n = (frames - 1) * fe.hop_samples;
        let end = n as f64 / fe.sample_rate as f64;
        for spk in ["bob", "amy"] {
            let d = dir.path().join(spk);
            std::fs::create_dir(&d).unwrap();
            let w = Waveform::new((0..n).map(|i| (i as f32 * 0.01).sin() * 0.1).collect(), fe.sample_rate).unwrap();
            write_wav(d.join("u1.wav"), &w).unwrap();
            std::fs::write(d.join("u1.lab"), format!("sil\t0\t0.1\naa\t0.1\t{end}\n")).unwrap();
            std::fs::write(d.join("u1.txt"), "hi there\n").unwrap();
        }
        let c = load_clean_directory(dir.path(), &fe).unwrap();
        assert_eq!(c.utterances.len(), 2);
        assert_eq!(c.utterances[0].id, "amy_u1");
        assert_eq!(c.inventory.symbols, vec!["aa", "sil"]);
        for u in &c.utterances {
            assert_eq!(u.durations.iter().sum::<usize>(), frames);
            assert_eq!(u.transcript, "hi there");
        }
        let noise = load_noise_directory(dir.path().join("bob"), &fe).unwrap();
        assert_eq!(noise.len(), 1);
        assert!(load_clean_directory(dir.path().join("bob"), &fe).is_err());
    }
}
