use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use denoise_tts::archive::TensorArchive;
use denoise_tts::audio::write_wav;
use denoise_tts::checkpoint::Checkpoint;
use denoise_tts::corpus::{
    build_artificial_corpus, generate_toy_corpus, generate_toy_noise_bank, load_clean_directory, load_noise_directory,
    load_utterances, ConditionClass, CorpusManifest, Split, Utterance,
};
use denoise_tts::model::{Granularity, Model, EXTRACTOR};
use denoise_tts::synth::{evaluate, griffin_lim, loss_curve_png, mel_panels_png, synthesize, SynthesisRequest};
use denoise_tts::train::{train_stage, LossRecord, Stage, TrainObserver, TrainState};
use denoise_tts::Tensor;
use log::info;

use crate::config::{CorpusSource, RunConfig};
use crate::error::{CliError, Result};

pub const LOSS_LOG: &str = "losses.jsonl";
pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(denoise_tts::Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Output layout under the run's root directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.output_root() }
    }

    fn labeled(&self, base: &str, label: Option<&str>) -> PathBuf {
        match label {
            Some(l) => self.root.join(format!("{base}-{l}")),
            None => self.root.join(base),
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus().join("manifest.jsonl")
    }

    pub fn extractor(&self) -> PathBuf {
        self.root.join("extractor")
    }

    pub fn joint(&self, label: Option<&str>) -> PathBuf {
        self.labeled("joint", label)
    }

    pub fn eval(&self, label: Option<&str>) -> PathBuf {
        self.labeled("eval", label)
    }

    pub fn synth(&self, label: Option<&str>) -> PathBuf {
        self.labeled("synth", label)
    }
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let fe = &cfg.frontend;
    let (clean, bank) = match cfg.corpus.source {
        CorpusSource::Toy => (generate_toy_corpus(&cfg.corpus.toy, fe)?, generate_toy_noise_bank(&cfg.corpus.toy, fe)?),
        CorpusSource::Directory => (
            load_clean_directory(cfg.corpus.speech_dir.as_ref().unwrap(), fe)?,
            load_noise_directory(cfg.corpus.noise_dir.as_ref().unwrap(), fe)?,
        ),
    };
    let built = build_artificial_corpus(&clean, &bank, &cfg.corpus.mixing, fe)?;
    let dir = layout.corpus();
    create_dir(&dir)?;
    let path = built.write(&dir)?;
    write_config(cfg, &layout.root)?;
    let manifest = &built.manifest;
    let p = &manifest.header.noise_partition;
    println!("manifest: {}", path.display());
    println!("checksum: {}", manifest.checksum()?);
    println!(
        "speakers: {} total, {} paired, {} unpaired",
        manifest.header.speakers.len(),
        p.paired_speakers.len(),
        p.unpaired_speakers.len()
    );
    for class in [ConditionClass::Clean, ConditionClass::PairedNoisy, ConditionClass::UnpairedNoisy] {
        let count = |s: Split| manifest.entries.iter().filter(|e| e.class == class && e.split == s).count();
        println!("{class:?}: {} train, {} validation", count(Split::Train), count(Split::Validation));
    }
    print!("{}", snr_histogram(manifest, 5));
    Ok(())
}

/// Text histogram of mixing SNRs over the configured range.
pub fn snr_histogram(m: &CorpusManifest, bins: usize) -> String {
    let [lo, hi] = m.header.snr_range_db;
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for s in m.entries.iter().filter_map(|e| e.snr_db) {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut out = String::from("snr histogram (dB):\n");
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        out.push_str(&format!("  [{:6.2}, {:6.2}) {:4} {}\n", a, a + width, c, "#".repeat(*c)));
    }
    out
}

struct Corpus {
    manifest: CorpusManifest,
    checksum: String,
    utts: Vec<Utterance>,
}

impl Corpus {
    fn load(cfg: &RunConfig, layout: &Layout) -> Result<Self> {
        let path = layout.manifest();
        if !path.exists() {
            return Err(CliError::Config(format!("no manifest at {}; run `prepare` first", path.display())));
        }
        let (manifest, utts) = load_utterances(&path)?;
        if manifest.header.frontend != cfg.frontend {
            return Err(CliError::Config("frontend settings differ from the prepared corpus".into()));
        }
        let checksum = manifest.checksum()?;
        Ok(Self { manifest, checksum, utts })
    }

    fn split(&self, s: Split) -> Vec<Utterance> {
        self.utts.iter().filter(|u| u.split == s).cloned().collect()
    }

    fn model_config(&self, cfg: &RunConfig) -> denoise_tts::model::ModelConfig {
        cfg.model_config(self.manifest.header.phonemes.len(), self.manifest.header.speakers.len())
    }
}

/// Writes the loss log and checkpoints of one training stage.
struct RunDir {
    dir: PathBuf,
    log: BufWriter<File>,
    checksum: String,
}

impl RunDir {
    /// Opens the log, keeping only records up to `keep_through` when resuming.
    fn open(dir: &Path, checksum: &str, keep_through: Option<usize>) -> Result<Self> {
        create_dir(dir)?;
        let path = dir.join(LOSS_LOG);
        let kept = match keep_through {
            Some(step) => read_loss_log(&path)?.into_iter().filter(|r| r.step <= step).collect(),
            None => Vec::new(),
        };
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut run = Self {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
            checksum: checksum.to_string(),
        };
        for r in &kept {
            run.write_record(r)?;
        }
        Ok(run)
    }

    fn write_record(&mut self, rec: &LossRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(denoise_tts::Error::from)?;
        writeln!(self.log, "{line}").map_err(|e| io_err(&self.dir, e))
    }
}

impl TrainObserver for RunDir {
    fn record(&mut self, rec: &LossRecord) -> denoise_tts::Result<()> {
        if rec.term.starts_with("val_") {
            info!("{} step {}: {} = {:.6}", rec.stage.label(), rec.step, rec.term, rec.value);
        }
        self.write_record(rec).map_err(into_core)
    }

    fn checkpoint(&mut self, model: &Model, state: &TrainState, best: bool) -> denoise_tts::Result<()> {
        self.log.flush().map_err(|e| denoise_tts::Error::Io {
            path: self.dir.display().to_string(),
            source: e,
        })?;
        let ck = Checkpoint {
            model: model.clone(),
            state: Some(state.clone()),
            manifest_checksum: Some(self.checksum.clone()),
        };
        ck.save(self.dir.join(if best { BEST } else { LAST }))
    }
}

fn into_core(e: CliError) -> denoise_tts::Error {
    match e {
        CliError::Core(c) => c,
        other => denoise_tts::Error::Data(other.to_string()),
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(denoise_tts::Error::from)?);
        }
    }
    Ok(out)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Resume state for `stage` from `dir/last.ckpt`.
fn resume(dir: &Path, stage: Stage, corpus: &Corpus, expected: &denoise_tts::model::ModelConfig) -> Result<(Model, TrainState)> {
    let ck = load_checkpoint(&dir.join(LAST))?;
    let state = ck
        .state
        .ok_or_else(|| CliError::Config("checkpoint holds no training state".into()))?;
    if state.stage != stage {
        return Err(CliError::Config(format!("checkpoint belongs to the {} stage", state.stage.label())));
    }
    if &ck.model.config != expected {
        return Err(CliError::Config("checkpoint model config differs from the run config".into()));
    }
    if ck.manifest_checksum.as_deref() != Some(&corpus.checksum) {
        return Err(CliError::Config("checkpoint was trained on a different manifest".into()));
    }
    Ok((ck.model, state))
}

pub struct StageOptions {
    pub resume: bool,
    pub steps: Option<usize>,
}

fn stage_config(cfg: &RunConfig, stage: Stage, steps: Option<usize>) -> denoise_tts::train::TrainConfig {
    let mut t = cfg.train.clone();
    if let Some(s) = steps {
        match stage {
            Stage::Extractor => t.extractor_steps = s,
            Stage::Joint => t.joint_steps = s,
        }
    }
    t
}

pub fn train_extractor(cfg: &RunConfig, opts: &StageOptions) -> Result<()> {
    let layout = Layout::new(cfg);
    let corpus = Corpus::load(cfg, &layout)?;
    let model_cfg = corpus.model_config(cfg);
    let dir = layout.extractor();
    let (mut model, mut state) = if opts.resume {
        resume(&dir, Stage::Extractor, &corpus, &model_cfg)?
    } else {
        let m = Model::new(model_cfg, cfg.seed)?;
        let s = TrainState::new(Stage::Extractor, &m, &cfg.train);
        (m, s)
    };
    let tcfg = stage_config(cfg, Stage::Extractor, opts.steps);
    write_config(cfg, &dir)?;
    let mut run = RunDir::open(&dir, &corpus.checksum, opts.resume.then_some(state.step))?;
    let (train, val) = (corpus.split(Split::Train), corpus.split(Split::Validation));
    train_stage(&mut model, &mut state, &train, &val, &tcfg, &mut run)?;
    println!("extractor stage finished at step {}: {}", state.step, dir.join(LAST).display());
    Ok(())
}

pub enum WarmStart {
    Default,
    Path(PathBuf),
    Cold,
}

pub struct JointOptions {
    pub stage: StageOptions,
    pub warm: WarmStart,
    pub label: Option<String>,
}

pub fn train_joint(cfg: &RunConfig, opts: &JointOptions) -> Result<PathBuf> {
    let layout = Layout::new(cfg);
    if matches!(opts.warm, WarmStart::Cold) && cfg.ablation.fix_extractor && !opts.stage.resume {
        return Err(CliError::Config(
            "fix_extractor needs a warm-started extractor; it cannot be combined with --cold-start".into(),
        ));
    }
    let corpus = Corpus::load(cfg, &layout)?;
    let model_cfg = corpus.model_config(cfg);
    let dir = layout.joint(opts.label.as_deref());
    let (mut model, mut state) = if opts.stage.resume {
        resume(&dir, Stage::Joint, &corpus, &model_cfg)?
    } else {
        let mut m = Model::new(model_cfg, cfg.seed)?;
        let warm = match &opts.warm {
            WarmStart::Cold => None,
            WarmStart::Path(p) => Some(p.clone()),
            WarmStart::Default => Some(layout.extractor().join(LAST)),
        };
        if let Some(path) = warm {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "no extractor checkpoint at {}; run `train-extractor` first or pass --cold-start",
                    path.display()
                )));
            }
            let ck = Checkpoint::load(&path)?;
            if ck.manifest_checksum.as_deref() != Some(&corpus.checksum) {
                return Err(CliError::Config("extractor checkpoint was trained on a different manifest".into()));
            }
            m.copy_namespace(&ck.model, EXTRACTOR)?;
            info!("extractor warm-started from {}", path.display());
        }
        let s = TrainState::new(Stage::Joint, &m, &cfg.train);
        (m, s)
    };
    let tcfg = stage_config(cfg, Stage::Joint, opts.stage.steps);
    write_config(cfg, &dir)?;
    let mut run = RunDir::open(&dir, &corpus.checksum, opts.stage.resume.then_some(state.step))?;
    let (train, val) = (corpus.split(Split::Train), corpus.split(Split::Validation));
    train_stage(&mut model, &mut state, &train, &val, &tcfg, &mut run)?;
    println!("joint stage finished at step {}: {}", state.step, dir.join(LAST).display());
    Ok(dir)
}

/// Joint training plus evaluation for every granularity, labeled by name.
pub fn sweep_granularity(cfg: &RunConfig, opts: &JointOptions) -> Result<()> {
    for g in Granularity::ALL {
        let mut c = cfg.clone();
        c.ablation.granularity = g;
        let o = JointOptions {
            stage: StageOptions {
                resume: opts.stage.resume,
                steps: opts.stage.steps,
            },
            warm: match &opts.warm {
                WarmStart::Default => WarmStart::Default,
                WarmStart::Path(p) => WarmStart::Path(p.clone()),
                WarmStart::Cold => WarmStart::Cold,
            },
            label: Some(g.label().to_string()),
        };
        train_joint(&c, &o)?;
        eval(&c, o.label.as_deref(), None)?;
    }
    Ok(())
}

fn joint_checkpoint(layout: &Layout, label: Option<&str>, explicit: Option<&Path>) -> Result<Checkpoint> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| layout.joint(label).join(LAST));
    load_checkpoint(&path)
}

pub fn eval(cfg: &RunConfig, label: Option<&str>, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let layout = Layout::new(cfg);
    let corpus = Corpus::load(cfg, &layout)?;
    let ck = joint_checkpoint(&layout, label, checkpoint)?;
    if ck.model.config.frontend != corpus.manifest.header.frontend {
        return Err(CliError::Config("checkpoint frontend differs from the corpus".into()));
    }
    let utts = corpus.split(cfg.eval.split);
    let dir = layout.eval(label);
    write_config(cfg, &dir)?;
    let report = evaluate(&ck.model, &utts, Some(&dir.join("plots")), cfg.eval.max_plots)?;
    let path = dir.join("report.json");
    report.write_json(&path)?;
    let a = &report.aggregate;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("report: {}", path.display());
    println!("note: {}", report.note);
    println!(
        "utterances {} | extractor MAE {} | SNR gain {} dB | mel MAE {:.4} | MSSIM loss {:.4} | duration error {:.3} frames",
        a.utterances,
        opt(a.extractor_mae),
        opt(a.snr_gain_db),
        a.mel_mae,
        a.mel_mssim_loss,
        a.duration_error
    );
    Ok(dir)
}

pub struct SynthOptions {
    pub phonemes: String,
    pub speaker: Option<String>,
    pub durations: Option<Vec<usize>>,
    pub name: String,
    pub label: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub granularity: Option<Granularity>,
}

pub fn synth(cfg: &RunConfig, opts: &SynthOptions) -> Result<PathBuf> {
    let layout = Layout::new(cfg);
    let path = layout.manifest();
    if !path.exists() {
        return Err(CliError::Config(format!("no manifest at {}; run `prepare` first", path.display())));
    }
    let header = CorpusManifest::read(&path)?.header;
    let ck = joint_checkpoint(&layout, opts.label.as_deref(), opts.checkpoint.as_deref())?;
    let phoneme_ids = header.phonemes.parse(&opts.phonemes)?;
    let speaker = match &opts.speaker {
        Some(name) => header
            .speakers
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| CliError::Config(format!("unknown speaker {name:?}")))?,
        None => 0,
    };
    let req = SynthesisRequest {
        phoneme_ids,
        speaker,
        durations: opts.durations.clone(),
        granularity: opts.granularity,
    };
    let out = synthesize(&ck.model, &req)?;
    let fe = &ck.model.config.frontend;
    let wave = griffin_lim(&out.mel, fe, cfg.synth.griffin_lim_iterations)?;
    let dir = layout.synth(opts.label.as_deref());
    write_config(cfg, &dir)?;
    write_wav(dir.join(format!("{}.wav", opts.name)), &wave)?;
    let range = ck.model.config.mel_range();
    mel_panels_png(&dir.join(format!("{}.png", opts.name)), &[&out.mel], range)?;
    let meta = serde_json::json!({
        "kind": "synthesis",
        "phonemes": opts.phonemes,
        "speaker": header.speakers.get(speaker),
        "durations": out.durations,
    });
    let mut a = TensorArchive::new(meta);
    a.push("mel", out.mel.values.clone());
    a.push("f0", Tensor::new(vec![out.f0.len()], out.f0.clone()));
    a.write(dir.join(format!("{}.mel", opts.name)))?;
    println!(
        "{}: {} frames, {} samples -> {}",
        opts.name,
        out.mel.frames(),
        wave.len(),
        dir.join(format!("{}.wav", opts.name)).display()
    );
    Ok(dir)
}

/// Loss-curve images for every stage directory that has a loss log.
pub fn plot(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let root = cfg.output_root();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| io_err(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LOSS_LOG).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Config(format!("no loss logs under {}", root.display())));
    }
    let mut written = Vec::new();
    for dir in dirs {
        let records = read_loss_log(&dir.join(LOSS_LOG))?;
        let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
        for r in records.iter().filter(|r| r.term != "adversarial_skipped") {
            match series.iter_mut().find(|(t, _)| *t == r.term) {
                Some((_, s)) => s.push((r.step, r.value)),
                None => series.push((r.term.clone(), vec![(r.step, r.value)])),
            }
        }
        let path = dir.join("losses.png");
        loss_curve_png(&path, &series, 640, 320)?;
        let legend: Vec<&str> = series.iter().map(|(t, _)| t.as_str()).collect();
        println!("{} ({})", path.display(), legend.join(", "));
        written.push(path);
    }
    Ok(written)
}
