//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any fail.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use denoise_tts::audio::{mix_at_snr, silence_mel, snr_db, FrontendConfig, Waveform};
use denoise_tts::checkpoint::Checkpoint;
use denoise_tts::corpus::{
    build_artificial_corpus, generate_toy_corpus, generate_toy_noise_bank, ArtificialConfig, ConditionClass, Split,
    ToyCorpusConfig, Utterance,
};
use denoise_tts::model::{length_regulate, Model, ModelConfig, CTC_HEAD, EXTRACTOR};
use denoise_tts::nn::ssim::{constants, mssim_loss_value, ValueRange};
use denoise_tts::nn::Ctx;
use denoise_tts::synth::{synthesize, SynthesisRequest};
use denoise_tts::train::{
    extractor_mae, joint_train, pretrain_extractor, teacher_forced_mel_mae, LossRecord, RecordCollector, TrainConfig,
};
use denoise_tts::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

// 1 ---------------------------------------------------------------------------

/// `−ln Σ p(path)` over every frame labelling that collapses to `target`.
fn brute_force_ctc(lp: &Tensor, target: &[usize], blank: usize) -> f64 {
    let (t, v) = (lp.rows(), lp.cols());
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &k)| lp.row(i)[k]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn ctc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 200 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let len = rng.gen_range(1..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        if denoise_tts::nn::ctc::min_frames(&target) > t {
            continue;
        }
        let logits = Tensor::new(vec![t, v], (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let mut g = Graph::eval();
        let x = g.constant(logits);
        let lp = g.log_softmax_rows(x);
        let loss = g.ctc_loss(lp, &target, 0);
        let expected = brute_force_ctc(g.value(lp), &target, 0);
        worst = worst.max((g.value(loss).item() - expected).abs());
        cases += 1;
    }
    check(worst <= 1e-5, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!("200 cases, max |Δ| = {worst:.2e}, {:.2} s", start.elapsed().as_secs_f64()))
}

// 2 ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Op {
    Affine(f64, f64),
    Square,
    Times(f64, f64),
}

fn apply(g: &mut Graph, x: denoise_tts::Var, op: Op) -> denoise_tts::Var {
    match op {
        Op::Affine(a, b) => {
            let s = g.scale(x, a);
            g.add_scalar(s, b)
        }
        Op::Square => g.mul(x, x),
        Op::Times(a, b) => {
            let s = g.scale(x, a);
            let s = g.add_scalar(s, b);
            g.mul(x, s)
        }
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> Op {
    match rng.gen_range(0..3) {
        0 => Op::Affine(rng.gen_range(-1.5..1.5), rng.gen_range(-1.0..1.0)),
        1 => Op::Square,
        _ => Op::Times(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
    }
}

/// Value and d/dx of the chain with the reversal layer in the middle.
fn chain(x: f64, before: &[Op], after: &[Op], lambda: Option<f64>) -> (f64, f64) {
    let mut g = Graph::new(true, 0);
    let input = g.input(Tensor::full(&[1, 1], x));
    let mut h = input;
    for &op in before {
        h = apply(&mut g, h, op);
    }
    if let Some(l) = lambda {
        h = g.gradient_reversal(h, l);
    }
    for &op in after {
        h = apply(&mut g, h, op);
    }
    let out = g.sum_all(h);
    let grads = g.backward(out);
    (g.value(out).item(), grads.wrt(input).map_or(0.0, |t| t.item()))
}

fn grl_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_neg, mut worst_fd) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let before: Vec<Op> = (0..rng.gen_range(1..4)).map(|_| random_op(&mut rng)).collect();
        let after: Vec<Op> = (0..rng.gen_range(1..4)).map(|_| random_op(&mut rng)).collect();
        let x = rng.gen_range(-1.0..1.0);
        let (v_id, g_id) = chain(x, &before, &after, None);
        let (v_rev, g_rev) = chain(x, &before, &after, Some(1.0));
        check(v_id == v_rev, || "reversal changed the forward value".into())?;
        worst_neg = worst_neg.max((g_rev + g_id).abs());
        let h = 1e-5;
        let fd = (chain(x + h, &before, &after, None).0 - chain(x - h, &before, &after, None).0) / (2.0 * h);
        let rel = |g: f64| (g - fd).abs() / fd.abs().max(1e-3);
        worst_fd = worst_fd.max(rel(g_id)).max(rel(-g_rev));
    }
    check(worst_neg <= 1e-10, || format!("reversed vs negated identity: {worst_neg:e}"))?;
    check(worst_fd <= 1e-4, || format!("finite-difference relative error {worst_fd:e}"))?;
    Ok(format!("50 probes, |g_rev + g_id| ≤ {worst_neg:.1e}, FD rel ≤ {worst_fd:.1e}"))
}

// 3 ---------------------------------------------------------------------------

fn snr_mixing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_clean = rng.gen_range(500..5000);
        let f = rng.gen_range(80.0..400.0);
        let amp = rng.gen_range(0.05..0.9);
        let clean: Vec<f32> = (0..n_clean)
            .map(|i| (amp * (std::f64::consts::TAU * f * i as f64 / 22050.0).sin() + rng.gen_range(-0.01..0.01)) as f32)
            .collect();
        let noise: Vec<f32> = (0..rng.gen_range(100..6000)).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let snr = rng.gen_range(5.0..25.0);
        let c = Waveform::new(clean, 22050).unwrap();
        let n = Waveform::new(noise, 22050).unwrap();
        let m = mix_at_snr(&c, &n, snr, rng.gen_range(0..10_000)).map_err(|e| e.to_string())?;
        let speech: Vec<f32> = m.noisy.samples.iter().zip(&m.scaled_noise.samples).map(|(a, b)| a - b).collect();
        worst = worst.max((snr_db(&speech, &m.scaled_noise.samples) - snr).abs());
    }
    check(worst <= 0.01, || format!("max SNR error {worst} dB"))?;
    Ok(format!("100 mixtures in [5, 25] dB, max error {worst:.2e} dB"))
}

// 4 ---------------------------------------------------------------------------

fn length_regulator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let store = ParamStore::new();
    for case in 0..1000 {
        let n = rng.gen_range(1..12);
        let mut durs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
        if durs.iter().sum::<usize>() == 0 {
            durs[rng.gen_range(0..n)] = 1;
        }
        let d = rng.gen_range(1..9);
        let h = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let mut ctx = Ctx::eval(&store);
        let hv = ctx.g.constant(h.clone());
        let out = length_regulate(&mut ctx, hv, &durs).map_err(|e| e.to_string())?;
        let out = ctx.g.value(out);
        check(out.rows() == durs.iter().sum::<usize>(), || format!("case {case}: wrong length"))?;
        let mut k = 0;
        for (i, &di) in durs.iter().enumerate() {
            for _ in 0..di {
                let same = out.row(k).iter().zip(h.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                check(same, || format!("case {case}: row {k} differs from source {i}"))?;
                k += 1;
            }
        }
    }
    Ok("1000 cases, lengths exact, rows bit-equal".into())
}

// 5 ---------------------------------------------------------------------------

fn mssim() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let unit = ValueRange { lo: 0.0, hi: 1.0 };
    let (mut ident, mut sym, mut closed) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let (r, c) = (rng.gen_range(1..40), rng.gen_range(1..90));
        let x = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(0.0..1.0)).collect());
        let y = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(0.0..1.0)).collect());
        ident = ident.max(mssim_loss_value(&x, &x, unit).abs());
        sym = sym.max((mssim_loss_value(&x, &y, unit) - mssim_loss_value(&y, &x, unit)).abs());
        let (a, b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (c1, _) = constants();
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = 1.0 - mssim_loss_value(&Tensor::full(&[r, c], a), &Tensor::full(&[r, c], b), unit);
        closed = closed.max((got - expected).abs());
    }
    check(ident <= 1e-6, || format!("identical inputs gave {ident:e}"))?;
    check(sym <= 1e-6, || format!("asymmetry {sym:e}"))?;
    check(closed <= 1e-6, || format!("closed-form deviation {closed:e}"))?;
    Ok(format!("identity {ident:.1e}, symmetry {sym:.1e}, closed form {closed:.1e}"))
}

// 6 ---------------------------------------------------------------------------

fn unet_lengths() -> Outcome {
    let fe = FrontendConfig::default();
    let model = Model::new(ModelConfig::new(10, 2), 6).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for t in [1usize, 7, 15, 16, 17, 100] {
        let v = (0..t * 80).map(|_| rng.gen_range(-11.0..3.0)).collect();
        let mel = denoise_tts::audio::MelSpectrogram::new(Tensor::new(vec![t, 80], v), &fe).unwrap();
        let out = model.extractor.extract(&model.store, &mel);
        check(out.frames() == t && out.n_mels() == 80, || format!("T = {t} gave {} frames", out.frames()))?;
    }
    Ok("T ∈ {1, 7, 15, 16, 17, 100} preserved (paper-size UNet)".into())
}

// 7 ---------------------------------------------------------------------------

fn toy_corpus(tc: ToyCorpusConfig, validation_fraction: f64) -> (ModelConfig, Vec<Utterance>) {
    let fe = FrontendConfig::default();
    let clean = generate_toy_corpus(&tc, &fe).unwrap();
    let bank = generate_toy_noise_bank(&tc, &fe).unwrap();
    let mix = ArtificialConfig {
        validation_fraction,
        ..Default::default()
    };
    let built = build_artificial_corpus(&clean, &bank, &mix, &fe).unwrap();
    let utts = built.utterances().unwrap();
    (ModelConfig::new(clean.inventory.len(), tc.n_speakers).desk(), utts)
}

fn extractor_warm_start() -> Outcome {
    let start = Instant::now();
    let (cfg, utts) = toy_corpus(
        ToyCorpusConfig {
            n_speakers: 4,
            n_utterances: 40,
            ..Default::default()
        },
        0.2,
    );
    let (train, val): (Vec<Utterance>, Vec<Utterance>) = utts.into_iter().partition(|u| u.split == Split::Train);
    let held_out: Vec<&Utterance> = val.iter().filter(|u| u.class == ConditionClass::PairedNoisy).collect();
    check(!held_out.is_empty(), || "no held-out paired utterances".into())?;
    let mut model = Model::new(cfg, 17).map_err(|e| e.to_string())?;
    let before = extractor_mae(&model, &held_out).unwrap();
    let tcfg = TrainConfig {
        batch_size: 6,
        extractor_steps: 1000,
        validate_every: 250,
        checkpoint_every: 0,
        ..Default::default()
    };
    pretrain_extractor(&mut model, &train, &val, &tcfg, &mut RecordCollector::default()).map_err(|e| e.to_string())?;
    let after = extractor_mae(&model, &held_out).unwrap();
    let ratio = after / before;
    check(ratio <= 0.5, || format!("held-out MAE {before:.4} -> {after:.4} ({:.1}%)", 100.0 * ratio))?;
    within(start.elapsed(), 300)?;
    Ok(format!(
        "held-out extractor MAE {before:.4} -> {after:.4} ({:.1}% of untrained), {} held-out, {:.0} s",
        100.0 * ratio,
        held_out.len(),
        start.elapsed().as_secs_f64()
    ))
}

// 8 ---------------------------------------------------------------------------

fn joint_overfit(trained: &mut Option<Model>) -> Outcome {
    let start = Instant::now();
    let (cfg, utts) = toy_corpus(
        ToyCorpusConfig {
            n_speakers: 4,
            n_utterances: 8,
            ..Default::default()
        },
        0.0,
    );
    let classes: Vec<ConditionClass> = utts.iter().map(|u| u.class).collect();
    for c in [ConditionClass::Clean, ConditionClass::PairedNoisy, ConditionClass::UnpairedNoisy] {
        check(classes.contains(&c), || format!("toy corpus lacks {c:?}"))?;
    }
    let refs: Vec<&Utterance> = utts.iter().collect();
    let mut model = Model::new(cfg, 23).map_err(|e| e.to_string())?;
    let before = teacher_forced_mel_mae(&model, &refs).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        batch_size: 8,
        joint_steps: 2000,
        validate_every: 500,
        checkpoint_every: 0,
        ..Default::default()
    };
    joint_train(&mut model, &utts, &utts, &tcfg, &mut RecordCollector::default()).map_err(|e| e.to_string())?;
    let after = teacher_forced_mel_mae(&model, &refs).map_err(|e| e.to_string())?;
    let reduction = 1.0 - after / before;
    *trained = Some(model);
    check(reduction >= 0.8, || format!("mel MAE {before:.4} -> {after:.4} ({:.1}% reduction)", 100.0 * reduction))?;
    within(start.elapsed(), 900)?;
    Ok(format!(
        "teacher-forced mel MAE {before:.4} -> {after:.4} ({:.1}% reduction), {:.0} s",
        100.0 * reduction,
        start.elapsed().as_secs_f64()
    ))
}

// 9, 10 -------------------------------------------------------------------------

const CLI_CONFIG: &str = r#"
seed = 29
output_dir = "run"

[corpus.toy]
n_speakers = 4
n_utterances = 16
max_phonemes = 5
max_frames_per_phoneme = 5

[corpus.mixing]
validation_fraction = 0.25

[train]
batch_size = 6
extractor_steps = 25
joint_steps = 25
warmup_steps = 10
validate_every = 10
checkpoint_every = 10

[eval]
max_plots = 2

[synth]
griffin_lim_iterations = 8
"#;

struct Cli {
    config: PathBuf,
    out: PathBuf,
}

impl Cli {
    fn new(dir: &Path, name: &str) -> Self {
        let config = dir.join(format!("{name}.toml"));
        std::fs::write(&config, CLI_CONFIG).unwrap();
        Self {
            config,
            out: dir.join(name),
        }
    }

    fn run(&self, args: &[&str]) -> Result<(), String> {
        let (sub, rest) = args.split_first().unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_denoise-tts"))
            .arg(sub)
            .arg("--config")
            .arg(&self.config)
            .arg("--output-dir")
            .arg(&self.out)
            .args(rest)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        check(o.status.success(), || {
            format!("{args:?} exited with {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr))
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn checkpoint(&self, rel: &str) -> Result<Checkpoint, String> {
        Checkpoint::load(self.path(rel)).map_err(|e| format!("{rel}: {e}"))
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cli = Cli::new(dir.path(), "ablation");
    cli.run(&["prepare"])?;
    cli.run(&["train-extractor"])?;
    cli.run(&["train", "--sweep-granularity"])?;
    let runs: [(&str, &[&str]); 4] = [
        ("fix-on", &["--fix-extractor"]),
        ("fix-off", &[]),
        ("adv-on", &[]),
        ("adv-off", &["--no-adversarial-ctc"]),
    ];
    for (label, flags) in runs {
        let mut args = vec!["train", "--label", label];
        args.extend_from_slice(flags);
        cli.run(&args)?;
        cli.run(&["eval", "--label", label])?;
    }
    let labels = ["frame", "utterance", "none", "fix-on", "fix-off", "adv-on", "adv-off"];
    for l in labels {
        for f in [format!("eval-{l}/report.json"), format!("joint-{l}/config.toml"), format!("joint-{l}/losses.jsonl")] {
            check(cli.path(&f).is_file(), || format!("missing {f}"))?;
        }
    }

    let warm = cli.checkpoint("extractor/last.ckpt")?.model;
    let hash = |label: &str, prefix: &str| -> Result<String, String> {
        Ok(cli.checkpoint(&format!("joint-{label}/last.ckpt"))?.model.store.hash_prefix(prefix))
    };
    let init = Model::new(warm.config.clone(), 29).map_err(|e| e.to_string())?;
    let warm_ext = warm.store.hash_prefix(EXTRACTOR);
    check(hash("fix-on", EXTRACTOR)? == warm_ext, || "fix_extractor=on changed the extractor".into())?;
    check(hash("fix-off", EXTRACTOR)? != warm_ext, || "fix_extractor=off left the extractor untouched".into())?;
    let init_ctc = init.store.hash_prefix(CTC_HEAD);
    check(hash("adv-off", CTC_HEAD)? == init_ctc, || "adversarial CTC off changed the CTC head".into())?;
    check(hash("adv-on", CTC_HEAD)? != init_ctc, || "adversarial CTC on left the CTC head untouched".into())?;
    let init_enc = init.store.hash_prefix("noise_encoder.");
    check(hash("none", "noise_encoder.")? == init_enc, || "granularity none trained the noise encoder".into())?;
    check(hash("frame", "noise_encoder.")? != init_enc, || "granularity frame left the noise encoder untouched".into())?;
    let adv_terms = |label: &str| -> Result<bool, String> {
        let text = String::from_utf8(read(&cli.path(&format!("joint-{label}/losses.jsonl")))?).unwrap();
        Ok(text.lines().any(|l| serde_json::from_str::<LossRecord>(l).unwrap().term == "adversarial"))
    };
    check(!adv_terms("adv-off")? && adv_terms("adv-on")?, || "adversarial term logging mismatch".into())?;
    for g in ["frame", "utterance", "none"] {
        let ck = cli.checkpoint(&format!("joint-{g}/last.ckpt"))?;
        check(ck.model.config.granularity.label() == g, || format!("joint-{g} has the wrong granularity"))?;
    }
    Ok(format!("{} labeled runs with reports; freeze and flag contracts hold by parameter hash", labels.len()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let runs = [Cli::new(dir.path(), "a"), Cli::new(dir.path(), "b")];
    for r in &runs {
        r.run(&["prepare"])?;
        r.run(&["train-extractor"])?;
        r.run(&["train"])?;
        r.run(&["synth", "--phonemes", "p00 p02 p04 p01", "--name", "s1"])?;
        r.run(&["synth", "--phonemes", "p03 p03", "--durations", "4,6", "--name", "s2"])?;
    }
    let files = [
        "corpus/manifest.jsonl",
        "extractor/losses.jsonl",
        "joint/losses.jsonl",
        "synth/s1.mel",
        "synth/s2.mel",
        "synth/s1.wav",
    ];
    for f in files {
        check(read(&runs[0].path(f))? == read(&runs[1].path(f))?, || format!("{f} differs between runs"))?;
    }
    Ok(format!("two seeded runs bit-identical across {} artifacts", files.len()))
}

// 11 ---------------------------------------------------------------------------

fn silence_inference(trained: Option<&Model>) -> Outcome {
    let fallback;
    let model = match trained {
        Some(m) => m,
        None => {
            fallback = Model::new(ModelConfig::new(12, 4).desk(), 31).map_err(|e| e.to_string())?;
            &fallback
        }
    };
    let fe = &model.config.frontend;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    for case in 0..25 {
        let n = rng.gen_range(1..10);
        let mut req = SynthesisRequest::new(
            (0..n).map(|_| rng.gen_range(0..model.config.n_phonemes)).collect(),
            rng.gen_range(0..model.config.n_speakers),
        );
        if case % 2 == 1 {
            req.durations = Some((0..n).map(|_| rng.gen_range(1..6)).collect());
        }
        let out = synthesize(model, &req).map_err(|e| e.to_string())?;
        let frames: usize = out.durations.iter().sum();
        check(out.mel.frames() == frames, || format!("case {case}: {} frames for durations summing to {frames}", out.mel.frames()))?;
        let silence = silence_mel(frames, fe).unwrap();
        check(bits(&out.noise_input.values) == bits(&silence.values), || format!("case {case}: noise input is not silence"))?;
    }
    Ok(format!(
        "25 requests: frames = Σ durations, noise input byte-equal to silence ({} model)",
        if trained.is_some() { "trained" } else { "untrained" }
    ))
}

fn main() {
    let mut trained: Option<Model> = None;
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("{tag} criterion {n:>2}: {name}: {detail} [{:.1} s]", start.elapsed().as_secs_f64());
        results.push((n, name, outcome));
    };
    run(1, "CTC oracle equivalence", &mut ctc_oracle);
    run(2, "GRL exactness", &mut grl_exactness);
    run(3, "SNR mixing", &mut snr_mixing);
    run(4, "length regulator", &mut length_regulator);
    run(5, "MSSIM", &mut mssim);
    run(6, "UNet length contract", &mut unet_lengths);
    run(7, "extractor warm-start", &mut extractor_warm_start);
    run(8, "joint training overfit", &mut || joint_overfit(&mut trained));
    run(9, "ablation harness", &mut ablation_harness);
    run(10, "determinism", &mut determinism);
    run(11, "silence-conditioned inference", &mut || silence_inference(trained.as_ref()));
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
