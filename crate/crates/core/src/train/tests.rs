use super::*;
use crate::audio::FrontendConfig;
use crate::checkpoint::Checkpoint;
use crate::corpus::{build_artificial_corpus, generate_toy_corpus, generate_toy_noise_bank, ArtificialConfig, ToyCorpusConfig};
use crate::model::ModelConfig;

fn tiny(n_phonemes: usize, n_speakers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        ffn_dim: 32,
        predictor_filter: 16,
        unet_base_channels: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ctc_layers: 1,
        ..ModelConfig::new(n_phonemes, n_speakers)
    }
}

fn corpus() -> (Model, Vec<Utterance>) {
    let fe = FrontendConfig::default();
    let tc = ToyCorpusConfig {
        n_speakers: 4,
        n_utterances: 8,
        max_frames_per_phoneme: 4,
        ..Default::default()
    };
    let clean = generate_toy_corpus(&tc, &fe).unwrap();
    let bank = generate_toy_noise_bank(&tc, &fe).unwrap();
    let built = build_artificial_corpus(&clean, &bank, &ArtificialConfig::default(), &fe).unwrap();
    let utts = built.utterances().unwrap();
    (Model::new(tiny(clean.inventory.len(), 4), 2).unwrap(), utts)
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        extractor_steps: steps,
        joint_steps: steps,
        warmup_steps: 2,
        validate_every: 2,
        checkpoint_every: 0,
        ..Default::default()
    }
}

fn of_class(utts: &[Utterance], c: ConditionClass) -> Vec<&Utterance> {
    utts.iter().filter(|u| u.class == c).collect()
}

#[test]
fn clean_batch_has_no_extractor_or_adversarial_loss() {
    let (model, utts) = corpus();
    let clean = of_class(&utts, ConditionClass::Clean);
    let b = total_loss(&model, Stage::Joint, &clean, &quick(1), 3).unwrap();
    assert_eq!(b.extractor, Some(0.0));
    assert_eq!(b.adversarial, Some(0.0));
    assert!(b.mel_mae.unwrap() > 0.0);
}

#[test]
fn batch_total_is_mean_of_utterance_totals() {
    let (model, utts) = corpus();
    let all: Vec<&Utterance> = utts.iter().collect();
    let cfg = quick(1);
    let batched = total_loss(&model, Stage::Joint, &all, &cfg, 11).unwrap();
    let singles: Vec<LossBreakdown> = all
        .iter()
        .map(|u| total_loss(&model, Stage::Joint, &[u], &cfg, 11).unwrap())
        .collect();
    let mean = singles.iter().map(|b| b.total).sum::<f64>() / singles.len() as f64;
    assert!((batched.total - mean).abs() < 1e-10 * mean.abs().max(1.0), "{} vs {mean}", batched.total);
    let adv_mean = singles.iter().map(|b| b.adversarial.unwrap()).sum::<f64>() / singles.len() as f64;
    assert!((batched.adversarial.unwrap() - adv_mean).abs() < 1e-10);
    assert!((batched.total - batched.weighted_sum(&cfg.weights)).abs() < 1e-10);
}

#[test]
fn decomposition_holds_with_non_unit_weights() {
    let (model, utts) = corpus();
    let all: Vec<&Utterance> = utts.iter().collect();
    let cfg = TrainConfig {
        weights: LossWeights {
            mel: 0.5,
            duration: 2.0,
            pitch: 0.25,
            extractor: 3.0,
            adversarial: 0.1,
        },
        ..quick(1)
    };
    let b = total_loss(&model, Stage::Joint, &all, &cfg, 5).unwrap();
    assert!((b.total - b.weighted_sum(&cfg.weights)).abs() < 1e-10);
}

#[test]
fn zero_error_terms_vanish() {
    let b = LossBreakdown {
        total: 0.0,
        mel_mae: Some(0.0),
        mel_mssim: Some(0.0),
        duration: Some(0.0),
        pitch: Some(0.0),
        extractor: Some(0.0),
        adversarial: Some(0.0),
        adversarial_skipped: 0,
    };
    assert_eq!(b.weighted_sum(&LossWeights::default()), 0.0);
    let (_, utts) = corpus();
    let mut g = crate::Graph::eval();
    let m = g.constant(utts[0].mel.values.clone());
    let mae = g.mae(m, m, None);
    let mse = g.mse(m, m, None);
    let ssim = crate::nn::ssim::mssim_loss(&mut g, m, m, FrontendConfig::default().value_range(), None);
    assert_eq!(g.value(mae).item(), 0.0);
    assert_eq!(g.value(mse).item(), 0.0);
    assert!(g.value(ssim).item().abs() < 1e-12);
}

#[test]
fn extractor_stage_touches_only_the_extractor() {
    let (mut model, utts) = corpus();
    let before: Vec<String> = ["backbone.", "noise_encoder.", "ctc_head.", "extractor."]
        .iter()
        .map(|p| model.store.hash_prefix(p))
        .collect();
    let zero = model.clone();
    pretrain_extractor(&mut model, &utts, &utts, &quick(0), &mut RecordCollector::default()).unwrap();
    assert_eq!(model.store.hash_prefix(""), zero.store.hash_prefix(""));
    pretrain_extractor(&mut model, &utts, &utts, &quick(3), &mut RecordCollector::default()).unwrap();
    for (i, p) in ["backbone.", "noise_encoder.", "ctc_head."].iter().enumerate() {
        assert_eq!(model.store.hash_prefix(p), before[i], "{p} changed");
    }
    assert_ne!(model.store.hash_prefix("extractor."), before[3]);
}

#[test]
fn extractor_stage_without_paired_data_is_a_config_error() {
    let (mut model, utts) = corpus();
    let clean: Vec<Utterance> = utts.into_iter().filter(|u| u.class == ConditionClass::Clean).collect();
    let r = pretrain_extractor(&mut model, &clean, &clean, &quick(2), &mut RecordCollector::default());
    assert!(matches!(r, Err(crate::Error::Config(_))));
}

#[test]
fn freeze_flags_hold() {
    let (model, utts) = corpus();
    let cfg = TrainConfig {
        fix_extractor: true,
        use_adversarial_ctc: false,
        ..quick(3)
    };
    let mut m = model.clone();
    let mut log = RecordCollector::default();
    joint_train(&mut m, &utts, &utts, &cfg, &mut log).unwrap();
    assert_eq!(m.store.hash_prefix("extractor."), model.store.hash_prefix("extractor."));
    assert_eq!(m.store.hash_prefix("ctc_head."), model.store.hash_prefix("ctc_head."));
    assert_ne!(m.store.hash_prefix("backbone."), model.store.hash_prefix("backbone."));
    assert!(log.records.iter().all(|r| r.term != "adversarial"));

    let mut m = model.clone();
    let mut log = RecordCollector::default();
    joint_train(&mut m, &utts, &utts, &quick(3), &mut log).unwrap();
    assert_ne!(m.store.hash_prefix("extractor."), model.store.hash_prefix("extractor."));
    assert_ne!(m.store.hash_prefix("ctc_head."), model.store.hash_prefix("ctc_head."));
    assert!(log.records.iter().any(|r| r.term == "adversarial"));
}

fn adversarial_grads(model: &Model, u: &Utterance, lambda: Option<f64>) -> Vec<(String, Tensor)> {
    let mut ctx = Ctx::new(&model.store, true, 4);
    let opts = ForwardOptions {
        use_adversarial_ctc: true,
        lambda_grl: lambda,
    };
    let t = model.utterance_terms(&mut ctx, u, opts).unwrap();
    let g = ctx.g.backward(t.adversarial.unwrap());
    g.into_param_grads()
        .into_iter()
        .map(|(id, t)| (model.store.get(id).name.clone(), t))
        .collect()
}

#[test]
fn adversarial_gradient_is_reversed_for_the_extractor_only() {
    let (model, utts) = corpus();
    let u = of_class(&utts, ConditionClass::UnpairedNoisy)[0];
    let id = adversarial_grads(&model, u, None);
    let rev = adversarial_grads(&model, u, Some(1.0));
    let zero = adversarial_grads(&model, u, Some(0.0));
    let mut n_ext = 0;
    for (((name, a), (_, b)), (_, z)) in id.iter().zip(&rev).zip(&zero) {
        if name.starts_with(EXTRACTOR) {
            n_ext += 1;
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, -*y, "{name}");
            }
            assert!(z.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            assert!(name.starts_with(CTC_HEAD), "{name} receives adversarial gradient");
            assert_eq!(a, b);
            assert_eq!(a, z);
        }
    }
    assert!(n_ext > 0);
    assert!(zero.iter().any(|(n, g)| n.starts_with(CTC_HEAD) && g.sq_norm() > 0.0));
}

#[derive(Default)]
struct Saver {
    records: Vec<LossRecord>,
    saved: Vec<Vec<u8>>,
}

impl TrainObserver for Saver {
    fn record(&mut self, rec: &LossRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }

    fn checkpoint(&mut self, model: &Model, state: &TrainState, best: bool) -> Result<()> {
        if !best {
            let ck = Checkpoint {
                model: model.clone(),
                state: Some(state.clone()),
                manifest_checksum: None,
            };
            self.saved.push(ck.to_archive()?.to_bytes()?);
        }
        Ok(())
    }
}

#[test]
fn resume_reproduces_the_trajectory() {
    let (model, utts) = corpus();
    let full_cfg = quick(6);
    let mut straight = model.clone();
    let mut a = Saver::default();
    joint_train(&mut straight, &utts, &utts, &full_cfg, &mut a).unwrap();

    let mut first = model.clone();
    let mut b = Saver::default();
    joint_train(&mut first, &utts, &utts, &quick(3), &mut b).unwrap();
    let ck = Checkpoint::from_archive(crate::archive::TensorArchive::from_bytes(b.saved.last().unwrap()).unwrap()).unwrap();
    let mut resumed = ck.model;
    let mut state = ck.state.unwrap();
    assert_eq!(state.step, 3);
    train_stage(&mut resumed, &mut state, &utts, &utts, &full_cfg, &mut b).unwrap();

    assert_eq!(resumed.store.hash_prefix(""), straight.store.hash_prefix(""));
    let key = |r: &LossRecord| (r.step, r.term.clone(), r.value.to_bits());
    let train_terms = |rs: &[LossRecord]| -> Vec<_> { rs.iter().filter(|r| !r.term.starts_with("val_")).map(key).collect() };
    assert_eq!(train_terms(&a.records), train_terms(&b.records));
}
