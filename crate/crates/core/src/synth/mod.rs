//! Silence-conditioned inference, waveform reconstruction, objective
//! evaluation and spectrogram plots.

mod eval;
mod griffin_lim;
mod plot;

pub use eval::{evaluate, utterance_metrics, Aggregate, EvalReport, UtteranceMetrics, PERCEPTUAL_NOTE};
pub use griffin_lim::{griffin_lim, DEFAULT_ITERATIONS};
pub use plot::{loss_curve_png, mel_panels_png};

use crate::error::{invalid, Result};
use crate::model::{Granularity, Model, SynthesisOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub phoneme_ids: Vec<usize>,
    pub speaker: usize,
    pub durations: Option<Vec<usize>>,
    /// Overrides the checkpoint's granularity when set.
    pub granularity: Option<Granularity>,
}

impl SynthesisRequest {
    pub fn new(phoneme_ids: Vec<usize>, speaker: usize) -> Self {
        Self {
            phoneme_ids,
            speaker,
            durations: None,
            granularity: None,
        }
    }
}

pub fn synthesize(model: &Model, req: &SynthesisRequest) -> Result<SynthesisOutput> {
    if req.phoneme_ids.is_empty() {
        return Err(invalid("nothing to synthesize: empty phoneme sequence"));
    }
    let run = |m: &Model| m.synthesize(&req.phoneme_ids, req.speaker, req.durations.as_deref());
    match req.granularity {
        Some(g) if g != model.config.granularity => {
            let mut m = model.clone();
            m.config.granularity = g;
            run(&m)
        }
        _ => run(model),
    }
}
