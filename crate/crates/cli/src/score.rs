//! In-process scoring shared by `train` validation and `ablate`.

use anyhow::Result;
use vos_core::config::{EvalConfig, ReferencePolicy};
use vos_core::evaluation::evaluate_sequence;
use vos_core::inference::run_video;
use vos_core::model::VosModel;
use vos_core::{Clip, ParamStore};

pub struct ValScore {
    pub j: f64,
    pub f: f64,
    /// Segmented frames per second of pure compute.
    pub fps: f64,
}

impl ValScore {
    pub fn jf(&self) -> f64 {
        (self.j + self.f) / 2.0
    }
}

/// Segment every clip under one policy and average the sequence scores.
pub fn score_clips(
    model: &VosModel,
    store: &ParamStore,
    clips: &[Clip],
    policy: ReferencePolicy,
    eval_cfg: &EvalConfig,
) -> Result<ValScore> {
    assert!(!clips.is_empty(), "nothing to score");
    let (mut j_sum, mut f_sum) = (0.0, 0.0);
    let (mut frames, mut secs) = (0usize, 0.0);
    for clip in clips {
        let run = run_video(model, store, clip, policy)?;
        let rep = evaluate_sequence(&run.labels, &clip.labels, clip.n_objects, eval_cfg)?;
        j_sum += rep.j_mean;
        f_sum += rep.f_mean;
        frames += run.seconds.len();
        secs += run.seconds.iter().sum::<f64>();
    }
    let n = clips.len() as f64;
    Ok(ValScore {
        j: j_sum / n,
        f: f_sum / n,
        fps: frames as f64 / secs,
    })
}
