//! Semi-supervised inference: frame 0 arrives with its ground-truth masks,
//! every later frame is segmented using reference frames chosen by policy.
//!
//! Each tracked object gets its own forward pass whose reference masks come
//! from the object's channel of earlier predictions; the per-object
//! foreground maps are then merged into one label map by soft aggregation.
//! Stored prediction masks are the post-aggregation probabilities, so the
//! references of different objects stay mutually consistent.

use std::time::Instant;

use ndarray::{Array2, Array3, Axis};

use crate::autodiff::{ParamStore, Tape};
use crate::config::ReferencePolicy;
use crate::dataset::{object_mask, Clip};
use crate::error::{Result, VosError};
use crate::features::{ClipSample, ReferenceFrame};
use crate::model::VosModel;
use crate::segmentation::{soft_aggregate, ObjectProbabilityMap};
use crate::transformer::RunMode;

#[derive(Debug)]
struct StoredFrame {
    index: usize,
    rgb: Array3<f64>,
    /// One soft mask in [0, 1] per tracked object.
    masks: Vec<Array2<f64>>,
}

/// Rolling reference memory for one video.
#[derive(Debug)]
pub struct SessionState {
    policy: ReferencePolicy,
    n_objects: usize,
    size: (usize, usize),
    /// Frame 0 with ground truth; never replaced.
    first: StoredFrame,
    /// Extra frames pinned by the every-k policy, ascending.
    permanent: Vec<StoredFrame>,
    /// Latest segmented frame.
    previous: Option<StoredFrame>,
    /// Index of the next frame to segment.
    next_index: usize,
}

impl SessionState {
    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    /// Frame indices the next step will condition on, ascending.
    pub fn reference_indices(&self) -> Vec<usize> {
        let mut idx = vec![self.first.index];
        match self.policy {
            ReferencePolicy::FirstOnly => {}
            ReferencePolicy::PreviousOnly => {
                if let Some(p) = &self.previous {
                    idx = vec![p.index];
                }
            }
            ReferencePolicy::FirstAndPrevious => {
                if let Some(p) = &self.previous {
                    idx.push(p.index);
                }
            }
            ReferencePolicy::EveryK(_) => {
                for f in &self.permanent {
                    idx.push(f.index);
                }
                if let Some(p) = &self.previous {
                    idx.push(p.index);
                }
            }
        }
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    fn reference_frames(&self) -> Vec<&StoredFrame> {
        let wanted = self.reference_indices();
        let mut all: Vec<&StoredFrame> = Vec::new();
        all.push(&self.first);
        all.extend(self.permanent.iter());
        if let Some(p) = &self.previous {
            all.push(p);
        }
        wanted
            .iter()
            .map(|&i| *all.iter().find(|f| f.index == i).expect("index tracked"))
            .collect()
    }

    fn record(&mut self, frame: StoredFrame) {
        match self.policy {
            ReferencePolicy::FirstOnly => {}
            ReferencePolicy::PreviousOnly | ReferencePolicy::FirstAndPrevious => {
                self.previous = Some(frame);
            }
            ReferencePolicy::EveryK(k) => {
                assert!(k >= 1, "every-k policy needs k >= 1");
                if frame.index % k == 0 {
                    self.permanent.push(StoredFrame {
                        index: frame.index,
                        rgb: frame.rgb.clone(),
                        masks: frame.masks.clone(),
                    });
                }
                self.previous = Some(frame);
            }
        }
    }
}

/// Start a session from frame 0 and its per-object ground-truth masks.
/// Masks must be pairwise disjoint where they exceed one half.
pub fn init_session(
    frame0: &Array3<f64>,
    gt_masks: &[Array2<f64>],
    policy: ReferencePolicy,
) -> Result<SessionState> {
    if gt_masks.is_empty() {
        return Err(VosError::Dataset("a session needs at least one object".into()));
    }
    if let ReferencePolicy::EveryK(k) = policy {
        if k == 0 {
            return Err(VosError::Dataset("every-k policy needs k >= 1".into()));
        }
    }
    let (_, h, w) = frame0.dim();
    for (i, m) in gt_masks.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(VosError::ShapeMismatch {
                context: "ground-truth mask",
                expected: format!("({h}, {w})"),
                got: format!("{:?} for object {}", m.dim(), i + 1),
            });
        }
    }
    for y in 0..h {
        for x in 0..w {
            let owners = gt_masks.iter().filter(|m| m[(y, x)] > 0.5).count();
            if owners > 1 {
                return Err(VosError::Dataset(format!(
                    "ground-truth masks overlap at ({y}, {x})"
                )));
            }
        }
    }
    Ok(SessionState {
        policy,
        n_objects: gt_masks.len(),
        size: (h, w),
        first: StoredFrame {
            index: 0,
            rgb: frame0.clone(),
            masks: gt_masks.to_vec(),
        },
        permanent: Vec::new(),
        previous: None,
        next_index: 1,
    })
}

/// Convenience entry from a label map with objects 1..=n.
pub fn init_session_from_labels(
    frame0: &Array3<f64>,
    labels: &Array2<u8>,
    n_objects: u8,
    policy: ReferencePolicy,
) -> Result<SessionState> {
    if n_objects == 0 {
        return Err(VosError::Dataset("a session needs at least one object".into()));
    }
    let masks: Vec<Array2<f64>> = (1..=n_objects).map(|id| object_mask(labels, id)).collect();
    init_session(frame0, &masks, policy)
}

/// What one inference step produced.
#[derive(Debug)]
pub struct StepResult {
    pub labels: Array2<u8>,
    pub probs: ObjectProbabilityMap,
    /// Reference frames this step conditioned on.
    pub reference_frames: usize,
    /// Spatio-temporal sequence length the encoder attended over.
    pub tokens: usize,
}

/// Segment the next frame and update the reference memory.
pub fn step(
    state: &mut SessionState,
    model: &VosModel,
    store: &ParamStore,
    frame: &Array3<f64>,
) -> Result<StepResult> {
    let (c, h, w) = frame.dim();
    if c != 3 || (h, w) != state.size {
        return Err(VosError::ShapeMismatch {
            context: "query frame",
            expected: format!("(3, {}, {})", state.size.0, state.size.1),
            got: format!("({c}, {h}, {w})"),
        });
    }
    let refs = state.reference_frames();
    let samples: Vec<ClipSample> = (0..state.n_objects)
        .map(|o| ClipSample {
            refs: refs
                .iter()
                .map(|f| ReferenceFrame {
                    rgb: f.rgb.clone(),
                    mask: f.masks[o].clone(),
                })
                .collect(),
            query: frame.clone(),
        })
        .collect();
    let n_refs = refs.len();

    let mut t = Tape::with_grad(false);
    let outputs = model.forward_batch(&mut t, store, &samples, &mut RunMode::Eval)?;
    let tokens = outputs[0].layout.len();
    let per_object: Vec<Array2<f64>> =
        outputs.iter().map(|o| VosModel::prob_array(&t, o)).collect();
    let probs = soft_aggregate(&per_object, model.cfg.background);

    let masks: Vec<Array2<f64>> = (0..state.n_objects)
        .map(|o| probs.object_probs.index_axis(Axis(0), o).to_owned())
        .collect();
    let index = state.next_index;
    state.record(StoredFrame {
        index,
        rgb: frame.clone(),
        masks,
    });
    state.next_index += 1;

    Ok(StepResult {
        labels: probs.labels(),
        probs,
        reference_frames: n_refs,
        tokens,
    })
}

/// A full video segmented frame by frame.
pub struct VideoRun {
    /// Per-frame label maps; index 0 is the given ground truth.
    pub labels: Vec<Array2<u8>>,
    /// Outputs of the segmented frames 1..T.
    pub steps: Vec<StepResult>,
    /// Wall-clock seconds per segmented frame, compute only.
    pub seconds: Vec<f64>,
}

/// Run a clip end to end under one reference policy. Frame 0's output is its
/// ground truth by definition.
pub fn run_video(
    model: &VosModel,
    store: &ParamStore,
    clip: &Clip,
    policy: ReferencePolicy,
) -> Result<VideoRun> {
    clip.validate()?;
    let mut state =
        init_session_from_labels(&clip.frames[0], &clip.labels[0], clip.n_objects, policy)?;
    let mut labels = vec![clip.labels[0].clone()];
    let mut steps = Vec::with_capacity(clip.frames.len().saturating_sub(1));
    let mut seconds = Vec::with_capacity(steps.capacity());
    for frame in &clip.frames[1..] {
        let begin = Instant::now();
        let out = step(&mut state, model, store, frame)?;
        seconds.push(begin.elapsed().as_secs_f64());
        labels.push(out.labels.clone());
        steps.push(out);
    }
    Ok(VideoRun { labels, steps, seconds })
}

/// (median, mean) of a timing series.
pub fn timing_summary(seconds: &[f64]) -> (f64, f64) {
    assert!(!seconds.is_empty());
    let mut sorted = seconds.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (median, seconds.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synth::{generate, Background, BackgroundKind, ObjectSpec, SceneSpec, ShapeKind, TextureKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            widths: [2, 3, 4, 6],
            blocks: [1, 0, 0, 1],
            d_model: 4,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 8,
            dropout: 0.0,
            head_channels: 2,
            ..ModelConfig::desk()
        }
    }

    fn tiny_model(seed: u64) -> (VosModel, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &tiny_cfg());
        (model, store)
    }

    fn disc_clip(frames: usize, n_objects: u8) -> Clip {
        let mut objects = vec![ObjectSpec {
            shape: ShapeKind::Disc,
            texture: TextureKind::Flat,
            color: [0.8, 0.3, 0.2],
            size: 3.0,
            aspect: 1.0,
            center: (8.0, 4.0),
            velocity: (0.0, 0.7),
            angle: 0.0,
            spin: 0.0,
            scale_rate: 0.0,
            noise_amp: 0.0,
            noise_seed: 0,
        }];
        if n_objects > 1 {
            objects.push(ObjectSpec {
                color: [0.2, 0.4, 0.8],
                center: (12.0, 11.0),
                velocity: (-0.3, -0.4),
                ..objects[0].clone()
            });
        }
        let spec = SceneSpec {
            id: "disc".into(),
            height: 16,
            width: 16,
            frames,
            objects,
            background: Background {
                kind: BackgroundKind::Flat,
                base: [0.15, 0.18, 0.2],
                accent: [0.3, 0.3, 0.3],
                period: 6.0,
            },
            confusion: false,
            seed: 0,
        };
        let clip = generate(&spec);
        clip.validate().unwrap();
        clip
    }

    #[test]
    fn every_k_reference_set_sizes_follow_the_update_rule() {
        let (model, store) = tiny_model(50);
        let clip = disc_clip(13, 1);
        let run = run_video(&model, &store, &clip, ReferencePolicy::EveryK(5)).unwrap();
        let sizes: Vec<usize> = run.steps.iter().map(|s| s.reference_frames).collect();
        assert_eq!(sizes, vec![1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 4]);
    }

    #[test]
    fn policies_select_the_documented_frames() {
        let (model, store) = tiny_model(51);
        let clip = disc_clip(5, 1);

        let mut first = init_session_from_labels(
            &clip.frames[0],
            &clip.labels[0],
            1,
            ReferencePolicy::FirstOnly,
        )
        .unwrap();
        let mut prev = init_session_from_labels(
            &clip.frames[0],
            &clip.labels[0],
            1,
            ReferencePolicy::PreviousOnly,
        )
        .unwrap();
        let mut both = init_session_from_labels(
            &clip.frames[0],
            &clip.labels[0],
            1,
            ReferencePolicy::FirstAndPrevious,
        )
        .unwrap();
        for t in 1..5 {
            assert_eq!(first.reference_indices(), vec![0], "first_only never grows");
            assert_eq!(prev.reference_indices(), vec![t - 1]);
            let expect = if t == 1 { vec![0] } else { vec![0, t - 1] };
            assert_eq!(both.reference_indices(), expect);
            step(&mut first, &model, &store, &clip.frames[t]).unwrap();
            step(&mut prev, &model, &store, &clip.frames[t]).unwrap();
            step(&mut both, &model, &store, &clip.frames[t]).unwrap();
        }
    }

    #[test]
    fn token_count_tracks_the_reference_set_exactly() {
        let (model, store) = tiny_model(52);
        let clip = disc_clip(7, 1);
        let run = run_video(&model, &store, &clip, ReferencePolicy::EveryK(3)).unwrap();
        // 16x16 at stride 16: one token per temporal slice.
        for s in &run.steps {
            assert_eq!(s.tokens, (s.reference_frames + 1) * 1 * 1);
        }
    }

    #[test]
    fn runs_are_deterministic_and_causal() {
        let (model, store) = tiny_model(53);
        let clip = disc_clip(6, 2);
        let a = run_video(&model, &store, &clip, ReferencePolicy::FirstAndPrevious).unwrap();
        let b = run_video(&model, &store, &clip, ReferencePolicy::FirstAndPrevious).unwrap();
        for (x, y) in a.labels.iter().zip(b.labels.iter()) {
            assert_eq!(x, y, "identical runs must agree bitwise");
        }

        // Corrupting future frames must not change earlier outputs.
        let mut mutated = disc_clip(6, 2);
        for t in 4..6 {
            mutated.frames[t].mapv_inplace(|v| 1.0 - v);
        }
        let c = run_video(&model, &store, &mutated, ReferencePolicy::FirstAndPrevious).unwrap();
        for t in 0..4 {
            assert_eq!(a.labels[t], c.labels[t], "frame {t} depends on the future");
        }
    }

    #[test]
    fn frame_zero_passes_through_and_single_frame_videos_are_trivial() {
        let (model, store) = tiny_model(54);
        let mut clip = disc_clip(3, 1);
        let run = run_video(&model, &store, &clip, ReferencePolicy::FirstOnly).unwrap();
        assert_eq!(run.labels[0], clip.labels[0]);
        assert_eq!(run.labels.len(), 3);
        assert_eq!(run.seconds.len(), 2);

        clip.frames.truncate(1);
        clip.labels.truncate(1);
        let run = run_video(&model, &store, &clip, ReferencePolicy::FirstOnly).unwrap();
        assert_eq!(run.labels.len(), 1);
        assert!(run.steps.is_empty());
        assert_eq!(run.labels[0], clip.labels[0]);
    }

    #[test]
    fn aggregated_outputs_form_a_distribution() {
        let (model, store) = tiny_model(55);
        let clip = disc_clip(3, 2);
        let run = run_video(&model, &store, &clip, ReferencePolicy::FirstAndPrevious).unwrap();
        for s in &run.steps {
            let (nc, h, w) = s.probs.class_distribution.dim();
            assert_eq!(nc, 3);
            for y in 0..h {
                for x in 0..w {
                    let sum: f64 = (0..nc).map(|c| s.probs.class_distribution[(c, y, x)]).sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn invalid_sessions_and_frames_are_rejected() {
        let clip = disc_clip(2, 1);
        let err = init_session(&clip.frames[0], &[], ReferencePolicy::FirstOnly).unwrap_err();
        assert!(matches!(err, VosError::Dataset(_)));

        let m = object_mask(&clip.labels[0], 1);
        let err =
            init_session(&clip.frames[0], &[m.clone(), m.clone()], ReferencePolicy::FirstOnly)
                .unwrap_err();
        assert!(matches!(err, VosError::Dataset(_)), "overlap must be rejected");

        let small = Array2::zeros((4, 4));
        let err =
            init_session(&clip.frames[0], &[small], ReferencePolicy::FirstOnly).unwrap_err();
        assert!(matches!(err, VosError::ShapeMismatch { .. }));

        let err = init_session(&clip.frames[0], &[m.clone()], ReferencePolicy::EveryK(0))
            .unwrap_err();
        assert!(matches!(err, VosError::Dataset(_)));

        let (model, store) = tiny_model(56);
        let mut state =
            init_session(&clip.frames[0], &[m], ReferencePolicy::FirstOnly).unwrap();
        let wrong = Array3::zeros((3, 12, 12));
        let err = step(&mut state, &model, &store, &wrong).unwrap_err();
        assert!(matches!(err, VosError::ShapeMismatch { .. }));
    }

    #[test]
    fn timing_summary_orders_do_not_matter() {
        let (med, mean) = timing_summary(&[3.0, 1.0, 2.0]);
        assert_eq!(med, 2.0);
        assert_eq!(mean, 2.0);
        let (med, _) = timing_summary(&[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(med, 2.5);
    }
}
