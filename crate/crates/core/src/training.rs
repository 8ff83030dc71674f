//! Clip sampling with augmentation, the multi-object loss, AdamW, the
//! two-stage optimization loop, and checkpointing.
//!
//! Stage one trains on still images: one frame is perturbed twice, once as
//! the reference and once as the query. Stage two samples short clips and
//! uses every frame but the last as a reference with its true mask.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, VarId};
use crate::config::{AugConfig, ClsBackground, RunConfig, TrainConfig};
use crate::dataset::{object_mask, present_objects, Clip, Dataset};
use crate::error::{Result, VosError};
use crate::features::{ClipSample, ReferenceFrame, BN_MOMENTUM};
use crate::model::VosModel;
use crate::transformer::RunMode;

// ---------------------------------------------------------------------------
// Augmentation.

/// One sampled geometric and photometric perturbation. Geometry is a
/// rotation and isotropic scale about the frame center followed by a
/// translation, optionally after a horizontal flip of the source.
#[derive(Clone, Copy, Debug)]
struct Jitter {
    flip: bool,
    angle: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    shift: f64,
    gain: f64,
}

const IDENTITY_JITTER: Jitter = Jitter {
    flip: false,
    angle: 0.0,
    scale: 1.0,
    tx: 0.0,
    ty: 0.0,
    shift: 0.0,
    gain: 1.0,
};

/// Uniform draw that consumes no randomness on a degenerate range, so an
/// all-zero augmentation config leaves the RNG untouched.
fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn sample_jitter(
    rng: &mut ChaCha8Rng,
    a: &AugConfig,
    w: usize,
    h: usize,
    strength: f64,
    allow_flip: bool,
) -> Jitter {
    let flip = allow_flip && a.flip_prob > 0.0 && rng.gen_bool(a.flip_prob.min(1.0));
    Jitter {
        flip,
        angle: u(rng, -a.rotate_deg, a.rotate_deg) * strength * PI / 180.0,
        scale: 1.0 + u(rng, a.scale_lo - 1.0, a.scale_hi - 1.0) * strength,
        tx: u(rng, -a.translate_frac, a.translate_frac) * w as f64 * strength,
        ty: u(rng, -a.translate_frac, a.translate_frac) * h as f64 * strength,
        shift: u(rng, -a.brightness, a.brightness) * strength,
        gain: 1.0 + u(rng, -a.contrast, a.contrast) * strength,
    }
}

/// Approximate composition: angles and translations add, scales and gains
/// multiply. Good enough for jitter; never used for exact geometry.
fn compose(base: &Jitter, extra: &Jitter) -> Jitter {
    Jitter {
        flip: base.flip,
        angle: base.angle + extra.angle,
        scale: base.scale * extra.scale,
        tx: base.tx + extra.tx,
        ty: base.ty + extra.ty,
        shift: base.shift + extra.shift,
        gain: base.gain * extra.gain,
    }
}

fn is_identity_geometry(j: &Jitter) -> bool {
    !j.flip && j.angle == 0.0 && j.scale == 1.0 && j.tx == 0.0 && j.ty == 0.0
}

/// Source coordinates for an output pixel under the inverse of the jitter's
/// geometric map.
fn source_coords(j: &Jitter, w: usize, h: usize, y: f64, x: f64) -> (f64, f64) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let dx = x - cx - j.tx;
    let dy = y - cy - j.ty;
    let (s, c) = (-j.angle).sin_cos();
    let sx = (c * dx - s * dy) / j.scale + cx;
    let sy = (s * dx + c * dy) / j.scale + cy;
    let sx = if j.flip { w as f64 - 1.0 - sx } else { sx };
    (sy, sx)
}

fn warp_frame(img: &Array3<f64>, j: &Jitter) -> Array3<f64> {
    let (ch, h, w) = img.dim();
    if is_identity_geometry(j) {
        return img.clone();
    }
    Array3::from_shape_fn((ch, h, w), |(c, y, x)| {
        let (sy, sx) = source_coords(j, w, h, y as f64, x as f64);
        let sy = sy.clamp(0.0, h as f64 - 1.0);
        let sx = sx.clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = img[(c, y0, x0)] * (1.0 - fx) + img[(c, y0, x1)] * fx;
        let bot = img[(c, y1, x0)] * (1.0 - fx) + img[(c, y1, x1)] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn warp_labels(labels: &Array2<u8>, j: &Jitter) -> Array2<u8> {
    let (h, w) = labels.dim();
    if is_identity_geometry(j) {
        return labels.clone();
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = source_coords(j, w, h, y as f64, x as f64);
        let yi = sy.round().clamp(0.0, h as f64 - 1.0) as usize;
        let xi = sx.round().clamp(0.0, w as f64 - 1.0) as usize;
        labels[(yi, xi)]
    })
}

fn color_jitter(img: &Array3<f64>, j: &Jitter) -> Array3<f64> {
    if j.shift == 0.0 && j.gain == 1.0 {
        return img.clone();
    }
    img.mapv(|v| ((v - 0.5) * j.gain + 0.5 + j.shift).clamp(0.0, 1.0))
}

fn apply_jitter(img: &Array3<f64>, labels: &Array2<u8>, j: &Jitter) -> (Array3<f64>, Array2<u8>) {
    let warped = warp_frame(img, j);
    (color_jitter(&warped, j), warp_labels(labels, j))
}

// ---------------------------------------------------------------------------
// Scene sampling.

/// One training scene: a query frame with ground truth and, per object, the
/// reference frames the model will condition on.
pub struct SceneSample {
    pub id: String,
    /// Object ids tracked in this scene, ascending.
    pub objects: Vec<u8>,
    /// One model input per tracked object; all share the query frame.
    pub inputs: Vec<ClipSample>,
    /// Ground-truth label map of the query frame.
    pub labels: Array2<u8>,
}

struct WarpedFrame {
    rgb: Array3<f64>,
    labels: Array2<u8>,
}

fn scene_from_frames(id: String, refs: &[WarpedFrame], query: &WarpedFrame, objects: Vec<u8>) -> SceneSample {
    let inputs = objects
        .iter()
        .map(|&obj| ClipSample {
            refs: refs
                .iter()
                .map(|f| ReferenceFrame {
                    rgb: f.rgb.clone(),
                    mask: object_mask(&f.labels, obj),
                })
                .collect(),
            query: query.rgb.clone(),
        })
        .collect();
    SceneSample { id, objects, inputs, labels: query.labels.clone() }
}

/// Ids present in every reference label map; the query may lose an object.
fn objects_in_all(refs: &[WarpedFrame], n_objects: u8) -> Vec<u8> {
    (1..=n_objects)
        .filter(|&id| refs.iter().all(|f| f.labels.iter().any(|&v| v == id)))
        .collect()
}

/// Sorted distinct frame indices; falls back to sampling with replacement
/// when the clip is shorter than the request.
fn pick_frames(rng: &mut ChaCha8Rng, n_frames: usize, want: usize) -> Vec<usize> {
    let mut idx: Vec<usize>;
    if n_frames >= want {
        let mut pool: Vec<usize> = (0..n_frames).collect();
        for i in 0..want {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        idx = pool[..want].to_vec();
    } else {
        idx = (0..want).map(|_| rng.gen_range(0..n_frames)).collect();
    }
    idx.sort_unstable();
    idx
}

const AUG_RETRIES: usize = 8;

/// Sample a video-stage scene: `clip_len` frames in temporal order, the last
/// one as the query. Augmentation retries until at least one object survives
/// in every reference; the unaugmented frames are the last resort.
pub fn sample_video_scene(
    rng: &mut ChaCha8Rng,
    clip: &Clip,
    clip_len: usize,
    aug: &AugConfig,
) -> SceneSample {
    assert!(clip_len >= 2, "a scene needs at least one reference and a query");
    let (h, w) = clip.size();
    let idx = pick_frames(rng, clip.frames.len(), clip_len);
    let id = format!(
        "{}[{}->f{}]",
        clip.id,
        idx[..clip_len - 1]
            .iter()
            .map(|i| format!("f{i}"))
            .collect::<Vec<_>>()
            .join(","),
        idx[clip_len - 1]
    );

    for _ in 0..AUG_RETRIES {
        let base = sample_jitter(rng, aug, w, h, 1.0, true);
        let frames: Vec<WarpedFrame> = idx
            .iter()
            .map(|&i| {
                let extra = if aug.per_frame > 0.0 && rng.gen_bool(aug.per_frame.min(1.0)) {
                    sample_jitter(rng, aug, w, h, 0.25, false)
                } else {
                    IDENTITY_JITTER
                };
                let j = compose(&base, &extra);
                let (rgb, labels) = apply_jitter(&clip.frames[i], &clip.labels[i], &j);
                WarpedFrame { rgb, labels }
            })
            .collect();
        let (refs, query) = frames.split_at(clip_len - 1);
        let objects = objects_in_all(refs, clip.n_objects);
        if !objects.is_empty() {
            return scene_from_frames(id, refs, &query[0], objects);
        }
    }

    let frames: Vec<WarpedFrame> = idx
        .iter()
        .map(|&i| WarpedFrame { rgb: clip.frames[i].clone(), labels: clip.labels[i].clone() })
        .collect();
    let (refs, query) = frames.split_at(clip_len - 1);
    let mut objects = objects_in_all(refs, clip.n_objects);
    if objects.is_empty() {
        objects = present_objects(&refs[0].labels, clip.n_objects);
    }
    if objects.is_empty() {
        objects = vec![1];
    }
    scene_from_frames(id, refs, &query[0], objects)
}

/// Sample a still-image pretraining scene: one frame perturbed twice, once
/// as the reference and once as the query.
pub fn sample_static_scene(rng: &mut ChaCha8Rng, clip: &Clip, aug: &AugConfig) -> SceneSample {
    let (h, w) = clip.size();
    let mut fi = rng.gen_range(0..clip.frames.len());
    for _ in 0..AUG_RETRIES {
        if !present_objects(&clip.labels[fi], clip.n_objects).is_empty() {
            break;
        }
        fi = rng.gen_range(0..clip.frames.len());
    }
    let id = format!("{}[static f{fi}]", clip.id);

    for _ in 0..AUG_RETRIES {
        let jr = sample_jitter(rng, aug, w, h, 1.0, true);
        let jq = sample_jitter(rng, aug, w, h, 1.0, true);
        let (r_rgb, r_labels) = apply_jitter(&clip.frames[fi], &clip.labels[fi], &jr);
        let reference = WarpedFrame { rgb: r_rgb, labels: r_labels };
        let objects = objects_in_all(std::slice::from_ref(&reference), clip.n_objects);
        if objects.is_empty() {
            continue;
        }
        let (q_rgb, q_labels) = apply_jitter(&clip.frames[fi], &clip.labels[fi], &jq);
        let query = WarpedFrame { rgb: q_rgb, labels: q_labels };
        return scene_from_frames(id, std::slice::from_ref(&reference), &query, objects);
    }

    let plain = WarpedFrame { rgb: clip.frames[fi].clone(), labels: clip.labels[fi].clone() };
    let mut objects = present_objects(&plain.labels, clip.n_objects);
    if objects.is_empty() {
        objects = vec![1];
    }
    let query = WarpedFrame { rgb: plain.rgb.clone(), labels: plain.labels.clone() };
    scene_from_frames(id, std::slice::from_ref(&plain), &query, objects)
}

// ---------------------------------------------------------------------------
// Losses.

/// Reported components of one scene's loss. The invariant
/// `total = mean over objects of (cls[i] + iou[i])` holds exactly.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: Vec<f64>,
    pub iou: Vec<f64>,
}

/// Per-object classification losses with the softmax running across
/// objects. Pixel attribution: an object's own pixels enter its term scaled
/// by the object count, each background pixel contributes equally to every
/// term; the mean over objects is then exactly the per-pixel cross entropy
/// averaged over the frame. With `Exclude`, background pixels are dropped
/// and the average runs over foreground pixels only.
pub fn cls_losses(
    t: &mut Tape,
    scores: &[VarId],
    labels: &Array2<u8>,
    objects: &[u8],
    bg: ClsBackground,
) -> Vec<VarId> {
    let n = scores.len();
    assert_eq!(n, objects.len());
    let (h, w) = labels.dim();
    let p = h * w;
    let append = matches!(bg, ClsBackground::Append);
    let k = if append { n + 1 } else { n };

    let mut rows: Vec<VarId> = scores.iter().map(|&s| t.reshape(s, &[1, p])).collect();
    if append {
        // The background channel mirrors inference aggregation: its score is
        // the negated strongest object score, so its odds are the reciprocal
        // of the best object's odds.
        let mut m = rows[0];
        for &r in &rows[1..] {
            m = t.maximum(m, r);
        }
        rows.push(t.neg(m));
    }
    let stacked = t.concat(0, &rows);
    let xt = t.transpose2(stacked);
    let sm = t.softmax_rows(xt);
    let lp = t.ln(sm);

    let channel_of = |l: u8| -> Option<usize> {
        if l == 0 {
            None
        } else {
            objects.iter().position(|&o| o == l)
        }
    };
    let p_eff = if append {
        p
    } else {
        labels.iter().filter(|&&l| channel_of(l).is_some()).count()
    };
    if p_eff == 0 {
        return (0..n).map(|_| t.constant(ArrayD::zeros(IxDyn(&[])))).collect();
    }

    (0..n)
        .map(|i| {
            let mut mask = Array2::<f64>::zeros((p, k));
            for (q, &l) in labels.iter().enumerate() {
                match channel_of(l) {
                    Some(c) if c == i => mask[(q, c)] = n as f64 / p_eff as f64,
                    Some(_) => {}
                    None if append => mask[(q, k - 1)] = 1.0 / p_eff as f64,
                    None => {}
                }
            }
            let mv = t.constant(mask.into_dyn());
            let picked = t.mul(lp, mv);
            let s = t.sum_all(picked);
            t.neg(s)
        })
        .collect()
}

/// Soft region-overlap loss on the tape: one minus the ratio of the
/// elementwise minimum to the elementwise maximum of prediction and target.
pub fn iou_loss(t: &mut Tape, prob: VarId, target: &Array2<f64>) -> VarId {
    let y = t.constant(target.clone().into_dyn());
    let mn = t.minimum(prob, y);
    let mx = t.maximum(prob, y);
    let smn = t.sum_all(mn);
    let smx = t.sum_all(mx);
    let ratio = t.div(smn, smx);
    let one = t.constant(ArrayD::from_elem(IxDyn(&[]), 1.0));
    t.sub(one, ratio)
}

/// Plain-array twin of `iou_loss`. An empty prediction against an empty
/// target counts as a perfect match.
pub fn iou_loss_value(m: &Array2<f64>, y: &Array2<f64>) -> f64 {
    assert_eq!(m.dim(), y.dim());
    let mut smn = 0.0;
    let mut smx = 0.0;
    for (a, b) in m.iter().zip(y.iter()) {
        smn += a.min(*b);
        smx += a.max(*b);
    }
    if smx == 0.0 {
        0.0
    } else {
        1.0 - smn / smx
    }
}

/// Forward one scene and build its loss on the tape. Returns the scalar
/// root together with the reported breakdown.
pub fn scene_loss(
    t: &mut Tape,
    model: &VosModel,
    store: &ParamStore,
    scene: &SceneSample,
    mode: &mut RunMode,
    bg: ClsBackground,
) -> Result<(VarId, LossBreakdown)> {
    let outs = model.forward_batch(t, store, &scene.inputs, mode)?;
    let n = outs.len();
    let scores: Vec<VarId> = outs.iter().map(|o| o.score).collect();
    let cls = cls_losses(t, &scores, &scene.labels, &scene.objects, bg);
    let ious: Vec<VarId> = outs
        .iter()
        .zip(&scene.objects)
        .map(|(o, &obj)| iou_loss(t, o.prob, &object_mask(&scene.labels, obj)))
        .collect();

    let mut acc: Option<VarId> = None;
    for i in 0..n {
        let s = t.add(cls[i], ious[i]);
        acc = Some(match acc {
            None => s,
            Some(a) => t.add(a, s),
        });
    }
    let total = t.mul_scalar(acc.expect("scene has at least one object"), 1.0 / n as f64);

    let breakdown = LossBreakdown {
        total: t.scalar(total),
        cls: cls.iter().map(|&v| t.scalar(v)).collect(),
        iou: ious.iter().map(|&v| t.scalar(v)).collect(),
    };
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Optimizer.

/// Adam with decoupled weight decay. Moments are kept per parameter and the
/// decay is applied directly to the weights, outside the adaptive scaling.
pub struct AdamW {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: HashMap<usize, ArrayD<f64>>,
    v: HashMap<usize, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<usize, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(&id.index()) else { continue };
            let m = self
                .m
                .entry(id.index())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id.index())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer.

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Stage {
    Pretrain,
    Main,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Main => "main",
        })
    }
}

/// What one optimization step reported.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub val: Option<(f64, f64)>,
}

pub struct Trainer<'m> {
    pub model: &'m VosModel,
    pub cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m VosModel, cfg: TrainConfig) -> Self {
        Trainer {
            model,
            opt: AdamW::new(&cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            step: 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.pretrain_steps + self.cfg.main_steps) as u64
    }

    /// Stage of the NEXT step to run.
    pub fn stage(&self) -> Stage {
        if self.step < self.cfg.pretrain_steps as u64 {
            Stage::Pretrain
        } else {
            Stage::Main
        }
    }

    pub fn sample_batch(&mut self, clips: &[Clip]) -> Vec<SceneSample> {
        assert!(!clips.is_empty(), "cannot sample from an empty clip set");
        let stage = self.stage();
        (0..self.cfg.batch_size)
            .map(|_| {
                let c = &clips[self.rng.gen_range(0..clips.len())];
                match stage {
                    Stage::Pretrain => sample_static_scene(&mut self.rng, c, &self.cfg.aug),
                    Stage::Main => {
                        sample_video_scene(&mut self.rng, c, self.cfg.clip_len, &self.cfg.aug)
                    }
                }
            })
            .collect()
    }

    /// One optimizer step over a batch of scenes. Aborts with diagnostics if
    /// the loss is not finite; nothing is updated in that case.
    pub fn train_step(&mut self, store: &mut ParamStore, scenes: &[SceneSample]) -> Result<StepRecord> {
        assert!(!scenes.is_empty());
        let stage = self.stage();
        let bn_live = stage == Stage::Pretrain || !self.cfg.freeze_bn_in_main;
        let mut t = Tape::new();
        let mut acc: Option<VarId> = None;
        let mut cls_sum = 0.0;
        let mut iou_sum = 0.0;
        for scene in scenes {
            let mut mode = RunMode::Train {
                rng: &mut self.rng,
                dropout: self.model.cfg.dropout,
                bn_stats: bn_live,
            };
            let (root, bd) = scene_loss(&mut t, self.model, store, scene, &mut mode, self.cfg.cls_background)?;
            cls_sum += bd.cls.iter().sum::<f64>() / bd.cls.len() as f64;
            iou_sum += bd.iou.iter().sum::<f64>() / bd.iou.len() as f64;
            acc = Some(match acc {
                None => root,
                Some(a) => t.add(a, root),
            });
        }
        let batch_root = t.mul_scalar(acc.unwrap(), 1.0 / scenes.len() as f64);
        let total = t.scalar(batch_root);
        if !total.is_finite() {
            return Err(VosError::NonFiniteLoss {
                step: self.step as usize,
                batch: scenes.iter().map(|s| s.id.clone()).collect(),
            });
        }
        t.backward(batch_root);
        let grads = t.param_grads();
        self.opt.step(store, &grads);
        if bn_live {
            for (pid, stat) in t.take_pending_stats() {
                let cur = store.value(pid).clone();
                *store.value_mut(pid) = cur * (1.0 - BN_MOMENTUM) + &stat * BN_MOMENTUM;
            }
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            stage,
            total,
            cls: cls_sum / scenes.len() as f64,
            iou: iou_sum / scenes.len() as f64,
            val: None,
        })
    }

    /// Run the remaining steps of the two-stage schedule. `validate` is
    /// called per `val_every` (and after the final step) with the store and
    /// the step number; it returns a (region, boundary) score pair.
    pub fn run(
        &mut self,
        store: &mut ParamStore,
        data: &Dataset,
        metrics_path: Option<&Path>,
        mut validate: Option<&mut dyn FnMut(&ParamStore, u64) -> (f64, f64)>,
    ) -> Result<Vec<StepRecord>> {
        let mut writer = match metrics_path {
            Some(p) => {
                let io = |e| VosError::io(p.display().to_string(), e);
                let f = File::create(p).map_err(io)?;
                let mut w = BufWriter::new(f);
                writeln!(w, "step,stage,loss_total,loss_cls,loss_iou,val_j,val_f").map_err(io)?;
                Some((w, p))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < self.total_steps() {
            let scenes = self.sample_batch(&data.train);
            let mut rec = self.train_step(store, &scenes)?;
            let due = self.cfg.val_every > 0 && rec.step % self.cfg.val_every as u64 == 0;
            let last = self.step == self.total_steps();
            if let Some(v) = validate.as_mut() {
                if due || last {
                    rec.val = Some(v(store, rec.step));
                }
            }
            if let Some((w, p)) = writer.as_mut() {
                let (vj, vf) = match rec.val {
                    Some((j, f)) => (format!("{j}"), format!("{f}")),
                    None => (String::new(), String::new()),
                };
                writeln!(w, "{},{},{},{},{},{vj},{vf}", rec.step, rec.stage, rec.total, rec.cls, rec.iou)
                    .map_err(|e| VosError::io(p.display().to_string(), e))?;
            }
            history.push(rec);
        }
        if let Some((w, p)) = writer.as_mut() {
            w.flush().map_err(|e| VosError::io(p.display().to_string(), e))?;
        }
        Ok(history)
    }

    /// Capture everything needed to continue training bitwise-identically.
    pub fn snapshot(&self, store: &ParamStore, config_text: &str) -> CheckpointData {
        let named = |ids: &dyn Fn() -> Vec<ParamId>, src: &HashMap<usize, ArrayD<f64>>| {
            ids()
                .into_iter()
                .filter_map(|id| {
                    src.get(&id.index()).map(|a| NamedArray {
                        name: store.name(id).to_string(),
                        trainable: false,
                        value: a.clone(),
                    })
                })
                .collect::<Vec<_>>()
        };
        let all_ids = || store.ids().collect::<Vec<_>>();
        CheckpointData {
            config_text: config_text.to_string(),
            step: self.step,
            params: store
                .ids()
                .map(|id| NamedArray {
                    name: store.name(id).to_string(),
                    trainable: store.is_trainable(id),
                    value: store.value(id).clone(),
                })
                .collect(),
            opt_t: self.opt.t,
            opt_m: named(&all_ids, &self.opt.m),
            opt_v: named(&all_ids, &self.opt.v),
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Rebuild a trainer from a checkpoint. The store must already hold the
    /// model's registered parameters; values are overwritten in place.
    pub fn restore(model: &'m VosModel, ck: &CheckpointData, store: &mut ParamStore) -> Result<Self> {
        let run_cfg = RunConfig::from_text(&ck.config_text)
            .map_err(|e| VosError::Checkpoint(format!("embedded config: {e}")))?;
        if run_cfg.model != model.cfg {
            return Err(VosError::Checkpoint(
                "checkpoint was written for a different model configuration".into(),
            ));
        }
        fn resolve(store: &ParamStore, name: &str) -> Result<ParamId> {
            store
                .id(name)
                .ok_or_else(|| VosError::Checkpoint(format!("unknown parameter `{name}`")))
        }
        for p in &ck.params {
            let id = resolve(store, &p.name)?;
            if store.value(id).shape() != p.value.shape() {
                return Err(VosError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    store.value(id).shape(),
                    p.value.shape()
                )));
            }
            *store.value_mut(id) = p.value.clone();
        }
        let mut opt = AdamW::new(&run_cfg.train);
        opt.t = ck.opt_t;
        for arr in &ck.opt_m {
            opt.m.insert(resolve(store, &arr.name)?.index(), arr.value.clone());
        }
        for arr in &ck.opt_v {
            opt.v.insert(resolve(store, &arr.name)?.index(), arr.value.clone());
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
        rng.set_word_pos(ck.rng_word_pos);
        Ok(Trainer { model, cfg: run_cfg.train, opt, rng, step: ck.step })
    }
}

/// Rebuild a model and its parameter store from a checkpoint, ignoring the
/// optimizer state. This is the inference-side loader; use
/// [`Trainer::restore`] to continue training.
pub fn load_model(ck: &CheckpointData) -> Result<(VosModel, ParamStore, RunConfig)> {
    let run_cfg = RunConfig::from_text(&ck.config_text)
        .map_err(|e| VosError::Checkpoint(format!("embedded config: {e}")))?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = VosModel::register(&mut store, &mut rng, &run_cfg.model);
    for p in &ck.params {
        let id = store
            .id(&p.name)
            .ok_or_else(|| VosError::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
        if store.value(id).shape() != p.value.shape() {
            return Err(VosError::Checkpoint(format!(
                "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                p.name,
                store.value(id).shape(),
                p.value.shape()
            )));
        }
        *store.value_mut(id) = p.value.clone();
    }
    Ok((model, store, run_cfg))
}

// ---------------------------------------------------------------------------
// Checkpoint serialization.

#[derive(Clone, Debug)]
pub struct NamedArray {
    pub name: String,
    pub trainable: bool,
    pub value: ArrayD<f64>,
}

/// Everything a training run needs to continue exactly where it stopped.
#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub config_text: String,
    pub step: u64,
    pub params: Vec<NamedArray>,
    pub opt_t: u64,
    pub opt_m: Vec<NamedArray>,
    pub opt_v: Vec<NamedArray>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

const CKPT_MAGIC: &[u8; 8] = b"VOSCKPT1";

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w_u32(w, b.len() as u32)?;
    w.write_all(b)
}
fn w_arrays(w: &mut impl Write, arrs: &[NamedArray]) -> std::io::Result<()> {
    w_u32(w, arrs.len() as u32)?;
    for a in arrs {
        w_bytes(w, a.name.as_bytes())?;
        w.write_all(&[u8::from(a.trainable)])?;
        w_u32(w, a.value.ndim() as u32)?;
        for &d in a.value.shape() {
            w_u64(w, d as u64)?;
        }
        for &v in a.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_bytes(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let n = r_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}
fn r_arrays(r: &mut impl Read) -> std::io::Result<Vec<NamedArray>> {
    let n = r_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = String::from_utf8_lossy(&r_bytes(r)?).into_owned();
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = r_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r_u64(r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(NamedArray { name, trainable: flag[0] != 0, value });
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, ck: &CheckpointData) -> Result<()> {
    let io = |e| VosError::io(path.display().to_string(), e);
    let f = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w_bytes(&mut w, ck.config_text.as_bytes())?;
        w_u64(&mut w, ck.step)?;
        w_arrays(&mut w, &ck.params)?;
        w_u64(&mut w, ck.opt_t)?;
        w_arrays(&mut w, &ck.opt_m)?;
        w_arrays(&mut w, &ck.opt_v)?;
        w.write_all(&ck.rng_seed)?;
        w_u64(&mut w, ck.rng_word_pos as u64)?;
        w_u64(&mut w, (ck.rng_word_pos >> 64) as u64)?;
        w.flush()
    })()
    .map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let io = |e| VosError::io(path.display().to_string(), e);
    let f = File::open(path).map_err(io)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(VosError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    (|| -> std::io::Result<CheckpointData> {
        let config_text = String::from_utf8_lossy(&r_bytes(&mut r)?).into_owned();
        let step = r_u64(&mut r)?;
        let params = r_arrays(&mut r)?;
        let opt_t = r_u64(&mut r)?;
        let opt_m = r_arrays(&mut r)?;
        let opt_v = r_arrays(&mut r)?;
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let lo = r_u64(&mut r)? as u128;
        let hi = r_u64(&mut r)? as u128;
        Ok(CheckpointData {
            config_text,
            step,
            params,
            opt_t,
            opt_m,
            opt_v,
            rng_seed,
            rng_word_pos: lo | (hi << 64),
        })
    })()
    .map_err(io)
}
