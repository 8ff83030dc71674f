//! Mask decoding: attention maps focused on the target object, a refinement
//! head that walks back up the backbone skips, and the aggregation step that
//! turns per-object foreground probabilities into one class distribution.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_xavier, ParamId, ParamStore, Tape, VarId};
use crate::config::{BackgroundRule, ModelConfig, PROB_CLAMP};
use crate::features::ConvParams;

/// Produces per-head attention maps between the decoded target descriptor
/// and the query-frame tokens. Only projections for queries and keys exist;
/// the maps themselves are the output, there is no value path.
pub struct TargetAttentionParams {
    wq: ParamId,
    wk: ParamId,
    n_heads: usize,
}

impl TargetAttentionParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        TargetAttentionParams {
            wq: store.add(&format!("{name}.wq"), init_xavier(rng, &[d, d], d, d), true),
            wk: store.add(&format!("{name}.wk"), init_xavier(rng, &[d, d], d, d), true),
            n_heads: cfg.n_heads,
        }
    }

    /// `target` is (1, d), `query_tokens` is (h*w, d). Returns (heads, h, w)
    /// where each head is a softmax distribution over the query positions.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        target: VarId,
        query_tokens: VarId,
        h: usize,
        w: usize,
    ) -> VarId {
        let d = t.value(target).shape()[1];
        let dh = d / self.n_heads;
        let wq = t.param(store, self.wq);
        let wk = t.param(store, self.wk);
        let q = t.matmul(target, wq);
        let k = t.matmul(query_tokens, wk);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for i in 0..self.n_heads {
            let qh = t.slice_axis_range(q, 1, i * dh, (i + 1) * dh);
            let kh = t.slice_axis_range(k, 1, i * dh, (i + 1) * dh);
            let kht = t.transpose2(kh);
            let scores = t.matmul(qh, kht);
            let scaled = t.mul_scalar(scores, scale);
            heads.push(t.softmax_rows(scaled));
        }
        let stacked = t.concat(0, &heads);
        t.reshape(stacked, &[self.n_heads, h, w])
    }
}

/// One upsampling stage: bring the running map to the skip's resolution,
/// add a projected skip, then apply a two-conv residual refinement.
pub struct RefineBlockParams {
    skip: ConvParams,
    conva: ConvParams,
    convb: ConvParams,
}

impl RefineBlockParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        skip_ch: usize,
        g: usize,
    ) -> Self {
        RefineBlockParams {
            skip: ConvParams::register(store, rng, &format!("{name}.skip"), skip_ch, g, 3, 1, 1, true),
            conva: ConvParams::register(store, rng, &format!("{name}.a"), g, g, 3, 1, 1, true),
            convb: ConvParams::register(store, rng, &format!("{name}.b"), g, g, 3, 1, 1, true),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, main: VarId, skip_feat: VarId) -> VarId {
        let s = t.value(skip_feat).shape().to_vec();
        let up = t.bilinear_resize(main, s[2], s[3]);
        let sk = self.skip.forward(t, store, skip_feat);
        let base = t.add(up, sk);
        let h1 = self.conva.forward(t, store, base);
        let h1 = t.relu(h1);
        let h2 = self.convb.forward(t, store, h1);
        let res = t.add(base, h2);
        t.relu(res)
    }
}

/// Decodes fused query features and attention maps into two-channel mask
/// logits at a quarter of the padded input resolution.
pub struct MaskHeadParams {
    conv_in: ConvParams,
    refine8: RefineBlockParams,
    refine4: RefineBlockParams,
    out: ConvParams,
}

impl MaskHeadParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let g = cfg.head_channels;
        MaskHeadParams {
            conv_in: ConvParams::register(
                store,
                rng,
                &format!("{name}.conv_in"),
                cfg.d_model + cfg.n_heads,
                g,
                3,
                1,
                1,
                true,
            ),
            refine8: RefineBlockParams::register(store, rng, &format!("{name}.refine8"), cfg.widths[2], g),
            refine4: RefineBlockParams::register(store, rng, &format!("{name}.refine4"), cfg.widths[1], g),
            out: ConvParams::register(store, rng, &format!("{name}.out"), g, 2, 3, 1, 1, true),
        }
    }

    /// `query_feat` is (1, d, h, w) at the coarsest scale, `maps` is
    /// (heads, h, w), the skips are (1, c, 2h, 2w) and (1, c, 4h, 4w).
    /// Returns logits (1, 2, 4h, 4w).
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        query_feat: VarId,
        maps: VarId,
        skip_s8: VarId,
        skip_s4: VarId,
    ) -> VarId {
        let ms = t.value(maps).shape().to_vec();
        let maps4 = t.reshape(maps, &[1, ms[0], ms[1], ms[2]]);
        let fused = t.concat(1, &[query_feat, maps4]);
        let x = self.conv_in.forward(t, store, fused);
        let x = t.relu(x);
        let x = self.refine8.forward(t, store, x, skip_s8);
        let x = self.refine4.forward(t, store, x, skip_s4);
        self.out.forward(t, store, x)
    }
}

/// Turns two-channel logits at quarter resolution into a full-resolution
/// foreground score map, cropped back to the original frame size. The score
/// is the foreground logit minus the background logit, so the foreground
/// probability is its sigmoid.
pub fn score_full_res(
    t: &mut Tape,
    logits: VarId,
    padded_hw: (usize, usize),
    orig_hw: (usize, usize),
) -> VarId {
    let bg = t.slice_axis_range(logits, 1, 0, 1);
    let fg = t.slice_axis_range(logits, 1, 1, 2);
    let diff = t.sub(fg, bg);
    let up = t.bilinear_resize(diff, padded_hw.0, padded_hw.1);
    let cropped_h = t.slice_axis_range(up, 2, 0, orig_hw.0);
    let cropped = t.slice_axis_range(cropped_h, 3, 0, orig_hw.1);
    t.reshape(cropped, &[orig_hw.0, orig_hw.1])
}

/// Per-pixel result of fusing several independently predicted objects.
#[derive(Debug)]
pub struct ObjectProbabilityMap {
    /// (objects, h, w); relative weight of each object, sums to one.
    pub object_probs: Array3<f64>,
    /// (objects + 1, h, w); channel 0 is background. Sums to one.
    pub class_distribution: Array3<f64>,
}

impl ObjectProbabilityMap {
    /// Hard per-pixel labels: 0 is background, object k gets label k+1.
    /// Ties resolve to the lowest label.
    pub fn labels(&self) -> Array2<u8> {
        let (nc, h, w) = self.class_distribution.dim();
        assert!(nc <= 256, "too many objects for u8 labels");
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0usize;
            for c in 1..nc {
                if self.class_distribution[(c, y, x)] > self.class_distribution[(best, y, x)] {
                    best = c;
                }
            }
            best as u8
        })
    }
}

/// Fuses per-object foreground probabilities into a single distribution.
/// Each probability is clamped away from 0 and 1, converted to odds, and
/// normalized across objects. Background is then attached per `rule`:
/// rescaling the object shares by one minus the strongest foreground, or
/// entering the background as one more odds term.
pub fn soft_aggregate(per_object: &[Array2<f64>], rule: BackgroundRule) -> ObjectProbabilityMap {
    assert!(!per_object.is_empty(), "aggregation needs at least one object");
    let (h, w) = per_object[0].dim();
    for p in per_object {
        assert_eq!(p.dim(), (h, w), "all object maps must share one shape");
    }
    let n = per_object.len();
    let clamp = |v: f64| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);

    let mut object_probs = Array3::<f64>::zeros((n, h, w));
    let mut class_distribution = Array3::<f64>::zeros((n + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut odds = vec![0.0f64; n];
            let mut max_p = 0.0f64;
            for (i, p) in per_object.iter().enumerate() {
                let v = clamp(p[(y, x)]);
                odds[i] = v / (1.0 - v);
                if v > max_p {
                    max_p = v;
                }
            }
            let odds_sum: f64 = odds.iter().sum();
            for i in 0..n {
                object_probs[(i, y, x)] = odds[i] / odds_sum;
            }
            match rule {
                BackgroundRule::Rescale => {
                    class_distribution[(0, y, x)] = 1.0 - max_p;
                    for i in 0..n {
                        class_distribution[(i + 1, y, x)] = object_probs[(i, y, x)] * max_p;
                    }
                }
                BackgroundRule::PseudoObject => {
                    let pb = clamp(1.0 - max_p);
                    let ob = pb / (1.0 - pb);
                    let total = odds_sum + ob;
                    class_distribution[(0, y, x)] = ob / total;
                    for i in 0..n {
                        class_distribution[(i + 1, y, x)] = odds[i] / total;
                    }
                }
            }
        }
    }
    ObjectProbabilityMap { object_probs, class_distribution }
}
