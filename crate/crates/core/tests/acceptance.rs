//! Acceptance gate: one numbered check per release criterion, each printing
//! a single PASS/FAIL line. Run serially with output visible:
//!
//! ```text
//! cargo test --test acceptance -- --nocapture --test-threads=1
//! ```
//!
//! The heavy end-to-end checks (6 and 7) train real models and dominate the
//! runtime; everything else finishes in seconds.

use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::time::Instant;

use ndarray::{Array2, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vos_core::autodiff::gradcheck::{check_param_grads, sample_coords};
use vos_core::config::{
    AugConfig, BackgroundRule, ClsBackground, EvalConfig, ReferencePolicy, SynthConfig,
};
use vos_core::evaluation::{boundary, boundary_f, evaluate_sequence, jaccard};
use vos_core::features::{count_parameters, EncoderVariant};
use vos_core::inference::run_video;
use vos_core::model::VosModel;
use vos_core::segmentation::{soft_aggregate, TargetAttentionParams};
use vos_core::synth::{generate, make_benchmark, Background, BackgroundKind, ObjectSpec, SceneSpec, ShapeKind, TextureKind};
use vos_core::training::{cls_losses, iou_loss_value, sample_video_scene, scene_loss};
use vos_core::transformer::{
    encoder_attention_flops, AttentionParams, EncoderParams, RunMode, SingleQuerySelfAttention,
};
use vos_core::{Dataset, MaskFusion, ModelConfig, ParamStore, RunConfig, Tape, Trainer};

// Pinned tolerances and thresholds.
const ATTENTION_REL_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_SAMPLES: usize = 100;
const ORACLE_TOL: f64 = 1e-9;
const LEARNING_FLOOR_JF: f64 = 0.70;
const ABLATION_SEEDS: u64 = 3;
const FULL_SCALE_REDUCTION: (f64, f64) = (0.15, 0.25);
const SCALING_TIME_FACTOR: f64 = 2.0;

fn criterion(n: usize, name: &str, body: impl FnOnce() -> String + UnwindSafe) {
    match catch_unwind(body) {
        Ok(detail) => println!("criterion {n} ({name}): PASS — {detail}"),
        Err(e) => {
            println!("criterion {n} ({name}): FAIL");
            resume_unwind(e);
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn c1_scale_substitution() {
    criterion(1, "scale substitution", || {
        "full-scale benchmark tables are out of scope; the oracle, gradient, \
         learning, ablation and scaling checks below stand in"
            .to_string()
    });
}

// ---------------------------------------------------------------------------
// Criterion 2: attention numerics against scalar brute force.

fn mat(store: &ParamStore, id: vos_core::ParamId) -> Array2<f64> {
    store.value(id).clone().into_dimensionality::<Ix2>().unwrap()
}

fn scalar_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[(i, p)] * b[(p, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

fn scalar_softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Plain-loop multi-head attention; shares no code with the tape version.
fn scalar_mha(
    x_q: &Array2<f64>,
    x_kv: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    wo: &Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let (lq, d) = x_q.dim();
    let lk = x_kv.dim().0;
    let dh = d / heads;
    let q = scalar_matmul(x_q, wq);
    let k = scalar_matmul(x_kv, wk);
    let v = scalar_matmul(x_kv, wv);
    let mut cat = Array2::zeros((lq, d));
    for m in 0..heads {
        for i in 0..lq {
            let mut scores = vec![0.0; lk];
            for j in 0..lk {
                let mut s = 0.0;
                for p in 0..dh {
                    s += q[(i, m * dh + p)] * k[(j, m * dh + p)];
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            scalar_softmax_row(&mut scores);
            for p in 0..dh {
                let mut acc = 0.0;
                for j in 0..lk {
                    acc += scores[j] * v[(j, m * dh + p)];
                }
                cat[(i, m * dh + p)] = acc;
            }
        }
    }
    scalar_matmul(&cat, wo)
}

fn ra2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn c2_attention_oracles() {
    criterion(2, "attention oracles", || {
        let begin = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ..ModelConfig::desk()
        };
        let mut store = ParamStore::new();
        let att = AttentionParams::register(&mut store, &mut rng, "att", 8, 2);
        let (wq, wk, wv, wo) = (
            mat(&store, att.wq),
            mat(&store, att.wk),
            mat(&store, att.wv),
            mat(&store, att.wo),
        );
        let mut worst = 0.0f64;

        // Self-attention: queries, keys and values from one token set.
        let x = ra2(&mut rng, 6, 8);
        let mut t = Tape::with_grad(false);
        let xv = t.constant(x.clone().into_dyn());
        let out = att.forward(&mut t, &store, xv, xv, &mut RunMode::Eval);
        let got = t.value(out).clone().into_dimensionality::<Ix2>().unwrap();
        let want = scalar_mha(&x, &x, &wq, &wk, &wv, &wo, 2);
        for (a, b) in got.iter().zip(want.iter()) {
            worst = worst.max(rel(*a, *b));
        }

        // Cross-attention: a single decoder token attending over the set.
        let q1 = ra2(&mut rng, 1, 8);
        let mut t = Tape::with_grad(false);
        let qv = t.constant(q1.clone().into_dyn());
        let kv = t.constant(x.clone().into_dyn());
        let out = att.forward(&mut t, &store, qv, kv, &mut RunMode::Eval);
        let got = t.value(out).clone().into_dimensionality::<Ix2>().unwrap();
        let want = scalar_mha(&q1, &x, &wq, &wk, &wv, &wo, 2);
        for (a, b) in got.iter().zip(want.iter()) {
            worst = worst.max(rel(*a, *b));
        }

        // Target attention maps: per-head softmax over query positions.
        let tab = TargetAttentionParams::register(&mut store, &mut rng, "tab", &cfg);
        let target = ra2(&mut rng, 1, 8);
        let tokens = ra2(&mut rng, 6, 8); // h=2, w=3
        let mut t = Tape::with_grad(false);
        let tv = t.constant(target.clone().into_dyn());
        let kv = t.constant(tokens.clone().into_dyn());
        let maps = tab.forward(&mut t, &store, tv, kv, 2, 3);
        let got = t.value(maps).clone();
        let twq = mat(&store, store.id("tab.wq").unwrap());
        let twk = mat(&store, store.id("tab.wk").unwrap());
        let q = scalar_matmul(&target, &twq);
        let k = scalar_matmul(&tokens, &twk);
        for m in 0..2usize {
            let mut scores = vec![0.0; 6];
            for j in 0..6 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += q[(0, m * 4 + p)] * k[(j, m * 4 + p)];
                }
                scores[j] = s / 2.0; // sqrt(d_head) = sqrt(4)
            }
            scalar_softmax_row(&mut scores);
            for j in 0..6 {
                worst = worst.max(rel(got[[m, j / 3, j % 3]], scores[j]));
            }
        }

        // Single-query closed form against the generic head loop.
        let sq = SingleQuerySelfAttention::register(&mut store, &mut rng, "sq", 8);
        for heads in [1usize, 2, 4] {
            let x1 = ra2(&mut rng, 1, 8);
            let mut t = Tape::with_grad(false);
            let xv = t.constant(x1.into_dyn());
            let closed = sq.forward(&mut t, &store, xv);
            let generic = sq.forward_generic(&mut t, &store, xv, heads);
            let a = t.value(closed).clone();
            let b = t.value(generic).clone();
            for (p, q) in a.iter().zip(b.iter()) {
                worst = worst.max(rel(*p, *q));
            }
        }

        assert!(worst <= ATTENTION_REL_TOL, "worst relative error {worst}");
        let secs = begin.elapsed().as_secs_f64();
        assert!(secs < 60.0, "took {secs}s, budget is one minute");
        format!("worst relative error {worst:.2e} (tolerance {ATTENTION_REL_TOL:.0e}), {secs:.2}s")
    });
}

// ---------------------------------------------------------------------------
// Criterion 3: end-to-end gradients on a toy model.

fn no_aug() -> AugConfig {
    AugConfig {
        flip_prob: 0.0,
        rotate_deg: 0.0,
        scale_lo: 1.0,
        scale_hi: 1.0,
        translate_frac: 0.0,
        per_frame: 0.0,
        brightness: 0.0,
        contrast: 0.0,
    }
}

fn toy_clip(id: &str, size: usize, n_objects: u8, frames: usize) -> vos_core::Clip {
    let mut objects = vec![ObjectSpec {
        shape: ShapeKind::Disc,
        texture: TextureKind::Flat,
        color: [0.85, 0.25, 0.2],
        size: size as f64 * 0.18,
        aspect: 1.0,
        center: (size as f64 * 0.45, size as f64 * 0.3),
        velocity: (0.2, 0.8),
        angle: 0.0,
        spin: 0.0,
        scale_rate: 0.0,
        noise_amp: 0.0,
        noise_seed: 1,
    }];
    if n_objects > 1 {
        objects.push(ObjectSpec {
            shape: ShapeKind::Rect,
            color: [0.2, 0.45, 0.85],
            center: (size as f64 * 0.7, size as f64 * 0.7),
            velocity: (-0.4, -0.5),
            angle: 0.4,
            ..objects[0].clone()
        });
    }
    let spec = SceneSpec {
        id: id.into(),
        height: size,
        width: size,
        frames,
        objects,
        background: Background {
            kind: BackgroundKind::Gradient,
            base: [0.2, 0.25, 0.3],
            accent: [0.5, 0.45, 0.4],
            period: 7.0,
        },
        confusion: false,
        seed: 11,
    };
    let clip = generate(&spec);
    clip.validate().unwrap();
    clip
}

#[test]
fn c3_full_model_gradients() {
    criterion(3, "full-model gradient check", || {
        let begin = Instant::now();
        let cfg = ModelConfig {
            widths: [4, 6, 8, 16],
            blocks: [1, 0, 0, 1],
            d_model: 16,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 32,
            dropout: 0.0,
            head_channels: 8,
            ..ModelConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &cfg);

        let clip = toy_clip("fd", 16, 2, 3);
        let mut scene_rng = ChaCha8Rng::seed_from_u64(42);
        // One reference plus the query frame.
        let scene = sample_video_scene(&mut scene_rng, &clip, 2, &no_aug());

        let loss_of = |t: &mut Tape, store: &ParamStore| {
            let mut mode = RunMode::Train {
                rng: &mut ChaCha8Rng::seed_from_u64(0),
                dropout: 0.0,
                bn_stats: true,
            };
            let (root, _) =
                scene_loss(t, &model, store, &scene, &mut mode, ClsBackground::Append).unwrap();
            root
        };
        let mut t = Tape::new();
        let root = loss_of(&mut t, &store);
        t.backward(root);
        let analytic = t.param_grads();

        let mut pick = ChaCha8Rng::seed_from_u64(43);
        let coords = sample_coords(&store, &mut pick, GRAD_SAMPLES);
        let checks = check_param_grads(&mut store, &coords, 1e-4, &analytic, |s| {
            let mut t = Tape::with_grad(false);
            let root = loss_of(&mut t, s);
            t.scalar(root)
        });
        let mut worst = 0.0f64;
        for c in &checks {
            assert!(
                c.rel_err < GRAD_REL_TOL,
                "{} [{}]: analytic {} vs fd {} (rel {})",
                c.param,
                c.index,
                c.analytic,
                c.fd,
                c.rel_err
            );
            worst = worst.max(c.rel_err);
        }
        let secs = begin.elapsed().as_secs_f64();
        assert!(secs < 600.0, "took {secs}s, budget is ten minutes");
        format!(
            "{} sampled coordinates, worst relative error {worst:.2e} (tolerance {GRAD_REL_TOL:.0e}), {secs:.1}s",
            checks.len()
        )
    });
}

// ---------------------------------------------------------------------------
// Criterion 4: aggregation and loss oracles.

#[test]
fn c4_aggregation_and_loss_oracles() {
    criterion(4, "aggregation and loss oracles", || {
        // Two objects, equal confidence: equal shares.
        let p = |v: f64| Array2::from_elem((1, 1), v);
        let m = soft_aggregate(&[p(0.8), p(0.8)], BackgroundRule::Rescale);
        assert!((m.object_probs[(0, 0, 0)] - 0.5).abs() <= ORACLE_TOL);
        assert!((m.object_probs[(1, 0, 0)] - 0.5).abs() <= ORACLE_TOL);

        // Unequal confidence: odds 9 vs 1/9 normalize to 81/82 and 1/82.
        let m = soft_aggregate(&[p(0.9), p(0.1)], BackgroundRule::Rescale);
        assert!((m.object_probs[(0, 0, 0)] - 81.0 / 82.0).abs() <= ORACLE_TOL);
        assert!((m.object_probs[(1, 0, 0)] - 1.0 / 82.0).abs() <= ORACLE_TOL);

        // The full class distribution is a distribution under both rules.
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a = Array2::from_shape_fn((5, 7), |_| rng.gen_range(0.0..1.0));
        let b = Array2::from_shape_fn((5, 7), |_| rng.gen_range(0.0..1.0));
        let c = Array2::from_shape_fn((5, 7), |_| rng.gen_range(0.0..1.0));
        for rule in [BackgroundRule::Rescale, BackgroundRule::PseudoObject] {
            let m = soft_aggregate(&[a.clone(), b.clone(), c.clone()], rule);
            for y in 0..5 {
                for x in 0..7 {
                    let s: f64 = (0..4).map(|k| m.class_distribution[(k, y, x)]).sum();
                    assert!((s - 1.0).abs() <= ORACLE_TOL, "sum {s} under {rule:?}");
                    let so: f64 = (0..3).map(|k| m.object_probs[(k, y, x)]).sum();
                    assert!((so - 1.0).abs() <= ORACLE_TOL);
                }
            }
        }

        // Mask-overlap loss: intersection 1, union 3 -> 1 - 1/3.
        let pred = ndarray::array![[1.0, 1.0], [0.0, 0.0]];
        let gt = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        assert!((iou_loss_value(&pred, &gt) - 2.0 / 3.0).abs() <= ORACLE_TOL);

        // Equal logits over {object, background}: cross entropy ln 2. The
        // mirrored background score of a zero object score is itself zero.
        let mut t = Tape::new();
        let s = t.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 1])));
        let labels = Array2::<u8>::ones((1, 1));
        let losses = cls_losses(&mut t, &[s], &labels, &[1], ClsBackground::Append);
        let got = t.scalar(losses[0]);
        assert!((got - 0.5f64.ln().abs()).abs() <= ORACLE_TOL, "got {got}");

        format!("share, distribution, overlap-loss and cross-entropy oracles all within {ORACLE_TOL:.0e}")
    });
}

// ---------------------------------------------------------------------------
// Criterion 5: metric oracles.

#[test]
fn c5_metric_oracles() {
    criterion(5, "metric oracles", || {
        let begin = Instant::now();
        // Region similarity equals set arithmetic on every 3x3 mask pair.
        let to_mask = |bits: u32| Array2::from_shape_fn((3, 3), |(y, x)| bits >> (y * 3 + x) & 1 == 1);
        for pb in 0..512u32 {
            let pm = to_mask(pb);
            for gb in 0..512u32 {
                let gm = to_mask(gb);
                let inter = (pb & gb).count_ones() as f64;
                let union = (pb | gb).count_ones() as f64;
                let want = if union == 0.0 { 1.0 } else { inter / union };
                assert_eq!(jaccard(&pm, &gm), want, "pred {pb:o} gt {gb:o}");
            }
        }

        // Contour score on two 4x4 squares shifted by one pixel, against a
        // pairwise-distance oracle.
        let square = |oy: usize, ox: usize| {
            Array2::from_shape_fn((8, 8), |(y, x)| {
                y >= oy && y < oy + 4 && x >= ox && x < ox + 4
            })
        };
        let pred = square(2, 2);
        let gt = square(2, 3);
        let oracle = |a: &Array2<bool>, b: &Array2<bool>, tol: f64| -> f64 {
            let pts = |m: &Array2<bool>| {
                let bm = boundary(m);
                let mut v = Vec::new();
                for y in 0..8 {
                    for x in 0..8 {
                        if bm[(y, x)] {
                            v.push((y as f64, x as f64));
                        }
                    }
                }
                v
            };
            let (pa, pb) = (pts(a), pts(b));
            let hits = |from: &[(f64, f64)], to: &[(f64, f64)]| {
                from.iter()
                    .filter(|(y, x)| {
                        to.iter()
                            .any(|(v, u)| (y - v).powi(2) + (x - u).powi(2) <= tol * tol)
                    })
                    .count() as f64
            };
            let precision = hits(&pa, &pb) / pa.len() as f64;
            let recall = hits(&pb, &pa) / pb.len() as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        };
        for tol in [0.0, 1.0, 2.0] {
            let got = boundary_f(&pred, &gt, tol);
            let want = oracle(&pred, &gt, tol);
            assert_eq!(got, want, "tolerance {tol}");
        }
        // Hand-derived anchors for the shifted pair.
        assert_eq!(boundary_f(&pred, &gt, 0.0), 0.5);
        assert_eq!(boundary_f(&pred, &gt, 1.0), 1.0);

        let secs = begin.elapsed().as_secs_f64();
        assert!(secs < 60.0, "took {secs}s, budget is one minute");
        format!("jaccard exhaustive on 3x3, contour score matches pairwise oracle, {secs:.2}s")
    });
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7: real training runs. Shared helpers.

fn train_and_score(
    cfg: &RunConfig,
    data: &Dataset,
    policy: ReferencePolicy,
) -> (f64, f64) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = VosModel::register(&mut store, &mut rng, &cfg.model);
    let mut trainer = Trainer::new(&model, cfg.train.clone());
    trainer
        .run(&mut store, data, None, None)
        .expect("training must not diverge");
    score(&model, &store, &data.val, policy, &cfg.eval)
}

/// Mean (J&F, fps) of a model over clips under one reference policy.
fn score(
    model: &VosModel,
    store: &ParamStore,
    clips: &[vos_core::Clip],
    policy: ReferencePolicy,
    eval_cfg: &EvalConfig,
) -> (f64, f64) {
    let mut jf = 0.0;
    let (mut frames, mut secs) = (0usize, 0.0f64);
    for clip in clips {
        let run = run_video(model, store, clip, policy).expect("inference must run");
        let rep = evaluate_sequence(&run.labels, &clip.labels, clip.n_objects, eval_cfg)
            .expect("scoring must run");
        jf += rep.jf;
        frames += run.seconds.len();
        secs += run.seconds.iter().sum::<f64>();
    }
    (jf / clips.len() as f64, frames as f64 / secs)
}

#[test]
fn c6_end_to_end_learning() {
    criterion(6, "end-to-end learning", || {
        let begin = Instant::now();
        let mut cfg = RunConfig::default();
        // The pinned benchmark: 32 train / 8 val clips, 64x64, 8 frames,
        // up to 2 objects (the SynthConfig defaults, asserted here).
        assert_eq!(cfg.synth.train_clips, 32);
        assert_eq!(cfg.synth.val_clips, 8);
        assert_eq!(cfg.synth.size, 64);
        assert_eq!(cfg.synth.frames, 8);
        assert_eq!(cfg.synth.max_objects, 2);
        // The pinned desk model: d=64, 2 encoder layers, 4 heads.
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.encoder_layers, 2);
        assert_eq!(cfg.model.n_heads, 4);

        cfg.train.lr = 3e-4;
        cfg.train.pretrain_steps = 600;
        cfg.train.main_steps = 2400;
        let bench = make_benchmark(&cfg.synth);
        let (jf, _) = train_and_score(&cfg, &bench.data, ReferencePolicy::FirstAndPrevious);
        let secs = begin.elapsed().as_secs_f64();
        assert!(
            jf >= LEARNING_FLOOR_JF,
            "val J&F {jf:.4} is below the {LEARNING_FLOOR_JF} floor ({secs:.0}s)"
        );
        format!("val J&F {jf:.4} >= {LEARNING_FLOOR_JF} with first+prev references, {secs:.0}s")
    });
}

/// Reduced profile for the ablation sweep: same generator and training
/// pipeline, smaller canvas and model so twelve runs stay affordable.
fn ablation_profile() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig {
        seed: 7,
        train_clips: 12,
        val_clips: 4,
        frames: 6,
        size: 48,
        min_objects: 1,
        max_objects: 2,
        confusion_prob: 0.25,
    };
    cfg.model.widths = [8, 16, 32, 64];
    cfg.model.d_model = 32;
    cfg.model.n_heads = 2;
    cfg.model.ff_dim = 128;
    cfg.model.head_channels = 8;
    cfg.train.lr = 3e-4;
    cfg.train.pretrain_steps = 150;
    cfg.train.main_steps = 450;
    cfg
}

fn sweep_mean(
    base: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
    apply: impl Fn(&mut RunConfig),
) -> f64 {
    let mut sum = 0.0;
    for &seed in seeds {
        let mut cfg = base.clone();
        apply(&mut cfg);
        cfg.train.seed = seed;
        sum += train_and_score(&cfg, data, ReferencePolicy::FirstAndPrevious).0;
    }
    sum / seeds.len() as f64
}

#[test]
fn c7_ablation_directions() {
    criterion(7, "ablation directions", || {
        let begin = Instant::now();
        let base = ablation_profile();
        let bench = make_benchmark(&base.synth);
        let seeds: Vec<u64> = (0..ABLATION_SEEDS).map(|s| base.train.seed + s).collect();

        // (a) mask utilization, plus cached two-path models for (b) and (c).
        let mut two_path_models = Vec::new();
        let mut two_path_sum = 0.0;
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = VosModel::register(&mut store, &mut rng, &cfg.model);
            let mut trainer = Trainer::new(&model, cfg.train.clone());
            trainer.run(&mut store, &bench.data, None, None).unwrap();
            let (jf, _) = score(
                &model,
                &store,
                &bench.data.val,
                ReferencePolicy::FirstAndPrevious,
                &cfg.eval,
            );
            two_path_models.push((model, store));
            two_path_sum += jf;
        }
        let two_path = two_path_sum / seeds.len() as f64;
        let residual = sweep_mean(&base, &bench.data, &seeds, |c| {
            c.model.mask_fusion = MaskFusion::Residual;
        });
        let multiply = sweep_mean(&base, &bench.data, &seeds, |c| {
            c.model.mask_fusion = MaskFusion::Multiply;
        });
        assert!(
            two_path >= residual && residual >= multiply,
            "mask-utilization ordering violated: two_path {two_path:.4}, residual {residual:.4}, multiply {multiply:.4}"
        );

        // (b) decoder on/off.
        let without_decoder = sweep_mean(&base, &bench.data, &seeds, |c| {
            c.model.use_decoder = false;
        });
        assert!(
            two_path >= without_decoder,
            "decoder ordering violated: with {two_path:.4}, without {without_decoder:.4}"
        );

        // (c) reference policies on the trained base models.
        let policy_mean = |p: ReferencePolicy| -> f64 {
            two_path_models
                .iter()
                .map(|(m, s)| score(m, s, &bench.data.val, p, &base.eval).0)
                .sum::<f64>()
                / two_path_models.len() as f64
        };
        let first_prev = policy_mean(ReferencePolicy::FirstAndPrevious);
        let first_only = policy_mean(ReferencePolicy::FirstOnly);
        let prev_only = policy_mean(ReferencePolicy::PreviousOnly);
        assert!(
            first_prev >= first_only && first_prev >= prev_only,
            "reference ordering violated: first+prev {first_prev:.4}, first {first_only:.4}, prev {prev_only:.4}"
        );

        let secs = begin.elapsed().as_secs_f64();
        format!(
            "two_path {two_path:.4} >= residual {residual:.4} >= multiply {multiply:.4}; \
             with-decoder {two_path:.4} >= without {without_decoder:.4}; \
             first+prev {first_prev:.4} >= first {first_only:.4} and prev {prev_only:.4} \
             (3 seeds, {secs:.0}s)"
        )
    });
}

// ---------------------------------------------------------------------------
// Criterion 8: parameter accounting.

#[test]
fn c8_parameter_counts() {
    criterion(8, "parameter counts", || {
        let tiny = ModelConfig {
            widths: [4, 8, 12, 16],
            blocks: [1, 0, 0, 1],
            d_model: 8,
            n_heads: 2,
            ff_dim: 16,
            head_channels: 4,
            ..ModelConfig::desk()
        };
        let configs = [
            ("tiny", tiny),
            ("desk", ModelConfig::desk()),
            ("full_scale", ModelConfig::full_scale()),
        ];
        for (name, cfg) in &configs {
            let shared = count_parameters(cfg, EncoderVariant::TwoPath);
            let indep = count_parameters(cfg, EncoderVariant::IndependentEncoders);
            assert!(
                shared.total < indep.total,
                "{name}: two-path {} is not smaller than independent {}",
                shared.total,
                indep.total
            );
        }
        let cfg = ModelConfig::full_scale();
        let shared = count_parameters(&cfg, EncoderVariant::TwoPath);
        let indep = count_parameters(&cfg, EncoderVariant::IndependentEncoders);
        let reduction = 1.0 - shared.total as f64 / indep.total as f64;
        let (lo, hi) = FULL_SCALE_REDUCTION;
        assert!(
            reduction >= lo && reduction <= hi,
            "full-scale reduction {reduction:.4} outside [{lo}, {hi}] \
             (two-path {}, independent {})",
            shared.total,
            indep.total
        );
        format!(
            "two-path smaller everywhere; full-scale reduction {:.1}% (two-path {:.2}M vs independent {:.2}M)",
            reduction * 100.0,
            shared.total as f64 / 1e6,
            indep.total as f64 / 1e6
        )
    });
}

// ---------------------------------------------------------------------------
// Criterion 9: cost scaling and throughput ordering.

#[test]
fn c9_performance_scaling() {
    criterion(9, "performance scaling", || {
        let begin = Instant::now();
        let cfg = ModelConfig::desk();

        // The attention FLOP model is exactly quadratic in L.
        for l in [64usize, 256, 1024] {
            let r = encoder_attention_flops(&cfg, 2 * l) / encoder_attention_flops(&cfg, l);
            assert_eq!(r, 4.0, "FLOP model must quadruple at l={l}");
        }

        // Measured encoder time for L -> 2L stays within a factor of two of
        // the 4x prediction.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut store = ParamStore::new();
        let enc = EncoderParams::register(&mut store, &mut rng, &cfg);
        let time_at = |l: usize, rng: &mut ChaCha8Rng, store: &ParamStore| -> f64 {
            let x = Array2::from_shape_fn((l, cfg.d_model), |_| rng.gen_range(-1.0..1.0));
            let mut times: Vec<f64> = (0..5)
                .map(|_| {
                    let mut t = Tape::with_grad(false);
                    let v = t.constant(x.clone().into_dyn());
                    let begin = Instant::now();
                    enc.forward(&mut t, &store, v, &mut RunMode::Eval);
                    begin.elapsed().as_secs_f64()
                })
                .collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times[2]
        };
        let t1 = time_at(512, &mut rng, &store);
        let t2 = time_at(1024, &mut rng, &store);
        let measured = t2 / t1;
        assert!(
            measured >= 4.0 / SCALING_TIME_FACTOR && measured <= 4.0 * SCALING_TIME_FACTOR,
            "L doubled: measured x{measured:.2}, predicted x4 (allowed factor {SCALING_TIME_FACTOR})"
        );

        // Throughput ordering across reference policies follows token count.
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &cfg);
        let clip = toy_clip("fps", 64, 2, 12);
        let fps_of = |p: ReferencePolicy| -> f64 {
            let run = run_video(&model, &store, &clip, p).unwrap();
            run.seconds.len() as f64 / run.seconds.iter().sum::<f64>()
        };
        let f_first = fps_of(ReferencePolicy::FirstOnly);
        let f_both = fps_of(ReferencePolicy::FirstAndPrevious);
        let f_every = fps_of(ReferencePolicy::EveryK(5));
        assert!(
            f_first > f_both && f_both > f_every,
            "fps ordering violated: first {f_first:.2}, first+prev {f_both:.2}, every:5 {f_every:.2}"
        );

        let secs = begin.elapsed().as_secs_f64();
        format!(
            "FLOP model exactly x4; measured x{measured:.2} on L 512->1024; \
             fps first {f_first:.1} > first+prev {f_both:.1} > every:5 {f_every:.1} ({secs:.0}s)"
        )
    });
}
