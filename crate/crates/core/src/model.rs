//! Full pipeline assembly: extractor, space-time transformer, target
//! attention, and mask head wired together for one object per sample.
//! Multi-object scenes run one sample per object over a shared query frame
//! and are fused afterwards by the aggregation step.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, VarId};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::features::{ClipSample, ExtractorParams, TokenLayout};
use crate::segmentation::{score_full_res, MaskHeadParams, TargetAttentionParams};
use crate::transformer::{DecoderParams, EncoderParams, RunMode};

/// Everything the pipeline produces for one sample. Score and probability
/// live at the original (uncropped) frame resolution.
pub struct SampleOutput {
    /// (h, w) foreground minus background logit.
    pub score: VarId,
    /// (h, w) foreground probability, the sigmoid of `score`.
    pub prob: VarId,
    /// Raw two-channel head output at a quarter of the padded resolution.
    pub logits: VarId,
    pub layout: TokenLayout,
}

pub struct VosModel {
    pub cfg: ModelConfig,
    extractor: ExtractorParams,
    encoder: EncoderParams,
    decoder: Option<DecoderParams>,
    tab: TargetAttentionParams,
    head: MaskHeadParams,
}

impl VosModel {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        cfg.validate().expect("invalid model configuration");
        VosModel {
            cfg: cfg.clone(),
            extractor: ExtractorParams::register(store, rng, cfg),
            encoder: EncoderParams::register(store, rng, cfg),
            decoder: cfg.use_decoder.then(|| DecoderParams::register(store, rng, cfg)),
            tab: TargetAttentionParams::register(store, rng, "tab", cfg),
            head: MaskHeadParams::register(store, rng, "head", cfg),
        }
    }

    /// Run a batch of independent samples. Each sample's reference frames
    /// select one object; the output scores that object against everything
    /// else in its query frame.
    pub fn forward_batch(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        samples: &[ClipSample],
        mode: &mut RunMode,
    ) -> Result<Vec<SampleOutput>> {
        let feats = self
            .extractor
            .forward_batch(t, store, samples, mode.bn_live())?;
        let mut out = Vec::with_capacity(feats.len());
        for f in feats {
            let enc = self.encoder.forward(t, store, f.tokens, mode);
            let (qs, qe) = f.layout.query_range();
            let query = t.slice_axis_range(enc, 0, qs, qe);
            let target = match &self.decoder {
                Some(dec) => dec.forward(t, store, enc, mode),
                None => {
                    let pooled = t.mean_axis(query, 0);
                    t.reshape(pooled, &[1, self.cfg.d_model])
                }
            };
            let maps = self
                .tab
                .forward(t, store, target, query, f.layout.h, f.layout.w);
            let qt = t.transpose2(query);
            let query_feat = t.reshape(qt, &[1, self.cfg.d_model, f.layout.h, f.layout.w]);
            let logits = self
                .head
                .forward(t, store, query_feat, maps, f.skip_s8, f.skip_s4);
            let score = score_full_res(t, logits, f.padded_hw, f.orig_hw);
            let prob = t.sigmoid(score);
            out.push(SampleOutput { score, prob, logits, layout: f.layout });
        }
        Ok(out)
    }

    /// Single-sample convenience wrapper used by inference.
    pub fn forward_single(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        sample: &ClipSample,
        mode: &mut RunMode,
    ) -> Result<SampleOutput> {
        Ok(self
            .forward_batch(t, store, std::slice::from_ref(sample), mode)?
            .pop()
            .expect("one sample in, one output out"))
    }

    /// Full-resolution foreground probability as a plain array.
    pub fn prob_array(t: &Tape, out: &SampleOutput) -> Array2<f64> {
        t.value(out.prob)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("probability map is 2-d")
            .to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_param_grads, sample_coords};
    use crate::config::MaskFusion;
    use crate::features::{count_parameters, EncoderVariant, ReferenceFrame};
    use ndarray::{Array2, Array3};
    use rand::SeedableRng;

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

    fn sample(h: usize, w: usize) -> ClipSample {
        let frame = |phase: f64| {
            Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                0.5 + 0.4 * ((x as f64 * 0.31 + y as f64 * 0.17 + c as f64 + phase).sin())
            })
        };
        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            let d2 = (y as f64 - h as f64 / 2.0).powi(2) + (x as f64 - w as f64 / 2.0).powi(2);
            if d2 < (h as f64 / 4.0).powi(2) {
                1.0
            } else {
                0.0
            }
        });
        ClipSample {
            refs: vec![ReferenceFrame { rgb: frame(0.0), mask }],
            query: frame(1.0),
        }
    }

    #[test]
    fn registered_parameters_match_the_analytic_count() {
        for cfg in [tiny_cfg(), ModelConfig::desk()] {
            for use_decoder in [true, false] {
                let mut c = cfg.clone();
                c.use_decoder = use_decoder;
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let mut store = ParamStore::new();
                VosModel::register(&mut store, &mut rng, &c);
                let counted = count_parameters(&c, EncoderVariant::TwoPath);
                assert_eq!(
                    store.n_trainable(),
                    counted.total,
                    "decoder={use_decoder}: analytic total diverges"
                );
            }
        }
    }

    #[test]
    fn outputs_sit_at_original_resolution_inside_unit_interval() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &cfg);
        let mut t = Tape::with_grad(false);
        let out = model
            .forward_single(&mut t, &store, &sample(60, 50), &mut RunMode::Eval)
            .unwrap();
        let p = VosModel::prob_array(&t, &out);
        assert_eq!(p.dim(), (60, 50));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(t.value(out.logits).shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &cfg);
        let s = sample(48, 32);
        let run = || {
            let mut t = Tape::with_grad(false);
            let out = model
                .forward_single(&mut t, &store, &s, &mut RunMode::Eval)
                .unwrap();
            VosModel::prob_array(&t, &out)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_perturbs_training_forward_only() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &cfg);
        let s = sample(48, 48);

        let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
        let mut run_train = || {
            let mut t = Tape::with_grad(false);
            let mut mode = RunMode::Train { rng: &mut drop_rng, dropout: cfg.dropout, bn_stats: true };
            let out = model.forward_single(&mut t, &store, &s, &mut mode).unwrap();
            VosModel::prob_array(&t, &out)
        };
        assert_ne!(run_train(), run_train(), "dropout masks must differ per pass");

        let run_eval = || {
            let mut t = Tape::with_grad(false);
            let out = model
                .forward_single(&mut t, &store, &s, &mut RunMode::Eval)
                .unwrap();
            VosModel::prob_array(&t, &out)
        };
        assert_eq!(run_eval(), run_eval());
    }

    #[test]
    fn pooled_target_replaces_the_decoder_when_disabled() {
        let mut cfg = tiny_cfg();
        cfg.use_decoder = false;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &cfg);
        assert!(store.id("decoder.target_query").is_none());
        let mut t = Tape::with_grad(false);
        let out = model
            .forward_single(&mut t, &store, &sample(32, 32), &mut RunMode::Eval)
            .unwrap();
        assert_eq!(VosModel::prob_array(&t, &out).dim(), (32, 32));
    }

    #[test]
    fn residual_fusion_variant_runs_end_to_end() {
        let mut cfg = tiny_cfg();
        cfg.mask_fusion = MaskFusion::Residual;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut rng, &cfg);
        let mut t = Tape::with_grad(false);
        let out = model
            .forward_single(&mut t, &store, &sample(32, 48), &mut RunMode::Eval)
            .unwrap();
        assert_eq!(VosModel::prob_array(&t, &out).dim(), (32, 48));
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut reg_rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let model = VosModel::register(&mut store, &mut reg_rng, &cfg);
        let s = sample(16, 16);

        let loss_of = |t: &mut Tape, store: &ParamStore| {
            let out = model
                .forward_single(t, store, &s, &mut RunMode::Train {
                    rng: &mut ChaCha8Rng::seed_from_u64(0),
                    dropout: 0.0,
                    bn_stats: true,
                })
                .unwrap();
            let shape = t.value(out.score).shape().to_vec();
            let w = t.constant(ndarray::ArrayD::from_shape_fn(
                ndarray::IxDyn(&shape),
                |ix| ((ix[0] * 7 + ix[1] * 13) % 11) as f64 / 11.0 - 0.4,
            ));
            let p = t.mul(out.score, w);
            t.sum_all(p)
        };

        let mut t = Tape::new();
        let root = loss_of(&mut t, &store);
        t.backward(root);
        let analytic = t.param_grads();

        let mut pick = ChaCha8Rng::seed_from_u64(9);
        let coords = sample_coords(&store, &mut pick, 14);
        let checks = check_param_grads(&mut store, &coords, 1e-4, &analytic, |store| {
            let mut t = Tape::with_grad(false);
            let root = loss_of(&mut t, store);
            t.scalar(root)
        });
        for c in &checks {
            assert!(
                c.rel_err < 1e-3,
                "param {} coord {}: analytic {} vs fd {} (rel {})",
                c.param,
                c.index,
                c.analytic,
                c.fd,
                c.rel_err
            );
        }
    }
}
