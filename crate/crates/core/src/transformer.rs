//! Space-time transformer: sinusoidal positions over the flattened token
//! index, multi-head self-attention encoder layers, and a decoder driven by
//! a single learned target query.
//!
//! With exactly one query token, decoder self-attention collapses: the
//! softmax over a single position is 1, so the sublayer reduces to the value
//! and output projections applied in sequence. The decoder uses that closed
//! form; the generic path exists for verification.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_xavier, ParamId, ParamStore, Tape, VarId};
use crate::config::ModelConfig;

/// Forward-pass mode: training threads an RNG for dropout and says whether
/// batch-norm layers may use (and stage updates to) batch statistics; eval
/// disables all stochastic pieces. `bn_stats: false` trains with frozen
/// normalization buffers.
pub enum RunMode<'a> {
    Train { rng: &'a mut ChaCha8Rng, dropout: f64, bn_stats: bool },
    Eval,
}

impl RunMode<'_> {
    pub fn training(&self) -> bool {
        matches!(self, RunMode::Train { .. })
    }

    pub fn bn_live(&self) -> bool {
        matches!(self, RunMode::Train { bn_stats: true, .. })
    }

    pub fn dropout(&mut self, t: &mut Tape, x: VarId) -> VarId {
        match self {
            RunMode::Train { rng, dropout, .. } if *dropout > 0.0 => t.dropout(x, *dropout, rng),
            _ => x,
        }
    }
}

/// Sinusoidal positional encoding over a flat index: even feature columns
/// carry sin(pos / 10000^(2i/d)), odd columns the matching cos.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[(pos, 2 * i)] = (pos as f64 * freq).sin();
            pe[(pos, 2 * i + 1)] = (pos as f64 * freq).cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[(pos, d - 1)] = (pos as f64 * freq).sin();
        }
    }
    pe
}

pub struct LnParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LnParams {
    pub fn register(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LnParams {
            gamma: store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[d])), true),
            beta: store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[d])), true),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let gamma = t.param(store, self.gamma);
        let beta = t.param(store, self.beta);
        t.layer_norm(x, gamma, beta, 1e-5)
    }
}

pub struct LinearParams {
    w: ParamId,
    b: ParamId,
}

impl LinearParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) -> Self {
        LinearParams {
            w: store.add(&format!("{name}.w"), init_xavier(rng, &[i, o], i, o), true),
            b: store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[o])), true),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w);
        t.add(y, b)
    }
}

/// Projection matrices of one attention sublayer; no biases.
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Self {
        assert_eq!(d % n_heads, 0, "heads must divide the model dim");
        let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, suffix: &str| {
            store.add(&format!("{name}.{suffix}"), init_xavier(rng, &[d, d], d, d), true)
        };
        AttentionParams {
            wq: mk(store, rng, "wq"),
            wk: mk(store, rng, "wk"),
            wv: mk(store, rng, "wv"),
            wo: mk(store, rng, "wo"),
            n_heads,
        }
    }

    /// Multi-head scaled dot-product attention. Queries come from `q_in`
    /// (Lq, d); keys and values from `kv_in` (Lk, d). Scores are scaled by
    /// 1/sqrt(d/heads) and softmaxed over the key axis.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        q_in: VarId,
        kv_in: VarId,
        mode: &mut RunMode,
    ) -> VarId {
        let d = store.value(self.wq).shape()[0];
        let dm = d / self.n_heads;
        let wq = t.param(store, self.wq);
        let wk = t.param(store, self.wk);
        let wv = t.param(store, self.wv);
        let wo = t.param(store, self.wo);
        let q = t.matmul(q_in, wq);
        let k = t.matmul(kv_in, wk);
        let v = t.matmul(kv_in, wv);
        let scale = 1.0 / (dm as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for m in 0..self.n_heads {
            let (lo, hi) = (m * dm, (m + 1) * dm);
            let qm = t.slice_axis_range(q, 1, lo, hi);
            let km = t.slice_axis_range(k, 1, lo, hi);
            let vm = t.slice_axis_range(v, 1, lo, hi);
            let kt = t.transpose2(km);
            let scores = t.matmul(qm, kt);
            let scaled = t.mul_scalar(scores, scale);
            let attn = t.softmax_rows(scaled);
            let attn = mode.dropout(t, attn);
            heads.push(t.matmul(attn, vm));
        }
        let cat = t.concat(1, &heads);
        t.matmul(cat, wo)
    }
}

pub struct EncoderLayerParams {
    attn: AttentionParams,
    ln1: LnParams,
    ffn1: LinearParams,
    ffn2: LinearParams,
    ln2: LnParams,
}

impl EncoderLayerParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        EncoderLayerParams {
            attn: AttentionParams::register(store, rng, &format!("{name}.attn"), cfg.d_model, cfg.n_heads),
            ln1: LnParams::register(store, &format!("{name}.ln1"), cfg.d_model),
            ffn1: LinearParams::register(store, rng, &format!("{name}.ffn1"), cfg.d_model, cfg.ff_dim),
            ffn2: LinearParams::register(store, rng, &format!("{name}.ffn2"), cfg.ff_dim, cfg.d_model),
            ln2: LnParams::register(store, &format!("{name}.ln2"), cfg.d_model),
        }
    }

    /// Post-norm residual layer: LN(x + Drop(Attn(x))), then the same around
    /// the feed-forward block.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId, mode: &mut RunMode) -> VarId {
        let a = self.attn.forward(t, store, x, x, mode);
        let a = mode.dropout(t, a);
        let s = t.add(x, a);
        let x1 = self.ln1.forward(t, store, s);
        let f = self.ffn1.forward(t, store, x1);
        let f = t.relu(f);
        let f = mode.dropout(t, f);
        let f = self.ffn2.forward(t, store, f);
        let f = mode.dropout(t, f);
        let s2 = t.add(x1, f);
        self.ln2.forward(t, store, s2)
    }
}

pub struct EncoderParams {
    layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        EncoderParams {
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayerParams::register(store, rng, &format!("transformer.enc{i}"), cfg))
                .collect(),
        }
    }

    /// Add the positional encoding to the token matrix once, then run every
    /// encoder layer.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, tokens: VarId, mode: &mut RunMode) -> VarId {
        let shape = t.value(tokens).shape().to_vec();
        let pe = positional_encoding(shape[0], shape[1]);
        let pe_v = t.constant(pe.into_dyn());
        let mut x = t.add(tokens, pe_v);
        for layer in &self.layers {
            x = layer.forward(t, store, x, mode);
        }
        x
    }
}

/// Self-attention of the single target query. Only the value and output
/// projections carry parameters.
pub struct SingleQuerySelfAttention {
    pub wv: ParamId,
    pub wo: ParamId,
}

impl SingleQuerySelfAttention {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        SingleQuerySelfAttention {
            wv: store.add(&format!("{name}.wv"), init_xavier(rng, &[d, d], d, d), true),
            wo: store.add(&format!("{name}.wo"), init_xavier(rng, &[d, d], d, d), true),
        }
    }

    /// Closed form: with one token the attention weight is exactly 1, so the
    /// sublayer is x Wv Wo.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let wv = t.param(store, self.wv);
        let wo = t.param(store, self.wo);
        let v = t.matmul(x, wv);
        t.matmul(v, wo)
    }

    /// Generic multi-head path over the same parameters, kept for
    /// equivalence checks against the closed form.
    pub fn forward_generic(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        x: VarId,
        n_heads: usize,
    ) -> VarId {
        let d = store.value(self.wv).shape()[0];
        let dm = d / n_heads;
        let wv = t.param(store, self.wv);
        let wo = t.param(store, self.wo);
        let v = t.matmul(x, wv);
        let scale = 1.0 / (dm as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for m in 0..n_heads {
            let (lo, hi) = (m * dm, (m + 1) * dm);
            let xm = t.slice_axis_range(x, 1, lo, hi);
            let vm = t.slice_axis_range(v, 1, lo, hi);
            let xt = t.transpose2(xm);
            let scores = t.matmul(xm, xt);
            let scaled = t.mul_scalar(scores, scale);
            let attn = t.softmax_rows(scaled);
            heads.push(t.matmul(attn, vm));
        }
        let cat = t.concat(1, &heads);
        t.matmul(cat, wo)
    }
}

pub struct DecoderLayerParams {
    self_attn: SingleQuerySelfAttention,
    ln1: LnParams,
    cross: AttentionParams,
    ln2: LnParams,
    ffn1: LinearParams,
    ffn2: LinearParams,
    ln3: LnParams,
}

impl DecoderLayerParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        DecoderLayerParams {
            self_attn: SingleQuerySelfAttention::register(store, rng, &format!("{name}.self"), cfg.d_model),
            ln1: LnParams::register(store, &format!("{name}.ln1"), cfg.d_model),
            cross: AttentionParams::register(store, rng, &format!("{name}.cross"), cfg.d_model, cfg.n_heads),
            ln2: LnParams::register(store, &format!("{name}.ln2"), cfg.d_model),
            ffn1: LinearParams::register(store, rng, &format!("{name}.ffn1"), cfg.d_model, cfg.ff_dim),
            ffn2: LinearParams::register(store, rng, &format!("{name}.ffn2"), cfg.ff_dim, cfg.d_model),
            ln3: LnParams::register(store, &format!("{name}.ln3"), cfg.d_model),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        q: VarId,
        enc: VarId,
        mode: &mut RunMode,
    ) -> VarId {
        let sa = self.self_attn.forward(t, store, q);
        let sa = mode.dropout(t, sa);
        let s = t.add(q, sa);
        let q1 = self.ln1.forward(t, store, s);
        let ca = self.cross.forward(t, store, q1, enc, mode);
        let ca = mode.dropout(t, ca);
        let s2 = t.add(q1, ca);
        let q2 = self.ln2.forward(t, store, s2);
        let f = self.ffn1.forward(t, store, q2);
        let f = t.relu(f);
        let f = mode.dropout(t, f);
        let f = self.ffn2.forward(t, store, f);
        let f = mode.dropout(t, f);
        let s3 = t.add(q2, f);
        self.ln3.forward(t, store, s3)
    }
}

pub struct DecoderParams {
    pub target_query: ParamId,
    layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        DecoderParams {
            target_query: store.add(
                "transformer.target_query",
                init_xavier(rng, &[1, cfg.d_model], cfg.d_model, cfg.d_model),
                true,
            ),
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayerParams::register(store, rng, &format!("transformer.dec{i}"), cfg))
                .collect(),
        }
    }

    /// Run the learned target query through every decoder layer against the
    /// encoded tokens. No positional term is added to the query.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, enc: VarId, mode: &mut RunMode) -> VarId {
        let mut q = t.param(store, self.target_query);
        for layer in &self.layers {
            q = layer.forward(t, store, q, enc, mode);
        }
        q
    }
}

// ---------------------------------------------------------------------------
// Cost accounting. Multiply-accumulate counts as two floating-point ops.

/// The quadratic attention term of one encoder pass over `l` tokens: score
/// matrix plus value mixing, across all layers. Doubling `l` exactly
/// quadruples this number.
pub fn encoder_attention_flops(cfg: &ModelConfig, l: usize) -> f64 {
    let l = l as f64;
    cfg.encoder_layers as f64 * 4.0 * l * l * cfg.d_model as f64
}

/// Full per-pass encoder estimate: q/k/v/out projections and the two
/// feed-forward matmuls on top of the attention term. Softmax, layer norms
/// and bias adds are omitted; they are lower order.
pub fn encoder_flops(cfg: &ModelConfig, l: usize) -> f64 {
    let d = cfg.d_model as f64;
    let lf = l as f64;
    let linear = 8.0 * lf * d * d + 4.0 * lf * d * cfg.ff_dim as f64;
    cfg.encoder_layers as f64 * linear + encoder_attention_flops(cfg, l)
}
