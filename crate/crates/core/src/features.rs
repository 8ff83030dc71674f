//! Feature extraction: mask-aware input stems, a shared residual trunk with
//! total stride 16, a 1x1 bottleneck to the token dimension, and flattening
//! of all frame slices into one spatio-temporal token sequence.
//!
//! Reference frames carry their masks into the network through one of three
//! fusion schemes (see [`MaskFusion`]); the query frame is embedded by a
//! plain convolution. All slices then share the same trunk weights.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_he, ParamId, ParamStore, Tape, VarId};
use crate::config::{MaskFusion, ModelConfig};
use crate::error::{Result, VosError};

/// Total downsampling factor of the trunk; inputs are padded to multiples of
/// this.
pub const STRIDE: usize = 16;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A reference frame: image plus the (possibly soft) mask of the target.
#[derive(Clone, Debug)]
pub struct ReferenceFrame {
    /// (3, H, W), values in [0, 1].
    pub rgb: Array3<f64>,
    /// (H, W), values in [0, 1].
    pub mask: Array2<f64>,
}

/// One model input: T reference frames plus the query frame to segment.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub refs: Vec<ReferenceFrame>,
    pub query: Array3<f64>,
}

/// Row ordering of the flattened token sequence: slice-major, then rows,
/// then columns. References come first in input order; the query slice is
/// last.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_slices: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.n_slices * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, slice: usize, y: usize, x: usize) -> usize {
        debug_assert!(slice < self.n_slices && y < self.h && x < self.w);
        (slice * self.h + y) * self.w + x
    }

    /// Row range of the query slice (always the last slice).
    pub fn query_range(&self) -> (usize, usize) {
        let per = self.h * self.w;
        ((self.n_slices - 1) * per, self.n_slices * per)
    }
}

/// Extractor output for one sample.
#[derive(Debug)]
pub struct SampleFeatures {
    /// ((T+1)*h16*w16, d) token matrix.
    pub tokens: VarId,
    pub layout: TokenLayout,
    /// Query-frame trunk features at 1/4 scale, (1, widths[1], H/4, W/4).
    pub skip_s4: VarId,
    /// Query-frame trunk features at 1/8 scale, (1, widths[2], H/8, W/8).
    pub skip_s8: VarId,
    pub padded_hw: (usize, usize),
    pub orig_hw: (usize, usize),
}

/// Reflect-pad (mirror without repeating the edge) on the bottom and right
/// so each spatial dim becomes the next multiple of `m`.
pub fn pad_reflect_to_multiple(img: &Array3<f64>, m: usize) -> Result<Array3<f64>> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (ph, pw) = (pad_amount(h, m)?, pad_amount(w, m)?);
    if ph == 0 && pw == 0 {
        return Ok(img.clone());
    }
    let mut out = Array3::<f64>::zeros((c, h + ph, w + pw));
    for ci in 0..c {
        for y in 0..h + ph {
            let sy = mirror(y, h);
            for x in 0..w + pw {
                out[(ci, y, x)] = img[(ci, sy, mirror(x, w))];
            }
        }
    }
    Ok(out)
}

/// Zero-pad a mask on the bottom and right to the next multiple of `m`.
pub fn pad_zero_to_multiple(mask: &Array2<f64>, m: usize) -> Result<Array2<f64>> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (ph, pw) = (pad_amount(h, m)?, pad_amount(w, m)?);
    if ph == 0 && pw == 0 {
        return Ok(mask.clone());
    }
    let mut out = Array2::<f64>::zeros((h + ph, w + pw));
    out.slice_mut(ndarray::s![..h, ..w]).assign(mask);
    Ok(out)
}

fn pad_amount(dim: usize, m: usize) -> Result<usize> {
    let pad = (m - dim % m) % m;
    // Mirroring without edge repetition reads index dim-2-i, so the pad may
    // not exceed dim-1.
    if pad > dim.saturating_sub(1) {
        return Err(VosError::InputTooSmall {
            dim: "spatial side",
            got: dim,
            min: min_input_side(m),
        });
    }
    Ok(pad)
}

/// Smallest side length the padding policy accepts.
pub fn min_input_side(m: usize) -> usize {
    // Need (m - s % m) % m <= s - 1; the first s where this holds for all
    // residues is ceil((m+1)/2).
    m / 2 + 1
}

fn mirror(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        n - 2 - (i - n)
    }
}

pub struct ConvParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            init_he(rng, &[out_ch, in_ch, k, k], in_ch * k * k),
            true,
        );
        let b = bias.then(|| store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])), true));
        ConvParams { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let w = t.param(store, self.w);
        let b = self.b.map(|b| t.param(store, b));
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnParams {
    pub fn register(store: &mut ParamStore, name: &str, c: usize) -> Self {
        BnParams {
            gamma: store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])), true),
            beta: store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), true),
            running_mean: store.add(
                &format!("{name}.running_mean"),
                ArrayD::zeros(IxDyn(&[c])),
                false,
            ),
            running_var: store.add(
                &format!("{name}.running_var"),
                ArrayD::ones(IxDyn(&[c])),
                false,
            ),
        }
    }

    /// Training mode normalizes with batch statistics and stages the raw
    /// batch statistics on the tape; the trainer blends them into the running
    /// buffers after the optimizer step. Eval mode uses the stored running
    /// statistics.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId, training: bool) -> VarId {
        let gamma = t.param(store, self.gamma);
        let beta = t.param(store, self.beta);
        if training {
            let (y, mean, var_unbiased) = t.batch_norm_train(x, gamma, beta, BN_EPS);
            t.stage_stat_update(self.running_mean, mean.into_dyn());
            t.stage_stat_update(self.running_var, var_unbiased.into_dyn());
            y
        } else {
            let rm = to1(store.value(self.running_mean));
            let rv = to1(store.value(self.running_var));
            t.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

fn to1(x: &ArrayD<f64>) -> Array1<f64> {
    x.clone().into_dimensionality::<ndarray::Ix1>().unwrap()
}

/// Basic residual block: two 3x3 conv+norm pairs with identity shortcut.
pub struct BlockParams {
    conv1: ConvParams,
    bn1: BnParams,
    conv2: ConvParams,
    bn2: BnParams,
}

impl BlockParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, w: usize) -> Self {
        BlockParams {
            conv1: ConvParams::register(store, rng, &format!("{name}.conv1"), w, w, 3, 1, 1, false),
            bn1: BnParams::register(store, &format!("{name}.bn1"), w),
            conv2: ConvParams::register(store, rng, &format!("{name}.conv2"), w, w, 3, 1, 1, false),
            bn2: BnParams::register(store, &format!("{name}.bn2"), w),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId, training: bool) -> VarId {
        let y = self.conv1.forward(t, store, x);
        let y = self.bn1.forward(t, store, y, training);
        let y = t.relu(y);
        let y = self.conv2.forward(t, store, y);
        let y = self.bn2.forward(t, store, y, training);
        let s = t.add(y, x);
        t.relu(s)
    }
}

/// Stride-2 stage transition: 3x3 conv doubling resolution drop, plus norm
/// and rectifier.
pub struct TransitionParams {
    conv: ConvParams,
    bn: BnParams,
}

impl TransitionParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        TransitionParams {
            conv: ConvParams::register(store, rng, &format!("{name}.conv"), in_ch, out_ch, 3, 2, 1, false),
            bn: BnParams::register(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: VarId, training: bool) -> VarId {
        let y = self.conv.forward(t, store, x);
        let y = self.bn.forward(t, store, y, training);
        t.relu(y)
    }
}

/// Shared trunk after the stems: stage 0 blocks at stride 2, then three
/// stride-2 transitions with blocks, ending at stride 16.
pub struct TrunkParams {
    stage0: Vec<BlockParams>,
    transitions: Vec<TransitionParams>,
    stages: Vec<Vec<BlockParams>>,
}

impl TrunkParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let stage0 = (0..cfg.blocks[0])
            .map(|j| BlockParams::register(store, rng, &format!("{prefix}.stage0.block{j}"), cfg.widths[0]))
            .collect();
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for i in 1..4 {
            transitions.push(TransitionParams::register(
                store,
                rng,
                &format!("{prefix}.stage{i}.trans"),
                cfg.widths[i - 1],
                cfg.widths[i],
            ));
            stages.push(
                (0..cfg.blocks[i])
                    .map(|j| {
                        BlockParams::register(
                            store,
                            rng,
                            &format!("{prefix}.stage{i}.block{j}"),
                            cfg.widths[i],
                        )
                    })
                    .collect(),
            );
        }
        TrunkParams {
            stage0,
            transitions,
            stages,
        }
    }

    /// Returns features at strides 4, 8, and 16.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        x: VarId,
        training: bool,
    ) -> (VarId, VarId, VarId) {
        let mut x = x;
        for b in &self.stage0 {
            x = b.forward(t, store, x, training);
        }
        let mut outs = Vec::with_capacity(3);
        for i in 0..3 {
            x = self.transitions[i].forward(t, store, x, training);
            for b in &self.stages[i] {
                x = b.forward(t, store, x, training);
            }
            outs.push(x);
        }
        (outs[0], outs[1], outs[2])
    }
}

enum StemParams {
    /// Separate input convolutions for query frame, reference frame,
    /// foreground map, and background map; reference terms are summed.
    TwoPath {
        query: ConvParams,
        ref_frame: ConvParams,
        fg: ConvParams,
        bg: ConvParams,
    },
    /// One shared frame convolution; the mask enters by arithmetic on the
    /// stem output (multiply or residual gating).
    SharedFrame { frame: ConvParams },
}

/// The full extractor: stems, shared norm, trunk, bottleneck.
pub struct ExtractorParams {
    stem: StemParams,
    stem_bn: BnParams,
    trunk: TrunkParams,
    bottleneck: ConvParams,
    fusion: MaskFusion,
}

impl ExtractorParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let w0 = cfg.widths[0];
        let stem = match cfg.mask_fusion {
            MaskFusion::TwoPath => StemParams::TwoPath {
                query: ConvParams::register(store, rng, "extractor.stem.query", 3, w0, 7, 2, 3, false),
                ref_frame: ConvParams::register(store, rng, "extractor.stem.ref_frame", 3, w0, 7, 2, 3, false),
                fg: ConvParams::register(store, rng, "extractor.stem.fg", 1, w0, 7, 2, 3, false),
                bg: ConvParams::register(store, rng, "extractor.stem.bg", 1, w0, 7, 2, 3, false),
            },
            MaskFusion::Residual | MaskFusion::Multiply => StemParams::SharedFrame {
                frame: ConvParams::register(store, rng, "extractor.stem.frame", 3, w0, 7, 2, 3, false),
            },
        };
        ExtractorParams {
            stem,
            stem_bn: BnParams::register(store, "extractor.stem.bn", w0),
            trunk: TrunkParams::register(store, rng, "extractor.trunk", cfg),
            bottleneck: ConvParams::register(
                store,
                rng,
                "extractor.bottleneck",
                cfg.widths[3],
                cfg.d_model,
                1,
                1,
                0,
                true,
            ),
            fusion: cfg.mask_fusion,
        }
    }

    /// Run a batch of samples. All samples must share the reference count and
    /// frame size. Slices are folded into the convolution batch axis in
    /// sample-major order (refs then query per sample), so batch
    /// normalization sees every slice of the batch at once.
    pub fn forward_batch(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        samples: &[ClipSample],
        training: bool,
    ) -> Result<Vec<SampleFeatures>> {
        assert!(!samples.is_empty(), "empty batch");
        let n_refs = samples[0].refs.len();
        if n_refs == 0 {
            return Err(VosError::EmptyReferenceSet);
        }
        let (h, w) = (samples[0].query.shape()[1], samples[0].query.shape()[2]);
        for s in samples {
            if s.refs.len() != n_refs {
                return Err(VosError::ShapeMismatch {
                    context: "extractor batch",
                    expected: format!("{n_refs} references"),
                    got: format!("{}", s.refs.len()),
                });
            }
            for r in &s.refs {
                check_hw("reference frame", &[r.rgb.shape()[1], r.rgb.shape()[2]], h, w)?;
                check_hw("reference mask", r.mask.shape(), h, w)?;
            }
            check_hw("query frame", &[s.query.shape()[1], s.query.shape()[2]], h, w)?;
        }
        let min_side = min_input_side(STRIDE);
        if h < min_side || w < min_side {
            return Err(VosError::InputTooSmall {
                dim: if h < min_side { "height" } else { "width" },
                got: h.min(w),
                min: min_side,
            });
        }

        let b = samples.len();
        let hp = h + (STRIDE - h % STRIDE) % STRIDE;
        let wp = w + (STRIDE - w % STRIDE) % STRIDE;

        // Assemble padded input batches.
        let mut ref_rgb = ArrayD::<f64>::zeros(IxDyn(&[b * n_refs, 3, hp, wp]));
        let mut ref_fg = ArrayD::<f64>::zeros(IxDyn(&[b * n_refs, 1, hp, wp]));
        let mut query = ArrayD::<f64>::zeros(IxDyn(&[b, 3, hp, wp]));
        for (bi, s) in samples.iter().enumerate() {
            for (ti, r) in s.refs.iter().enumerate() {
                let rgb = pad_reflect_to_multiple(&r.rgb, STRIDE)?;
                let m = pad_zero_to_multiple(&r.mask, STRIDE)?;
                ref_rgb
                    .slice_mut(ndarray::s![bi * n_refs + ti, .., .., ..])
                    .assign(&rgb);
                ref_fg
                    .slice_mut(ndarray::s![bi * n_refs + ti, 0, .., ..])
                    .assign(&m);
            }
            let q = pad_reflect_to_multiple(&s.query, STRIDE)?;
            query.slice_mut(ndarray::s![bi, .., .., ..]).assign(&q);
        }

        // Stems at stride 2.
        let (q0, r0) = match (&self.stem, self.fusion) {
            (StemParams::TwoPath { query: qc, ref_frame, fg, bg }, MaskFusion::TwoPath) => {
                let qv = t.constant(query);
                let rv = t.constant(ref_rgb);
                let fgv = t.constant(ref_fg.clone());
                let bgv = t.constant(ref_fg.mapv(|v| 1.0 - v));
                let q0 = qc.forward(t, store, qv);
                let rf = ref_frame.forward(t, store, rv);
                let ff = fg.forward(t, store, fgv);
                let bf = bg.forward(t, store, bgv);
                let sum = t.add(rf, ff);
                (q0, t.add(sum, bf))
            }
            (StemParams::SharedFrame { frame }, fusion) => {
                let qv = t.constant(query);
                let rv = t.constant(ref_rgb);
                let q0 = frame.forward(t, store, qv);
                let r0 = frame.forward(t, store, rv);
                // Mask enters by gating the stem features at stride 2.
                let mask_small = resize_masks(&ref_fg, hp / 2, wp / 2);
                let mv = t.constant(mask_small);
                let r0 = match fusion {
                    MaskFusion::Multiply => t.mul(r0, mv),
                    MaskFusion::Residual => {
                        let gated = t.mul(r0, mv);
                        t.add(r0, gated)
                    }
                    MaskFusion::TwoPath => unreachable!(),
                };
                (q0, r0)
            }
            _ => unreachable!("stem kind must match fusion mode"),
        };

        // Interleave to sample-major slice order: refs of sample 0, query of
        // sample 0, refs of sample 1, ...
        let mut pieces = Vec::with_capacity(2 * b);
        for bi in 0..b {
            pieces.push(t.slice_axis_range(r0, 0, bi * n_refs, (bi + 1) * n_refs));
            pieces.push(t.slice_axis_range(q0, 0, bi, bi + 1));
        }
        let x = t.concat(0, &pieces);
        let x = self.stem_bn.forward(t, store, x, training);
        let x = t.relu(x);

        let (s4, s8, s16) = self.trunk.forward(t, store, x, training);
        let f = self.bottleneck.forward(t, store, s16);

        let n_slices = n_refs + 1;
        let (h16, w16) = (hp / STRIDE, wp / STRIDE);
        let d = store.value(self.bottleneck.w).shape()[0];
        let layout = TokenLayout {
            n_slices,
            h: h16,
            w: w16,
            d,
        };

        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let mut slice_tokens = Vec::with_capacity(n_slices);
            for si in 0..n_slices {
                let row = bi * n_slices + si;
                let fs = t.slice_axis_range(f, 0, row, row + 1);
                let flat = t.reshape(fs, &[d, h16 * w16]);
                slice_tokens.push(t.transpose2(flat));
            }
            let tokens = t.concat(0, &slice_tokens);
            let qrow = bi * n_slices + n_refs;
            out.push(SampleFeatures {
                tokens,
                layout,
                skip_s4: t.slice_axis_range(s4, 0, qrow, qrow + 1),
                skip_s8: t.slice_axis_range(s8, 0, qrow, qrow + 1),
                padded_hw: (hp, wp),
                orig_hw: (h, w),
            });
        }
        Ok(out)
    }
}

fn check_hw(context: &'static str, shape: &[usize], h: usize, w: usize) -> Result<()> {
    if shape != [h, w] {
        return Err(VosError::ShapeMismatch {
            context,
            expected: format!("{h}x{w}"),
            got: format!("{:?}", shape),
        });
    }
    Ok(())
}

/// Bilinear resize of a stack of single-channel maps, outside the tape.
fn resize_masks(masks: &ArrayD<f64>, oh: usize, ow: usize) -> ArrayD<f64> {
    let mut t = Tape::with_grad(false);
    let v = t.constant(masks.clone());
    let y = t.bilinear_resize(v, oh, ow);
    t.value(y).clone()
}

/// Encoder-pipeline layouts compared by parameter accounting.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EncoderVariant {
    /// Shared trunk, mask-aware stems only on the reference path.
    TwoPath,
    /// Separate trunks for query and reference paths.
    IndependentEncoders,
    /// One shared trunk; the mask joins by concat plus a 1x1 fusion conv at
    /// the trunk output.
    SiameseConcat,
}

/// Exact trainable-parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub extractor: usize,
    pub transformer: usize,
    pub segmentation: usize,
    pub total: usize,
}

fn conv_count(i: usize, o: usize, k: usize, bias: bool) -> usize {
    o * i * k * k + if bias { o } else { 0 }
}

fn bn_count(c: usize) -> usize {
    2 * c
}

fn block_count(w: usize) -> usize {
    2 * conv_count(w, w, 3, false) + 2 * bn_count(w)
}

fn trunk_count(cfg: &ModelConfig) -> usize {
    let mut n = cfg.blocks[0] * block_count(cfg.widths[0]);
    for i in 1..4 {
        n += conv_count(cfg.widths[i - 1], cfg.widths[i], 3, false) + bn_count(cfg.widths[i]);
        n += cfg.blocks[i] * block_count(cfg.widths[i]);
    }
    n
}

fn extractor_count(cfg: &ModelConfig, variant: EncoderVariant) -> usize {
    let w0 = cfg.widths[0];
    let stem_query = conv_count(3, w0, 7, false);
    let stem_ref = conv_count(3, w0, 7, false) + 2 * conv_count(1, w0, 7, false);
    let bottleneck = conv_count(cfg.widths[3], cfg.d_model, 1, true);
    match variant {
        EncoderVariant::TwoPath => {
            stem_query + stem_ref + bn_count(w0) + trunk_count(cfg) + bottleneck
        }
        EncoderVariant::IndependentEncoders => {
            (stem_query + bn_count(w0) + trunk_count(cfg))
                + (stem_ref + bn_count(w0) + trunk_count(cfg))
                + bottleneck
        }
        EncoderVariant::SiameseConcat => {
            let fusion = conv_count(cfg.widths[3] + 1, cfg.widths[3], 1, true);
            stem_query + bn_count(w0) + trunk_count(cfg) + fusion + bottleneck
        }
    }
}

fn transformer_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let ff = cfg.ff_dim;
    let ffn = d * ff + ff + ff * d + d;
    let ln = 2 * d;
    let enc_layer = 4 * d * d + ln + ffn + ln;
    let dec_layer = 2 * d * d + ln + 4 * d * d + ln + ffn + ln;
    let mut n = cfg.encoder_layers * enc_layer;
    if cfg.use_decoder {
        n += cfg.decoder_layers * dec_layer + d;
    }
    n
}

fn segmentation_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let m = cfg.n_heads;
    let g = cfg.head_channels;
    let tab = 2 * d * d;
    let conv_in = conv_count(d + m, g, 3, true);
    let refine = |skip_ch: usize| {
        conv_count(skip_ch, g, 3, true) + 2 * conv_count(g, g, 3, true)
    };
    let out = conv_count(g, 2, 3, true);
    tab + conv_in + refine(cfg.widths[2]) + refine(cfg.widths[1]) + out
}

/// Exact trainable-parameter counts for a configuration under each encoder
/// pipeline layout. Matches what a really constructed model registers.
pub fn count_parameters(cfg: &ModelConfig, variant: EncoderVariant) -> ParamBreakdown {
    let extractor = extractor_count(cfg, variant);
    let transformer = transformer_count(cfg);
    let segmentation = segmentation_count(cfg);
    ParamBreakdown {
        extractor,
        transformer,
        segmentation,
        total: extractor + transformer + segmentation,
    }
}

/// Register only the extractor parameters of a pipeline variant; used to
/// cross-check the analytic counts against real registrations.
pub fn register_extractor_variant(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    variant: EncoderVariant,
) {
    let w0 = cfg.widths[0];
    match variant {
        EncoderVariant::TwoPath => {
            let mut c = cfg.clone();
            c.mask_fusion = MaskFusion::TwoPath;
            ExtractorParams::register(store, rng, &c);
        }
        EncoderVariant::IndependentEncoders => {
            ConvParams::register(store, rng, "q_enc.stem.query", 3, w0, 7, 2, 3, false);
            BnParams::register(store, "q_enc.stem.bn", w0);
            TrunkParams::register(store, rng, "q_enc.trunk", cfg);
            ConvParams::register(store, rng, "r_enc.stem.ref_frame", 3, w0, 7, 2, 3, false);
            ConvParams::register(store, rng, "r_enc.stem.fg", 1, w0, 7, 2, 3, false);
            ConvParams::register(store, rng, "r_enc.stem.bg", 1, w0, 7, 2, 3, false);
            BnParams::register(store, "r_enc.stem.bn", w0);
            TrunkParams::register(store, rng, "r_enc.trunk", cfg);
            ConvParams::register(store, rng, "bottleneck", cfg.widths[3], cfg.d_model, 1, 1, 0, true);
        }
        EncoderVariant::SiameseConcat => {
            ConvParams::register(store, rng, "enc.stem.frame", 3, w0, 7, 2, 3, false);
            BnParams::register(store, "enc.stem.bn", w0);
            TrunkParams::register(store, rng, "enc.trunk", cfg);
            ConvParams::register(
                store,
                rng,
                "enc.fusion",
                cfg.widths[3] + 1,
                cfg.widths[3],
                1,
                1,
                0,
                true,
            );
            ConvParams::register(store, rng, "bottleneck", cfg.widths[3], cfg.d_model, 1, 1, 0, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            widths: [4, 8, 12, 16],
            blocks: [1, 0, 0, 1],
            d_model: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 16,
            dropout: 0.0,
            head_channels: 4,
            ..ModelConfig::desk()
        }
    }

    fn ramp_frame(h: usize, w: usize, phase: f64) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            0.5 + 0.4 * ((x as f64 * 0.3 + y as f64 * 0.17 + c as f64 + phase).sin())
        })
    }

    fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= r * r {
                1.0
            } else {
                0.0
            }
        })
    }

    fn one_sample(h: usize, w: usize) -> ClipSample {
        ClipSample {
            refs: vec![ReferenceFrame {
                rgb: ramp_frame(h, w, 0.0),
                mask: disc_mask(h, w, h as f64 / 2.0, w as f64 / 2.0, h as f64 / 5.0),
            }],
            query: ramp_frame(h, w, 1.0),
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let img = ramp_frame(20, 23, 0.0);
        let padded = pad_reflect_to_multiple(&img, 16).unwrap();
        assert_eq!(padded.shape(), &[3, 32, 32]);
        for c in 0..3 {
            for i in 0..12 {
                for x in 0..23 {
                    assert_eq!(padded[(c, 20 + i, x)], img[(c, 18 - i, x)]);
                }
            }
            for y in 0..20 {
                for j in 0..9 {
                    assert_eq!(padded[(c, y, 23 + j)], img[(c, y, 21 - j)]);
                }
            }
        }
    }

    #[test]
    fn mask_padding_is_zero() {
        let mask = disc_mask(20, 23, 10.0, 11.0, 6.0);
        let padded = pad_zero_to_multiple(&mask, 16).unwrap();
        assert_eq!(padded.shape(), &[32, 32]);
        assert_eq!(padded.slice(ndarray::s![..20, ..23]), mask);
        assert!(padded.slice(ndarray::s![20.., ..]).iter().all(|&v| v == 0.0));
        assert!(padded.slice(ndarray::s![.., 23..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inputs_below_minimum_side_are_rejected() {
        assert!(pad_reflect_to_multiple(&ramp_frame(8, 64, 0.0), 16).is_err());
        assert!(pad_reflect_to_multiple(&ramp_frame(9, 64, 0.0), 16).is_ok());
        assert_eq!(min_input_side(16), 9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &tiny_cfg());
        let mut t = Tape::with_grad(false);
        let err = ex
            .forward_batch(&mut t, &store, &[one_sample(8, 64)], false)
            .unwrap_err();
        assert!(matches!(err, VosError::InputTooSmall { .. }), "{err}");
    }

    #[test]
    fn token_layout_and_shapes() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let mut t = Tape::with_grad(false);
        let mut sample = one_sample(64, 64);
        sample.refs.push(ReferenceFrame {
            rgb: ramp_frame(64, 64, 2.0),
            mask: disc_mask(64, 64, 20.0, 40.0, 9.0),
        });
        let feats = ex.forward_batch(&mut t, &store, &[sample], false).unwrap();
        let f = &feats[0];
        assert_eq!(f.layout, TokenLayout { n_slices: 3, h: 4, w: 4, d: 8 });
        assert_eq!(f.layout.len(), 48);
        assert_eq!(t.value(f.tokens).shape(), &[48, 8]);
        assert_eq!(t.value(f.skip_s4).shape(), &[1, 8, 16, 16]);
        assert_eq!(t.value(f.skip_s8).shape(), &[1, 12, 8, 8]);
        assert_eq!(f.layout.query_range(), (32, 48));
        assert_eq!(f.layout.index(2, 0, 0), 32);
        assert_eq!(f.layout.index(0, 1, 2), 6);
    }

    #[test]
    fn non_multiple_sizes_pad_and_report_original() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let mut t = Tape::with_grad(false);
        let feats = ex
            .forward_batch(&mut t, &store, &[one_sample(70, 50)], false)
            .unwrap();
        let f = &feats[0];
        assert_eq!(f.padded_hw, (80, 64));
        assert_eq!(f.orig_hw, (70, 50));
        assert_eq!(f.layout, TokenLayout { n_slices: 2, h: 5, w: 4, d: 8 });
    }

    #[test]
    fn swapping_fg_bg_weights_and_inverting_mask_is_identity() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let sample = one_sample(64, 64);

        let mut t1 = Tape::with_grad(false);
        let f1 = ex.forward_batch(&mut t1, &store, &[sample.clone()], false).unwrap();
        let tokens1 = t1.value(f1[0].tokens).clone();

        let (fg_id, bg_id) = (
            store.id("extractor.stem.fg.w").unwrap(),
            store.id("extractor.stem.bg.w").unwrap(),
        );
        let fg_w = store.value(fg_id).clone();
        let bg_w = store.value(bg_id).clone();
        *store.value_mut(fg_id) = bg_w;
        *store.value_mut(bg_id) = fg_w;

        let mut inverted = sample;
        inverted.refs[0].mask.mapv_inplace(|v| 1.0 - v);
        let mut t2 = Tape::with_grad(false);
        let f2 = ex.forward_batch(&mut t2, &store, &[inverted], false).unwrap();
        let tokens2 = t2.value(f2[0].tokens).clone();

        let err = (&tokens1 - &tokens2).iter().map(|e| e.abs()).fold(0.0f64, f64::max);
        assert!(err < 1e-12, "fg/bg role swap is not symmetric: {err}");
    }

    #[test]
    fn reference_order_permutes_token_blocks() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let ref_a = ReferenceFrame {
            rgb: ramp_frame(64, 64, 0.0),
            mask: disc_mask(64, 64, 30.0, 30.0, 10.0),
        };
        let ref_b = ReferenceFrame {
            rgb: ramp_frame(64, 64, 3.0),
            mask: disc_mask(64, 64, 16.0, 48.0, 7.0),
        };
        let q = ramp_frame(64, 64, 1.0);
        let ab = ClipSample { refs: vec![ref_a.clone(), ref_b.clone()], query: q.clone() };
        let ba = ClipSample { refs: vec![ref_b, ref_a], query: q };

        let mut t = Tape::with_grad(false);
        let fa = ex.forward_batch(&mut t, &store, &[ab], false).unwrap();
        let fb = ex.forward_batch(&mut t, &store, &[ba], false).unwrap();
        let ta = t.value(fa[0].tokens);
        let tb = t.value(fb[0].tokens);
        let per = 16;
        assert_eq!(
            ta.slice(ndarray::s![0..per, ..].as_ref()),
            tb.slice(ndarray::s![per..2 * per, ..].as_ref()),
            "reference block 0 must move to block 1"
        );
        assert_eq!(
            ta.slice(ndarray::s![per..2 * per, ..].as_ref()),
            tb.slice(ndarray::s![0..per, ..].as_ref()),
        );
        assert_eq!(
            ta.slice(ndarray::s![2 * per.., ..].as_ref()),
            tb.slice(ndarray::s![2 * per.., ..].as_ref()),
            "query block must be unaffected by reference order"
        );
    }

    #[test]
    fn query_slice_ignores_reference_changes_in_eval_mode() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let sample = one_sample(64, 64);
        let mut altered = sample.clone();
        altered.refs[0].mask = disc_mask(64, 64, 10.0, 10.0, 8.0);
        altered.refs[0].rgb = ramp_frame(64, 64, 5.0);

        let mut t = Tape::with_grad(false);
        let f1 = ex.forward_batch(&mut t, &store, &[sample], false).unwrap();
        let f2 = ex.forward_batch(&mut t, &store, &[altered], false).unwrap();
        let (qs, qe) = f1[0].layout.query_range();
        assert_eq!(
            t.value(f1[0].tokens).slice(ndarray::s![qs..qe, ..].as_ref()),
            t.value(f2[0].tokens).slice(ndarray::s![qs..qe, ..].as_ref()),
            "query tokens must not depend on references in eval mode"
        );
        assert_ne!(
            t.value(f1[0].tokens).slice(ndarray::s![..qs, ..].as_ref()),
            t.value(f2[0].tokens).slice(ndarray::s![..qs, ..].as_ref()),
            "reference tokens must change when references change"
        );
        assert_eq!(t.value(f1[0].skip_s4), t.value(f2[0].skip_s4));
        assert_eq!(t.value(f1[0].skip_s8), t.value(f2[0].skip_s8));
    }

    #[test]
    fn tokens_respect_receptive_field_locality() {
        let mut cfg = tiny_cfg();
        cfg.blocks = [0, 0, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let sample = one_sample(64, 64);
        let mut poked = sample.clone();
        poked.query[(0, 0, 0)] += 0.25;

        let mut t = Tape::with_grad(false);
        let f1 = ex.forward_batch(&mut t, &store, &[sample], false).unwrap();
        let f2 = ex.forward_batch(&mut t, &store, &[poked], false).unwrap();
        let l = f1[0].layout;
        let far = l.index(1, 3, 3);
        let near = l.index(1, 0, 0);
        assert_eq!(
            t.value(f1[0].tokens).slice(ndarray::s![far, ..].as_ref()),
            t.value(f2[0].tokens).slice(ndarray::s![far, ..].as_ref()),
            "pixel (0,0) lies outside the receptive field of the far token"
        );
        assert_ne!(
            t.value(f1[0].tokens).slice(ndarray::s![near, ..].as_ref()),
            t.value(f2[0].tokens).slice(ndarray::s![near, ..].as_ref()),
            "pixel (0,0) lies inside the receptive field of the near token"
        );
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let sample = one_sample(64, 48);
        let run = || {
            let mut t = Tape::with_grad(false);
            let f = ex.forward_batch(&mut t, &store, &[sample.clone()], false).unwrap();
            t.value(f[0].tokens).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_reference_set_is_rejected() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let mut t = Tape::with_grad(false);
        let s = ClipSample { refs: vec![], query: ramp_frame(64, 64, 0.0) };
        assert!(matches!(
            ex.forward_batch(&mut t, &store, &[s], false),
            Err(VosError::EmptyReferenceSet)
        ));
    }

    #[test]
    fn mismatched_frame_sizes_are_rejected() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let ex = ExtractorParams::register(&mut store, &mut rng, &cfg);
        let mut t = Tape::with_grad(false);
        let mut s = one_sample(64, 64);
        s.refs[0].mask = disc_mask(32, 32, 16.0, 16.0, 5.0);
        assert!(matches!(
            ex.forward_batch(&mut t, &store, &[s], false),
            Err(VosError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn analytic_counts_match_registered_parameters() {
        for cfg in [tiny_cfg(), ModelConfig::desk()] {
            for variant in [
                EncoderVariant::TwoPath,
                EncoderVariant::IndependentEncoders,
                EncoderVariant::SiameseConcat,
            ] {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let mut store = ParamStore::new();
                register_extractor_variant(&mut store, &mut rng, &cfg, variant);
                let counted = count_parameters(&cfg, variant).extractor;
                assert_eq!(
                    store.n_trainable(),
                    counted,
                    "analytic extractor count diverges for {variant:?}"
                );
            }
        }
    }

    #[test]
    fn shared_trunk_saves_parameters_at_every_config() {
        for cfg in [tiny_cfg(), ModelConfig::desk(), ModelConfig::full_scale()] {
            let tp = count_parameters(&cfg, EncoderVariant::TwoPath).total;
            let ind = count_parameters(&cfg, EncoderVariant::IndependentEncoders).total;
            let sia = count_parameters(&cfg, EncoderVariant::SiameseConcat).total;
            assert!(tp < ind, "two-path must undercut independent encoders");
            // The gap to the siamese layout is exactly the extra input convs
            // minus the siamese fusion conv.
            let extra_stems = 49 * 3 * cfg.widths[0] + 2 * 49 * cfg.widths[0];
            let fusion = (cfg.widths[3] + 1) * cfg.widths[3] + cfg.widths[3];
            assert_eq!(sia as i64 - tp as i64, fusion as i64 - extra_stems as i64);
        }
    }
}
