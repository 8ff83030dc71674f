//! Run configuration: typed structs with a flat `key = value` text format.
//! Dotted namespaces group related keys. Parsing rejects unknown keys and
//! malformed values outright so typos cannot silently fall back to defaults.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, VosError};

/// How reference-frame masks enter the feature extractor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MaskFusion {
    /// Dedicated input convolutions for frame, foreground map, and
    /// background map, summed before the shared trunk.
    TwoPath,
    /// Frame features plus features gated by the downsampled mask.
    Residual,
    /// Frame features multiplied by the downsampled mask.
    Multiply,
}

impl FromStr for MaskFusion {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "two_path" => Ok(MaskFusion::TwoPath),
            "residual" => Ok(MaskFusion::Residual),
            "multiply" => Ok(MaskFusion::Multiply),
            _ => Err(format!("expected two_path|residual|multiply, got `{s}`")),
        }
    }
}

impl fmt::Display for MaskFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskFusion::TwoPath => "two_path",
            MaskFusion::Residual => "residual",
            MaskFusion::Multiply => "multiply",
        })
    }
}

/// How the background probability is produced when merging per-object maps.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BackgroundRule {
    /// Background is one minus the strongest per-pixel object probability.
    Rescale,
    /// Background is treated as an extra object inside the normalization.
    PseudoObject,
}

impl FromStr for BackgroundRule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rescale" => Ok(BackgroundRule::Rescale),
            "pseudo_object" => Ok(BackgroundRule::PseudoObject),
            _ => Err(format!("expected rescale|pseudo_object, got `{s}`")),
        }
    }
}

impl fmt::Display for BackgroundRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackgroundRule::Rescale => "rescale",
            BackgroundRule::PseudoObject => "pseudo_object",
        })
    }
}

/// Whether the classification loss gets an explicit background channel.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ClsBackground {
    Append,
    Exclude,
}

impl FromStr for ClsBackground {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "append" => Ok(ClsBackground::Append),
            "exclude" => Ok(ClsBackground::Exclude),
            _ => Err(format!("expected append|exclude, got `{s}`")),
        }
    }
}

impl fmt::Display for ClsBackground {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsBackground::Append => "append",
            ClsBackground::Exclude => "exclude",
        })
    }
}

/// Which annotated or previously segmented frames feed the reference set at
/// each inference step.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReferencePolicy {
    FirstOnly,
    PreviousOnly,
    FirstAndPrevious,
    /// First frame, every k-th segmented frame, and always the previous one.
    EveryK(usize),
}

impl FromStr for ReferencePolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first" => Ok(ReferencePolicy::FirstOnly),
            "prev" | "previous" => Ok(ReferencePolicy::PreviousOnly),
            "first+prev" => Ok(ReferencePolicy::FirstAndPrevious),
            _ => {
                if let Some(k) = s.strip_prefix("every:") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| format!("expected every:K with integer K, got `{s}`"))?;
                    if k == 0 {
                        return Err("every:K needs K >= 1".into());
                    }
                    Ok(ReferencePolicy::EveryK(k))
                } else {
                    Err(format!(
                        "expected first|prev|first+prev|every:K, got `{s}`"
                    ))
                }
            }
        }
    }
}

impl fmt::Display for ReferencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferencePolicy::FirstOnly => f.write_str("first"),
            ReferencePolicy::PreviousOnly => f.write_str("prev"),
            ReferencePolicy::FirstAndPrevious => f.write_str("first+prev"),
            ReferencePolicy::EveryK(k) => write!(f, "every:{k}"),
        }
    }
}

/// Probabilities are clamped to this interval before odds conversion so the
/// log stays finite. Pinned, not configurable.
pub const PROB_CLAMP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel widths of the four backbone stages.
    pub widths: [usize; 4],
    /// Residual blocks per stage after the stride-2 transition.
    pub blocks: [usize; 4],
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub head_channels: usize,
    pub mask_fusion: MaskFusion,
    pub use_decoder: bool,
    pub background: BackgroundRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration sized for CPU experiments and the test suite.
    pub fn desk() -> Self {
        ModelConfig {
            widths: [16, 32, 64, 128],
            blocks: [1, 1, 1, 1],
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 256,
            dropout: 0.1,
            head_channels: 16,
            mask_fusion: MaskFusion::TwoPath,
            use_decoder: true,
            background: BackgroundRule::Rescale,
        }
    }

    /// Full-size configuration: a four-stage 3-4-6-3 trunk feeding a
    /// 6+6-layer transformer with d=256, 8 heads and 2048 feed-forward
    /// units. Far too heavy to train on a CPU; used for parameter
    /// accounting and scaling checks.
    pub fn full_scale() -> Self {
        ModelConfig {
            widths: [32, 64, 128, 256],
            blocks: [3, 4, 6, 3],
            d_model: 256,
            n_heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            ff_dim: 2048,
            dropout: 0.1,
            head_channels: 128,
            mask_fusion: MaskFusion::TwoPath,
            use_decoder: true,
            background: BackgroundRule::Rescale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(VosError::BadValue {
                key: "transformer.d_model/heads".into(),
                reason: "must be positive".into(),
            });
        }
        if self.d_model % self.n_heads != 0 {
            return Err(VosError::BadValue {
                key: "transformer.heads".into(),
                reason: format!(
                    "head count {} must divide model dim {}",
                    self.n_heads, self.d_model
                ),
            });
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(VosError::BadValue {
                key: "backbone.widths".into(),
                reason: "stage widths must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VosError::BadValue {
                key: "transformer.dropout".into(),
                reason: format!("dropout {} outside [0,1)", self.dropout),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub flip_prob: f64,
    /// Max absolute rotation of the clip-level base transform, degrees.
    pub rotate_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Max translation as a fraction of the frame side.
    pub translate_frac: f64,
    /// Per-frame perturbation magnitude relative to the base magnitudes.
    pub per_frame: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            flip_prob: 0.5,
            rotate_deg: 10.0,
            scale_lo: 0.85,
            scale_hi: 1.15,
            translate_frac: 0.10,
            per_frame: 0.3,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Frames per sampled training clip; the last frame is the query, all
    /// earlier ones act as references with ground-truth masks.
    pub clip_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// How background pixels enter the across-object classification loss:
    /// appended as one more softmax channel, or left out of the average.
    pub cls_background: ClsBackground,
    pub pretrain_steps: usize,
    pub main_steps: usize,
    /// Freeze normalization statistics (use running stats) during the video
    /// stage, after the static-image pretrain stage has settled them.
    pub freeze_bn_in_main: bool,
    /// Validate every this many steps; 0 validates only at the end.
    pub val_every: usize,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 4,
            clip_len: 3,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            cls_background: ClsBackground::Append,
            pretrain_steps: 200,
            main_steps: 400,
            freeze_bn_in_main: true,
            val_every: 0,
            aug: AugConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of scenes built from two near-identical objects, which makes
    /// appearance shortcuts fail and rewards temporal reasoning.
    pub confusion_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            train_clips: 32,
            val_clips: 8,
            frames: 8,
            size: 64,
            min_objects: 1,
            max_objects: 2,
            confusion_prob: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub refs: ReferencePolicy,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            refs: ReferencePolicy::FirstAndPrevious,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Boundary match tolerance as a fraction of the image diagonal.
    pub boundary_tol_frac: f64,
    pub recall_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            boundary_tol_frac: 0.008,
            recall_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| VosError::BadValue {
        key: key.into(),
        reason: format!("`{v}` is not a non-negative integer"),
    })
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| VosError::BadValue {
        key: key.into(),
        reason: format!("`{v}` is not a non-negative integer"),
    })
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| VosError::BadValue {
        key: key.into(),
        reason: format!("`{v}` is not a number"),
    })
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(VosError::BadValue {
            key: key.into(),
            reason: format!("`{v}` is not true/false"),
        }),
    }
}

fn p_usize4(key: &str, v: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(VosError::BadValue {
            key: key.into(),
            reason: format!("expected 4 comma-separated integers, got `{v}`"),
        });
    }
    let mut out = [0usize; 4];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p_usize(key, p)?;
    }
    Ok(out)
}

fn p_enum<T: FromStr<Err = String>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e| VosError::BadValue {
        key: key.into(),
        reason: e,
    })
}

impl RunConfig {
    /// Apply one `key = value` override. Unknown keys are hard errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "backbone.widths" => self.model.widths = p_usize4(key, v)?,
            "backbone.blocks" => self.model.blocks = p_usize4(key, v)?,
            "transformer.d_model" => self.model.d_model = p_usize(key, v)?,
            "transformer.heads" => self.model.n_heads = p_usize(key, v)?,
            "transformer.encoder_layers" => self.model.encoder_layers = p_usize(key, v)?,
            "transformer.decoder_layers" => self.model.decoder_layers = p_usize(key, v)?,
            "transformer.ff_dim" => self.model.ff_dim = p_usize(key, v)?,
            "transformer.dropout" => self.model.dropout = p_f64(key, v)?,
            "head.channels" => self.model.head_channels = p_usize(key, v)?,
            "model.mask_fusion" => self.model.mask_fusion = p_enum(key, v)?,
            "model.use_decoder" => self.model.use_decoder = p_bool(key, v)?,
            "model.background" => self.model.background = p_enum(key, v)?,
            "train.seed" => self.train.seed = p_u64(key, v)?,
            "train.batch_size" => self.train.batch_size = p_usize(key, v)?,
            "train.clip_len" => self.train.clip_len = p_usize(key, v)?,
            "train.lr" => self.train.lr = p_f64(key, v)?,
            "train.beta1" => self.train.beta1 = p_f64(key, v)?,
            "train.beta2" => self.train.beta2 = p_f64(key, v)?,
            "train.adam_eps" => self.train.adam_eps = p_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = p_f64(key, v)?,
            "train.cls_background" => self.train.cls_background = p_enum(key, v)?,
            "train.pretrain_steps" => self.train.pretrain_steps = p_usize(key, v)?,
            "train.main_steps" => self.train.main_steps = p_usize(key, v)?,
            "train.freeze_bn_in_main" => self.train.freeze_bn_in_main = p_bool(key, v)?,
            "train.val_every" => self.train.val_every = p_usize(key, v)?,
            "aug.flip_prob" => self.train.aug.flip_prob = p_f64(key, v)?,
            "aug.rotate_deg" => self.train.aug.rotate_deg = p_f64(key, v)?,
            "aug.scale_lo" => self.train.aug.scale_lo = p_f64(key, v)?,
            "aug.scale_hi" => self.train.aug.scale_hi = p_f64(key, v)?,
            "aug.translate_frac" => self.train.aug.translate_frac = p_f64(key, v)?,
            "aug.per_frame" => self.train.aug.per_frame = p_f64(key, v)?,
            "aug.brightness" => self.train.aug.brightness = p_f64(key, v)?,
            "aug.contrast" => self.train.aug.contrast = p_f64(key, v)?,
            "synth.seed" => self.synth.seed = p_u64(key, v)?,
            "synth.train_clips" => self.synth.train_clips = p_usize(key, v)?,
            "synth.val_clips" => self.synth.val_clips = p_usize(key, v)?,
            "synth.frames" => self.synth.frames = p_usize(key, v)?,
            "synth.size" => self.synth.size = p_usize(key, v)?,
            "synth.min_objects" => self.synth.min_objects = p_usize(key, v)?,
            "synth.max_objects" => self.synth.max_objects = p_usize(key, v)?,
            "synth.confusion_prob" => self.synth.confusion_prob = p_f64(key, v)?,
            "infer.refs" => self.infer.refs = p_enum(key, v)?,
            "eval.boundary_tolerance" => self.eval.boundary_tol_frac = p_f64(key, v)?,
            "eval.recall_threshold" => self.eval.recall_threshold = p_f64(key, v)?,
            _ => return Err(VosError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse a whole config file on top of defaults. Lines are
    /// `key = value`; `#` starts a comment; blank lines are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(VosError::Config {
                    line: lineno + 1,
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    VosError::UnknownKey(k) => VosError::Config {
                        line: lineno + 1,
                        reason: format!("unknown key `{k}`"),
                    },
                    VosError::BadValue { key, reason } => VosError::Config {
                        line: lineno + 1,
                        reason: format!("bad value for `{key}`: {reason}"),
                    },
                    other => other,
                })?;
        }
        self.model.validate()
    }

    /// Serialize every key in a stable order. Parsing the result reproduces
    /// the config exactly; used for provenance files and checkpoints.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let a = &t.aug;
        let s = &self.synth;
        let mut out = String::new();
        let kv = |out: &mut String, k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv(&mut out, "backbone.widths", format!("{},{},{},{}", m.widths[0], m.widths[1], m.widths[2], m.widths[3]));
        kv(&mut out, "backbone.blocks", format!("{},{},{},{}", m.blocks[0], m.blocks[1], m.blocks[2], m.blocks[3]));
        kv(&mut out, "transformer.d_model", m.d_model.to_string());
        kv(&mut out, "transformer.heads", m.n_heads.to_string());
        kv(&mut out, "transformer.encoder_layers", m.encoder_layers.to_string());
        kv(&mut out, "transformer.decoder_layers", m.decoder_layers.to_string());
        kv(&mut out, "transformer.ff_dim", m.ff_dim.to_string());
        kv(&mut out, "transformer.dropout", format!("{}", m.dropout));
        kv(&mut out, "head.channels", m.head_channels.to_string());
        kv(&mut out, "model.mask_fusion", m.mask_fusion.to_string());
        kv(&mut out, "model.use_decoder", m.use_decoder.to_string());
        kv(&mut out, "model.background", m.background.to_string());
        kv(&mut out, "train.seed", t.seed.to_string());
        kv(&mut out, "train.batch_size", t.batch_size.to_string());
        kv(&mut out, "train.clip_len", t.clip_len.to_string());
        kv(&mut out, "train.lr", format!("{}", t.lr));
        kv(&mut out, "train.beta1", format!("{}", t.beta1));
        kv(&mut out, "train.beta2", format!("{}", t.beta2));
        kv(&mut out, "train.adam_eps", format!("{}", t.adam_eps));
        kv(&mut out, "train.weight_decay", format!("{}", t.weight_decay));
        kv(&mut out, "train.cls_background", t.cls_background.to_string());
        kv(&mut out, "train.pretrain_steps", t.pretrain_steps.to_string());
        kv(&mut out, "train.main_steps", t.main_steps.to_string());
        kv(&mut out, "train.freeze_bn_in_main", t.freeze_bn_in_main.to_string());
        kv(&mut out, "train.val_every", t.val_every.to_string());
        kv(&mut out, "aug.flip_prob", format!("{}", a.flip_prob));
        kv(&mut out, "aug.rotate_deg", format!("{}", a.rotate_deg));
        kv(&mut out, "aug.scale_lo", format!("{}", a.scale_lo));
        kv(&mut out, "aug.scale_hi", format!("{}", a.scale_hi));
        kv(&mut out, "aug.translate_frac", format!("{}", a.translate_frac));
        kv(&mut out, "aug.per_frame", format!("{}", a.per_frame));
        kv(&mut out, "aug.brightness", format!("{}", a.brightness));
        kv(&mut out, "aug.contrast", format!("{}", a.contrast));
        kv(&mut out, "synth.seed", s.seed.to_string());
        kv(&mut out, "synth.train_clips", s.train_clips.to_string());
        kv(&mut out, "synth.val_clips", s.val_clips.to_string());
        kv(&mut out, "synth.frames", s.frames.to_string());
        kv(&mut out, "synth.size", s.size.to_string());
        kv(&mut out, "synth.min_objects", s.min_objects.to_string());
        kv(&mut out, "synth.max_objects", s.max_objects.to_string());
        kv(&mut out, "synth.confusion_prob", format!("{}", s.confusion_prob));
        kv(&mut out, "infer.refs", self.infer.refs.to_string());
        kv(&mut out, "eval.boundary_tolerance", format!("{}", self.eval.boundary_tol_frac));
        kv(&mut out, "eval.recall_threshold", format!("{}", self.eval.recall_threshold));
        out
    }
}
