//! Procedural multi-object video clips with exact ground-truth masks.
//!
//! Scenes are a handful of textured shapes on a textured background, each
//! following an affine trajectory (drift, spin, slow scale). Later objects
//! paint over earlier ones, so the z-order is total and the label maps
//! resolve occlusion exactly. Rendering is anti-aliased by 4x4 supersampling;
//! a pixel belongs to an object's mask when that object covers more than
//! half of it and nothing later covers it more.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::dataset::{Clip, Dataset};
use crate::error::{Result, VosError};
use crate::evaluation::{read_mask_png, read_rgb_png, write_mask_png, write_rgb_png};

/// Coverage a pixel needs before it counts as part of a binary mask.
pub const MASK_COVERAGE_THRESHOLD: f64 = 0.5;
/// Hard ceiling on sampled per-frame drift, px.
pub const MAX_SPEED: f64 = 2.5;
/// Every object must keep at least this fraction of its support on canvas
/// in every frame.
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;

const SUPERSAMPLE: usize = 4;
const SPEC_RETRIES: usize = 24;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ShapeKind {
    Disc,
    Rect,
    Triangle,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TextureKind {
    Flat,
    Speckle,
    Stripes,
}

pub fn shape_name(s: ShapeKind) -> &'static str {
    match s {
        ShapeKind::Disc => "disc",
        ShapeKind::Rect => "rect",
        ShapeKind::Triangle => "triangle",
    }
}

pub fn texture_name(t: TextureKind) -> &'static str {
    match t {
        TextureKind::Flat => "flat",
        TextureKind::Speckle => "speckle",
        TextureKind::Stripes => "stripes",
    }
}

/// One moving shape. Paint order in `SceneSpec::objects` is the occlusion
/// order: later objects draw on top.
#[derive(Clone, Debug)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub texture: TextureKind,
    pub color: [f64; 3],
    /// Base half-extent, px.
    pub size: f64,
    /// Elongation for rectangles; 1 elsewhere.
    pub aspect: f64,
    /// (y, x) at frame 0.
    pub center: (f64, f64),
    /// (dy, dx) per frame.
    pub velocity: (f64, f64),
    pub angle: f64,
    /// Radians per frame.
    pub spin: f64,
    /// Relative growth per frame.
    pub scale_rate: f64,
    /// Texture contrast; 0 for flat color.
    pub noise_amp: f64,
    pub noise_seed: u64,
}

struct Pose {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    scale: f64,
}

impl ObjectSpec {
    fn pose(&self, t: usize) -> Pose {
        let a = self.angle + self.spin * t as f64;
        Pose {
            cy: self.center.0 + self.velocity.0 * t as f64,
            cx: self.center.1 + self.velocity.1 * t as f64,
            cos: a.cos(),
            sin: a.sin(),
            scale: (1.0 + self.scale_rate).powi(t as i32),
        }
    }

    /// Radius of a disc that bounds the shape in local units.
    fn bounding_radius(&self) -> f64 {
        match self.shape {
            ShapeKind::Disc => self.size,
            ShapeKind::Rect => {
                let a = self.aspect.max(1.0 / self.aspect);
                self.size * a * std::f64::consts::SQRT_2
            }
            ShapeKind::Triangle => self.size * 1.6,
        }
    }

    fn local_coords(&self, pose: &Pose, y: f64, x: f64) -> (f64, f64) {
        let dy = y - pose.cy;
        let dx = x - pose.cx;
        let qx = (pose.cos * dx + pose.sin * dy) / pose.scale;
        let qy = (-pose.sin * dx + pose.cos * dy) / pose.scale;
        (qy, qx)
    }

    fn contains(&self, pose: &Pose, y: f64, x: f64) -> bool {
        let (qy, qx) = self.local_coords(pose, y, x);
        let s = self.size;
        match self.shape {
            ShapeKind::Disc => qx * qx + qy * qy <= s * s,
            ShapeKind::Rect => qx.abs() <= s * self.aspect && qy.abs() <= s / self.aspect,
            ShapeKind::Triangle => {
                // Vertices chosen so the centroid sits at the origin, which
                // keeps spinning shapes from wobbling their mask centroid.
                let v = [(-1.2 * s, 0.0), (0.6 * s, 0.9 * s), (0.6 * s, -0.9 * s)];
                let side = |a: (f64, f64), b: (f64, f64)| -> f64 {
                    (b.1 - a.1) * (qy - a.0) - (b.0 - a.0) * (qx - a.1)
                };
                let d0 = side(v[0], v[1]);
                let d1 = side(v[1], v[2]);
                let d2 = side(v[2], v[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    /// Fraction of the pixel at (y, x) covered by the shape.
    fn coverage(&self, pose: &Pose, y: usize, x: usize) -> f64 {
        let n = SUPERSAMPLE;
        let mut hit = 0usize;
        for sy in 0..n {
            for sx in 0..n {
                let py = y as f64 + (sy as f64 + 0.5) / n as f64 - 0.5;
                let px = x as f64 + (sx as f64 + 0.5) / n as f64 - 0.5;
                if self.contains(pose, py, px) {
                    hit += 1;
                }
            }
        }
        hit as f64 / (n * n) as f64
    }

    /// Fraction of the shape's support that lies on the canvas at frame t,
    /// ignoring occlusion by other objects.
    pub fn visible_fraction(&self, t: usize, h: usize, w: usize) -> f64 {
        let pose = self.pose(t);
        let r = self.bounding_radius() * pose.scale + 1.0;
        let y0 = (pose.cy - r).floor() as i64;
        let y1 = (pose.cy + r).ceil() as i64;
        let x0 = (pose.cx - r).floor() as i64;
        let x1 = (pose.cx + r).ceil() as i64;
        let mut total = 0usize;
        let mut inside = 0usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(&pose, y as f64, x as f64) {
                    total += 1;
                    if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                        inside += 1;
                    }
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            inside as f64 / total as f64
        }
    }

    fn texel(&self, pose: &Pose, y: usize, x: usize) -> [f64; 3] {
        match self.texture {
            TextureKind::Flat => self.color,
            TextureKind::Speckle => {
                let mut c = self.color;
                for (ch, v) in c.iter_mut().enumerate() {
                    *v += self.noise_amp
                        * (2.0 * hash01(self.noise_seed, y as u64, x as u64, ch as u64) - 1.0);
                }
                c
            }
            TextureKind::Stripes => {
                let (_, qx) = self.local_coords(pose, y as f64, x as f64);
                let m = self.noise_amp * (std::f64::consts::PI * qx / (self.size * 0.5)).sin();
                [self.color[0] + m, self.color[1] + m, self.color[2] + m]
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BackgroundKind {
    Flat,
    Stripes,
    Checker,
    Gradient,
}

#[derive(Clone, Debug)]
pub struct Background {
    pub kind: BackgroundKind,
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub period: f64,
}

impl Background {
    fn color(&self, h: usize, w: usize, y: usize, x: usize) -> [f64; 3] {
        match self.kind {
            BackgroundKind::Flat => self.base,
            BackgroundKind::Stripes => {
                if ((y as f64 / self.period).floor() as i64) & 1 == 0 {
                    self.base
                } else {
                    self.accent
                }
            }
            BackgroundKind::Checker => {
                let p = ((y as f64 / self.period).floor() as i64
                    + (x as f64 / self.period).floor() as i64)
                    & 1;
                if p == 0 {
                    self.base
                } else {
                    self.accent
                }
            }
            BackgroundKind::Gradient => {
                let f = (y + x) as f64 / (h + w) as f64;
                [
                    self.base[0] + (self.accent[0] - self.base[0]) * f,
                    self.base[1] + (self.accent[1] - self.base[1]) * f,
                    self.base[2] + (self.accent[2] - self.base[2]) * f,
                ]
            }
        }
    }
}

/// Complete deterministic description of one clip.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
    /// True when all objects share one appearance and differ only in motion.
    pub confusion: bool,
    /// The sampling seed this spec was drawn from, recorded for manifests.
    pub seed: u64,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn hash01(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let z = splitmix64(
        seed ^ a.wrapping_mul(0xA0761D6478BD642F)
            ^ b.wrapping_mul(0xE7037ED1A0B428DB)
            ^ c.wrapping_mul(0x8EBC6AF09C88C6E3),
    );
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn render_frame(spec: &SceneSpec, t: usize) -> (Array3<f64>, Array2<u8>) {
    let (h, w) = (spec.height, spec.width);
    let mut img = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        spec.background.color(h, w, y, x)[c]
    });
    let mut lab = Array2::<u8>::zeros((h, w));
    for (i, obj) in spec.objects.iter().enumerate() {
        let pose = obj.pose(t);
        let r = obj.bounding_radius() * pose.scale + 1.0;
        let y0 = (pose.cy - r).floor().max(0.0) as usize;
        let y1 = ((pose.cy + r).ceil() as usize + 1).min(h);
        let x0 = (pose.cx - r).floor().max(0.0) as usize;
        let x1 = ((pose.cx + r).ceil() as usize + 1).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let a = obj.coverage(&pose, y, x);
                if a == 0.0 {
                    continue;
                }
                let c = obj.texel(&pose, y, x);
                for ch in 0..3 {
                    let v = img[(ch, y, x)];
                    img[(ch, y, x)] = ((1.0 - a) * v + a * c[ch]).clamp(0.0, 1.0);
                }
                if a > MASK_COVERAGE_THRESHOLD {
                    lab[(y, x)] = (i + 1) as u8;
                }
            }
        }
    }
    (img, lab)
}

/// Render the full clip. Deterministic: the same spec always produces
/// bitwise-identical frames and labels.
pub fn generate(spec: &SceneSpec) -> Clip {
    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let (img, lab) = render_frame(spec, t);
        frames.push(img);
        labels.push(lab);
    }
    Clip {
        id: spec.id.clone(),
        frames,
        labels,
        n_objects: spec.objects.len() as u8,
    }
}

/// Every (shape, texture) pairing the generator knows.
pub fn all_combos() -> Vec<(ShapeKind, TextureKind)> {
    let shapes = [ShapeKind::Disc, ShapeKind::Rect, ShapeKind::Triangle];
    let textures = [TextureKind::Flat, TextureKind::Speckle, TextureKind::Stripes];
    let mut out = Vec::new();
    for s in shapes {
        for t in textures {
            out.push((s, t));
        }
    }
    out
}

/// Pairings reserved for validation: one per shape and one per texture, so
/// both splits see every shape and every texture but never these pairings.
pub fn val_combos() -> Vec<(ShapeKind, TextureKind)> {
    vec![
        (ShapeKind::Disc, TextureKind::Stripes),
        (ShapeKind::Rect, TextureKind::Flat),
        (ShapeKind::Triangle, TextureKind::Speckle),
    ]
}

pub fn train_combos() -> Vec<(ShapeKind, TextureKind)> {
    let held = val_combos();
    all_combos().into_iter().filter(|c| !held.contains(c)).collect()
}

fn sample_background(rng: &mut ChaCha8Rng) -> Background {
    let kind = match rng.gen_range(0..4) {
        0 => BackgroundKind::Flat,
        1 => BackgroundKind::Stripes,
        2 => BackgroundKind::Checker,
        _ => BackgroundKind::Gradient,
    };
    let chan = |rng: &mut ChaCha8Rng| rng.gen_range(0.15..0.85);
    Background {
        kind,
        base: [chan(rng), chan(rng), chan(rng)],
        accent: [chan(rng), chan(rng), chan(rng)],
        period: rng.gen_range(5.0..12.0),
    }
}

fn sample_object(
    rng: &mut ChaCha8Rng,
    size_px: usize,
    combo: (ShapeKind, TextureKind),
) -> ObjectSpec {
    let s = size_px as f64;
    let (shape, texture) = combo;
    let chan = |rng: &mut ChaCha8Rng| rng.gen_range(0.2..0.8);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.5..MAX_SPEED);
    ObjectSpec {
        shape,
        texture,
        color: [chan(rng), chan(rng), chan(rng)],
        size: rng.gen_range(0.09 * s..0.16 * s),
        aspect: if shape == ShapeKind::Rect {
            rng.gen_range(1.2..1.8)
        } else {
            1.0
        },
        center: (rng.gen_range(0.25 * s..0.75 * s), rng.gen_range(0.25 * s..0.75 * s)),
        velocity: (speed * dir.sin(), speed * dir.cos()),
        angle: rng.gen_range(0.0..std::f64::consts::TAU),
        spin: if shape == ShapeKind::Disc {
            0.0
        } else {
            rng.gen_range(-0.08..0.08)
        },
        scale_rate: rng.gen_range(-0.02..0.02),
        noise_amp: match texture {
            TextureKind::Flat => 0.0,
            TextureKind::Speckle => rng.gen_range(0.05..0.12),
            TextureKind::Stripes => rng.gen_range(0.08..0.15),
        },
        noise_seed: rng.gen(),
    }
}

fn feasible(spec: &SceneSpec) -> bool {
    for obj in &spec.objects {
        for t in 0..spec.frames {
            if obj.visible_fraction(t, spec.height, spec.width) < MIN_VISIBLE_FRACTION {
                return false;
            }
        }
    }
    // Every object must own at least one pixel in frame 0, where inference
    // receives its ground truth.
    let (_, lab) = render_frame(spec, 0);
    (1..=spec.objects.len() as u8).all(|id| lab.iter().any(|&v| v == id))
}

/// Draw a feasible scene. Trajectories that drift too far off canvas or
/// start fully occluded are rejected and redrawn, bounded; the last resort
/// is a static, evenly spaced arrangement that is feasible by construction.
pub fn sample_spec(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    id: &str,
    combos: &[(ShapeKind, TextureKind)],
    seed: u64,
) -> SceneSpec {
    assert!(!combos.is_empty());
    let lo = cfg.min_objects.max(1);
    let hi = cfg.max_objects.max(lo);
    let n = rng.gen_range(lo..=hi);
    let confusion = n >= 2 && cfg.confusion_prob > 0.0 && rng.gen_bool(cfg.confusion_prob.min(1.0));
    let background = sample_background(rng);

    for _ in 0..SPEC_RETRIES {
        let objects: Vec<ObjectSpec> = if confusion {
            let combo = combos[rng.gen_range(0..combos.len())];
            let template = sample_object(rng, cfg.size, combo);
            (0..n)
                .map(|_| {
                    let mut o = template.clone();
                    let fresh = sample_object(rng, cfg.size, (o.shape, o.texture));
                    o.center = fresh.center;
                    o.velocity = fresh.velocity;
                    o.angle = fresh.angle;
                    o.spin = fresh.spin;
                    o.scale_rate = fresh.scale_rate;
                    o
                })
                .collect()
        } else {
            (0..n)
                .map(|_| {
                    let combo = combos[rng.gen_range(0..combos.len())];
                    sample_object(rng, cfg.size, combo)
                })
                .collect()
        };
        let spec = SceneSpec {
            id: id.to_string(),
            height: cfg.size,
            width: cfg.size,
            frames: cfg.frames,
            objects,
            background: background.clone(),
            confusion,
            seed,
        };
        if feasible(&spec) {
            return spec;
        }
    }

    // Static fallback: evenly spaced, no motion, no occlusion.
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let mut o = sample_object(rng, cfg.size, combos[i % combos.len()]);
        o.center = (
            cfg.size as f64 / 2.0,
            cfg.size as f64 * (i as f64 + 1.0) / (n as f64 + 1.0),
        );
        o.velocity = (0.0, 0.0);
        o.spin = 0.0;
        o.scale_rate = 0.0;
        o.size = o.size.min(cfg.size as f64 / (3.0 * n as f64));
        objects.push(o);
    }
    SceneSpec {
        id: id.to_string(),
        height: cfg.size,
        width: cfg.size,
        frames: cfg.frames,
        objects,
        background,
        confusion: false,
        seed,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
}

/// Seed of one clip's private RNG stream, a pure function of the benchmark
/// seed, the split, and the clip index.
pub fn clip_seed(benchmark_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2u64,
    };
    splitmix64(benchmark_seed ^ (tag << 40) ^ index as u64)
}

/// Build one clip of the benchmark. Clips are independent: regenerating any
/// index reproduces it bitwise without touching the others.
pub fn make_clip(cfg: &SynthConfig, split: Split, index: usize) -> (SceneSpec, Clip) {
    let seed = clip_seed(cfg.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (prefix, combos) = match split {
        Split::Train => ("train", train_combos()),
        Split::Val => ("val", val_combos()),
    };
    let id = format!("{prefix}_{index:03}");
    let spec = sample_spec(&mut rng, cfg, &id, &combos, seed);
    let clip = generate(&spec);
    (spec, clip)
}

pub struct Benchmark {
    pub data: Dataset,
    pub train_specs: Vec<SceneSpec>,
    pub val_specs: Vec<SceneSpec>,
    pub manifest: String,
}

fn manifest_line(split: Split, spec: &SceneSpec) -> String {
    let split = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let combos = spec
        .objects
        .iter()
        .map(|o| format!("{}/{}", shape_name(o.shape), texture_name(o.texture)))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{split} {} seed={} frames={} objects={} combos={combos} confusion={}",
        spec.id,
        spec.seed,
        spec.frames,
        spec.objects.len(),
        u8::from(spec.confusion),
    )
}

/// Generate the full train/val benchmark plus a plain-text manifest that
/// records each clip's seed and content summary.
pub fn make_benchmark(cfg: &SynthConfig) -> Benchmark {
    let mut train = Vec::with_capacity(cfg.train_clips);
    let mut train_specs = Vec::with_capacity(cfg.train_clips);
    let mut val = Vec::with_capacity(cfg.val_clips);
    let mut val_specs = Vec::with_capacity(cfg.val_clips);
    let mut manifest = format!(
        "# synthetic benchmark: seed={} size={} frames={} objects={}..{} confusion_prob={}\n",
        cfg.seed, cfg.size, cfg.frames, cfg.min_objects, cfg.max_objects, cfg.confusion_prob
    );
    for i in 0..cfg.train_clips {
        let (spec, clip) = make_clip(cfg, Split::Train, i);
        manifest.push_str(&manifest_line(Split::Train, &spec));
        manifest.push('\n');
        train_specs.push(spec);
        train.push(clip);
    }
    for i in 0..cfg.val_clips {
        let (spec, clip) = make_clip(cfg, Split::Val, i);
        manifest.push_str(&manifest_line(Split::Val, &spec));
        manifest.push('\n');
        val_specs.push(spec);
        val.push(clip);
    }
    Benchmark {
        data: Dataset { train, val },
        train_specs,
        val_specs,
        manifest,
    }
}

// ---------------------------------------------------------------------------
// On-disk layout: per-video directories of numbered frame images and
// numbered indexed-palette masks, plus a manifest at the root.

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> VosError + '_ {
    move |e| VosError::io(path.display().to_string(), e)
}

/// Write one clip under `root`: frames to `frames/<id>/%05d.png`, label maps
/// to `masks/<id>/%05d.png`.
pub fn write_clip_dirs(root: &Path, clip: &Clip) -> Result<()> {
    let fdir = root.join("frames").join(&clip.id);
    let mdir = root.join("masks").join(&clip.id);
    fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
    fs::create_dir_all(&mdir).map_err(io_err(&mdir))?;
    for t in 0..clip.frames.len() {
        write_rgb_png(&fdir.join(format!("{t:05}.png")), &clip.frames[t])?;
        write_mask_png(&mdir.join(format!("{t:05}.png")), &clip.labels[t], clip.n_objects)?;
    }
    Ok(())
}

/// Write the whole benchmark plus its manifest: `train/` and `val/`
/// subtrees, each holding `frames/<id>/` and `masks/<id>/`.
pub fn write_benchmark_layout(root: &Path, bench: &Benchmark) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    fs::write(root.join("manifest.txt"), &bench.manifest).map_err(io_err(root))?;
    for clip in &bench.data.train {
        write_clip_dirs(&root.join("train"), clip)?;
    }
    for clip in &bench.data.val {
        write_clip_dirs(&root.join("val"), clip)?;
    }
    Ok(())
}

/// Numbered PNG files in one directory, sorted by name.
pub fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|e| e == "png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Read one clip back from the layout written by `write_clip_dirs`. The
/// object count comes from the first mask's palette.
pub fn read_clip_dir(root: &Path, id: &str) -> Result<Clip> {
    let fdir = root.join("frames").join(id);
    let mdir = root.join("masks").join(id);
    let frame_files = sorted_pngs(&fdir)?;
    let mask_files = sorted_pngs(&mdir)?;
    if frame_files.is_empty() || frame_files.len() != mask_files.len() {
        return Err(VosError::Dataset(format!(
            "clip `{id}`: {} frames but {} masks",
            frame_files.len(),
            mask_files.len()
        )));
    }
    let mut frames = Vec::with_capacity(frame_files.len());
    for p in &frame_files {
        frames.push(read_rgb_png(p)?);
    }
    let mut labels = Vec::with_capacity(mask_files.len());
    let mut n_objects = 0u8;
    for (i, p) in mask_files.iter().enumerate() {
        let (lab, n) = read_mask_png(p)?;
        if i == 0 {
            n_objects = n;
        }
        labels.push(lab);
    }
    let clip = Clip {
        id: id.to_string(),
        frames,
        labels,
        n_objects,
    };
    clip.validate()?;
    Ok(clip)
}
