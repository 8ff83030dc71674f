//! Region and boundary quality metrics with mean/recall/decay summaries,
//! plus the indexed-palette mask codec used for on-disk label maps.
//!
//! The boundary measure extracts one-pixel contours (4-connectivity), then
//! matches them within a pixel tolerance using an exact Euclidean distance
//! transform. Tolerance defaults to a fraction of the image diagonal.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::config::EvalConfig;
use crate::error::{Result, VosError};

/// Binary mask of one object id inside a label map.
pub fn label_mask(labels: &Array2<u8>, id: u8) -> Array2<bool> {
    labels.mapv(|v| v == id)
}

/// Region similarity: intersection over union. Two empty masks count as a
/// perfect match.
pub fn jaccard(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "jaccard needs equal shapes");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One-pixel contour: a foreground pixel on the image border or with a
/// 4-neighbor outside the mask.
pub fn boundary(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[(y, x)] {
            return false;
        }
        y == 0
            || x == 0
            || y == h - 1
            || x == w - 1
            || !mask[(y - 1, x)]
            || !mask[(y + 1, x)]
            || !mask[(y, x - 1)]
            || !mask[(y, x + 1)]
    })
}

const FAR: f64 = 1e18;

/// Lower envelope of parabolas: exact 1D squared-distance transform.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -FAR;
    z[1] = FAR;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s > z[k] {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = FAR;
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest true pixel; `FAR` when
/// the mask is empty.
pub fn distance_sq(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut d = Array2::from_shape_fn((h, w), |(y, x)| if mask[(y, x)] { 0.0 } else { FAR });
    // Columns first, then rows; the transform is separable.
    let mut col = vec![0.0f64; h];
    let mut out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = d[(y, x)];
        }
        edt_1d(&col, &mut out);
        for y in 0..h {
            d[(y, x)] = out[y];
        }
    }
    let mut row = vec![0.0f64; w];
    let mut out = vec![0.0f64; w];
    for y in 0..h {
        for x in 0..w {
            row[x] = d[(y, x)];
        }
        edt_1d(&row, &mut out);
        for x in 0..w {
            d[(y, x)] = out[x];
        }
    }
    d
}

/// Contour quality: F-measure of boundary precision and recall, where a
/// boundary pixel matches when some counterpart boundary pixel lies within
/// `tol` (Euclidean). Both boundaries empty is a perfect score.
pub fn boundary_f(pred: &Array2<bool>, gt: &Array2<bool>, tol: f64) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "boundary_f needs equal shapes");
    assert!(tol >= 0.0);
    let bp = boundary(pred);
    let bg = boundary(gt);
    let np = bp.iter().filter(|&&v| v).count();
    let ng = bg.iter().filter(|&&v| v).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let t2 = tol * tol;
    let dg = distance_sq(&bg);
    let dp = distance_sq(&bp);
    let mut hit_p = 0usize;
    let mut hit_g = 0usize;
    for ((y, x), &v) in bp.indexed_iter() {
        if v && dg[(y, x)] <= t2 {
            hit_p += 1;
        }
    }
    for ((y, x), &v) in bg.indexed_iter() {
        if v && dp[(y, x)] <= t2 {
            hit_g += 1;
        }
    }
    let p = hit_p as f64 / np as f64;
    let r = hit_g as f64 / ng as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Boundary tolerance in pixels for an image size, as a fraction of the
/// diagonal, never below one pixel.
pub fn boundary_tolerance(cfg: &EvalConfig, h: usize, w: usize) -> f64 {
    let diag = ((h * h + w * w) as f64).sqrt();
    (cfg.boundary_tol_frac * diag).ceil().max(1.0)
}

/// Mean / recall / decay summary of one per-frame metric series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesStats {
    pub mean: f64,
    /// Fraction of frames strictly above the recall threshold.
    pub recall: f64,
    /// Drop from the first temporal quartile's mean to the last's. Series
    /// shorter than 4 frames use first minus last value.
    pub decay: f64,
}

impl SeriesStats {
    pub fn from_series(series: &[f64], recall_threshold: f64) -> SeriesStats {
        let n = series.len();
        assert!(n > 0, "cannot summarize an empty series");
        let mean = series.iter().sum::<f64>() / n as f64;
        let recall = series.iter().filter(|&&v| v > recall_threshold).count() as f64 / n as f64;
        let decay = if n >= 4 {
            let chunk_mean = |k: usize| -> f64 {
                let a = k * n / 4;
                let b = (k + 1) * n / 4;
                series[a..b].iter().sum::<f64>() / (b - a) as f64
            };
            chunk_mean(0) - chunk_mean(3)
        } else {
            series[0] - series[n - 1]
        };
        SeriesStats { mean, recall, decay }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectReport {
    pub object: u8,
    pub j: SeriesStats,
    pub f: SeriesStats,
    pub j_series: Vec<f64>,
    pub f_series: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SequenceReport {
    pub objects: Vec<ObjectReport>,
    pub j_mean: f64,
    pub f_mean: f64,
    /// (j_mean + f_mean) / 2.
    pub jf: f64,
}

/// Score a predicted label sequence against ground truth. Both lists include
/// frame 0, which is skipped: it is the given input, not a prediction.
pub fn evaluate_sequence(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    n_objects: u8,
    cfg: &EvalConfig,
) -> Result<SequenceReport> {
    if preds.len() != gts.len() {
        return Err(VosError::Dataset(format!(
            "prediction/ground-truth length mismatch: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    if preds.len() < 2 {
        return Err(VosError::Dataset(
            "need at least two frames to evaluate (frame 0 is input)".into(),
        ));
    }
    assert!(n_objects >= 1);
    let (h, w) = gts[0].dim();
    let tol = boundary_tolerance(cfg, h, w);

    let mut objects = Vec::with_capacity(n_objects as usize);
    for id in 1..=n_objects {
        let mut j_series = Vec::with_capacity(preds.len() - 1);
        let mut f_series = Vec::with_capacity(preds.len() - 1);
        for t in 1..preds.len() {
            if preds[t].dim() != gts[t].dim() {
                return Err(VosError::Dataset(format!(
                    "frame {t}: prediction shape {:?} vs ground truth {:?}",
                    preds[t].dim(),
                    gts[t].dim()
                )));
            }
            let pm = label_mask(&preds[t], id);
            let gm = label_mask(&gts[t], id);
            j_series.push(jaccard(&pm, &gm));
            f_series.push(boundary_f(&pm, &gm, tol));
        }
        objects.push(ObjectReport {
            object: id,
            j: SeriesStats::from_series(&j_series, cfg.recall_threshold),
            f: SeriesStats::from_series(&f_series, cfg.recall_threshold),
            j_series,
            f_series,
        });
    }
    let j_mean = objects.iter().map(|o| o.j.mean).sum::<f64>() / objects.len() as f64;
    let f_mean = objects.iter().map(|o| o.f.mean).sum::<f64>() / objects.len() as f64;
    Ok(SequenceReport {
        objects,
        j_mean,
        f_mean,
        jf: (j_mean + f_mean) / 2.0,
    })
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub videos: Vec<(String, SequenceReport)>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf: f64,
}

/// Aggregate per-video reports: per-object means within a video, then an
/// unweighted mean across videos.
pub fn aggregate(videos: Vec<(String, SequenceReport)>) -> BenchmarkReport {
    assert!(!videos.is_empty());
    let j_mean = videos.iter().map(|(_, r)| r.j_mean).sum::<f64>() / videos.len() as f64;
    let f_mean = videos.iter().map(|(_, r)| r.f_mean).sum::<f64>() / videos.len() as f64;
    BenchmarkReport {
        videos,
        j_mean,
        f_mean,
        jf: (j_mean + f_mean) / 2.0,
    }
}

/// Render a report as CSV: one row per (video, object), then per-video and
/// global summary rows.
pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut out =
        String::from("video,object,j_mean,j_recall,j_decay,f_mean,f_recall,f_decay,jf\n");
    for (name, seq) in &report.videos {
        for o in &seq.objects {
            out.push_str(&format!(
                "{name},{},{},{},{},{},{},{},{}\n",
                o.object,
                o.j.mean,
                o.j.recall,
                o.j.decay,
                o.f.mean,
                o.f.recall,
                o.f.decay,
                (o.j.mean + o.f.mean) / 2.0
            ));
        }
        out.push_str(&format!(
            "{name},all,{},,,{},,,{}\n",
            seq.j_mean, seq.f_mean, seq.jf
        ));
    }
    out.push_str(&format!(
        "GLOBAL,all,{},,,{},,,{}\n",
        report.j_mean, report.f_mean, report.jf
    ));
    out
}

// ---------------------------------------------------------------------------
// Indexed-palette mask codec and frame image IO.

/// Standard segmentation palette color for an object id: each of the id's
/// bit triples contributes one bit to each channel, high bits first.
pub fn palette_color(id: u8) -> [u8; 3] {
    let mut c = [0u8; 3];
    let mut v = id;
    for shift in 0..8 {
        for ch in 0..3 {
            c[ch] |= ((v >> ch) & 1) << (7 - shift);
        }
        v >>= 3;
    }
    c
}

fn palette_bytes(n_objects: u8) -> Vec<u8> {
    let mut p = Vec::with_capacity(3 * (n_objects as usize + 1));
    for id in 0..=n_objects {
        p.extend_from_slice(&palette_color(id));
    }
    p
}

/// Write a label map as an 8-bit indexed PNG whose palette has exactly
/// `n_objects + 1` entries.
pub fn write_mask_png(path: &Path, labels: &Array2<u8>, n_objects: u8) -> Result<()> {
    let io = |e: std::io::Error| VosError::io(path.display().to_string(), e);
    let codec =
        |e: png::EncodingError| VosError::MaskCodec(format!("{}: {e}", path.display()));
    for &v in labels.iter() {
        if v > n_objects {
            return Err(VosError::MaskCodec(format!(
                "label {v} exceeds object count {n_objects}"
            )));
        }
    }
    let (h, w) = labels.dim();
    let file = File::create(path).map_err(io)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette_bytes(n_objects));
    let mut writer = enc.write_header().map_err(codec)?;
    let data: Vec<u8> = labels.iter().copied().collect();
    writer.write_image_data(&data).map_err(codec)?;
    Ok(())
}

/// Read an indexed PNG back into a label map. Returns the labels and the
/// object count implied by the palette. Non-indexed files and pixel values
/// outside the palette are rejected.
pub fn read_mask_png(path: &Path) -> Result<(Array2<u8>, u8)> {
    let io = |e: std::io::Error| VosError::io(path.display().to_string(), e);
    let codec = |m: String| VosError::MaskCodec(format!("{}: {m}", path.display()));
    let file = File::open(path).map_err(io)?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| codec(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(codec("not an 8-bit indexed image".into()));
    }
    let palette_len = match &info.palette {
        Some(p) => p.len() / 3,
        None => return Err(codec("indexed image without a palette".into())),
    };
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| codec(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let data = &buf[..frame.buffer_size()];
    for &v in data {
        if v as usize >= palette_len {
            return Err(codec(format!(
                "pixel value {v} outside the {palette_len}-entry palette"
            )));
        }
    }
    if palette_len == 0 || palette_len > 256 {
        return Err(codec(format!("palette of {palette_len} entries")));
    }
    let labels =
        Array2::from_shape_vec((h, w), data.to_vec()).map_err(|e| codec(e.to_string()))?;
    Ok((labels, (palette_len - 1) as u8))
}

/// Write a (3, H, W) image with channels in [0, 1] as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let io = |e: std::io::Error| VosError::io(path.display().to_string(), e);
    let codec =
        |e: png::EncodingError| VosError::MaskCodec(format!("{}: {e}", path.display()));
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "expected a (3, H, W) image");
    let file = File::create(path).map_err(io)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(codec)?;
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data.push((img[(ch, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    writer.write_image_data(&data).map_err(codec)?;
    Ok(())
}

/// Read an 8-bit RGB PNG into a (3, H, W) array with channels in [0, 1].
pub fn read_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let io = |e: std::io::Error| VosError::io(path.display().to_string(), e);
    let codec = |m: String| VosError::MaskCodec(format!("{}: {m}", path.display()));
    let file = File::open(path).map_err(io)?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| codec(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(codec("not an 8-bit RGB image".into()));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| codec(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let data = &buf[..frame.buffer_size()];
    let img = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        data[3 * (y * w + x) + c] as f64 / 255.0
    });
    Ok(img)
}
