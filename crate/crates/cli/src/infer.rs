//! `vos infer`: segment videos from a checkpoint. Input follows the usual
//! VOS layout — `frames/<id>/*.png` plus the first-frame ground truth in
//! `masks/<id>/`. Outputs are indexed-palette masks, an optional overlay
//! render, and a per-frame timing CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use ndarray::{Array2, Array3};
use vos_core::evaluation::{palette_color, read_mask_png, read_rgb_png, write_mask_png, write_rgb_png};
use vos_core::inference::{init_session_from_labels, step};
use vos_core::synth::sorted_pngs;
use vos_core::training::{load_model, read_checkpoint};

use crate::setup::out_root;

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    /// Video root containing `frames/<id>/` and `masks/<id>/`.
    #[arg(long, value_name = "DIR")]
    pub video: PathBuf,

    /// Segment only these clip ids (default: every directory under frames/).
    #[arg(long)]
    pub id: Vec<String>,

    /// Reference policy: first | prev | first+prev | every:K. Defaults to
    /// the policy stored in the checkpoint config.
    #[arg(long)]
    pub refs: Option<String>,

    /// Also write frame/mask blend images for eyeballing.
    #[arg(long)]
    pub overlay: bool,

    /// Output directory; defaults to `$VOS_OUT_ROOT/infer` or `runs/infer`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(a: InferArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)
        .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let (model, store, mut cfg) = load_model(&ck)?;
    let mut prov = format!("# checkpoint: {}\n", a.checkpoint.display());
    if let Some(r) = &a.refs {
        cfg.infer.refs = r
            .parse()
            .map_err(|e: String| anyhow::anyhow!("--refs: {e}"))?;
        prov.push_str(&format!("# override: infer.refs = {}\n", cfg.infer.refs));
    }
    let out = a.out.clone().unwrap_or_else(|| out_root().join("infer"));
    crate::setup::write_provenance(&out, &cfg, &prov)?;

    let frames_root = a.video.join("frames");
    let ids = if a.id.is_empty() {
        list_dirs(&frames_root)?
    } else {
        a.id.clone()
    };
    if ids.is_empty() {
        bail!("no videos found under {}", frames_root.display());
    }

    let mut timing = String::from("video,frame,seconds,references,tokens\n");
    for id in &ids {
        let frames = read_frames(&frames_root.join(id))?;
        let (labels0, n_objects) = first_mask(&a.video.join("masks").join(id))?;

        let mask_dir = out.join("masks").join(id);
        fs::create_dir_all(&mask_dir)?;
        write_mask_png(&mask_dir.join("00000.png"), &labels0, n_objects)?;
        let overlay_dir = out.join("overlay").join(id);
        if a.overlay {
            fs::create_dir_all(&overlay_dir)?;
            write_rgb_png(&overlay_dir.join("00000.png"), &blend(&frames[0], &labels0))?;
        }

        let mut state = init_session_from_labels(&frames[0], &labels0, n_objects, cfg.infer.refs)?;
        let mut secs = 0.0;
        for (t, frame) in frames.iter().enumerate().skip(1) {
            let begin = Instant::now();
            let s = step(&mut state, &model, &store, frame)?;
            let dt = begin.elapsed().as_secs_f64();
            secs += dt;
            timing.push_str(&format!(
                "{id},{t},{dt},{},{}\n",
                s.reference_frames, s.tokens
            ));
            write_mask_png(&mask_dir.join(format!("{t:05}.png")), &s.labels, n_objects)?;
            if a.overlay {
                write_rgb_png(
                    &overlay_dir.join(format!("{t:05}.png")),
                    &blend(frame, &s.labels),
                )?;
            }
        }
        let n = frames.len() - 1;
        println!(
            "{id}: {n} frames segmented, {:.2} s/frame ({:.2} fps)",
            secs / n.max(1) as f64,
            n as f64 / secs
        );
    }
    let timing_path = out.join("timing.csv");
    fs::write(&timing_path, timing)?;
    println!("masks under {}", out.join("masks").display());
    println!("timing:     {}", timing_path.display());
    Ok(())
}

fn list_dirs(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in
        fs::read_dir(root).with_context(|| format!("listing {}", root.display()))?
    {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn read_frames(dir: &Path) -> Result<Vec<Array3<f64>>> {
    let paths = sorted_pngs(dir)?;
    if paths.is_empty() {
        bail!("no frames under {}", dir.display());
    }
    paths.iter().map(|p| Ok(read_rgb_png(p)?)).collect()
}

/// Ground truth for frame 0: the first mask file in the directory. Extra
/// mask files (densely annotated data) are ignored.
fn first_mask(dir: &Path) -> Result<(Array2<u8>, u8)> {
    let paths = sorted_pngs(dir)?;
    match paths.first() {
        Some(p) => Ok(read_mask_png(p)?),
        None => bail!("no ground-truth mask under {}", dir.display()),
    }
}

fn blend(frame: &Array3<f64>, labels: &Array2<u8>) -> Array3<f64> {
    let (_, h, w) = frame.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let id = labels[(y, x)];
        if id == 0 {
            frame[(c, y, x)]
        } else {
            0.55 * frame[(c, y, x)] + 0.45 * palette_color(id)[c] as f64 / 255.0
        }
    })
}
