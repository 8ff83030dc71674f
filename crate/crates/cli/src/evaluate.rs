//! `vos eval`: score predicted mask sequences against ground truth and emit
//! a CSV report plus a console table. Any structural problem (missing video,
//! frame-count mismatch, unreadable mask) is a hard error and a nonzero exit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ndarray::Array2;
use vos_core::evaluation::{aggregate, evaluate_sequence, read_mask_png, report_csv};
use vos_core::synth::sorted_pngs;

use crate::setup::{write_provenance, ConfigArgs};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted masks: `<root>/<id>/%05d.png`, or the same under `masks/`.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,

    /// Ground truth in the same layout.
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,

    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(a: EvalArgs) -> Result<()> {
    let (cfg, prov) = a.cfg.resolve()?;
    let out = a.cfg.out_dir("eval");
    write_provenance(&out, &cfg, &prov)?;

    let gt_root = mask_root(&a.gt);
    let pred_root = mask_root(&a.pred);
    let ids = video_ids(&gt_root)?;
    if ids.is_empty() {
        bail!("no ground-truth videos under {}", gt_root.display());
    }

    let mut videos = Vec::new();
    for id in &ids {
        let (gt, n_objects) = read_sequence(&gt_root.join(id))?;
        let pred_dir = pred_root.join(id);
        if !pred_dir.is_dir() {
            bail!("no predictions for video `{id}` under {}", pred_root.display());
        }
        let (pred, _) = read_sequence(&pred_dir)?;
        let rep = evaluate_sequence(&pred, &gt, n_objects, &cfg.eval)
            .with_context(|| format!("scoring video `{id}`"))?;
        videos.push((id.clone(), rep));
    }
    let report = aggregate(videos);

    let csv_path = out.join("report.csv");
    fs::write(&csv_path, report_csv(&report))?;

    println!("{:<14} {:>7} {:>7} {:>7}", "video", "J", "F", "J&F");
    for (name, seq) in &report.videos {
        println!(
            "{name:<14} {:>7.4} {:>7.4} {:>7.4}",
            seq.j_mean, seq.f_mean, seq.jf
        );
    }
    println!(
        "{:<14} {:>7.4} {:>7.4} {:>7.4}",
        "GLOBAL", report.j_mean, report.f_mean, report.jf
    );
    println!("report: {}", csv_path.display());
    Ok(())
}

/// Accept either a data root (with a `masks/` child) or the masks directory
/// itself.
fn mask_root(dir: &Path) -> PathBuf {
    let nested = dir.join("masks");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn video_ids(root: &Path) -> Result<Vec<String>> {
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

/// Load all masks of a video; the object count comes from the first frame's
/// palette.
fn read_sequence(dir: &Path) -> Result<(Vec<Array2<u8>>, u8)> {
    let paths = sorted_pngs(dir)?;
    if paths.is_empty() {
        bail!("no mask files under {}", dir.display());
    }
    let mut n_objects = 0;
    let mut masks = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let (labels, n) = read_mask_png(p)?;
        if i == 0 {
            n_objects = n;
        }
        masks.push(labels);
    }
    Ok((masks, n_objects))
}
