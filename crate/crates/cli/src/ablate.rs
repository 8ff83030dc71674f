//! `vos ablate`: train and score configuration variants along one axis,
//! holding everything else (data, schedule, sizes) fixed.

use std::fs;

use anyhow::Result;
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vos_core::config::ReferencePolicy;
use vos_core::model::VosModel;
use vos_core::synth::make_benchmark;
use vos_core::{Dataset, MaskFusion, ParamStore, RunConfig, Trainer};

use crate::score::score_clips;
use crate::setup::{write_provenance, ConfigArgs};

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum Axis {
    /// How reference masks enter the extractor: multiply, residual, two-path.
    MaskUtilization,
    /// Which past frames the inference loop conditions on.
    ReferenceSets,
    /// Learned target query versus mean-pooled encoder features.
    Decoder,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Which configuration axis to sweep.
    #[arg(long, value_enum)]
    pub axis: Axis,

    /// Independent training runs per variant; scores are averaged.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,

    #[command(flatten)]
    pub cfg: ConfigArgs,
}

struct Row {
    variant: String,
    seed: u64,
    j: f64,
    f: f64,
    fps: f64,
}

pub fn run(a: AblateArgs) -> Result<()> {
    let (cfg, prov) = a.cfg.resolve()?;
    let out = a.cfg.out_dir("ablate");
    write_provenance(&out, &cfg, &prov)?;

    let bench = make_benchmark(&cfg.synth);
    let rows = match a.axis {
        Axis::MaskUtilization => sweep_model_variants(
            &cfg,
            &bench.data,
            a.seeds,
            &[
                ("multiply", MaskFusion::Multiply),
                ("residual", MaskFusion::Residual),
                ("two_path", MaskFusion::TwoPath),
            ],
            |cfg, &fusion| cfg.model.mask_fusion = fusion,
        )?,
        Axis::Decoder => sweep_model_variants(
            &cfg,
            &bench.data,
            a.seeds,
            &[("without_decoder", false), ("with_decoder", true)],
            |cfg, &on| cfg.model.use_decoder = on,
        )?,
        Axis::ReferenceSets => sweep_reference_sets(&cfg, &bench.data, a.seeds)?,
    };

    let mut csv = String::from("variant,seed,j,f,jf,fps\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            r.j,
            r.f,
            (r.j + r.f) / 2.0,
            r.fps
        ));
    }
    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, csv)?;

    println!("{:<18} {:>7} {:>7} {:>7} {:>8}", "variant", "J", "F", "J&F", "fps");
    let mut seen = Vec::new();
    for r in &rows {
        if !seen.contains(&r.variant) {
            seen.push(r.variant.clone());
        }
    }
    for v in &seen {
        let of_v: Vec<&Row> = rows.iter().filter(|r| &r.variant == v).collect();
        let n = of_v.len() as f64;
        let j = of_v.iter().map(|r| r.j).sum::<f64>() / n;
        let f = of_v.iter().map(|r| r.f).sum::<f64>() / n;
        let fps = of_v.iter().map(|r| r.fps).sum::<f64>() / n;
        println!("{v:<18} {j:>7.4} {f:>7.4} {:>7.4} {fps:>8.2}", (j + f) / 2.0);
    }
    println!("rows: {}", csv_path.display());
    Ok(())
}

fn train_model(cfg: &RunConfig, data: &Dataset) -> Result<(VosModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = VosModel::register(&mut store, &mut rng, &cfg.model);
    let mut trainer = Trainer::new(&model, cfg.train.clone());
    trainer.run(&mut store, data, None, None)?;
    Ok((model, store))
}

/// Train one model per (variant, seed) and score it on the validation split.
fn sweep_model_variants<V>(
    base: &RunConfig,
    data: &Dataset,
    seeds: u64,
    variants: &[(&str, V)],
    apply: impl Fn(&mut RunConfig, &V),
) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (name, v) in variants {
        for s in 0..seeds {
            let mut cfg = base.clone();
            apply(&mut cfg, v);
            cfg.train.seed = base.train.seed + s;
            cfg.model.validate()?;
            let (model, store) = train_model(&cfg, data)?;
            let score = score_clips(&model, &store, &data.val, cfg.infer.refs, &cfg.eval)?;
            println!(
                "trained {name} (seed {}): J&F {:.4}",
                cfg.train.seed,
                score.jf()
            );
            rows.push(Row {
                variant: name.to_string(),
                seed: cfg.train.seed,
                j: score.j,
                f: score.f,
                fps: score.fps,
            });
        }
    }
    Ok(rows)
}

/// Train one base model per seed, then score every reference policy on it;
/// the policies differ only at inference time.
fn sweep_reference_sets(base: &RunConfig, data: &Dataset, seeds: u64) -> Result<Vec<Row>> {
    let policies = [
        ("first", ReferencePolicy::FirstOnly),
        ("prev", ReferencePolicy::PreviousOnly),
        ("first+prev", ReferencePolicy::FirstAndPrevious),
        ("every:5", ReferencePolicy::EveryK(5)),
    ];
    let mut rows = Vec::new();
    for s in 0..seeds {
        let mut cfg = base.clone();
        cfg.train.seed = base.train.seed + s;
        let (model, store) = train_model(&cfg, data)?;
        for (name, policy) in policies {
            let score = score_clips(&model, &store, &data.val, policy, &cfg.eval)?;
            println!(
                "policy {name} (seed {}): J&F {:.4}, {:.2} fps",
                cfg.train.seed,
                score.jf(),
                score.fps
            );
            rows.push(Row {
                variant: name.to_string(),
                seed: cfg.train.seed,
                j: score.j,
                f: score.f,
                fps: score.fps,
            });
        }
    }
    Ok(rows)
}
