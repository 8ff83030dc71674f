//! `vos train`: two-stage training on the synthetic benchmark, with metrics
//! CSV, validation scoring, and a resumable checkpoint.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vos_core::model::VosModel;
use vos_core::synth::make_benchmark;
use vos_core::training::{read_checkpoint, write_checkpoint};
use vos_core::{ParamStore, Trainer};

use crate::score::score_clips;
use crate::setup::{write_provenance, ConfigArgs};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,

    /// Continue from an earlier checkpoint instead of fresh weights. The
    /// checkpoint's model shape must match the resolved config.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

pub fn run(a: TrainArgs) -> Result<()> {
    let (cfg, prov) = a.cfg.resolve()?;
    let out = a.cfg.out_dir("train");
    write_provenance(&out, &cfg, &prov)?;

    let bench = make_benchmark(&cfg.synth);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = VosModel::register(&mut store, &mut rng, &cfg.model);
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = read_checkpoint(p)
                .with_context(|| format!("reading checkpoint {}", p.display()))?;
            Trainer::restore(&model, &ck, &mut store)?
        }
        None => Trainer::new(&model, cfg.train.clone()),
    };
    println!(
        "training {} trainable parameters for {} steps ({} train / {} val clips)",
        store.n_trainable(),
        trainer.total_steps(),
        bench.data.train.len(),
        bench.data.val.len()
    );

    let policy = cfg.infer.refs;
    let eval_cfg = cfg.eval.clone();
    let val_clips = &bench.data.val;
    let mut validate = |store: &ParamStore, step: u64| -> (f64, f64) {
        let s = score_clips(&model, store, val_clips, policy, &eval_cfg)
            .expect("validation clips must be scorable");
        println!(
            "step {step}: val J {:.4}  F {:.4}  J&F {:.4}",
            s.j,
            s.f,
            s.jf()
        );
        (s.j, s.f)
    };

    let metrics = out.join("metrics.csv");
    let history = trainer.run(
        &mut store,
        &bench.data,
        Some(&metrics),
        if val_clips.is_empty() { None } else { Some(&mut validate) },
    )?;

    let ckpt = out.join("model.ckpt");
    write_checkpoint(&ckpt, &trainer.snapshot(&store, &cfg.to_text()))?;
    if let Some(rec) = history.last() {
        println!("final step {}: train loss {:.4}", rec.step, rec.total);
        if let Some((j, f)) = rec.val {
            println!("final val J&F {:.4}", (j + f) / 2.0);
        }
    }
    println!("checkpoint: {}", ckpt.display());
    println!("metrics:    {}", metrics.display());
    Ok(())
}
