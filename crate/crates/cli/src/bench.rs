//! `vos bench`: measure encoder wall-clock against the analytic FLOP model
//! and report how cost scales with the token count, i.e. with reference set
//! size and spatial resolution.

use std::fs;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vos_core::transformer::{
    encoder_attention_flops, encoder_flops, EncoderParams, RunMode,
};
use vos_core::{ParamStore, Tape};

use crate::setup::{write_provenance, ConfigArgs};

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,

    /// Token counts for the encoder sweep.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    pub tokens: Vec<usize>,

    /// Repetitions per measurement; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

pub fn run(a: BenchArgs) -> Result<()> {
    let (cfg, prov) = a.cfg.resolve()?;
    let out = a.cfg.out_dir("bench");
    write_provenance(&out, &cfg, &prov)?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let enc = EncoderParams::register(&mut store, &mut rng, &cfg.model);
    let d = cfg.model.d_model;

    println!(
        "encoder: {} layers, d={}, ff={}",
        cfg.model.encoder_layers, d, cfg.model.ff_dim
    );
    println!(
        "{:>7} {:>14} {:>14} {:>10} {:>12}",
        "tokens", "attn_flops", "total_flops", "seconds", "flops/s"
    );
    let mut csv = String::from("tokens,attention_flops,encoder_flops,seconds\n");
    let mut measured = Vec::new();
    for &l in &a.tokens {
        let x = Array2::from_shape_fn((l, d), |_| rng.gen_range(-1.0..1.0));
        let mut times: Vec<f64> = (0..a.reps.max(1))
            .map(|_| {
                let mut t = Tape::with_grad(false);
                let v = t.constant(x.clone().into_dyn());
                let begin = Instant::now();
                enc.forward(&mut t, &store, v, &mut RunMode::Eval);
                begin.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let secs = times[times.len() / 2];
        let attn = encoder_attention_flops(&cfg.model, l);
        let total = encoder_flops(&cfg.model, l);
        println!(
            "{l:>7} {attn:>14.3e} {total:>14.3e} {secs:>10.5} {:>12.3e}",
            total / secs
        );
        csv.push_str(&format!("{l},{attn},{total},{secs}\n"));
        measured.push((l, total, secs));
    }

    println!("\nscaling check (L doubled):");
    for pair in measured.windows(2) {
        let (l1, f1, s1) = pair[0];
        let (l2, f2, s2) = pair[1];
        if l2 == 2 * l1 {
            println!(
                "  {l1} -> {l2}: predicted x{:.2} (attention alone x4.00), measured x{:.2}",
                f2 / f1,
                s2 / s1
            );
        }
    }

    // Token counts for typical inference shapes at stride 16: a reference
    // set of size T plus the query frame gives T+1 temporal slices.
    println!("\ntoken budget by reference count and frame size:");
    println!("{:>6} {:>6} {:>8} {:>14}", "refs", "size", "tokens", "total_flops");
    for refs in [1usize, 2, 3] {
        for size in [32usize, 64, 128] {
            let hw = (size / 16) * (size / 16);
            let l = (refs + 1) * hw;
            println!(
                "{refs:>6} {size:>6} {l:>8} {:>14.3e}",
                encoder_flops(&cfg.model, l)
            );
        }
    }

    let csv_path = out.join("bench.csv");
    fs::write(&csv_path, csv)?;
    println!("\nrows: {}", csv_path.display());
    Ok(())
}
