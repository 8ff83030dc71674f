//! `vos synth`: generate the procedural benchmark and write it to disk.

use anyhow::Result;
use clap::Args;
use vos_core::synth::{make_benchmark, write_benchmark_layout};

use crate::setup::{write_provenance, ConfigArgs};

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(a: SynthArgs) -> Result<()> {
    let (cfg, prov) = a.cfg.resolve()?;
    let out = a.cfg.out_dir("synth");
    write_provenance(&out, &cfg, &prov)?;

    let bench = make_benchmark(&cfg.synth);
    let data = out.join("data");
    write_benchmark_layout(&data, &bench)?;
    println!(
        "wrote {} train / {} val clips ({} frames, {}x{}) to {}",
        bench.data.train.len(),
        bench.data.val.len(),
        cfg.synth.frames,
        cfg.synth.size,
        cfg.synth.size,
        data.display()
    );
    Ok(())
}
