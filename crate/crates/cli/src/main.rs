//! Command-line front end: synthetic data generation, training, inference,
//! evaluation, ablation sweeps, and attention-cost benchmarks in one binary.

use anyhow::Result;
use clap::{Parser, Subcommand};

mod ablate;
mod bench;
mod evaluate;
mod infer;
mod score;
mod setup;
mod synth;
mod train;

#[derive(Parser)]
#[command(name = "vos", version, about = "Transformer video object segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as a PNG directory tree.
    Synth(synth::SynthArgs),
    /// Train a model on the synthetic benchmark.
    Train(train::TrainArgs),
    /// Segment videos with a trained checkpoint.
    Infer(infer::InferArgs),
    /// Score predicted masks against ground truth.
    Eval(evaluate::EvalArgs),
    /// Train and compare variants along one configuration axis.
    Ablate(ablate::AblateArgs),
    /// Measure encoder cost scaling against its FLOP model.
    Bench(bench::BenchArgs),
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Eval(a) => evaluate::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Bench(a) => bench::run(a),
    }
}
