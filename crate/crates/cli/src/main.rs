//! `pcsr`: reproducible runs of the compressive super-resolution pipeline.
//!
//! Every subcommand reads an optional JSON config, applies flag overrides
//! and writes its outputs plus `config.json` and `manifest.json` into the
//! run directory given by `--out`.

mod commands;
mod config;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "pcsr", version, about = "Parallel compressive super-resolution imaging runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ideal block-averaging OTF.
    MakeOtf(MakeOtfFlags),
    /// Misaligned and blurred copy of an OTF.
    PerturbOtf(PerturbOtfFlags),
    /// Windowed least-squares OTF estimate from calibration frames.
    Calibrate(CalibrateFlags),
    /// Procedural training images as 16-bit PGM.
    MakeDataset(MakeDatasetFlags),
    /// Joint mask and U-Net training.
    Train(TrainCmdFlags),
    /// Detector frames of an object under every mask.
    Measure(MeasureFlags),
    /// Image from frames by GI, TV, the network or the fine-tuned network.
    Reconstruct(ReconstructFlags),
    /// Self-supervised adaptation of the network to measurement sets.
    Finetune(FinetuneCmdFlags),
    /// PSNR / SSIM of estimates against references as CSV.
    Evaluate(EvaluateFlags),
    /// Region-wise fine-tuning over a field of view with timing.
    FovRun(FovRunFlags),
    /// Wall-clock timing of the pipeline stages.
    Bench(BenchFlags),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("pcsr: {}", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let res = match &cli.command {
        Command::MakeOtf(f) => make_otf(f),
        Command::PerturbOtf(f) => perturb(f),
        Command::Calibrate(f) => calibrate(f),
        Command::MakeDataset(f) => make_dataset(f),
        Command::Train(f) => train_cmd(f),
        Command::Measure(f) => measure(f),
        Command::Reconstruct(f) => reconstruct(f),
        Command::Finetune(f) => finetune(f),
        Command::Evaluate(f) => evaluate(f),
        Command::FovRun(f) => fov_run(f),
        Command::Bench(f) => bench(f),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pcsr: error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
