//! `doa` — direction-of-arrival estimation on first-order-ambisonics
//! recordings: synthesize test scenes, estimate per-frame source counts
//! and directions with a choice of intensity-vector refiners, score
//! predictions, fit the logistic refiner, and verify its gradients.

mod commands;
mod formats;
mod wav;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use doa_core::dsp::{StftConfig, WindowKind};

#[derive(Parser)]
#[command(name = "doa", version, about = "Direction-of-arrival estimation on first-order ambisonics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct StftArgs {
    /// Analysis window length in samples.
    #[arg(long = "stft-win", default_value_t = 1024)]
    stft_win: usize,
    /// Hop between frames in samples.
    #[arg(long = "stft-hop", default_value_t = 512)]
    stft_hop: usize,
}

impl StftArgs {
    fn config(self, sample_rate: u32) -> StftConfig {
        StftConfig {
            sample_rate,
            window_len: self.stft_win,
            hop: self.stft_hop,
            window: WindowKind::Hann,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene spec into a mixture WAV, component WAVs and
    /// ground-truth labels.
    Synth {
        /// Scene spec JSON.
        spec: PathBuf,
        /// Output mixture WAV; components are written next to it.
        out_wav: PathBuf,
        /// Output labels JSON.
        out_labels: PathBuf,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Estimate per-frame source counts and directions from a
    /// 4-channel WAV into a prediction CSV.
    Estimate {
        /// 4-channel 48 kHz input WAV (W, X, Y, Z).
        in_wav: PathBuf,
        /// Output prediction CSV.
        out_csv: PathBuf,
        /// identity | logpower | angle | oracle | fitted:PARAMS_JSON
        #[arg(long)]
        refiner: String,
        /// oracle:LABELS_JSON | music | fixed:N
        #[arg(long)]
        noas: String,
        /// Smooth counts, segment events and snap directions to the
        /// grid before writing.
        #[arg(long)]
        postprocess: bool,
        /// Majority-vote window (frames, odd) for count smoothing.
        #[arg(long = "smooth-window", default_value_t = 11)]
        smooth_window: usize,
        /// Direction grid step in degrees for post-processing.
        #[arg(long = "grid-step", default_value_t = 10.0)]
        grid_step: f64,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Score a prediction CSV against ground-truth labels.
    Eval {
        pred_csv: PathBuf,
        labels: PathBuf,
        out_json: PathBuf,
    },
    /// Fit the logistic refiner on synthesized scenes.
    Fit {
        /// Scene spec JSONs (at least one).
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        /// Output parameters JSON.
        #[arg(long)]
        out_params: PathBuf,
        /// Output loss-trace CSV.
        #[arg(long)]
        out_trace: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long = "learning-rate", default_value_t = 0.05)]
        learning_rate: f64,
        /// Epsilon handling in the training forward pass: zero | oracle.
        #[arg(long, default_value = "zero")]
        eps: String,
        /// Mel bands for the refiner features.
        #[arg(long = "n-mels", default_value_t = 24)]
        n_mels: usize,
        /// Weight of the source-count loss term.
        #[arg(long, default_value_t = 10.0)]
        lambda1: f64,
        /// Weight of the mask-only direction loss term.
        #[arg(long, default_value_t = 0.1)]
        lambda2: f64,
        /// Parameter-initialization seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Compare the analytic loss gradient against central finite
    /// differences on random draws; exits nonzero above 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-draws", default_value_t = 20)]
        n_draws: usize,
        #[arg(long, default_value_t = 10.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda2: f64,
        /// Test hook: corrupt one gradient coordinate so the check must
        /// fail.
        #[arg(long = "corrupt-gradient", hide = true)]
        corrupt_gradient: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Synth { spec, out_wav, out_labels, stft } => {
            commands::synth(&spec, &out_wav, &out_labels, |rate| stft.config(rate))?;
            Ok(0)
        }
        Command::Estimate {
            in_wav,
            out_csv,
            refiner,
            noas,
            postprocess,
            smooth_window,
            grid_step,
            stft,
        } => {
            commands::estimate(
                &in_wav,
                &out_csv,
                &refiner,
                &noas,
                postprocess,
                smooth_window,
                grid_step,
                |rate| stft.config(rate),
            )?;
            Ok(0)
        }
        Command::Eval { pred_csv, labels, out_json } => {
            commands::eval(&pred_csv, &labels, &out_json)?;
            Ok(0)
        }
        Command::Fit {
            scenes,
            out_params,
            out_trace,
            steps,
            learning_rate,
            eps,
            n_mels,
            lambda1,
            lambda2,
            seed,
            stft,
        } => {
            commands::fit(
                &scenes,
                &out_params,
                &out_trace,
                steps,
                learning_rate,
                &eps,
                n_mels,
                lambda1,
                lambda2,
                seed,
                |rate| stft.config(rate),
            )?;
            Ok(0)
        }
        Command::Gradcheck { seed, n_draws, lambda1, lambda2, corrupt_gradient } => {
            commands::gradcheck(seed, n_draws, lambda1, lambda2, corrupt_gradient)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}
