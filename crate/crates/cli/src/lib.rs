//! Command-line surface for building toy corpora, pre-training, training,
//! generating and evaluating. Every command writes a [`RunManifest`] before
//! it starts computing.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ehr_synth::metrics::RN_CAP;
use ehr_synth::pretrain::{PRETRAIN_BATCH, PRETRAIN_EPOCHS, PRETRAIN_LR};
use ehr_synth::trainer::TrainConfig;

pub use manifest::{file_digest, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "ehrsynth", version, about = "Synthetic multi-label visit sequences with a conditional recurrent WGAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a corpus from a latent-state toy process and write its oracle frequencies.
    MakeToy(MakeToyArgs),
    /// Fit the next-visit predictor that supplies temporal features to the critic.
    Pretrain(PretrainArgs),
    /// Adversarial training of generator and critic.
    Train(TrainArgs),
    /// Sample synthetic patients from a trained checkpoint.
    Generate(GenerateArgs),
    /// Compare synthetic against real data and write the statistics as JSON.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// JSON process description (states, transition, emission, length probabilities, seed).
    pub spec: PathBuf,
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub patients: usize,
    /// Overrides the seed stored in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write patients.jsonl.gz instead of plain JSONL.
    #[arg(long)]
    pub gzip: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    pub data_dir: PathBuf,
    pub out_checkpoint: PathBuf,
    #[arg(long, default_value_t = PRETRAIN_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = PRETRAIN_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = PRETRAIN_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub data_dir: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 300_000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub g_lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub d_lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
    #[arg(long, default_value_t = 100_000)]
    pub decay_every: u64,
    #[arg(long, default_value_t = 1)]
    pub n_critic: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_gp: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta2: f64,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Critic scores visits alone, without temporal features.
    #[arg(long)]
    pub no_hidden_critic: bool,
    /// Generator skips the conditional matrix.
    #[arg(long)]
    pub no_condition: bool,
    /// How target diseases are drawn: uniform or empirical.
    #[arg(long, default_value = "uniform")]
    pub target_dist: String,
    #[arg(long, default_value_t = 10_000)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Patients generated at each log step for the history statistics.
    #[arg(long, default_value_t = 256)]
    pub probe_size: usize,
    /// Suppress per-log progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    /// Real dataset supplying the vocabulary, length distribution and
    /// diseases eligible as targets.
    pub data_dir: PathBuf,
    /// Output dataset directory.
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub patients: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub gzip: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub real_dir: PathBuf,
    /// Dataset directory, patients JSONL file, or trained checkpoint.
    pub synthetic: PathBuf,
    pub out_report: PathBuf,
    #[arg(long, default_value_t = RN_CAP)]
    pub rn_cap: u64,
    /// Granularity of the required number; 1 counts individual patients.
    #[arg(long, default_value_t = 1)]
    pub rn_batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch,
            g_lr: self.g_lr,
            d_lr: self.d_lr,
            decay: self.decay,
            decay_every: self.decay_every,
            n_critic: self.n_critic,
            lambda_gp: self.lambda_gp,
            beta1: self.beta1,
            beta2: self.beta2,
            hidden: self.hidden,
            seed: self.seed,
            hidden_critic: !self.no_hidden_critic,
            condition: !self.no_condition,
            target_dist: self.target_dist.clone(),
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            probe_size: self.probe_size,
        }
    }
}

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or input files; exit code 2.
    Input(String),
    /// Training or evaluation broke down; exit code 1.
    Computation(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Computation(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) | Failure::Computation(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

impl From<ehr_synth::Error> for Failure {
    fn from(e: ehr_synth::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Computation(e.to_string())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::MakeToy(a) => commands::make_toy(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}
