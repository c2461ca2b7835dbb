//! Command-line front end: each subcommand runs one pipeline stage against a
//! config file and a run directory, with flag-level overrides for seed,
//! media, model, and the provider asset root.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use madkit::datakit::Medium;
use madkit::runner::{self, ExperimentConfig, ModelName, Overrides};
use madkit::synth::SynthParams;

#[derive(Parser)]
#[command(
    name = "madkit",
    about = "Face morphing attack generation, detector training, and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config file (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run directory receiving the stage artifacts.
    #[arg(long, value_name = "PATH")]
    run_dir: PathBuf,
    /// Override the config seeds (split, training, re-digitization).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Medium the detector is trained on.
    #[arg(long, value_name = "D|PS", value_parser = parse_medium)]
    train_medium: Option<Medium>,
    /// Medium the detector is evaluated on.
    #[arg(long, value_name = "D|PS", value_parser = parse_medium)]
    test_medium: Option<Medium>,
    /// Detector: pwmad, lbp, feature_svm, finetune, or scratch.
    #[arg(long, value_name = "NAME", value_parser = parse_model)]
    model: Option<ModelName>,
    /// Provider asset root (overrides MADKIT_ASSET_ROOT).
    #[arg(long, value_name = "PATH")]
    asset_root: Option<PathBuf>,
}

fn parse_medium(s: &str) -> Result<Medium, String> {
    Medium::parse(s).ok_or_else(|| format!("expected D or PS, got {s}"))
}

fn parse_model(s: &str) -> Result<ModelName, String> {
    ModelName::parse(s).ok_or_else(|| {
        format!("expected one of pwmad, lbp, feature_svm, finetune, scratch; got {s}")
    })
}

#[derive(Subcommand)]
enum Command {
    /// Frontality filter over the landmark cache.
    Filter(CommonArgs),
    /// Key selection and embedding-similarity pairing.
    Pair(CommonArgs),
    /// Generate morphed attack images for the selected pairs.
    Morph(CommonArgs),
    /// Apply the simulated re-digitization chain.
    Redigitize(CommonArgs),
    /// Assemble the manifest and the identity-disjoint split.
    Split(CommonArgs),
    /// Train the configured detector on one medium.
    Train(CommonArgs),
    /// Score the test split and write the evaluation report.
    Eval(CommonArgs),
    /// Face-recognition vulnerability analysis (MMPMR at fixed FMRs).
    Vuln(CommonArgs),
    /// Comparison and generalization tables over all eval reports.
    Report(CommonArgs),
    /// ROC curves (SVG + CSV sidecar) over all eval reports.
    Plot(CommonArgs),
    /// Generate a synthetic demo corpus and a matching config file.
    Synth {
        /// Output directory for the corpus.
        #[arg(long, value_name = "PATH")]
        out_dir: PathBuf,
        /// Where to write the generated config.
        #[arg(long, value_name = "PATH")]
        config_out: PathBuf,
        #[arg(long, default_value_t = 14)]
        identities: usize,
        #[arg(long, default_value_t = 3)]
        images_per_identity: usize,
        #[arg(long, default_value_t = 256)]
        image_size: u32,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig, runner::RunError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    let overrides = Overrides {
        seed: common.seed,
        train_medium: common.train_medium,
        test_medium: common.test_medium,
        model: common.model,
        asset_root: common.asset_root.clone(),
    };
    overrides.apply(&mut config);
    Ok(config)
}

fn dispatch(command: Command) -> Result<(), runner::RunError> {
    match command {
        Command::Filter(c) => runner::run_filter(&load(&c)?, &c.run_dir),
        Command::Pair(c) => runner::run_pair(&load(&c)?, &c.run_dir),
        Command::Morph(c) => runner::run_morph(&load(&c)?, &c.run_dir),
        Command::Redigitize(c) => runner::run_redigitize(&load(&c)?, &c.run_dir),
        Command::Split(c) => runner::run_split(&load(&c)?, &c.run_dir),
        Command::Train(c) => runner::run_train(&load(&c)?, &c.run_dir),
        Command::Eval(c) => runner::run_eval(&load(&c)?, &c.run_dir),
        Command::Vuln(c) => runner::run_vuln(&load(&c)?, &c.run_dir),
        Command::Report(c) => runner::run_report(&load(&c)?, &c.run_dir),
        Command::Plot(c) => runner::run_plot(&load(&c)?, &c.run_dir),
        Command::Synth {
            out_dir,
            config_out,
            identities,
            images_per_identity,
            image_size,
            seed,
        } => {
            let params = SynthParams {
                identities,
                images_per_identity,
                image_size,
                seed,
                ..SynthParams::default()
            };
            runner::run_synth_demo(&out_dir, &params, &config_out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
