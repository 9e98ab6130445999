use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsecast::data::{DEFAULT_INDICES_PER_FILE, DEFAULT_TIMESTEPS};
use sparsecast::models::ModelKind;

#[derive(Debug, Parser)]
#[command(
    name = "sparsecast",
    version,
    about = "Sparse convolution traffic forecasting: data, training, benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its manifest.
    GenData(GenDataArgs),
    /// Time dense and sparse UNet training steps per city.
    BenchConv(BenchConvArgs),
    /// Time one epoch of batch loading.
    BenchLoader(BenchLoaderArgs),
    /// Train a model or run a training experiment.
    Train(TrainArgs),
    /// Score a checkpoint and optionally dump predicted frames.
    Eval(EvalArgs),
}

/// `HxW`, e.g. `64x64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSize {
    pub height: usize,
    pub width: usize,
}

pub fn parse_size(s: &str) -> Result<GridSize, String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let side = |v: &str| match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("grid side {v:?} must be a positive integer")),
    };
    Ok(GridSize {
        height: side(h)?,
        width: side(w)?,
    })
}

/// A table city by name, or a custom city as `NAME:RATE`.
#[derive(Clone, Debug, PartialEq)]
pub enum CitySpec {
    Named(String),
    Custom { name: String, rate: f64 },
}

pub fn parse_city(s: &str) -> Result<CitySpec, String> {
    match s.split_once(':') {
        None if !s.is_empty() => Ok(CitySpec::Named(s.to_owned())),
        None => Err("empty city name".into()),
        Some((name, rate)) => {
            let rate: f64 = rate.parse().map_err(|e| format!("rate {rate:?}: {e}"))?;
            if name.is_empty() || !(0.0..=1.0).contains(&rate) {
                return Err(format!("{s:?}: expected NAME:RATE with RATE in [0, 1]"));
            }
            Ok(CitySpec::Custom {
                name: name.to_owned(),
                rate,
            })
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Comma-separated table cities and `NAME:RATE` custom cities; all eight
    /// table cities when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_city)]
    pub cities: Vec<CitySpec>,
    /// Tab-separated `name rate [ocean_fraction]` lines adding or replacing profiles.
    #[arg(long)]
    pub profile_table: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub days: usize,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: GridSize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TIMESTEPS, hide = true)]
    pub timesteps: u16,
}

#[derive(Debug, Args)]
pub struct BenchConvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "sparse-unet,conv3d-unet")]
    pub models: Vec<ModelKind>,
    /// Timed batches per city and model; at least 20.
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    /// Untimed batches per city and model before timing.
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    /// Distinct batches loaded per city; timed batches cycle through them.
    #[arg(long, default_value_t = 8, hide = true)]
    pub distinct_batches: usize,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print each city's measured non-zero rate next to its table rate.
    #[arg(long)]
    pub report_nnz: bool,
    /// Directory holding `<model>.ckpt` files to time instead of fresh models.
    #[arg(long)]
    pub trained: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    TwoStage,
    Global,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::TwoStage => "two-stage",
            Scheme::Global => "global",
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchLoaderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Scheme::TwoStage)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_INDICES_PER_FILE)]
    pub indices_per_file: usize,
    /// Stop after this many batches.
    #[arg(long)]
    pub max_batches: Option<usize>,
    /// Keep the page cache; reads are cold by default.
    #[arg(long)]
    pub warm: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// The three residual variants on one corpus with a shared seed.
    Fig3,
    /// Both UNets on each city of the corpus.
    Fig4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "3dresnet")]
    pub model: ModelKind,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to 1, or 5 with `--experiment fig4`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// One-layer output epochs before the sequential block; 3dresnet only.
    #[arg(long, default_value_t = 0)]
    pub warm_up_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub experiment: Option<Experiment>,
    /// Write zero timing fields so repeated runs are byte-identical.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_INDICES_PER_FILE)]
    pub indices_per_file: usize,
    /// Files drawn per epoch; every file when omitted.
    #[arg(long)]
    pub files_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dump the first k predicted windows under `--out`.
    #[arg(long, default_value_t = 0)]
    pub dump_frames: usize,
    /// Directory for `eval.csv` and frame dumps.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_INDICES_PER_FILE)]
    pub indices_per_file: usize,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x32"), Ok(GridSize { height: 64, width: 32 }));
        for bad in ["64", "0x4", "ax4", "4x"] {
            assert!(parse_size(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn city_parsing() {
        assert_eq!(parse_city("MEL"), Ok(CitySpec::Named("MEL".into())));
        assert_eq!(
            parse_city("TOY:0.25"),
            Ok(CitySpec::Custom {
                name: "TOY".into(),
                rate: 0.25
            })
        );
        for bad in ["", "X:1.5", ":0.1", "X:abc"] {
            assert!(parse_city(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_flags_are_rejected() {
        let err = Cli::try_parse_from(["sparsecast", "gen-data", "--out", "x", "--bogus"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
