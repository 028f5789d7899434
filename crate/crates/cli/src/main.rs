//! `blcf`: fit PCA, train a vocabulary, build and query an index, evaluate mAP.
//!
//! Exit status is 0 on success, 1 when inputs or configuration are invalid and 2 when a file
//! cannot be read or written.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

mod commands;
mod corpus;
mod provenance;

use blcf::descriptors::DEFAULT_EPSILON;
use blcf::evalkit::ApConvention;
use blcf::weighting::BmsParams;
use blcf::weighting::DEFAULT_SIGMA_FRAC;
use blcf::WeightingScheme;

/// An input or configuration problem detected by the CLI itself.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Parser, Debug)]
#[command(
    name = "blcf",
    version,
    about = "Saliency-weighted bag-of-local-features instance search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the whitening PCA on sampled local descriptors.
    FitPca(FitPcaArgs),
    /// Train the visual vocabulary on post-processed descriptors.
    TrainVocab(TrainVocabArgs),
    /// Encode every manifest image and write the inverted index.
    Index(IndexArgs),
    /// Rank the indexed images for one query.
    Query(QueryArgs),
    /// Compute mAP over an Oxford-style ground-truth directory.
    Eval(EvalArgs),
    /// Compute a BMS saliency map for one image.
    Saliency(SaliencyArgs),
    /// Write the indexed vectors as JSON lines.
    Dump(DumpArgs),
}

#[derive(Args, Debug)]
pub struct FitPcaArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output prefix; writes `<out>.mean.blcf`, `<out>.basis.blcf` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Output dimension; defaults to the descriptor dimension.
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long, default_value_t = 500_000)]
    pub sample_cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Approximate,
}

#[derive(Args, Debug)]
pub struct TrainVocabArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// PCA prefix written by `fit-pca`.
    #[arg(long)]
    pub pca: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500_000)]
    pub sample_cap: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    pub mode: ModeArg,
    /// Coarse cells probed per point in approximate mode.
    #[arg(long, default_value_t = 3)]
    pub probes: usize,
    /// Output prefix; writes `<out>.blcf` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightingKind {
    None,
    Gaussian,
    L2norm,
    Saliency,
    Bms,
}

#[derive(Args, Debug, Clone)]
pub struct BmsArgs {
    #[arg(long, default_value_t = 8)]
    pub bms_step: u32,
    #[arg(long, default_value_t = 7)]
    pub bms_dilation: usize,
    /// Blur sigma in pixels; defaults to 2% of the larger image side.
    #[arg(long)]
    pub bms_blur: Option<f64>,
    /// Threshold the RGB channels as they are instead of whitening them first.
    #[arg(long)]
    pub raw_rgb: bool,
}

impl BmsArgs {
    pub fn params(&self) -> BmsParams {
        BmsParams {
            step: self.bms_step,
            dilation_width: self.bms_dilation,
            blur_sigma: self.bms_blur,
            whiten: !self.raw_rgb,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct WeightingArgs {
    #[arg(long, value_enum, default_value_t = WeightingKind::None)]
    pub weighting: WeightingKind,
    #[arg(long, default_value_t = DEFAULT_SIGMA_FRAC)]
    pub sigma_frac: f64,
    #[command(flatten)]
    pub bms: BmsArgs,
}

impl WeightingArgs {
    pub fn scheme(&self) -> WeightingScheme {
        match self.weighting {
            WeightingKind::None => WeightingScheme::None,
            WeightingKind::Gaussian => WeightingScheme::Gaussian {
                sigma_frac: self.sigma_frac,
            },
            WeightingKind::L2norm => WeightingScheme::L2norm,
            WeightingKind::Saliency => WeightingScheme::SaliencyFile,
            WeightingKind::Bms => WeightingScheme::Bms(self.bms.params()),
        }
    }
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub pca: PathBuf,
    #[command(flatten)]
    pub weighting: WeightingArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Replacements for the artifact paths recorded in an index header.
#[derive(Args, Debug, Clone, Default)]
pub struct ArtifactOverrides {
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue when config hashes do not chain.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AqeArgs {
    /// Re-query with the average of the query and its top results.
    #[arg(long)]
    pub aqe: bool,
    #[arg(long, default_value_t = 10)]
    pub aqe_n: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub aqe_include_query: bool,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Query with an image from the manifest.
    #[arg(long, conflicts_with_all = ["tensor", "width", "height"], required_unless_present = "tensor")]
    pub image_id: Option<String>,
    /// Query with a feature map outside the manifest.
    #[arg(long, requires_all = ["width", "height"])]
    pub tensor: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long, requires = "tensor")]
    pub saliency: Option<PathBuf>,
    #[arg(long, requires = "tensor")]
    pub image: Option<PathBuf>,
    /// Region of interest in original-image pixels.
    #[arg(long, num_args = 4, value_names = ["X_MIN", "Y_MIN", "X_MAX", "Y_MAX"])]
    pub bbox: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    pub top: usize,
    #[command(flatten)]
    pub aqe: AqeArgs,
    #[command(flatten)]
    pub overrides: ArtifactOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    Oxford,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Trapezoid,
    Standard,
}

impl From<ConventionArg> for ApConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Trapezoid => ApConvention::Trapezoid,
            ConventionArg::Standard => ApConvention::Standard,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Ground-truth directory.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = StyleArg::Oxford)]
    pub style: StyleArg,
    #[command(flatten)]
    pub aqe: AqeArgs,
    #[arg(long, value_enum, default_value_t = ConventionArg::Trapezoid)]
    pub ap_convention: ConventionArg,
    #[command(flatten)]
    pub overrides: ArtifactOverrides,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// `.png` writes an 8-bit grayscale image; anything else a 2-D tensor.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub bms: BmsArgs,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<blcf::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::FitPca(a) => commands::fit_pca(&a),
        Command::TrainVocab(a) => commands::train_vocab(&a),
        Command::Index(a) => commands::index(&a),
        Command::Query(a) => commands::query(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Saliency(a) => commands::saliency(&a),
        Command::Dump(a) => commands::dump(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
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
    fn exit_codes_follow_error_kind() {
        let missing = blcf::read_tensor("/nonexistent/t.blcf").unwrap_err();
        assert_eq!(exit_code(&anyhow::Error::new(missing).context("loading")), 2);
        let invalid = blcf::Error::InvalidParameter("K".into());
        assert_eq!(exit_code(&anyhow::Error::new(invalid)), 1);
        assert_eq!(exit_code(&anyhow::Error::new(ValidationError("x".into()))), 1);
    }

    #[test]
    fn weighting_flags_map_to_schemes() {
        let cli = Cli::try_parse_from([
            "blcf",
            "index",
            "--manifest",
            "m",
            "--vocab",
            "v",
            "--pca",
            "p",
            "--out",
            "o",
            "--weighting",
            "bms",
            "--bms-step",
            "16",
            "--raw-rgb",
        ])
        .unwrap();
        let Command::Index(args) = cli.command else { panic!() };
        let WeightingScheme::Bms(p) = args.weighting.scheme() else {
            panic!()
        };
        assert_eq!((p.step, p.dilation_width, p.blur_sigma, p.whiten), (16, 7, None, false));
    }
}
