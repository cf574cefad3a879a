//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "setreg", version, about = "Groupwise registration of variable-length image sequences")]
pub struct Cli {
    /// Worker threads; 0 or unset uses every core.
    #[arg(long, global = true, env = "SETREG_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic cases with known motion.
    Synth(SynthArgs),
    /// Register one case.
    Register(RegisterArgs),
    /// Score transforms against a case's masks, landmarks and motion.
    Eval(EvalArgs),
    /// Fit the inversion-recovery model voxel by voxel.
    Fit(FitArgs),
    /// Time fixed-iteration registrations over sequence lengths.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MotionArg {
    Smooth,
    Translation,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub cases: usize,
    /// Frames per case, at least 2.
    #[arg(long, default_value_t = 11)]
    pub length: usize,
    /// Grid as HxW, each side at least 64.
    #[arg(long, default_value = "128x128")]
    pub size: String,
    /// Largest displacement in pixels.
    #[arg(long, default_value_t = 5.0)]
    pub motion_max: f64,
    #[arg(long, value_enum, default_value_t = MotionArg::Smooth)]
    pub motion: MotionArg,
    /// Additive Gaussian noise in units of the nominal signal amplitude.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    Corr,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeaturesArg {
    Off,
    Handcrafted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Zero,
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    /// Case directory holding frames.f32 (and optionally times.csv).
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = AggArg::Corr)]
    pub agg: AggArg,
    #[arg(long, value_enum, default_value_t = FeaturesArg::Handcrafted)]
    pub features: FeaturesArg,
    /// Finest-level refinement steps from the initialization; 0 runs the
    /// full multi-scale optimization from zero, or returns the pipeline
    /// prediction as is with `--init pipeline`.
    #[arg(long, default_value_t = 0)]
    pub io_steps: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Zero)]
    pub init: InitArg,
    /// Saved pipeline parameters; freshly initialized ones otherwise.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub scales: usize,
    /// Iterations per scale, coarsest first; one value applies to all.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 100, 100, 50])]
    pub iters: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    #[arg(long)]
    pub lambda_f: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Single)]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Case directory with masks.u8, landmarks.csv and truth.f32 as available.
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long, conflicts_with = "identity", required_unless_present = "identity")]
    pub transforms: Option<PathBuf>,
    /// Score zero transforms, i.e. the unregistered sequence.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Border excluded from the interior endpoint error.
    #[arg(long, default_value_t = 8)]
    pub margin: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub times: PathBuf,
    /// Label masks `[L,H,W]` or `[H,W]`, or `none` to fit every pixel.
    #[arg(long, default_value = "none")]
    pub mask: String,
    /// Label of the mask to fit.
    #[arg(long, default_value_t = setreg::synth::MYOCARDIUM)]
    pub label: u8,
    /// Warps per-frame masks into the registered space before voting.
    #[arg(long)]
    pub transforms: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value_t = 2)]
    pub scales: usize,
    /// Iterations per scale.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Timed runs per length; the fastest is kept.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = FeaturesArg::Handcrafted)]
    pub features: FeaturesArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file; printed to standard output as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `HxW` with positive sides.
pub fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    let h = h.trim().parse().ok()?;
    let w = w.trim().parse().ok()?;
    (h > 0 && w > 0).then_some((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("128x96"), Some((128, 96)));
        assert_eq!(parse_size("64X64"), Some((64, 64)));
        assert_eq!(parse_size("0x64"), None);
        assert_eq!(parse_size("64"), None);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
