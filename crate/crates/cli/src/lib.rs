//! Command-line front end: synthetic data generation, registration,
//! evaluation, voxel-wise fitting and the scaling benchmark, all reading and
//! writing the raw `f32`/`u8` + JSON sidecar formats of [`io`].

pub mod args;
pub mod bench;
pub mod commands;
pub mod error;
pub mod io;

pub use args::Cli;
pub use error::{CliError, CliResult};

use args::Command;

/// Thread count from `--threads`, which clap already falls back to
/// `SETREG_THREADS` for; 0 means every core.
fn thread_pool(threads: Option<usize>) -> CliResult<Option<rayon::ThreadPool>> {
    match threads {
        None | Some(0) => Ok(None),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| CliError::ThreadPool(e.to_string())),
    }
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => {
            let dirs = commands::cmd_synth(a)?;
            eprintln!("wrote {} case(s) to {}", dirs.len(), a.out.display());
        }
        Command::Register(a) => {
            let out = commands::cmd_register(a)?;
            eprintln!(
                "registered {} frames: loss {:.6} -> {:.6}",
                out.summary.frames,
                out.summary.initial_loss.map_or(f64::NAN, |l| l.total),
                out.summary.final_loss.total
            );
        }
        Command::Eval(a) => {
            let m = commands::cmd_eval(a)?;
            for (k, v) in m.rows() {
                println!("{k}\t{v}");
            }
        }
        Command::Fit(a) => {
            let s = commands::cmd_fit(a)?;
            eprintln!("fitted {} pixels, median R2 {:?}", s.fitted, s.median_r2);
        }
        Command::Bench(a) => {
            let report = bench::cmd_bench(a)?;
            let text = serde_json::to_string_pretty(&report).map_err(|source| CliError::Json {
                path: "<stdout>".into(),
                source,
            })?;
            println!("{text}");
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match thread_pool(cli.threads)? {
        Some(pool) => pool.install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}
