use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qih_bench::{
    cmd_closed_loop, cmd_export_region, cmd_synthesize, cmd_verify, load_config, Overrides, EXIT_CONFIG, EXIT_FAILURE,
};

#[derive(Parser)]
#[command(name = "qih-bench", version, about = "Terminal region synthesis and NMPC benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Terminal ingredients for every approach and sweep, with report and CSVs.
    Synthesize(Common),
    /// Minimum horizons and closed-loop traces per initial condition.
    ClosedLoop(Common),
    /// Property battery; exits 1 on any failure.
    Verify(Common),
    /// Region boundary CSVs for the configured approaches.
    ExportRegion(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; the bundled benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Boundary samples for the alpha search.
    #[arg(long)]
    samples: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Synthesize(c) | Command::ClosedLoop(c) | Command::Verify(c) | Command::ExportRegion(c) => c,
    };
    let overrides = Overrides { out: common.out.clone(), seed: common.seed, samples: common.samples };
    let cfg = match load_config(common.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let outcome = match cli.command {
        Command::Synthesize(_) => cmd_synthesize(&cfg).map(|r| {
            print!("{}", r.render_synthesis());
            true
        }),
        Command::ClosedLoop(_) => cmd_closed_loop(&cfg).map(|r| {
            print!("{}", r.render_horizons());
            true
        }),
        Command::Verify(_) => cmd_verify(&cfg).map(|r| {
            print!("{}", r.render());
            r.all_passed()
        }),
        Command::ExportRegion(_) => cmd_export_region(&cfg).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
            true
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE as u8)
        }
    }
}
