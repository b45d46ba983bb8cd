//! Experiment runner behind the `qih-bench` binary.

pub mod config;
pub mod report;
pub mod run;
pub mod verify;

use std::path::{Path, PathBuf};

use config::{ConfigError, RunConfig};
use report::ResultsReport;
use run::Setup;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
}

/// Loads `path` (or the bundled benchmark) and applies command-line overrides.
pub fn load_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::benchmark(),
    };
    if let Some(out) = &o.out {
        cfg.output_dir = out.display().to_string();
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(samples) = o.samples {
        cfg.sampling.boundary_samples = samples;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synthesize(cfg: &RunConfig) -> Result<ResultsReport, String> {
    let setup = Setup::from_config(cfg).map_err(|e| e.to_string())?;
    let synthesis = run::synthesize_all(cfg, &setup)?;
    let report = ResultsReport::new(cfg, synthesis);
    report
        .write_synthesis_artifacts(Path::new(&cfg.output_dir), cfg.sampling.region_points)
        .map_err(|e| e.to_string())?;
    Ok(report)
}

pub fn cmd_closed_loop(cfg: &RunConfig) -> Result<ResultsReport, String> {
    let setup = Setup::from_config(cfg).map_err(|e| e.to_string())?;
    let synthesis = run::synthesize_all(cfg, &setup)?;
    let mut report = ResultsReport::new(cfg, synthesis);
    report.horizons = run::closed_loop_all(cfg, &setup, &report.synthesis);
    report.write_horizon_artifacts(Path::new(&cfg.output_dir)).map_err(|e| e.to_string())?;
    Ok(report)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<verify::VerifyReport, String> {
    let setup = Setup::from_config(cfg).map_err(|e| e.to_string())?;
    let report = verify::run_verify(cfg, &setup);
    let dir = Path::new(&cfg.output_dir);
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("verify.txt"), report.render()).map_err(|e| e.to_string())?;
    Ok(report)
}

/// Boundary CSVs only, without sweeps.
pub fn cmd_export_region(cfg: &RunConfig) -> Result<Vec<PathBuf>, String> {
    let setup = Setup::from_config(cfg).map_err(|e| e.to_string())?;
    let mut only = cfg.clone();
    only.sweeps.clear();
    let synthesis = run::synthesize_all(&only, &setup)?;
    for r in &synthesis.approaches {
        if let Err(e) = &r.outcome {
            return Err(format!("{}: {e}", r.label));
        }
    }
    let dir = Path::new(&cfg.output_dir);
    report::write_regions(dir, &synthesis.approaches, cfg.sampling.region_points).map_err(|e| e.to_string())?;
    Ok(synthesis
        .approaches
        .iter()
        .map(|r| dir.join(format!("region_{}.csv", run::file_stem(&r.label))))
        .collect())
}
