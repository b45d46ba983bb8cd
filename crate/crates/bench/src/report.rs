//! Plain-text tables and their CSV twins.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;

use qih_core::lyapunov::Approach;
use qih_core::nmpc::FEASIBILITY_TOL;
use qih_core::terminal;

use crate::config::RunConfig;
use crate::run::{file_stem, HorizonOutcome, HorizonRow, Synthesis, SynthesisRow};

#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self { config_hash: cfg.hash(), version: env!("CARGO_PKG_VERSION").to_string(), seed: cfg.seed }
    }
}

#[derive(Debug, Clone)]
pub struct ResultsReport {
    pub provenance: Provenance,
    pub synthesis: Synthesis,
    pub horizons: Vec<HorizonRow>,
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("[{}]", r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn param_cells(row: &SynthesisRow) -> (String, String, String) {
    let p = &row.params;
    match p.approach {
        Approach::Yu => (String::new(), String::new(), p.kappa.to_string()),
        _ => (p.rho_x.to_string(), p.rho_u.to_string(), String::new()),
    }
}

impl ResultsReport {
    pub fn new(cfg: &RunConfig, synthesis: Synthesis) -> Self {
        Self { provenance: Provenance::of(cfg), synthesis, horizons: Vec::new() }
    }

    /// `area / area(best Yu)` for each configured approach.
    pub fn area_ratio(&self, row: &SynthesisRow) -> Option<f64> {
        let base = self.synthesis.yu_best_area()?;
        let area = row.outcome.as_ref().ok()?.area?;
        Some(area / base)
    }

    fn header(&self, out: &mut String) {
        let p = &self.provenance;
        writeln!(out, "model: {}", self.synthesis.model_name).unwrap();
        writeln!(out, "config_hash: {}", p.config_hash).unwrap();
        writeln!(out, "version: {}", p.version).unwrap();
        writeln!(out, "seed: {}", p.seed).unwrap();
        out.push('\n');
    }

    fn region_table(&self, out: &mut String, title: &str, rows: &[SynthesisRow], ratios: bool) {
        writeln!(out, "{title}").unwrap();
        writeln!(
            out,
            "{:<22} {:<22} {:>8} {:>8} {:>12} {:>14} {:>14} {:>10}{}",
            "label",
            "approach",
            "rho_x",
            "rho_u",
            "kappa",
            "gamma",
            "alpha",
            "area",
            if ratios { format!(" {:>10}", "vs_yu") } else { String::new() }
        )
        .unwrap();
        for r in rows {
            let (rx, ru, k) = param_cells(r);
            let lead = format!("{:<22} {:<22} {:>8} {:>8} {:>12}", r.label, r.params.approach.as_str(), rx, ru, k);
            match &r.outcome {
                Ok(t) => {
                    let ratio = if ratios {
                        format!(" {:>10}", self.area_ratio(r).map_or("-".into(), |v| format!("{v:.4}")))
                    } else {
                        String::new()
                    };
                    writeln!(
                        out,
                        "{lead} {:>14.6} {:>14.6} {:>10.4}{ratio}",
                        t.gamma,
                        t.alpha,
                        t.area.unwrap_or(f64::NAN)
                    )
                    .unwrap();
                }
                Err(e) => writeln!(out, "{lead} error: {e}").unwrap(),
            }
        }
        out.push('\n');
    }

    pub fn render_synthesis(&self) -> String {
        let mut out = String::new();
        self.header(&mut out);
        let s = &self.synthesis;
        writeln!(out, "Phi   = {}", fmt_matrix(&s.linearization.phi)).unwrap();
        writeln!(out, "Gamma = {}", fmt_matrix(&s.linearization.gamma)).unwrap();
        writeln!(out, "L     = {}", fmt_matrix(&s.lqr_gain)).unwrap();
        out.push('\n');
        if !s.approaches.is_empty() {
            self.region_table(&mut out, "Terminal regions", &s.approaches, true);
            for r in &s.approaches {
                if let Ok(t) = &r.outcome {
                    writeln!(out, "{}: L = {}, P = {}", r.label, fmt_matrix(&t.gain), fmt_matrix(&t.penalty)).unwrap();
                }
            }
            out.push('\n');
        }
        for sw in &s.sweeps {
            self.region_table(&mut out, &format!("Sweep {}", sw.name), &sw.rows, false);
        }
        out
    }

    pub fn render_horizons(&self) -> String {
        let mut out = String::new();
        self.header(&mut out);
        writeln!(out, "Minimum prediction horizon (feasibility tolerance {FEASIBILITY_TOL:e})").unwrap();
        writeln!(out, "{:<4} {:<24} {:<22} {:>8}  {}", "ic", "x0", "label", "N", "closed loop").unwrap();
        for r in &self.horizons {
            let x0 = format!("({})", r.x0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "));
            let (n, status) = horizon_cells(&r.outcome);
            writeln!(out, "{:<4} {:<24} {:<22} {:>8}  {}", r.ic, x0, r.label, n, status).unwrap();
        }
        out
    }

    pub fn approaches_csv(&self) -> String {
        let mut out = String::from("label,approach,rho_x,rho_u,kappa,gain_mode,gamma,alpha,area,area_ratio_vs_yu,error\n");
        for r in &self.synthesis.approaches {
            out.push_str(&region_csv_row(r, Some(self.area_ratio(r))));
        }
        out
    }

    pub fn sweep_csv(&self, index: usize) -> String {
        let mut out = String::from("label,approach,rho_x,rho_u,kappa,gain_mode,gamma,alpha,area,error\n");
        for r in &self.synthesis.sweeps[index].rows {
            out.push_str(&region_csv_row(r, None));
        }
        out
    }

    pub fn horizons_csv(&self) -> String {
        let mut out = String::from("ic,x0,label,horizon,status,steps,final_norm,feasibility_tol\n");
        for r in &self.horizons {
            let x0 = r.x0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            let (status, n, steps, fin) = match &r.outcome {
                HorizonOutcome::Feasible { horizon, trace: Ok(t) } => {
                    ("feasible".to_string(), horizon.to_string(), t.steps().to_string(), t.final_state().norm().to_string())
                }
                HorizonOutcome::Feasible { horizon, trace: Err(e) } => {
                    (format!("closed loop failed: {}", csv_text(e)), horizon.to_string(), String::new(), String::new())
                }
                HorizonOutcome::InfeasibleUpTo(n) => (format!("infeasible up to {n}"), String::new(), String::new(), String::new()),
                HorizonOutcome::Failed(e) => (format!("error: {}", csv_text(e)), String::new(), String::new(), String::new()),
            };
            out.push_str(&format!("{},{x0},{},{n},{status},{steps},{fin},{FEASIBILITY_TOL:e}\n", r.ic, r.label));
        }
        out
    }

    /// Report text, CSV twins and one boundary CSV per certified approach.
    pub fn write_synthesis_artifacts(&self, dir: &Path, region_points: usize) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("synthesis.txt"), self.render_synthesis())?;
        fs::write(dir.join("approaches.csv"), self.approaches_csv())?;
        for (i, sw) in self.synthesis.sweeps.iter().enumerate() {
            fs::write(dir.join(format!("sweep_{}.csv", file_stem(&sw.name))), self.sweep_csv(i))?;
        }
        write_regions(dir, &self.synthesis.approaches, region_points)
    }

    pub fn write_horizon_artifacts(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("horizons.txt"), self.render_horizons())?;
        fs::write(dir.join("horizons.csv"), self.horizons_csv())?;
        for r in &self.horizons {
            if let HorizonOutcome::Feasible { trace: Ok(t), .. } = &r.outcome {
                let penalty = self
                    .synthesis
                    .approaches
                    .iter()
                    .find(|a| a.label == r.label)
                    .and_then(|a| a.outcome.as_ref().ok())
                    .map(|t| t.penalty.clone())
                    .expect("trace comes from a certified approach");
                let mut buf = Vec::new();
                t.write_csv(&mut buf, &penalty)?;
                fs::write(dir.join(format!("trace_{}_ic{}.csv", file_stem(&r.label), r.ic)), buf)?;
            }
        }
        Ok(())
    }
}

/// `region_<label>.csv` for every certified 2-D approach.
pub fn write_regions(dir: &Path, rows: &[SynthesisRow], points: usize) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for r in rows {
        let Ok(t) = &r.outcome else { continue };
        if t.penalty.nrows() != 2 {
            continue;
        }
        let pts = terminal::ellipse_boundary(&t.penalty, t.alpha, points)
            .map_err(|e| io::Error::other(e.to_string()))?;
        let mut buf = Vec::new();
        terminal::write_boundary_csv(&mut buf, &pts)?;
        fs::write(dir.join(format!("region_{}.csv", file_stem(&r.label))), buf)?;
    }
    Ok(())
}

fn horizon_cells(o: &HorizonOutcome) -> (String, String) {
    match o {
        HorizonOutcome::Feasible { horizon, trace: Ok(t) } => (
            horizon.to_string(),
            format!("{} steps, |x| = {:.3e}", t.steps(), t.final_state().norm()),
        ),
        HorizonOutcome::Feasible { horizon, trace: Err(e) } => (horizon.to_string(), format!("failed: {e}")),
        HorizonOutcome::InfeasibleUpTo(n) => ("-".into(), format!("infeasible up to N_max = {n}")),
        HorizonOutcome::Failed(e) => ("-".into(), format!("error: {e}")),
    }
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

fn region_csv_row(r: &SynthesisRow, ratio: Option<Option<f64>>) -> String {
    let (rx, ru, k) = param_cells(r);
    let mode = match r.params.approach {
        Approach::LqrInflated => format!("{:?}", r.params.gain_mode).to_lowercase(),
        _ => String::new(),
    };
    let (g, a, area, err) = match &r.outcome {
        Ok(t) => (t.gamma.to_string(), t.alpha.to_string(), opt(t.area), String::new()),
        Err(e) => (String::new(), String::new(), String::new(), csv_text(e)),
    };
    let ratio = match ratio {
        Some(v) => format!(",{}", opt(v)),
        None => String::new(),
    };
    format!("{},{},{rx},{ru},{k},{mode},{g},{a},{area}{ratio},{err}\n", csv_text(&r.label), r.params.approach.as_str())
}
