//! Synthesis sweeps and closed-loop experiments driven by a [`RunConfig`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use qih_core::lyapunov::{self, StageWeights, TuningParams};
use qih_core::model::{self, BoxSet, DiscreteModel, Linearization};
use qih_core::nmpc::{self, ClosedLoopTrace, HorizonSearch, NlpOptions, OCPProblem};
use qih_core::terminal::{self, TerminalIngredients};

use crate::config::{ConfigError, RunConfig};

/// Concrete objects built once from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: DiscreteModel,
    pub weights: StageWeights,
    pub inputs: BoxSet,
    pub state_set: Option<BoxSet>,
    pub gamma_max: f64,
}

impl Setup {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, ConfigError> {
        Ok(Self {
            model: cfg.model()?,
            weights: cfg.weights()?,
            inputs: cfg.input_set()?,
            state_set: cfg.state_set()?,
            gamma_max: cfg.sampling.gamma_max,
        })
    }

    pub fn synthesize(&self, params: &TuningParams) -> Result<TerminalIngredients, String> {
        terminal::synthesize(&self.model, &self.weights, &self.inputs, params, self.gamma_max).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisRow {
    pub label: String,
    pub params: TuningParams,
    pub outcome: Result<TerminalIngredients, String>,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub name: String,
    pub rows: Vec<SynthesisRow>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub model_name: String,
    pub linearization: Linearization,
    pub lqr_gain: DMatrix<f64>,
    pub lqr_penalty: DMatrix<f64>,
    pub approaches: Vec<SynthesisRow>,
    pub sweeps: Vec<Sweep>,
}

impl Synthesis {
    /// Largest Yu area over approaches and sweeps.
    pub fn yu_best_area(&self) -> Option<f64> {
        self.approaches
            .iter()
            .chain(self.sweeps.iter().flat_map(|s| s.rows.iter()))
            .filter(|r| r.params.approach == lyapunov::Approach::Yu)
            .filter_map(|r| r.outcome.as_ref().ok().and_then(|t| t.area))
            .reduce(f64::max)
    }
}

pub fn sweep_row_label(p: &TuningParams) -> String {
    match p.approach {
        lyapunov::Approach::Yu => format!("kappa={}", p.kappa),
        _ => format!("rho_x={} rho_u={}", p.rho_x, p.rho_u),
    }
}

/// Linearizes, computes the LQR gain, then synthesizes every approach and sweep cell.
/// Cells run in parallel; output order follows the config.
pub fn synthesize_all(cfg: &RunConfig, setup: &Setup) -> Result<Synthesis, String> {
    let lin = model::linearize(&setup.model).map_err(|e| e.to_string())?;
    let lqr = lyapunov::lqr_gain(&lin, &setup.weights).map_err(|e| e.to_string())?;

    let mut jobs: Vec<(Option<usize>, String, TuningParams)> = Vec::new();
    for a in &cfg.approaches {
        let p = cfg.tuning(a).map_err(|e| e.to_string())?;
        jobs.push((None, a.label.clone(), p));
    }
    for (i, s) in cfg.sweeps.iter().enumerate() {
        for p in cfg.sweep_rows(s).map_err(|e| e.to_string())? {
            jobs.push((Some(i), sweep_row_label(&p), p));
        }
    }
    let rows: Vec<(Option<usize>, SynthesisRow)> = jobs
        .into_par_iter()
        .map(|(group, label, params)| {
            let outcome = setup.synthesize(&params);
            (group, SynthesisRow { label, params, outcome })
        })
        .collect();

    let mut approaches = Vec::new();
    let mut sweeps: Vec<Sweep> = cfg.sweeps.iter().map(|s| Sweep { name: s.name.clone(), rows: Vec::new() }).collect();
    for (group, row) in rows {
        match group {
            None => approaches.push(row),
            Some(i) => sweeps[i].rows.push(row),
        }
    }
    Ok(Synthesis {
        model_name: setup.model.name().to_string(),
        linearization: lin,
        lqr_gain: lqr.gain,
        lqr_penalty: lqr.penalty,
        approaches,
        sweeps,
    })
}

#[derive(Debug, Clone)]
pub enum HorizonOutcome {
    Feasible { horizon: usize, trace: Result<ClosedLoopTrace, String> },
    InfeasibleUpTo(usize),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct HorizonRow {
    pub ic: usize,
    pub x0: DVector<f64>,
    pub label: String,
    pub outcome: HorizonOutcome,
}

pub fn base_problem(setup: &Setup, terminal: &TerminalIngredients, x0: &DVector<f64>) -> Result<OCPProblem, String> {
    let p = OCPProblem::new(setup.model.clone(), setup.weights.clone(), terminal.clone(), 1, setup.inputs.clone(), x0.clone())
        .map_err(|e| e.to_string())?;
    match &setup.state_set {
        Some(s) => p.with_state_set(s.clone()).map_err(|e| e.to_string()),
        None => Ok(p),
    }
}

/// Minimum horizon for one initial state, then the closed loop at that horizon.
pub fn horizon_and_trace(
    setup: &Setup,
    terminal: &TerminalIngredients,
    x0: &DVector<f64>,
    n_max: usize,
    steps: usize,
) -> HorizonOutcome {
    let base = match base_problem(setup, terminal, x0) {
        Ok(p) => p,
        Err(e) => return HorizonOutcome::Failed(e),
    };
    match nmpc::minimum_feasible_horizon_for(&base, n_max, &NlpOptions::default()) {
        Ok(HorizonSearch::Feasible { horizon, .. }) => {
            let trace = nmpc::receding_horizon_run(&base.with_horizon(horizon), steps).map_err(|e| e.to_string());
            HorizonOutcome::Feasible { horizon, trace }
        }
        Ok(HorizonSearch::InfeasibleUpTo(n)) => HorizonOutcome::InfeasibleUpTo(n),
        Err(e) => HorizonOutcome::Failed(e.to_string()),
    }
}

/// Every (initial condition, approach) pair, in parallel.
pub fn closed_loop_all(cfg: &RunConfig, setup: &Setup, synthesis: &Synthesis) -> Vec<HorizonRow> {
    let pairs: Vec<(usize, DVector<f64>, &SynthesisRow)> = cfg
        .initial_states()
        .into_iter()
        .enumerate()
        .flat_map(|(i, x0)| synthesis.approaches.iter().map(move |r| (i, x0.clone(), r)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(ic, x0, row)| {
            let outcome = match &row.outcome {
                Ok(t) => horizon_and_trace(setup, t, &x0, cfg.n_max, cfg.closed_loop_steps),
                Err(e) => HorizonOutcome::Failed(format!("synthesis failed: {e}")),
            };
            HorizonRow { ic, x0, label: row.label.clone(), outcome }
        })
        .collect()
}

/// Lowercase alphanumerics and underscores, for file names.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}
