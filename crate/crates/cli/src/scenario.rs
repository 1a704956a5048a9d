use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ptchain_core::control::{GainOrigin, ObserverLaw, StateFeedbackLaw};
use ptchain_core::model::{bilinear_to_chained, BilinearScenario, ChainedState, ChainedSystem, UncertaintySpec};
use ptchain_core::ple::PleBasis;
use ptchain_core::sim::{simulate_output_feedback, simulate_state_feedback, IntegratorConfig, Trajectory};
use ptchain_core::verify::{check_theorem1_bounds, check_theorem2_bounds, VerificationReport};

use crate::config::{BetaChoice, Mode, ScenarioConfig, UncertaintyChoice};
use crate::CliError;

/// Plant, initial conditions and design constants for one config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sys: ChainedSystem,
    pub init: ChainedState,
    pub xi_init: DVector<f64>,
    pub basis: Arc<PleBasis>,
    pub d: f64,
}

#[derive(Debug, Clone)]
pub enum Law {
    State(StateFeedbackLaw),
    Output(ObserverLaw),
}

impl Law {
    pub fn beta(&self) -> f64 {
        match self {
            Law::State(l) => l.beta,
            Law::Output(l) => l.beta,
        }
    }

    pub fn origin(&self) -> GainOrigin {
        match self {
            Law::State(l) => l.origin,
            Law::Output(l) => l.origin,
        }
    }
}

pub fn uncertainty_spec(choice: &UncertaintyChoice, n: usize) -> Result<UncertaintySpec, CliError> {
    Ok(match choice {
        UncertaintyChoice::Zero => UncertaintySpec::zero(n),
        UncertaintyChoice::Linear(rows) => {
            let a = DMatrix::from_fn(n, n, |i, j| if j <= i { rows[i][j] } else { 0.0 });
            UncertaintySpec::linear(a)?
        }
        UncertaintyChoice::BilinearExample(eps) => {
            bilinear_to_chained(&BilinearScenario::with_eps(*eps))?.0.uncertainty
        }
    })
}

/// Maps the configured initial vector to chain coordinates.
pub fn chained_init(cfg: &ScenarioConfig, init: &[f64]) -> Result<ChainedState, CliError> {
    Ok(match cfg.uncertainty {
        UncertaintyChoice::BilinearExample(eps) => {
            let (_, maps) = bilinear_to_chained(&BilinearScenario::with_eps(eps))?;
            maps.to_chained([init[0], init[1], init[2]])
        }
        _ => ChainedState::new(init[0], init[1..].to_vec()),
    })
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let sys = ChainedSystem::new(cfg.n, cfg.c0, uncertainty_spec(&cfg.uncertainty, cfg.n)?)?;
    let d = sys.derived_bounds(cfg.horizon)?.d;
    let init = chained_init(cfg, &cfg.init)?;
    let xi_init = cfg.xi_init.as_ref().map_or_else(|| DVector::zeros(cfg.n), |v| DVector::from_column_slice(v));
    Ok(Prepared { sys, init, xi_init, basis: Arc::new(PleBasis::new(cfg.n)?), d })
}

/// The law for `mode` with the formula gain, or `beta` when given. Gains
/// below the formula are rejected unless `allow_below` is set.
pub fn make_law(p: &Prepared, cfg: &ScenarioConfig, beta: Option<f64>, allow_below: bool) -> Result<Law, CliError> {
    Ok(match cfg.mode {
        Mode::State => {
            let law = StateFeedbackLaw::new(p.basis.clone(), cfg.horizon, p.d, cfg.c0)?;
            Law::State(match beta {
                None => law,
                Some(b) if allow_below => law.with_beta_unchecked(b)?,
                Some(b) => law.with_beta(b)?,
            })
        }
        Mode::Output => {
            let law = ObserverLaw::new(p.basis.clone(), cfg.horizon, p.d)?;
            Law::Output(match beta {
                None => law,
                Some(b) if allow_below => law.with_beta_unchecked(b)?,
                Some(b) => law.with_beta(b)?,
            })
        }
    })
}

pub fn formula_beta(p: &Prepared, cfg: &ScenarioConfig) -> Result<f64, CliError> {
    Ok(make_law(p, cfg, None, false)?.beta())
}

pub fn resolve_beta(choice: BetaChoice, formula: f64) -> f64 {
    match choice {
        BetaChoice::Formula => formula,
        BetaChoice::Multiple(k) => k * formula,
        BetaChoice::Value(v) => v,
    }
}

pub fn simulate(p: &Prepared, law: &Law, integrator: &IntegratorConfig) -> Result<Trajectory, CliError> {
    Ok(match law {
        Law::State(l) => simulate_state_feedback(&p.sys, l, &p.init, integrator)?,
        Law::Output(l) => simulate_output_feedback(&p.sys, l, &p.init, &p.xi_init, integrator)?,
    })
}

pub fn check(traj: &Trajectory, p: &Prepared, law: &Law) -> Result<VerificationReport, CliError> {
    Ok(match law {
        Law::State(l) => check_theorem1_bounds(traj, l, p.init.x0)?,
        Law::Output(l) => check_theorem2_bounds(traj, l, &p.init, &p.xi_init)?,
    })
}
