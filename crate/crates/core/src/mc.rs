//! Monte Carlo driver. Realizations run on a private rayon pool; every
//! realization owns its seed and its solver state, and reductions run in
//! realization-index order, so results do not depend on the worker count.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FeError, McError, SchemeError};
use crate::fespace::{Operators, State};
use crate::functionals::{energy, energy_aggregate, hminus1_potential};
use crate::noise::NoiseModel;
use crate::scheme::{run_trajectory, SchemeParams, Trajectory};
use crate::svi::mean_and_se;

/// Bijective 64-bit mixer (splitmix64 finalizer).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of realization `index`: `base ⊕ splitmix64(index)`. Distinct indices
/// give distinct seeds because the mixer is a bijection.
pub fn realization_seed(base: u64, index: usize) -> u64 {
    base ^ splitmix64(index as u64)
}

/// Scalar time series extracted from a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    /// `‖X^i‖²`
    NormSq,
    /// `J_ε(X^i)` including the fidelity term.
    Jeps,
    /// `(λ/2)‖X^i - g‖²`
    Fidelity,
    /// Per-step energy-inequality slack (from `i = 1`).
    EnergySlack,
    /// Fixed-point iterations per step (from `i = 1`).
    FixedPointIterations,
    /// The single value `½ max‖X^i‖² + Σ(¼‖ΔX‖² + τJ_ε(X^i))`.
    EnergyAggregate,
}

impl Observable {
    pub fn series(self, ops: &Operators, traj: &Trajectory) -> Vec<f64> {
        let p = &traj.params;
        let g = traj.datum.coeffs();
        match self {
            Observable::NormSq => traj.states.iter().map(|x| ops.l2_norm_sq(x.coeffs())).collect(),
            Observable::Jeps => traj
                .states
                .iter()
                .map(|x| energy(ops, x.coeffs(), g, p.eps, p.lambda).total_jeps)
                .collect(),
            Observable::Fidelity => traj
                .states
                .iter()
                .map(|x| energy(ops, x.coeffs(), g, p.eps, p.lambda).fidelity)
                .collect(),
            Observable::EnergySlack => traj.slacks(),
            Observable::FixedPointIterations => traj.reports.iter().map(|r| r.iterations as f64).collect(),
            Observable::EnergyAggregate => vec![energy_aggregate(ops, traj)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Observable::NormSq => "norm-sq",
            Observable::Jeps => "jeps",
            Observable::Fidelity => "fidelity",
            Observable::EnergySlack => "energy-slack",
            Observable::FixedPointIterations => "fixed-point-iterations",
            Observable::EnergyAggregate => "energy-aggregate",
        }
    }
}

/// How a series becomes one number per realization, then one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Reduction {
    /// Mean of the terminal value.
    Mean,
    /// Mean of the squared terminal value.
    SecondMoment,
    /// Mean of the supremum over time.
    SupThenMean,
    /// Mean of the infimum over time.
    InfThenMean,
    /// Nearest-rank quantile of the terminal value.
    Quantile { q: f64 },
}

impl Reduction {
    fn per_realization(self, series: &[f64]) -> f64 {
        let last = series.last().copied().unwrap_or(f64::NAN);
        match self {
            Reduction::Mean | Reduction::Quantile { .. } => last,
            Reduction::SecondMoment => last * last,
            Reduction::SupThenMean => series.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Reduction::InfThenMean => series.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn label(self) -> String {
        match self {
            Reduction::Mean => "mean".into(),
            Reduction::SecondMoment => "second-moment".into(),
            Reduction::SupThenMean => "sup-then-mean".into(),
            Reduction::InfThenMean => "inf-then-mean".into(),
            Reduction::Quantile { q } => format!("quantile-{q}"),
        }
    }
}

/// Nearest-rank quantile: the `⌈q M⌉`-th smallest value (the smallest for `q = 0`).
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPlan {
    pub realizations: usize,
    pub base_seed: u64,
    /// Worker threads; 0 uses rayon's default.
    pub workers: usize,
    pub observables: Vec<(Observable, Reduction)>,
}

impl McPlan {
    pub fn new(realizations: usize, base_seed: u64) -> Self {
        Self { realizations, base_seed, workers: 0, observables: Vec::new() }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn observe(mut self, observable: Observable, reduction: Reduction) -> Self {
        self.observables.push((observable, reduction));
        self
    }

    pub fn validate(&self) -> Result<(), McError> {
        if self.realizations == 0 {
            return Err(McError::InvalidPlan("at least one realization is required".into()));
        }
        if let Some((_, Reduction::Quantile { q })) =
            self.observables.iter().find(|(_, r)| matches!(r, Reduction::Quantile { q } if !(0.0..=1.0).contains(q)))
        {
            return Err(McError::InvalidPlan(format!("quantile {q} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn seed(&self, index: usize) -> u64 {
        realization_seed(self.base_seed, index)
    }
}

/// Everything needed to integrate one realization.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub ops: Arc<Operators>,
    pub x0: State,
    pub datum: State,
    pub model: NoiseModel,
    pub params: SchemeParams,
}

impl Scenario {
    pub fn with_params(&self, params: SchemeParams) -> Self {
        Self { params, ..self.clone() }
    }

    pub fn run(&self, seed: u64) -> Result<Trajectory, SchemeError> {
        run_trajectory(&self.ops, &self.x0, &self.datum, &self.model.with_seed(seed), &self.params)
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, McError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| McError::Pool(e.to_string()))
}

/// Runs every realization and maps it through `f`; results come back in
/// index order. The first failure by index is reported.
pub fn run_realizations<T, F>(plan: &McPlan, scenario: &Scenario, f: F) -> Result<Vec<T>, McError>
where
    T: Send,
    F: Fn(usize, &Trajectory) -> T + Sync,
{
    plan.validate()?;
    let results: Vec<Result<T, SchemeError>> = pool(plan.workers)?.install(|| {
        (0..plan.realizations)
            .into_par_iter()
            .map(|r| scenario.run(plan.seed(r)).map(|traj| f(r, &traj)))
            .collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(index, res)| res.map_err(|source| McError::Realization { index, source }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEntry {
    pub observable: Observable,
    pub reduction: Reduction,
    pub estimate: f64,
    /// Sample standard deviation over `√M`; NaN when `M = 1` or for quantiles.
    pub stderr: f64,
    pub realizations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub entries: Vec<McEntry>,
}

impl McSummary {
    pub fn get(&self, observable: Observable, reduction: Reduction) -> Option<&McEntry> {
        self.entries.iter().find(|e| e.observable == observable && e.reduction == reduction)
    }

    /// `observable, reduction, estimate, stderr, realizations`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["observable", "reduction", "estimate", "stderr", "realizations"])?;
        for e in &self.entries {
            w.write_record([
                e.observable.name().to_string(),
                e.reduction.label(),
                format!("{:.16e}", e.estimate),
                format!("{:.16e}", e.stderr),
                e.realizations.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reduces per-realization values (one row per realization, one column per
/// plan entry) in index order.
pub fn summarize(plan: &McPlan, rows: &[Vec<f64>]) -> McSummary {
    let entries = plan
        .observables
        .iter()
        .enumerate()
        .map(|(k, &(observable, reduction))| {
            let values: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let (estimate, stderr) = match reduction {
                Reduction::Quantile { q } => (nearest_rank(&values, q), f64::NAN),
                _ => mean_and_se(&values),
            };
            McEntry { observable, reduction, estimate, stderr, realizations: values.len() }
        })
        .collect();
    McSummary { entries }
}

pub fn run_mc(plan: &McPlan, scenario: &Scenario) -> Result<McSummary, McError> {
    let ops = &scenario.ops;
    let rows = run_realizations(plan, scenario, |_, traj| {
        plan.observables
            .iter()
            .map(|&(o, r)| r.per_realization(&o.series(ops, traj)))
            .collect::<Vec<f64>>()
    })?;
    Ok(summarize(plan, &rows))
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Log-log slope with a delete-one jackknife over realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub stderr: f64,
    /// `slope ± 1.96 stderr`.
    pub ci: (f64, f64),
}

/// `rows[r][k]`: realization `r`'s mean at abscissa `x[k]`. The slope of
/// `log(mean_r rows) ` against `log x` and its jackknife error.
pub fn loglog_slope(x: &[f64], rows: &[Vec<f64>]) -> SlopeEstimate {
    let m = rows.len();
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let slope_of = |skip: Option<usize>| {
        let count = (m - skip.is_some() as usize) as f64;
        let ly: Vec<f64> = (0..x.len())
            .map(|k| {
                let s: f64 = rows.iter().enumerate().filter(|(r, _)| Some(*r) != skip).map(|(_, row)| row[k]).sum();
                (s / count).ln()
            })
            .collect();
        ols_slope(&lx, &ly)
    };
    let slope = slope_of(None);
    let stderr = if m < 2 {
        f64::NAN
    } else {
        let jk: Vec<f64> = (0..m).map(|r| slope_of(Some(r))).collect();
        let mean = jk.iter().sum::<f64>() / m as f64;
        ((m - 1) as f64 / m as f64 * jk.iter().map(|s| (s - mean).powi(2)).sum::<f64>()).sqrt()
    };
    SlopeEstimate { slope, stderr, ci: (slope - 1.96 * stderr, slope + 1.96 * stderr) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub lags: Vec<usize>,
    /// `t_ℓ = ℓ τ`.
    pub t_lags: Vec<f64>,
    /// `Ê‖X^{n+ℓ} - X^n‖⁴_{-1,h}` averaged over `n` and realizations.
    pub moments: Vec<f64>,
    /// Standard errors of `moments` over realizations.
    pub moment_se: Vec<f64>,
    /// `None` when some moment vanishes (no log-log fit possible).
    pub slope: Option<SlopeEstimate>,
    pub realizations: usize,
}

impl ScalingReport {
    pub fn is_degenerate(&self) -> bool {
        self.slope.is_none()
    }

    /// `lag, t, moment, moment_se` rows, then a `slope` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lag", "t", "moment", "moment_se"])?;
        for k in 0..self.lags.len() {
            w.write_record([
                self.lags[k].to_string(),
                format!("{:.16e}", self.t_lags[k]),
                format!("{:.16e}", self.moments[k]),
                format!("{:.16e}", self.moment_se[k]),
            ])?;
        }
        let (s, lo, hi) = match &self.slope {
            Some(e) => (e.slope, e.ci.0, e.ci.1),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        w.write_record(["slope".to_string(), format!("{s:.16e}"), format!("{lo:.16e}"), format!("{hi:.16e}")])?;
        w.flush()?;
        Ok(())
    }
}

/// Per-lag means of `‖X^{n+ℓ} - X^n‖⁴_{-1,h}` over all admissible `n` for
/// one trajectory.
pub fn increment_moments(ops: &Operators, traj: &Trajectory, lags: &[usize]) -> Result<Vec<f64>, FeError> {
    let mass = ops.mass();
    let duals: Vec<DVector<f64>> = traj
        .states
        .iter()
        .map(|x| hminus1_potential(ops, x.coeffs()).map(|z| mass.apply(&z)))
        .collect::<Result<_, _>>()?;
    let n = traj.steps();
    Ok(lags
        .iter()
        .map(|&lag| {
            let count = n + 1 - lag;
            (0..count)
                .map(|a| {
                    let dx = traj.states[a + lag].coeffs() - traj.states[a].coeffs();
                    let dz = &duals[a + lag] - &duals[a];
                    dx.dot(&dz).max(0.0).powi(2)
                })
                .sum::<f64>()
                / count as f64
        })
        .collect())
}

pub fn increment_scaling_study(plan: &McPlan, scenario: &Scenario, lags: &[usize]) -> Result<ScalingReport, McError> {
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if lags.is_empty() || lags.contains(&0) || scenario.params.steps < 2 * max_lag {
        return Err(McError::InvalidPlan(format!(
            "lags {lags:?} need positive entries and N ≥ 2·max lag (N = {})",
            scenario.params.steps
        )));
    }
    let ops = &scenario.ops;
    let rows = run_realizations(plan, scenario, |_, traj| increment_moments(ops, traj, lags))?
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| McError::Realization { index, source: SchemeError::Fe(e) }))
        .collect::<Result<Vec<_>, _>>()?;
    let tau = scenario.params.tau();
    let t_lags: Vec<f64> = lags.iter().map(|&l| l as f64 * tau).collect();
    let (moments, moment_se): (Vec<f64>, Vec<f64>) = (0..lags.len())
        .map(|k| mean_and_se(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .unzip();
    let slope = if moments.iter().all(|&m| m > 0.0) { Some(loglog_slope(&t_lags, &rows)) } else { None };
    Ok(ScalingReport { lags: lags.to_vec(), t_lags, moments, moment_se, slope, realizations: plan.realizations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementReport {
    pub steps: Vec<usize>,
    pub taus: Vec<f64>,
    /// `Ê[(aggregate)²]` per `N`.
    pub estimates: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Slope of `log estimate` against `log N` (positive means growth under
    /// refinement) with a two-sided 95% band from the per-`N` standard errors
    /// (propagated by linearization).
    pub slope: f64,
    pub slope_ci: (f64, f64),
}

impl RefinementReport {
    /// Finite estimates and a slope CI that contains 0 or lies below it.
    pub fn non_trending(&self) -> bool {
        self.estimates.iter().all(|e| e.is_finite()) && self.slope_ci.0 <= 0.0
    }
}

/// The energy aggregate's second moment at several `N` with the same base
/// seed at every refinement level.
pub fn aggregate_refinement_study(plan: &McPlan, scenario: &Scenario, steps: &[usize]) -> Result<RefinementReport, McError> {
    if steps.len() < 2 || steps.contains(&0) {
        return Err(McError::InvalidPlan(format!("refinement needs at least two positive step counts, got {steps:?}")));
    }
    let ops = &scenario.ops;
    let mut estimates = Vec::new();
    let mut stderrs = Vec::new();
    let mut taus = Vec::new();
    for &n in steps {
        let sc = scenario.with_params(scenario.params.with_steps(n));
        let values = run_realizations(plan, &sc, |_, traj| energy_aggregate(ops, traj).powi(2))?;
        let (m, se) = mean_and_se(&values);
        estimates.push(m);
        stderrs.push(if se.is_finite() { se } else { 0.0 });
        taus.push(sc.params.tau());
    }
    let lx: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = estimates.iter().map(|e| e.ln()).collect();
    let slope = ols_slope(&lx, &ly);
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let var: f64 = lx
        .iter()
        .zip(estimates.iter().zip(&stderrs))
        .map(|(a, (e, s))| ((a - mx) / sxx).powi(2) * (s / e).powi(2))
        .sum();
    let half = 1.96 * var.sqrt();
    Ok(RefinementReport { steps: steps.to_vec(), taus, estimates, stderrs, slope, slope_ci: (slope - half, slope + half) })
}
