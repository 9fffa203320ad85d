//! Discrete test processes `U^i = u⁰ - τΣG^ℓ + ΣΣ H^{ℓ-1,j} ξ^{ℓ,j}` and a
//! Monte Carlo check of the discrete stochastic variational inequality
//!
//! `½E‖X^i - U^i‖² + τΣE J_ε(X^ℓ) ≤ ½‖X⁰ - u⁰‖² + τΣE[J_ε(U^ℓ) + (G^ℓ, X^ℓ - U^ℓ)]
//!   + (τ/2)ΣΣE‖P_h B_j(X^{ℓ-1}) - H^{ℓ-1,j}‖²`.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{FeError, SchemeError};
use crate::fespace::{FeSpace, Operators, State};
use crate::functionals::energy;
use crate::noise::{NoiseIncrement, NoiseModel};
use crate::scheme::Trajectory;

/// What a test family may look at when producing `G^ℓ` and `H^{ℓ-1,·}`:
/// everything strictly before time index `ℓ`.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedHistory<'a> {
    /// `ℓ`, the index of the step being built (1-based).
    pub step: usize,
    /// `X^0, …, X^{ℓ-1}`.
    pub states: &'a [State],
    /// `U^0, …, U^{ℓ-1}`.
    pub test_states: &'a [DVector<f64>],
    /// `ξ^1, …, ξ^{ℓ-1}`.
    pub increments: &'a [NoiseIncrement],
}

/// `H^{ℓ-1,j}` as a coefficient vector, or the common sparse case `c φ_d`.
#[derive(Debug, Clone, PartialEq)]
pub enum HColumn {
    Zero,
    Basis { dof: usize, coef: f64 },
    Dense(DVector<f64>),
}

impl HColumn {
    fn add_scaled_to(&self, out: &mut DVector<f64>, s: f64) {
        match self {
            HColumn::Zero => {}
            HColumn::Basis { dof, coef } => out[*dof] += s * coef,
            HColumn::Dense(v) => out.axpy(s, v, 1.0),
        }
    }

    fn to_dense(&self, dofs: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dofs);
        self.add_scaled_to(&mut v, 1.0);
        v
    }
}

/// A family of adapted test processes. Implementations only receive the
/// history before the step they build, so adaptedness holds by construction.
pub trait TestFamily: Sync {
    fn name(&self) -> String;

    /// `u⁰`, given `X⁰`.
    fn u0(&self, ops: &Operators, x0: &State) -> DVector<f64>;

    /// `G^ℓ`.
    fn g(&self, ops: &Operators, hist: &AdaptedHistory<'_>) -> DVector<f64>;

    /// `H^{ℓ-1,j}` for `j = 0..J`.
    fn h(&self, ops: &Operators, hist: &AdaptedHistory<'_>, j: usize) -> HColumn;
}

/// `u⁰ = X⁰`, `G = 0`, `H = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFamily;

/// Deterministic, time-constant coefficients built from finitely many basis
/// functions: `H^{ℓ-1,j} = h_coef φ_{d_j}` for `j < j0`, zero otherwise;
/// `G^ℓ = g` and `u⁰ = u0` fixed.
#[derive(Debug, Clone)]
pub struct FrozenFamily {
    pub j0: usize,
    pub h_coef: f64,
    pub g: DVector<f64>,
    pub u0: DVector<f64>,
}

/// Family defined by closures.
pub struct CustomFamily<U, G, H> {
    pub name: String,
    pub u0: U,
    pub g: G,
    pub h: H,
}

fn diffusion_column(hist: &AdaptedHistory<'_>, ops: &Operators, model: &NoiseModel, j: usize) -> HColumn {
    let prev = hist.states.last().expect("history holds X^0");
    match model.diffusion_column(ops.space(), prev, j) {
        Some((dof, coef)) => HColumn::Basis { dof, coef },
        None => HColumn::Zero,
    }
}

/// `u⁰ = X⁰`, `G = 0`, `H^{ℓ-1,j} = P_h B_j(X^{ℓ-1})` for the noise
/// operator of the trajectories it is compared with. The inequality then
/// holds pathwise.
#[derive(Debug, Clone, Copy)]
pub struct TrivialFamily {
    pub model: NoiseModel,
}

impl TrivialFamily {
    pub fn for_trajectory(traj: &Trajectory) -> Self {
        Self { model: traj.model }
    }
}

impl TestFamily for TrivialFamily {
    fn name(&self) -> String {
        "trivial".into()
    }

    fn u0(&self, _ops: &Operators, x0: &State) -> DVector<f64> {
        x0.coeffs().clone()
    }

    fn g(&self, ops: &Operators, _hist: &AdaptedHistory<'_>) -> DVector<f64> {
        DVector::zeros(ops.space().dof_count())
    }

    fn h(&self, ops: &Operators, hist: &AdaptedHistory<'_>, j: usize) -> HColumn {
        diffusion_column(hist, ops, &self.model, j)
    }
}

impl TestFamily for ZeroFamily {
    fn name(&self) -> String {
        "zero".into()
    }

    fn u0(&self, _ops: &Operators, x0: &State) -> DVector<f64> {
        x0.coeffs().clone()
    }

    fn g(&self, ops: &Operators, _hist: &AdaptedHistory<'_>) -> DVector<f64> {
        DVector::zeros(ops.space().dof_count())
    }

    fn h(&self, _ops: &Operators, _hist: &AdaptedHistory<'_>, _j: usize) -> HColumn {
        HColumn::Zero
    }
}

impl FrozenFamily {
    /// `G` and `u⁰` are the L² projections (onto the constrained space) of
    /// `g_fn` and `u0_fn`.
    pub fn new(
        ops: &Operators,
        j0: usize,
        h_coef: f64,
        g_fn: impl Fn([f64; 2]) -> f64,
        u0_fn: impl Fn([f64; 2]) -> f64,
    ) -> Result<Self, FeError> {
        let space = ops.space();
        let g = ops.project_own(space.nodal_interpolate(g_fn, false).coeffs())?.into_coeffs();
        let u0 = ops.project_own(space.nodal_interpolate(u0_fn, false).coeffs())?.into_coeffs();
        Ok(Self { j0, h_coef, g, u0 })
    }
}

impl TestFamily for FrozenFamily {
    fn name(&self) -> String {
        format!("frozen-j0-{}", self.j0)
    }

    fn u0(&self, _ops: &Operators, _x0: &State) -> DVector<f64> {
        self.u0.clone()
    }

    fn g(&self, _ops: &Operators, _hist: &AdaptedHistory<'_>) -> DVector<f64> {
        self.g.clone()
    }

    fn h(&self, ops: &Operators, _hist: &AdaptedHistory<'_>, j: usize) -> HColumn {
        if j < self.j0 {
            HColumn::Basis { dof: ops.space().free_dofs()[j], coef: self.h_coef }
        } else {
            HColumn::Zero
        }
    }
}

impl<U, G, H> TestFamily for CustomFamily<U, G, H>
where
    U: Fn(&Operators, &State) -> DVector<f64> + Sync,
    G: Fn(&Operators, &AdaptedHistory<'_>) -> DVector<f64> + Sync,
    H: Fn(&Operators, &AdaptedHistory<'_>, usize) -> HColumn + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn u0(&self, ops: &Operators, x0: &State) -> DVector<f64> {
        (self.u0)(ops, x0)
    }

    fn g(&self, ops: &Operators, hist: &AdaptedHistory<'_>) -> DVector<f64> {
        (self.g)(ops, hist)
    }

    fn h(&self, ops: &Operators, hist: &AdaptedHistory<'_>, j: usize) -> HColumn {
        (self.h)(ops, hist, j)
    }
}

/// One realized test process alongside its trajectory.
#[derive(Debug, Clone)]
pub struct TestProcess {
    /// `U^0, …, U^N`.
    pub u: Vec<DVector<f64>>,
    /// `G^1, …, G^N` (index `ℓ-1`).
    pub g: Vec<DVector<f64>>,
    /// `Σ_j ‖P_h B_j(X^{ℓ-1}) - H^{ℓ-1,j}‖²` for `ℓ = 1..N`.
    pub h_defect: Vec<f64>,
}

fn zero_constrained(space: &FeSpace, v: &mut DVector<f64>) {
    for (d, &c) in space.constrained().iter().enumerate() {
        if c {
            v[d] = 0.0;
        }
    }
}

/// Builds `U` for one trajectory. The recursion
/// `U^ℓ = U^{ℓ-1} - τG^ℓ + Σ_j H^{ℓ-1,j} ξ^{ℓ,j}` is applied exactly.
pub fn build_test_process(ops: &Operators, family: &dyn TestFamily, traj: &Trajectory) -> Result<TestProcess, SchemeError> {
    let space = ops.space();
    let n_dofs = space.dof_count();
    let j_count = space.free_dof_count();
    let tau = traj.params.tau();
    let mass = ops.mass_natural();
    let mut u0 = family.u0(ops, &traj.states[0]);
    if u0.len() != n_dofs {
        return Err(FeError::DimensionMismatch { expected: n_dofs, got: u0.len() }.into());
    }
    zero_constrained(space, &mut u0);
    let mut u = vec![u0];
    let mut g_all = Vec::with_capacity(traj.steps());
    let mut h_defect = Vec::with_capacity(traj.steps());
    for ell in 1..=traj.steps() {
        let inc = &traj.increments[ell - 1];
        if inc.len() != j_count {
            return Err(FeError::DimensionMismatch { expected: j_count, got: inc.len() }.into());
        }
        let hist = AdaptedHistory {
            step: ell,
            states: &traj.states[..ell],
            test_states: &u[..ell],
            increments: &traj.increments[..ell - 1],
        };
        let mut g = family.g(ops, &hist);
        if g.len() != n_dofs {
            return Err(FeError::DimensionMismatch { expected: n_dofs, got: g.len() }.into());
        }
        zero_constrained(space, &mut g);
        let prev = &traj.states[ell - 1];
        let mut next = &u[ell - 1] - &g * tau;
        let mut defect = 0.0;
        for j in 0..j_count {
            let h = family.h(ops, &hist, j);
            h.add_scaled_to(&mut next, inc.values[j]);
            let pb = match traj.model.diffusion_column(space, prev, j) {
                Some((dof, coef)) => HColumn::Basis { dof, coef },
                None => HColumn::Zero,
            };
            defect += match (&pb, &h) {
                (HColumn::Zero, HColumn::Zero) => 0.0,
                (HColumn::Basis { dof: a, coef: ca }, HColumn::Basis { dof: b, coef: cb }) if a == b => {
                    (ca - cb).powi(2) * mass.get(*a, *a)
                }
                (HColumn::Basis { dof, coef }, HColumn::Zero) | (HColumn::Zero, HColumn::Basis { dof, coef }) => {
                    coef * coef * mass.get(*dof, *dof)
                }
                _ => {
                    let d = pb.to_dense(n_dofs) - h.to_dense(n_dofs);
                    ops.l2_norm_sq(&d)
                }
            };
        }
        zero_constrained(space, &mut next);
        u.push(next);
        g_all.push(g);
        h_defect.push(defect);
    }
    Ok(TestProcess { u, g: g_all, h_defect })
}

/// Both sides of the inequality at every `i = 0..N` for one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseSides {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
}

pub fn pathwise_sides(ops: &Operators, traj: &Trajectory, test: &TestProcess) -> PathwiseSides {
    let p = &traj.params;
    let tau = p.tau();
    let g = traj.datum.coeffs();
    let x0 = traj.states[0].coeffs();
    let base = 0.5 * ops.l2_norm_sq(&(x0 - &test.u[0]));
    let mut lhs = vec![base];
    let mut rhs = vec![base];
    let (mut sum_jx, mut sum_r) = (0.0, 0.0);
    for ell in 1..=traj.steps() {
        let x = traj.states[ell].coeffs();
        let u = &test.u[ell];
        let d = x - u;
        sum_jx += tau * energy(ops, x, g, p.eps, p.lambda).total_jeps;
        sum_r += tau * (energy(ops, u, g, p.eps, p.lambda).total_jeps + ops.l2_inner(&test.g[ell - 1], &d));
        sum_r += 0.5 * tau * test.h_defect[ell - 1];
        lhs.push(0.5 * ops.l2_norm_sq(&d) + sum_jx);
        rhs.push(base + sum_r);
    }
    PathwiseSides { lhs, rhs }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SviRow {
    pub i: usize,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_se: f64,
    pub rhs_se: f64,
    /// Standard error of the per-realization difference `RHS - LHS`.
    pub diff_se: f64,
    /// Mean of `RHS - LHS`.
    pub slack: f64,
    pub budget: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct SviReport {
    pub family: String,
    pub realizations: usize,
    pub rows: Vec<SviRow>,
    /// Smallest `RHS - LHS` over all realizations and times.
    pub pathwise_min_slack: f64,
}

impl SviReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// `i, t, lhs, rhs, lhs_se, rhs_se, diff_se, slack, budget, pass`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "t", "lhs", "rhs", "lhs_se", "rhs_se", "diff_se", "slack", "budget", "pass"])?;
        for r in &self.rows {
            let mut rec = vec![r.i.to_string()];
            rec.extend(
                [r.t, r.lhs, r.rhs, r.lhs_se, r.rhs_se, r.diff_se, r.slack, r.budget]
                    .iter()
                    .map(|v| format!("{v:.16e}")),
            );
            rec.push(if r.pass { "PASS" } else { "FAIL" }.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solver tolerance budget at time index `i`: `i · 1e-6 · (1 + max ‖X‖²)`,
/// the per-step energy-inequality budget summed over steps.
pub fn tolerance_budget(i: usize, max_norm_sq: f64) -> f64 {
    i as f64 * 1e-6 * (1.0 + max_norm_sq)
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// PASS at `i` when `mean(RHS - LHS) ≥ -(2·se + budget)`, with `se` the
/// standard error of the paired difference (zero for a single realization).
pub fn verify_svi(ops: &Operators, trajectories: &[Trajectory], family: &dyn TestFamily) -> Result<SviReport, SchemeError> {
    let sides: Vec<PathwiseSides> = trajectories
        .iter()
        .map(|traj| build_test_process(ops, family, traj).map(|tp| pathwise_sides(ops, traj, &tp)))
        .collect::<Result<_, _>>()?;
    Ok(summarize_svi(ops, trajectories, &sides, family.name()))
}

pub fn summarize_svi(ops: &Operators, trajectories: &[Trajectory], sides: &[PathwiseSides], family: String) -> SviReport {
    let m = trajectories.len();
    let steps = trajectories.first().map_or(0, |t| t.steps());
    let max_norm = trajectories
        .iter()
        .flat_map(|t| t.states.iter())
        .map(|s| ops.l2_norm_sq(s.coeffs()))
        .fold(0.0, f64::max);
    let mut rows = Vec::with_capacity(steps + 1);
    let mut pathwise_min_slack = f64::INFINITY;
    for i in 0..=steps {
        let lhs: Vec<f64> = sides.iter().map(|s| s.lhs[i]).collect();
        let rhs: Vec<f64> = sides.iter().map(|s| s.rhs[i]).collect();
        let diff: Vec<f64> = rhs.iter().zip(&lhs).map(|(r, l)| r - l).collect();
        pathwise_min_slack = diff.iter().copied().fold(pathwise_min_slack, f64::min);
        let (l, lse) = mean_and_se(&lhs);
        let (r, rse) = mean_and_se(&rhs);
        let (slack, dse) = mean_and_se(&diff);
        let budget = tolerance_budget(i, max_norm);
        let stat = if dse.is_finite() { 2.0 * dse } else { 0.0 };
        rows.push(SviRow {
            i,
            t: trajectories[0].params.time(i),
            lhs: l,
            rhs: r,
            lhs_se: lse,
            rhs_se: rse,
            diff_se: dse,
            slack,
            budget,
            pass: slack >= -(stat + budget),
        });
    }
    SviReport { family, realizations: m, rows, pathwise_min_slack }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::ElementKind;
    use crate::noise::{NoiseKind, NoiseOperator};
    use crate::scheme::{run_trajectory, SchemeParams};
    use std::f64::consts::PI;

    fn setup(kind: ElementKind, sigma: f64, seed: u64) -> (Operators, Trajectory) {
        let ops = Operators::build(3, kind).unwrap();
        let x0 = ops.space().nodal_interpolate(|p| (PI * p[0]).sin() * (PI * p[1]).sin(), true);
        let g = ops.space().nodal_interpolate(|p| p[0] * (1.0 - p[0]) * p[1], true);
        let params = SchemeParams::new(0.02, 8, 1e-2, 10.0).unwrap();
        let model = NoiseModel::new(NoiseKind::Rademacher, NoiseOperator::Additive { sigma }, seed).unwrap();
        let traj = run_trajectory(&ops, &x0, &g, &model, &params).unwrap();
        (ops, traj)
    }

    #[test]
    fn zero_family_is_constant() {
        let (ops, traj) = setup(ElementKind::P1, 1.0, 1);
        let tp = build_test_process(&ops, &ZeroFamily, &traj).unwrap();
        for u in &tp.u {
            assert_eq!(u, traj.states[0].coeffs());
        }
    }

    #[test]
    fn constant_g_telescopes() {
        let (ops, traj) = setup(ElementKind::Cr, 1.0, 2);
        let c = ops.space().nodal_interpolate(|p| p[0] * p[1], true).into_coeffs();
        let fam = CustomFamily {
            name: "const-g".into(),
            u0: |_: &Operators, x0: &State| x0.coeffs().clone(),
            g: |_: &Operators, _: &AdaptedHistory<'_>| c.clone(),
            h: |_: &Operators, _: &AdaptedHistory<'_>, _: usize| HColumn::Zero,
        };
        let tp = build_test_process(&ops, &fam, &traj).unwrap();
        let tau = traj.params.tau();
        for (i, u) in tp.u.iter().enumerate() {
            let expected = traj.states[0].coeffs() - &c * (i as f64 * tau);
            assert!((u - expected).amax() < 1e-14);
        }
    }

    #[test]
    fn basis_h_reproduces_walks() {
        let sigma = 0.7;
        let (ops, traj) = setup(ElementKind::P1, sigma, 3);
        let tp = build_test_process(&ops, &TrivialFamily::for_trajectory(&traj), &traj).unwrap();
        let tau = traj.params.tau();
        let free = ops.space().free_dofs();
        for j in [0, 5, free.len() - 1] {
            let walk = traj.model.accumulate_walk(j, traj.steps(), tau);
            for i in 0..=traj.steps() {
                let expected = traj.states[0].coeffs()[free[j]] + sigma * walk.values[i];
                assert!((tp.u[i][free[j]] - expected).abs() < 1e-13);
            }
        }
        assert!(tp.h_defect.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn trivial_family_holds_pathwise() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            for seed in 0..3 {
                let (ops, traj) = setup(kind, 1.0, seed);
                let report = verify_svi(&ops, std::slice::from_ref(&traj), &TrivialFamily::for_trajectory(&traj)).unwrap();
                assert!(report.pass(), "{kind} seed {seed}");
                assert!(report.pathwise_min_slack >= -1e-6, "{}", report.pathwise_min_slack);
            }
        }
    }

    #[test]
    fn deterministic_zero_family_holds_pathwise() {
        let (ops, traj) = setup(ElementKind::P1, 0.0, 0);
        let report = verify_svi(&ops, std::slice::from_ref(&traj), &ZeroFamily).unwrap();
        assert!(report.pathwise_min_slack >= -1e-6);
        assert_eq!(report.rows.len(), traj.steps() + 1);
        assert_eq!(report.rows[0].slack, 0.0);
    }

    #[test]
    fn frozen_family_defect_counts_missing_columns() {
        let sigma = 0.5;
        let (ops, traj) = setup(ElementKind::P1, sigma, 4);
        let fam = FrozenFamily::new(&ops, 4, sigma, |_| 0.0, |p| (PI * p[0]).sin() * (PI * p[1]).sin()).unwrap();
        let tp = build_test_process(&ops, &fam, &traj).unwrap();
        let mass = ops.mass();
        let expected: f64 = ops.space().free_dofs()[4..].iter().map(|&d| sigma * sigma * mass.get(d, d)).sum();
        for d in &tp.h_defect {
            assert!((d - expected).abs() < 1e-14 * expected);
        }
        let mut buf = Vec::new();
        let report = verify_svi(&ops, std::slice::from_ref(&traj), &fam).unwrap();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), traj.steps() + 2);
    }
}
