//! Implicit time stepping for the regularized stochastic TV flow.
//!
//! Each step solves
//! `(X^i - X^{i-1}, v) + τ(∇X^i/√(|∇X^i|²+ε²), ∇v) + τλ(X^i - g, v) = Σ_j (B_j(X^{i-1}), v) ξ^{i,j}`
//! by lagged diffusivity: the weights `1/√(|∇Y^k|²+ε²)` are frozen per
//! element and the resulting SPD system is solved for `Y^{k+1}`.

use std::io::{self, Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FeError, SchemeError};
use crate::fespace::{ElementKind, Operators, SpaceTag, State};
use crate::functionals::energy;
use crate::linalg::{pcg, CgOptions, CholeskySolver, SparseOperator};
use crate::noise::{read_f64, read_u64, NoiseIncrement, NoiseModel};

const TRAJECTORY_MAGIC: &[u8; 8] = b"STVFTR01";

/// Norm in which fixed-point updates are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPointNorm {
    #[default]
    L2,
    Euclidean,
}

/// Solver for the SPD system of each fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolver {
    /// Sparse Cholesky with a symbolic analysis shared by all iterations.
    #[default]
    Cholesky,
    /// Jacobi-preconditioned CG to relative residual `lin_tol`.
    Cg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeParams {
    pub t_final: f64,
    /// `N`; the step is `τ = T/N`.
    pub steps: usize,
    pub eps: f64,
    pub lambda: f64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub lin_tol: f64,
    pub fp_norm: FixedPointNorm,
    pub linear_solver: LinearSolver,
}

impl SchemeParams {
    pub fn new(t_final: f64, steps: usize, eps: f64, lambda: f64) -> Result<Self, SchemeError> {
        let p = Self {
            t_final,
            steps,
            eps,
            lambda,
            fp_tol: 1e-4,
            fp_max_iter: 200,
            lin_tol: 1e-10,
            fp_norm: FixedPointNorm::L2,
            linear_solver: LinearSolver::Cholesky,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        let bad = |m: String| Err(SchemeError::InvalidParams(m));
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return bad(format!("T = {} must be positive", self.t_final));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return bad(format!("ε = {} must be positive", self.eps));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("λ = {} must be non-negative", self.lambda));
        }
        if !(self.fp_tol > 0.0) || !(self.lin_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.fp_max_iter == 0 {
            return bad("at least one fixed-point iteration is required".into());
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        if self.steps == 0 {
            self.t_final
        } else {
            self.t_final / self.steps as f64
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t_final
        } else {
            i as f64 * self.tau()
        }
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self { steps, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iterations: usize,
    /// Norm of the last fixed-point update.
    pub residual: f64,
    /// Total CG iterations; zero with the direct solver.
    pub cg_iterations: usize,
    /// RHS minus LHS of the pathwise energy inequality for this step.
    pub energy_slack: f64,
}

/// Reusable solver state for one space and parameter set. Not shared across
/// threads; each realization builds its own.
pub struct Stepper<'a> {
    ops: &'a Operators,
    params: SchemeParams,
    system: SparseOperator,
    cholesky: Option<CholeskySolver>,
    weights: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(ops: &'a Operators, params: SchemeParams) -> Result<Self, SchemeError> {
        params.validate()?;
        let space = ops.space();
        let weights = vec![1.0; space.mesh().triangle_count()];
        let system = space.pattern().assemble(|_| [[0.0; 3]; 3], true);
        let cholesky = match params.linear_solver {
            LinearSolver::Cholesky => Some(
                CholeskySolver::new(&system).map_err(|source| SchemeError::LinearSolve { step: 0, source })?,
            ),
            LinearSolver::Cg => None,
        };
        Ok(Self { ops, params, system, cholesky, weights })
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    /// Right-hand side `M X^{i-1} + τλ M g + (noise load)`, zero on
    /// constrained rows.
    fn rhs(&self, prev: &DVector<f64>, g: &DVector<f64>, noise: &DVector<f64>) -> DVector<f64> {
        let tau = self.params.tau();
        let mn = self.ops.mass_natural();
        let mut rhs = mn.apply(&(prev + noise));
        if self.params.lambda != 0.0 {
            rhs.axpy(tau * self.params.lambda, &mn.apply(g), 1.0);
        }
        for (d, &c) in self.ops.space().constrained().iter().enumerate() {
            if c {
                rhs[d] = 0.0;
            }
        }
        rhs
    }

    fn update_weights(&mut self, y: &DVector<f64>) {
        let space = self.ops.space();
        let eps2 = self.params.eps * self.params.eps;
        for (t, w) in self.weights.iter_mut().enumerate() {
            let [gx, gy] = space.gradient_of(y, t);
            *w = 1.0 / (gx * gx + gy * gy + eps2).sqrt();
        }
    }

    fn reassemble(&mut self) {
        let space = self.ops.space();
        let tau = self.params.tau();
        let scale = 1.0 + tau * self.params.lambda;
        let m = space.element_mass();
        let weights = &self.weights;
        space.pattern().reassemble(
            &mut self.system,
            |t| {
                let mut k = space.element_stiffness(t, tau * weights[t]);
                for a in 0..3 {
                    for b in 0..3 {
                        k[a][b] += scale * m[a][b];
                    }
                }
                k
            },
            true,
        );
    }

    fn update_norm(&self, dy: &DVector<f64>) -> f64 {
        match self.params.fp_norm {
            FixedPointNorm::L2 => self.ops.l2_norm_sq(dy).max(0.0).sqrt(),
            FixedPointNorm::Euclidean => dy.norm(),
        }
    }

    /// One implicit step from `prev` with noise coefficients `noise` (the
    /// function `Σ_j B_j(X^{i-1}) ξ^{i,j}`). `index` is only used in errors.
    pub fn step_with_noise(
        &mut self,
        prev: &State,
        g: &State,
        noise: &DVector<f64>,
        index: usize,
    ) -> Result<(State, StepReport), SchemeError> {
        let space = self.ops.space().clone();
        space.check(prev)?;
        space.check(g)?;
        if noise.len() != space.dof_count() {
            return Err(FeError::DimensionMismatch { expected: space.dof_count(), got: noise.len() }.into());
        }
        let rhs = self.rhs(prev.coeffs(), g.coeffs(), noise);
        let cg = CgOptions { rel_tol: self.params.lin_tol, max_iter: 20_000 };
        let mut y = prev.coeffs().clone();
        for (d, &c) in space.constrained().iter().enumerate() {
            if c {
                y[d] = 0.0;
            }
        }
        let mut cg_iterations = 0;
        let mut residual = f64::INFINITY;
        for k in 1..=self.params.fp_max_iter {
            self.update_weights(&y);
            self.reassemble();
            let lin_err = |source| SchemeError::LinearSolve { step: index, source };
            let next = match &self.cholesky {
                Some(chol) => {
                    let mut next = rhs.clone();
                    chol.factor(&self.system).map_err(lin_err)?.solve_in_place(&mut next);
                    next
                }
                None => {
                    let mut next = y.clone();
                    cg_iterations += pcg(&self.system, &rhs, &mut next, cg).map_err(lin_err)?.iterations;
                    next
                }
            };
            let update = &next - &y;
            residual = self.update_norm(&update);
            if residual < self.params.fp_tol {
                let report = StepReport { iterations: k, residual, cg_iterations, energy_slack: f64::NAN };
                return Ok((State::from_coeffs(&space, next)?, report));
            }
            y = next;
        }
        Err(SchemeError::FixedPointDivergence { step: index, iterations: self.params.fp_max_iter, residual })
    }

    pub fn step(
        &mut self,
        prev: &State,
        inc: &NoiseIncrement,
        g: &State,
        model: &NoiseModel,
    ) -> Result<(State, StepReport), SchemeError> {
        let noise = model.noise_coeffs(self.ops.space(), prev, inc)?;
        self.step_with_noise(prev, g, &noise, inc.index)
    }
}

/// Single step with a freshly built [`Stepper`].
pub fn step(
    ops: &Operators,
    prev: &State,
    inc: &NoiseIncrement,
    g: &State,
    model: &NoiseModel,
    params: &SchemeParams,
) -> Result<(State, StepReport), SchemeError> {
    Stepper::new(ops, *params)?.step(prev, inc, g, model)
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tag: SpaceTag,
    pub params: SchemeParams,
    pub model: NoiseModel,
    pub datum: State,
    /// `X^0, …, X^N`.
    pub states: Vec<State>,
    /// `ξ^{1}, …, ξ^{N}`.
    pub increments: Vec<NoiseIncrement>,
    pub reports: Vec<StepReport>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn terminal(&self) -> &State {
        self.states.last().expect("trajectory holds X^0")
    }

    pub fn slacks(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.energy_slack).collect()
    }
}

/// Integrates `N` steps from `X^0 = P_h x0`.
pub fn run_trajectory(
    ops: &Operators,
    x0: &State,
    g: &State,
    model: &NoiseModel,
    params: &SchemeParams,
) -> Result<Trajectory, SchemeError> {
    let space = ops.space();
    space.check(x0)?;
    space.check(g)?;
    let mut stepper = Stepper::new(ops, *params)?;
    let tau = params.tau();
    let j_count = space.free_dof_count();
    let mut states = Vec::with_capacity(params.steps + 1);
    states.push(ops.project_own(x0.coeffs())?);
    let mut increments = Vec::with_capacity(params.steps);
    let mut reports = Vec::with_capacity(params.steps);
    let j0 = energy_jeps_zero(ops, g, params);
    for i in 1..=params.steps {
        let prev = &states[i - 1];
        let inc = model.draw_increment(i, tau, j_count);
        let noise = model.noise_coeffs(space, prev, &inc)?;
        let (next, mut report) = stepper.step_with_noise(prev, g, &noise, i)?;
        report.energy_slack = step_slack(ops, prev, &next, g, &noise, params, j0);
        states.push(next);
        increments.push(inc);
        reports.push(report);
    }
    Ok(Trajectory { tag: space.tag(), params: *params, model: *model, datum: g.clone(), states, increments, reports })
}

/// `J_ε(0) = ε|O| + (λ/2)‖g‖²`.
fn energy_jeps_zero(ops: &Operators, g: &State, params: &SchemeParams) -> f64 {
    params.eps + 0.5 * params.lambda * ops.l2_norm_sq(g.coeffs())
}

fn step_slack(
    ops: &Operators,
    prev: &State,
    next: &State,
    g: &State,
    noise: &DVector<f64>,
    params: &SchemeParams,
    j0: f64,
) -> f64 {
    let tau = params.tau();
    let (xp, xn) = (prev.coeffs(), next.coeffs());
    let dx = xn - xp;
    let j = energy(ops, xn, g.coeffs(), params.eps, params.lambda).total_jeps;
    let lhs = 0.5 * ops.l2_norm_sq(xn) - 0.5 * ops.l2_norm_sq(xp) + 0.25 * ops.l2_norm_sq(&dx) + tau * j;
    let rhs = tau * j0 + ops.l2_inner(noise, xp) + ops.l2_norm_sq(noise);
    rhs - lhs
}

/// Per-step slacks of
/// `½‖X^i‖² - ½‖X^{i-1}‖² + ¼‖X^i - X^{i-1}‖² + τJ_ε(X^i) ≤ τJ_ε(0) + (ΔW^i, X^{i-1}) + ‖ΔW^i‖²`,
/// recomputed from the stored states and increments.
pub fn check_energy_inequality(ops: &Operators, traj: &Trajectory) -> Result<Vec<f64>, SchemeError> {
    let j0 = energy_jeps_zero(ops, &traj.datum, &traj.params);
    let mut slacks = Vec::with_capacity(traj.steps());
    for i in 1..=traj.steps() {
        let prev = &traj.states[i - 1];
        let noise = traj.model.noise_coeffs(ops.space(), prev, &traj.increments[i - 1])?;
        slacks.push(step_slack(ops, prev, &traj.states[i], &traj.datum, &noise, &traj.params, j0));
    }
    Ok(slacks)
}

/// Largest absolute entry of the nonlinear step residual tested against
/// every free basis function.
pub fn step_residual(
    ops: &Operators,
    prev: &State,
    next: &State,
    g: &State,
    noise: &DVector<f64>,
    params: &SchemeParams,
) -> f64 {
    let space = ops.space();
    let tau = params.tau();
    let mn = ops.mass_natural();
    let xn = next.coeffs();
    let mut r = mn.apply(&(xn - prev.coeffs() - noise));
    if params.lambda != 0.0 {
        r.axpy(tau * params.lambda, &mn.apply(&(xn - g.coeffs())), 1.0);
    }
    let area = space.mesh().triangle_area();
    for t in 0..space.mesh().triangle_count() {
        let grad = space.gradient_of(xn, t);
        let w = 1.0 / (grad[0] * grad[0] + grad[1] * grad[1] + params.eps * params.eps).sqrt();
        let lg = space.local_gradients(t);
        for (k, &d) in space.local_dofs(t).iter().enumerate() {
            r[d] += tau * area * w * (grad[0] * lg[k][0] + grad[1] * lg[k][1]);
        }
    }
    space.free_dofs().iter().map(|&d| r[d].abs()).fold(0.0, f64::max)
}

/// Header and body of a binary trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDump {
    pub kind: ElementKind,
    pub level: u32,
    pub steps: usize,
    pub tau: f64,
    pub eps: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub seed: u64,
    pub states: Vec<DVector<f64>>,
    pub increments: Vec<DVector<f64>>,
}

/// Little-endian: magic, kind (u8), level (u32), `N` (u64), `τ, ε, λ, σ`
/// (f64), seed (u64), then `(N+1) × dofs` state values and `N × J`
/// increment values.
pub fn write_trajectory<W: Write>(mut out: W, traj: &Trajectory) -> io::Result<()> {
    out.write_all(TRAJECTORY_MAGIC)?;
    out.write_all(&[traj.tag.kind.code()])?;
    out.write_all(&traj.tag.level.to_le_bytes())?;
    out.write_all(&(traj.steps() as u64).to_le_bytes())?;
    for v in [traj.params.tau(), traj.params.eps, traj.params.lambda, traj.model.sigma()] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&traj.model.seed.to_le_bytes())?;
    for s in &traj.states {
        for v in s.coeffs().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for inc in &traj.increments {
        for v in inc.values.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dump; `dof_count` fixes the state length and the increment
/// length is inferred from what remains.
pub fn read_trajectory<R: Read>(mut input: R, dof_count: usize) -> io::Result<TrajectoryDump> {
    let invalid = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(invalid("not a trajectory dump"));
    }
    let mut code = [0u8; 1];
    input.read_exact(&mut code)?;
    let kind = ElementKind::from_code(code[0]).ok_or_else(|| invalid("unknown element kind"))?;
    let mut level = [0u8; 4];
    input.read_exact(&mut level)?;
    let level = u32::from_le_bytes(level);
    let steps = read_u64(&mut input)? as usize;
    let tau = read_f64(&mut input)?;
    let eps = read_f64(&mut input)?;
    let lambda = read_f64(&mut input)?;
    let sigma = read_f64(&mut input)?;
    let seed = read_u64(&mut input)?;
    let mut states = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let mut s = DVector::zeros(dof_count);
        for v in s.iter_mut() {
            *v = read_f64(&mut input)?;
        }
        states.push(s);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    let values: Vec<f64> = rest
        .chunks(8)
        .map(|c| <[u8; 8]>::try_from(c).map(f64::from_le_bytes))
        .collect::<Result<_, _>>()
        .map_err(|_| invalid("truncated increment block"))?;
    let increments = if steps == 0 {
        if !values.is_empty() {
            return Err(invalid("increments without steps"));
        }
        Vec::new()
    } else {
        if values.len() % steps != 0 {
            return Err(invalid("increment block is not N × J"));
        }
        let j = values.len() / steps;
        values.chunks(j.max(1)).take(steps).map(|c| DVector::from_column_slice(c)).collect()
    };
    Ok(TrajectoryDump { kind, level, steps, tau, eps, lambda, sigma, seed, states, increments })
}

/// One CSV row per step: `i, t_i, ‖X^i‖, J_ε(X^i), fidelity, fp_iterations, energy_slack`.
pub fn write_step_csv<W: Write>(out: W, ops: &Operators, traj: &Trajectory) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "t", "l2_norm", "j_eps", "fidelity", "fp_iterations", "energy_slack"])?;
    for (i, x) in traj.states.iter().enumerate() {
        let e = energy(ops, x.coeffs(), traj.datum.coeffs(), traj.params.eps, traj.params.lambda);
        let (iters, slack) = match i {
            0 => (0, f64::NAN),
            _ => (traj.reports[i - 1].iterations, traj.reports[i - 1].energy_slack),
        };
        w.write_record([
            i.to_string(),
            format!("{:.16e}", traj.params.time(i)),
            format!("{:.16e}", ops.l2_norm_sq(x.coeffs()).sqrt()),
            format!("{:.16e}", e.total_jeps),
            format!("{:.16e}", e.fidelity),
            iters.to_string(),
            format!("{:.16e}", slack),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseKind, NoiseOperator};
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn bump(p: [f64; 2]) -> f64 {
        (PI * p[0]).sin() * (PI * p[1]).sin()
    }

    fn rademacher(sigma: f64, seed: u64) -> NoiseModel {
        NoiseModel::new(NoiseKind::Rademacher, NoiseOperator::Additive { sigma }, seed).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(SchemeParams::new(0.1, 10, 0.0, 1.0).is_err());
        assert!(SchemeParams::new(0.1, 10, 1e-3, -1.0).is_err());
        assert!(SchemeParams::new(-0.1, 10, 1e-3, 1.0).is_err());
        let p = SchemeParams::new(0.1, 100, 1e-4, 200.0).unwrap();
        assert_eq!(p.time(100), 0.1);
        assert!((p.tau() - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn zero_is_stationary() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let ops = Operators::build(2, kind).unwrap();
            let z = State::zeros(ops.space());
            let params = SchemeParams::new(0.1, 5, 1e-3, 0.0).unwrap();
            let traj = run_trajectory(&ops, &z, &z, &NoiseModel::zero(), &params).unwrap();
            for s in &traj.states {
                assert_eq!(s.coeffs().amax(), 0.0);
            }
            // LHS and RHS both reduce to τ J_ε(0) = τε.
            for slack in traj.slacks() {
                assert!(slack.abs() < 1e-18);
            }
        }
    }

    #[test]
    fn zero_steps_gives_projection() {
        let ops = Operators::build(2, ElementKind::P1).unwrap();
        let x0 = ops.space().nodal_interpolate(|p| p[0] + p[1], false);
        let params = SchemeParams::new(0.1, 0, 1e-2, 0.0).unwrap();
        let traj = run_trajectory(&ops, &x0, &State::zeros(ops.space()), &NoiseModel::zero(), &params).unwrap();
        assert_eq!(traj.states.len(), 1);
        let p = ops.project_own(x0.coeffs()).unwrap();
        assert_eq!(traj.states[0], p);
    }

    #[test]
    fn residual_and_energy_slack_on_noisy_run() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let ops = Operators::build(3, kind).unwrap();
            let x0 = ops.space().nodal_interpolate(bump, true);
            let g = ops.space().nodal_interpolate(|p| p[0] * (1.0 - p[0]), true);
            let params = SchemeParams::new(0.05, 10, 1e-2, 10.0).unwrap();
            let model = rademacher(0.5, 4);
            let traj = run_trajectory(&ops, &x0, &g, &model, &params).unwrap();
            let bound = 10.0 * params.fp_tol * ops.mass().norm_inf();
            let max_norm = traj.states.iter().map(|s| ops.l2_norm_sq(s.coeffs())).fold(0.0, f64::max);
            for i in 1..=params.steps {
                let noise = model.noise_coeffs(ops.space(), &traj.states[i - 1], &traj.increments[i - 1]).unwrap();
                let r = step_residual(&ops, &traj.states[i - 1], &traj.states[i], &g, &noise, &params);
                assert!(r <= bound, "{kind} step {i}: residual {r} > {bound}");
                assert!(traj.reports[i - 1].residual < params.fp_tol);
            }
            let recomputed = check_energy_inequality(&ops, &traj).unwrap();
            assert_eq!(recomputed, traj.slacks());
            for s in recomputed {
                assert!(s >= -1e-6 * (1.0 + max_norm), "{kind}: slack {s}");
            }
        }
    }

    #[test]
    fn deterministic_energy_decreases() {
        for kind in [ElementKind::P1, ElementKind::Cr] {
            let ops = Operators::build(3, kind).unwrap();
            let x0 = ops.space().nodal_interpolate(|p| if p[0] < 0.5 { bump(p) } else { 0.0 }, true);
            let g = ops.space().nodal_interpolate(bump, true);
            let params = SchemeParams::new(0.05, 10, 1e-3, 20.0).unwrap();
            let traj = run_trajectory(&ops, &x0, &g, &NoiseModel::zero(), &params).unwrap();
            let e: Vec<f64> = traj
                .states
                .iter()
                .map(|s| energy(&ops, s.coeffs(), g.coeffs(), params.eps, params.lambda).total_jeps)
                .collect();
            for w in e.windows(2) {
                assert!(w[1] <= w[0] + 1e-8, "{kind}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let ops = Operators::build(3, ElementKind::Cr).unwrap();
        let x0 = ops.space().nodal_interpolate(bump, true);
        let params = SchemeParams::new(0.02, 4, 1e-2, 5.0).unwrap();
        let model = rademacher(1.0, 77);
        let a = run_trajectory(&ops, &x0, &x0, &model, &params).unwrap();
        let b = run_trajectory(&ops, &x0, &x0, &model, &params).unwrap();
        assert_eq!(a.states, b.states);
        let c = run_trajectory(&ops, &x0, &x0, &model.with_seed(78), &params).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn solver_consistency() {
        let ops = Operators::build(3, ElementKind::P1).unwrap();
        let x0 = ops.space().nodal_interpolate(bump, true);
        let g = ops.space().nodal_interpolate(|p| p[0] * p[1] * (1.0 - p[0]), true);
        // Each accepted step sits within about tol ρ/(1-ρ) of the exact
        // step, so final states agree to a few multiples of N tol.
        for tol in [1e-4, 1e-6, 1e-8] {
            let params = SchemeParams { fp_tol: tol, fp_max_iter: 2000, ..SchemeParams::new(0.02, 4, 1e-2, 5.0).unwrap() };
            let tight = SchemeParams { fp_tol: tol / 10.0, fp_max_iter: 2 * params.fp_max_iter, ..params };
            let a = run_trajectory(&ops, &x0, &g, &NoiseModel::zero(), &params).unwrap();
            let b = run_trajectory(&ops, &x0, &g, &NoiseModel::zero(), &tight).unwrap();
            let d = a.terminal().coeffs() - b.terminal().coeffs();
            assert!(ops.l2_norm_sq(&d).sqrt() < 10.0 * params.steps as f64 * tol);
        }
    }

    #[test]
    fn direct_and_iterative_inner_solvers_agree() {
        let ops = Operators::build(3, ElementKind::Cr).unwrap();
        let x0 = ops.space().nodal_interpolate(bump, true);
        let base = SchemeParams { fp_tol: 1e-9, fp_max_iter: 2000, ..SchemeParams::new(0.02, 3, 1e-2, 5.0).unwrap() };
        let cg = SchemeParams { linear_solver: LinearSolver::Cg, lin_tol: 1e-13, ..base };
        let model = rademacher(0.5, 9);
        let a = run_trajectory(&ops, &x0, &x0, &model, &base).unwrap();
        let b = run_trajectory(&ops, &x0, &x0, &model, &cg).unwrap();
        assert!((a.terminal().coeffs() - b.terminal().coeffs()).amax() < 1e-8);
        assert!(b.reports.iter().all(|r| r.cg_iterations > 0));
    }

    #[test]
    fn divergence_is_reported() {
        let ops = Operators::build(3, ElementKind::P1).unwrap();
        let x0 = ops.space().nodal_interpolate(bump, true);
        let params = SchemeParams { fp_max_iter: 1, fp_tol: 1e-14, ..SchemeParams::new(0.02, 4, 1e-3, 0.0).unwrap() };
        let err = run_trajectory(&ops, &x0, &x0, &NoiseModel::zero(), &params).unwrap_err();
        assert!(matches!(err, SchemeError::FixedPointDivergence { step: 1, iterations: 1, .. }));
    }

    /// Damped Newton on the free dofs with dense algebra.
    fn newton_oracle(ops: &Operators, prev: &DVector<f64>, g: &DVector<f64>, p: &SchemeParams) -> DVector<f64> {
        let space = ops.space();
        let free = space.free_dofs();
        let nf = free.len();
        let tau = p.tau();
        let area = space.mesh().triangle_area();
        let m = DMatrix::from_fn(nf, nf, |r, c| ops.mass().get(free[r], free[c]));
        let lift = |y: &DVector<f64>| {
            let mut full = DVector::zeros(space.dof_count());
            for (r, &d) in free.iter().enumerate() {
                full[d] = y[r];
            }
            full
        };
        let restrict = |v: &DVector<f64>| DVector::from_iterator(nf, free.iter().map(|&d| v[d]));
        let (pf, gf) = (restrict(prev), restrict(g));
        let local = |t: usize| -> Vec<Option<usize>> {
            space.local_dofs(t).iter().map(|d| free.iter().position(|f| f == d)).collect()
        };
        let eval = |y: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
            let full = lift(y);
            let mut f = &m * (y - &pf) + &m * (y - &gf) * (tau * p.lambda);
            let mut jac = &m * (1.0 + tau * p.lambda);
            for t in 0..space.mesh().triangle_count() {
                let gr = space.gradient_of(&full, t);
                let s = (gr[0] * gr[0] + gr[1] * gr[1] + p.eps * p.eps).sqrt();
                let lg = space.local_gradients(t);
                let idx = local(t);
                for a in 0..3 {
                    let Some(ra) = idx[a] else { continue };
                    let ga = lg[a][0] * gr[0] + lg[a][1] * gr[1];
                    f[ra] += tau * area * ga / s;
                    for b in 0..3 {
                        let Some(rb) = idx[b] else { continue };
                        let gb = lg[b][0] * gr[0] + lg[b][1] * gr[1];
                        let dot = lg[a][0] * lg[b][0] + lg[a][1] * lg[b][1];
                        jac[(ra, rb)] += tau * area * (dot / s - ga * gb / (s * s * s));
                    }
                }
            }
            (f, jac)
        };
        let mut y = pf.clone();
        for _ in 0..100 {
            let (f, jac) = eval(&y);
            if f.norm() < 1e-15 {
                break;
            }
            let dir = jac.lu().solve(&f).unwrap();
            let mut step = 1.0;
            while step > 1e-6 {
                let cand = &y - &dir * step;
                if eval(&cand).0.norm() < f.norm() {
                    y = cand;
                    break;
                }
                step *= 0.5;
            }
        }
        lift(&y)
    }

    #[test]
    fn level_one_step_matches_newton_oracle() {
        let ops = Operators::build(1, ElementKind::P1).unwrap();
        assert_eq!(ops.space().free_dof_count(), 5);
        let g = ops.space().nodal_interpolate(|p| if p == [0.5, 0.5] { 1.0 } else { 0.4 }, true);
        let params = SchemeParams { fp_tol: 1e-12, ..SchemeParams::new(0.1, 1, 0.1, 2.0).unwrap() };
        let inc = NoiseIncrement { index: 1, values: DVector::zeros(5) };
        let (x1, _) = step(&ops, &g, &inc, &g, &NoiseModel::zero(), &params).unwrap();
        let oracle = newton_oracle(&ops, g.coeffs(), g.coeffs(), &params);
        assert!((x1.coeffs() - &oracle).amax() < 1e-9, "{}", (x1.coeffs() - &oracle).amax());

        // A second step from X¹ moves toward the datum.
        let (x2, _) = step(&ops, &x1, &inc, &g, &NoiseModel::zero(), &params).unwrap();
        let oracle2 = newton_oracle(&ops, x1.coeffs(), g.coeffs(), &params);
        assert!((x2.coeffs() - &oracle2).amax() < 1e-9);
    }

    #[test]
    fn level_one_step_from_flat_state() {
        let ops = Operators::build(1, ElementKind::P1).unwrap();
        let g = ops.space().nodal_interpolate(|p| if p == [0.5, 0.5] { 1.0 } else { 0.4 }, true);
        let x0 = ops.space().nodal_interpolate(|_| 0.2, true);
        let params = SchemeParams { fp_tol: 1e-12, ..SchemeParams::new(0.1, 1, 0.1, 2.0).unwrap() };
        let inc = NoiseIncrement { index: 1, values: DVector::zeros(5) };
        let (y1, _) = step(&ops, &x0, &inc, &g, &NoiseModel::zero(), &params).unwrap();
        let oracle = newton_oracle(&ops, x0.coeffs(), g.coeffs(), &params);
        assert!((y1.coeffs() - &oracle).amax() < 1e-9);
        let before = energy(&ops, x0.coeffs(), g.coeffs(), params.eps, params.lambda).total_jeps;
        let after = energy(&ops, y1.coeffs(), g.coeffs(), params.eps, params.lambda).total_jeps;
        assert!(after <= before);
    }

    #[test]
    fn dump_round_trip() {
        let ops = Operators::build(2, ElementKind::Cr).unwrap();
        let x0 = ops.space().nodal_interpolate(bump, true);
        let params = SchemeParams::new(0.03, 3, 1e-2, 1.0).unwrap();
        let model = rademacher(0.3, 12);
        let traj = run_trajectory(&ops, &x0, &x0, &model, &params).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        let dump = read_trajectory(buf.as_slice(), ops.space().dof_count()).unwrap();
        assert_eq!(dump.kind, ElementKind::Cr);
        assert_eq!(dump.level, 2);
        assert_eq!(dump.steps, 3);
        assert_eq!(dump.seed, 12);
        assert_eq!(dump.sigma, 0.3);
        for (a, b) in dump.states.iter().zip(&traj.states) {
            assert_eq!(a, b.coeffs());
        }
        for (a, b) in dump.increments.iter().zip(&traj.increments) {
            assert_eq!(a, &b.values);
        }
        assert!(read_trajectory(&buf[..20], ops.space().dof_count()).is_err());
        let mut csv_out = Vec::new();
        write_step_csv(&mut csv_out, &ops, &traj).unwrap();
        assert_eq!(String::from_utf8(csv_out).unwrap().lines().count(), 5);
    }
}
