//! Scalar quantities of discrete functions and trajectories: energies, total
//! variation, the discrete H⁻¹ norm, time interpolants, moduli of continuity
//! and the discrete Besov majorant for piecewise linear paths.

use nalgebra::DVector;

use crate::error::{FeError, FunctionalError};
use crate::fespace::{Operators, State};
use crate::linalg::{pcg, CgOptions};
use crate::scheme::Trajectory;

/// Parts of the regularized energy of one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    /// `∫ √(|∇u|² + ε²)`
    pub tv_eps: f64,
    /// `(λ/2) ∫ |u - g|²`
    pub fidelity: f64,
    /// `∫ |∇u|` (elementwise gradients)
    pub tv: f64,
    /// `∫_{∂O} |u|`, zero for constrained states
    pub boundary_term: f64,
    /// `tv_eps + fidelity`
    pub total_jeps: f64,
    /// `tv + boundary_term + fidelity`
    pub total_j: f64,
}

/// Regularized energy of `u` against datum `g`. Gradients are elementwise
/// constant, so the TV parts are exact sums; the fidelity is exact mass
/// algebra.
pub fn energy(ops: &Operators, u: &DVector<f64>, g: &DVector<f64>, eps: f64, lambda: f64) -> EnergyBreakdown {
    let space = ops.space();
    let area = space.mesh().triangle_area();
    let mut tv = 0.0;
    let mut tv_eps = 0.0;
    for t in 0..space.mesh().triangle_count() {
        let [gx, gy] = space.gradient_of(u, t);
        let sq = gx * gx + gy * gy;
        tv += area * sq.sqrt();
        tv_eps += area * (sq + eps * eps).sqrt();
    }
    let fidelity = if lambda == 0.0 { 0.0 } else { 0.5 * lambda * ops.l2_norm_sq(&(u - g)) };
    let boundary_term = boundary_trace_l1(ops, u);
    EnergyBreakdown {
        tv_eps,
        fidelity,
        tv,
        boundary_term,
        total_jeps: tv_eps + fidelity,
        total_j: tv + boundary_term + fidelity,
    }
}

pub fn state_energy(ops: &Operators, u: &State, g: &State, eps: f64, lambda: f64) -> Result<EnergyBreakdown, FeError> {
    ops.space().check(u)?;
    ops.space().check(g)?;
    Ok(energy(ops, u.coeffs(), g.coeffs(), eps, lambda))
}

/// `∫ |v|` over a segment of length `len` on which `v` is linear with end
/// values `a`, `b`.
fn abs_linear_integral(a: f64, b: f64, len: f64) -> f64 {
    if a * b >= 0.0 {
        0.5 * len * (a.abs() + b.abs())
    } else {
        0.5 * len * (a * a + b * b) / (a.abs() + b.abs())
    }
}

/// `∫_{∂O} |u|` with the trace taken from the adjacent triangle.
pub fn boundary_trace_l1(ops: &Operators, u: &DVector<f64>) -> f64 {
    let space = ops.space();
    let mesh = space.mesh();
    let mut total = 0.0;
    for (e, &[a, b]) in mesh.edges().iter().enumerate() {
        if !mesh.edge_on_boundary()[e] {
            continue;
        }
        let t = mesh.edge_triangles()[e].0;
        let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
        let va = space.evaluate_in(u, t, pa);
        let vb = space.evaluate_in(u, t, pb);
        if va == 0.0 && vb == 0.0 {
            continue;
        }
        let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
        total += abs_linear_integral(va, vb, len);
    }
    total
}

/// Potential `z` with `A z = M f` on free dofs (unit-weight discrete
/// Dirichlet problem).
pub fn hminus1_potential(ops: &Operators, f: &DVector<f64>) -> Result<DVector<f64>, FeError> {
    let mut f = f.clone();
    for (d, &c) in ops.space().constrained().iter().enumerate() {
        if c {
            f[d] = 0.0;
        }
    }
    let rhs = ops.mass().apply(&f);
    let mut z = DVector::zeros(f.len());
    pcg(ops.laplace(), &rhs, &mut z, CgOptions { rel_tol: 1e-12, max_iter: 20_000 })?;
    Ok(z)
}

/// Discrete H⁻¹ norm `‖f‖²_{-1,h} = (f, z)` with `A z = M f`.
pub fn hminus1_norm(ops: &Operators, f: &DVector<f64>) -> Result<f64, FeError> {
    if f.len() != ops.space().dof_count() {
        return Err(FeError::DimensionMismatch { expected: ops.space().dof_count(), got: f.len() });
    }
    let z = hminus1_potential(ops, f)?;
    let mut f = f.clone();
    for (d, &c) in ops.space().constrained().iter().enumerate() {
        if c {
            f[d] = 0.0;
        }
    }
    Ok(ops.mass().bilinear_form(&f, &z).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolantKind {
    /// `X_τ`: linear between nodes.
    Linear,
    /// `X̄_τ`: `X^i` on `(t_{i-1}, t_i]`, left-continuous.
    RightConstant,
    /// `X̲_τ`: `X^{i-1}` on `[t_{i-1}, t_i)`, right-continuous.
    LeftConstant,
}

/// Time interpolant of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct PathInterpolant<'a> {
    pub trajectory: &'a Trajectory,
    pub kind: InterpolantKind,
}

impl<'a> PathInterpolant<'a> {
    pub fn new(trajectory: &'a Trajectory, kind: InterpolantKind) -> Self {
        Self { trajectory, kind }
    }

    /// Nodes and weights combining to the interpolant at `t`.
    pub fn weights(&self, t: f64) -> Result<[(usize, f64); 2], FunctionalError> {
        let n = self.trajectory.steps();
        let t_final = self.trajectory.params.t_final;
        if !(-1e-12 * t_final..=t_final * (1.0 + 1e-12)).contains(&t) {
            return Err(FunctionalError::TimeOutOfRange { t, t_final });
        }
        if n == 0 {
            return Ok([(0, 1.0), (0, 0.0)]);
        }
        let s = (t / self.trajectory.params.tau()).clamp(0.0, n as f64);
        let nearest = s.round();
        let on_node = (s - nearest).abs() < 1e-9;
        let w = match self.kind {
            InterpolantKind::Linear => {
                if on_node {
                    [(nearest as usize, 1.0), (nearest as usize, 0.0)]
                } else {
                    let i = s.floor() as usize;
                    let frac = s - i as f64;
                    [(i, 1.0 - frac), (i + 1, frac)]
                }
            }
            InterpolantKind::RightConstant => {
                let i = if on_node { nearest as usize } else { s.ceil() as usize };
                [(i, 1.0), (i, 0.0)]
            }
            InterpolantKind::LeftConstant => {
                let i = if on_node { nearest as usize } else { s.floor() as usize };
                let i = if on_node && i == n { n } else { i };
                [(i, 1.0), (i, 0.0)]
            }
        };
        Ok(w)
    }

    pub fn evaluate(&self, t: f64) -> Result<DVector<f64>, FunctionalError> {
        let [(a, wa), (b, wb)] = self.weights(t)?;
        let states = &self.trajectory.states;
        Ok(states[a].coeffs() * wa + states[b].coeffs() * wb)
    }
}

/// Probe times `{t_i} ∪ {midpoints}` on which moduli are evaluated.
pub fn probe_times(steps: usize, tau: f64) -> Vec<f64> {
    (0..=2 * steps).map(|k| 0.5 * k as f64 * tau).collect()
}

/// `m(f, δ) = sup{‖f(t) - f(s)‖_{-1,h} : |t - s| ≤ δ}` over the probe grid.
pub fn modulus_of_continuity(ops: &Operators, interp: &PathInterpolant<'_>, delta: f64) -> Result<f64, FunctionalError> {
    let traj = interp.trajectory;
    let tau = traj.params.tau();
    let times = probe_times(traj.steps(), tau);
    // H⁻¹ norms are quadratic, so potentials of the nodes combine linearly.
    let mass = ops.mass();
    let potentials: Vec<DVector<f64>> = traj
        .states
        .iter()
        .map(|x| hminus1_potential(ops, x.coeffs()).map(|z| mass.apply(&z)))
        .collect::<Result<_, _>>()?;
    let mut values = Vec::with_capacity(times.len());
    let mut duals = Vec::with_capacity(times.len());
    for &t in &times {
        let [(a, wa), (b, wb)] = interp.weights(t)?;
        let mut v = traj.states[a].coeffs() * wa + traj.states[b].coeffs() * wb;
        for (d, &c) in ops.space().constrained().iter().enumerate() {
            if c {
                v[d] = 0.0;
            }
        }
        values.push(v);
        duals.push(&potentials[a] * wa + &potentials[b] * wb);
    }
    let slack = 1e-9 * tau;
    let mut best: f64 = 0.0;
    for p in 0..times.len() {
        for q in p + 1..times.len() {
            if times[q] - times[p] > delta + slack {
                break;
            }
            let dv = &values[q] - &values[p];
            let dz = &duals[q] - &duals[p];
            best = best.max(dv.dot(&dz).max(0.0).sqrt());
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

impl Exponent {
    fn validate(self, name: &str) -> Result<(), FunctionalError> {
        match self {
            Exponent::Finite(v) if !(v >= 1.0) || !v.is_finite() => {
                Err(FunctionalError::InvalidExponent(format!("{name} = {v}, expected [1, ∞]")))
            }
            _ => Ok(()),
        }
    }
}

/// Increment sums `f_{i,p}` of a scalar path on `t_j = j τ`.
fn increment_sum(values: &[f64], tau: f64, lag: usize, p: Exponent) -> f64 {
    let n = values.len() - 1;
    let incs = (lag..=n).map(|j| (values[j] - values[j - lag]).abs());
    match p {
        Exponent::Finite(p) => (tau * incs.map(|d| d.powf(p)).sum::<f64>()).powf(1.0 / p),
        Exponent::Infinity => incs.fold(0.0, f64::max),
    }
}

/// Computable majorant of the `B^s_{p,q}` seminorm of the piecewise linear
/// path through `values` (nodes `t_j = j τ`):
/// `8/(s(1-s)) (Σ_{i=1}^{N-1} τ f_{i,p}^q / t_i^{1+sq})^{1/q}`, or
/// `3 max_i f_{i,p} / t_i^s` for `q = ∞`.
pub fn besov_seminorm(values: &[f64], tau: f64, s: f64, p: Exponent, q: Exponent) -> Result<f64, FunctionalError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(FunctionalError::InvalidExponent(format!("s = {s}, expected (0, 1)")));
    }
    p.validate("p")?;
    q.validate("q")?;
    if values.is_empty() {
        return Err(FunctionalError::InvalidExponent("empty path".into()));
    }
    let n = values.len() - 1;
    let value = match q {
        Exponent::Finite(q) => {
            let sum: f64 = (1..n)
                .map(|i| {
                    let t = i as f64 * tau;
                    tau * increment_sum(values, tau, i, p).powf(q) / t.powf(1.0 + s * q)
                })
                .sum();
            8.0 / (s * (1.0 - s)) * sum.powf(1.0 / q)
        }
        Exponent::Infinity => {
            3.0 * (1..n)
                .map(|i| increment_sum(values, tau, i, p) / (i as f64 * tau).powf(s))
                .fold(0.0, f64::max)
        }
    };
    Ok(value)
}

/// `½ max_i ‖X^i‖² + Σ_i (¼‖X^i - X^{i-1}‖² + τ J_ε(X^i))`, the quantity
/// whose second moment the discrete energy estimate bounds.
pub fn energy_aggregate(ops: &Operators, traj: &Trajectory) -> f64 {
    let p = &traj.params;
    let tau = p.tau();
    let mut sup: f64 = 0.0;
    let mut sum = 0.0;
    for (i, x) in traj.states.iter().enumerate() {
        sup = sup.max(ops.l2_norm_sq(x.coeffs()));
        if i > 0 {
            let dx = x.coeffs() - traj.states[i - 1].coeffs();
            let j = energy(ops, x.coeffs(), traj.datum.coeffs(), p.eps, p.lambda).total_jeps;
            sum += 0.25 * ops.l2_norm_sq(&dx) + tau * j;
        }
    }
    0.5 * sup + sum
}
