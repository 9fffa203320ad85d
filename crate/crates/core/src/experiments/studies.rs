use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::ExperimentError;
use crate::experiments::data::problem_data;
use crate::experiments::{sci, ExperimentConfig, Study, StudyOutcome};
use crate::fespace::{Boundary, ElementKind, FeSpace, Operators, QuadratureRule};
use crate::functionals::energy;
use crate::mc::{increment_scaling_study, run_realizations, McPlan, ScalingReport, Scenario};
use crate::mesh::Mesh;
use crate::noise::{NoiseModel, NoiseOperator};
use crate::svi::{build_test_process, pathwise_sides, summarize_svi, verify_svi, FrozenFamily, SviReport, TrivialFamily};

fn scenario(cfg: &ExperimentConfig) -> Result<Scenario, ExperimentError> {
    let ops = Arc::new(Operators::build(cfg.level, cfg.element)?);
    let data = problem_data(cfg, ops.space())?;
    Ok(Scenario { ops, x0: data.x0, datum: data.datum, model: cfg.noise_model()?, params: cfg.scheme_params()? })
}

fn plan(cfg: &ExperimentConfig) -> McPlan {
    McPlan::new(cfg.realizations, cfg.seed).with_workers(cfg.workers)
}

fn create(cfg: &ExperimentConfig, name: &str) -> Result<(PathBuf, std::io::BufWriter<std::fs::File>), ExperimentError> {
    let path = cfg.out.join(name);
    let file = std::fs::File::create(&path)?;
    Ok((path, std::io::BufWriter::new(file)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyInequalityRow {
    pub realization: usize,
    pub seed: u64,
    pub min_slack: f64,
    pub max_norm_sq: f64,
    /// `-1e-6 (1 + max ‖X^i‖²)`
    pub threshold: f64,
    pub pass: bool,
}

/// Smallest per-step slack of every realization against its own threshold.
pub fn energy_inequality_study(cfg: &ExperimentConfig) -> Result<Vec<EnergyInequalityRow>, ExperimentError> {
    let sc = scenario(cfg)?;
    let plan = plan(cfg);
    let ops = &sc.ops;
    Ok(run_realizations(&plan, &sc, |r, traj| {
        let min_slack = traj.slacks().into_iter().fold(f64::INFINITY, f64::min);
        let max_norm_sq = traj.states.iter().map(|x| ops.l2_norm_sq(x.coeffs())).fold(0.0, f64::max);
        let threshold = -1e-6 * (1.0 + max_norm_sq);
        EnergyInequalityRow { realization: r, seed: plan.seed(r), min_slack, max_norm_sq, threshold, pass: min_slack >= threshold }
    })?)
}

pub(crate) fn energy_inequality_outcome(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    let rows = energy_inequality_study(cfg)?;
    let (path, mut w) = create(cfg, "energy_inequality.csv")?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["realization", "seed", "min_slack", "max_norm_sq", "threshold", "pass"])?;
        for r in &rows {
            c.write_record([
                r.realization.to_string(),
                r.seed.to_string(),
                sci(r.min_slack),
                sci(r.max_norm_sq),
                sci(r.threshold),
                r.pass.to_string(),
            ])?;
        }
        c.flush()?;
    }
    w.flush()?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let worst = rows.iter().map(|r| r.min_slack).fold(f64::INFINITY, f64::min);
    Ok(StudyOutcome {
        study: Study::EnergyInequality,
        pass: failed == 0,
        summary: format!("{} realizations, {failed} failed, smallest slack {worst:.3e}", rows.len()),
        files: vec![path],
    })
}

pub fn increment_scaling(cfg: &ExperimentConfig) -> Result<ScalingReport, ExperimentError> {
    let sc = scenario(cfg)?;
    Ok(increment_scaling_study(&plan(cfg), &sc, &cfg.lags)?)
}

pub(crate) fn increment_scaling_outcome(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    let report = increment_scaling(cfg)?;
    let (path, mut w) = create(cfg, "increment_scaling.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let (pass, summary) = match &report.slope {
        Some(s) => (s.slope >= 1.7, format!("slope {:.4} (95% CI [{:.4}, {:.4}])", s.slope, s.ci.0, s.ci.1)),
        None => (false, "degenerate: all increments vanish".to_string()),
    };
    Ok(StudyOutcome { study: Study::IncrementScaling, pass, summary, files: vec![path] })
}

#[derive(Debug, Clone)]
pub struct SviCheckOutput {
    /// `U = X`, `G`, `H = P_h B`: holds pathwise.
    pub trivial: SviReport,
    /// Constant `G`, `H = h φ_j` for the first `j0` free dofs.
    pub frozen: SviReport,
}

pub fn svi_check(cfg: &ExperimentConfig) -> Result<SviCheckOutput, ExperimentError> {
    let sc = scenario(cfg)?;
    let ops = &sc.ops;
    let trajs = run_realizations(&plan(cfg), &sc, |_, traj| traj.clone())?;
    let sides = trajs
        .iter()
        .map(|traj| {
            let family = TrivialFamily::for_trajectory(traj);
            build_test_process(ops, &family, traj).map(|tp| pathwise_sides(ops, traj, &tp))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let trivial = summarize_svi(ops, &trajs, &sides, "trivial".into());
    let bump = |p: [f64; 2]| (PI * p[0]).sin() * (PI * p[1]).sin();
    let family = FrozenFamily::new(ops, cfg.svi_j0, cfg.svi_h, |p| 0.5 * bump(p), |p| 0.25 * bump(p))?;
    let frozen = verify_svi(ops, &trajs, &family)?;
    Ok(SviCheckOutput { trivial, frozen })
}

pub(crate) fn svi_check_outcome(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    let out = svi_check(cfg)?;
    let mut files = Vec::new();
    for (name, report) in [("svi_trivial.csv", &out.trivial), ("svi_frozen.csv", &out.frozen)] {
        let (path, mut w) = create(cfg, name)?;
        report.write_csv(&mut w)?;
        w.flush()?;
        files.push(path);
    }
    let trivial_ok = out.trivial.pass() && out.trivial.pathwise_min_slack >= -out.trivial.rows.last().map_or(0.0, |r| r.budget);
    Ok(StudyOutcome {
        study: Study::SviCheck,
        pass: trivial_ok && out.frozen.pass(),
        summary: format!(
            "trivial pathwise min slack {:.3e}; {} min mean slack {:.3e}",
            out.trivial.pathwise_min_slack,
            out.frozen.family,
            out.frozen.rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
        ),
        files,
    })
}

/// Survival function `P(K > x) = 2 Σ (-1)^{k-1} exp(-2k²x²)` of the
/// Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    /// Asymptotic p-value with the `√n + 0.12 + 0.11/√n` correction.
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against the standard normal.
pub fn ks_normal(samples: &[f64]) -> KsResult {
    let normal = Normal::standard();
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let statistic = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    KsResult { statistic, p_value: kolmogorov_survival((sn + 0.12 + 0.11 / sn) * statistic) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DonskerReport {
    pub realizations: usize,
    pub steps: usize,
    pub t_final: f64,
    pub mean: f64,
    /// Unbiased sample variance of `W_τ(T)`.
    pub variance: f64,
    pub ks: KsResult,
    pub pass: bool,
}

/// Terminal values of `M` independent walks `W^j_τ`, `j = 0..M`, tested for
/// `W^j_τ(T)/√T ~ N(0, 1)` (KS at level 0.01) and `Var ∈ [0.94T, 1.06T]`.
pub fn donsker_study(cfg: &ExperimentConfig) -> Result<DonskerReport, ExperimentError> {
    let steps = cfg.steps()?;
    let tau = cfg.t_final / steps as f64;
    let model = NoiseModel::new(cfg.noise_kind, NoiseOperator::Additive { sigma: 1.0 }, cfg.seed)?;
    let terminals: Vec<f64> = (0..cfg.realizations).map(|j| model.accumulate_walk(j, steps, tau).terminal()).collect();
    let m = terminals.len() as f64;
    let mean = terminals.iter().sum::<f64>() / m;
    let variance = terminals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let t = cfg.t_final;
    let ks = ks_normal(&terminals.iter().map(|v| v / t.sqrt()).collect::<Vec<_>>());
    let pass = ks.p_value > 0.01 && (0.94 * t..=1.06 * t).contains(&variance);
    Ok(DonskerReport { realizations: cfg.realizations, steps, t_final: t, mean, variance, ks, pass })
}

pub(crate) fn donsker_outcome(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    let r = donsker_study(cfg)?;
    let (path, mut w) = create(cfg, "donsker.csv")?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["realizations", "steps", "t_final", "mean", "variance", "ks_statistic", "ks_p_value", "pass"])?;
        c.write_record([
            r.realizations.to_string(),
            r.steps.to_string(),
            sci(r.t_final),
            sci(r.mean),
            sci(r.variance),
            sci(r.ks.statistic),
            sci(r.ks.p_value),
            r.pass.to_string(),
        ])?;
        c.flush()?;
    }
    w.flush()?;
    Ok(StudyOutcome {
        study: Study::Donsker,
        pass: r.pass,
        summary: format!(
            "KS D = {:.4}, p = {:.4}; variance / T = {:.4}",
            r.ks.statistic,
            r.ks.p_value,
            r.variance / r.t_final
        ),
        files: vec![path],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionRow {
    pub element: ElementKind,
    pub level: u32,
    pub k: u32,
    pub m: u32,
    /// `‖∇_h P_h f‖ / ‖∇f‖`
    pub kappa: f64,
}

/// Ratio of the energy norms of the L² projection and of `f =
/// sin(kπx) sin(mπy)` for `k, m ≤ 3`; `‖∇f‖² = π²(k² + m²)/4` exactly.
pub fn projection_stability(levels: &[u32], elements: &[ElementKind]) -> Result<Vec<ProjectionRow>, ExperimentError> {
    let cases: Vec<(ElementKind, u32)> =
        elements.iter().flat_map(|&e| levels.iter().map(move |&l| (e, l))).collect();
    let rows = cases
        .par_iter()
        .map(|&(element, level)| -> Result<Vec<ProjectionRow>, ExperimentError> {
            let space = FeSpace::new(Arc::new(Mesh::build_crisscross(level)?), element);
            let mass = space.assemble_mass(Boundary::Constrained);
            let ones = vec![1.0; space.mesh().triangle_count()];
            let stiff = space.assemble_weighted_stiffness(&ones, Boundary::Constrained)?;
            let mut rows = Vec::new();
            for k in 1..=3u32 {
                for m in 1..=3u32 {
                    let (kf, mf) = (f64::from(k), f64::from(m));
                    let f = |p: [f64; 2]| (kf * PI * p[0]).sin() * (mf * PI * p[1]).sin();
                    let pf = space.l2_project_with(&mass, f, QuadratureRule::SevenPoint)?;
                    let exact = (PI * PI * (kf * kf + mf * mf) / 4.0).sqrt();
                    rows.push(ProjectionRow { element, level, k, m, kappa: stiff.quadratic_form(pf.coeffs()).sqrt() / exact });
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub(crate) fn projection_stability_outcome(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    let rows = projection_stability(&cfg.levels, &[cfg.element])?;
    let (path, mut w) = create(cfg, "projection_stability.csv")?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["element", "level", "k", "m", "kappa"])?;
        for r in &rows {
            c.write_record([r.element.to_string(), r.level.to_string(), r.k.to_string(), r.m.to_string(), sci(r.kappa)])?;
        }
        c.flush()?;
    }
    w.flush()?;
    let worst = rows.iter().map(|r| r.kappa).fold(0.0, f64::max);
    Ok(StudyOutcome {
        study: Study::ProjectionStability,
        pass: worst <= 2.0,
        summary: format!("max kappa {worst:.4} over {} cases", rows.len()),
        files: vec![path],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvOracleRow {
    pub level: u32,
    pub h: f64,
    pub tv_p1: f64,
    pub tv_cr: f64,
    /// `2 - 10h`
    pub lower: f64,
    /// `2 + 10h`
    pub upper: f64,
}

impl TvOracleRow {
    pub fn cr_within(&self) -> bool {
        (self.lower..=self.upper).contains(&self.tv_cr)
    }

    pub fn p1_within(&self) -> bool {
        (self.lower..=self.upper).contains(&self.tv_p1)
    }
}

fn square_indicator(p: [f64; 2]) -> f64 {
    f64::from(u8::from((0.25..=0.75).contains(&p[0]) && (0.25..=0.75).contains(&p[1])))
}

/// Discrete TV of the nodal interpolant of the centred square of side ½
/// (perimeter 2) in both spaces.
pub fn tv_oracle(levels: &[u32]) -> Result<Vec<TvOracleRow>, ExperimentError> {
    levels
        .iter()
        .map(|&level| {
            let tv = |kind| -> Result<f64, ExperimentError> {
                let ops = Operators::build(level, kind)?;
                let u = ops.space().nodal_interpolate(square_indicator, true);
                Ok(energy(&ops, u.coeffs(), u.coeffs(), 0.0, 0.0).tv)
            };
            let h = 0.5f64.powi(level as i32);
            Ok(TvOracleRow { level, h, tv_p1: tv(ElementKind::P1)?, tv_cr: tv(ElementKind::Cr)?, lower: 2.0 - 10.0 * h, upper: 2.0 + 10.0 * h })
        })
        .collect()
}

pub(crate) fn tv_oracle_outcome(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    let rows = tv_oracle(&cfg.levels)?;
    let (path, mut w) = create(cfg, "tv_oracle.csv")?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["level", "h", "tv_p1", "tv_cr", "lower", "upper", "p1_within", "cr_within"])?;
        for r in &rows {
            c.write_record([
                r.level.to_string(),
                sci(r.h),
                sci(r.tv_p1),
                sci(r.tv_cr),
                sci(r.lower),
                sci(r.upper),
                r.p1_within().to_string(),
                r.cr_within().to_string(),
            ])?;
        }
        c.flush()?;
    }
    w.flush()?;
    let within = |r: &TvOracleRow| match cfg.element {
        ElementKind::P1 => r.p1_within(),
        ElementKind::Cr => r.cr_within(),
    };
    Ok(StudyOutcome {
        study: Study::TvOracle,
        pass: rows.iter().all(within),
        summary: rows
            .iter()
            .map(|r| format!("level {}: p1 {:.4}, cr {:.4}", r.level, r.tv_p1, r.tv_cr))
            .collect::<Vec<_>>()
            .join("; "),
        files: vec![path],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::DataRecipe;
    use crate::noise::NoiseKind;

    #[test]
    fn kolmogorov_survival_reference_values() {
        // classical critical values: P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
        assert!(kolmogorov_survival(5.0) < 1e-20);
    }

    #[test]
    fn ks_detects_shift() {
        let normal = Normal::standard();
        let n = 500;
        let q: Vec<f64> = (0..n).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
        assert!(ks_normal(&q).p_value > 0.99);
        let shifted: Vec<f64> = q.iter().map(|v| v + 0.5).collect();
        assert!(ks_normal(&shifted).p_value < 1e-6);
    }

    #[test]
    fn donsker_brownian_small() {
        let cfg = ExperimentConfig { realizations: 400, tau: 5e-4, noise_kind: NoiseKind::BrownianIncrement, ..Default::default() };
        let r = donsker_study(&cfg).unwrap();
        assert_eq!(r.steps, 200);
        assert!(r.ks.p_value > 0.01, "{r:?}");
        assert!((r.variance / r.t_final - 1.0).abs() < 0.25);
    }

    #[test]
    fn tv_oracle_cr_is_within_band() {
        for r in tv_oracle(&[4, 5]).unwrap() {
            assert!(r.cr_within(), "{r:?}");
        }
    }

    #[test]
    fn projection_stability_small_levels() {
        let rows = projection_stability(&[2, 3], &[ElementKind::P1, ElementKind::Cr]).unwrap();
        assert_eq!(rows.len(), 36);
        assert!(rows.iter().all(|r| r.kappa > 0.0 && r.kappa <= 2.0), "{rows:?}");
    }

    #[test]
    fn energy_inequality_holds_on_small_problem() {
        let cfg = ExperimentConfig { level: 3, data_level: 3, tau: 1e-2, realizations: 3, ..Default::default() };
        let rows = energy_inequality_study(&cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn svi_check_small() {
        let cfg = ExperimentConfig { level: 2, data: DataRecipe::Sine, tau: 1e-2, realizations: 4, ..Default::default() };
        let out = svi_check(&cfg).unwrap();
        assert!(out.trivial.pass());
        assert!(out.frozen.pass());
    }
}
