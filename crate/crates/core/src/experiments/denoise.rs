use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::ExperimentError;
use crate::experiments::data::{problem_data, ImageField};
use crate::experiments::render::{render_image, render_p0};
use crate::experiments::{sci, ExperimentConfig, Study, StudyOutcome};
use crate::fespace::{ElementKind, Operators, State};
use crate::functionals::energy;
use crate::scheme::{run_trajectory, write_trajectory, Trajectory};

/// `(λ/2)‖X - g̃‖²` for P1. For CR both functions are replaced by their
/// elementwise means, `(λ/2)‖Π⁰X - Π⁰g̃‖²`, so the error vanishes at
/// `X = g̃`.
pub fn denoise_error(ops: &Operators, x: &State, clean: &State, lambda: f64) -> f64 {
    let space = ops.space();
    let sq = match space.kind() {
        ElementKind::P1 => ops.l2_norm_sq(&(x.coeffs() - clean.coeffs())),
        ElementKind::Cr => {
            let area = space.mesh().triangle_area();
            let px = space.project_p0(x);
            let pc = space.project_p0(clean);
            px.iter().zip(&pc).map(|(a, b)| (a - b).powi(2) * area).sum()
        }
    };
    0.5 * lambda * sq
}

/// One time level of a denoising run. Step quantities are zero at `i = 0`
/// and the slack is NaN there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseRow {
    pub i: usize,
    pub t: f64,
    /// `J_ε(X^i)` including the fidelity term.
    pub j_eps: f64,
    /// [`denoise_error`] against the clean image.
    pub error: f64,
    /// `(λ/2)‖X^i - g_h‖²`
    pub fidelity: f64,
    pub norm_sq: f64,
    /// `‖X^i - X^{i-1}‖²`
    pub step_sq: f64,
    /// `(ΔW^i, X^{i-1})`
    pub noise_cross: f64,
    /// `‖ΔW^i‖²`
    pub noise_sq: f64,
    /// `J_ε(0)`
    pub j_eps_zero: f64,
    pub fp_iterations: usize,
    pub energy_slack: f64,
}

const HEADER: [&str; 12] = [
    "i",
    "t",
    "j_eps",
    "error",
    "fidelity",
    "norm_sq",
    "step_sq",
    "noise_cross",
    "noise_sq",
    "j_eps_zero",
    "fp_iterations",
    "energy_slack",
];

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub ops: Arc<Operators>,
    pub trajectory: Trajectory,
    pub clean: State,
    pub rows: Vec<DenoiseRow>,
    /// `(λ/2)‖g_h - g̃_h‖²`
    pub noise_energy: f64,
    pub image: Option<ImageField>,
}

impl DenoiseOutput {
    pub fn final_error(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.error)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.i.to_string(),
                sci(r.t),
                sci(r.j_eps),
                sci(r.error),
                sci(r.fidelity),
                sci(r.norm_sq),
                sci(r.step_sq),
                sci(r.noise_cross),
                sci(r.noise_sq),
                sci(r.j_eps_zero),
                r.fp_iterations.to_string(),
                sci(r.energy_slack),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrates one trajectory of the configured problem and tabulates it.
pub fn run_denoise(cfg: &ExperimentConfig) -> Result<DenoiseOutput, ExperimentError> {
    cfg.validate()?;
    let ops = Arc::new(Operators::build(cfg.level, cfg.element)?);
    let space = ops.space();
    let data = problem_data(cfg, space)?;
    let params = cfg.scheme_params()?;
    let traj = run_trajectory(&ops, &data.x0, &data.datum, &cfg.noise_model()?, &params)?;
    let (eps, lambda) = (params.eps, params.lambda);
    let g = data.datum.coeffs();
    let j_eps_zero = energy(&ops, &(g * 0.0), g, eps, lambda).total_jeps;
    let mut rows = Vec::with_capacity(traj.states.len());
    for (i, x) in traj.states.iter().enumerate() {
        let e = energy(&ops, x.coeffs(), g, eps, lambda);
        let (step_sq, noise_cross, noise_sq, fp_iterations, energy_slack) = if i == 0 {
            (0.0, 0.0, 0.0, 0, f64::NAN)
        } else {
            let prev = &traj.states[i - 1];
            let noise = traj.model.noise_coeffs(space, prev, &traj.increments[i - 1])?;
            let report = &traj.reports[i - 1];
            (
                ops.l2_norm_sq(&(x.coeffs() - prev.coeffs())),
                ops.l2_inner(&noise, prev.coeffs()),
                ops.l2_norm_sq(&noise),
                report.iterations,
                report.energy_slack,
            )
        };
        rows.push(DenoiseRow {
            i,
            t: params.time(i),
            j_eps: e.total_jeps,
            error: denoise_error(&ops, x, &data.clean, lambda),
            fidelity: e.fidelity,
            norm_sq: ops.l2_norm_sq(x.coeffs()),
            step_sq,
            noise_cross,
            noise_sq,
            j_eps_zero,
            fp_iterations,
            energy_slack,
        });
    }
    let noise_energy = 0.5 * lambda * ops.l2_norm_sq(&(g - data.clean.coeffs()));
    Ok(DenoiseOutput { ops, trajectory: traj, clean: data.clean, rows, noise_energy, image: data.image })
}

/// Result of re-deriving every step's energy-inequality slack from the CSV
/// columns alone.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyCsvCheck {
    pub steps: usize,
    pub min_slack: f64,
    /// `-1e-6 (1 + max ‖X^i‖²)`
    pub threshold: f64,
    /// Largest gap between recomputed and reported slack.
    pub max_mismatch: f64,
    pub pass: bool,
}

/// Reads a denoising CSV and checks
/// `½‖X^i‖² - ½‖X^{i-1}‖² + ¼‖ΔX‖² + τJ_ε(X^i) ≤ τJ_ε(0) + (ΔW, X^{i-1}) + ‖ΔW‖²`
/// at every row, with `τ = t_i - t_{i-1}`.
pub fn verify_energy_csv<R: Read>(input: R) -> Result<EnergyCsvCheck, ExperimentError> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    let col: HashMap<&str, usize> = header.iter().enumerate().map(|(k, h)| (h, k)).collect();
    let idx = |name: &str| col.get(name).copied().ok_or_else(|| ExperimentError::Config(format!("missing column {name}")));
    let names = ["t", "j_eps", "norm_sq", "step_sq", "noise_cross", "noise_sq", "j_eps_zero", "energy_slack"];
    let cols = names.map(|n| idx(n));
    let cols: Vec<usize> = cols.into_iter().collect::<Result<_, _>>()?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let vals = cols
            .iter()
            .map(|&c| rec[c].trim().parse::<f64>().map_err(|e| ExperimentError::Config(format!("bad number {:?}: {e}", &rec[c]))))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(vals);
    }
    let max_norm = rows.iter().map(|r| r[2]).fold(0.0, f64::max);
    let threshold = -1e-6 * (1.0 + max_norm);
    let mut min_slack = f64::INFINITY;
    let mut max_mismatch: f64 = 0.0;
    for w in rows.windows(2) {
        let (p, r) = (&w[0], &w[1]);
        let tau = r[0] - p[0];
        let lhs = 0.5 * r[2] - 0.5 * p[2] + 0.25 * r[3] + tau * r[1];
        let rhs = tau * r[6] + r[4] + r[5];
        let slack = rhs - lhs;
        min_slack = min_slack.min(slack);
        max_mismatch = max_mismatch.max((slack - r[7]).abs());
    }
    let steps = rows.len().saturating_sub(1);
    let pass = steps > 0 && min_slack >= threshold;
    Ok(EnergyCsvCheck { steps, min_slack, threshold, max_mismatch, pass })
}

pub(crate) fn denoise_study(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    let out = run_denoise(cfg)?;
    let dir: &Path = &cfg.out;
    let stem = format!("denoise_{}_l{}_sigma{}", cfg.element, cfg.level, cfg.sigma);
    let csv_path = dir.join(format!("{stem}.csv"));
    out.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv_path)?))?;
    let mut files = vec![csv_path.clone()];
    let space = out.ops.space();
    let final_state = out.trajectory.terminal();
    let raster = match cfg.element {
        ElementKind::P1 => render_image(space, final_state, cfg.resolution)?,
        ElementKind::Cr => render_p0(space, &space.project_p0(final_state), cfg.resolution)?,
    };
    files.extend(raster.save(dir, &format!("{stem}_final"))?);
    if let Some(img) = &out.image {
        files.extend(render_image(&img.space, &img.clean, cfg.resolution)?.save(dir, "data_clean")?);
        files.extend(render_image(&img.space, &img.noisy, cfg.resolution)?.save(dir, "data_noisy")?);
    }
    if cfg.dump {
        let path = dir.join(format!("{stem}.bin"));
        write_trajectory(std::io::BufWriter::new(std::fs::File::create(&path)?), &out.trajectory)?;
        files.push(path);
    }
    let check = verify_energy_csv(std::fs::File::open(&csv_path)?)?;
    let improves = out.final_error() < out.noise_energy;
    let pass = check.pass && (cfg.sigma > 0.0 || improves);
    let summary = format!(
        "final error {:.6e} vs noise energy {:.6e}; csv min slack {:.3e} (threshold {:.3e})",
        out.final_error(),
        out.noise_energy,
        check.min_slack,
        check.threshold
    );
    Ok(StudyOutcome { study: Study::Denoise, pass, summary, files })
}
