//! Denoising experiments and acceptance studies, driven by one versioned
//! TOML config per run. Every output byte is a function of the config.

mod data;
mod denoise;
mod render;
mod studies;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ExperimentError, SchemeError};
use crate::fespace::ElementKind;
use crate::noise::{NoiseKind, NoiseModel, NoiseOperator};
use crate::scheme::{FixedPointNorm, LinearSolver, SchemeParams};

pub use data::{clean_image_value, make_test_image, make_test_image_on, transfer, ImageField};
pub use denoise::{
    denoise_error, run_denoise, verify_energy_csv, DenoiseOutput, DenoiseRow, EnergyCsvCheck,
};
pub use render::{render_image, render_p0, Raster};
pub use studies::{
    donsker_study, energy_inequality_study, increment_scaling, kolmogorov_survival, ks_normal, projection_stability,
    svi_check, tv_oracle, DonskerReport, EnergyInequalityRow, KsResult, ProjectionRow, SviCheckOutput, TvOracleRow,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Denoise,
    EnergyInequality,
    IncrementScaling,
    SviCheck,
    Donsker,
    ProjectionStability,
    TvOracle,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Denoise => "denoise",
            Study::EnergyInequality => "energy-inequality",
            Study::IncrementScaling => "increment-scaling",
            Study::SviCheck => "svi-check",
            Study::Donsker => "donsker",
            Study::ProjectionStability => "projection-stability",
            Study::TvOracle => "tv-oracle",
        }
    }
}

/// Initial value and datum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataRecipe {
    /// `x⁰ = g̃_h`, `g = g̃_h + ξ_h` from the synthetic square-and-disk image.
    Image,
    /// `x⁰ = g = 0`.
    Zero,
    /// `x⁰ = g = ½ sin(πx) sin(πy)`.
    Sine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseOperatorKind {
    Additive,
    Multiplicative,
    Zero,
}

/// Flat run description. Missing keys take the documented defaults
/// (`T = 0.1`, `λ = 200`, `ε = 1e-4`, `τ = 1e-3`, level 6, `σ = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub study: Study,
    pub element: ElementKind,
    pub level: u32,
    pub t_final: f64,
    pub tau: f64,
    pub eps: f64,
    pub lambda: f64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub lin_tol: f64,
    pub fp_norm: FixedPointNorm,
    pub linear_solver: LinearSolver,
    pub noise_kind: NoiseKind,
    pub noise_operator: NoiseOperatorKind,
    pub sigma: f64,
    /// Noise seed of a single run; base seed of Monte Carlo studies.
    pub seed: u64,
    pub data: DataRecipe,
    pub data_level: u32,
    pub data_noise: f64,
    pub data_seed: u64,
    pub out: PathBuf,
    pub realizations: usize,
    /// Worker threads for Monte Carlo studies; 0 uses all cores.
    pub workers: usize,
    pub lags: Vec<usize>,
    pub svi_j0: usize,
    pub svi_h: f64,
    pub resolution: usize,
    /// Levels swept by the projection-stability and TV-oracle studies.
    pub levels: Vec<u32>,
    /// Also write the binary trajectory of a denoising run.
    pub dump: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            study: Study::Denoise,
            element: ElementKind::P1,
            level: 6,
            t_final: 0.1,
            tau: 1e-3,
            eps: 1e-4,
            lambda: 200.0,
            fp_tol: 1e-4,
            fp_max_iter: 200,
            lin_tol: 1e-10,
            fp_norm: FixedPointNorm::L2,
            linear_solver: LinearSolver::Cholesky,
            noise_kind: NoiseKind::BrownianIncrement,
            noise_operator: NoiseOperatorKind::Additive,
            sigma: 1.0,
            seed: 1,
            data: DataRecipe::Image,
            data_level: 6,
            data_noise: 0.1,
            data_seed: 7,
            out: PathBuf::from("out"),
            realizations: 16,
            workers: 0,
            lags: vec![1, 2, 4, 8, 16],
            svi_j0: 4,
            svi_h: 1.0,
            resolution: 256,
            levels: vec![2, 3, 4, 5, 6],
            dump: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `N = T / τ`; the ratio must be an integer up to rounding.
    pub fn steps(&self) -> Result<usize, ExperimentError> {
        let ratio = self.t_final / self.tau;
        let steps = ratio.round();
        if !(steps >= 1.0) || (ratio - steps).abs() > 1e-9 * ratio {
            return Err(ExperimentError::Config(format!("T / τ = {ratio} is not a positive integer")));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if !(1..=10).contains(&self.level) || !(1..=10).contains(&self.data_level) {
            return bad(format!("levels must lie in 1..=10 (level {}, data_level {})", self.level, self.data_level));
        }
        if self.levels.iter().any(|l| !(1..=10).contains(l)) {
            return bad(format!("sweep levels {:?} must lie in 1..=10", self.levels));
        }
        if !(self.sigma >= 0.0) || !(self.data_noise >= 0.0) {
            return bad("sigma and data_noise must be nonnegative".into());
        }
        if self.realizations == 0 {
            return bad("realizations must be positive".into());
        }
        if self.resolution < 16 {
            return bad(format!("resolution {} below 16", self.resolution));
        }
        self.steps()?;
        self.scheme_params()?;
        self.noise_model()?;
        Ok(())
    }

    pub fn scheme_params(&self) -> Result<SchemeParams, ExperimentError> {
        let params = SchemeParams {
            fp_tol: self.fp_tol,
            fp_max_iter: self.fp_max_iter,
            lin_tol: self.lin_tol,
            fp_norm: self.fp_norm,
            linear_solver: self.linear_solver,
            ..SchemeParams::new(self.t_final, self.steps()?, self.eps, self.lambda)?
        };
        params.validate().map_err(|e: SchemeError| ExperimentError::Config(e.to_string()))?;
        Ok(params)
    }

    pub fn noise_model(&self) -> Result<NoiseModel, ExperimentError> {
        let operator = match self.noise_operator {
            NoiseOperatorKind::Zero => return Ok(NoiseModel::zero().with_seed(self.seed)),
            _ if self.sigma == 0.0 => return Ok(NoiseModel::zero().with_seed(self.seed)),
            NoiseOperatorKind::Additive => NoiseOperator::Additive { sigma: self.sigma },
            NoiseOperatorKind::Multiplicative => NoiseOperator::Multiplicative { sigma: self.sigma },
        };
        Ok(NoiseModel::new(self.noise_kind, operator, self.seed)?)
    }
}

/// Result of one study: files written under `out` and a one-line verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub study: Study,
    pub pass: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

pub fn run_study(cfg: &ExperimentConfig) -> Result<StudyOutcome, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    match cfg.study {
        Study::Denoise => denoise::denoise_study(cfg),
        Study::EnergyInequality => studies::energy_inequality_outcome(cfg),
        Study::IncrementScaling => studies::increment_scaling_outcome(cfg),
        Study::SviCheck => studies::svi_check_outcome(cfg),
        Study::Donsker => studies::donsker_outcome(cfg),
        Study::ProjectionStability => studies::projection_stability_outcome(cfg),
        Study::TvOracle => studies::tv_oracle_outcome(cfg),
    }
}

pub(crate) fn sci(v: f64) -> String {
    format!("{v:.16e}")
}
