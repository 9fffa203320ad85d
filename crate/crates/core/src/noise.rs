//! Discrete noise increments `ξ^{i,j}` and the noise operator `B`.
//!
//! Draws are counter based: the value for time index `i` and noise index `j`
//! is a pure function of `(seed, i, j)`. Each `(i, j)` owns a disjoint window
//! of a ChaCha8 keystream (stream `i`, words `[j·2^32, (j+1)·2^32)`), so draws
//! can be made in any order and from any thread.

use std::io::{self, Read, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::NoiseError;
use crate::fespace::{FeSpace, State};
use crate::linalg::SparseOperator;

/// Number of keystream words reserved for one `(i, j)` draw.
pub const WORDS_PER_DRAW: u128 = 1 << 32;

const INCREMENT_MAGIC: &[u8; 8] = b"STVFXI01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `±√τ` with probability ½ each.
    Rademacher,
    /// Gaussian `N(0, τ)`.
    BrownianIncrement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum NoiseOperator {
    /// `B_j = σ φ_j`.
    Additive { sigma: f64 },
    /// `B_j(X) = σ X_j φ_j`: the j-th coefficient of `X` scales the j-th
    /// basis function. Outside the proven theory in two dimensions.
    Multiplicative { sigma: f64 },
    Zero,
}

impl NoiseOperator {
    pub fn sigma(&self) -> f64 {
        match *self {
            NoiseOperator::Additive { sigma } | NoiseOperator::Multiplicative { sigma } => sigma,
            NoiseOperator::Zero => 0.0,
        }
    }
}

/// Where the noise window for `(i, j)` starts in the keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubstreamKey {
    pub stream: u64,
    pub word_offset: u128,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub operator: NoiseOperator,
    pub seed: u64,
}

/// The vector `(ξ^{i,1}, …, ξ^{i,J})`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub index: usize,
    pub values: DVector<f64>,
}

impl NoiseIncrement {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, operator: NoiseOperator, seed: u64) -> Result<Self, NoiseError> {
        let sigma = operator.sigma();
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(NoiseError::InvalidParameter(format!("sigma = {sigma}")));
        }
        Ok(Self { kind, operator, seed })
    }

    pub fn zero() -> Self {
        Self { kind: NoiseKind::Rademacher, operator: NoiseOperator::Zero, seed: 0 }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn sigma(&self) -> f64 {
        self.operator.sigma()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.operator, NoiseOperator::Zero)
    }

    pub fn substream_key(i: usize, j: usize) -> SubstreamKey {
        SubstreamKey { stream: i as u64, word_offset: j as u128 * WORDS_PER_DRAW }
    }

    fn stream_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }

    fn draw_from(&self, rng: &mut ChaCha8Rng, i: usize, j: usize, sqrt_tau: f64) -> f64 {
        rng.set_word_pos(Self::substream_key(i, j).word_offset);
        match self.kind {
            NoiseKind::Rademacher => {
                if rng.random::<bool>() {
                    sqrt_tau
                } else {
                    -sqrt_tau
                }
            }
            NoiseKind::BrownianIncrement => sqrt_tau * rng.sample::<f64, _>(StandardNormal),
        }
    }

    /// Raw draw `ξ^{i,j}` with variance `τ`, independent of the operator.
    pub fn sample(&self, i: usize, j: usize, tau: f64) -> f64 {
        let mut rng = self.stream_rng(i);
        self.draw_from(&mut rng, i, j, tau.sqrt())
    }

    /// `(ξ^{i,1}, …, ξ^{i,J})`; all zeros for [`NoiseOperator::Zero`].
    pub fn draw_increment(&self, i: usize, tau: f64, j_count: usize) -> NoiseIncrement {
        if self.is_zero() {
            return NoiseIncrement { index: i, values: DVector::zeros(j_count) };
        }
        let mut rng = self.stream_rng(i);
        let sqrt_tau = tau.sqrt();
        let values = DVector::from_iterator(j_count, (0..j_count).map(|j| self.draw_from(&mut rng, i, j, sqrt_tau)));
        NoiseIncrement { index: i, values }
    }

    /// `P_h B_j(X)` is a single scaled basis function `c φ_d`; returns `(d, c)`.
    pub fn diffusion_column(&self, space: &FeSpace, prev: &State, j: usize) -> Option<(usize, f64)> {
        let d = space.free_dofs()[j];
        match self.operator {
            NoiseOperator::Additive { sigma } => Some((d, sigma)),
            NoiseOperator::Multiplicative { sigma } => Some((d, sigma * prev.coeffs()[d])),
            NoiseOperator::Zero => None,
        }
    }

    /// Coefficients of the discrete function `Σ_j B_j(X) ξ^{i,j}`.
    pub fn noise_coeffs(&self, space: &FeSpace, prev: &State, inc: &NoiseIncrement) -> Result<DVector<f64>, NoiseError> {
        let mut out = DVector::zeros(space.dof_count());
        if self.is_zero() {
            return Ok(out);
        }
        if inc.len() != space.free_dof_count() {
            return Err(NoiseError::DimensionMismatch { expected: space.free_dof_count(), got: inc.len() });
        }
        if prev.coeffs().len() != space.dof_count() {
            return Err(NoiseError::DimensionMismatch { expected: space.dof_count(), got: prev.coeffs().len() });
        }
        for (j, xi) in inc.values.iter().enumerate() {
            if let Some((d, c)) = self.diffusion_column(space, prev, j) {
                out[d] = c * xi;
            }
        }
        Ok(out)
    }

    /// Load vector `(Σ_j B_j(X^{i-1}) ξ^{i,j}, φ_a)`.
    pub fn apply_b(
        &self,
        space: &FeSpace,
        mass: &SparseOperator,
        prev: &State,
        inc: &NoiseIncrement,
    ) -> Result<DVector<f64>, NoiseError> {
        let coeffs = self.noise_coeffs(space, prev, inc)?;
        Ok(mass.apply(&coeffs))
    }

    /// Piecewise linear random walk `W^j(t_i) = Σ_{ℓ≤i} ξ^{ℓ,j}` on `N` steps.
    pub fn accumulate_walk(&self, j: usize, steps: usize, tau: f64) -> WalkPath {
        let mut values = Vec::with_capacity(steps + 1);
        values.push(0.0);
        let mut acc = 0.0;
        for i in 1..=steps {
            if !self.is_zero() {
                acc += self.sample(i, j, tau);
            }
            values.push(acc);
        }
        WalkPath { tau, values }
    }
}

/// Continuous piecewise linear path sampled at `t_i = i τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkPath {
    pub tau: f64,
    pub values: Vec<f64>,
}

impl WalkPath {
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn t_final(&self) -> f64 {
        self.tau * self.steps() as f64
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("path has at least one node")
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.steps();
        if n == 0 {
            return self.values[0];
        }
        let s = (t / self.tau).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let frac = s - i as f64;
        (1.0 - frac) * self.values[i] + frac * self.values[i + 1]
    }
}

/// Dumps increments as little-endian binary: magic, `N`, `J`, `τ`, then the
/// `N × J` values row by row.
pub fn write_increments<W: Write>(mut out: W, tau: f64, increments: &[NoiseIncrement]) -> io::Result<()> {
    let j_count = increments.first().map_or(0, |inc| inc.len());
    out.write_all(INCREMENT_MAGIC)?;
    out.write_all(&(increments.len() as u64).to_le_bytes())?;
    out.write_all(&(j_count as u64).to_le_bytes())?;
    out.write_all(&tau.to_le_bytes())?;
    for inc in increments {
        if inc.len() != j_count {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "ragged noise increments"));
        }
        for v in inc.values.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_increments<R: Read>(mut input: R) -> io::Result<(f64, Vec<NoiseIncrement>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != INCREMENT_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "not a noise increment dump"));
    }
    let steps = read_u64(&mut input)? as usize;
    let j_count = read_u64(&mut input)? as usize;
    let tau = read_f64(&mut input)?;
    let mut increments = Vec::with_capacity(steps);
    for i in 1..=steps {
        let mut values = DVector::zeros(j_count);
        for v in values.iter_mut() {
            *v = read_f64(&mut input)?;
        }
        increments.push(NoiseIncrement { index: i, values });
    }
    Ok((tau, increments))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
