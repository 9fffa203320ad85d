use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ExperimentError, MeshError};
use crate::experiments::{DataRecipe, ExperimentConfig};
use crate::fespace::{ElementKind, FeSpace, State};
use crate::mesh::{Mesh, Point};

/// Clean image `½·𝟙_square + 𝟙_disk`: the closed square `[¼, ¾]²` and the
/// closed disk of radius ¼ centred at `(0.7, 0.5)`. Values lie in
/// `{0, 0.5, 1, 1.5}`.
pub fn clean_image_value(p: Point) -> f64 {
    let square = (0.25..=0.75).contains(&p[0]) && (0.25..=0.75).contains(&p[1]);
    let disk = (p[0] - 0.7).powi(2) + (p[1] - 0.5).powi(2) <= 0.0625;
    0.5 * f64::from(u8::from(square)) + f64::from(u8::from(disk))
}

/// Synthetic data on a P1 data mesh: `clean = g̃_h`, `noise = ξ_h`,
/// `noisy = g̃_h + ξ_h`.
#[derive(Debug, Clone)]
pub struct ImageField {
    pub space: Arc<FeSpace>,
    pub clean: State,
    pub noise: State,
    pub noisy: State,
}

/// The image on the level-6 data mesh with noise amplitude 0.1.
pub fn make_test_image(seed: u64) -> Result<ImageField, MeshError> {
    make_test_image_on(6, 0.1, seed)
}

/// Nodal interpolant of [`clean_image_value`] plus `amplitude·U(-1, 1)` at
/// interior vertices, drawn in vertex order from a ChaCha8 stream.
pub fn make_test_image_on(level: u32, amplitude: f64, seed: u64) -> Result<ImageField, MeshError> {
    let space = Arc::new(FeSpace::new(Arc::new(Mesh::build_crisscross(level)?), ElementKind::P1));
    let clean = space.nodal_interpolate(clean_image_value, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = space
        .constrained()
        .iter()
        .map(|&c| if c { 0.0 } else { amplitude * rng.random_range(-1.0..1.0) });
    let noise = State::from_coeffs(&space, DVector::from_iterator(space.dof_count(), values))
        .expect("dimension matches");
    let noisy = State::from_coeffs(&space, clean.coeffs() + noise.coeffs()).expect("dimension matches");
    Ok(ImageField { space, clean, noise, noisy })
}

/// Nodal interpolation of a discrete function into another space; boundary
/// dofs of the target are zeroed. Exact when the target contains the source.
pub fn transfer(from: &FeSpace, state: &State, to: &FeSpace) -> State {
    to.nodal_interpolate(from.field(state), true)
}

/// Initial value, datum and clean reference in `space` for a config's data
/// recipe.
pub(crate) struct ProblemData {
    pub x0: State,
    pub datum: State,
    pub clean: State,
    pub image: Option<ImageField>,
}

pub(crate) fn problem_data(cfg: &ExperimentConfig, space: &FeSpace) -> Result<ProblemData, ExperimentError> {
    Ok(match cfg.data {
        DataRecipe::Image => {
            let img = make_test_image_on(cfg.data_level, cfg.data_noise, cfg.data_seed)?;
            let clean = transfer(&img.space, &img.clean, space);
            let datum = transfer(&img.space, &img.noisy, space);
            ProblemData { x0: clean.clone(), datum, clean, image: Some(img) }
        }
        DataRecipe::Zero => {
            let z = State::zeros(space);
            ProblemData { x0: z.clone(), datum: z.clone(), clean: z, image: None }
        }
        DataRecipe::Sine => {
            let s = space.nodal_interpolate(|p| 0.5 * (PI * p[0]).sin() * (PI * p[1]).sin(), true);
            ProblemData { x0: s.clone(), datum: s.clone(), clean: s, image: None }
        }
    })
}
