use std::io::Write;
use std::path::Path;

use crate::error::ExperimentError;
use crate::fespace::{FeSpace, State};
use crate::mesh::Point;

/// 8-bit grayscale raster, row 0 at the top (`y` near 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    fn sample(resolution: usize, f: impl Fn(Point) -> f64) -> Result<Self, ExperimentError> {
        if resolution < 16 {
            return Err(ExperimentError::Config(format!("resolution {resolution} below 16")));
        }
        let n = resolution as f64;
        let pixels = (0..resolution)
            .flat_map(|r| (0..resolution).map(move |c| [(c as f64 + 0.5) / n, 1.0 - (r as f64 + 0.5) / n]))
            .map(|p| (255.0 * f(p)).round().clamp(0.0, 255.0) as u8)
            .collect();
        Ok(Self { width: resolution, height: resolution, pixels })
    }

    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ExperimentError> {
        image::save_buffer(path, &self.pixels, self.width as u32, self.height as u32, image::ExtendedColorType::L8)?;
        Ok(())
    }

    /// Writes `<stem>.pgm` and `<stem>.png`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>, ExperimentError> {
        let pgm = dir.join(format!("{stem}.pgm"));
        self.write_pgm(std::io::BufWriter::new(std::fs::File::create(&pgm)?))?;
        let png = dir.join(format!("{stem}.png"));
        self.save_png(&png)?;
        Ok(vec![pgm, png])
    }
}

/// Samples the discrete function at pixel centres: `clamp(round(255 u))`.
/// Values above 1 saturate.
pub fn render_image(space: &FeSpace, state: &State, resolution: usize) -> Result<Raster, ExperimentError> {
    space.check(state)?;
    Raster::sample(resolution, |p| space.evaluate(state, p))
}

/// As [`render_image`] for per-triangle constants.
pub fn render_p0(space: &FeSpace, values: &[f64], resolution: usize) -> Result<Raster, ExperimentError> {
    let mesh = space.mesh();
    if values.len() != mesh.triangle_count() {
        return Err(crate::error::FeError::DimensionMismatch { expected: mesh.triangle_count(), got: values.len() }.into());
    }
    Raster::sample(resolution, |p| values[mesh.locate(p)])
}
