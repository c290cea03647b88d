//! Geometry-derived stand-in for learned patch features.
//!
//! Each descriptor is a set of random Fourier features of the model-frame
//! surface position (normalised by the object diameter). The cosine between
//! two descriptors approximates a mixture of Gaussian kernels of their 3D
//! distance: a broad band keeps similarity monotone over the whole object,
//! a sharp band makes neighbouring patches distinguishable.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Kernel widths in units of 1/diameter.
const BROAD_SCALE: f64 = 2.0;
const SHARP_SCALE: f64 = 24.0;
/// Fraction of features drawn from the broad band.
const BROAD_FRACTION: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct OracleDescriptors {
    diameter: f64,
    frequencies: Vec<Vec3>,
    phases: Vec<f64>,
}

impl OracleDescriptors {
    pub fn new(diameter: f64, dim: usize, seed: u64) -> Result<Self> {
        if dim < 16 {
            return Err(Error::InvalidInput(format!("oracle descriptors need dim >= 16, got {dim}")));
        }
        if !(diameter > 0.0) {
            return Err(Error::InvalidInput(format!("diameter must be positive, got {diameter}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let broad = (dim as f64 * BROAD_FRACTION).round() as usize;
        let mut frequencies = Vec::with_capacity(dim);
        let mut phases = Vec::with_capacity(dim);
        for i in 0..dim {
            let scale = if i < broad { BROAD_SCALE } else { SHARP_SCALE };
            let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
            frequencies.push(Vec3::new(g(), g(), g()) * scale);
            phases.push(rng.random::<f64>() * std::f64::consts::TAU);
        }
        Ok(Self { diameter, frequencies, phases })
    }

    pub fn dim(&self) -> usize {
        self.frequencies.len()
    }

    pub fn describe_point(&self, p: &Vec3) -> Vec<f32> {
        let q = p / self.diameter;
        let raw: Vec<f64> = self.frequencies.iter().zip(&self.phases).map(|(w, b)| (w.dot(&q) + b).cos()).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| (v / n) as f32).collect()
    }

    /// One unit-norm row per model-frame point.
    pub fn describe(&self, points: &[Vec3]) -> DMatrix<f32> {
        let mut out = DMatrix::<f32>::zeros(points.len(), self.dim());
        for (r, p) in points.iter().enumerate() {
            for (c, v) in self.describe_point(p).into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        out
    }
}
