//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::onboard::{OnboardConfig, PatchGridSpec};
use crate::pose::{EstimatorConfig, RansacConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub delta: f64,
    pub pca_dim: usize,
    pub gamma: f64,
    pub top_k: usize,
    pub tau_factor: f64,
    pub ransac_iterations: usize,
    /// Apparent object size in template renders (pixels).
    pub d_px: f64,
    pub seed: u64,
    /// Raw dimension of geometry-derived descriptors.
    pub oracle_dim: usize,
    /// Project descriptors without mean subtraction.
    pub strict_eq2: bool,
    pub refit: bool,
    pub mask_only: bool,
    /// Surface samples used for alignment scoring and metrics.
    pub model_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 25.0,
            delta: 60.0,
            pca_dim: 256,
            gamma: 0.3,
            top_k: 15,
            tau_factor: 0.05,
            ransac_iterations: 512,
            d_px: 336.0,
            seed: 0,
            oracle_dim: 384,
            strict_eq2: false,
            refit: true,
            mask_only: false,
            model_points: 1024,
        }
    }
}

pub const KEYS: [&str; 14] = [
    "alpha",
    "delta",
    "pca_dim",
    "gamma",
    "top_k",
    "tau_factor",
    "ransac_iterations",
    "d_px",
    "seed",
    "oracle_dim",
    "strict_eq2",
    "refit",
    "mask_only",
    "model_points",
];

impl RunConfig {
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: n + 1, msg };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_str(&std::fs::read_to_string(path)?, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::InvalidInput(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "pca_dim" => self.pca_dim = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "tau_factor" => self.tau_factor = num(key, value)?,
            "ransac_iterations" => self.ransac_iterations = num(key, value)?,
            "d_px" => self.d_px = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "oracle_dim" => self.oracle_dim = num(key, value)?,
            "strict_eq2" => self.strict_eq2 = num(key, value)?,
            "refit" => self.refit = num(key, value)?,
            "mask_only" => self.mask_only = num(key, value)?,
            "model_points" => self.model_points = num(key, value)?,
            _ => return Err(Error::InvalidInput(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.alpha > 0.0 && self.alpha < 180.0) || !(self.delta > 0.0 && self.delta <= 360.0) {
            return bad(format!("alpha {} / delta {} out of range", self.alpha, self.delta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} not in [0, 1]", self.gamma));
        }
        if self.pca_dim == 0 || self.top_k == 0 || self.ransac_iterations == 0 || self.model_points == 0 {
            return bad("pca_dim, top_k, ransac_iterations and model_points must be positive".into());
        }
        if !(self.tau_factor > 0.0) || !(self.d_px > 0.0) {
            return bad(format!("tau_factor {} and d_px {} must be positive", self.tau_factor, self.d_px));
        }
        if self.oracle_dim < 16 {
            return bad(format!("oracle_dim {} below 16", self.oracle_dim));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "pca_dim = {}", self.pca_dim);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "tau_factor = {}", self.tau_factor);
        let _ = writeln!(s, "ransac_iterations = {}", self.ransac_iterations);
        let _ = writeln!(s, "d_px = {}", self.d_px);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "oracle_dim = {}", self.oracle_dim);
        let _ = writeln!(s, "strict_eq2 = {}", self.strict_eq2);
        let _ = writeln!(s, "refit = {}", self.refit);
        let _ = writeln!(s, "mask_only = {}", self.mask_only);
        let _ = writeln!(s, "model_points = {}", self.model_points);
        s
    }

    pub fn onboard_config(&self) -> OnboardConfig {
        OnboardConfig {
            alpha_deg: self.alpha,
            delta_deg: self.delta,
            pca_dim: self.pca_dim,
            apparent_px: self.d_px,
            center_pca: !self.strict_eq2,
            grid: PatchGridSpec::default(),
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            top_k: self.top_k,
            gamma: self.gamma,
            ransac: RansacConfig {
                iterations: self.ransac_iterations,
                tau_factor: self.tau_factor,
                min_inliers: 6,
                seed: self.seed,
                refit: self.refit,
            },
            mask_only: self.mask_only,
        }
    }
}

/// Placeholder origin for configs parsed from strings.
pub fn inline_origin() -> PathBuf {
    PathBuf::from("<inline>")
}
