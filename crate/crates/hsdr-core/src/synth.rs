//! Seeded synthetic scene generator for oracle tests and desk-scale
//! imbalance experiments.
//!
//! Generation is reproducible bit-for-bit from the spec seed. The procedure
//! is fixed as follows (see [`crate::rng`] for the primitive semantics):
//!
//! 1. Pixel placement: all `width*height` pixel indices are Fisher-Yates
//!    shuffled with substream 0 of the seed, then the first
//!    `round(fraction_c * pixels)` indices go to class 1, the next block to
//!    class 2, and so on; leftover pixels stay unlabeled (label 0).
//! 2. Spectra: class `c` uses substream `c`. Its pixels are visited in
//!    ascending pixel index order; band `b` of a pixel is drawn as
//!    `mean[b] + sqrt(scale^2 * mean[b]^2 + noise_sigma^2) * z` with one
//!    standard normal `z` per band. Unlabeled pixels use substream
//!    `n_classes + 1` and carry pure noise around zero.
//!
//! Under this model a class with `noise_sigma = 0` has covariance
//! `scale^2 * diag(mean)^2`: it varies only along the bands where its mean
//! spectrum is nonzero, which gives closed-form expectations for the
//! transform tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HsdrError, Result};
use crate::hsio::{HyperCube, LabelRaster};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Mean spectrum, length must equal the scene band count.
    pub mean: Vec<f64>,
    /// Relative amplitude spread: per-band standard deviation is
    /// `scale * |mean[b]|`.
    pub scale: f64,
    /// Fraction of all pixels assigned to this class.
    pub fraction: f64,
    /// Optional display name carried into the label raster.
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub classes: Vec<ClassSpec>,
    /// Isotropic per-band noise standard deviation added to every pixel.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return Err(HsdrError::SpecInvalid(format!(
                "dimensions must be positive, got {}x{}x{}",
                self.width, self.height, self.bands
            )));
        }
        if self.classes.is_empty() {
            return Err(HsdrError::SpecInvalid("at least one class required".into()));
        }
        if self.classes.len() > u16::MAX as usize {
            return Err(HsdrError::SpecInvalid("too many classes".into()));
        }
        let mut total_fraction = 0.0;
        for (i, class) in self.classes.iter().enumerate() {
            if class.mean.len() != self.bands {
                return Err(HsdrError::SpecInvalid(format!(
                    "class {} mean has {} entries, scene has {} bands",
                    i + 1,
                    class.mean.len(),
                    self.bands
                )));
            }
            if class.mean.iter().any(|v| !v.is_finite()) {
                return Err(HsdrError::SpecInvalid(format!(
                    "class {} mean has non-finite entries",
                    i + 1
                )));
            }
            if !(class.scale >= 0.0) || !class.scale.is_finite() {
                return Err(HsdrError::SpecInvalid(format!(
                    "class {} scale must be >= 0",
                    i + 1
                )));
            }
            if !(class.fraction >= 0.0) {
                return Err(HsdrError::SpecInvalid(format!(
                    "class {} fraction must be >= 0",
                    i + 1
                )));
            }
            total_fraction += class.fraction;
        }
        if total_fraction > 1.0 + 1e-12 {
            return Err(HsdrError::SpecInvalid(format!(
                "class fractions sum to {total_fraction}, must be <= 1"
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(HsdrError::SpecInvalid("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<SceneSpec> {
        let spec: SceneSpec = toml::from_str(text)
            .map_err(|e| HsdrError::SpecInvalid(format!("scene config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<SceneSpec> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Generate the cube and aligned label raster described by `spec`.
pub fn generate(spec: &SceneSpec) -> Result<(HyperCube, LabelRaster)> {
    spec.validate()?;
    let pixels = spec.width * spec.height;
    let n_classes = spec.classes.len();

    let mut order: Vec<usize> = (0..pixels).collect();
    let mut placement_rng = SeededRng::stream(spec.seed, 0);
    placement_rng.shuffle(&mut order);

    let mut labels = vec![0u16; pixels];
    let mut cursor = 0usize;
    for (c, class) in spec.classes.iter().enumerate() {
        let want = (class.fraction * pixels as f64).round() as usize;
        let take = want.min(pixels - cursor);
        for &pixel in &order[cursor..cursor + take] {
            labels[pixel] = (c + 1) as u16;
        }
        cursor += take;
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes + 1];
    for (pixel, &label) in labels.iter().enumerate() {
        per_class[label as usize].push(pixel);
    }

    let mut data = vec![0.0f32; pixels * spec.bands];
    let zero_mean = vec![0.0f64; spec.bands];
    for class_id in 0..=n_classes {
        let (mean, scale, stream) = if class_id == 0 {
            (&zero_mean, 0.0, n_classes as u64 + 1)
        } else {
            let c = &spec.classes[class_id - 1];
            (&c.mean, c.scale, class_id as u64)
        };
        let std_per_band: Vec<f64> = mean
            .iter()
            .map(|m| (scale * scale * m * m + spec.noise_sigma * spec.noise_sigma).sqrt())
            .collect();
        let mut rng = SeededRng::stream(spec.seed, stream);
        for &pixel in &per_class[class_id] {
            let (x, y) = (pixel % spec.width, pixel / spec.width);
            for b in 0..spec.bands {
                let v = mean[b] + std_per_band[b] * rng.standard_normal();
                data[(b * spec.height + y) * spec.width + x] = v as f32;
            }
        }
    }

    let cube = HyperCube::from_data(spec.width, spec.height, spec.bands, data)?;
    let mut raster = LabelRaster::from_labels(spec.width, spec.height, labels)?;
    if spec.classes.iter().any(|c| c.name.is_some()) {
        let names = spec
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| c.name.clone().unwrap_or_else(|| format!("class_{}", i + 1)))
            .collect();
        raster = raster.with_class_names(names);
    }
    Ok((cube, raster))
}
