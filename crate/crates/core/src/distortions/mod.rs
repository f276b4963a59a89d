//! Perturbed copies of images.
//!
//! [`gaussian_perturb`] is the training-time sampler. The JPEG-style,
//! thumbnail and crop distortions model the lossy processing that produces
//! near-duplicates in the wild and are used at evaluation time. Everything
//! is a deterministic function of the input, the parameters and the RNG.

mod jpeg;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use jpeg::{jpeg_distort, quantization_tables, QuantTables, BASE_CHROMINANCE, BASE_LUMINANCE};

/// Smallest thumbnail pixel budget accepted by [`thumb_distort`].
pub const MIN_THUMB_PIXELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distortion {
    Gaussian { sigma: f64 },
    Jpeg { quality: u8 },
    Thumb { pixels: usize },
    Crop { offset: usize },
}

/// A distortion together with the seed that drives it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    #[serde(flatten)]
    pub distortion: Distortion,
    #[serde(default)]
    pub seed: u64,
}

impl Distortion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distortion::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::config(format!("gaussian sigma must be finite and >= 0, got {sigma}")))
            }
            Distortion::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::config(format!("jpeg quality must be in 1..=100, got {quality}")))
            }
            Distortion::Thumb { pixels } if pixels < MIN_THUMB_PIXELS => Err(Error::config(format!(
                "thumbnail needs at least {MIN_THUMB_PIXELS} pixels, got {pixels}"
            ))),
            _ => Ok(()),
        }
    }

    /// Short name such as `jpeg-50` or `crop-2`.
    pub fn tag(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distortion::Gaussian { sigma } => write!(f, "gaussian-{sigma}"),
            Distortion::Jpeg { quality } => write!(f, "jpeg-{quality}"),
            Distortion::Thumb { pixels } => write!(f, "thumb-{pixels}"),
            Distortion::Crop { offset } => write!(f, "crop-{offset}"),
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    /// Parses `kind-value` or `kind:value`, e.g. `jpeg-10`, `gaussian:0.06`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(['-', ':'])
            .ok_or_else(|| Error::config(format!("distortion '{s}' is not of the form kind-value")))?;
        let bad = |e: &dyn fmt::Display| Error::config(format!("distortion '{s}': {e}"));
        let d = match kind.to_ascii_lowercase().as_str() {
            "gaussian" => Distortion::Gaussian {
                sigma: value.parse().map_err(|e| bad(&e))?,
            },
            "jpeg" => Distortion::Jpeg {
                quality: value.parse().map_err(|e| bad(&e))?,
            },
            "thumb" => Distortion::Thumb {
                pixels: value.parse().map_err(|e| bad(&e))?,
            },
            "crop" => Distortion::Crop {
                offset: value.parse().map_err(|e| bad(&e))?,
            },
            other => return Err(Error::config(format!("unknown distortion kind '{other}'"))),
        };
        d.validate()?;
        Ok(d)
    }
}

impl DistortionSpec {
    pub fn new(distortion: Distortion, seed: u64) -> Self {
        Self { distortion, seed }
    }

    pub fn tag(&self) -> String {
        self.distortion.tag()
    }

    /// RNG for the `index`-th image this spec is applied to. Each index gets
    /// its own ChaCha stream so images can be processed in any order.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Applies the distortion to the `index`-th image of a collection.
    pub fn apply(&self, image: &Image, index: u64) -> Result<Image> {
        self.distortion.validate()?;
        match self.distortion {
            Distortion::Gaussian { sigma } => gaussian_perturb(image, sigma, &mut self.rng_for(index)),
            Distortion::Jpeg { quality } => jpeg_distort(image, quality),
            Distortion::Thumb { pixels } => thumb_distort(image, pixels),
            Distortion::Crop { offset } => crop_distort(image, offset, &mut self.rng_for(index)),
        }
    }

    /// True when the distortion leaves every image unchanged.
    pub fn is_identity_for(&self, width: usize, height: usize) -> bool {
        match self.distortion {
            Distortion::Gaussian { sigma } => sigma == 0.0,
            Distortion::Crop { offset } => offset == 0,
            Distortion::Thumb { pixels } => pixels >= width * height,
            Distortion::Jpeg { .. } => false,
        }
    }
}

/// `len` independent `N(0, sigma²)` draws.
pub fn gaussian_noise<R: Rng + ?Sized>(len: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Adds pixel-wise independent Gaussian noise and clamps back into `[0, 1]`.
pub fn gaussian_perturb<R: Rng + ?Sized>(x: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("gaussian sigma must be finite and >= 0, got {sigma}")));
    }
    let noise = gaussian_noise(x.pixels().len(), sigma, rng);
    let pixels = x.pixels().iter().zip(noise).map(|(p, e)| p + e).collect();
    Image::from_clamped(x.width(), x.height(), x.channels(), pixels)
}

/// Downscales to roughly `pixels` pixels keeping the aspect ratio, then
/// scales back to the original size. Both steps are bilinear.
pub fn thumb_distort(x: &Image, pixels: usize) -> Result<Image> {
    if pixels < MIN_THUMB_PIXELS {
        return Err(Error::config(format!(
            "thumbnail needs at least {MIN_THUMB_PIXELS} pixels, got {pixels}"
        )));
    }
    let (w, h, c) = (x.width(), x.height(), x.channels());
    let (tw, th) = thumbnail_size(w, h, pixels);
    if (tw, th) == (w, h) {
        return Ok(x.clone());
    }
    let small = x.resample_region(0, 0, w, h, tw, th);
    let back = crate::image::resample(&small, tw, c, (0, 0, tw, th), w, h);
    Image::new(w, h, c, back)
}

/// Thumbnail dimensions for a `w × h` image and a pixel budget.
pub fn thumbnail_size(w: usize, h: usize, pixels: usize) -> (usize, usize) {
    let s = (pixels as f64 / (w * h) as f64).sqrt().min(1.0);
    let tw = ((w as f64 * s).round() as usize).max(1);
    let th = ((h as f64 * s).round() as usize).max(1);
    (tw, th)
}

/// Takes a `(w − o) × (h − o)` window at a uniformly random position inside
/// the image and resizes it back to `w × h`.
pub fn crop_distort<R: Rng + ?Sized>(x: &Image, offset: usize, rng: &mut R) -> Result<Image> {
    let (w, h, c) = (x.width(), x.height(), x.channels());
    if offset >= w.min(h) {
        return Err(Error::config(format!(
            "crop offset {offset} must be below the smaller side of a {w}×{h} image"
        )));
    }
    let (x0, y0) = crop_corner(offset, rng);
    let out = x.resample_region(x0, y0, w - offset, h - offset, w, h);
    Image::new(w, h, c, out)
}

/// Top-left corner of a crop window, uniform over `{0..=offset}²`.
pub fn crop_corner<R: Rng + ?Sized>(offset: usize, rng: &mut R) -> (usize, usize) {
    let x0 = rng.random_range(0..=offset);
    let y0 = rng.random_range(0..=offset);
    (x0, y0)
}

/// Training-time perturbation source. Counts how many images it has
/// perturbed so callers can verify which code paths touched the sampler.
#[derive(Debug, Clone)]
pub struct GaussianSampler<R> {
    rng: R,
    sigma: f64,
    calls: usize,
}

impl<R: Rng> GaussianSampler<R> {
    pub fn new(sigma: f64, rng: R) -> Result<Self> {
        Distortion::Gaussian { sigma }.validate()?;
        Ok(Self { rng, sigma, calls: 0 })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn perturb(&mut self, x: &Image) -> Result<Image> {
        self.calls += 1;
        gaussian_perturb(x, self.sigma, &mut self.rng)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}
