//! Normalized images and bilinear resampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

/// `height × width × channels` grid of values in `[0, 1]`, row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!("images need 1 or 3 channels, got {channels}")));
        }
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::config(format!(
                "images must be at least {MIN_SIDE}×{MIN_SIDE}, got {width}×{height}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::config(format!(
                "{width}×{height}×{channels} image needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Builds an image from values that may stray outside `[0, 1]`, clamping them.
    pub fn from_clamped(width: usize, height: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Channel-major `c × h × w` tensor for the network.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![0.0; w * h * c];
        for (i, px) in self.pixels.chunks(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                data[ch * w * h + i] = *v;
            }
        }
        Tensor::from_parts_unchecked(vec![c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let total: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum();
        total / self.pixels.len() as f64
    }

    /// Bit pattern of the pixels, usable as an exact-equality key.
    pub fn pixel_bits(&self) -> Vec<u64> {
        let mut key = Vec::with_capacity(self.pixels.len() + 3);
        key.extend([self.width as u64, self.height as u64, self.channels as u64]);
        key.extend(self.pixels.iter().map(|p| p.to_bits()));
        key
    }

    /// Resamples a `region_w × region_h` window with top-left corner
    /// `(x0, y0)` to `out_w × out_h`, producing a raw buffer.
    pub(crate) fn resample_region(
        &self,
        x0: usize,
        y0: usize,
        region_w: usize,
        region_h: usize,
        out_w: usize,
        out_h: usize,
    ) -> Vec<f64> {
        resample(
            &self.pixels,
            self.width,
            self.channels,
            (x0, y0, region_w, region_h),
            out_w,
            out_h,
        )
    }
}

/// Source coordinate and blend weight for one output index, half-pixel
/// centers, clamped to the source extent.
fn taps(out_len: usize, src_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resample of a window of an interleaved buffer.
pub(crate) fn resample(
    src: &[f64],
    stride_w: usize,
    channels: usize,
    (x0, y0, rw, rh): (usize, usize, usize, usize),
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let xt = taps(out_w, rw);
    let yt = taps(out_h, rh);
    let at = |x: usize, y: usize, c: usize| src[((y0 + y) * stride_w + x0 + x) * channels + c];
    let mut out = Vec::with_capacity(out_w * out_h * channels);
    for &(ylo, yhi, fy) in &yt {
        for &(xlo, xhi, fx) in &xt {
            for c in 0..channels {
                let top = lerp(at(xlo, ylo, c), at(xhi, ylo, c), fx);
                let bottom = lerp(at(xlo, yhi, c), at(xhi, yhi, c), fx);
                out.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}
