//! Lossy stage of baseline JPEG: 8×8 DCT, quality-scaled quantization and
//! reconstruction. Entropy coding is lossless and therefore skipped; chroma
//! is kept at full resolution (4:4:4).

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::Image;

const BLOCK: usize = 8;

/// Luminance table, ITU-T T.81 Annex K.1, row-major.
pub const BASE_LUMINANCE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Chrominance table, ITU-T T.81 Annex K.2, row-major.
pub const BASE_CHROMINANCE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTables {
    pub luminance: [u16; 64],
    pub chrominance: [u16; 64],
}

/// Quality scaling as in the IJG reference encoder.
pub fn quantization_tables(quality: u8) -> Result<QuantTables> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("jpeg quality must be in 1..=100, got {quality}")));
    }
    let q = u32::from(quality);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |base: &[u16; 64]| {
        let mut out = [0u16; 64];
        for (o, b) in out.iter_mut().zip(base) {
            *o = ((u32::from(*b) * scale + 50) / 100).clamp(1, 255) as u16;
        }
        out
    };
    Ok(QuantTables {
        luminance: scaled(&BASE_LUMINANCE),
        chrominance: scaled(&BASE_CHROMINANCE),
    })
}

/// `basis[u][x] = C(u)/2 · cos((2x+1)uπ/16)`, so the 2-D DCT is
/// `F = B · f · Bᵀ` and its inverse is `f = Bᵀ · F · B`.
fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; BLOCK];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
            }
        }
        b
    })
}

pub(crate) fn forward_dct(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = Σx f[y][x] b[u][x]
    for y in 0..BLOCK {
        for u in 0..BLOCK {
            tmp[y * BLOCK + u] = (0..BLOCK).map(|x| block[y * BLOCK + x] * b[u][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    // columns: F[v][u] = Σy b[v][y] tmp[y][u]
    for v in 0..BLOCK {
        for u in 0..BLOCK {
            out[v * BLOCK + u] = (0..BLOCK).map(|y| b[v][y] * tmp[y * BLOCK + u]).sum();
        }
    }
    out
}

pub(crate) fn inverse_dct(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[v * BLOCK + x] = (0..BLOCK).map(|u| coef[v * BLOCK + u] * b[u][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y * BLOCK + x] = (0..BLOCK).map(|v| b[v][y] * tmp[v * BLOCK + x]).sum();
        }
    }
    out
}

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0,
    ]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    [
        y + 1.402 * (cr - 128.0),
        y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0),
        y + 1.772 * (cb - 128.0),
    ]
}

/// Quantizes and reconstructs one padded plane in place.
fn process_plane(plane: &mut [f64], pw: usize, ph: usize, table: &[u16; 64]) {
    let mut block = [0.0; 64];
    for by in (0..ph).step_by(BLOCK) {
        for bx in (0..pw).step_by(BLOCK) {
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    block[y * BLOCK + x] = plane[(by + y) * pw + bx + x] - 128.0;
                }
            }
            let mut coef = forward_dct(&block);
            for (c, q) in coef.iter_mut().zip(table) {
                let q = f64::from(*q);
                *c = (*c / q).round() * q;
            }
            let rec = inverse_dct(&coef);
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    plane[(by + y) * pw + bx + x] = rec[y * BLOCK + x] + 128.0;
                }
            }
        }
    }
}

/// JPEG-`quality` analogue: pixels are mapped to 0..255, converted to
/// full-range BT.601 YCbCr, edge-padded to whole 8×8 blocks, quantized in
/// the DCT domain, reconstructed, clamped and mapped back to `[0, 1]`.
pub fn jpeg_distort(x: &Image, quality: u8) -> Result<Image> {
    if x.channels() != 3 {
        return Err(Error::config(format!(
            "jpeg distortion needs a 3-channel image, got {}",
            x.channels()
        )));
    }
    let tables = quantization_tables(quality)?;
    let (w, h) = (x.width(), x.height());
    let (pw, ph) = (w.div_ceil(BLOCK) * BLOCK, h.div_ceil(BLOCK) * BLOCK);

    let mut planes = vec![vec![0.0; pw * ph]; 3];
    for py in 0..ph {
        for px in 0..pw {
            let (sx, sy) = (px.min(w - 1), py.min(h - 1));
            let ycc = rgb_to_ycbcr(
                x.get(sx, sy, 0) * 255.0,
                x.get(sx, sy, 1) * 255.0,
                x.get(sx, sy, 2) * 255.0,
            );
            for (plane, v) in planes.iter_mut().zip(ycc) {
                plane[py * pw + px] = v;
            }
        }
    }
    process_plane(&mut planes[0], pw, ph, &tables.luminance);
    process_plane(&mut planes[1], pw, ph, &tables.chrominance);
    process_plane(&mut planes[2], pw, ph, &tables.chrominance);

    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for xx in 0..w {
            let i = y * pw + xx;
            let rgb = ycbcr_to_rgb(planes[0][i], planes[1][i], planes[2][i]);
            out.extend(rgb.iter().map(|v| v.clamp(0.0, 255.0) / 255.0));
        }
    }
    Image::new(w, h, 3, out)
}
