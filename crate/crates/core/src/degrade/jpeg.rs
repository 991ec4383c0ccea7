//! Baseline JPEG round trip without entropy coding.
//!
//! The lossy parts of a standard encoder/decoder pair are reproduced:
//! 8-bit RGB, JFIF YCbCr, 4:2:0 chroma with box downsampling and triangle
//! upsampling, 8x8 DCT and quantization with the Annex K tables scaled by
//! the IJG quality formula. Huffman coding is lossless and skipped.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{invalid, Result};
use crate::image::{quantize8, ImageTensor};
use crate::tensor::Tensor;

#[rustfmt::skip]
const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quantization table for `quality` in `1..=100` using the IJG scaling.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    base.map(|b| ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16)
}

pub fn luma_table(quality: u8) -> [u16; 64] {
    scaled_table(&LUMA_TABLE, quality)
}

pub fn chroma_table(quality: u8) -> [u16; 64] {
    scaled_table(&CHROMA_TABLE, quality)
}

/// `basis[u][x]`: orthonormal 8-point DCT-II.
fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Quantizes one sample plane in place, padding to whole blocks by edge
/// replication. Values are 8-bit samples in `[0, 255]`.
fn code_plane(plane: &mut [f64], h: usize, w: usize, table: &[u16; 64]) {
    let mut block = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                    block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                }
            }
            let mut coef = dct8x8(&block);
            for (c, q) in coef.iter_mut().zip(table) {
                let q = *q as f64;
                *c = (*c / q).round() * q;
            }
            let rec = idct8x8(&coef);
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    plane[(by + y) * w + bx + x] = (rec[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                }
            }
        }
    }
}

fn downsample2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += plane[(2 * y + dy).min(h - 1) * w + (2 * x + dx).min(w - 1)];
                }
            }
            out[y * ow + x] = (s / 4.0).round();
        }
    }
    (out, oh, ow)
}

/// Triangle-filter doubling along one axis: each output sample mixes its
/// parent 3:1 with the nearer neighbour.
fn upsample_axis(src: &[f64], n: usize, out_n: usize, stride: usize, lanes: usize, dst: &mut [f64]) {
    for lane in 0..lanes {
        for i in 0..out_n {
            let p = i / 2;
            let q = if i % 2 == 0 { p.saturating_sub(1) } else { (p + 1).min(n - 1) };
            dst[lane + i * stride] = 0.75 * src[lane + p * stride] + 0.25 * src[lane + q * stride];
        }
    }
}

fn upsample2(plane: &[f64], ch: usize, cw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * cw];
    upsample_axis(plane, ch, h, cw, cw, &mut rows);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        upsample_axis(&rows[y * cw..(y + 1) * cw], cw, w, 1, 1, &mut out[y * w..(y + 1) * w]);
    }
    out
}

/// Compresses and decompresses `img` at `quality` (1..=100).
pub fn round_trip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(invalid!("JPEG quality must be in 1..=100, got {}", quality));
    }
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let rgb: Vec<[f64; 3]> = (0..n)
        .map(|i| [0, 1, 2].map(|c| quantize8(img.plane(c)[i]) as f64))
        .collect();
    let conv = |f: fn(&[f64; 3]) -> f64| -> Vec<f64> {
        rgb.iter().map(|p| f(p).round().clamp(0.0, 255.0)).collect()
    };
    let mut yp = conv(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
    let cb = conv(|p| -0.168736 * p[0] - 0.331264 * p[1] + 0.5 * p[2] + 128.0);
    let cr = conv(|p| 0.5 * p[0] - 0.418688 * p[1] - 0.081312 * p[2] + 128.0);

    code_plane(&mut yp, h, w, &luma_table(quality));
    let ctab = chroma_table(quality);
    let chroma = [cb, cr].map(|c| {
        let (mut small, ch, cw) = downsample2(&c, h, w);
        code_plane(&mut small, ch, cw, &ctab);
        upsample2(&small, ch, cw, h, w)
    });
    let [cb, cr] = chroma;

    let mut out = vec![0f32; 3 * n];
    for i in 0..n {
        let (y, b, r) = (yp[i], cb[i] - 128.0, cr[i] - 128.0);
        let px = [y + 1.402 * r, y - 0.344136 * b - 0.714136 * r, y + 1.772 * b];
        for c in 0..3 {
            out[c * n + i] = (px[c].round().clamp(0.0, 255.0) / 255.0) as f32;
        }
    }
    ImageTensor::new(Tensor::new([3, h, w], out)?)
}
