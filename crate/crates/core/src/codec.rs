//! Fixed orthonormal latent codec.
//!
//! Each `f x f` pixel block (`f = 8`) is one latent position. The block's
//! `3 f^2` centered values are projected onto `C_lat` orthonormal basis
//! vectors; decoding applies the transpose and clamps to `[0, 1]`. The basis
//! vectors are products of a 2-D DCT-II basis function over the block and an
//! opponent color direction:
//!
//! ```text
//! Y  = (1, 1, 1) / sqrt(3)    Cb = (-1, -1, 2) / sqrt(6)    Cr = (1, -1, 0) / sqrt(2)
//! ```
//!
//! Basis vectors are taken in order of the key `zigzag_rank * m`, with
//! `m = 1` for luma and `m = 2` for the two chroma directions (ties go
//! Y, Cb, Cr), so luma keeps twice as many frequencies as each chroma
//! channel. Twelve channels keep 6 luma and 3 + 3 chroma coefficients.
//!
//! Because every latent position depends only on its own pixel block, tiled
//! encoding with block-aligned tiles reproduces untiled encoding exactly.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::image::ImageTensor;
use crate::tensor::{gemm, LatentTensor, Mat, Tensor};
use crate::tiling::TilePlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub factor: usize,
    pub latent_channels: usize,
    /// Multiplier applied after projection (and divided out before decoding).
    pub scale: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            factor: 8,
            latent_channels: 12,
            scale: 1.0,
        }
    }
}

const COLORS: [[f64; 3]; 3] = [
    [0.577_350_269_189_625_8; 3],
    [-0.408_248_290_463_863, -0.408_248_290_463_863, 0.816_496_580_927_726],
    [0.707_106_781_186_547_5, -0.707_106_781_186_547_5, 0.0],
];

/// `(u, v)` frequency pairs of an `n x n` block in JPEG zigzag order.
fn zigzag(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n);
    for s in 0..2 * n - 1 {
        let lo = s.saturating_sub(n - 1);
        let hi = s.min(n - 1);
        if s % 2 == 0 {
            for u in (lo..=hi).rev() {
                out.push((u, s - u));
            }
        } else {
            for u in lo..=hi {
                out.push((u, s - u));
            }
        }
    }
    out
}

fn dct(n: usize, k: usize, i: usize) -> f64 {
    let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
}

#[derive(Debug)]
pub struct Codec {
    cfg: CodecConfig,
    /// `[C_lat, 3 f^2]`, rows orthonormal; column index is `(c * f + y) * f + x`.
    basis: Vec<f32>,
    encodes: AtomicUsize,
}

impl Clone for Codec {
    fn clone(&self) -> Self {
        Codec {
            cfg: self.cfg.clone(),
            basis: self.basis.clone(),
            encodes: AtomicUsize::new(self.encode_calls()),
        }
    }
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        let f = cfg.factor;
        let dim = 3 * f * f;
        if f == 0 || cfg.latent_channels == 0 || cfg.latent_channels > dim {
            return Err(invalid!(
                "codec needs factor > 0 and 1..={} channels, got factor {} and {} channels",
                dim,
                f,
                cfg.latent_channels
            ));
        }
        if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
            return Err(invalid!("codec scale must be positive"));
        }
        let zz = zigzag(f);
        let mut order: Vec<(usize, usize, usize)> = Vec::with_capacity(dim);
        for (rank, _) in zz.iter().enumerate() {
            for color in 0..3 {
                let key = rank * if color == 0 { 1 } else { 2 };
                order.push((key, color, rank));
            }
        }
        order.sort();
        let mut basis = Vec::with_capacity(cfg.latent_channels * dim);
        for &(_, color, rank) in order.iter().take(cfg.latent_channels) {
            let (u, v) = zz[rank];
            for c in 0..3 {
                for y in 0..f {
                    for x in 0..f {
                        basis.push((COLORS[color][c] * dct(f, u, y) * dct(f, v, x)) as f32);
                    }
                }
            }
        }
        Ok(Codec {
            cfg,
            basis,
            encodes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn factor(&self) -> usize {
        self.cfg.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    /// Number of [`Self::encode`] calls so far; a tiled encode counts once per tile.
    pub fn encode_calls(&self) -> usize {
        self.encodes.load(Ordering::Relaxed)
    }

    pub fn latent_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.cfg.factor;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(shape_err!("{}x{} image is not divisible by codec factor {}", h, w, f));
        }
        Ok((h / f, w / f))
    }

    /// `[C_lat, H / f, W / f]` latent of an image.
    pub fn encode(&self, img: &ImageTensor) -> Result<LatentTensor> {
        let (h, w) = (img.height(), img.width());
        let (lh, lw) = self.latent_hw(h, w)?;
        self.encodes.fetch_add(1, Ordering::Relaxed);
        let f = self.cfg.factor;
        let dim = 3 * f * f;
        let n = lh * lw;
        // blocks as columns: [3 f^2, positions]
        let mut cols = vec![0f32; dim * n];
        for c in 0..3 {
            let plane = img.plane(c);
            for by in 0..lh {
                for y in 0..f {
                    for bx in 0..lw {
                        for x in 0..f {
                            let row = (c * f + y) * f + x;
                            cols[row * n + by * lw + bx] = plane[(by * f + y) * w + bx * f + x] - 0.5;
                        }
                    }
                }
            }
        }
        let k = self.cfg.latent_channels;
        let mut out = vec![0f32; k * n];
        gemm(Mat::new(&self.basis, k, dim), Mat::new(&cols, dim, n), 0.0, &mut out);
        if self.cfg.scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= self.cfg.scale);
        }
        Tensor::new([k, lh, lw], out)
    }

    /// Image of a latent, clamped to `[0, 1]`.
    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let [k, lh, lw] = z.chw()?;
        if k != self.cfg.latent_channels {
            return Err(shape_err!("latent has {} channels, codec expects {}", k, self.cfg.latent_channels));
        }
        let f = self.cfg.factor;
        let dim = 3 * f * f;
        let n = lh * lw;
        let zs: Vec<f32>;
        let zd = if self.cfg.scale != 1.0 {
            zs = z.data().iter().map(|v| v / self.cfg.scale).collect();
            &zs[..]
        } else {
            z.data()
        };
        let mut cols = vec![0f32; dim * n];
        gemm(Mat::new(&self.basis, k, dim).t(), Mat::new(zd, k, n), 0.0, &mut cols);
        let (h, w) = (lh * f, lw * f);
        let mut out = vec![0f32; 3 * h * w];
        for c in 0..3 {
            for by in 0..lh {
                for y in 0..f {
                    for bx in 0..lw {
                        for x in 0..f {
                            let row = (c * f + y) * f + x;
                            out[(c * h + by * f + y) * w + bx * f + x] =
                                (cols[row * n + by * lw + bx] + 0.5).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        ImageTensor::new(Tensor::new([3, h, w], out)?)
    }

    fn tile_plan(&self, h: usize, w: usize, tile_px: usize, overlap_px: usize) -> Result<TilePlan> {
        let f = self.cfg.factor;
        if tile_px < f {
            return Err(invalid!("tile of {} px is smaller than the {} px codec block", tile_px, f));
        }
        if overlap_px >= tile_px {
            return Err(invalid!("overlap {} must be smaller than tile {}", overlap_px, tile_px));
        }
        if !tile_px.is_multiple_of(f) || !overlap_px.is_multiple_of(f) {
            return Err(invalid!("tile and overlap must be multiples of {} px", f));
        }
        TilePlan::new(h, w, tile_px / f, (tile_px - overlap_px) / f)
    }

    /// Encodes overlapping pixel tiles separately and blends the latents.
    pub fn encode_tiled(&self, img: &ImageTensor, tile_px: usize, overlap_px: usize) -> Result<LatentTensor> {
        let (lh, lw) = self.latent_hw(img.height(), img.width())?;
        let plan = self.tile_plan(lh, lw, tile_px, overlap_px)?;
        let f = self.cfg.factor;
        let (th, tw) = plan.tile_shape();
        let tiles = plan
            .offsets()
            .iter()
            .map(|&(y, x)| self.encode(&img.crop(y * f, x * f, th * f, tw * f)?))
            .collect::<Result<Vec<_>>>()?;
        plan.merge(&tiles)
    }

    /// Decodes overlapping latent tiles separately and blends the images.
    pub fn decode_tiled(&self, z: &LatentTensor, tile_px: usize, overlap_px: usize) -> Result<ImageTensor> {
        let [_, lh, lw] = z.chw()?;
        let plan = self.tile_plan(lh, lw, tile_px, overlap_px)?;
        let f = self.cfg.factor;
        let pixel_plan = TilePlan::new(lh * f, lw * f, tile_px, (tile_px - overlap_px).max(1))?;
        // the pixel plan must line up with the latent one tile for tile
        let aligned = pixel_plan.len() == plan.len()
            && pixel_plan
                .offsets()
                .iter()
                .zip(plan.offsets())
                .all(|(p, l)| p.0 == l.0 * f && p.1 == l.1 * f);
        if !aligned {
            return Err(invalid!("pixel and latent tile grids disagree"));
        }
        let tiles = plan
            .split(z)?
            .iter()
            .map(|t| self.decode(t).map(ImageTensor::into_tensor))
            .collect::<Result<Vec<_>>>()?;
        ImageTensor::clamped(pixel_plan.merge(&tiles)?)
    }
}
