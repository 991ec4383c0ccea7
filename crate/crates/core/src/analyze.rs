//! Metrics and studies: PSNR, MS-SSIM, a Sobel sharpness proxy, per-block
//! feature similarity between clean and degraded inputs, guidance-threshold
//! sweeps and adapter parameter counts.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::denoiser::{layout, Denoiser, DenoiserConfig, PromptEmbedding};
use crate::error::{invalid, Result};
use crate::image::{luma, sobel_magnitude, ImageTensor};
use crate::sampler::{BicubicInit, InitProvider, RestoreConfig, Restorer};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.tensor().expect_same_shape(b.tensor())?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Text form of a PSNR value; infinity is written `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Separable Gaussian filtering without padding ("valid" output).
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms of SSIM for one plane.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    // 11 taps at sigma 1.5, shortened on planes narrower than that
    let side = 11.min(h).min(w);
    let side = if side % 2 == 0 { side - 1 } else { side };
    let mut taps: Vec<f64> = (0..side)
        .map(|i| {
            let d = i as f64 - (side / 2) as f64;
            (-d * d / (2.0 * 1.5 * 1.5)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &taps);
    let (mu_b, ..) = filter_valid(b, h, w, &taps);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, &taps);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, &taps);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, &taps);
    let n = (oh * ow) as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        l_sum += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs_sum += (2.0 * cov + C2) / (va + vb + C2);
    }
    (l_sum / n, cs_sum / n)
}

fn halve(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] =
                0.25 * (p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM with the standard exponents, averaged over RGB.
/// Scales use 2x2 mean pooling; the Gaussian window shrinks on planes
/// narrower than 11 pixels, and negative contrast terms are clipped to 0.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.tensor().expect_same_shape(b.tensor())?;
    let (h, w) = (a.height(), a.width());
    if h < 16 || w < 16 {
        return Err(invalid!("MS-SSIM needs at least 16x16 pixels, got {}x{}", h, w));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let mut pa: Vec<f64> = a.plane(c).iter().map(|v| *v as f64).collect();
        let mut pb: Vec<f64> = b.plane(c).iter().map(|v| *v as f64).collect();
        let (mut ch, mut cw) = (h, w);
        let mut score = 1.0;
        for (s, wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (l, cs) = ssim_terms(&pa, &pb, ch, cw);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { l * cs } else { cs };
            score *= term.max(0.0).powf(*wt);
            if s + 1 < MS_SSIM_WEIGHTS.len() {
                (pa, ..) = halve(&pa, ch, cw);
                let (nb, nh, nw) = halve(&pb, ch, cw);
                pb = nb;
                (ch, cw) = (nh, nw);
            }
        }
        total += score;
    }
    Ok(total / 3.0)
}

/// Mean Sobel gradient magnitude of the luma.
pub fn sharpness(img: &ImageTensor) -> f64 {
    let g = sobel_magnitude(&luma(img), img.height(), img.width());
    g.iter().map(|v| *v as f64).sum::<f64>() / g.len() as f64
}

/// Cosine of the angle between two flattened tensors. Two zero tensors are
/// identical (1); one zero tensor is orthogonal to anything (0).
pub fn cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    Ok(match (aa == 0.0, bb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        // sqrt(aa * aa) == aa exactly, so identical inputs give exactly 1
        _ => (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSimilarity {
    pub label: String,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub spec: String,
    pub t: usize,
    pub blocks: Vec<BlockSimilarity>,
}

/// Per-block cosine similarity between the denoiser features of
/// `encode(clean)` and `encode(degraded)` at timestep `t` (no noise is
/// added; `t` only selects the timestep embedding).
pub fn feature_similarity(
    clean: &ImageTensor,
    degraded: &ImageTensor,
    denoiser: &Denoiser,
    codec: &Codec,
    t: usize,
    prompt: &PromptEmbedding,
    spec: &str,
) -> Result<SimilarityReport> {
    clean.tensor().expect_same_shape(degraded.tensor())?;
    let fa = denoiser.extract_block_features(&codec.encode(clean)?, t, prompt)?;
    let fb = denoiser.extract_block_features(&codec.encode(degraded)?, t, prompt)?;
    let blocks = fa
        .iter()
        .zip(&fb)
        .map(|(a, b)| {
            Ok(BlockSimilarity {
                label: a.label.clone(),
                cosine: cosine(&a.data, &b.data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityReport {
        spec: spec.to_string(),
        t,
        blocks,
    })
}

/// The image with its pixel positions randomly permuted (all channels move
/// together), as an unrelated-content baseline with the same colour
/// statistics.
pub fn shuffle_pixels(img: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.shuffle(rng);
    ImageTensor::from_fn(h, w, |c, y, x| img.plane(c)[perm[y * w + x]])
}

/// Removes the component of `x` along `along`.
pub fn orthogonalize(x: &Tensor<f32>, along: &Tensor<f32>) -> Result<Tensor<f32>> {
    x.expect_same_shape(along)?;
    let dot: f64 = x.data().iter().zip(along.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
    let nn: f64 = along.data().iter().map(|b| (*b as f64).powi(2)).sum();
    if nn == 0.0 {
        return Ok(x.clone());
    }
    let k = dot / nn;
    x.zip_map(along, |a, b| (a as f64 - k * b as f64) as f32)
}

/// One row of a guidance-threshold sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub xi: f64,
    pub psnr: f64,
    pub sharpness: f64,
}

/// Restores every degraded image at each threshold in `xis` and averages
/// PSNR against the clean image and the sharpness proxy. Image `i` uses
/// seed `seed + i` at every threshold.
pub fn xi_sweep(
    pairs: &[(ImageTensor, ImageTensor)],
    xis: &[f64],
    restorer: &Restorer<'_>,
    cfg: &RestoreConfig,
    init: Option<&dyn InitProvider>,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if pairs.is_empty() {
        return Err(invalid!("xi sweep needs at least one image"));
    }
    let init = init.unwrap_or(&BicubicInit);
    xis.iter()
        .map(|&xi| {
            let mut c = cfg.clone();
            c.guidance.xi = xi;
            let (mut p, mut s) = (0.0, 0.0);
            for (i, (clean, degraded)) in pairs.iter().enumerate() {
                let out = restorer.restore(degraded, init, &c, seed.wrapping_add(i as u64))?;
                p += psnr(&out.image, clean)?;
                s += sharpness(&out.image);
            }
            let n = pairs.len() as f64;
            Ok(SweepRow {
                xi,
                psnr: p / n,
                sharpness: s / n,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("xi,psnr,sharpness\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", r.xi, format_db(r.psnr), r.sharpness);
    }
    out
}

/// Number of adapter entries (`W'_K`, `W'_V`, `W'_O` over every
/// self-attention layer) for a denoiser configuration.
pub fn count_adapter_params(cfg: &DenoiserConfig) -> Result<usize> {
    Ok(layout(cfg)?.adapter_param_count())
}
