//! Synthetic degradations: Gaussian blur, downsampling, white noise and
//! JPEG compression, applied as an ordered cascade.
//!
//! Specs have a one-line text form, e.g.
//! `blur:2.0|down:4:bicubic|noise:20|jpeg:50`. The empty cascade is written
//! `none`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, resize, ImageTensor, Kernel};

pub mod jpeg;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DegradeOp {
    Blur { sigma: f64 },
    Down { factor: usize, kernel: Kernel },
    /// Standard deviation on the 8-bit scale.
    Noise { sigma: f64 },
    Jpeg { quality: u8 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub ops: Vec<DegradeOp>,
    /// Seeds the noise generator.
    pub seed: u64,
}

impl DegradeOp {
    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            DegradeOp::Blur { sigma } | DegradeOp::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(format!("sigma must be finite and non-negative, got {sigma}"))
            }
            DegradeOp::Down { factor: 0, .. } => Err("downsampling factor must be at least 1".into()),
            DegradeOp::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(format!("JPEG quality must be in 1..=100, got {quality}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DegradeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegradeOp::Blur { sigma } => write!(f, "blur:{sigma:?}"),
            DegradeOp::Down { factor, kernel } => write!(f, "down:{factor}:{}", kernel.name()),
            DegradeOp::Noise { sigma } => write!(f, "noise:{sigma}"),
            DegradeOp::Jpeg { quality } => write!(f, "jpeg:{quality}"),
        }
    }
}

impl DegradationSpec {
    pub fn identity() -> Self {
        DegradationSpec {
            ops: Vec::new(),
            seed: 0,
        }
    }

    /// Blur 2, bicubic x4 downsampling, noise 20, JPEG quality 50.
    pub fn benchmark(seed: u64) -> Self {
        DegradationSpec {
            ops: vec![
                DegradeOp::Blur { sigma: 2.0 },
                DegradeOp::Down {
                    factor: 4,
                    kernel: Kernel::Bicubic,
                },
                DegradeOp::Noise { sigma: 20.0 },
                DegradeOp::Jpeg { quality: 50 },
            ],
            seed,
        }
    }

    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let bad = |reason: String| Error::InvalidSpec {
            spec: text.to_string(),
            reason,
        };
        let trimmed = text.trim();
        let mut ops = Vec::new();
        if !(trimmed.is_empty() || trimmed == "none") {
            for part in trimmed.split('|') {
                let fields: Vec<&str> = part.trim().split(':').collect();
                let num = |s: &str| -> std::result::Result<f64, String> {
                    f64::from_str(s).map_err(|_| format!("`{s}` is not a number"))
                };
                let op = match fields[..] {
                    ["blur", s] => DegradeOp::Blur { sigma: num(s).map_err(bad)? },
                    ["down", f] | ["down", f, _] => DegradeOp::Down {
                        factor: f
                            .parse()
                            .map_err(|_| bad(format!("`{f}` is not a whole factor")))?,
                        kernel: match fields.get(2) {
                            None => Kernel::Bicubic,
                            Some(k) => Kernel::parse(k).ok_or_else(|| bad(format!("unknown kernel `{k}`")))?,
                        },
                    },
                    ["noise", s] => DegradeOp::Noise { sigma: num(s).map_err(bad)? },
                    ["jpeg", q] => DegradeOp::Jpeg {
                        quality: q
                            .parse()
                            .map_err(|_| bad(format!("`{q}` is not a quality in 1..=100")))?,
                    },
                    _ => return Err(bad(format!("cannot read `{part}`"))),
                };
                op.validate().map_err(bad)?;
                ops.push(op);
            }
        }
        Ok(DegradationSpec { ops, seed })
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            op.validate().map_err(|reason| Error::InvalidSpec {
                spec: self.to_string(),
                reason,
            })?;
        }
        Ok(())
    }

    /// Product of all downsampling factors.
    pub fn total_factor(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                DegradeOp::Down { factor, .. } => *factor,
                _ => 1,
            })
            .product()
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ops.is_empty() {
            return write!(f, "none");
        }
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                write!(f, "|")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

/// Runs the cascade in order. Noise is drawn from a generator seeded by
/// `spec.seed`; the result is clamped to `[0, 1]`.
pub fn apply_spec(img: &ImageTensor, spec: &DegradationSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let total = spec.total_factor();
    if !img.height().is_multiple_of(total) || !img.width().is_multiple_of(total) {
        return Err(Error::InvalidSpec {
            spec: spec.to_string(),
            reason: format!(
                "{}x{} image is not divisible by the total downsampling factor {}",
                img.height(),
                img.width(),
                total
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cur = img.clone();
    for op in &spec.ops {
        cur = match *op {
            DegradeOp::Blur { sigma } => ImageTensor::clamped(gaussian_blur(cur.tensor(), sigma)?)?,
            DegradeOp::Down { factor: 1, .. } => cur,
            DegradeOp::Down { factor, kernel } => {
                let small = resize(&cur, cur.height() / factor, cur.width() / factor, kernel)?;
                small.map(|v| v.clamp(0.0, 1.0))
            }
            DegradeOp::Noise { sigma } if sigma == 0.0 => cur,
            DegradeOp::Noise { sigma } => add_noise(&cur, sigma / 255.0, &mut rng)?,
            DegradeOp::Jpeg { quality } => jpeg::round_trip(&cur, quality)?,
        };
    }
    Ok(cur)
}

/// Additive white Gaussian noise (standard deviation on the `[0, 1]` scale)
/// followed by clamping.
pub fn add_noise(img: &ImageTensor, sigma: f64, rng: &mut impl Rng) -> Result<ImageTensor> {
    let noisy = img.tensor().map(|v| {
        let n: f64 = StandardNormal.sample(rng);
        (v as f64 + sigma * n) as f32
    });
    ImageTensor::clamped(noisy)
}

/// Ranges of the randomized cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSpecConfig {
    pub blur_sigma: (f64, f64),
    pub factors: Vec<usize>,
    pub kernels: Vec<Kernel>,
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
    pub op_probability: f64,
}

impl Default for RandomSpecConfig {
    fn default() -> Self {
        RandomSpecConfig {
            blur_sigma: (0.2, 3.0),
            factors: vec![1, 2, 4],
            kernels: vec![Kernel::Bicubic, Kernel::Bilinear, Kernel::Area],
            noise_sigma: (0.0, 50.0),
            jpeg_quality: (30, 95),
            op_probability: 0.8,
        }
    }
}

/// Draws a blur -> down -> noise -> JPEG cascade, each op kept with the
/// configured probability.
pub fn sample_spec(rng: &mut impl Rng) -> DegradationSpec {
    sample_spec_with(rng, &RandomSpecConfig::default())
}

pub fn sample_spec_with(rng: &mut impl Rng, cfg: &RandomSpecConfig) -> DegradationSpec {
    let mut ops = Vec::new();
    let p = cfg.op_probability;
    if rng.random_bool(p) {
        ops.push(DegradeOp::Blur {
            sigma: rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1),
        });
    }
    if rng.random_bool(p) {
        ops.push(DegradeOp::Down {
            factor: cfg.factors[rng.random_range(0..cfg.factors.len())],
            kernel: cfg.kernels[rng.random_range(0..cfg.kernels.len())],
        });
    }
    if rng.random_bool(p) {
        ops.push(DegradeOp::Noise {
            sigma: rng.random_range(cfg.noise_sigma.0..=cfg.noise_sigma.1),
        });
    }
    if rng.random_bool(p) {
        ops.push(DegradeOp::Jpeg {
            quality: rng.random_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1),
        });
    }
    DegradationSpec {
        ops,
        seed: rng.random(),
    }
}
