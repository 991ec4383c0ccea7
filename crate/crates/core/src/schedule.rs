//! Noise schedule, closed-form forward process and the deterministic DDIM
//! reverse step.
//!
//! Schedule arithmetic runs in `f64`. The latent operations are generic over
//! the element type: pipeline latents are `f32` and are widened element by
//! element, while `f64` tensors keep full precision end to end.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest cumulative product that `estimate_x0` will divide by.
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// `beta` interpolated linearly.
    Linear,
    /// `sqrt(beta)` interpolated linearly, then squared.
    ScaledLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            kind: BetaSchedule::ScaledLinear,
        }
    }
}

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{i<=t} alpha_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::from_config(&ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: BetaSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("a schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid!(
                "betas must satisfy 0 < start <= end < 1, got {} and {}",
                beta_start,
                beta_end
            ));
        }
        let frac = |i: usize| {
            if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..steps)
            .map(|i| match kind {
                BetaSchedule::Linear => beta_start + (beta_end - beta_start) * frac(i),
                BetaSchedule::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let s = a + (b - a) * frac(i);
                    s * s
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.kind)
    }

    /// Builds a schedule from explicit `beta_t` values in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid!("a schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid!("beta {} outside (0, 1)", b));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Builds a schedule from cumulative products directly. Values must lie in
    /// `(0, 1]` and be non-increasing; `alpha_bar_0 = 1` is allowed here so
    /// that limit cases can be exercised.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(invalid!("a schedule needs at least one step"));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &ab in &alpha_bars {
            if !(ab > 0.0 && ab <= prev) {
                return Err(invalid!("alpha_bar values must be non-increasing in (0, 1]"));
            }
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_diffuse<F: Real>(
        &self,
        x0: &Tensor<F>,
        t: usize,
        eps: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| F::of(a * x.to_f64c() + b * e.to_f64c()))
    }

    /// `(x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
    pub fn estimate_x0<F: Real>(
        &self,
        x_t: &Tensor<F>,
        eps_pred: &Tensor<F>,
        t: usize,
    ) -> Result<Tensor<F>> {
        let ab = self.alpha_bar(t)?;
        if ab < ALPHA_BAR_FLOOR {
            return Err(Error::SingularSchedule { t, alpha_bar: ab });
        }
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(eps_pred, |x, e| F::of((x.to_f64c() - n * e.to_f64c()) / s))
    }

    /// One DDIM step from `t` to `t - 1`.
    pub fn ddim_step<F: Real>(
        &self,
        x_t: &Tensor<F>,
        eps_pred: &Tensor<F>,
        t: usize,
    ) -> Result<Tensor<F>> {
        if t == 0 {
            return Err(invalid!("ddim_step needs t >= 1; finish t = 0 with estimate_x0"));
        }
        self.ddim_step_to(x_t, eps_pred, t, Some(t - 1))
    }

    /// One DDIM step from `t` to `t_prev`; `None` stands for the clean end
    /// point with `alpha_bar = 1`, which returns `x_{t->0}` itself.
    pub fn ddim_step_to<F: Real>(
        &self,
        x_t: &Tensor<F>,
        eps_pred: &Tensor<F>,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Tensor<F>> {
        let x0 = self.estimate_x0(x_t, eps_pred, t)?;
        self.recombine(&x0, eps_pred, t_prev)
    }

    /// `sqrt(alpha_bar_prev) x0 + sqrt(1 - alpha_bar_prev) eps`, the second
    /// half of a DDIM step once `x_{t->0}` is known (and possibly edited).
    pub fn recombine<F: Real>(
        &self,
        x0: &Tensor<F>,
        eps_pred: &Tensor<F>,
        t_prev: Option<usize>,
    ) -> Result<Tensor<F>> {
        let ab_prev = match t_prev {
            Some(p) => self.alpha_bar(p)?,
            None => 1.0,
        };
        if ab_prev == 1.0 {
            x0.expect_same_shape(eps_pred)?;
            return Ok(x0.clone());
        }
        let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x0.zip_map(eps_pred, |x, e| F::of(a * x.to_f64c() + b * e.to_f64c()))
    }

    /// Descending timesteps of an `n`-step strided sub-schedule. The stride
    /// is `T / n` and the grid is shifted by one so that the last step lands
    /// on `t = 1`; for the default `T = 1000, n = 20` this is
    /// `951, 901, ..., 51, 1`.
    pub fn inference_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(invalid!("cannot take {} inference steps from {}", n, total));
        }
        let stride = total / n;
        let offset = 1.min(total - 1 - (n - 1) * stride);
        Ok((0..n).rev().map(|i| i * stride + offset).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LatentTensor;
    use crate::rng::{gaussian, rng_at};
    use proptest::prelude::*;

    fn t(shape: &[usize], v: Vec<f32>) -> LatentTensor {
        LatentTensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn constant_beta_products() {
        let s = DiffusionSchedule::new(3, 0.1, 0.1, BetaSchedule::Linear).unwrap();
        let expect = [0.9, 0.81, 0.729];
        for (a, e) in s.alpha_bars().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        let one = DiffusionSchedule::new(1, 0.3, 0.3, BetaSchedule::ScaledLinear).unwrap();
        assert!((one.alpha_bars()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(DiffusionSchedule::new(0, 0.1, 0.2, BetaSchedule::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.0, 0.2, BetaSchedule::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.3, 0.2, BetaSchedule::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.1, 1.0, BetaSchedule::Linear).is_err());
    }

    #[test]
    fn default_schedule_invariants() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.betas().len(), 1000);
        assert_eq!(s.alphas().len(), 1000);
        let mut prod = 1.0;
        for i in 0..1000 {
            let b = s.betas()[i];
            assert!(b > 0.0 && b < 1.0);
            prod *= s.alphas()[i];
            assert!((s.alpha_bars()[i] - prod).abs() <= 1e-12 * prod);
            if i > 0 {
                assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
            }
        }
        // endpoints of the sqrt-interpolated grid
        assert!((s.betas()[0] - 8.5e-4).abs() < 1e-15);
        assert!((s.betas()[999] - 1.2e-2).abs() < 1e-15);
    }

    #[test]
    fn forward_limits_and_hand_value() {
        let s = DiffusionSchedule::from_alpha_bars(vec![1.0, 0.81, 1e-300]).unwrap();
        let x0 = t(&[1, 2, 2], vec![1.0; 4]);
        let eps = t(&[1, 2, 2], vec![0.25, -0.5, 0.75, 2.0]);
        assert_eq!(s.forward_diffuse(&x0, 0, &eps).unwrap(), x0);
        assert_eq!(s.forward_diffuse(&x0, 2, &eps).unwrap(), eps);
        let zeros = t(&[1, 2, 2], vec![0.0; 4]);
        let y = s.forward_diffuse(&x0, 1, &zeros).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.9).abs() < 1e-7));
        assert!(matches!(
            s.forward_diffuse(&x0, 3, &eps),
            Err(Error::TimestepOutOfRange { t: 3, steps: 3 })
        ));
        assert!(s.forward_diffuse(&x0, 0, &t(&[4], vec![0.0; 4])).is_err());
    }

    #[test]
    fn estimate_x0_scalar_oracle() {
        let s = DiffusionSchedule::default();
        let mut rng = rng_at(1, &[]);
        let x = gaussian(&mut rng, [1, 4, 4]);
        let e = gaussian(&mut rng, [1, 4, 4]);
        let tt = 417;
        let got = s.estimate_x0(&x, &e, tt).unwrap();
        // scalar recomputation straight from the betas
        let ab: f64 = (0..=tt).map(|i| 1.0 - s.betas()[i]).product();
        for i in 0..16 {
            let want = (x.data()[i] as f64 - (1.0 - ab).sqrt() * e.data()[i] as f64) / ab.sqrt();
            assert!((got.data()[i] as f64 - want).abs() <= 1e-6 * (1.0 + want.abs()));
        }
        let id = DiffusionSchedule::from_alpha_bars(vec![1.0]).unwrap();
        assert_eq!(id.estimate_x0(&x, &e, 0).unwrap(), x);
    }

    #[test]
    fn estimate_x0_rejects_floor() {
        let s = DiffusionSchedule::from_alpha_bars(vec![0.5, 1e-9]).unwrap();
        let x = t(&[1], vec![1.0]);
        assert!(matches!(
            s.estimate_x0(&x, &x, 1),
            Err(Error::SingularSchedule { t: 1, .. })
        ));
    }

    #[test]
    fn ddim_step_special_cases() {
        let s = DiffusionSchedule::from_alpha_bars(vec![1.0, 0.64, 0.36]).unwrap();
        let x = t(&[1, 1, 3], vec![0.3, -1.0, 2.0]);
        let e = t(&[1, 1, 3], vec![0.5, 0.1, -0.2]);
        // alpha_bar_{t-1} = 1 gives x_{t->0}
        assert_eq!(
            s.ddim_step(&x, &e, 1).unwrap(),
            s.estimate_x0(&x, &e, 1).unwrap()
        );
        let zeros = t(&[1, 1, 3], vec![0.0; 3]);
        let y = s.ddim_step(&x, &zeros, 2).unwrap();
        let k = (0.64f64 / 0.36).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a as f64 - k * *b as f64).abs() < 1e-6);
        }
        assert!(s.ddim_step(&x, &e, 0).is_err());
        assert_eq!(s.ddim_step(&x, &e, 2).unwrap(), s.ddim_step(&x, &e, 2).unwrap());
    }

    #[test]
    fn ddim_with_exact_noise_recovers_x0() {
        let s = DiffusionSchedule::default();
        let mut rng = rng_at(2, &[]);
        let x0 = gaussian(&mut rng, [4, 8, 8]);
        let eps = gaussian(&mut rng, [4, 8, 8]);
        let steps = s.inference_timesteps(20).unwrap();
        let mut x = s.forward_diffuse(&x0, steps[0], &eps).unwrap();
        for (i, &tt) in steps.iter().enumerate() {
            let ab = s.alpha_bar(tt).unwrap();
            let oracle = x
                .zip_map(&x0, |xt, x0| {
                    ((xt as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32
                })
                .unwrap();
            x = s.ddim_step_to(&x, &oracle, tt, steps.get(i + 1).copied()).unwrap();
        }
        assert!(x.max_abs_diff(&x0).unwrap() < 1e-4);
    }

    #[test]
    fn twenty_step_grid() {
        let s = DiffusionSchedule::default();
        let ts = s.inference_timesteps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 951);
        assert_eq!(ts[19], 1);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 50));
        let small = DiffusionSchedule::new(4, 0.1, 0.2, BetaSchedule::Linear).unwrap();
        assert_eq!(small.inference_timesteps(4).unwrap(), vec![3, 2, 1, 0]);
        assert!(s.inference_timesteps(0).is_err());
    }

    #[test]
    fn forward_variance_matches_schedule() {
        let s = DiffusionSchedule::default();
        let zero = LatentTensor::zeros([1, 200, 200]);
        for tt in [10, 300, 999] {
            let eps = gaussian(&mut rng_at(5, &[tt as u64]), [1, 200, 200]);
            let y = s.forward_diffuse(&zero, tt, &eps).unwrap();
            let var = y.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / y.len() as f64;
            let want = 1.0 - s.alpha_bar(tt).unwrap();
            assert!((var - want).abs() < 0.03 * want, "t={tt}: {var} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_through_forward(tt in 0usize..1000, seed in any::<u64>()) {
            let s = DiffusionSchedule::default();
            let mut rng = rng_at(seed, &[]);
            let x0 = gaussian(&mut rng, [2, 3, 3]);
            let eps = gaussian(&mut rng, [2, 3, 3]);
            let xt = s.forward_diffuse(&x0, tt, &eps).unwrap();
            let back = s.estimate_x0(&xt, &eps, tt).unwrap();
            // f32 storage of x_t bounds the achievable precision; the gain
            // 1/sqrt(alpha_bar) grows to ~15 at t = 999
            let ab = s.alpha_bar(tt).unwrap();
            let tol = 4.0 * f32::EPSILON as f64 * (1.0 + 4.0 / ab.sqrt());
            for (a, b) in back.data().iter().zip(x0.data()) {
                prop_assert!(((a - b) as f64).abs() <= tol * (1.0 + (*b as f64).abs()));
            }
        }

        #[test]
        fn round_trip_in_f64_is_tight(tt in 0usize..1000, seed in any::<u64>()) {
            let s = DiffusionSchedule::default();
            let mut rng = rng_at(seed, &[]);
            let x0: Tensor<f64> = gaussian(&mut rng, [2, 3, 3]).cast();
            let eps: Tensor<f64> = gaussian(&mut rng, [2, 3, 3]).cast();
            let xt = s.forward_diffuse(&x0, tt, &eps).unwrap();
            let back = s.estimate_x0(&xt, &eps, tt).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-3));
            }
        }

        #[test]
        fn alpha_bars_strictly_decrease(
            n in 1usize..200,
            start in 1e-5f64..0.1,
            extra in 0.0f64..0.5,
            scaled in any::<bool>(),
        ) {
            let kind = if scaled { BetaSchedule::ScaledLinear } else { BetaSchedule::Linear };
            let s = DiffusionSchedule::new(n, start, start + extra, kind).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a <= 1.0));
        }
    }
}
