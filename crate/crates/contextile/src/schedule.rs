//! Noise schedules and the masked forward process.
//!
//! The forward step noises only the target region:
//! `x_t = (sqrt(abar_t) x0 + sqrt(1-abar_t) eps) * m + x0 * (1 - m)`,
//! so context pixels pass through bit-exactly. Schedule tables are kept in
//! f64; canvas arithmetic happens in f32 with f64 coefficients.

use ndarray::Zip;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BinaryMask, Canvas};

/// Parameters that define a schedule; lives in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        // Standard linear DDPM range.
        ScheduleParams {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    /// Short-T mode for fast desk tests.
    pub fn short() -> Self {
        ScheduleParams {
            steps: 100,
            ..Default::default()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Immutable beta/alpha/alpha-bar tables, 1-indexed by timestep `t = 1..=T`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::IndexOutOfRange(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0)` is defined as exactly 1
    /// so sampler boundary formulas hold.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Linear beta schedule inclusive of both endpoints.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least 1 step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        params: ScheduleParams {
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

/// Masked forward process: returns `x_t` with noise applied only where the
/// mask is 1; everywhere else the output equals `x0` bit-exactly.
pub fn masked_noise(
    x0: &Canvas,
    mask: &BinaryMask,
    t: usize,
    eps: &Canvas,
    sched: &NoiseSchedule,
) -> Result<Canvas> {
    sched.check_t(t)?;
    if x0.pixels.dim() != eps.pixels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} vs eps {:?}",
            x0.pixels.dim(),
            eps.pixels.dim()
        )));
    }
    let (h, w, _) = x0.dims();
    if mask.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs canvas {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let abar = sched.alpha_bar(t);
    let signal = abar.sqrt() as f32;
    let noise = (1.0 - abar).sqrt() as f32;
    let mut out = x0.clone();
    let mask_full = mask
        .values
        .broadcast(x0.pixels.raw_dim())
        .expect("mask broadcasts over channels");
    Zip::from(&mut out.pixels)
        .and(&x0.pixels)
        .and(&eps.pixels)
        .and(&mask_full)
        .for_each(|o, &x, &e, &m| {
            if m == 1.0 {
                *o = signal * x + noise * e;
            }
        });
    Ok(out)
}

/// Uniform training timestep in `[1, T]`, deterministic given the rng state.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.gen_range(1..=steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{preset_layout, target_mask, LayoutSpec, Role, Task};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn canvas_from(pixels: Array3<f32>, layout: &LayoutSpec) -> Canvas {
        Canvas {
            pixels,
            layout: layout.clone(),
        }
    }

    #[test]
    fn linear_schedule_matches_cumprod_oracle() {
        // Frozen from a 50-digit mpmath cumulative product over
        // beta_t = 1e-4 + (0.02 - 1e-4) * (t-1)/999.
        let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let expected = 4.0358297653756833e-5;
        let got = sched.alpha_bar(1000);
        assert!(
            ((got - expected) / expected).abs() < 1e-12,
            "alpha_bar(1000) = {got}"
        );
        // Short-T mode, same oracle.
        let short = ScheduleParams::short().build().unwrap();
        let expected100 = 0.36356324805549192;
        assert!(((short.alpha_bar(100) - expected100) / expected100).abs() < 1e-12);
        assert!((sched.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let sched = linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(sched.alpha_bar(1), 0.5);
    }

    #[test]
    fn rejects_invalid_beta_range() {
        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.03, 0.02).is_err());
        assert!(linear_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn schedule_tables_are_consistent() {
        let sched = linear_schedule(500, 1e-4, 0.02).unwrap();
        let mut prev_abar = 1.0;
        for t in 1..=500 {
            assert!(sched.beta(t) > 0.0 && sched.beta(t) < 1.0);
            if t > 1 {
                assert!(sched.beta(t) >= sched.beta(t - 1));
                assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
            }
            let recomputed = prev_abar * sched.alpha(t);
            let rel = ((sched.alpha_bar(t) - recomputed) / recomputed).abs();
            assert!(rel < 1e-12, "t={t} rel={rel}");
            prev_abar = sched.alpha_bar(t);
        }
        assert!(sched.alpha_bar(500) > 0.0 && sched.alpha_bar(500) < sched.alpha_bar(1));
    }

    #[test]
    fn masked_noise_closed_form_pixel() {
        // abar = 0.64 gives sqrt coefficients 0.8 / 0.6 exactly.
        let sched = linear_schedule(1, 0.36, 0.36).unwrap();
        let spec = LayoutSpec::new("m", 1, 2, 2, 2, vec![Role::Context, Role::Target]).unwrap();
        let x0 = canvas_from(Array3::from_elem((2, 4, 1), 1.0), &spec);
        let eps = canvas_from(Array3::from_elem((2, 4, 1), 0.5), &spec);
        let mask = target_mask(&spec);
        let xt = masked_noise(&x0, &mask, 1, &eps, &sched).unwrap();
        // Masked pixel: 0.8 * 1.0 + 0.6 * 0.5 = 1.1; context pixel: 1.0.
        assert!((xt.pixels[[0, 3, 0]] - 1.1).abs() < 1e-6);
        assert_eq!(xt.pixels[[0, 0, 0]], 1.0);
    }

    #[test]
    fn masked_noise_rejects_bad_inputs() {
        let sched = linear_schedule(10, 1e-4, 0.02).unwrap();
        let spec = preset_layout(Task::Control, 4, 4);
        let x0 = canvas_from(Array3::zeros((8, 8, 3)), &spec);
        let eps_bad = canvas_from(Array3::zeros((8, 4, 3)), &spec);
        let mask = target_mask(&spec);
        assert!(masked_noise(&x0, &mask, 1, &eps_bad, &sched).is_err());
        let eps = canvas_from(Array3::zeros((8, 8, 3)), &spec);
        assert!(masked_noise(&x0, &mask, 0, &eps, &sched).is_err());
        assert!(masked_noise(&x0, &mask, 11, &eps, &sched).is_err());
        let wrong_mask = BinaryMask::zeros(4, 4);
        assert!(masked_noise(&x0, &wrong_mask, 1, &eps, &sched).is_err());
    }

    #[test]
    fn timestep_sampling_is_uniform_and_deterministic() {
        // Degenerate range.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_timestep(&mut rng, 1), 1);
        }
        // Determinism across fresh generators.
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let draws_a: Vec<usize> = (0..32).map(|_| sample_timestep(&mut a, 1000)).collect();
        let draws_b: Vec<usize> = (0..32).map(|_| sample_timestep(&mut b, 1000)).collect();
        assert_eq!(draws_a, draws_b);

        // Chi-square style bound: each of 10 bins within 5 sigma of 10^4
        // over 10^5 draws, sigma = sqrt(n p (1-p)) ~ 94.87.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bins = [0u32; 10];
        for _ in 0..100_000 {
            bins[sample_timestep(&mut rng, 10) - 1] += 1;
        }
        let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
        for (i, count) in bins.iter().enumerate() {
            let dev = (*count as f64 - 10_000.0).abs();
            assert!(dev < 5.0 * sigma, "bin {i}: count {count}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Context pixels pass through bit-exactly for any mask and t, and
        /// the masked region follows the closed form.
        #[test]
        fn context_stays_clean(seed in 0u64..500, t_frac in 0.0f64..1.0) {
            let sched = linear_schedule(50, 1e-4, 0.05).unwrap();
            let t = 1 + (t_frac * 49.0) as usize;
            let spec = preset_layout(Task::Tryon, 4, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = (4, 12, 3);
            let x0 = canvas_from(
                Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0f32..1.0)),
                &spec,
            );
            let eps = canvas_from(
                Array3::from_shape_simple_fn(shape, || rng.gen_range(-2.0f32..2.0)),
                &spec,
            );
            let mask = target_mask(&spec);
            let xt = masked_noise(&x0, &mask, t, &eps, &sched).unwrap();
            let signal = sched.alpha_bar(t).sqrt() as f32;
            let noise = (1.0 - sched.alpha_bar(t)).sqrt() as f32;
            for y in 0..4 {
                for x in 0..12 {
                    for c in 0..3 {
                        let got = xt.pixels[[y, x, c]];
                        if mask.at(y, x) == 1.0 {
                            let want = signal * x0.pixels[[y, x, c]] + noise * eps.pixels[[y, x, c]];
                            prop_assert!((got - want).abs() < 1e-6);
                        } else {
                            // Bit-exact pass-through.
                            prop_assert_eq!(got.to_bits(), x0.pixels[[y, x, c]].to_bits());
                        }
                    }
                }
            }
        }

        /// m = 0 everywhere returns x0 exactly; m = 1 everywhere is the
        /// plain forward process.
        #[test]
        fn degenerate_masks(seed in 0u64..500) {
            let sched = linear_schedule(20, 1e-3, 0.02).unwrap();
            let spec = preset_layout(Task::Control, 4, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = (8, 8, 3);
            let x0 = canvas_from(
                Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0f32..1.0)),
                &spec,
            );
            let eps = canvas_from(
                Array3::from_shape_simple_fn(shape, || rng.gen_range(-2.0f32..2.0)),
                &spec,
            );
            let zeros = BinaryMask::zeros(8, 8);
            let xt = masked_noise(&x0, &zeros, 7, &eps, &sched).unwrap();
            prop_assert_eq!(&xt.pixels, &x0.pixels);

            let ones = BinaryMask {
                values: Array3::from_elem((8, 8, 1), 1.0),
            };
            let xt = masked_noise(&x0, &ones, 7, &eps, &sched).unwrap();
            let signal = sched.alpha_bar(7).sqrt() as f32;
            let noise = (1.0 - sched.alpha_bar(7)).sqrt() as f32;
            for ((o, x), e) in xt.pixels.iter().zip(x0.pixels.iter()).zip(eps.pixels.iter()) {
                prop_assert!((o - (signal * x + noise * e)).abs() < 1e-6);
            }
        }

        /// Affine in x0 and eps for fixed t and mask, and noise level grows
        /// with t for fixed eps.
        #[test]
        fn linearity_and_monotonicity(seed in 0u64..200) {
            let sched = linear_schedule(30, 1e-3, 0.05).unwrap();
            let spec = preset_layout(Task::Control, 4, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = (8, 8, 3);
            let mk = |rng: &mut ChaCha8Rng| {
                canvas_from(
                    Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0f32..1.0)),
                    &spec,
                )
            };
            let (a, b, e1, e2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let mask = target_mask(&spec);

            // masked_noise(a + b, e1 + e2) == masked_noise(a, e1) + masked_noise(b, e2)
            let mut ab = a.clone();
            ab.pixels = &a.pixels + &b.pixels;
            let mut e12 = e1.clone();
            e12.pixels = &e1.pixels + &e2.pixels;
            let lhs = masked_noise(&ab, &mask, 9, &e12, &sched).unwrap();
            let r1 = masked_noise(&a, &mask, 9, &e1, &sched).unwrap();
            let r2 = masked_noise(&b, &mask, 9, &e2, &sched).unwrap();
            for ((l, x), y) in lhs.pixels.iter().zip(r1.pixels.iter()).zip(r2.pixels.iter()) {
                prop_assert!((l - (x + y)).abs() < 1e-5);
            }

            // || (x_t - x0) * m || nondecreasing in t for fixed eps.
            let mut prev = -1.0f64;
            for t in [1usize, 8, 16, 24, 30] {
                let xt = masked_noise(&a, &mask, t, &e1, &sched).unwrap();
                let dist: f64 = xt
                    .pixels
                    .iter()
                    .zip(a.pixels.iter())
                    .zip(
                        mask.values
                            .broadcast(shape)
                            .unwrap()
                            .iter(),
                    )
                    .map(|((o, x), m)| ((o - x) * m) as f64)
                    .map(|d| d * d)
                    .sum();
                prop_assert!(dist >= prev - 1e-9, "t={t}: {dist} < {prev}");
                prev = dist;
            }
        }
    }
}
