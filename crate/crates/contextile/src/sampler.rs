//! Masked reverse diffusion: noise only ever lives in the target region,
//! and the clean context is re-imposed by hard overwrite after every step,
//! so every intermediate satisfies `x_t * (1-m) == x0 * (1-m)` bit-exactly.
//!
//! Step arithmetic runs in f64 with the canvas rounded back to f32 at each
//! step boundary; noise draws fill the whole canvas in `(H, W, C)` order
//! regardless of the mask, which keeps chains comparable across masks and
//! reproducible for reference implementations.

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::layout::{BinaryMask, Canvas};
use crate::nn::Real;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return Err(Error::InvalidConfig(format!(
                "{} reverse steps for a schedule of {}",
                self.steps,
                sched.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.kind == SamplerKind::Ddpm && self.steps != sched.len() {
            return Err(Error::InvalidConfig(
                "ancestral sampling runs the full schedule; use ddim for strided ladders".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian noise in the target region, clean context everywhere else:
/// `x_T = eps * m + x0 * (1 - m)`.
pub fn init_masked_latent(
    x0_context: &Canvas,
    mask: &BinaryMask,
    rng: &mut ChaCha8Rng,
) -> Result<Canvas> {
    let (h, w, _) = x0_context.dims();
    if mask.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs canvas {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let mut out = x0_context.clone();
    let mask_full = mask
        .values
        .broadcast(out.pixels.raw_dim())
        .expect("mask broadcasts over channels");
    Zip::from(&mut out.pixels).and(&mask_full).for_each(|o, &m| {
        let draw = f32::standard_normal(rng);
        if m == 1.0 {
            *o = draw;
        }
    });
    Ok(out)
}

fn check_step_inputs(x_t: &Canvas, mask: &BinaryMask, x0: &Canvas) -> Result<()> {
    if x_t.dims() != x0.dims() {
        return Err(Error::ShapeMismatch(format!(
            "x_t {:?} vs x0 {:?}",
            x_t.dims(),
            x0.dims()
        )));
    }
    let (h, w, _) = x_t.dims();
    if mask.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs canvas {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    Ok(())
}

/// Hard overwrite of context pixels from the clean canvas.
fn reimpose_context(step_out: &mut Canvas, x0: &Canvas, mask: &BinaryMask) {
    let mask_full = mask
        .values
        .broadcast(step_out.pixels.raw_dim())
        .expect("mask broadcasts over channels");
    Zip::from(&mut step_out.pixels)
        .and(&x0.pixels)
        .and(&mask_full)
        .for_each(|o, &x, &m| {
            if m != 1.0 {
                *o = x;
            }
        });
}

/// One ancestral step: posterior mean from the predicted noise plus the
/// posterior noise scale, then masked re-imposition.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step(
    den: &Denoiser<f32>,
    x_t: &Canvas,
    t: usize,
    cond: &ConditionEmbedding,
    mask: &BinaryMask,
    x0_context: &Canvas,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Canvas> {
    if t == 0 || t > sched.len() {
        return Err(Error::IndexOutOfRange(format!(
            "timestep {t} outside 1..={}",
            sched.len()
        )));
    }
    check_step_inputs(x_t, mask, x0_context)?;
    let eps_hat = den.predict_noise(x_t, t, cond)?;

    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let abar = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t - 1);
    let eps_coef = beta / (1.0 - abar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt();

    let mut out = x_t.clone();
    if t > 1 {
        Zip::from(&mut out.pixels)
            .and(&x_t.pixels)
            .and(&eps_hat.pixels)
            .for_each(|o, &x, &e| {
                let z = f32::standard_normal(rng) as f64;
                let mu = (x as f64 - eps_coef * e as f64) * inv_sqrt_alpha;
                *o = (mu + sigma * z) as f32;
            });
    } else {
        // Final step adds no noise.
        Zip::from(&mut out.pixels)
            .and(&x_t.pixels)
            .and(&eps_hat.pixels)
            .for_each(|o, &x, &e| {
                *o = ((x as f64 - eps_coef * e as f64) * inv_sqrt_alpha) as f32;
            });
    }
    reimpose_context(&mut out, x0_context, mask);
    Ok(out)
}

/// One non-Markovian step from `t` down to `t_prev` (`t_prev = 0` lands on
/// the predicted clean canvas); `eta = 0` is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    den: &Denoiser<f32>,
    x_t: &Canvas,
    t: usize,
    t_prev: usize,
    cond: &ConditionEmbedding,
    mask: &BinaryMask,
    x0_context: &Canvas,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Canvas> {
    if t == 0 || t > sched.len() || t_prev >= t {
        return Err(Error::IndexOutOfRange(format!(
            "step pair ({t} -> {t_prev}) invalid for schedule of {}",
            sched.len()
        )));
    }
    check_step_inputs(x_t, mask, x0_context)?;
    let eps_hat = den.predict_noise(x_t, t, cond)?;

    let abar = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t_prev);
    let sigma = eta
        * ((1.0 - abar_prev) / (1.0 - abar)).sqrt()
        * (1.0 - abar / abar_prev).sqrt();
    let x0_coef = abar_prev.sqrt();
    let dir_coef = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();
    let inv_sqrt_abar = 1.0 / abar.sqrt();
    let noise_level = (1.0 - abar).sqrt();

    let mut out = x_t.clone();
    if sigma > 0.0 {
        Zip::from(&mut out.pixels)
            .and(&x_t.pixels)
            .and(&eps_hat.pixels)
            .for_each(|o, &x, &e| {
                let z = f32::standard_normal(rng) as f64;
                let x0_hat = (x as f64 - noise_level * e as f64) * inv_sqrt_abar;
                *o = (x0_coef * x0_hat + dir_coef * e as f64 + sigma * z) as f32;
            });
    } else {
        Zip::from(&mut out.pixels)
            .and(&x_t.pixels)
            .and(&eps_hat.pixels)
            .for_each(|o, &x, &e| {
                let x0_hat = (x as f64 - noise_level * e as f64) * inv_sqrt_abar;
                *o = (x0_coef * x0_hat + dir_coef * e as f64) as f32;
            });
    }
    reimpose_context(&mut out, x0_context, mask);
    Ok(out)
}

/// Evenly spaced descending timesteps; includes `T` and, for two or more
/// steps, 1.
pub fn timestep_ladder(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(total).max(1);
    if steps == 1 {
        return vec![total];
    }
    let mut ladder = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = total as f64 - i as f64 * (total as f64 - 1.0) / (steps as f64 - 1.0);
        let t = t.round() as usize;
        if ladder.last() != Some(&t) {
            ladder.push(t);
        }
    }
    debug_assert_eq!(ladder.first(), Some(&total));
    debug_assert_eq!(ladder.last(), Some(&1));
    ladder
}

/// Full masked reverse chain: initialize with noise only in the target
/// region, denoise down the ladder, clamp the returned canvas to [-1, 1].
pub fn sample(
    den: &Denoiser<f32>,
    x0_context: &Canvas,
    mask: &BinaryMask,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
) -> Result<Canvas> {
    sample_traced(den, x0_context, mask, cond, sched, scfg, &mut |_, _| Ok(()))
}

/// [`sample`] with a per-step observer: called with the timestep the chain
/// just left and the intermediate canvas (before the final clamp).
#[allow(clippy::too_many_arguments)]
pub fn sample_traced(
    den: &Denoiser<f32>,
    x0_context: &Canvas,
    mask: &BinaryMask,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    observe: &mut dyn FnMut(usize, &Canvas) -> Result<()>,
) -> Result<Canvas> {
    scfg.validate(sched)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
    let mut x = init_masked_latent(x0_context, mask, &mut rng)?;
    observe(sched.len(), &x)?;

    match scfg.kind {
        SamplerKind::Ddpm => {
            for t in (1..=sched.len()).rev() {
                x = ddpm_step(den, &x, t, cond, mask, x0_context, sched, &mut rng)?;
                check_finite(&x, t)?;
                observe(t, &x)?;
            }
        }
        SamplerKind::Ddim => {
            let ladder = timestep_ladder(sched.len(), scfg.steps);
            for (i, &t) in ladder.iter().enumerate() {
                let t_prev = ladder.get(i + 1).copied().unwrap_or(0);
                x = ddim_step(
                    den, &x, t, t_prev, cond, mask, x0_context, sched, scfg.eta, &mut rng,
                )?;
                check_finite(&x, t)?;
                observe(t, &x)?;
            }
        }
    }
    x.pixels.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(x)
}

fn check_finite(x: &Canvas, t: usize) -> Result<()> {
    if x.pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sampler state after step t={t}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, DenoiserConfig};
    use crate::layout::{compose, preset_layout, target_mask, Task};
    use crate::nn::{fill_normal, ParamId};
    use crate::schedule::linear_schedule;
    use ndarray::Array3;

    fn context_canvas(panel: usize, channels: usize) -> (Canvas, BinaryMask) {
        let spec = preset_layout(Task::Colorize, panel, panel);
        let p = Array3::from_shape_fn((panel, panel, channels), |(y, x, c)| {
            ((y * 7 + x * 3 + c) as f32 * 0.21).sin()
        });
        let canvas = compose(&[p.clone(), p.clone(), p.clone(), p], &spec).unwrap();
        let mask = target_mask(&spec);
        (canvas, mask)
    }

    fn random_denoiser(seed: u64) -> Denoiser<f32> {
        let mut cfg = DenoiserConfig::tiny(6);
        cfg.in_channels = 3;
        let mut den = init_denoiser::<f32>(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let ids: Vec<ParamId> = den.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            fill_normal(den.store_mut().get_mut(id), 0.1, &mut rng);
        }
        den
    }

    #[test]
    fn init_latent_respects_mask() {
        let (x0, mask) = context_canvas(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = init_masked_latent(&x0, &mask, &mut rng).unwrap();
        let (h, w, c) = x0.dims();
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    if mask.at(y, xx) == 0.0 {
                        assert_eq!(
                            x.pixels[[y, xx, ch]].to_bits(),
                            x0.pixels[[y, xx, ch]].to_bits()
                        );
                    }
                }
            }
        }
        // All-zero mask: exact pass-through.
        let zeros = BinaryMask::zeros(h, w);
        let x = init_masked_latent(&x0, &zeros, &mut rng).unwrap();
        assert_eq!(x.pixels, x0.pixels);
        // All-ones mask: target statistics near standard normal.
        let ones = BinaryMask {
            values: Array3::from_elem((h, w, 1), 1.0),
        };
        let x = init_masked_latent(&x0, &ones, &mut rng).unwrap();
        let n = x.pixels.len() as f64;
        let mean: f64 = x.pixels.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var: f64 = x.pixels.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.3, "mean {mean}");
        assert!((var - 1.0).abs() < 0.5, "var {var}");
        // Shape mismatch.
        let bad = BinaryMask::zeros(2, 2);
        assert!(init_masked_latent(&x0, &bad, &mut rng).is_err());
    }

    #[test]
    fn ddpm_final_step_adds_no_noise() {
        let den = random_denoiser(1);
        let (x0, mask) = context_canvas(4, 3);
        let sched = linear_schedule(10, 1e-3, 0.05).unwrap();
        let cond = ConditionEmbedding::new(vec![1]);
        let mut rng_a = ChaCha8Rng::seed_from_u64(100);
        let mut rng_b = ChaCha8Rng::seed_from_u64(999);
        let xt = init_masked_latent(&x0, &mask, &mut rng_a.clone()).unwrap();
        let a = ddpm_step(&den, &xt, 1, &cond, &mask, &x0, &sched, &mut rng_a).unwrap();
        let b = ddpm_step(&den, &xt, 1, &cond, &mask, &x0, &sched, &mut rng_b).unwrap();
        assert_eq!(a.pixels, b.pixels, "t=1 output depended on the rng");
        assert!(ddpm_step(&den, &xt, 0, &cond, &mask, &x0, &sched, &mut rng_a).is_err());
        assert!(ddpm_step(&den, &xt, 11, &cond, &mask, &x0, &sched, &mut rng_a).is_err());
    }

    #[test]
    fn ddim_eta_zero_is_deterministic() {
        let den = random_denoiser(2);
        let (x0, mask) = context_canvas(4, 3);
        let sched = linear_schedule(20, 1e-3, 0.05).unwrap();
        let cond = ConditionEmbedding::new(vec![2]);
        let scfg = SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: 5,
            eta: 0.0,
            seed: 17,
        };
        let a = sample(&den, &x0, &mask, &cond, &sched, &scfg).unwrap();
        let b = sample(&den, &x0, &mask, &cond, &sched, &scfg).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn ddim_to_zero_returns_predicted_clean_canvas() {
        // With the zero-initialized output conv, eps_hat = 0, so the t -> 0
        // step must land on x_t / sqrt(abar_t) inside the mask.
        let mut cfg = DenoiserConfig::tiny(6);
        cfg.in_channels = 3;
        let den = init_denoiser::<f32>(&cfg, 3).unwrap();
        let (x0, mask) = context_canvas(4, 3);
        let sched = linear_schedule(10, 1e-3, 0.05).unwrap();
        let cond = ConditionEmbedding::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = init_masked_latent(&x0, &mask, &mut rng).unwrap();
        let t = 7;
        let out = ddim_step(&den, &xt, t, 0, &cond, &mask, &x0, &sched, 0.0, &mut rng).unwrap();
        let scale = 1.0 / sched.alpha_bar(t).sqrt();
        let (h, w, c) = x0.dims();
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let got = out.pixels[[y, xx, ch]] as f64;
                    if mask.at(y, xx) == 1.0 {
                        let want = xt.pixels[[y, xx, ch]] as f64 * scale;
                        assert!((got - want).abs() < 1e-6);
                    } else {
                        assert_eq!(
                            out.pixels[[y, xx, ch]].to_bits(),
                            x0.pixels[[y, xx, ch]].to_bits()
                        );
                    }
                }
            }
        }
        // Invalid pair.
        assert!(ddim_step(&den, &xt, 3, 3, &cond, &mask, &x0, &sched, 0.0, &mut rng).is_err());
    }

    #[test]
    fn ladder_includes_endpoints_and_descends() {
        assert_eq!(timestep_ladder(100, 100).len(), 100);
        assert_eq!(timestep_ladder(1000, 2), vec![1000, 1]);
        let l = timestep_ladder(1000, 50);
        assert_eq!(*l.first().unwrap(), 1000);
        assert_eq!(*l.last().unwrap(), 1);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timestep_ladder(10, 10), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(timestep_ladder(5, 1), vec![5]);
    }

    #[test]
    fn context_immutable_through_full_chains() {
        let den = random_denoiser(7);
        let (x0, mask) = context_canvas(4, 3);
        let cond = ConditionEmbedding::new(vec![1, 3]);
        let sched = linear_schedule(12, 1e-3, 0.05).unwrap();
        for scfg in [
            SamplerConfig {
                kind: SamplerKind::Ddpm,
                steps: 12,
                eta: 0.0,
                seed: 3,
            },
            SamplerConfig {
                kind: SamplerKind::Ddim,
                steps: 4,
                eta: 0.5,
                seed: 4,
            },
        ] {
            let mut checked = 0usize;
            let out = sample_traced(&den, &x0, &mask, &cond, &sched, &scfg, &mut |_, x| {
                let (h, w, c) = x0.dims();
                for y in 0..h {
                    for xx in 0..w {
                        if mask.at(y, xx) == 0.0 {
                            for ch in 0..c {
                                assert_eq!(
                                    x.pixels[[y, xx, ch]].to_bits(),
                                    x0.pixels[[y, xx, ch]].to_bits()
                                );
                            }
                        }
                    }
                }
                checked += 1;
                Ok(())
            })
            .unwrap();
            assert!(checked > 1);
            assert!(out.pixels.iter().all(|v| v.is_finite() && *v >= -1.0 && *v <= 1.0));
        }
    }

    #[test]
    fn all_zero_mask_is_a_no_op_generation() {
        let den = random_denoiser(9);
        let (x0, _) = context_canvas(4, 3);
        let mask = BinaryMask::zeros(8, 8);
        let cond = ConditionEmbedding::empty();
        let sched = linear_schedule(6, 1e-3, 0.05).unwrap();
        let scfg = SamplerConfig {
            kind: SamplerKind::Ddpm,
            steps: 6,
            eta: 0.0,
            seed: 0,
        };
        let out = sample(&den, &x0, &mask, &cond, &sched, &scfg).unwrap();
        assert_eq!(out.pixels, x0.pixels);
    }

    #[test]
    fn config_validation() {
        let sched = linear_schedule(10, 1e-3, 0.05).unwrap();
        let bad_steps = SamplerConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(bad_steps.validate(&sched).is_err());
        let too_many = SamplerConfig {
            steps: 11,
            ..Default::default()
        };
        assert!(too_many.validate(&sched).is_err());
        let bad_eta = SamplerConfig {
            steps: 5,
            eta: 1.5,
            ..Default::default()
        };
        assert!(bad_eta.validate(&sched).is_err());
        let strided_ddpm = SamplerConfig {
            kind: SamplerKind::Ddpm,
            steps: 5,
            eta: 0.0,
            seed: 0,
        };
        assert!(strided_ddpm.validate(&sched).is_err());
        let ok = SamplerConfig {
            kind: SamplerKind::Ddpm,
            steps: 10,
            eta: 0.0,
            seed: 0,
        };
        assert!(ok.validate(&sched).is_ok());
    }
}
