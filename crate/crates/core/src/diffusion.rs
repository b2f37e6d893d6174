//! Noise schedule, training noise, and latent-only sampling.

use ldprune_tensor::{ops, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{ForwardOptions, OperatorGraph, UNetSpec};
use crate::score::LatentSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Deterministic DDIM with eta = 0.
    Ddim,
    /// Ancestral DDPM over the same strided timesteps.
    Ddpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_inference_steps: usize,
    pub sampler: Sampler,
    /// Samples generated per forward batch.
    pub batch_size: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            num_inference_steps: 20,
            sampler: Sampler::Ddim,
            batch_size: 16,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if self.num_train_steps < 2 {
            return bad("num_train_steps must be at least 2");
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return bad("betas must satisfy 0 < beta_start < beta_end < 1");
        }
        if self.num_inference_steps == 0 || self.num_inference_steps > self.num_train_steps {
            return bad("num_inference_steps must be in 1..=num_train_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Linear betas, strictly increasing.
    pub fn betas(&self) -> Vec<f64> {
        let n = self.num_train_steps;
        (0..n)
            .map(|i| self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Cumulative products of `1 - beta`, strictly decreasing.
    pub fn alphas_cumprod(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.betas()
            .into_iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect()
    }

    /// Inference timesteps, descending: `i * (T / steps)` for `i` in reverse.
    pub fn timesteps(&self) -> Vec<usize> {
        let ratio = self.num_train_steps / self.num_inference_steps;
        (0..self.num_inference_steps).rev().map(|i| i * ratio).collect()
    }

    fn stride(&self) -> usize {
        self.num_train_steps / self.num_inference_steps
    }
}

/// `sqrt(abar_t) * clean + sqrt(1 - abar_t) * noise` with one `t` per sample.
pub fn add_noise(clean: &Tensor, noise: &Tensor, t: &[usize], cfg: &SchedulerConfig) -> Result<Tensor> {
    if clean.shape() != noise.shape() {
        return Err(CoreError::shape(
            "add_noise",
            format!("{:?} vs {:?}", clean.shape(), noise.shape()),
        ));
    }
    let n = clean.shape().first().copied().unwrap_or(0);
    if t.len() != n {
        return Err(CoreError::shape(
            "add_noise",
            format!("{} timesteps for batch {n}", t.len()),
        ));
    }
    if let Some(&bad) = t.iter().find(|&&s| s >= cfg.num_train_steps) {
        return Err(CoreError::InvalidConfig(format!(
            "timestep {bad} outside 0..{}",
            cfg.num_train_steps
        )));
    }
    let abar = cfg.alphas_cumprod();
    let per = clean.numel() / n.max(1);
    let mut out = Vec::with_capacity(clean.numel());
    for (b, &ti) in t.iter().enumerate() {
        let (sa, sn) = (abar[ti].sqrt() as f32, (1.0 - abar[ti]).sqrt() as f32);
        let c = &clean.data()[b * per..(b + 1) * per];
        let e = &noise.data()[b * per..(b + 1) * per];
        out.extend(c.iter().zip(e).map(|(&c, &e)| sa * c + sn * e));
    }
    Ok(Tensor::new(clean.shape().to_vec(), out)?)
}

/// Generator for one sample's noise, a pure function of the triple.
pub fn sample_rng(base_seed: u64, condition: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(((condition as u64) << 32) | index as u64);
    rng
}

/// Initial noise for sample `index` of `condition`, `[1, C, H, W]`.
pub fn initial_noise(spec: &UNetSpec, base_seed: u64, condition: usize, index: usize) -> Tensor {
    Tensor::randn(spec.latent_shape(1), 1.0, &mut sample_rng(base_seed, condition, index))
}

/// Generates `n` final latents for `condition`. Nothing is decoded.
pub fn generate_latents(
    graph: &OperatorGraph,
    condition: usize,
    n: usize,
    cfg: &SchedulerConfig,
    base_seed: u64,
) -> Result<LatentSet> {
    cfg.validate()?;
    if n == 0 {
        return Err(CoreError::InvalidConfig("n must be at least 1".into()));
    }
    let spec = graph.spec();
    let mut latents = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + cfg.batch_size).min(n);
        let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|i| sample_rng(base_seed, condition, i)).collect();
        let noise: Vec<Tensor> = rngs
            .iter_mut()
            .map(|r| Tensor::randn(spec.latent_shape(1), 1.0, r))
            .collect();
        let x = Tensor::stack_batch(&noise)?;
        let out = sample(graph, x, condition, cfg, &mut rngs)?;
        latents.extend(out.unbatch());
        start = end;
    }
    LatentSet::new(condition, &latents)
}

fn sample(
    graph: &OperatorGraph,
    mut x: Tensor,
    condition: usize,
    cfg: &SchedulerConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    let abar = cfg.alphas_cumprod();
    let b = rngs.len();
    let per = x.numel() / b;
    let cond = vec![condition; b];
    for t in cfg.timesteps() {
        let eps = graph.predict(&x, &vec![t as f32; b], &cond)?;
        let a_t = abar[t];
        let a_prev = if t >= cfg.stride() { abar[t - cfg.stride()] } else { 1.0 };
        let x0_coef = (1.0 / a_t.sqrt(), (1.0 - a_t).sqrt() / a_t.sqrt());
        let data = x.data_mut();
        match cfg.sampler {
            Sampler::Ddim => {
                let (ca, ce) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
                for (xv, &e) in data.iter_mut().zip(eps.data()) {
                    let (xd, ed) = (*xv as f64, e as f64);
                    let x0 = x0_coef.0 * xd - x0_coef.1 * ed;
                    *xv = (ca * x0 + ce * ed) as f32;
                }
            }
            Sampler::Ddpm => {
                let beta = 1.0 - a_t / a_prev;
                let c0 = a_prev.sqrt() * beta / (1.0 - a_t);
                let ct = (1.0 - beta).sqrt() * (1.0 - a_prev) / (1.0 - a_t);
                let sigma = ((1.0 - a_prev) / (1.0 - a_t) * beta).sqrt();
                for (s, rng) in rngs.iter_mut().enumerate() {
                    for j in s * per..(s + 1) * per {
                        let (xd, ed) = (data[j] as f64, eps.data()[j] as f64);
                        let x0 = x0_coef.0 * xd - x0_coef.1 * ed;
                        let mut v = c0 * x0 + ct * xd;
                        if t > 0 {
                            let z: f64 = rng.sample(rand_distr::StandardNormal);
                            v += sigma * z;
                        }
                        data[j] = v as f32;
                    }
                }
            }
        }
        if !x.is_finite() {
            return Err(CoreError::Tensor(ldprune_tensor::TensorError::NonFinite {
                op: "sampler",
            }));
        }
    }
    Ok(x)
}

/// A noised training batch: `x_t = add_noise(clean, noise, t)`.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Tensor,
    pub noise: Tensor,
    pub t: Vec<usize>,
}

impl NoisedBatch {
    pub fn t_f32(&self) -> Vec<f32> {
        self.t.iter().map(|&t| t as f32).collect()
    }
}

/// Draws timesteps uniformly and unit Gaussian noise for `clean`.
pub fn noise_batch<R: Rng + ?Sized>(clean: &Tensor, cfg: &SchedulerConfig, rng: &mut R) -> Result<NoisedBatch> {
    let n = clean.shape().first().copied().unwrap_or(0);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_train_steps)).collect();
    let noise = Tensor::randn(clean.shape().to_vec(), 1.0, rng);
    let x_t = add_noise(clean, &noise, &t, cfg)?;
    Ok(NoisedBatch { x_t, noise, t })
}

/// Epsilon-prediction MSE at uniformly sampled timesteps.
pub fn training_loss<R: Rng + ?Sized>(
    graph: &OperatorGraph,
    tape: &Tape,
    clean: &Tensor,
    cond: &[usize],
    cfg: &SchedulerConfig,
    rng: &mut R,
) -> Result<Var> {
    let batch = noise_batch(clean, cfg, rng)?;
    let out = graph.forward(
        tape,
        &Var::constant(batch.x_t.clone()),
        &batch.t_f32(),
        cond,
        ForwardOptions::default(),
    )?;
    Ok(ops::mse(tape, &out.eps, &Var::constant(batch.noise))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_unet;

    #[test]
    fn schedule_is_monotone() {
        let cfg = SchedulerConfig::default();
        let b = cfg.betas();
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert!(b.iter().all(|&x| 0.0 < x && x < 1.0));
        let a = cfg.alphas_cumprod();
        assert!(a.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn timesteps_are_strided_and_descending() {
        let cfg = SchedulerConfig {
            num_inference_steps: 4,
            ..Default::default()
        };
        assert_eq!(cfg.timesteps(), vec![750, 500, 250, 0]);
    }

    #[test]
    fn add_noise_edge_cases() {
        let cfg = SchedulerConfig::default();
        let clean = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let noise = Tensor::new(vec![1, 3], vec![0.3, 0.7, -0.9]).unwrap();
        let out = add_noise(&clean, &noise, &[0], &cfg).unwrap();
        assert!(out.data().iter().zip(clean.data()).all(|(a, b)| (a - b).abs() < 1e-2));

        let abar = cfg.alphas_cumprod()[600];
        let zero = Tensor::zeros(vec![1, 3]);
        let a = add_noise(&clean, &zero, &[600], &cfg).unwrap();
        let want: Vec<f32> = clean.data().iter().map(|c| abar.sqrt() as f32 * c).collect();
        assert_eq!(a.data(), want.as_slice());
        let b = add_noise(&zero, &noise, &[600], &cfg).unwrap();
        let want: Vec<f32> = noise.data().iter().map(|e| (1.0 - abar).sqrt() as f32 * e).collect();
        assert_eq!(b.data(), want.as_slice());
        assert!(add_noise(&clean, &noise, &[1000], &cfg).is_err());
    }

    #[test]
    fn initial_noise_depends_only_on_the_triple() {
        let spec = UNetSpec::tiny();
        let a = initial_noise(&spec, 7, 2, 5);
        assert!(a.bit_eq(&initial_noise(&spec, 7, 2, 5)));
        assert!(!a.bit_eq(&initial_noise(&spec, 7, 2, 6)));
        assert!(!a.bit_eq(&initial_noise(&spec, 7, 3, 5)));
        assert!(!a.bit_eq(&initial_noise(&spec, 8, 2, 5)));
    }

    #[test]
    fn ddim_generation_is_deterministic_and_paired() {
        let g = build_unet(&UNetSpec::tiny(), 0).unwrap();
        let cfg = SchedulerConfig {
            num_inference_steps: 3,
            batch_size: 2,
            ..Default::default()
        };
        let a = generate_latents(&g, 1, 3, &cfg, 11).unwrap();
        let b = generate_latents(&g.clone(), 1, 3, &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_eq!(g.counter().get(), 2 * 3 * 3);
    }

    #[test]
    fn ddpm_is_seeded() {
        let g = build_unet(&UNetSpec::tiny(), 0).unwrap();
        let cfg = SchedulerConfig {
            num_inference_steps: 3,
            sampler: Sampler::Ddpm,
            ..Default::default()
        };
        let a = generate_latents(&g, 0, 2, &cfg, 1).unwrap();
        assert_eq!(a, generate_latents(&g, 0, 2, &cfg, 1).unwrap());
        let ddim = SchedulerConfig {
            sampler: Sampler::Ddim,
            ..cfg
        };
        assert_ne!(a, generate_latents(&g, 0, 2, &ddim, 1).unwrap());
    }

    #[test]
    fn zero_prediction_loss_is_noise_power() {
        let mut g = build_unet(&UNetSpec::tiny(), 0).unwrap();
        for (name, t) in g.params_mut() {
            if name.starts_with("conv_out.") {
                t.data_mut().fill(0.0);
            }
        }
        let cfg = SchedulerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clean = Tensor::randn(g.spec().latent_shape(16), 1.0, &mut rng);
        let tape = Tape::inference();
        let mut total = 0.0;
        for _ in 0..8 {
            let loss = training_loss(&g, &tape, &clean, &[0; 16], &cfg, &mut rng).unwrap();
            total += loss.value().data()[0];
        }
        assert!((total / 8.0 - 1.0).abs() < 0.05, "{}", total / 8.0);
    }
}
