//! Quality and efficiency measurements: latent Fréchet proxy, wall-clock
//! latency, parameter count.

use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate_latents, SchedulerConfig};
use crate::error::{CoreError, Result};
use crate::graph::OperatorGraph;
use crate::score::LatentSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentFrechetResult {
    pub distance: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub diag: bool,
}

/// Stacks several sets (e.g. one per condition) into one collection.
pub fn pool(sets: &[LatentSet]) -> Result<LatentSet> {
    let first = sets
        .first()
        .ok_or_else(|| CoreError::InvalidConfig("nothing to pool".into()))?;
    let mut data = Vec::with_capacity(first.data().len() * sets.len());
    for s in sets {
        if s.dim() != first.dim() {
            return Err(CoreError::shape(
                "latent pool",
                format!("dim {} vs {}", s.dim(), first.dim()),
            ));
        }
        data.extend_from_slice(s.data());
    }
    Ok(LatentSet::from_rows(first.condition, first.dim(), data)?.with_provenance(first.provenance.clone()))
}

fn mean(s: &LatentSet) -> DVector<f64> {
    let mut m = DVector::zeros(s.dim());
    for row in s.rows() {
        for (a, &v) in m.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    m / s.len() as f64
}

/// Sample covariance (divisor `N - 1`).
fn covariance(s: &LatentSet, mu: &DVector<f64>) -> DMatrix<f64> {
    let x = DMatrix::from_fn(s.len(), s.dim(), |i, j| s.data()[i * s.dim() + j] as f64 - mu[j]);
    x.transpose() * &x / (s.len() - 1) as f64
}

fn variances(s: &LatentSet, mu: &DVector<f64>) -> Vec<f64> {
    let mut v = vec![0.0; s.dim()];
    for row in s.rows() {
        for ((a, &x), m) in v.iter_mut().zip(row).zip(mu.iter()) {
            *a += (x as f64 - m).powi(2);
        }
    }
    v.iter().map(|a| a / (s.len() - 1) as f64).collect()
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of `a` and `b`.
///
/// `tr((Σa Σb)^½)` is computed as the trace of the square root of the
/// symmetric `Σa^½ Σb Σa^½`, which has the same eigenvalues.
pub fn latent_frechet(a: &LatentSet, b: &LatentSet, diag: bool) -> Result<LatentFrechetResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "Fréchet distance needs at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(CoreError::shape(
            "latent_frechet",
            format!("dim {} vs {}", a.dim(), b.dim()),
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mean_term = (&ma - &mb).norm_squared();
    let cov_term = if diag {
        variances(a, &ma)
            .iter()
            .zip(variances(b, &mb))
            .map(|(va, vb)| va + vb - 2.0 * (va * vb).sqrt())
            .sum::<f64>()
    } else {
        let (ca, cb) = (covariance(a, &ma), covariance(b, &mb));
        let sa = psd_sqrt(ca.clone());
        let inner = &sa * &cb * &sa;
        let inner = (&inner + inner.transpose()) * 0.5;
        let cross: f64 = SymmetricEigen::new(inner)
            .eigenvalues
            .iter()
            .map(|l| l.max(0.0).sqrt())
            .sum();
        ca.trace() + cb.trace() - 2.0 * cross
    };
    Ok(LatentFrechetResult {
        distance: (mean_term + cov_term).max(0.0),
        n_a: a.len(),
        n_b: b.len(),
        diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub warmup: usize,
    pub measured: usize,
    pub condition: usize,
    pub seed: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            warmup: 20,
            measured: 100,
            condition: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyResult {
    /// Milliseconds per generated sample.
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n_warmup: usize,
    pub n_measured: usize,
    pub inference_steps: usize,
    pub hardware: String,
}

impl LatencyResult {
    /// Fraction of the baseline's time saved, in percent.
    pub fn speedup_vs(&self, baseline: &LatencyResult) -> f64 {
        100.0 * (1.0 - self.mean_ms / baseline.mean_ms)
    }
}

static MEASUREMENT: Mutex<()> = Mutex::new(());

/// Holds the process-wide measurement lock; other timing-sensitive work can
/// take it to stay out of the way of a measurement.
pub fn measurement_lock() -> std::sync::MutexGuard<'static, ()> {
    MEASUREMENT.lock().unwrap_or_else(|p| p.into_inner())
}

fn hardware_note() -> String {
    format!(
        "{}-{}, {} threads available",
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

/// Times single-sample generations after discarding `warmup` of them.
pub fn measure_latency(graph: &OperatorGraph, sched: &SchedulerConfig, cfg: &LatencyConfig) -> Result<LatencyResult> {
    sched.validate()?;
    if cfg.measured == 0 {
        return Err(CoreError::InvalidConfig(
            "at least one measured generation is required".into(),
        ));
    }
    let g = graph.clone().with_fresh_counter();
    let _lock = measurement_lock();
    for i in 0..cfg.warmup {
        generate_latents(&g, cfg.condition, 1, sched, cfg.seed.wrapping_add(i as u64))?;
    }
    let mut times = Vec::with_capacity(cfg.measured);
    for i in 0..cfg.measured {
        let start = Instant::now();
        generate_latents(&g, cfg.condition, 1, sched, cfg.seed.wrapping_add(i as u64))?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let n = times.len() as f64;
    let mean_ms = times.iter().sum::<f64>() / n;
    let std_ms = (times.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LatencyResult {
        mean_ms,
        std_ms,
        n_warmup: cfg.warmup,
        n_measured: cfg.measured,
        inference_steps: sched.num_inference_steps,
        hardware: hardware_note(),
    })
}

/// Trainable parameters, each counted once.
pub fn count_params(graph: &OperatorGraph) -> usize {
    graph.param_count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frechet: Option<LatentFrechetResult>,
    pub params: usize,
    pub latency: Option<LatencyResult>,
    pub speedup_vs_baseline: Option<f64>,
}
