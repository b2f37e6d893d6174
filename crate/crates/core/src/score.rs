//! Latent-set divergence between an original and a modified model.

use std::fmt;
use std::str::FromStr;

use ldprune_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate_latents, SchedulerConfig};
use crate::error::{CoreError, Result};
use crate::graph::OperatorGraph;

/// `N` latents of dimension `D` generated under one condition, stored as
/// flattened row-major vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSet {
    pub condition: usize,
    /// Operator id of the modified model, or `original`.
    pub provenance: String,
    dim: usize,
    data: Vec<f32>,
}

impl LatentSet {
    pub fn new(condition: usize, latents: &[Tensor]) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| CoreError::InvalidConfig("empty latent set".into()))?;
        let dim = first.numel();
        let mut data = Vec::with_capacity(dim * latents.len());
        for l in latents {
            if l.numel() != dim {
                return Err(CoreError::shape(
                    "latent set",
                    format!("member of {} values, expected {dim}", l.numel()),
                ));
            }
            data.extend_from_slice(l.data());
        }
        Self::from_rows(condition, dim, data)
    }

    pub fn from_rows(condition: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "{} values do not form a non-empty set of {dim}-vectors",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidConfig("latent set holds non-finite values".into()));
        }
        Ok(Self {
            condition,
            provenance: "original".into(),
            dim,
            data,
        })
    }

    pub fn with_provenance(mut self, p: impl Into<String>) -> Self {
        self.provenance = p.into();
        self
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    /// Maps every value; used by property tests and oracles.
    pub fn map(&self, f: impl Fn(usize, f32) -> f32) -> Self {
        let d = self.dim;
        Self {
            data: self.data.iter().enumerate().map(|(i, &v)| f(i % d, v)).collect(),
            ..self.clone()
        }
    }
}

/// Element-wise mean.
pub fn latent_mean(set: &LatentSet) -> Vec<f64> {
    let mut m = vec![0.0f64; set.dim];
    for row in set.rows() {
        for (a, &v) in m.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = set.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Element-wise population standard deviation (divisor `N`).
pub fn latent_std(set: &LatentSet) -> Vec<f64> {
    let mean = latent_mean(set);
    let mut var = vec![0.0f64; set.dim];
    for row in set.rows() {
        for ((a, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - m;
            *a += d * d;
        }
    }
    let n = set.len() as f64;
    var.into_iter().map(|s| (s / n).sqrt()).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims(a: &LatentSet, b: &LatentSet) -> Result<()> {
    if a.dim != b.dim {
        return Err(CoreError::shape(
            "latent set",
            format!("dimension {} vs {}", a.dim, b.dim),
        ));
    }
    Ok(())
}

/// Euclidean distance between set means.
pub fn avg_distance(orig: &LatentSet, modified: &LatentSet) -> Result<f64> {
    check_dims(orig, modified)?;
    Ok(l2(&latent_mean(orig), &latent_mean(modified)))
}

/// Euclidean distance between set standard deviations.
pub fn std_distance(orig: &LatentSet, modified: &LatentSet) -> Result<f64> {
    check_dims(orig, modified)?;
    Ok(l2(&latent_std(orig), &latent_std(modified)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combinator {
    #[default]
    Sum,
    Product,
    AvgOnly,
    StdOnly,
}

impl Combinator {
    pub const ALL: [Combinator; 4] = [
        Combinator::Sum,
        Combinator::Product,
        Combinator::AvgOnly,
        Combinator::StdOnly,
    ];
}

impl fmt::Display for Combinator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combinator::Sum => "sum",
            Combinator::Product => "product",
            Combinator::AvgOnly => "avg_only",
            Combinator::StdOnly => "std_only",
        })
    }
}

impl FromStr for Combinator {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Combinator::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown combinator `{s}`")))
    }
}

pub fn combine(avg_dist: f64, std_dist: f64, c: Combinator) -> Result<f64> {
    if !(avg_dist >= 0.0 && std_dist >= 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "distances must be non-negative, got ({avg_dist}, {std_dist})"
        )));
    }
    Ok(match c {
        Combinator::Sum => avg_dist + std_dist,
        Combinator::Product => avg_dist * std_dist,
        Combinator::AvgOnly => avg_dist,
        Combinator::StdOnly => std_dist,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub condition: usize,
    pub avg_dist: f64,
    pub std_dist: f64,
    pub combined: f64,
}

impl ConditionScore {
    pub fn new(condition: usize, avg_dist: f64, std_dist: f64, c: Combinator) -> Result<Self> {
        Ok(Self {
            condition,
            avg_dist,
            std_dist,
            combined: combine(avg_dist, std_dist, c)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorScore {
    pub op_id: String,
    pub per_condition: Vec<ConditionScore>,
    /// Sum of `combined` over conditions.
    pub total: f64,
}

impl OperatorScore {
    pub fn from_conditions(op_id: impl Into<String>, per_condition: Vec<ConditionScore>) -> Self {
        let total = per_condition.iter().map(|c| c.combined).sum();
        Self {
            op_id: op_id.into(),
            per_condition,
            total,
        }
    }

    /// Same distances under another combinator; nothing is regenerated.
    pub fn recombine(&self, c: Combinator) -> Result<Self> {
        let per = self
            .per_condition
            .iter()
            .map(|s| ConditionScore::new(s.condition, s.avg_dist, s.std_dist, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_conditions(self.op_id.clone(), per))
    }
}

/// Generation settings shared by the original and modified runs.
#[derive(Debug, Clone)]
pub struct ScoringContext<'a> {
    pub scheduler: &'a SchedulerConfig,
    pub n_gen: usize,
    pub base_seed: u64,
    pub combinator: Combinator,
}

/// Original latents per condition.
pub fn original_sets(graph: &OperatorGraph, conditions: &[usize], ctx: &ScoringContext) -> Result<Vec<LatentSet>> {
    conditions
        .iter()
        .map(|&c| generate_latents(graph, c, ctx.n_gen, ctx.scheduler, ctx.base_seed))
        .collect()
}

/// Modifies `op_id`, generates paired latents for every condition of
/// `orig_sets`, and restores the graph.
pub fn score_operator(
    graph: &mut OperatorGraph,
    op_id: &str,
    orig_sets: &[LatentSet],
    ctx: &ScoringContext,
) -> Result<OperatorScore> {
    let plan = graph.apply(op_id)?;
    let result: Result<Vec<ConditionScore>> = orig_sets
        .iter()
        .map(|orig| {
            let modified = generate_latents(graph, orig.condition, ctx.n_gen, ctx.scheduler, ctx.base_seed)?
                .with_provenance(op_id);
            ConditionScore::new(
                orig.condition,
                avg_distance(orig, &modified)?,
                std_distance(orig, &modified)?,
                ctx.combinator,
            )
        })
        .collect();
    graph.restore(plan)?;
    let per = result.map_err(|e| e.in_operator(op_id))?;
    Ok(OperatorScore::from_conditions(op_id, per))
}
