//! Experiment configuration: TOML file, defaults, flag overrides and the
//! stage hashes that key every artifact.

use std::path::{Path, PathBuf};

use ldprune_core::checkpoint::sha256_hex;
use ldprune_core::data::DatasetConfig;
use ldprune_core::diffusion::SchedulerConfig;
use ldprune_core::distill::KDConfig;
use ldprune_core::eval::LatencyConfig;
use ldprune_core::graph::UNetSpec;
use ldprune_core::prune::PruneConfig;
use ldprune_core::score::Combinator;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub iterations: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            grad_accum: 1,
            iterations: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub k: usize,
    /// Empty means every condition of the U-Net.
    pub conditions: Vec<usize>,
    pub n_gen: usize,
    pub combinator: Combinator,
    pub min_cost_fraction: f64,
}

impl Default for PruneSection {
    fn default() -> Self {
        let p = PruneConfig::default();
        Self {
            k: p.k,
            conditions: Vec::new(),
            n_gen: p.n_gen,
            combinator: p.combinator,
            min_cost_fraction: p.min_cost_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples_per_condition: usize,
    pub sample_seed: u64,
    /// Diagonal-covariance Fréchet distance.
    pub diag: bool,
    pub latency: bool,
    pub latency_warmup: usize,
    pub latency_measured: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let l = LatencyConfig::default();
        Self {
            samples_per_condition: 16,
            sample_seed: 777,
            diag: true,
            latency: true,
            latency_warmup: l.warmup,
            latency_measured: l.measured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Scoring workers; 0 means one per core. Does not affect results.
    pub jobs: usize,
    pub output_dir: PathBuf,
    /// Periodic training checkpoints every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Weight seed for the from-scratch baseline.
    pub scratch_seed: u64,
    pub unet: UNetSpec,
    pub scheduler: SchedulerConfig,
    pub data: DatasetConfig,
    pub teacher: TeacherSection,
    pub prune: PruneSection,
    pub kd: KDConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            jobs: 0,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            scratch_seed: 123,
            unet: UNetSpec::tiny(),
            scheduler: SchedulerConfig::default(),
            data: DatasetConfig {
                samples: 1024,
                ..Default::default()
            },
            teacher: TeacherSection::default(),
            prune: PruneSection {
                min_cost_fraction: 0.005,
                ..Default::default()
            },
            kd: KDConfig {
                iterations: 500,
                ..Default::default()
            },
            eval: EvalSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub combinator: Option<Combinator>,
    pub n_gen: Option<usize>,
}

fn hash_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    sha256_hex(json.as_bytes())[..16].to_string()
}

impl ExperimentConfig {
    /// Defaults, then the file, then the flags.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        cfg.deterministic |= o.deterministic;
        if let Some(j) = o.jobs {
            cfg.jobs = j;
        }
        if let Some(d) = &o.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(k) = o.k {
            cfg.prune.k = k;
        }
        if let Some(c) = o.combinator {
            cfg.prune.combinator = c;
        }
        if let Some(n) = o.n_gen {
            cfg.prune.n_gen = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: ldprune_core::CoreError| CliError::Config(e.to_string());
        self.unet.validate().map_err(wrap)?;
        self.scheduler.validate().map_err(wrap)?;
        self.prune_config().validate().map_err(wrap)?;
        self.kd_config().validate().map_err(wrap)?;
        self.teacher_config().validate().map_err(wrap)?;
        if let Some(c) = self.prune.conditions.iter().find(|&&c| c >= self.unet.num_conditions) {
            return Err(CliError::Config(format!(
                "condition {c} outside 0..{}",
                self.unet.num_conditions
            )));
        }
        if self.eval.samples_per_condition * self.unet.num_conditions < 2 {
            return Err(CliError::Config("evaluation needs at least 2 samples".into()));
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> KDConfig {
        KDConfig {
            lr: self.teacher.lr,
            batch_size: self.teacher.batch_size,
            grad_accum: self.teacher.grad_accum,
            iterations: self.teacher.iterations,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn kd_config(&self) -> KDConfig {
        KDConfig {
            seed: self.seed,
            ..self.kd.clone()
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        let p = &self.prune;
        PruneConfig {
            k: p.k,
            conditions: if p.conditions.is_empty() {
                (0..self.unet.num_conditions).collect()
            } else {
                p.conditions.clone()
            },
            n_gen: p.n_gen,
            combinator: p.combinator,
            min_cost_fraction: p.min_cost_fraction,
            base_seed: self.seed,
            scheduler: self.scheduler.clone(),
            jobs: self.jobs,
            deterministic: self.deterministic,
        }
    }

    pub fn latency_config(&self) -> LatencyConfig {
        LatencyConfig {
            warmup: self.eval.latency_warmup,
            measured: self.eval.latency_measured,
            condition: 0,
            seed: self.seed,
        }
    }

    /// Identifies the run directory: everything except `jobs` and `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.jobs = 0;
        c.output_dir = PathBuf::new();
        hash_of(&c)
    }

    /// Inputs that determine the teacher checkpoint.
    pub fn teacher_hash(&self) -> String {
        hash_of(&(self.seed, &self.unet, &self.scheduler, &self.data, &self.teacher))
    }

    /// Inputs that determine the pruned checkpoint.
    pub fn prune_hash(&self) -> String {
        let mut p = self.prune_config();
        p.jobs = 0;
        hash_of(&(self.teacher_hash(), p))
    }

    /// Inputs that determine the fine-tuned checkpoints.
    pub fn finetune_hash(&self) -> String {
        hash_of(&(self.prune_hash(), &self.kd))
    }

    /// Inputs that determine the from-scratch baseline.
    pub fn scratch_hash(&self) -> String {
        hash_of(&(self.finetune_hash(), self.scratch_seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.config_hash())
    }
}
