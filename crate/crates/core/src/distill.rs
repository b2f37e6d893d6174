//! Teacher training and knowledge-distillation fine-tuning.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ldprune_tensor::{ops, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Lineage};
use crate::data::LatentDataset;
use crate::diffusion::{noise_batch, NoisedBatch, SchedulerConfig};
use crate::error::{CoreError, Result};
use crate::graph::{build_unet, ForwardOptions, OperatorGraph};
use crate::modify::{Edit, ADAPTER_WEIGHT};

/// Tasks with published fine-tuning hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    TextToImage,
    UnconditionalImage,
    UnconditionalAudio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub iterations: usize,
    pub task_coef: f64,
    pub out_coef: f64,
    pub feat_coef: f64,
    /// Tap names to match; empty means every tap of the teacher.
    pub taps: Vec<String>,
    /// Run seed for batch sampling; set by the caller, not read from files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            grad_accum: 1,
            iterations: 2000,
            task_coef: 1.0,
            out_coef: 1.0,
            feat_coef: 1.0,
            taps: Vec::new(),
            seed: 0,
        }
    }
}

impl KDConfig {
    pub fn preset(task: Task) -> Self {
        let (lr, batch_size, grad_accum, iterations, coef) = match task {
            Task::TextToImage => (3e-5, 64, 4, 50_000, 0.7),
            Task::UnconditionalImage => (5e-6, 32, 4, 50_000, 300.0),
            Task::UnconditionalAudio => (1e-4, 64, 2, 12_000, 10.0),
        };
        Self {
            lr,
            batch_size,
            grad_accum,
            iterations,
            feat_coef: coef,
            out_coef: coef,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if !(self.task_coef >= 0.0 && self.out_coef >= 0.0 && self.feat_coef >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: f64,
    pub out: f64,
    pub feat: f64,
    pub total: f64,
}

/// Everything needed to resume a run on the identical trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub adam_m: BTreeMap<String, Vec<f32>>,
    pub adam_v: BTreeMap<String, Vec<f32>>,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    pub loss_history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        let mut s = Self {
            step: 0,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            rng_seed: String::new(),
            rng_stream: 0,
            rng_word_pos: String::new(),
            loss_history: Vec::new(),
        };
        s.store_rng(&ChaCha8Rng::seed_from_u64(seed));
        s
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.rng_seed, &mut seed).expect("written by store_rng");
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(self.rng_stream);
        r.set_word_pos(self.rng_word_pos.parse().expect("written by store_rng"));
        r
    }

    fn store_rng(&mut self, r: &ChaCha8Rng) {
        self.rng_seed = hex::encode(r.get_seed());
        self.rng_stream = r.get_stream();
        self.rng_word_pos = r.get_word_pos().to_string();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Line-delimited JSON loss log, appended to.
    pub log_path: Option<PathBuf>,
    /// Periodic checkpoints (`step-N.ldpr` plus `step-N.state.json`).
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Where a diverged run dumps its state; defaults to the system temp dir.
    pub dump_dir: Option<PathBuf>,
}

/// The three loss terms and their weighted total.
pub struct KdTerms {
    pub total: Var,
    pub task: f64,
    pub out: f64,
    pub feat: f64,
}

/// Maps `[N, Cs, H, W]` onto `Ct` channels, each the mean of all input channels.
fn channel_average(tape: &Tape, x: &Var, ct: usize) -> Result<Var> {
    let cs = x.shape()[1];
    let w = Var::constant(Tensor::full(vec![ct, cs, 1, 1], 1.0 / cs as f32));
    Ok(ops::conv2d(tape, x, &w, None, 1, 0)?)
}

/// Weighted sum of the task, output-KD and feature-KD terms on one batch.
/// Without a teacher only the task term is formed.
pub fn kd_loss(
    teacher: Option<&OperatorGraph>,
    student: &OperatorGraph,
    tape: &Tape,
    batch: &NoisedBatch,
    cond: &[usize],
    cfg: &KDConfig,
) -> Result<KdTerms> {
    let t = batch.t_f32();
    let x = Var::constant(batch.x_t.clone());
    let want_taps = teacher.is_some() && cfg.feat_coef > 0.0;
    let s = student.forward(
        tape,
        &x,
        &t,
        cond,
        ForwardOptions {
            taps: want_taps,
            ..Default::default()
        },
    )?;
    let task = ops::mse(tape, &s.eps, &Var::constant(batch.noise.clone()))?;
    let mut total = ops::scale(tape, &task, cfg.task_coef as f32)?;
    let (mut out_v, mut feat_v) = (0.0, 0.0);
    if let Some(teacher) = teacher {
        let inf = Tape::inference();
        let tout = teacher.forward(
            &inf,
            &x,
            &t,
            cond,
            ForwardOptions {
                taps: want_taps,
                uncounted: true,
                ..Default::default()
            },
        )?;
        let out = ops::mse(tape, &s.eps, &Var::constant(tout.eps.into_value()))?;
        out_v = out.value().data()[0] as f64;
        total = ops::add(tape, &total, &ops::scale(tape, &out, cfg.out_coef as f32)?)?;
        if want_taps {
            let student_taps: HashMap<&str, &Var> = s.taps.iter().map(|(n, v)| (n.as_str(), v)).collect();
            let mut feat: Option<Var> = None;
            for (name, tv) in &tout.taps {
                if !cfg.taps.is_empty() && !cfg.taps.contains(name) {
                    continue;
                }
                let Some(sv) = student_taps.get(name.as_str()) else {
                    continue;
                };
                let ct = tv.shape()[1];
                let sv = if sv.shape()[1] != ct {
                    channel_average(tape, sv, ct)?
                } else {
                    (*sv).clone()
                };
                let term = ops::mse(tape, &sv, &Var::constant(tv.value().clone()))
                    .map_err(|e| CoreError::from(e).in_operator(format!("tap {name}")))?;
                feat = Some(match feat {
                    None => term,
                    Some(f) => ops::add(tape, &f, &term)?,
                });
            }
            let feat =
                feat.ok_or_else(|| CoreError::InvalidConfig("teacher and student share no tap points".into()))?;
            feat_v = feat.value().data()[0] as f64;
            total = ops::add(tape, &total, &ops::scale(tape, &feat, cfg.feat_coef as f32)?)?;
        }
    }
    Ok(KdTerms {
        task: task.value().data()[0] as f64,
        out: out_v,
        feat: feat_v,
        total,
    })
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn adam_step(graph: &mut OperatorGraph, grads: &HashMap<String, Vec<f32>>, state: &mut TrainState, lr: f64) {
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    for (name, p) in graph.params_mut() {
        let n = p.numel();
        let m = state.adam_m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.adam_v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(&name);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]) as f64;
            let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            *w -= (lr * (mi / c1) / ((vi / c2).sqrt() + EPS)) as f32;
        }
    }
}

fn dump(student: &OperatorGraph, state: &TrainState, opts: &TrainOptions, step: usize) -> PathBuf {
    let dir = opts.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
    let base = dir.join(format!("ldprune-diverged-step-{step}"));
    let _ = checkpoint::save(student, &Lineage::default(), &base.with_extension("ldpr"));
    let _ = state.save(&base.with_extension("state.json"));
    base
}

fn is_divergence(e: &CoreError) -> bool {
    match e {
        CoreError::Tensor(TensorError::NonFinite { .. }) => true,
        CoreError::Operator { source, .. } => is_divergence(source),
        _ => false,
    }
}

/// Runs optimizer steps until `state.step == cfg.iterations`.
pub fn train(
    student: &mut OperatorGraph,
    teacher: Option<&OperatorGraph>,
    data: &LatentDataset,
    sched: &SchedulerConfig,
    cfg: &KDConfig,
    state: &mut TrainState,
    opts: &TrainOptions,
) -> Result<()> {
    cfg.validate()?;
    sched.validate()?;
    let mut rng = state.rng();
    while state.step < cfg.iterations {
        let step = state.step;
        let mut sum: HashMap<String, Vec<f32>> = HashMap::new();
        let mut rec = LossRecord {
            step,
            task: 0.0,
            out: 0.0,
            feat: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.grad_accum {
            let (clean, cond) = data.sample(&mut rng, cfg.batch_size)?;
            let batch = noise_batch(&clean, sched, &mut rng)?;
            let tape = Tape::new();
            let terms = match kd_loss(teacher, student, &tape, &batch, &cond, cfg) {
                Ok(t) => t,
                Err(e) if is_divergence(&e) => {
                    return Err(CoreError::Diverged {
                        step,
                        dump: dump(student, state, opts, step),
                    })
                }
                Err(e) => return Err(e),
            };
            let total = terms.total.value().data()[0] as f64;
            if !total.is_finite() {
                return Err(CoreError::Diverged {
                    step,
                    dump: dump(student, state, opts, step),
                });
            }
            let k = 1.0 / cfg.grad_accum as f64;
            rec.task += k * terms.task;
            rec.out += k * terms.out;
            rec.feat += k * terms.feat;
            rec.total += k * total;
            for (name, g) in tape.backward(&terms.total)?.into_named() {
                match sum.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, g.into_vec());
                    }
                }
            }
        }
        if cfg.grad_accum > 1 {
            let k = 1.0 / cfg.grad_accum as f32;
            sum.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= k));
        }
        adam_step(student, &sum, state, cfg.lr);
        state.step += 1;
        state.loss_history.push(rec);
        state.store_rng(&rng);
        if let Some(path) = &opts.log_path {
            if let Some(d) = path.parent() {
                fs::create_dir_all(d)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        if let (Some(dir), true) = (&opts.checkpoint_dir, opts.checkpoint_every > 0) {
            if state.step % opts.checkpoint_every == 0 {
                let base = dir.join(format!("step-{}", state.step));
                checkpoint::save(student, &Lineage::default(), &base.with_extension("ldpr"))?;
                state.save(&base.with_extension("state.json"))?;
            }
        }
    }
    Ok(())
}

/// Trains the teacher on the task term alone.
pub fn train_teacher(
    graph: &mut OperatorGraph,
    data: &LatentDataset,
    sched: &SchedulerConfig,
    cfg: &KDConfig,
    opts: &TrainOptions,
) -> Result<TrainState> {
    let mut state = TrainState::new(cfg.seed);
    train(graph, None, data, sched, cfg, &mut state, opts)?;
    Ok(state)
}

/// Fine-tunes a copy of `student` against the frozen `teacher`.
pub fn finetune(
    teacher: &OperatorGraph,
    student: &OperatorGraph,
    data: &LatentDataset,
    sched: &SchedulerConfig,
    cfg: &KDConfig,
    opts: &TrainOptions,
) -> Result<(OperatorGraph, TrainState)> {
    let mut s = student.clone().with_fresh_counter();
    let mut state = TrainState::new(cfg.seed);
    train(&mut s, Some(teacher), data, sched, cfg, &mut state, opts)?;
    Ok((s, state))
}

/// Same architecture as `pruned`, with every weight re-drawn from `seed`
/// and adapters back at their initial mapping.
pub fn reinitialize(pruned: &OperatorGraph, seed: u64) -> Result<OperatorGraph> {
    let fresh = build_unet(pruned.spec(), seed)?;
    let fresh_params: HashMap<String, &Tensor> = fresh.params().collect();
    let adapters: HashMap<String, usize> = pruned
        .nodes()
        .iter()
        .filter_map(|n| match &n.edit {
            Some(Edit::Replace(a)) if a.channel_map => Some((format!("{}.{ADAPTER_WEIGHT}", n.id), a.in_sig.channels)),
            _ => None,
        })
        .collect();
    let mut out = pruned.clone().with_fresh_counter();
    for (name, p) in out.params_mut() {
        if let Some(cin) = adapters.get(&name) {
            p.data_mut().fill(1.0 / *cin as f32);
        } else {
            let f = fresh_params
                .get(&name)
                .ok_or_else(|| CoreError::InvalidSpec(format!("no fresh weights for `{name}`")))?;
            *p = (*f).clone();
        }
    }
    Ok(out)
}

/// The fine-tuning loop applied to re-initialized weights of `pruned`.
pub fn train_from_scratch(
    teacher: &OperatorGraph,
    pruned: &OperatorGraph,
    data: &LatentDataset,
    sched: &SchedulerConfig,
    cfg: &KDConfig,
    init_seed: u64,
    opts: &TrainOptions,
) -> Result<(OperatorGraph, TrainState)> {
    let scratch = reinitialize(pruned, init_seed)?;
    finetune(teacher, &scratch, data, sched, cfg, opts)
}
