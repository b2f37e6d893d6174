//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ldprune_core::data::LatentDataset;
use ldprune_core::diffusion::generate_latents;
use ldprune_core::distill::{self, TrainOptions, TrainState};
use ldprune_core::eval::{self, EvalSummary, LatencyResult};
use ldprune_core::graph::{build_unet, OperatorGraph};
use ldprune_core::prune::{self, LatentScorer, ScoreCache, ScoreReport, ScoreTable};
use ldprune_core::score::LatentSet;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::run::{find_artifact, load_checked, RunDir};
use crate::CliError;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub force: bool,
    pub run: RunDir,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self, CliError> {
        let run = RunDir::open(&cfg)?;
        log::info!("run directory {}", run.root.display());
        Ok(Self { cfg, force, run })
    }

    fn stage_hash(&self, name: &str) -> Option<String> {
        Some(match name {
            "teacher" => self.cfg.teacher_hash(),
            "pruned" => self.cfg.prune_hash(),
            "finetuned" => self.cfg.finetune_hash(),
            "scratch" => self.cfg.scratch_hash(),
            _ => return None,
        })
    }

    fn locate(&self, name: &str) -> Option<PathBuf> {
        let hash = self.stage_hash(name)?;
        find_artifact(&self.cfg.output_dir, &self.run.root, name, &hash)
    }

    /// Loads `name` from `explicit` (hash-checked) or from the run manifests.
    fn stage_model(&self, name: &str, explicit: Option<&Path>, producer: &str) -> Result<OperatorGraph, CliError> {
        let hash = self.stage_hash(name).expect("known stage");
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => self.locate(name).ok_or_else(|| {
                CliError::Runtime(format!(
                    "no {name} checkpoint for this config; run `ldprune {producer}` first"
                ))
            })?,
        };
        log::info!("{name}: {}", path.display());
        load_checked(&path, &hash, self.force)
    }

    pub fn teacher(&self, explicit: Option<&Path>) -> Result<OperatorGraph, CliError> {
        self.stage_model("teacher", explicit, "train-teacher")
    }

    fn dataset(&self) -> Result<LatentDataset, CliError> {
        Ok(LatentDataset::generate(&self.cfg.unet, &self.cfg.data)?)
    }

    fn cache(&self) -> ScoreCache {
        ScoreCache::from_env().unwrap_or_else(|| ScoreCache::new(self.cfg.output_dir.join("cache")))
    }

    /// Fresh log file plus the configured checkpoint cadence.
    fn train_options(&self, stem: &str) -> Result<TrainOptions, CliError> {
        let log_path = self.run.logs().join(format!("{stem}.jsonl"));
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        Ok(TrainOptions {
            log_path: Some(log_path),
            checkpoint_dir: (self.cfg.checkpoint_every > 0).then(|| self.run.checkpoints().join(stem)),
            checkpoint_every: self.cfg.checkpoint_every,
            dump_dir: Some(self.run.logs()),
        })
    }

    fn save_state(&mut self, stem: &str, state: &TrainState) -> Result<(), CliError> {
        state.save(&self.run.logs().join(format!("{stem}.state.json")))?;
        Ok(())
    }

    /// Pooled generations over every condition at the evaluation seed.
    fn samples(&self, graph: &OperatorGraph) -> Result<LatentSet, CliError> {
        let sets = (0..self.cfg.unet.num_conditions)
            .map(|c| {
                generate_latents(
                    graph,
                    c,
                    self.cfg.eval.samples_per_condition,
                    &self.cfg.scheduler,
                    self.cfg.eval.sample_seed,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(eval::pool(&sets)?)
    }

    fn latency(&self, graph: &OperatorGraph) -> Result<Option<LatencyResult>, CliError> {
        if !self.cfg.eval.latency {
            return Ok(None);
        }
        Ok(Some(eval::measure_latency(
            graph,
            &self.cfg.scheduler,
            &self.cfg.latency_config(),
        )?))
    }

    fn scores(&self, teacher: &OperatorGraph) -> Result<ScoreTable, CliError> {
        let cache = self.cache();
        Ok(prune::run_scoring_pass(
            teacher,
            &self.cfg.prune_config(),
            &LatentScorer,
            Some(&cache),
        )?)
    }
}

pub fn train_teacher(ctx: &mut Ctx) -> Result<(), CliError> {
    let hash = ctx.cfg.teacher_hash();
    if !ctx.force {
        if let Some(p) = find_artifact(&ctx.cfg.output_dir, &ctx.run.root, "teacher", &hash) {
            if p.starts_with(&ctx.run.root) {
                println!("teacher up to date: {}", p.display());
                return Ok(());
            }
        }
    }
    let mut graph = build_unet(&ctx.cfg.unet, ctx.cfg.seed)?;
    let data = ctx.dataset()?;
    let opts = ctx.train_options("teacher")?;
    let state = distill::train_teacher(&mut graph, &data, &ctx.cfg.scheduler, &ctx.cfg.teacher_config(), &opts)?;
    ctx.save_state("teacher", &state)?;
    let path = ctx.run.save_model("teacher", &graph, &hash, None)?;
    if let Some(last) = state.loss_history.last() {
        println!("teacher: {} steps, final loss {:.5}", state.step, last.total);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn score_csv(table: &ScoreTable) -> String {
    let mut out = String::from("op_id,condition,avg_dist,std_dist,combined,total\n");
    for s in &table.scores {
        for c in &s.per_condition {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.op_id, c.condition, c.avg_dist, c.std_dist, c.combined, s.total
            ));
        }
    }
    out
}

pub fn score(ctx: &mut Ctx, teacher_path: Option<&Path>) -> Result<(), CliError> {
    let teacher = ctx.teacher(teacher_path)?;
    let table = ctx.scores(&teacher)?;
    let stage = ctx.cfg.prune_hash();
    ctx.run
        .write_json("reports/scores.json", &table, Some(("scores", &stage)))?;
    let path = ctx.run.write_csv("reports/scores.csv", &score_csv(&table), None)?;
    println!(
        "scored {} operators ({} forward evaluations); wrote {}",
        table.m,
        table.forward_calls,
        path.display()
    );
    Ok(())
}

pub fn prune(ctx: &mut Ctx, teacher_path: Option<&Path>) -> Result<(), CliError> {
    let teacher = ctx.teacher(teacher_path)?;
    let table = ctx.scores(&teacher)?;
    let (pruned, report) = prune::prune_with_scores(&teacher, &table, &ctx.cfg.prune_config())?;
    let stage = ctx.cfg.prune_hash();
    let path = ctx.run.save_model("pruned", &pruned, &stage, Some(&teacher))?;
    ctx.run
        .write_json("reports/prune.json", &report, Some(("prune_report", &stage)))?;
    ctx.run.write_csv("reports/prune.csv", &report.to_csv(), None)?;
    println!(
        "pruned {} of {} operators: {}",
        report.k,
        report.m,
        report.chosen.join(", ")
    );
    println!(
        "params {} -> {}; wrote {}",
        eval::count_params(&teacher),
        eval::count_params(&pruned),
        path.display()
    );
    Ok(())
}

pub fn finetune(
    ctx: &mut Ctx,
    scratch: bool,
    teacher_path: Option<&Path>,
    pruned_path: Option<&Path>,
) -> Result<(), CliError> {
    let teacher = ctx.teacher(teacher_path)?;
    let pruned = ctx.stage_model("pruned", pruned_path, "prune")?;
    let data = ctx.dataset()?;
    let kd = ctx.cfg.kd_config();
    let (name, stage) = if scratch {
        ("scratch", ctx.cfg.scratch_hash())
    } else {
        ("finetuned", ctx.cfg.finetune_hash())
    };
    let opts = ctx.train_options(name)?;
    let (student, state) = if scratch {
        distill::train_from_scratch(
            &teacher,
            &pruned,
            &data,
            &ctx.cfg.scheduler,
            &kd,
            ctx.cfg.scratch_seed,
            &opts,
        )?
    } else {
        distill::finetune(&teacher, &pruned, &data, &ctx.cfg.scheduler, &kd, &opts)?
    };
    ctx.save_state(name, &state)?;
    let path = ctx.run.save_model(name, &student, &stage, Some(&pruned))?;
    if let Some(last) = state.loss_history.last() {
        println!(
            "{name}: {} steps, final loss {:.5} (task {:.5}, out {:.5}, feat {:.5})",
            state.step, last.total, last.task, last.out, last.feat
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    model: String,
    baseline: String,
    #[serde(flatten)]
    summary: EvalSummary,
}

fn label(spec: &str) -> String {
    Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string())
}

impl Ctx {
    /// A stage name (`teacher`, `pruned`, `finetuned`, `scratch`) or a path.
    fn model_arg(&self, spec: &str) -> Result<OperatorGraph, CliError> {
        if let Some(p) = self.locate(spec) {
            return load_checked(&p, &self.stage_hash(spec).expect("located"), self.force);
        }
        if self.stage_hash(spec).is_some() && !Path::new(spec).exists() {
            return Err(CliError::Runtime(format!("no {spec} checkpoint for this config")));
        }
        Ok(ldprune_core::checkpoint::load(Path::new(spec))
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .0)
    }
}

pub fn evaluate(ctx: &mut Ctx, model: &str, baseline: &str) -> Result<(), CliError> {
    let m = ctx.model_arg(model)?;
    let b = ctx.model_arg(baseline)?;
    let frechet = eval::latent_frechet(&ctx.samples(&m)?, &ctx.samples(&b)?, ctx.cfg.eval.diag)?;
    let lat_b = ctx.latency(&b)?;
    let lat_m = ctx.latency(&m)?;
    let speedup = match (&lat_m, &lat_b) {
        (Some(m), Some(b)) => Some(m.speedup_vs(b)),
        _ => None,
    };
    let out = EvalOutput {
        model: model.to_string(),
        baseline: baseline.to_string(),
        summary: EvalSummary {
            frechet: Some(frechet),
            params: eval::count_params(&m),
            latency: lat_m,
            speedup_vs_baseline: speedup,
        },
    };
    let rel = format!("eval/{}-vs-{}.json", label(model), label(baseline));
    let path = ctx.run.write_json(&rel, &out, None)?;
    println!("frechet {:.4}  params {}", frechet.distance, out.summary.params);
    if let (Some(l), Some(s)) = (&out.summary.latency, speedup) {
        println!("latency {:.3} ± {:.3} ms  speedup {:.1}%", l.mean_ms, l.std_ms, s);
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub params: usize,
    pub speedup_pct: Option<f64>,
    pub frechet_before_ft: f64,
    pub frechet_after_ft: f64,
}

pub fn sweep(ctx: &mut Ctx, k_values: &[usize], teacher_path: Option<&Path>) -> Result<(), CliError> {
    let teacher = ctx.teacher(teacher_path)?;
    let reference = ctx.samples(&teacher)?;
    let base_latency = ctx.latency(&teacher)?;
    let data = ctx.dataset()?;
    let cfg = ctx.cfg.prune_config();
    let cache = ctx.cache();
    let pruned = prune::sweep(&teacher, &cfg, k_values, &LatentScorer, Some(&cache))?;
    let diag = ctx.cfg.eval.diag;
    let mut rows = Vec::new();
    for (k, graph, _) in pruned {
        let before = eval::latent_frechet(&ctx.samples(&graph)?, &reference, diag)?.distance;
        let opts = ctx.train_options(&format!("sweep-k{k}"))?;
        let (tuned, _) = distill::finetune(&teacher, &graph, &data, &ctx.cfg.scheduler, &ctx.cfg.kd_config(), &opts)?;
        let after = eval::latent_frechet(&ctx.samples(&tuned)?, &reference, diag)?.distance;
        let speedup = match (&base_latency, ctx.latency(&tuned)?) {
            (Some(b), Some(m)) => Some(m.speedup_vs(b)),
            _ => None,
        };
        let row = SweepRow {
            k,
            params: eval::count_params(&tuned),
            speedup_pct: speedup,
            frechet_before_ft: before,
            frechet_after_ft: after,
        };
        println!(
            "k={k}: params {} speedup {} frechet {before:.4} -> {after:.4}",
            row.params,
            speedup.map_or("n/a".to_string(), |s| format!("{s:.1}%"))
        );
        rows.push(row);
    }
    let mut csv = String::from("k,params,speedup_pct,frechet_before_ft,frechet_after_ft\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            r.params,
            r.speedup_pct.map_or(String::new(), |s| s.to_string()),
            r.frechet_before_ft,
            r.frechet_after_ft
        ));
    }
    let path = ctx.run.write_csv("reports/sweep.csv", &csv, None)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// One row per candidate, ranked within its group.
fn grouped_csv(report: &ScoreReport, group_of: impl Fn(&prune::ReportEntry) -> String) -> String {
    let mut groups: BTreeMap<String, Vec<&prune::ReportEntry>> = BTreeMap::new();
    for e in &report.entries {
        groups.entry(group_of(e)).or_default().push(e);
    }
    let mut out = String::from("group,op_id,group_rank,global_rank,total,chosen\n");
    for (g, mut entries) in groups {
        entries.sort_by_key(|e| e.rank);
        for (i, e) in entries.iter().enumerate() {
            out.push_str(&format!(
                "{g},{},{},{},{},{}\n",
                e.op_id,
                i + 1,
                e.rank,
                e.total,
                e.chosen
            ));
        }
    }
    out
}

pub fn report(ctx: &mut Ctx) -> Result<(), CliError> {
    let path = find_artifact(
        &ctx.cfg.output_dir,
        &ctx.run.root,
        "prune_report",
        &ctx.cfg.prune_hash(),
    )
    .ok_or_else(|| CliError::Runtime("no prune report for this config; run `ldprune prune` first".into()))?;
    let report = ScoreReport::from_json(&fs::read_to_string(&path)?)?;
    let by_block = grouped_csv(&report, |e| e.block.clone());
    let by_kind = grouped_csv(&report, |e| e.kind.to_string());
    ctx.run.write_csv("reports/rank_by_block.csv", &by_block, None)?;
    let out = ctx.run.write_csv("reports/rank_by_kind.csv", &by_kind, None)?;
    let mut kinds: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for e in &report.entries {
        let k = kinds.entry(e.kind.to_string()).or_default();
        k.0 += 1;
        k.1 += e.chosen as usize;
    }
    println!("{:<22} {:>10} {:>8}", "kind", "candidates", "chosen");
    for (kind, (n, c)) in kinds {
        println!("{kind:<22} {n:>10} {c:>8}");
    }
    println!("wrote {}", out.parent().unwrap_or(&out).display());
    Ok(())
}
