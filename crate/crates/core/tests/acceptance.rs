//! Acceptance suite. Runs every criterion in sequence (latency must not share
//! the CPU with other tests) and prints one PASS/FAIL line per criterion.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ldprune_core::checkpoint::graph_hash;
use ldprune_core::data::{DatasetConfig, LatentDataset};
use ldprune_core::diffusion::{generate_latents, SchedulerConfig};
use ldprune_core::distill::{finetune, train_from_scratch, train_teacher, KDConfig, TrainOptions};
use ldprune_core::eval::{count_params, latent_frechet, measure_latency, pool, LatencyConfig};
use ldprune_core::graph::{build_unet, OperatorGraph, UNetSpec};
use ldprune_core::prune::{
    apply_selection, prune_with_scores, rank_operators, run_pruning_pass, run_scoring_pass, select_operators,
    FixedScores, LatentScorer, PruneConfig, ScoreTable,
};
use ldprune_core::score::{avg_distance, combine, latent_mean, latent_std, std_distance, Combinator, LatentSet};
use ldprune_tensor::check::op_suite;
use ldprune_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const K: usize = 10;
const SAMPLES_PER_CONDITION: usize = 16;

/// Trained teacher, dataset and the N_gen = 16 score table, built once.
struct Fixture {
    data: LatentDataset,
    teacher: OperatorGraph,
    cfg: PruneConfig,
    table: ScoreTable,
    teacher_samples: LatentSet,
}

fn prune_config(spec: &UNetSpec) -> PruneConfig {
    PruneConfig {
        k: K,
        conditions: (0..spec.num_conditions).collect(),
        n_gen: 16,
        min_cost_fraction: 0.005,
        deterministic: true,
        jobs: 1,
        ..Default::default()
    }
}

fn samples(g: &OperatorGraph, sched: &SchedulerConfig) -> LatentSet {
    let sets: Vec<LatentSet> = (0..g.spec().num_conditions)
        .map(|c| generate_latents(g, c, SAMPLES_PER_CONDITION, sched, 777).unwrap())
        .collect();
    pool(&sets).unwrap()
}

fn frechet_to(reference: &LatentSet, g: &OperatorGraph, sched: &SchedulerConfig) -> f64 {
    latent_frechet(reference, &samples(g, sched), true).unwrap().distance
}

impl Fixture {
    fn build() -> Self {
        let spec = UNetSpec::tiny();
        let sched = SchedulerConfig::default();
        let data = LatentDataset::generate(
            &spec,
            &DatasetConfig {
                samples: 1024,
                ..Default::default()
            },
        )
        .unwrap();
        let mut teacher = build_unet(&spec, 0).unwrap();
        let teacher_cfg = KDConfig {
            lr: 1e-3,
            batch_size: 32,
            iterations: 4000,
            ..Default::default()
        };
        let start = Instant::now();
        let state = train_teacher(&mut teacher, &data, &sched, &teacher_cfg, &TrainOptions::default()).unwrap();
        let h = &state.loss_history;
        let mean = |r: &[ldprune_core::distill::LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
        println!(
            "fixture: teacher trained {} steps in {:.0}s, loss {:.4} -> {:.4}",
            h.len(),
            start.elapsed().as_secs_f64(),
            mean(&h[..100]),
            mean(&h[h.len() - 100..])
        );
        let cfg = prune_config(&spec);
        let start = Instant::now();
        let table = run_scoring_pass(&teacher, &cfg, &LatentScorer, None).unwrap();
        println!(
            "fixture: scored {} candidates in {:.0}s",
            table.m,
            start.elapsed().as_secs_f64()
        );
        let teacher_samples = samples(&teacher, &sched);
        Self {
            data,
            teacher,
            cfg,
            table,
            teacher_samples,
        }
    }

    fn ranking(&self) -> Vec<String> {
        rank_operators(&self.table.scores)
    }
}

fn set(rows: &[[f32; 2]]) -> LatentSet {
    LatentSet::from_rows(0, 2, rows.iter().flatten().copied().collect()).unwrap()
}

fn scoring_oracle() -> Outcome {
    let orig = set(&[[1.0, 1.0], [3.0, 3.0]]);
    let modified = set(&[[2.0, 2.0], [2.0, 2.0]]);
    let a = avg_distance(&orig, &modified).unwrap();
    let s = std_distance(&orig, &modified).unwrap();
    let sum = combine(a, s, Combinator::Sum).unwrap();
    let r2 = 2f64.sqrt();
    ensure!(a.abs() < 1e-6, "avg_dist {a}");
    ensure!((s - r2).abs() < 1e-6, "std_dist {s}");
    ensure!((sum - r2).abs() < 1e-6, "sum {sum}");
    Ok(format!("avg_dist {a}, std_dist {s:.9}, sum {sum:.9}"))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn shift_scale_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst_shift, mut worst_std, mut worst_scale) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let n = rng.random_range(2..24);
        let d = rng.random_range(1..32);
        let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let x = LatentSet::from_rows(0, d, data).unwrap();
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let shifted = x.map(|j, e| e + v[j]);
        // The shift actually applied after f32 rounding is still v up to 1 ulp.
        let vn = norm(&v.iter().map(|&e| e as f64).collect::<Vec<_>>());
        worst_shift = worst_shift.max((avg_distance(&x, &shifted).unwrap() - vn).abs());
        worst_std = worst_std.max(std_distance(&x, &shifted).unwrap());

        let alpha = rng.random_range(0.0f32..3.0);
        let scaled = x.map(|_, e| e * alpha);
        let k = (1.0 - alpha as f64).abs();
        let (mn, sn) = (norm(&latent_mean(&x)), norm(&latent_std(&x)));
        worst_scale = worst_scale
            .max((avg_distance(&x, &scaled).unwrap() - k * mn).abs())
            .max((std_distance(&x, &scaled).unwrap() - k * sn).abs());
    }
    ensure!(worst_shift < 1e-5, "shift avg_dist error {worst_shift:e}");
    ensure!(worst_std < 1e-6, "shift std_dist {worst_std:e}");
    ensure!(worst_scale < 1e-5, "scale error {worst_scale:e}");
    Ok(format!(
        "max errors: shift {worst_shift:.1e}, shift std {worst_std:.1e}, scale {worst_scale:.1e}"
    ))
}

fn restoration() -> Outcome {
    let spec = UNetSpec::default();
    let mut g = build_unet(&spec, 0).unwrap();
    let mut calibrated = g.clone();
    calibrated.calibrate_costs(true).unwrap();
    let candidates = calibrated.enumerate_candidates(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(spec.latent_shape(2), 1.0, &mut rng);
    let (t, c) = ([37.0, 612.0], [1, 6]);
    let hash = graph_hash(&g).unwrap();
    let out = g.predict(&x, &t, &c).unwrap();
    for id in &candidates {
        let plan = g.apply(id).unwrap();
        g.predict(&x, &t, &c).map_err(|e| format!("{id} modified: {e}"))?;
        g.restore(plan).unwrap();
        ensure!(graph_hash(&g).unwrap() == hash, "hash changed after `{id}`");
        ensure!(
            g.predict(&x, &t, &c).unwrap().bit_eq(&out),
            "forward changed after `{id}`"
        );
    }
    Ok(format!(
        "{} candidates of the default U-Net restored bit-exactly",
        candidates.len()
    ))
}

fn selection_oracle() -> Outcome {
    let spec = UNetSpec::tiny();
    let g = build_unet(&spec, 0).unwrap();
    let cfg = PruneConfig {
        k: K,
        conditions: vec![0, 1],
        deterministic: true,
        ..Default::default()
    };
    let mut calibrated = g.clone();
    calibrated.calibrate_costs(true).unwrap();
    let candidates = calibrated.enumerate_candidates(0.0);
    // Leaves get dyadic scores with many ties; composites score high so the
    // k lowest never overlap.
    let mut injected = HashMap::new();
    let mut expected_totals = Vec::new();
    for (i, id) in candidates.iter().enumerate() {
        let leaf = g.node(id).unwrap().children.is_empty();
        let base = if leaf {
            ((i * 7) % 5) as f64 * 0.25
        } else {
            64.0 + i as f64
        };
        let pairs = vec![(base * 0.5, base * 0.25), (base * 0.125, base * 0.125)];
        let total: f64 = pairs.iter().map(|(a, s)| a + s).sum();
        injected.insert(id.clone(), pairs);
        expected_totals.push((total, id.clone()));
    }
    expected_totals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    let expected: BTreeSet<String> = expected_totals.iter().take(K).map(|(_, id)| id.clone()).collect();
    let ties = expected_totals
        .iter()
        .filter(|(t, _)| *t == expected_totals[0].0)
        .count();

    let (pruned, report) = run_pruning_pass(&g, &cfg, &FixedScores(injected), None).unwrap();
    let chosen: BTreeSet<String> = report.chosen.iter().cloned().collect();
    ensure!(chosen == expected, "chose {chosen:?}, expected {expected:?}");
    let committed: BTreeSet<String> = pruned.committed_edits().iter().cloned().collect();
    ensure!(committed == expected, "graph committed {committed:?}");
    for e in &report.entries {
        let sum = e.per_condition[0].combined + e.per_condition[1].combined;
        ensure!(e.total == sum, "`{}` total {} != {}", e.op_id, e.total, sum);
    }
    Ok(format!(
        "k = {K} lowest chosen from a {ties}-way tie; totals exact over {} operators",
        report.entries.len()
    ))
}

fn gradient_check() -> Outcome {
    let results = op_suite(1e-3, 17).map_err(|e| e.to_string())?;
    let (worst, err) = results
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let failing: Vec<_> = results
        .iter()
        .filter(|(_, r)| !(r.max_rel_error < 1e-3))
        .map(|(n, _)| *n)
        .collect();
    ensure!(failing.is_empty(), "ops above 1e-3: {failing:?}");
    Ok(format!("{} ops, worst {worst} at {err:.2e}", results.len()))
}

fn weight_preservation(f: &Fixture) -> Outcome {
    let sched = SchedulerConfig::default();
    let chosen = select_operators(&f.ranking(), K).unwrap();
    let pruned = apply_selection(&f.teacher, &chosen).unwrap();
    let kd = KDConfig {
        iterations: 500,
        seed: 5,
        ..Default::default()
    };
    let opts = TrainOptions::default();
    let (preserved, _) = finetune(&f.teacher, &pruned, &f.data, &sched, &kd, &opts).unwrap();
    let (scratch, _) = train_from_scratch(&f.teacher, &pruned, &f.data, &sched, &kd, 123, &opts).unwrap();
    let fp = frechet_to(&f.teacher_samples, &preserved, &sched);
    let fs = frechet_to(&f.teacher_samples, &scratch, &sched);
    ensure!(fp < fs, "preserved {fp:.4} not below scratch {fs:.4}");
    Ok(format!("Fréchet to teacher: preserved {fp:.4} < scratch {fs:.4}"))
}

fn score_informativeness(f: &Fixture) -> Outcome {
    let sched = SchedulerConfig::default();
    let ranking = f.ranking();
    let low = select_operators(&ranking, K).unwrap();
    let reversed: Vec<String> = ranking.iter().rev().cloned().collect();
    let high = select_operators(&reversed, K).unwrap();
    let fl = frechet_to(&f.teacher_samples, &apply_selection(&f.teacher, &low).unwrap(), &sched);
    let fh = frechet_to(&f.teacher_samples, &apply_selection(&f.teacher, &high).unwrap(), &sched);
    ensure!(fl < fh, "lowest-scored {fl:.4} not below highest-scored {fh:.4}");
    Ok(format!(
        "Fréchet to teacher: lowest-scored {fl:.4} < highest-scored {fh:.3e}"
    ))
}

fn efficiency(f: &Fixture) -> Outcome {
    let sched = SchedulerConfig::default();
    let (pruned, _) = prune_with_scores(&f.teacher, &f.table, &f.cfg).unwrap();
    let lc = LatencyConfig::default();
    let base = measure_latency(&f.teacher, &sched, &lc).unwrap();
    let lat = measure_latency(&pruned, &sched, &lc).unwrap();
    let (pt, pp) = (count_params(&f.teacher), count_params(&pruned));
    ensure!(
        lat.n_warmup == 20 && lat.n_measured == 100,
        "protocol {}/{}",
        lat.n_warmup,
        lat.n_measured
    );
    ensure!(
        lat.mean_ms < base.mean_ms,
        "pruned {:.3} ms not below teacher {:.3} ms",
        lat.mean_ms,
        base.mean_ms
    );
    ensure!(pp < pt, "params {pp} not below {pt}");
    Ok(format!(
        "{:.3}±{:.3} ms vs teacher {:.3}±{:.3} ms ({:.1}% faster), params {pp} < {pt}",
        lat.mean_ms,
        lat.std_ms,
        base.mean_ms,
        base.std_ms,
        lat.speedup_vs(&base)
    ))
}

fn combinator_ablation(f: &Fixture) -> Outcome {
    let ids: BTreeSet<&str> = f.table.scores.iter().map(|s| s.op_id.as_str()).collect();
    let mut totals: HashMap<Combinator, HashMap<String, f64>> = HashMap::new();
    for c in Combinator::ALL {
        let cfg = PruneConfig {
            combinator: c,
            ..f.cfg.clone()
        };
        let (_, report) = prune_with_scores(&f.teacher, &f.table, &cfg).unwrap();
        let ranking = report.ranking();
        let as_set: BTreeSet<&str> = ranking.iter().map(String::as_str).collect();
        ensure!(
            ranking.len() == ids.len() && as_set == ids,
            "{c} ranking is not a permutation"
        );
        let mut ranks: Vec<usize> = report.entries.iter().map(|e| e.rank).collect();
        ranks.sort_unstable();
        ensure!(ranks == (1..=ids.len()).collect::<Vec<_>>(), "{c} ranks are not 1..m");
        totals.insert(c, report.entries.iter().map(|e| (e.op_id.clone(), e.total)).collect());
    }
    for id in &ids {
        let s = totals[&Combinator::Sum][*id];
        let a = totals[&Combinator::AvgOnly][*id];
        let d = totals[&Combinator::StdOnly][*id];
        ensure!(s >= a.max(d), "`{id}`: sum {s} < max({a}, {d})");
    }
    Ok(format!(
        "4 complete rankings of {} operators; sum >= max(avg, std) everywhere",
        ids.len()
    ))
}

fn spearman(a: &[String], b: &[String]) -> f64 {
    let pos: HashMap<&str, usize> = b.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let n = a.len() as f64;
    let d2: f64 = a
        .iter()
        .enumerate()
        .map(|(i, id)| (i as f64 - pos[id.as_str()] as f64).powi(2))
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn rank_stability(f: &Fixture) -> Outcome {
    let cfg = PruneConfig {
        n_gen: 32,
        ..f.cfg.clone()
    };
    let table = run_scoring_pass(&f.teacher, &cfg, &LatentScorer, None).unwrap();
    let rho = spearman(&f.ranking(), &rank_operators(&table.scores));
    ensure!(rho > 0.8, "Spearman {rho:.4}");
    Ok(format!(
        "Spearman(N_gen 16, N_gen 32) = {rho:.4} over {} operators",
        table.m
    ))
}

fn complexity(f: &Fixture) -> Outcome {
    let t = &f.table;
    let expected = (f.cfg.conditions.len() * (t.m + 1) * f.cfg.n_gen * t.n) as u64;
    ensure!(
        t.forward_calls == expected,
        "counted {} forwards, expected {expected}",
        t.forward_calls
    );
    Ok(format!(
        "{} forwards = {} conditions x ({} + 1) x {} x {} steps",
        t.forward_calls,
        f.cfg.conditions.len(),
        t.m,
        f.cfg.n_gen,
        t.n
    ))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {detail}"),
        Err(detail) => println!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {detail}"),
    }
    result.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(1, "scoring oracle", scoring_oracle);
    ok &= run(2, "shift/scale laws", shift_scale_laws);
    ok &= run(3, "restoration bit-exactness", restoration);
    ok &= run(4, "selection oracle", selection_oracle);
    ok &= run(5, "gradient correctness", gradient_check);
    let fixture = Fixture::build();
    ok &= run(6, "weight preservation", || weight_preservation(&fixture));
    ok &= run(7, "score informativeness", || score_informativeness(&fixture));
    ok &= run(8, "efficiency protocol", || efficiency(&fixture));
    ok &= run(9, "combinator ablation", || combinator_ablation(&fixture));
    ok &= run(10, "rank stability", || rank_stability(&fixture));
    ok &= run(11, "complexity accounting", || complexity(&fixture));
    if !ok {
        eprintln!("acceptance: at least one criterion failed");
        std::process::exit(1);
    }
    println!("acceptance: all 11 criteria passed");
}
