//! Scoring pass, k-lowest selection, and permanent application.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ldprune_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{graph_hash, sha256_hex};
use crate::diffusion::SchedulerConfig;
use crate::error::{CoreError, Result};
use crate::graph::{is_ancestor, NodeKind, OperatorGraph};
use crate::modify::{plan_edit, Edit};
use crate::score::{original_sets, score_operator, Combinator, ConditionScore, OperatorScore, ScoringContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub k: usize,
    pub conditions: Vec<usize>,
    pub n_gen: usize,
    pub combinator: Combinator,
    pub min_cost_fraction: f64,
    pub base_seed: u64,
    pub scheduler: SchedulerConfig,
    /// Scoring workers; 0 means one per available core.
    pub jobs: usize,
    /// Use the analytic cost model instead of wall-clock calibration.
    pub deterministic: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k: 10,
            conditions: (0..8).collect(),
            n_gen: 16,
            combinator: Combinator::Sum,
            min_cost_fraction: 0.0,
            base_seed: 0,
            scheduler: SchedulerConfig::default(),
            jobs: 0,
            deterministic: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        if self.n_gen == 0 {
            return bad("n_gen must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.min_cost_fraction) {
            return bad(format!("min_cost_fraction {} outside [0, 1)", self.min_cost_fraction));
        }
        if self.n_gen == 1 {
            log::warn!("n_gen = 1: std distances are all zero, scores reduce to mean distance");
        }
        self.scheduler.validate()
    }

    /// Hash of everything that influences raw scores (not `k`, not the
    /// combinator, not `jobs`).
    pub fn scoring_hash(&self) -> String {
        let key = serde_json::json!({
            "conditions": self.conditions,
            "n_gen": self.n_gen,
            "min_cost_fraction": self.min_cost_fraction,
            "base_seed": self.base_seed,
            "scheduler": self.scheduler,
            "deterministic": self.deterministic,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    fn context(&self) -> ScoringContext<'_> {
        ScoringContext {
            scheduler: &self.scheduler,
            n_gen: self.n_gen,
            base_seed: self.base_seed,
            combinator: self.combinator,
        }
    }
}

/// Raw scores of one scoring pass, reusable for any `k` and combinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: Vec<OperatorScore>,
    /// Per-operator calibrated cost, for the report.
    pub est_cost: BTreeMap<String, f64>,
    /// U-Net evaluations per generated latent.
    pub n: usize,
    /// Number of candidates.
    pub m: usize,
    /// Forward evaluations spent by the pass that produced the table.
    pub forward_calls: u64,
}

impl ScoreTable {
    pub fn recombined(&self, c: Combinator) -> Result<Vec<OperatorScore>> {
        self.scores.iter().map(|s| s.recombine(c)).collect()
    }
}

/// Produces one score per candidate, in candidate order.
pub trait Scorer: Sync {
    fn score(&self, graph: &OperatorGraph, candidates: &[String], cfg: &PruneConfig) -> Result<Vec<OperatorScore>>;
}

/// Scores by latent divergence (the real pipeline).
#[derive(Debug, Clone, Copy, Default)]
pub struct LatentScorer;

impl Scorer for LatentScorer {
    fn score(&self, graph: &OperatorGraph, candidates: &[String], cfg: &PruneConfig) -> Result<Vec<OperatorScore>> {
        let ctx = cfg.context();
        let orig = original_sets(graph, &cfg.conditions, &ctx)?;
        let work = || {
            candidates
                .par_iter()
                .map_init(|| graph.clone(), |g, id| score_operator(g, id, &orig, &ctx))
                .collect::<Result<Vec<_>>>()
        };
        let jobs = if cfg.jobs == 0 {
            rayon::current_num_threads()
        } else {
            cfg.jobs
        };
        if jobs == 1 {
            let mut g = graph.clone();
            return candidates
                .iter()
                .map(|id| score_operator(&mut g, id, &orig, &ctx))
                .collect();
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CoreError::InvalidConfig(format!("worker pool: {e}")))?
            .install(work)
    }
}

/// Injected per-condition `(avg_dist, std_dist)` pairs; missing operators fail.
#[derive(Debug, Clone, Default)]
pub struct FixedScores(pub HashMap<String, Vec<(f64, f64)>>);

impl Scorer for FixedScores {
    fn score(&self, _graph: &OperatorGraph, candidates: &[String], cfg: &PruneConfig) -> Result<Vec<OperatorScore>> {
        candidates
            .iter()
            .map(|id| {
                let pairs = self
                    .0
                    .get(id)
                    .ok_or_else(|| CoreError::InvalidConfig(format!("no injected score for `{id}`")))?;
                if pairs.len() != cfg.conditions.len() {
                    return Err(CoreError::InvalidConfig(format!(
                        "`{id}` has {} condition scores",
                        pairs.len()
                    )));
                }
                let per = cfg
                    .conditions
                    .iter()
                    .zip(pairs)
                    .map(|(&c, &(a, s))| ConditionScore::new(c, a, s, cfg.combinator))
                    .collect::<Result<Vec<_>>>()?;
                Ok(OperatorScore::from_conditions(id.clone(), per))
            })
            .collect()
    }
}

/// Disk cache of score tables keyed by (graph hash, scoring hash).
#[derive(Debug, Clone)]
pub struct ScoreCache {
    pub dir: PathBuf,
}

impl ScoreCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$LDPRUNE_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os("LDPRUNE_CACHE_DIR").map(Self::new)
    }

    fn path(&self, graph_hash: &str, cfg: &PruneConfig) -> PathBuf {
        let key = sha256_hex(format!("{graph_hash}:{}", cfg.scoring_hash()).as_bytes());
        self.dir.join(format!("scores-{key}.json"))
    }

    pub fn load(&self, graph_hash: &str, cfg: &PruneConfig) -> Option<ScoreTable> {
        let bytes = fs::read(self.path(graph_hash, cfg)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn store(&self, graph_hash: &str, cfg: &PruneConfig, table: &ScoreTable) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path(graph_hash, cfg);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(table)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Calibrated copy of `graph` and its candidates.
pub fn candidates_for(graph: &OperatorGraph, cfg: &PruneConfig) -> Result<(OperatorGraph, Vec<String>)> {
    let mut g = graph.clone();
    g.calibrate_costs(cfg.deterministic)?;
    let c = g.enumerate_candidates(cfg.min_cost_fraction);
    if c.is_empty() {
        return Err(CoreError::InvalidConfig(
            "no candidate operators pass the cost filter".into(),
        ));
    }
    Ok((g, c))
}

/// Scores every candidate once (or loads the table from `cache`).
pub fn run_scoring_pass(
    graph: &OperatorGraph,
    cfg: &PruneConfig,
    scorer: &dyn Scorer,
    cache: Option<&ScoreCache>,
) -> Result<ScoreTable> {
    cfg.validate()?;
    graph.infer_shapes()?;
    let hash = match cache {
        Some(_) => Some(graph_hash(graph)?),
        None => None,
    };
    if let (Some(c), Some(h)) = (cache, &hash) {
        if let Some(t) = c.load(h, cfg) {
            log::info!("score cache hit ({} operators)", t.m);
            return Ok(t);
        }
    }
    let (calibrated, candidates) = candidates_for(graph, cfg)?;
    let before = graph.counter().get();
    let scores = scorer.score(graph, &candidates, cfg)?;
    let table = ScoreTable {
        est_cost: candidates
            .iter()
            .map(|id| (id.clone(), calibrated.node(id).map(|n| n.est_cost).unwrap_or(0.0)))
            .collect(),
        m: candidates.len(),
        n: cfg.scheduler.num_inference_steps,
        forward_calls: graph.counter().get() - before,
        scores,
    };
    if let (Some(c), Some(h)) = (cache, &hash) {
        c.store(h, cfg, &table)?;
    }
    Ok(table)
}

/// Ascending by total, ties broken by id.
pub fn rank_operators(scores: &[OperatorScore]) -> Vec<String> {
    let mut v: Vec<&OperatorScore> = scores.iter().collect();
    v.sort_by(|a, b| a.total.total_cmp(&b.total).then_with(|| a.op_id.cmp(&b.op_id)));
    v.into_iter().map(|s| s.op_id.clone()).collect()
}

/// Walks `ranking` and picks `k` pairwise non-overlapping operators. A
/// candidate inside an already chosen operator is skipped; a candidate
/// containing chosen operators replaces them.
pub fn select_operators(ranking: &[String], k: usize) -> Result<Vec<String>> {
    let mut chosen: Vec<String> = Vec::new();
    for id in ranking {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().any(|c| is_ancestor(c, id)) {
            continue;
        }
        chosen.retain(|c| !is_ancestor(id, c));
        chosen.push(id.clone());
    }
    if chosen.len() < k {
        return Err(CoreError::InvalidConfig(format!(
            "only {} non-overlapping operators available for k = {k}",
            chosen.len()
        )));
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub op_id: String,
    pub kind: NodeKind,
    pub block: String,
    pub per_condition: Vec<ConditionScore>,
    pub total: f64,
    /// 1-based position in the ascending ranking.
    pub rank: usize,
    pub chosen: bool,
    pub action: Edit,
    pub params_saved: i64,
    pub est_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub config: PruneConfig,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub forward_calls: u64,
    pub chosen: Vec<String>,
    pub entries: Vec<ReportEntry>,
}

impl ScoreReport {
    pub fn ranking(&self) -> Vec<String> {
        let mut e: Vec<&ReportEntry> = self.entries.iter().collect();
        e.sort_by_key(|e| e.rank);
        e.into_iter().map(|e| e.op_id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.op_id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `op_id,total,rank,block,kind`, one row per candidate in rank order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("op_id,total,rank,block,kind\n");
        let mut e: Vec<&ReportEntry> = self.entries.iter().collect();
        e.sort_by_key(|e| e.rank);
        for e in e {
            out.push_str(&format!("{},{},{},{},{}\n", e.op_id, e.total, e.rank, e.block, e.kind));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

fn subtree_params(graph: &OperatorGraph, id: &str) -> usize {
    graph
        .nodes()
        .iter()
        .filter(|n| n.id == id || is_ancestor(id, &n.id))
        .map(|n| n.param_count())
        .sum()
}

/// Permanently applies the given operators to a copy of `graph`, then checks
/// shapes and runs one smoke forward.
pub fn apply_selection(graph: &OperatorGraph, chosen: &[String]) -> Result<OperatorGraph> {
    let mut pruned = graph.clone().with_fresh_counter();
    for id in chosen {
        pruned.modify(id).map_err(|e| e.in_operator(id.as_str()))?;
    }
    pruned.infer_shapes()?;
    let x = Tensor::zeros(pruned.spec().latent_shape(1));
    let smoke = pruned.predict(&x, &[0.0], &[0])?;
    if !smoke.is_finite() {
        return Err(CoreError::Tensor(ldprune_tensor::TensorError::NonFinite {
            op: "pruned forward",
        }));
    }
    pruned.counter().reset();
    Ok(pruned)
}

/// Selects and permanently applies `cfg.k` operators using `table`.
pub fn prune_with_scores(
    graph: &OperatorGraph,
    table: &ScoreTable,
    cfg: &PruneConfig,
) -> Result<(OperatorGraph, ScoreReport)> {
    let scores = table.recombined(cfg.combinator)?;
    if cfg.k > scores.len() {
        return Err(CoreError::InvalidConfig(format!(
            "k = {} exceeds {} candidates",
            cfg.k,
            scores.len()
        )));
    }
    let ranking = rank_operators(&scores);
    let chosen = select_operators(&ranking, cfg.k)?;
    let rank_of: HashMap<&str, usize> = ranking.iter().enumerate().map(|(i, id)| (id.as_str(), i + 1)).collect();

    let mut entries = Vec::with_capacity(scores.len());
    for s in &scores {
        let node = graph.node(&s.op_id)?;
        let action = plan_edit(node)?;
        let adapter = match &action {
            Edit::Replace(a) => a.param_count(),
            Edit::Remove => 0,
        };
        entries.push(ReportEntry {
            op_id: s.op_id.clone(),
            kind: node.kind(),
            block: node.block(),
            per_condition: s.per_condition.clone(),
            total: s.total,
            rank: rank_of[s.op_id.as_str()],
            chosen: chosen.contains(&s.op_id),
            action,
            params_saved: subtree_params(graph, &s.op_id) as i64 - adapter as i64,
            est_cost: table.est_cost.get(&s.op_id).copied().unwrap_or(0.0),
        });
    }

    let pruned = apply_selection(graph, &chosen)?;

    let report = ScoreReport {
        config: cfg.clone(),
        n: table.n,
        m: table.m,
        k: cfg.k,
        forward_calls: table.forward_calls,
        chosen,
        entries,
    };
    Ok((pruned, report))
}

/// Scores all candidates, then prunes the `k` lowest.
pub fn run_pruning_pass(
    graph: &OperatorGraph,
    cfg: &PruneConfig,
    scorer: &dyn Scorer,
    cache: Option<&ScoreCache>,
) -> Result<(OperatorGraph, ScoreReport)> {
    let table = run_scoring_pass(graph, cfg, scorer, cache)?;
    prune_with_scores(graph, &table, cfg)
}

/// One scoring pass shared by every `k` in ascending `k_values`.
pub fn sweep(
    graph: &OperatorGraph,
    cfg: &PruneConfig,
    k_values: &[usize],
    scorer: &dyn Scorer,
    cache: Option<&ScoreCache>,
) -> Result<Vec<(usize, OperatorGraph, ScoreReport)>> {
    if k_values.is_empty() || k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::InvalidConfig(
            "k values must be non-empty and strictly ascending".into(),
        ));
    }
    let first = PruneConfig {
        k: k_values[0],
        ..cfg.clone()
    };
    let table = run_scoring_pass(graph, &first, scorer, cache)?;
    k_values
        .iter()
        .map(|&k| {
            let c = PruneConfig { k, ..cfg.clone() };
            let (g, r) = prune_with_scores(graph, &table, &c)?;
            Ok((k, g, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ConditionScore;

    fn s(id: &str, total: f64) -> OperatorScore {
        OperatorScore::from_conditions(id, vec![ConditionScore::new(0, total, 0.0, Combinator::Sum).unwrap()])
    }

    #[test]
    fn ranking_sorts_ascending_with_id_ties() {
        assert_eq!(
            rank_operators(&[s("a", 3.0), s("b", 1.0), s("c", 2.0)]),
            ["b", "c", "a"]
        );
        assert_eq!(
            rank_operators(&[s("c", 1.0), s("a", 1.0), s("b", 1.0)]),
            ["a", "b", "c"]
        );
        assert_eq!(rank_operators(&[s("z", 0.5)]), ["z"]);
    }

    #[test]
    fn selection_skips_children_of_chosen_blocks() {
        let ranking: Vec<String> = ["x.res", "x.res.conv1", "y", "z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(select_operators(&ranking, 2).unwrap(), ["x.res", "y"]);
    }

    #[test]
    fn selection_lets_blocks_replace_chosen_children() {
        let ranking: Vec<String> = ["x.res.conv1", "x.res", "y", "z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(select_operators(&ranking, 2).unwrap(), ["x.res", "y"]);
        assert!(select_operators(&ranking[..2], 2).is_err());
        let children_first: Vec<String> = ["x.res.conv1", "x.res.norm1", "x.res"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            select_operators(&children_first, 2).unwrap(),
            ["x.res.conv1", "x.res.norm1"]
        );
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig {
            k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PruneConfig {
            conditions: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PruneConfig {
            min_cost_fraction: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PruneConfig::default().validate().is_ok());
    }

    #[test]
    fn scoring_hash_ignores_k_and_combinator() {
        let a = PruneConfig::default();
        let b = PruneConfig {
            k: 3,
            combinator: Combinator::Product,
            jobs: 7,
            ..a.clone()
        };
        assert_eq!(a.scoring_hash(), b.scoring_hash());
        let c = PruneConfig { n_gen: 8, ..a.clone() };
        assert_ne!(a.scoring_hash(), c.scoring_hash());
    }

    struct Counting(std::sync::atomic::AtomicUsize);

    impl Scorer for Counting {
        fn score(&self, _: &OperatorGraph, candidates: &[String], cfg: &PruneConfig) -> Result<Vec<OperatorScore>> {
            self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            candidates
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let per = cfg
                        .conditions
                        .iter()
                        .map(|&c| ConditionScore::new(c, i as f64, 1.0, cfg.combinator))
                        .collect::<Result<_>>()?;
                    Ok(OperatorScore::from_conditions(id.clone(), per))
                })
                .collect()
        }
    }

    #[test]
    fn cache_hit_returns_the_stored_table_without_scoring() {
        let g = crate::graph::build_unet(&crate::graph::UNetSpec::tiny(), 0).unwrap();
        let cfg = PruneConfig {
            conditions: vec![0, 1],
            deterministic: true,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::new(dir.path());
        let scorer = Counting(Default::default());
        let first = run_scoring_pass(&g, &cfg, &scorer, Some(&cache)).unwrap();
        let again = run_scoring_pass(&g, &PruneConfig { k: 3, ..cfg.clone() }, &scorer, Some(&cache)).unwrap();
        assert_eq!(scorer.0.load(std::sync::atomic::Ordering::SeqCst), 1);
        assert_eq!(first, again);
        run_scoring_pass(&g, &PruneConfig { n_gen: 4, ..cfg }, &scorer, Some(&cache)).unwrap();
        assert_eq!(scorer.0.load(std::sync::atomic::Ordering::SeqCst), 2);
    }
}
