use std::collections::HashMap;
use std::time::Instant;

use ldprune_tensor::{ops, Tape, Tensor, Var};

use super::{Op, OperatorGraph, OperatorNode, Signature, Step};
use crate::error::{CoreError, Result};
use crate::modify::{AdapterSpec, Edit, Resample, ADAPTER_WEIGHT};

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Collect the hidden state at every `Step::Tap`.
    pub taps: bool,
    /// Record input/output signatures of every executed operator.
    pub record_shapes: bool,
    /// Record inclusive wall time per operator.
    pub profile: bool,
    /// Do not bump the forward counter.
    pub uncounted: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Predicted noise, same shape as the input latent.
    pub eps: Var,
    pub taps: Vec<(String, Var)>,
    pub shapes: Vec<(String, Signature, Signature)>,
    pub timings: HashMap<String, f64>,
}

struct Ctx<'a> {
    tape: &'a Tape,
    opts: ForwardOptions,
    temb: Option<Var>,
    context: Option<Var>,
    shapes: Vec<(String, Signature, Signature)>,
    timings: HashMap<String, f64>,
}

fn signature(t: &Var, grid: (usize, usize)) -> Signature {
    match *t.shape() {
        [_, c, h, w] => Signature::new(c, h, w),
        [_, _, c] => Signature::new(c, grid.0, grid.1),
        [_, c] => Signature::vector(c),
        _ => Signature::vector(0),
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[N, dim]`.
pub(crate) fn timestep_embedding(t: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freq = |i: usize| (-(10000f32.ln()) * i as f32 / half as f32).exp();
        data.extend((0..half).map(|i| (ti * freq(i)).sin()));
        data.extend((0..half).map(|i| (ti * freq(i)).cos()));
    }
    Tensor::new(vec![t.len(), dim], data).expect("sized above")
}

impl OperatorGraph {
    fn pvar(&self, tape: &Tape, node: &OperatorNode, name: &str) -> Result<Var> {
        let t = node
            .param(name)
            .ok_or_else(|| CoreError::InvalidSpec(format!("`{}` has no parameter `{name}`", node.id)))?;
        Ok(tape.param(format!("{}.{}", node.id, name), t))
    }

    /// Predicts the noise in `x_t` (`[N, C, H, W]`) at timesteps `t` for
    /// condition ids `cond`.
    pub fn forward(
        &self,
        tape: &Tape,
        x_t: &Var,
        t: &[f32],
        cond: &[usize],
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        let expect = self.spec.latent_shape(n);
        if x_t.shape() != expect.as_slice() || n == 0 {
            return Err(CoreError::shape(
                "input",
                format!("latent {:?}, expected {:?}", x_t.shape(), expect),
            ));
        }
        if t.len() != n || cond.len() != n {
            return Err(CoreError::shape(
                "input",
                format!("batch {n} with {} timesteps and {} conditions", t.len(), cond.len()),
            ));
        }
        if let Some(&c) = cond.iter().find(|&&c| c >= self.spec.num_conditions) {
            return Err(CoreError::InvalidConfig(format!(
                "condition {c} outside 0..{}",
                self.spec.num_conditions
            )));
        }
        let mut ctx = Ctx {
            tape,
            opts,
            temb: None,
            context: None,
            shapes: Vec::new(),
            timings: HashMap::new(),
        };

        let mut temb = Var::constant(timestep_embedding(t, self.spec.base_width));
        for id in &self.time_program {
            temb = self.run(&mut ctx, id, &temb)?;
        }
        ctx.temb = Some(temb);
        ctx.context = Some(self.condition_context(tape, cond)?);

        let mut h = x_t.clone();
        let mut saved: HashMap<usize, Var> = HashMap::new();
        let mut taps = Vec::new();
        for step in &self.program {
            match step {
                Step::Node(id) => h = self.run(&mut ctx, id, &h)?,
                Step::SaveSkip(l) => {
                    saved.insert(*l, h.clone());
                }
                Step::ConcatSkip(l) => {
                    let s = saved
                        .get(l)
                        .ok_or_else(|| CoreError::shape("skip", format!("level {l} not saved")))?;
                    h = ops::concat_channels(tape, &h, s)
                        .map_err(|e| CoreError::from(e).in_operator(format!("skip.{l}")))?;
                }
                Step::Tap(name) => {
                    if opts.taps {
                        taps.push((name.clone(), h.clone()));
                    }
                }
            }
        }
        if !opts.uncounted {
            self.counter.add(n as u64);
        }
        Ok(ForwardOutput {
            eps: h,
            taps,
            shapes: ctx.shapes,
            timings: ctx.timings,
        })
    }

    /// Inference-only forward returning the predicted noise.
    pub fn predict(&self, x_t: &Tensor, t: &[f32], cond: &[usize]) -> Result<Tensor> {
        let tape = Tape::inference();
        let out = self.forward(&tape, &Var::constant(x_t.clone()), t, cond, ForwardOptions::default())?;
        Ok(out.eps.into_value())
    }

    fn condition_context(&self, tape: &Tape, cond: &[usize]) -> Result<Var> {
        let node = self
            .nodes
            .iter()
            .find(|n| matches!(n.op, Op::Embedding { .. }))
            .ok_or_else(|| CoreError::InvalidSpec("graph has no condition table".into()))?;
        let Op::Embedding { tokens, dim } = node.op else {
            unreachable!()
        };
        let table = self.pvar(tape, node, "table")?;
        let rows = ops::gather_rows(tape, &table, cond)?;
        Ok(ops::reshape(tape, &rows, &[cond.len(), tokens, dim])?)
    }

    /// Runs one operator (with any edit applied) and records diagnostics.
    fn run(&self, ctx: &mut Ctx, id: &str, x: &Var) -> Result<Var> {
        self.run_grid(ctx, id, x, (0, 0))
    }

    fn run_grid(&self, ctx: &mut Ctx, id: &str, x: &Var, grid: (usize, usize)) -> Result<Var> {
        let node = self.node(id)?;
        let start = ctx.opts.profile.then(Instant::now);
        let y = self.dispatch(ctx, node, x).map_err(|e| match e {
            CoreError::Operator { .. } => e,
            e => e.in_operator(id),
        })?;
        if let Some(s) = start {
            *ctx.timings.entry(id.to_string()).or_default() += s.elapsed().as_secs_f64();
        }
        if ctx.opts.record_shapes {
            ctx.shapes
                .push((id.to_string(), signature(x, grid), signature(&y, grid)));
        }
        Ok(y)
    }

    fn dispatch(&self, ctx: &mut Ctx, node: &OperatorNode, x: &Var) -> Result<Var> {
        let tape = ctx.tape;
        match &node.edit {
            Some(Edit::Remove) => return Ok(x.clone()),
            Some(Edit::Replace(a)) => return self.adapter(tape, node, a, x),
            None => {}
        }
        let p = |name: &str| self.pvar(tape, node, name);
        let y = match &node.op {
            Op::Conv { stride, pad, .. } => ops::conv2d(tape, x, &p("weight")?, Some(&p("bias")?), *stride, *pad)?,
            Op::GroupNorm { groups, eps } => {
                if x.shape().len() == 3 {
                    let s = x.shape().to_vec();
                    let flat = ops::reshape(tape, x, &[s[0] * s[1], s[2]])?;
                    let y = ops::group_norm(tape, &flat, *groups, &p("gamma")?, &p("beta")?, *eps)?;
                    ops::reshape(tape, &y, &s)?
                } else {
                    ops::group_norm(tape, x, *groups, &p("gamma")?, &p("beta")?, *eps)?
                }
            }
            Op::Activation => ops::silu(tape, x)?,
            Op::Linear => ops::linear(tape, x, &p("weight")?, Some(&p("bias")?))?,
            Op::Downsample { factor } => ops::conv2d(tape, x, &p("weight")?, Some(&p("bias")?), *factor, 1)?,
            Op::Upsample { factor } => {
                let up = ops::upsample_nearest(tape, x, *factor)?;
                ops::conv2d(tape, &up, &p("weight")?, Some(&p("bias")?), 1, 1)?
            }
            Op::Attention { cross } => {
                let kv_src = if *cross {
                    ctx.context.clone().expect("context set before the program runs")
                } else {
                    x.clone()
                };
                let q = ops::linear(tape, x, &p("to_q")?, None)?;
                let k = ops::linear(tape, &kv_src, &p("to_k")?, None)?;
                let v = ops::linear(tape, &kv_src, &p("to_v")?, None)?;
                let o = ops::scaled_dot_product_attention(tape, &q, &k, &v)?;
                ops::linear(tape, &o, &p("to_out")?, Some(&p("to_out_bias")?))?
            }
            Op::ResBlock => self.resblock(ctx, node, x)?,
            Op::BasicTransformerBlock => self.transformer(ctx, node, x)?,
            Op::Embedding { .. } => {
                return Err(CoreError::InvalidSpec(
                    "the condition table is not a data-path operator".into(),
                ))
            }
        };
        Ok(y)
    }

    fn child(&self, node: &OperatorNode, suffix: &str) -> Option<String> {
        let id = format!("{}.{}", node.id, suffix);
        self.contains(&id).then_some(id)
    }

    fn resblock(&self, ctx: &mut Ctx, node: &OperatorNode, x: &Var) -> Result<Var> {
        let tape = ctx.tape;
        let c = |s: &str| {
            self.child(node, s)
                .ok_or_else(|| CoreError::InvalidSpec(format!("`{}` lacks `{s}`", node.id)))
        };
        let mut h = self.run(ctx, &c("norm1")?, x)?;
        h = self.run(ctx, &c("act1")?, &h)?;
        h = self.run(ctx, &c("conv1")?, &h)?;
        let temb = ctx.temb.clone().expect("time embedding computed first");
        let temb = ops::silu(tape, &temb)?;
        let tproj = self.run(ctx, &c("temb_proj")?, &temb)?;
        h = ops::add_channel_bias(tape, &h, &tproj)?;
        h = self.run(ctx, &c("norm2")?, &h)?;
        h = self.run(ctx, &c("act2")?, &h)?;
        h = self.run(ctx, &c("conv2")?, &h)?;
        let skip = match self.child(node, "skip") {
            Some(id) => self.run(ctx, &id, x)?,
            None => x.clone(),
        };
        Ok(ops::add(tape, &skip, &h)?)
    }

    fn transformer(&self, ctx: &mut Ctx, node: &OperatorNode, x: &Var) -> Result<Var> {
        let tape = ctx.tape;
        let [_, _, hh, ww] = *x.shape() else {
            return Err(CoreError::shape(
                &node.id,
                format!("expected NCHW, got {:?}", x.shape()),
            ));
        };
        let grid = (hh, ww);
        let c = |s: &str| {
            self.child(node, s)
                .ok_or_else(|| CoreError::InvalidSpec(format!("`{}` lacks `{s}`", node.id)))
        };
        let mut h = ops::nchw_to_tokens(tape, x)?;
        for (norm, attn) in [("norm1", "attn1"), ("norm2", "attn2")] {
            let attn_id = c(attn)?;
            let normed = self.run_grid(ctx, &c(norm)?, &h, grid)?;
            if self.node(&attn_id)?.edit == Some(Edit::Remove) {
                // The branch is gone; the residual stream passes unchanged.
                if ctx.opts.record_shapes {
                    let s = signature(&normed, grid);
                    ctx.shapes.push((attn_id, s, s));
                }
                continue;
            }
            let a = self.run_grid(ctx, &attn_id, &normed, grid)?;
            h = ops::add(tape, &h, &a)?;
        }
        let mut f = self.run_grid(ctx, &c("norm3")?, &h, grid)?;
        for s in ["ff.0", "ff.act", "ff.2"] {
            f = self.run_grid(ctx, &c(s)?, &f, grid)?;
        }
        h = ops::add(tape, &h, &f)?;
        Ok(ops::tokens_to_nchw(tape, &h, hh, ww)?)
    }

    fn adapter(&self, tape: &Tape, node: &OperatorNode, a: &AdapterSpec, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        if let Resample::Pool(f) = a.resample {
            h = ops::avg_pool2d(tape, &h, f)?;
        }
        if a.channel_map {
            let w = self.pvar(tape, node, ADAPTER_WEIGHT)?;
            h = if h.shape().len() == 4 {
                let [cout, cin] = *w.shape() else {
                    unreachable!("adapter weight is 2-D")
                };
                let w4 = ops::reshape(tape, &w, &[cout, cin, 1, 1])?;
                ops::conv2d(tape, &h, &w4, None, 1, 0)?
            } else {
                ops::linear(tape, &h, &w, None)?
            };
        }
        if let Resample::Upsample(f) = a.resample {
            h = ops::upsample_nearest(tape, &h, f)?;
        }
        Ok(h)
    }

    /// Per-operator inclusive wall time of an uncounted batch-1 forward,
    /// taking the minimum over `repeats` runs.
    pub fn measure_costs(&self, repeats: usize) -> Result<(HashMap<String, f64>, f64)> {
        let x = Tensor::zeros(self.spec.latent_shape(1));
        let tape = Tape::inference();
        let opts = ForwardOptions {
            profile: true,
            uncounted: true,
            ..Default::default()
        };
        let mut best: HashMap<String, f64> = HashMap::new();
        let mut total = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let out = self.forward(&tape, &Var::constant(x.clone()), &[500.0], &[0], opts)?;
            total = total.min(start.elapsed().as_secs_f64());
            for (id, t) in out.timings {
                let e = best.entry(id).or_insert(f64::INFINITY);
                *e = e.min(t);
            }
        }
        Ok((best, total))
    }

    /// Multiply-accumulate count per operator (inclusive) for one sample,
    /// and the total.
    pub fn analytic_costs(&self) -> (HashMap<String, f64>, f64) {
        let mut costs = HashMap::new();
        let ctx_tokens = self.spec.cond_tokens as f64;
        // Children follow their parent in pre-order; accumulate bottom-up.
        for n in self.nodes.iter().rev() {
            let (i, o) = (n.in_sig, n.out_sig);
            let area = |s: Signature| (s.height * s.width) as f64;
            let own = match (&n.edit, &n.op) {
                (Some(Edit::Remove), _) => 0.0,
                (Some(Edit::Replace(a)), _) => {
                    let map = if a.channel_map {
                        (i.channels * o.channels) as f64
                    } else {
                        0.0
                    };
                    let resample = match a.resample {
                        Resample::None => 0.0,
                        _ => o.channels.max(i.channels) as f64 * area(i).max(area(o)),
                    };
                    map * area(i).min(area(o)) + resample
                }
                (None, Op::Conv { kernel, .. }) => {
                    (i.channels * kernel * kernel + 1) as f64 * o.channels as f64 * area(o)
                }
                (None, Op::Downsample { .. }) | (None, Op::Upsample { .. }) => {
                    (i.channels * 9 + 1) as f64 * o.channels as f64 * area(o)
                }
                (None, Op::GroupNorm { .. }) => 5.0 * i.channels as f64 * area(i),
                (None, Op::Activation) => 4.0 * i.channels as f64 * area(i),
                (None, Op::Linear) => (i.channels + 1) as f64 * o.channels as f64 * area(i),
                (None, Op::Attention { cross }) => {
                    let t = area(i);
                    let c = i.channels as f64;
                    let (tk, kv) = if *cross {
                        (ctx_tokens, self.spec.cond_dim as f64)
                    } else {
                        (t, c)
                    };
                    2.0 * t * c * c + 2.0 * tk * kv * c + 2.0 * t * tk * c
                }
                (None, Op::ResBlock) | (None, Op::BasicTransformerBlock) => 2.0 * o.channels as f64 * area(o),
                (None, Op::Embedding { .. }) => 0.0,
            };
            let kids: f64 = n.children.iter().filter_map(|c| costs.get(c)).sum();
            costs.insert(n.id.clone(), own + kids);
        }
        let total = self
            .program
            .iter()
            .filter_map(|s| match s {
                Step::Node(id) => costs.get(id),
                _ => None,
            })
            .chain(self.time_program.iter().filter_map(|id| costs.get(id)))
            .sum();
        (costs, total)
    }

    /// Fills `est_cost` from wall-clock measurement, or from the analytic
    /// MAC model when `deterministic` is set.
    pub fn calibrate_costs(&mut self, deterministic: bool) -> Result<()> {
        let (costs, total) = if deterministic {
            self.analytic_costs()
        } else {
            self.measure_costs(3)?
        };
        self.set_costs(&costs, total);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_unet, UNetSpec};
    use rand::SeedableRng;

    fn latent(spec: &UNetSpec, n: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(spec.latent_shape(n), 1.0, &mut rng)
    }

    #[test]
    fn output_matches_latent_shape_and_counts() {
        let spec = UNetSpec::tiny();
        let g = build_unet(&spec, 1).unwrap();
        let x = latent(&spec, 3, 0);
        let y = g.predict(&x, &[10.0, 500.0, 999.0], &[0, 1, 2]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
        assert_eq!(g.counter().get(), 3);
        let clone = g.clone();
        clone.predict(&x, &[1.0, 1.0, 1.0], &[0, 0, 0]).unwrap();
        assert_eq!(g.counter().get(), 6);
    }

    #[test]
    fn batch_items_are_independent() {
        let spec = UNetSpec::tiny();
        let g = build_unet(&spec, 1).unwrap();
        let x = latent(&spec, 2, 4);
        let both = g.predict(&x, &[100.0, 700.0], &[1, 3]).unwrap();
        let parts = x.unbatch();
        let a = g.predict(&parts[0], &[100.0], &[1]).unwrap();
        let b = g.predict(&parts[1], &[700.0], &[3]).unwrap();
        let joined = Tensor::stack_batch(&[a, b]).unwrap();
        let diff = both
            .data()
            .iter()
            .zip(joined.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn conditions_change_the_prediction() {
        let spec = UNetSpec::tiny();
        let g = build_unet(&spec, 1).unwrap();
        let x = latent(&spec, 1, 4);
        let a = g.predict(&x, &[300.0], &[0]).unwrap();
        let b = g.predict(&x, &[300.0], &[1]).unwrap();
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let spec = UNetSpec::tiny();
        let g = build_unet(&spec, 1).unwrap();
        let x = latent(&spec, 1, 4);
        assert!(g.predict(&x, &[1.0], &[99]).is_err());
        assert!(g.predict(&x, &[1.0, 2.0], &[0]).is_err());
        assert!(g.predict(&Tensor::zeros(vec![1, 3, 8, 8]), &[1.0], &[0]).is_err());
    }

    #[test]
    fn taps_cover_every_level() {
        let spec = UNetSpec::tiny();
        let g = build_unet(&spec, 1).unwrap();
        let tape = Tape::inference();
        let out = g
            .forward(
                &tape,
                &Var::constant(latent(&spec, 1, 0)),
                &[5.0],
                &[0],
                ForwardOptions {
                    taps: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let names: Vec<_> = out.taps.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["enc.0", "enc.1", "mid", "dec.1", "dec.0"]);
        assert_eq!(out.taps[1].1.shape(), &[1, 32, 4, 4]);
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(&[0.0], 8);
        assert_eq!(e.data(), &[0., 0., 0., 0., 1., 1., 1., 1.]);
    }

    #[test]
    fn analytic_cost_is_inclusive() {
        let g = build_unet(&UNetSpec::tiny(), 0).unwrap();
        let (c, total) = g.analytic_costs();
        let kids: f64 = g.node("down.1.res.0").unwrap().children.iter().map(|k| c[k]).sum();
        assert!(c["down.1.res.0"] > kids);
        assert!(total > c["down.1.res.0"]);
    }

    #[test]
    fn all_parameters_receive_gradients() {
        let spec = UNetSpec::tiny();
        let g = build_unet(&spec, 1).unwrap();
        let tape = Tape::new();
        let x = Var::constant(latent(&spec, 2, 0));
        let out = g
            .forward(&tape, &x, &[3.0, 800.0], &[0, 2], ForwardOptions::default())
            .unwrap();
        let loss = ops::mean(&tape, &ops::mul(&tape, &out.eps, &out.eps).unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for (name, t) in g.params() {
            let gr = grads.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert_eq!(gr.shape(), t.shape(), "{name}");
        }
    }
}
