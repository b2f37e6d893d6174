//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on an inference tape,
//! so it is independent of every backward closure it validates.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::ops;
use crate::{Result, Tape, Tensor, Var};

/// Outcome of one [`gradcheck`] call: the worst relative error over inputs.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Compares analytic gradients of `sum(f(inputs) * r)` (fixed random `r`)
/// against central differences with step `h`.
///
/// The relative error for an input is `|g_a - g_n| / max(|g_a|, |g_n|)` over
/// the whole gradient vector; inputs whose gradients are both below 1e-6 in
/// norm count as exact.
pub fn gradcheck<F>(inputs: &[Tensor], h: f32, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let probe = f(&Tape::inference(), &constants(inputs))?;
    let mut rng = StdRng::seed_from_u64(seed);
    let r = Tensor::uniform(probe.shape().to_vec(), 1.0, &mut rng);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    let loss = ops::sum(&tape, &ops::mul(&tape, &out, &Var::constant(r.clone()))?)?;
    let grads = tape.backward(&loss)?;

    let objective = |xs: &[Tensor]| -> Result<f64> {
        let out = f(&Tape::inference(), &constants(xs))?;
        Ok(out
            .value()
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let plus = objective(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * h;
            let minus = objective(&xs)?;
            numeric.push((plus - minus) / (2.0 * h as f64));
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn);
        per_input.push(if scale < 1e-6 { 0.0 } else { diff / scale });
    }
    Ok(GradCheck {
        max_rel_error: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    })
}

fn constants(xs: &[Tensor]) -> Vec<Var> {
    xs.iter().cloned().map(Var::constant).collect()
}

/// Runs [`gradcheck`] over every differentiable op with small random inputs.
/// Returns `(op name, result)` pairs.
pub fn op_suite(h: f32, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut rand = |shape: &[usize]| Tensor::uniform(shape.to_vec(), 1.0, &mut rng);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&Tape, &[Var]) -> Result<Var>| -> Result<()> {
        out.push((name, gradcheck(&inputs, h, seed ^ name.len() as u64, f)?));
        Ok(())
    };

    run("add", vec![rand(&[2, 3]), rand(&[2, 3])], &|t, v| {
        ops::add(t, &v[0], &v[1])
    })?;
    run("sub", vec![rand(&[2, 3]), rand(&[2, 3])], &|t, v| {
        ops::sub(t, &v[0], &v[1])
    })?;
    run("mul", vec![rand(&[2, 3]), rand(&[2, 3])], &|t, v| {
        ops::mul(t, &v[0], &v[1])
    })?;
    run("scale", vec![rand(&[4])], &|t, v| ops::scale(t, &v[0], -1.5))?;
    run("silu", vec![rand(&[2, 5]).scale(3.0)], &|t, v| ops::silu(t, &v[0]))?;
    run("sum", vec![rand(&[3, 2])], &|t, v| ops::sum(t, &v[0]))?;
    run("mean", vec![rand(&[3, 2])], &|t, v| ops::mean(t, &v[0]))?;
    run("mse", vec![rand(&[2, 4]), rand(&[2, 4])], &|t, v| {
        ops::mse(t, &v[0], &v[1])
    })?;
    run("add_channel_bias", vec![rand(&[2, 3, 2, 2]), rand(&[2, 3])], &|t, v| {
        ops::add_channel_bias(t, &v[0], &v[1])
    })?;
    run(
        "conv2d",
        vec![rand(&[2, 3, 5, 5]), rand(&[4, 3, 3, 3]), rand(&[4])],
        &|t, v| ops::conv2d(t, &v[0], &v[1], Some(&v[2]), 1, 1),
    )?;
    run(
        "conv2d_stride2",
        vec![rand(&[1, 2, 6, 6]), rand(&[3, 2, 3, 3]), rand(&[3])],
        &|t, v| ops::conv2d(t, &v[0], &v[1], Some(&v[2]), 2, 1),
    )?;
    run(
        "conv2d_pointwise",
        vec![rand(&[2, 3, 3, 2]), rand(&[5, 3, 1, 1]), rand(&[5])],
        &|t, v| ops::conv2d(t, &v[0], &v[1], Some(&v[2]), 1, 0),
    )?;
    run("avg_pool2d", vec![rand(&[1, 2, 4, 4])], &|t, v| {
        ops::avg_pool2d(t, &v[0], 2)
    })?;
    run("upsample_nearest", vec![rand(&[1, 2, 2, 3])], &|t, v| {
        ops::upsample_nearest(t, &v[0], 2)
    })?;
    run(
        "group_norm",
        vec![rand(&[2, 4, 3, 3]).scale(2.0), rand(&[4]), rand(&[4])],
        &|t, v| ops::group_norm(t, &v[0], 2, &v[1], &v[2], 1e-5),
    )?;
    run("linear", vec![rand(&[3, 4]), rand(&[5, 4]), rand(&[5])], &|t, v| {
        ops::linear(t, &v[0], &v[1], Some(&v[2]))
    })?;
    run("softmax", vec![rand(&[3, 4]).scale(2.0)], &|t, v| {
        ops::softmax(t, &v[0])
    })?;
    run("bmm", vec![rand(&[2, 3, 4]), rand(&[2, 4, 2])], &|t, v| {
        ops::bmm(t, &v[0], &v[1])
    })?;
    run("bmm_nt", vec![rand(&[2, 3, 4]), rand(&[2, 5, 4])], &|t, v| {
        ops::bmm_nt(t, &v[0], &v[1])
    })?;
    run(
        "scaled_dot_product_attention",
        vec![rand(&[2, 3, 4]), rand(&[2, 5, 4]), rand(&[2, 5, 3])],
        &|t, v| ops::scaled_dot_product_attention(t, &v[0], &v[1], &v[2]),
    )?;
    run("reshape", vec![rand(&[2, 6])], &|t, v| ops::reshape(t, &v[0], &[3, 4]))?;
    run("nchw_to_tokens", vec![rand(&[2, 3, 2, 2])], &|t, v| {
        ops::nchw_to_tokens(t, &v[0])
    })?;
    run("tokens_to_nchw", vec![rand(&[2, 6, 3])], &|t, v| {
        ops::tokens_to_nchw(t, &v[0], 2, 3)
    })?;
    run(
        "concat_channels",
        vec![rand(&[2, 1, 2, 2]), rand(&[2, 3, 2, 2])],
        &|t, v| ops::concat_channels(t, &v[0], &v[1]),
    )?;
    run("gather_rows", vec![rand(&[4, 3])], &|t, v| {
        ops::gather_rows(t, &v[0], &[2, 0, 2])
    })?;
    Ok(out)
}
