use crate::ops::same_shape;
use crate::{Result, Tape, Tensor, TensorError, Var};

pub fn add(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    same_shape("add", a.value(), b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x + y)?;
    tape.record("add", out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
}

pub fn sub(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    same_shape("sub", a.value(), b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x - y)?;
    tape.record("sub", out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
}

pub fn mul(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    same_shape("mul", a.value(), b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x * y)?;
    let (av, bv) = (a.value().clone(), b.value().clone());
    tape.record("mul", out, &[a, b], move |g, needs| {
        vec![
            needs[0].then(|| g.zip_map(&bv, |g, y| g * y).expect("shape checked")),
            needs[1].then(|| g.zip_map(&av, |g, x| g * x).expect("shape checked")),
        ]
    })
}

pub fn scale(tape: &Tape, a: &Var, s: f32) -> Result<Var> {
    let out = a.value().scale(s);
    tape.record("scale", out, &[a], move |g, _| vec![Some(g.scale(s))])
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(tape: &Tape, a: &Var) -> Result<Var> {
    let out = a.value().map(|x| x * sigmoid(x));
    let av = a.value().clone();
    tape.record("silu", out, &[a], move |g, _| {
        let gi = g
            .zip_map(&av, |g, x| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            })
            .expect("shape checked");
        vec![Some(gi)]
    })
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum(tape: &Tape, a: &Var) -> Result<Var> {
    let out = Tensor::scalar(a.value().sum());
    let shape = a.shape().to_vec();
    tape.record("sum", out, &[a], move |g, _| {
        vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
    })
}

pub fn mean(tape: &Tape, a: &Var) -> Result<Var> {
    let n = a.value().numel() as f32;
    let out = Tensor::scalar(a.value().sum() / n);
    let shape = a.shape().to_vec();
    tape.record("mean", out, &[a], move |g, _| {
        vec![Some(Tensor::full(shape.clone(), g.data()[0] / n))]
    })
}

/// Mean squared error between two equally shaped tensors.
pub fn mse(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    same_shape("mse", a.value(), b.value())?;
    let diff = a.value().zip_map(b.value(), |x, y| x - y)?;
    let n = diff.numel() as f32;
    let total: f64 = diff.data().iter().map(|&d| (d as f64) * (d as f64)).sum();
    let out = Tensor::scalar((total / n as f64) as f32);
    tape.record("mse", out, &[a, b], move |g, needs| {
        let k = 2.0 * g.data()[0] / n;
        let ga = diff.scale(k);
        vec![needs[0].then(|| ga.clone()), needs[1].then(|| ga.scale(-1.0))]
    })
}

/// Adds a per-(sample, channel) vector `[N, C]` to every position of `[N, C, ...]`.
pub fn add_channel_bias(tape: &Tape, x: &Var, v: &Var) -> Result<Var> {
    let xs = x.shape().to_vec();
    if xs.len() < 2 || v.shape() != &xs[..2] {
        return Err(TensorError::shape(
            "add_channel_bias",
            format!("input {:?}, bias {:?}", xs, v.shape()),
        ));
    }
    let inner: usize = xs[2..].iter().product();
    let mut out = x.value().to_vec();
    for (chunk, &b) in out.chunks_mut(inner).zip(v.value().data()) {
        for o in chunk {
            *o += b;
        }
    }
    let out = Tensor::from_parts(xs.clone(), out);
    let vshape = v.shape().to_vec();
    tape.record("add_channel_bias", out, &[x, v], move |g, needs| {
        let gv = needs[1].then(|| {
            let data = g.data().chunks(inner).map(|c| c.iter().sum()).collect();
            Tensor::from_parts(vshape.clone(), data)
        });
        vec![Some(g.clone()), gv]
    })
}
