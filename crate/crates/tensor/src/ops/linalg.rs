use crate::ops::elementwise::scale;
use crate::{Result, Tape, Tensor, TensorError, Var};

use super::gemm::{mm, mm_nt, mm_tn};

/// Affine map over the last axis: `x[..., in] -> x W^T + b`, `W` is `[out, in]`.
pub fn linear(tape: &Tape, x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
    let xs = x.shape().to_vec();
    let (out_f, in_f) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(TensorError::shape("linear", format!("weight {s:?}"))),
    };
    if xs.last() != Some(&in_f) {
        return Err(TensorError::shape(
            "linear",
            format!("input {xs:?} has inner dim != weight in-features {in_f}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(TensorError::shape("linear", format!("bias {:?}", b.shape())));
        }
    }
    let rows = x.value().numel() / in_f;
    let mut out = vec![0.0f32; rows * out_f];
    if let Some(b) = bias {
        for r in out.chunks_mut(out_f) {
            r.copy_from_slice(b.value().data());
        }
    }
    mm_nt(x.value().data(), weight.value().data(), &mut out, rows, in_f, out_f);
    let mut oshape = xs.clone();
    *oshape.last_mut().expect("non-empty") = out_f;
    let out = Tensor::from_parts(oshape, out);

    let xv = x.value().clone();
    let wv = weight.value().clone();
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let has_bias = bias.is_some();
    tape.record("linear", out, &inputs, move |g, needs| {
        let gd = g.data();
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0f32; rows * in_f];
            mm(gd, wv.data(), &mut gx, rows, out_f, in_f);
            Tensor::from_parts(xs.clone(), gx)
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0f32; out_f * in_f];
            mm_tn(gd, xv.data(), &mut gw, rows, out_f, in_f);
            Tensor::from_parts(vec![out_f, in_f], gw)
        });
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(needs[2].then(|| {
                let mut gb = vec![0.0f32; out_f];
                for r in gd.chunks(out_f) {
                    for (a, v) in gb.iter_mut().zip(r) {
                        *a += v;
                    }
                }
                Tensor::from_parts(vec![out_f], gb)
            }));
        }
        grads
    })
}

fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [b, m, k] => Ok([b, m, k]),
        ref s => Err(TensorError::shape(op, format!("expected rank-3, got {s:?}"))),
    }
}

/// Batched `a[B,M,K] @ b[B,K,N]`.
pub fn bmm(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    let [ba, m, k] = dims3("bmm", a.value())?;
    let [bb, kb, n] = dims3("bmm", b.value())?;
    if ba != bb || k != kb {
        return Err(TensorError::shape("bmm", format!("{:?} @ {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0f32; ba * m * n];
    let (ad, bd) = (a.value().data(), b.value().data());
    for i in 0..ba {
        mm(
            &ad[i * m * k..],
            &bd[i * k * n..],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let out = Tensor::from_parts(vec![ba, m, n], out);
    let (av, bv) = (a.value().clone(), b.value().clone());
    tape.record("bmm", out, &[a, b], move |g, needs| {
        let gd = g.data();
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0f32; ba * m * k];
            for i in 0..ba {
                mm_nt(
                    &gd[i * m * n..],
                    &bv.data()[i * k * n..],
                    &mut ga[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            Tensor::from_parts(vec![ba, m, k], ga)
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0f32; ba * k * n];
            for i in 0..ba {
                mm_tn(
                    &av.data()[i * m * k..],
                    &gd[i * m * n..],
                    &mut gb[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::from_parts(vec![ba, k, n], gb)
        });
        vec![ga, gb]
    })
}

/// Batched `a[B,M,K] @ b[B,N,K]^T`.
pub fn bmm_nt(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    let [ba, m, k] = dims3("bmm_nt", a.value())?;
    let [bb, n, kb] = dims3("bmm_nt", b.value())?;
    if ba != bb || k != kb {
        return Err(TensorError::shape(
            "bmm_nt",
            format!("{:?} @ {:?}^T", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0f32; ba * m * n];
    let (ad, bd) = (a.value().data(), b.value().data());
    for i in 0..ba {
        mm_nt(
            &ad[i * m * k..],
            &bd[i * n * k..],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let out = Tensor::from_parts(vec![ba, m, n], out);
    let (av, bv) = (a.value().clone(), b.value().clone());
    tape.record("bmm_nt", out, &[a, b], move |g, needs| {
        let gd = g.data();
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0f32; ba * m * k];
            for i in 0..ba {
                mm(
                    &gd[i * m * n..],
                    &bv.data()[i * n * k..],
                    &mut ga[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            Tensor::from_parts(vec![ba, m, k], ga)
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0f32; ba * n * k];
            for i in 0..ba {
                mm_tn(
                    &gd[i * m * n..],
                    &av.data()[i * m * k..],
                    &mut gb[i * n * k..(i + 1) * n * k],
                    m,
                    n,
                    k,
                );
            }
            Tensor::from_parts(vec![ba, n, k], gb)
        });
        vec![ga, gb]
    })
}

/// Softmax over the last axis.
pub fn softmax(tape: &Tape, x: &Var) -> Result<Var> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::shape("softmax", "rank-0 input"))?;
    let mut out = x.value().to_vec();
    for row in out.chunks_mut(d) {
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    let y = out.clone();
    tape.record("softmax", out, &[x], move |g, _| {
        let mut gx = vec![0.0f32; y.numel()];
        for ((gr, yr), or) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
            let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
            for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                *o = yv * (gv - dot);
            }
        }
        vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
    })
}

/// `softmax(q k^T / sqrt(d)) v` for `q[B,Tq,D]`, `k[B,Tk,D]`, `v[B,Tk,Dv]`.
pub fn scaled_dot_product_attention(tape: &Tape, q: &Var, k: &Var, v: &Var) -> Result<Var> {
    let [bq, _, dq] = dims3("attention", q.value())?;
    let [bk, tk, dk] = dims3("attention", k.value())?;
    let [bv, tv, _] = dims3("attention", v.value())?;
    if dq != dk || bq != bk || bk != bv || tk != tv {
        return Err(TensorError::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let scores = scale(tape, &bmm_nt(tape, q, k)?, 1.0 / (dq as f32).sqrt())?;
    let weights = softmax(tape, &scores)?;
    bmm(tape, &weights, v)
}
