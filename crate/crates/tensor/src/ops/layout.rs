use crate::ops::dims4;
use crate::{Result, Tape, Tensor, TensorError, Var};

pub fn reshape(tape: &Tape, x: &Var, shape: &[usize]) -> Result<Var> {
    let out = x.value().reshape(shape.to_vec())?;
    let orig = x.shape().to_vec();
    tape.record("reshape", out, &[x], move |g, _| {
        vec![Some(g.reshape(orig.clone()).expect("same numel"))]
    })
}

fn permute_nchw(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(b * hw + p) * c + ch] = x[(b * c + ch) * hw + p];
            }
        }
    }
    out
}

fn permute_tokens(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                out[(b * c + ch) * hw + p] = x[(b * hw + p) * c + ch];
            }
        }
    }
    out
}

/// `[N, C, H, W] -> [N, H*W, C]`.
pub fn nchw_to_tokens(tape: &Tape, x: &Var) -> Result<Var> {
    let [n, c, h, w] = dims4("nchw_to_tokens", x.value())?;
    let out = Tensor::from_parts(vec![n, h * w, c], permute_nchw(x.value().data(), n, c, h * w));
    tape.record("nchw_to_tokens", out, &[x], move |g, _| {
        vec![Some(Tensor::from_parts(
            vec![n, c, h, w],
            permute_tokens(g.data(), n, c, h * w),
        ))]
    })
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn tokens_to_nchw(tape: &Tape, x: &Var, h: usize, w: usize) -> Result<Var> {
    let (n, t, c) = match *x.shape() {
        [n, t, c] => (n, t, c),
        ref s => return Err(TensorError::shape("tokens_to_nchw", format!("input {s:?}"))),
    };
    if t != h * w {
        return Err(TensorError::shape(
            "tokens_to_nchw",
            format!("{t} tokens cannot fill {h}x{w}"),
        ));
    }
    let out = Tensor::from_parts(vec![n, c, h, w], permute_tokens(x.value().data(), n, c, t));
    tape.record("tokens_to_nchw", out, &[x], move |g, _| {
        vec![Some(Tensor::from_parts(vec![n, t, c], permute_nchw(g.data(), n, c, t)))]
    })
}

/// Concatenates two NCHW tensors along the channel axis.
pub fn concat_channels(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    let [n, ca, h, w] = dims4("concat_channels", a.value())?;
    let [nb, cb, hb, wb] = dims4("concat_channels", b.value())?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a.value().data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.value().data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    let out = Tensor::from_parts(vec![n, ca + cb, h, w], out);
    tape.record("concat_channels", out, &[a, b], move |g, needs| {
        let gd = g.data();
        let split = |lo: usize, c: usize| {
            let mut v = Vec::with_capacity(n * c * plane);
            for i in 0..n {
                let base = (i * (ca + cb) + lo) * plane;
                v.extend_from_slice(&gd[base..base + c * plane]);
            }
            Tensor::from_parts(vec![n, c, h, w], v)
        };
        vec![needs[0].then(|| split(0, ca)), needs[1].then(|| split(ca, cb))]
    })
}

/// Selects rows of `table` along its leading axis (embedding lookup).
pub fn gather_rows(tape: &Tape, table: &Var, rows: &[usize]) -> Result<Var> {
    let ts = table.shape().to_vec();
    let r = ts[0];
    if rows.is_empty() {
        return Err(TensorError::arg("gather_rows", "no rows requested"));
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
        return Err(TensorError::arg(
            "gather_rows",
            format!("row {bad} out of range for table of {r}"),
        ));
    }
    let per = table.value().numel() / r;
    let mut out = Vec::with_capacity(rows.len() * per);
    for &i in rows {
        out.extend_from_slice(&table.value().data()[i * per..(i + 1) * per]);
    }
    let mut oshape = ts.clone();
    oshape[0] = rows.len();
    let out = Tensor::from_parts(oshape, out);
    let rows = rows.to_vec();
    tape.record("gather_rows", out, &[table], move |g, _| {
        let mut gt = vec![0.0f32; r * per];
        for (k, &i) in rows.iter().enumerate() {
            for (a, v) in gt[i * per..(i + 1) * per]
                .iter_mut()
                .zip(&g.data()[k * per..(k + 1) * per])
            {
                *a += v;
            }
        }
        vec![Some(Tensor::from_parts(ts.clone(), gt))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_roundtrip() {
        let tape = Tape::inference();
        let x = Tensor::new(vec![2, 3, 2, 2], (0..24).map(|v| v as f32).collect()).unwrap();
        let t = nchw_to_tokens(&tape, &Var::constant(x.clone())).unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        assert_eq!(t.value().at(&[0, 1, 2]), x.at(&[0, 2, 0, 1]));
        let back = tokens_to_nchw(&tape, &t, 2, 2).unwrap();
        assert!(back.value().bit_eq(&x));
    }

    #[test]
    fn concat_places_b_after_a() {
        let tape = Tape::inference();
        let a = Var::constant(Tensor::full(vec![1, 1, 1, 2], 1.0));
        let b = Var::constant(Tensor::full(vec![1, 2, 1, 2], 2.0));
        let y = concat_channels(&tape, &a, &b).unwrap();
        assert_eq!(y.value().data(), &[1., 1., 2., 2., 2., 2.]);
    }

    #[test]
    fn gather_out_of_range_fails() {
        let tape = Tape::inference();
        let t = Var::constant(Tensor::ones(vec![3, 2]));
        assert!(gather_rows(&tape, &t, &[3]).is_err());
        assert_eq!(gather_rows(&tape, &t, &[2, 0]).unwrap().shape(), &[2, 2]);
    }
}
