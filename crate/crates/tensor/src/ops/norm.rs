use crate::{Result, Tape, Tensor, TensorError, Var};

/// Group normalization over `[N, C, ...]` with a per-channel affine map.
/// Statistics are biased (divisor = group size).
pub fn group_norm(tape: &Tape, input: &Var, groups: usize, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
    let shape = input.shape().to_vec();
    if shape.len() < 2 {
        return Err(TensorError::shape("group_norm", format!("input {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::arg(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::shape(
            "group_norm",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let spatial: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let m = cpg * spatial;
    let x = input.value().data();
    let gm = gamma.value().data();
    let bt = beta.value().data();

    let mut xhat = vec![0.0f32; x.len()];
    let mut rstd = vec![0.0f32; n * groups];
    for b in 0..n {
        for grp in 0..groups {
            let start = (b * c + grp * cpg) * spatial;
            let xs = &x[start..start + m];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            rstd[b * groups + grp] = r as f32;
            for (o, &v) in xhat[start..start + m].iter_mut().zip(xs) {
                *o = ((v as f64 - mean) * r) as f32;
            }
        }
    }
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * spatial;
            for i in start..start + spatial {
                out[i] = xhat[i] * gm[ch] + bt[ch];
            }
        }
    }
    let out = Tensor::from_parts(shape.clone(), out);
    let gamma_v = gamma.value().clone();
    tape.record("group_norm", out, &[input, gamma, beta], move |g, needs| {
        let gd = g.data();
        let gm = gamma_v.data();
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0f32; gd.len()];
            let mut dxhat = vec![0.0f32; m];
            for b in 0..n {
                for grp in 0..groups {
                    let start = (b * c + grp * cpg) * spatial;
                    for (j, d) in dxhat.iter_mut().enumerate() {
                        let ch = grp * cpg + j / spatial;
                        *d = gd[start + j] * gm[ch];
                    }
                    let xh = &xhat[start..start + m];
                    let sum_d: f32 = dxhat.iter().sum();
                    let sum_dx: f32 = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum();
                    let r = rstd[b * groups + grp];
                    let mf = m as f32;
                    for j in 0..m {
                        gx[start + j] = r / mf * (mf * dxhat[j] - sum_d - xh[j] * sum_dx);
                    }
                }
            }
            Tensor::from_parts(shape.clone(), gx)
        });
        let mut ggamma = vec![0.0f32; c];
        let mut gbeta = vec![0.0f32; c];
        if needs[1] || needs[2] {
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * spatial;
                    for i in start..start + spatial {
                        ggamma[ch] += gd[i] * xhat[i];
                        gbeta[ch] += gd[i];
                    }
                }
            }
        }
        vec![
            gx,
            needs[1].then(|| Tensor::from_parts(vec![c], ggamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], gbeta)),
        ]
    })
}
