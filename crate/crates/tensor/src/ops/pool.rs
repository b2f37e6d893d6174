use crate::ops::dims4;
use crate::{Result, Tape, Tensor, TensorError, Var};

/// Non-overlapping `factor x factor` mean pooling.
pub fn avg_pool2d(tape: &Tape, input: &Var, factor: usize) -> Result<Var> {
    let [n, c, h, w] = dims4("avg_pool2d", input.value())?;
    if factor == 0 {
        return Err(TensorError::arg("avg_pool2d", "factor must be >= 1"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(TensorError::shape(
            "avg_pool2d",
            format!("spatial {h}x{w} not divisible by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f32;
    let x = input.value().data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * w + ox * factor;
                    for v in &xp[row..row + factor] {
                        acc += v;
                    }
                }
                op[oy * ow + ox] = acc * inv;
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, oh, ow], out);
    tape.record("avg_pool2d", out, &[input], move |g, _| {
        let gd = g.data();
        let mut gx = vec![0.0f32; n * c * h * w];
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    gx[p * h * w + y * w + x] = gd[p * oh * ow + (y / factor) * ow + x / factor] * inv;
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
    })
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(tape: &Tape, input: &Var, factor: usize) -> Result<Var> {
    let [n, c, h, w] = dims4("upsample_nearest", input.value())?;
    if factor == 0 {
        return Err(TensorError::arg("upsample_nearest", "factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.value().data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                out[p * oh * ow + y * ow + xo] = x[p * h * w + (y / factor) * w + xo / factor];
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, oh, ow], out);
    tape.record("upsample_nearest", out, &[input], move |g, _| {
        let gd = g.data();
        let mut gx = vec![0.0f32; n * c * h * w];
        for p in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    gx[p * h * w + (y / factor) * w + xo / factor] += gd[p * oh * ow + y * ow + xo];
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
    })
}
