use crate::ops::dims4;
use crate::ops::gemm::{mm, mm_nt, mm_tn};
use crate::{Result, Tape, Tensor, TensorError, Var};

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kx = kx as isize;
        let lo = ((p - kx).max(0) + s - 1) / s;
        let hi = (self.w as isize - 1 + p - kx).div_euclid(s) + 1;
        (lo as usize, hi.clamp(0, self.ow as isize) as usize)
    }

    fn row_in(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// 2-D convolution. `input` is `[N, Cin, H, W]`, `weight` is
/// `[Cout, Cin, Kh, Kw]`, `bias` (optional) is `[Cout]`.
pub fn conv2d(tape: &Tape, input: &Var, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
    let [n, cin, h, w] = dims4("conv2d", input.value())?;
    let [cout, wcin, kh, kw] = dims4("conv2d", weight.value())
        .map_err(|_| TensorError::shape("conv2d", format!("weight {:?}", weight.shape())))?;
    if stride == 0 {
        return Err(TensorError::arg("conv2d", "stride must be >= 1"));
    }
    if wcin != cin {
        return Err(TensorError::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects Cin={wcin}"),
        ));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias {:?} for Cout={cout}", b.shape()),
            ));
        }
    }
    let geo = Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    };

    let out = forward(
        &geo,
        input.value().data(),
        weight.value().data(),
        bias.map(|b| b.value().data()),
    );
    let out = Tensor::from_parts(vec![n, cout, geo.oh, geo.ow], out);

    let x = input.value().clone();
    let wt = weight.value().clone();
    let mut inputs = vec![input, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let has_bias = bias.is_some();
    tape.record("conv2d", out, &inputs, move |g, needs| {
        let gx = needs[0].then(|| {
            Tensor::from_parts(
                vec![geo.n, geo.cin, geo.h, geo.w],
                grad_input(&geo, g.data(), wt.data()),
            )
        });
        let gw = needs[1].then(|| {
            Tensor::from_parts(
                vec![geo.cout, geo.cin, geo.kh, geo.kw],
                grad_weight(&geo, g.data(), x.data()),
            )
        });
        let mut grads = vec![gx, gw];
        if has_bias {
            let plane = geo.oh * geo.ow;
            grads.push(needs[2].then(|| {
                let mut gb = vec![0.0f32; geo.cout];
                for b in 0..geo.n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let start = (b * geo.cout + co) * plane;
                        *acc += g.data()[start..start + plane].iter().sum::<f32>();
                    }
                }
                Tensor::from_parts(vec![geo.cout], gb)
            }));
        }
        grads
    })
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }

    /// Pointwise convolutions read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one sample `[Cin, H, W]` into `[Cin*Kh*Kw, OH*OW]`.
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let p = self.plane_out();
        col.fill(0.0);
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut col[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi) = self.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(iy) = self.row_in(oy, ky) else { continue };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        for ox in lo..hi {
                            dst[ox] = src[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters `col` back onto `[Cin, H, W]`.
    fn col2im(&self, col: &[f32], gx: &mut [f32]) {
        let p = self.plane_out();
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &col[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.oh {
                        let Some(iy) = self.row_in(oy, ky) else { continue };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        for ox in lo..hi {
                            dst[ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward(geo: &Geometry, x: &[f32], wt: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let p = geo.plane_out();
    let in_plane = geo.cin * geo.h * geo.w;
    let mut out = vec![0.0f32; geo.n * geo.cout * p];
    let mut col = vec![0.0f32; if geo.is_pointwise() { 0 } else { geo.patch() * p }];
    for b in 0..geo.n {
        let o = &mut out[b * geo.cout * p..(b + 1) * geo.cout * p];
        if let Some(bias) = bias {
            for (co, plane) in o.chunks_mut(p).enumerate() {
                plane.fill(bias[co]);
            }
        }
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let src = if geo.is_pointwise() {
            xb
        } else {
            geo.im2col(xb, &mut col);
            &col
        };
        mm(wt, src, o, geo.cout, geo.patch(), p);
    }
    out
}

fn grad_input(geo: &Geometry, g: &[f32], wt: &[f32]) -> Vec<f32> {
    let p = geo.plane_out();
    let in_plane = geo.cin * geo.h * geo.w;
    let mut gx = vec![0.0f32; geo.n * in_plane];
    let mut col = vec![0.0f32; geo.patch() * p];
    for b in 0..geo.n {
        let gb = &g[b * geo.cout * p..(b + 1) * geo.cout * p];
        let dst = &mut gx[b * in_plane..(b + 1) * in_plane];
        if geo.is_pointwise() {
            mm_tn(wt, gb, dst, geo.cout, geo.patch(), p);
        } else {
            col.fill(0.0);
            mm_tn(wt, gb, &mut col, geo.cout, geo.patch(), p);
            geo.col2im(&col, dst);
        }
    }
    gx
}

fn grad_weight(geo: &Geometry, g: &[f32], x: &[f32]) -> Vec<f32> {
    let p = geo.plane_out();
    let in_plane = geo.cin * geo.h * geo.w;
    let mut gw = vec![0.0f32; geo.cout * geo.patch()];
    let mut col = vec![0.0f32; if geo.is_pointwise() { 0 } else { geo.patch() * p }];
    for b in 0..geo.n {
        let gb = &g[b * geo.cout * p..(b + 1) * geo.cout * p];
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let src = if geo.is_pointwise() {
            xb
        } else {
            geo.im2col(xb, &mut col);
            &col
        };
        mm_nt(gb, src, &mut gw, geo.cout, p, geo.patch());
    }
    gw
}
