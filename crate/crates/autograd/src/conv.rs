//! 2-D convolution kernels (im2col + GEMM, with a direct depthwise path).

use crate::error::{Result, TensorError};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    /// Stride-1 "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn depthwise(channels: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation,
            dilation,
            groups: channels,
        }
    }

    /// Output length along one axis, or `None` if the kernel does not fit.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

struct Geometry {
    cin_g: usize,
    cout_g: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn geometry(x: Shape, w: Shape, spec: &ConvSpec) -> Result<Geometry> {
    let bad = |msg: String| Err(TensorError::Conv(msg));
    if spec.groups == 0 || x.c % spec.groups != 0 || w.n % spec.groups != 0 {
        return bad(format!("groups {} incompatible with {x} and weight {w}", spec.groups));
    }
    if w.h != w.w {
        return bad(format!("non-square kernel {w}"));
    }
    if w.c * spec.groups != x.c {
        return bad(format!("weight {w} expects {} input channels, got {}", w.c * spec.groups, x.c));
    }
    let k = w.h;
    let (Some(ho), Some(wo)) = (spec.output_len(x.h, k), spec.output_len(x.w, k)) else {
        return bad(format!("kernel {k} does not fit input {x}"));
    };
    Ok(Geometry {
        cin_g: w.c,
        cout_g: w.n / spec.groups,
        k,
        ho,
        wo,
    })
}

pub fn output_shape(x: Shape, w: Shape, spec: &ConvSpec) -> Result<Shape> {
    let g = geometry(x, w, spec)?;
    Ok(Shape::new(x.n, w.n, g.ho, g.wo))
}

fn is_depthwise(x: Shape, w: Shape, spec: &ConvSpec) -> bool {
    spec.groups > 1 && spec.groups == x.c && w.n == x.c && w.c == 1
}

fn is_pointwise(w: Shape, spec: &ConvSpec) -> bool {
    w.h == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1
}

/// `c = a · b + beta · c` with explicit strides (row, col) for each operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa);
    debug_assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: extents checked above; the three slices do not alias because `c`
    // is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(src: &[f64], h: usize, w: usize, g: &Geometry, spec: &ConvSpec, cols: &mut [f64]) {
    let (k, p) = (g.k, g.ho * g.wo);
    let pad = spec.padding as isize;
    for ci in 0..g.cin_g {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], h: usize, w: usize, g: &Geometry, spec: &ConvSpec, dst: &mut [f64]) {
    let (k, p) = (g.k, g.ho * g.wo);
    let pad = spec.padding as isize;
    for ci in 0..g.cin_g {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = geometry(xs, ws, spec)?;
    if let Some(b) = b {
        b.expect_shape(Shape::new(1, ws.n, 1, 1))?;
    }
    let out_shape = Shape::new(xs.n, ws.n, g.ho, g.wo);
    let mut out = Tensor::zeros(out_shape);
    if let Some(b) = b {
        for n in 0..xs.n {
            for (c, &bias) in b.data().iter().enumerate() {
                out.plane_mut(n, c).fill(bias);
            }
        }
    }
    if is_depthwise(xs, ws, spec) {
        depthwise_forward(x, w, spec, &g, &mut out);
        return Ok(out);
    }
    let kk = g.cin_g * g.k * g.k;
    let p = g.ho * g.wo;
    let pointwise = is_pointwise(ws, spec);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    for n in 0..xs.n {
        let xn = x.sample(n);
        let on = out.sample_mut(n);
        for grp in 0..spec.groups {
            let src = &xn[grp * g.cin_g * xs.plane()..(grp + 1) * g.cin_g * xs.plane()];
            let b_mat: &[f64] = if pointwise {
                src
            } else {
                im2col(src, xs.h, xs.w, &g, spec, &mut cols);
                &cols
            };
            let a_mat = &w.data()[grp * g.cout_g * kk..(grp + 1) * g.cout_g * kk];
            let c_mat = &mut on[grp * g.cout_g * p..(grp + 1) * g.cout_g * p];
            gemm(g.cout_g, kk, p, a_mat, (kk, 1), b_mat, (p, 1), 1.0, c_mat, p);
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = geometry(xs, ws, spec)?;
    let p = g.ho * g.wo;
    let bias = need.2.then(|| {
        let mut db = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
        for n in 0..xs.n {
            for c in 0..ws.n {
                db.data_mut()[c] += grad_out.plane(n, c).iter().sum::<f64>();
            }
        }
        db
    });
    if is_depthwise(xs, ws, spec) {
        let (dx, dw) = depthwise_backward(x, w, grad_out, spec, &g, need.0, need.1);
        return Ok(ConvGrads {
            input: dx,
            weight: dw,
            bias,
        });
    }
    let kk = g.cin_g * g.k * g.k;
    let pointwise = is_pointwise(ws, spec);
    let mut dx = need.0.then(|| Tensor::zeros(xs));
    let mut dw = need.1.then(|| Tensor::zeros(ws));
    let mut cols = vec![0.0; if pointwise { 0 } else { kk * p }];
    let mut dcols = vec![0.0; if need.0 && !pointwise { kk * p } else { 0 }];
    for n in 0..xs.n {
        let xn = x.sample(n);
        let gn = grad_out.sample(n);
        for grp in 0..spec.groups {
            let in_range = grp * g.cin_g * xs.plane()..(grp + 1) * g.cin_g * xs.plane();
            let d_out = &gn[grp * g.cout_g * p..(grp + 1) * g.cout_g * p];
            let w_g = &w.data()[grp * g.cout_g * kk..(grp + 1) * g.cout_g * kk];
            if let Some(dw) = dw.as_mut() {
                let b_mat: &[f64] = if pointwise {
                    &xn[in_range.clone()]
                } else {
                    im2col(&xn[in_range.clone()], xs.h, xs.w, &g, spec, &mut cols);
                    &cols
                };
                let dw_g = &mut dw.data_mut()[grp * g.cout_g * kk..(grp + 1) * g.cout_g * kk];
                // dW (cout_g × kk) += dOut (cout_g × p) · colsᵀ (p × kk)
                gemm(g.cout_g, p, kk, d_out, (p, 1), b_mat, (1, p), 1.0, dw_g, kk);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx.sample_mut(n)[in_range];
                if pointwise {
                    // dX (cin × p) += Wᵀ (cin × cout) · dOut (cout × p)
                    gemm(kk, g.cout_g, p, w_g, (1, kk), d_out, (p, 1), 1.0, dxn, p);
                } else {
                    gemm(kk, g.cout_g, p, w_g, (1, kk), d_out, (p, 1), 0.0, &mut dcols, p);
                    col2im(&dcols, xs.h, xs.w, &g, spec, dxn);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias,
    })
}

fn depthwise_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec, g: &Geometry, out: &mut Tensor) {
    let xs = x.shape();
    let k = g.k;
    let pad = spec.padding as isize;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let taps = &w.data()[c * k * k..(c + 1) * k * k];
            let dst = out.plane_mut(n, c);
            for ky in 0..k {
                for kx in 0..k {
                    let wt = taps[ky * k + kx];
                    for oy in 0..g.ho {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize - pad;
                            if ix >= 0 && ix < xs.w as isize {
                                *d += wt * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let xs = x.shape();
    let k = g.k;
    let pad = spec.padding as isize;
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let gout = grad_out.plane(n, c);
            for ky in 0..k {
                for kx in 0..k {
                    let wt = w.data()[c * k * k + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize - pad;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            let go = gout[oy * g.wo + ox];
                            let si = iy * xs.w + ix as usize;
                            acc += go * src[si];
                            if let Some(dx) = dx.as_mut() {
                                dx.plane_mut(n, c)[si] += go * wt;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[c * k * k + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct seven-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let out = output_shape(xs, ws, spec).unwrap();
        let cout_g = ws.n / spec.groups;
        Tensor::from_fn(out, |n, co, oy, ox| {
            let grp = co / cout_g;
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for ci in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += w.get(co, ci, ky, kx) * x.get(n, grp * ws.c + ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_for_assorted_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (Shape::new(2, 3, 7, 9), Shape::new(4, 3, 3, 3), ConvSpec::same(3)),
            (Shape::new(1, 4, 11, 11), Shape::new(6, 4, 3, 3), ConvSpec::strided(3, 2)),
            (Shape::new(1, 4, 8, 8), Shape::new(4, 1, 3, 3), ConvSpec::depthwise(4, 2)),
            (Shape::new(2, 4, 5, 5), Shape::new(4, 1, 3, 3), ConvSpec::depthwise(4, 4)),
            (Shape::new(1, 4, 6, 6), Shape::new(2, 2, 3, 3), ConvSpec { groups: 2, ..ConvSpec::same(3) }),
            (Shape::new(2, 5, 4, 3), Shape::new(3, 5, 1, 1), ConvSpec::default()),
        ];
        for (xs, ws, spec) in cases {
            let x = random(xs, &mut rng);
            let w = random(ws, &mut rng);
            let b = random(Shape::new(1, ws.n, 1, 1), &mut rng);
            let fast = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
            let slow = naive(&x, &w, Some(&b), &spec);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn stride_two_halving_arithmetic() {
        let spec = ConvSpec::strided(3, 2);
        for (n, half) in [(352, 176), (11, 6), (6, 3), (3, 2), (1, 1)] {
            assert_eq!(spec.output_len(n, 3), Some(half));
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(2, 4, 3, 3));
        assert!(conv2d_forward(&x, &w, None, &ConvSpec::same(3)).is_err());
    }
}
