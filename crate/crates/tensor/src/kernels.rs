//! Forward and backward kernels shared by the eager and graph executors.
//!
//! All spatial kernels assume NCHW layout and stride-1 convolutions unless
//! the name says otherwise.

use crate::error::{invalid, Result, TensorError};
use crate::float::{gemm, Mat};
use crate::{Float, Tensor};

fn pad4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(invalid(op, format!("rank {} > 4 unsupported", shape.len())));
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

fn strides4(dims: &[usize; 4], out: &[usize; 4]) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        s[d] = if dims[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= dims[d];
    }
    s
}

/// Numpy-style broadcast of two shapes (rank at most 4).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let a4 = pad4("broadcast", a)?;
    let b4 = pad4("broadcast", b)?;
    let mut out = Vec::with_capacity(rank);
    for d in 4 - rank..4 {
        let (x, y) = (a4[d], b4[d]);
        if x != y && x != 1 && y != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                expected: a.to_vec(),
                got: b.to_vec(),
            });
        }
        out.push(x.max(y));
    }
    Ok(out)
}

/// Elementwise `f(a, b)` with broadcasting.
pub fn broadcast_binary<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let o4 = pad4("broadcast", &shape)?;
    let sa = strides4(&pad4("broadcast", a.shape())?, &o4);
    let sb = strides4(&pad4("broadcast", b.shape())?, &o4);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(o4.iter().product());
    for i0 in 0..o4[0] {
        for i1 in 0..o4[1] {
            for i2 in 0..o4[2] {
                let oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o4[3] {
                    out.push(f(ad[oa + i3 * sa[3]], bd[ob + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Sum `g` over the axes along which `shape` was broadcast.
pub fn reduce_to<F: Float>(g: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let g4 = pad4("reduce_to", g.shape())?;
    let t4 = pad4("reduce_to", shape)?;
    let st = strides4(&t4, &g4);
    let mut out = vec![F::zero(); shape.iter().product()];
    let gd = g.data();
    let mut k = 0;
    for i0 in 0..g4[0] {
        for i1 in 0..g4[1] {
            for i2 in 0..g4[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..g4[3] {
                    out[base + i3 * st[3]] += gd[k];
                    k += 1;
                }
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

// ---------------------------------------------------------------- conv2d

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeom {
    fn new<F: Float>(x: &Tensor<F>, w: &Tensor<F>, pad: usize) -> Result<Self> {
        let (n, cin, h, wd) = x.dims4()?;
        let (cout, wcin, kh, kw) = w.dims4()?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout, cin, kh, kw],
                got: w.shape().to_vec(),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(invalid("conv2d", "kernel larger than padded input"));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            pad,
            hout: h + 2 * pad - kh + 1,
            wout: wd + 2 * pad - kw + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column for kernel tap `kj` is in bounds.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.wout);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wout).max(lo);
        (lo, hi)
    }
}

fn im2col<F: Float>(g: &ConvGeom, x: &[F], col: &mut [F]) {
    let hw = g.hout * g.wout;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (lo, hi) = g.col_range(kj);
                for oy in 0..g.hout {
                    let drow = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    let iy = oy + ki;
                    if iy < g.pad || iy - g.pad >= g.h {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    drow[..lo].fill(F::zero());
                    drow[hi..].fill(F::zero());
                    if hi > lo {
                        let s0 = lo + kj - g.pad;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(g: &ConvGeom, col: &[F], x: &mut [F]) {
    let hw = g.hout * g.wout;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let (lo, hi) = g.col_range(kj);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.hout {
                    let iy = oy + ki;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst = &mut plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let s0 = lo + kj - g.pad;
                    let srow = &src[oy * g.wout + lo..oy * g.wout + hi];
                    for (d, &s) in dst[s0..s0 + (hi - lo)].iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn check_bias<F: Float>(op: &'static str, b: Option<&Tensor<F>>, c: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: vec![c],
                got: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Stride-1 zero-padded 2-D convolution; `w` is `(cout, cin, kh, kw)`.
pub fn conv2d<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeom::new(x, w, pad)?;
    check_bias("conv2d", b, g.cout)?;
    let (k, hw) = (g.k(), g.hout * g.wout);
    let mut out = vec![F::zero(); g.n * g.cout * hw];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); k * hw]
    };
    let xd = x.data();
    for ni in 0..g.n {
        let xn = &xd[ni * g.cin * g.h * g.w..(ni + 1) * g.cin * g.h * g.w];
        let cols: &[F] = if g.pointwise() {
            xn
        } else {
            im2col(&g, xn, &mut col);
            &col
        };
        let yn = &mut out[ni * g.cout * hw..(ni + 1) * g.cout * hw];
        gemm(
            Mat::n(w.data(), g.cout, k),
            Mat::n(cols, k, hw),
            F::zero(),
            yn,
        );
        if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                yn[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec([g.n, g.cout, g.hout, g.wout], out)
}

pub struct ConvGrads<F> {
    pub x: Option<Tensor<F>>,
    pub w: Tensor<F>,
    pub b: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    with_bias: bool,
    pad: usize,
    gy: &Tensor<F>,
    need_x: bool,
) -> Result<ConvGrads<F>> {
    let g = ConvGeom::new(x, w, pad)?;
    gy.expect_shape("conv2d_backward", &[g.n, g.cout, g.hout, g.wout])?;
    let (k, hw) = (g.k(), g.hout * g.wout);
    let xsz = g.cin * g.h * g.w;
    let mut gw = vec![F::zero(); g.cout * k];
    let mut gx = if need_x {
        vec![F::zero(); g.n * xsz]
    } else {
        Vec::new()
    };
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); k * hw]
    };
    let mut dcol = if g.pointwise() || !need_x {
        Vec::new()
    } else {
        vec![F::zero(); k * hw]
    };
    let (xd, gyd) = (x.data(), gy.data());
    for ni in 0..g.n {
        let xn = &xd[ni * xsz..(ni + 1) * xsz];
        let gyn = &gyd[ni * g.cout * hw..(ni + 1) * g.cout * hw];
        let cols: &[F] = if g.pointwise() {
            xn
        } else {
            im2col(&g, xn, &mut col);
            &col
        };
        gemm(Mat::n(gyn, g.cout, hw), Mat::t(cols, hw, k), F::one(), &mut gw);
        if need_x {
            let wt = Mat::t(w.data(), k, g.cout);
            if g.pointwise() {
                gemm(wt, Mat::n(gyn, g.cout, hw), F::zero(), &mut gx[ni * xsz..(ni + 1) * xsz]);
            } else {
                gemm(wt, Mat::n(gyn, g.cout, hw), F::zero(), &mut dcol);
                col2im(&g, &dcol, &mut gx[ni * xsz..(ni + 1) * xsz]);
            }
        }
    }
    let gb = with_bias.then(|| channel_sums(gy));
    Ok(ConvGrads {
        x: if need_x {
            Some(Tensor::from_vec(x.shape().to_vec(), gx)?)
        } else {
            None
        },
        w: Tensor::from_vec(w.shape().to_vec(), gw)?,
        b: gb.map(|v| Tensor::from_vec([v.len()], v)).transpose()?,
    })
}

/// Per-channel sum over N, H, W of a rank-4 tensor.
fn channel_sums<F: Float>(t: &Tensor<F>) -> Vec<F> {
    let [n, c, h, w] = pad4("channel_sums", t.shape()).unwrap_or([0; 4]);
    let hw = h * w;
    let mut s = vec![F::zero(); c];
    let d = t.data();
    for ni in 0..n {
        for (ci, acc) in s.iter_mut().enumerate() {
            let off = (ni * c + ci) * hw;
            *acc += d[off..off + hw].iter().copied().sum::<F>();
        }
    }
    s
}

// ------------------------------------------------------ transposed conv 2x2

fn convt_dims<F: Float>(x: &Tensor<F>, w: &Tensor<F>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4()?;
    if wcin != cin || kh != 2 || kw != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2x2",
            expected: vec![cin, cout, 2, 2],
            got: w.shape().to_vec(),
        });
    }
    Ok((n, cin, h, wd, cout))
}

/// 2x2 transposed convolution with stride 2; `w` is `(cin, cout, 2, 2)`.
pub fn conv_transpose2x2<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let (n, cin, h, wd, cout) = convt_dims(x, w)?;
    check_bias("conv_transpose2x2", b, cout)?;
    let hw = h * wd;
    let (ho, wo) = (2 * h, 2 * wd);
    let mut z = vec![F::zero(); cout * 4 * hw];
    let mut out = vec![F::zero(); n * cout * ho * wo];
    for ni in 0..n {
        let xn = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        gemm(Mat::t(w.data(), cout * 4, cin), Mat::n(xn, cin, hw), F::zero(), &mut z);
        let on = &mut out[ni * cout * ho * wo..(ni + 1) * cout * ho * wo];
        for co in 0..cout {
            let bias = b.map_or(F::zero(), |b| b.data()[co]);
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &z[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        let orow = &mut on[(co * ho + 2 * i + a) * wo..][..wo];
                        for j in 0..wd {
                            orow[2 * j + bb] = zr[i * wd + j] + bias;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, cout, ho, wo], out)
}

pub fn conv_transpose2x2_backward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    with_bias: bool,
    gy: &Tensor<F>,
    need_x: bool,
) -> Result<ConvGrads<F>> {
    let (n, cin, h, wd, cout) = convt_dims(x, w)?;
    let (ho, wo) = (2 * h, 2 * wd);
    gy.expect_shape("conv_transpose2x2_backward", &[n, cout, ho, wo])?;
    let hw = h * wd;
    let mut dz = vec![F::zero(); cout * 4 * hw];
    let mut gw = vec![F::zero(); cin * cout * 4];
    let mut gx = if need_x {
        vec![F::zero(); n * cin * hw]
    } else {
        Vec::new()
    };
    for ni in 0..n {
        let gn = &gy.data()[ni * cout * ho * wo..(ni + 1) * cout * ho * wo];
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &mut dz[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        let grow = &gn[(co * ho + 2 * i + a) * wo..][..wo];
                        for j in 0..wd {
                            zr[i * wd + j] = grow[2 * j + bb];
                        }
                    }
                }
            }
        }
        let xn = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        gemm(Mat::n(xn, cin, hw), Mat::t(&dz, hw, cout * 4), F::one(), &mut gw);
        if need_x {
            gemm(
                Mat::n(w.data(), cin, cout * 4),
                Mat::n(&dz, cout * 4, hw),
                F::zero(),
                &mut gx[ni * cin * hw..(ni + 1) * cin * hw],
            );
        }
    }
    let gb = with_bias.then(|| channel_sums(gy));
    Ok(ConvGrads {
        x: if need_x {
            Some(Tensor::from_vec(x.shape().to_vec(), gx)?)
        } else {
            None
        },
        w: Tensor::from_vec(w.shape().to_vec(), gw)?,
        b: gb.map(|v| Tensor::from_vec([v.len()], v)).transpose()?,
    })
}

// ------------------------------------------------------------- reductions

/// Scatter `g` back to the positions recorded by an arg-max reduction.
pub fn scatter_argmax<F: Float>(shape: &[usize], idx: &[usize], g: &Tensor<F>) -> Result<Tensor<F>> {
    let mut out = vec![F::zero(); shape.iter().product()];
    for (&i, &v) in idx.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// 2x2 max pooling with stride 2. Returns the arg-max flat index per output.
pub fn max_pool2x2<F: Float>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("max_pool2x2", format!("odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &q in &cands[1..] {
                    if d[q] > d[best] {
                        best = q;
                    }
                }
                out.push(d[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_vec([n, c, ho, wo], out)?, idx))
}

/// Mean over H, W: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = F::one() / F::from_usize(hw).unwrap();
    let out = x.data().chunks(hw).map(|p| p.iter().copied().sum::<F>() * inv).collect();
    Tensor::from_vec([n, c, 1, 1], out)
}

pub fn global_avg_pool_backward<F: Float>(shape: &[usize], g: &Tensor<F>) -> Result<Tensor<F>> {
    let hw = shape[2] * shape[3];
    let inv = F::one() / F::from_usize(hw).unwrap();
    let mut out = Vec::with_capacity(shape.iter().product());
    for &gv in g.data() {
        out.extend(std::iter::repeat_n(gv * inv, hw));
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// Max over H, W with arg-max indices.
pub fn global_max_pool<F: Float>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let d = x.data();
    let mut out = Vec::with_capacity(n * c);
    let mut idx = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let base = p * hw;
        let mut best = base;
        for q in base + 1..base + hw {
            if d[q] > d[best] {
                best = q;
            }
        }
        out.push(d[best]);
        idx.push(best);
    }
    Ok((Tensor::from_vec([n, c, 1, 1], out)?, idx))
}

/// Mean over channels: `(n, c, h, w) -> (n, 1, h, w)`.
pub fn channel_mean<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = F::one() / F::from_usize(c).unwrap();
    let d = x.data();
    let mut out = vec![F::zero(); n * hw];
    for ni in 0..n {
        let o = &mut out[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let p = &d[(ni * c + ci) * hw..][..hw];
            o.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::from_vec([n, 1, h, w], out)
}

pub fn channel_mean_backward<F: Float>(shape: &[usize], g: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let inv = F::one() / F::from_usize(c).unwrap();
    let mut out = Vec::with_capacity(n * c * hw);
    for ni in 0..n {
        let gp = &g.data()[ni * hw..(ni + 1) * hw];
        for _ in 0..c {
            out.extend(gp.iter().map(|&v| v * inv));
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// Max over channels with arg-max indices.
pub fn channel_max<F: Float>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let d = x.data();
    let mut out = Vec::with_capacity(n * hw);
    let mut idx = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let mut best = ni * c * hw + p;
            for ci in 1..c {
                let q = (ni * c + ci) * hw + p;
                if d[q] > d[best] {
                    best = q;
                }
            }
            out.push(d[best]);
            idx.push(best);
        }
    }
    Ok((Tensor::from_vec([n, 1, h, w], out)?, idx))
}

/// Concatenate rank-4 tensors along the channel axis.
pub fn concat_channels<F: Float>(xs: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut ctot = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: vec![n, xc, h, w],
                got: x.shape().to_vec(),
            });
        }
        ctot += xc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * ctot * hw);
    for ni in 0..n {
        for x in xs {
            let c = x.shape()[1];
            out.extend_from_slice(&x.data()[ni * c * hw..(ni + 1) * c * hw]);
        }
    }
    Tensor::from_vec([n, ctot, h, w], out)
}

/// Channels `[start, start + len)` of a rank-4 tensor.
pub fn narrow_channels<F: Float>(x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c {
        return Err(invalid("narrow_channels", format!("{start}+{len} > {c}")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        out.extend_from_slice(&x.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
    }
    Tensor::from_vec([n, len, h, w], out)
}

/// Inverse of [`narrow_channels`]: zero tensor of `shape` with `g` written at `start`.
pub fn unnarrow_channels<F: Float>(shape: &[usize], start: usize, g: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let len = g.shape()[1];
    let mut out = vec![F::zero(); n * c * hw];
    for ni in 0..n {
        out[(ni * c + start) * hw..(ni * c + start + len) * hw]
            .copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
    }
    Tensor::from_vec(shape.to_vec(), out)
}

// ------------------------------------------------------------- batch norm

/// Saved state of a batch-norm forward pass.
pub struct BnSaved<F> {
    pub xhat: Tensor<F>,
    pub invstd: Vec<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

fn bn_check<F: Float>(x: &Tensor<F>, p: &Tensor<F>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if p.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            expected: vec![c],
            got: p.shape().to_vec(),
        });
    }
    Ok((n, c, h * w))
}

/// Batch norm over (N, H, W) per channel. With `stats = None` the batch
/// statistics are used; otherwise the given `(mean, var)`.
pub fn batch_norm<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    stats: Option<(&[F], &[F])>,
    eps: F,
) -> Result<(Tensor<F>, BnSaved<F>)> {
    let (n, c, hw) = bn_check(x, weight)?;
    bn_check(x, bias)?;
    let d = x.data();
    let m = F::from_usize(n * hw).unwrap();
    let (mean, var) = match stats {
        Some((mu, var)) => {
            if mu.len() != c || var.len() != c {
                return Err(invalid("batch_norm", "running stats length"));
            }
            (mu.to_vec(), var.to_vec())
        }
        None => {
            let mut mean = vec![F::zero(); c];
            let mut var = vec![F::zero(); c];
            for ci in 0..c {
                let mut s = F::zero();
                for ni in 0..n {
                    s += d[(ni * c + ci) * hw..][..hw].iter().copied().sum::<F>();
                }
                let mu = s / m;
                let mut v = F::zero();
                for ni in 0..n {
                    v += d[(ni * c + ci) * hw..][..hw]
                        .iter()
                        .map(|&a| (a - mu) * (a - mu))
                        .sum::<F>();
                }
                mean[ci] = mu;
                var[ci] = v / m;
            }
            (mean, var)
        }
    };
    let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); d.len()];
    let mut y = vec![F::zero(); d.len()];
    let (wd, bd) = (weight.data(), bias.data());
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for k in off..off + hw {
                let xh = (d[k] - mean[ci]) * invstd[ci];
                xhat[k] = xh;
                y[k] = wd[ci] * xh + bd[ci];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_vec(shape.clone(), y)?,
        BnSaved {
            xhat: Tensor::from_vec(shape, xhat)?,
            invstd,
            mean,
            var,
        },
    ))
}

/// Gradients `(x, weight, bias)` of [`batch_norm`]. `batch_stats` selects the
/// training-mode formula (statistics depend on `x`).
pub fn batch_norm_backward<F: Float>(
    saved: &BnSaved<F>,
    weight: &Tensor<F>,
    gy: &Tensor<F>,
    batch_stats: bool,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (n, c, hw) = bn_check(gy, weight)?;
    let (g, xh, wd) = (gy.data(), saved.xhat.data(), weight.data());
    let m = F::from_usize(n * hw).unwrap();
    let mut gw = vec![F::zero(); c];
    let mut gb = vec![F::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for k in off..off + hw {
                gw[ci] += g[k] * xh[k];
                gb[ci] += g[k];
            }
        }
    }
    let mut gx = vec![F::zero(); g.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let scale = wd[ci] * saved.invstd[ci];
            if batch_stats {
                // d xhat sums are w * gb and w * gw.
                for k in off..off + hw {
                    gx[k] = scale * (g[k] - (gb[ci] + xh[k] * gw[ci]) / m);
                }
            } else {
                for k in off..off + hw {
                    gx[k] = scale * g[k];
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(gy.shape().to_vec(), gx)?,
        Tensor::from_vec([c], gw)?,
        Tensor::from_vec([c], gb)?,
    ))
}

// ------------------------------------------------------ separable filters

/// Per-plane `K_h * X * K_w^T` where `kh` is `h x h` and `kw` is `w x w`.
pub fn separable_filter<F: Float>(x: &Tensor<F>, kh: &[F], kw: &[F]) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    if kh.len() != h * h || kw.len() != w * w {
        return Err(invalid("separable_filter", "filter matrix size"));
    }
    let mut tmp = vec![F::zero(); h * w];
    let mut out = vec![F::zero(); n * c * h * w];
    for (p, o) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        gemm(Mat::n(p, h, w), Mat::t(kw, w, w), F::zero(), &mut tmp);
        gemm(Mat::n(kh, h, h), Mat::n(&tmp, h, w), F::zero(), o);
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn separable_filter_backward<F: Float>(gy: &Tensor<F>, kh: &[F], kw: &[F]) -> Result<Tensor<F>> {
    let (n, c, h, w) = gy.dims4()?;
    let mut tmp = vec![F::zero(); h * w];
    let mut out = vec![F::zero(); n * c * h * w];
    for (p, o) in gy.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        gemm(Mat::t(kh, h, h), Mat::n(p, h, w), F::zero(), &mut tmp);
        gemm(Mat::n(&tmp, h, w), Mat::n(kw, w, w), F::zero(), o);
    }
    Tensor::from_vec(gy.shape().to_vec(), out)
}

// ------------------------------------------------------- total variation

/// Sum of squared horizontal and vertical neighbour differences.
pub fn tv_sum<F: Float>(x: &Tensor<F>) -> Result<F> {
    let (_, _, h, w) = x.dims4()?;
    let mut s = F::zero();
    for p in x.data().chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let v = p[i * w + j];
                if j + 1 < w {
                    let d = p[i * w + j + 1] - v;
                    s += d * d;
                }
                if i + 1 < h {
                    let d = p[(i + 1) * w + j] - v;
                    s += d * d;
                }
            }
        }
    }
    Ok(s)
}

pub fn tv_sum_backward<F: Float>(x: &Tensor<F>, g: F) -> Result<Tensor<F>> {
    let (_, _, h, w) = x.dims4()?;
    let two = g + g;
    let mut out = vec![F::zero(); x.numel()];
    for (p, o) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                let v = p[i * w + j];
                if j + 1 < w {
                    let d = two * (p[i * w + j + 1] - v);
                    o[i * w + j + 1] += d;
                    o[i * w + j] -= d;
                }
                if i + 1 < h {
                    let d = two * (p[(i + 1) * w + j] - v);
                    o[(i + 1) * w + j] += d;
                    o[i * w + j] -= d;
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v).unwrap()
    }

    /// Direct six-loop convolution.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Vec<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = oy as isize + ki as isize - pad as isize;
                                    let ix = ox as isize + kj as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((ni * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((ni * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        t(shape, (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect())
    }

    #[test]
    fn conv_matches_naive() {
        for &(k, pad) in &[(3, 1), (1, 0), (7, 3), (3, 0)] {
            let x = ramp(&[2, 3, 9, 10], 1.0);
            let w = ramp(&[4, 3, k, k], 0.3);
            let y = conv2d(&x, &w, None, pad).unwrap();
            let naive = conv_naive(&x, &w, pad);
            for (a, b) in y.data().iter().zip(&naive) {
                assert!((a - b).abs() < 1e-12, "k={k} pad={pad}");
            }
        }
    }

    #[test]
    fn conv_transpose_places_patches() {
        // single input pixel spreads the kernel over a 2x2 block
        let x = t(&[1, 1, 1, 2], vec![1.0, 2.0]);
        let w = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = conv_transpose2x2(&x, &w, Some(&t(&[1], vec![0.5]))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn max_pool_tile() {
        let x = t(&[1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]);
        let (y, idx) = max_pool2x2(&x).unwrap();
        assert_eq!(y.data(), &[0.9]);
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn broadcast_and_reduce() {
        let a = t(&[2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::<f64>::ones([2, 3, 2, 2]);
        let y = broadcast_binary(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        assert_eq!(y.data()[4], 2.0);
        let r = reduce_to(&y, &[2, 3, 1, 1]).unwrap();
        assert_eq!(r.data(), &[4.0, 8.0, 12.0, 16.0, 20.0, 24.0]);
        assert!(broadcast_shape(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn tv_of_two_pixels() {
        let x = t(&[1, 1, 1, 2], vec![0.0, 1.0]);
        assert_eq!(tv_sum(&x).unwrap(), 1.0);
    }

    #[test]
    fn channel_reductions() {
        let x = t(&[1, 2, 1, 2], vec![1.0, 4.0, 3.0, 2.0]);
        assert_eq!(channel_mean(&x).unwrap().data(), &[2.0, 3.0]);
        let (m, idx) = channel_max(&x).unwrap();
        assert_eq!(m.data(), &[3.0, 4.0]);
        assert_eq!(idx, vec![2, 1]);
        let (g, _) = global_max_pool(&x).unwrap();
        assert_eq!(g.data(), &[4.0, 3.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5, 2.5]);
    }
}
