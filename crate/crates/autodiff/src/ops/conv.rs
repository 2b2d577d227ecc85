use crate::error::{shape_err, Result};
use crate::scalar::{gemm, MatRef};
use crate::{Array, Scalar, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("conv kernel {k} (stride {stride}, pad {pad}) does not fit {h}x{w}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { ci, h, w, k, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let plane = g.ho * g.wo;
    let (k, s, p) = (g.k, g.stride, g.pad);
    for c in 0..g.ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * plane..][..plane];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.input_row(oy, ky) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let src = &x[(c * g.h + iy) * g.w..][..g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo >= hi {
                        continue;
                    }
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[lo + kx - p..hi + kx - p]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], x: &mut [T]) {
    let plane = g.ho * g.wo;
    let (k, s, p) = (g.k, g.stride, g.pad);
    for c in 0..g.ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * plane..][..plane];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut x[(c * g.h + iy) * g.w..][..g.w];
                    for ox in lo..hi {
                        let ix = ox * s + kx - p;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Dense 2-D convolution (cross-correlation), weight `[Co, Ci, k, k]`, optional bias `[Co]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let (b, ci, h, w) = xv.dims4()?;
        let (co, wci, kh, kw) = wv.dims4()?;
        if wci != ci || kh != kw {
            return Err(shape_err!("conv2d weight {:?} incompatible with input {:?}", wv.shape(), xv.shape()));
        }
        if let Some(bias) = bias {
            if bias.shape() != [co] {
                return Err(shape_err!("conv2d bias {:?}, expected [{co}]", bias.shape()));
            }
        }
        let g = Geometry::new(ci, h, w, kh, stride, pad)?;
        let (plane, krows) = (g.ho * g.wo, g.col_rows());
        let mut out = Array::zeros(&[b, co, g.ho, g.wo]);
        let wmat = MatRef::new(wv.data(), co, krows);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); krows * plane] };
        for bi in 0..b {
            let x = &xv.data()[bi * ci * h * w..(bi + 1) * ci * h * w];
            let dst = &mut out.data_mut()[bi * co * plane..(bi + 1) * co * plane];
            let cm = if g.is_pointwise() {
                MatRef::new(x, krows, plane)
            } else {
                im2col(&g, x, &mut col);
                MatRef::new(&col, krows, plane)
            };
            gemm(T::one(), wmat, cm, T::zero(), dst);
        }
        if let Some(bias) = bias {
            let bv = bias.value();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bb = bv.data()[i % co];
                chunk.iter_mut().for_each(|v| *v = *v + bb);
            }
        }
        let parents: Vec<Var<'t, T>> = std::iter::once(self).chain(std::iter::once(weight)).chain(bias).collect();
        Ok(self.new_op("conv2d", out, &parents, move |ctx| {
            let (xv, wv, gout) = (ctx.input(0), ctx.input(1), ctx.grad);
            let mut gx = ctx.needs[0].then(|| Array::zeros(xv.shape()));
            let mut gw = ctx.needs[1].then(|| Array::zeros(wv.shape()));
            let wmat = MatRef::new(wv.data(), co, krows);
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); krows * plane] };
            let mut gcol = if g.is_pointwise() || gx.is_none() { Vec::new() } else { vec![T::zero(); krows * plane] };
            for bi in 0..b {
                let x = &xv.data()[bi * ci * h * w..(bi + 1) * ci * h * w];
                let gmat = MatRef::new(&gout.data()[bi * co * plane..(bi + 1) * co * plane], co, plane);
                if let Some(gw) = gw.as_mut() {
                    let cm = if g.is_pointwise() {
                        MatRef::new(x, krows, plane)
                    } else {
                        im2col(&g, x, &mut col);
                        MatRef::new(&col, krows, plane)
                    };
                    gemm(T::one(), gmat, cm.t(), T::one(), gw.data_mut());
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx.data_mut()[bi * ci * h * w..(bi + 1) * ci * h * w];
                    if g.is_pointwise() {
                        gemm(T::one(), wmat.t(), gmat, T::zero(), gxb);
                    } else {
                        gemm(T::one(), wmat.t(), gmat, T::zero(), &mut gcol);
                        col2im(&g, &gcol, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut gb = Array::zeros(&[co]);
                    for (i, chunk) in gout.data().chunks(plane).enumerate() {
                        let s: T = chunk.iter().copied().sum();
                        gb.data_mut()[i % co] = gb.data()[i % co] + s;
                    }
                    gb
                }));
            }
            Ok(grads)
        }))
    }

    /// Depthwise convolution with stride 1, weight `[C, 1, k, k]`, optional bias `[C]`.
    pub fn depthwise_conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, pad: usize) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let (b, c, h, w) = xv.dims4()?;
        let (wc, one, k, kw) = wv.dims4()?;
        if wc != c || one != 1 || k != kw {
            return Err(shape_err!("depthwise weight {:?} incompatible with input {:?}", wv.shape(), xv.shape()));
        }
        if let Some(bias) = bias {
            if bias.shape() != [c] {
                return Err(shape_err!("depthwise bias {:?}, expected [{c}]", bias.shape()));
            }
        }
        let g = Geometry::new(1, h, w, k, 1, pad)?;
        let (ho, wo) = (g.ho, g.wo);
        let mut out = Array::zeros(&[b, c, ho, wo]);
        let bvals = bias.map(|b| b.value());
        for (pi, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let ch = pi % c;
            let src = &xv.data()[pi * h * w..(pi + 1) * h * w];
            let kern = &wv.data()[ch * k * k..(ch + 1) * k * k];
            if let Some(bv) = &bvals {
                dst.fill(bv.data()[ch]);
            }
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kern[ky * k + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let srow = &src[iy * w + lo + kx - pad..iy * w + hi + kx - pad];
                        let drow = &mut dst[oy * wo + lo..oy * wo + hi];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d = *d + wgt * s;
                        }
                    }
                }
            }
        }
        let parents: Vec<Var<'t, T>> = std::iter::once(self).chain(std::iter::once(weight)).chain(bias).collect();
        Ok(self.new_op("depthwise_conv2d", out, &parents, move |ctx| {
            let (xv, wv, gout) = (ctx.input(0), ctx.input(1), ctx.grad);
            let mut gx = ctx.needs[0].then(|| Array::zeros(xv.shape()));
            let mut gw = ctx.needs[1].then(|| Array::zeros(wv.shape()));
            for (pi, gplane) in gout.data().chunks(ho * wo).enumerate() {
                let ch = pi % c;
                let src = &xv.data()[pi * h * w..(pi + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = g.valid_cols(kx);
                        if lo >= hi {
                            continue;
                        }
                        let wgt = wv.data()[ch * k * k + ky * k + kx];
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let grow = &gplane[oy * wo + lo..oy * wo + hi];
                            let range = iy * w + lo + kx - pad..iy * w + hi + kx - pad;
                            if gw.is_some() {
                                acc = acc + grow.iter().zip(&src[range.clone()]).fold(T::zero(), |a, (&g, &s)| a + g * s);
                            }
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx.data_mut()[pi * h * w..(pi + 1) * h * w][range];
                                for (d, &g) in dst.iter_mut().zip(grow) {
                                    *d = *d + wgt * g;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let slot = &mut gw.data_mut()[ch * k * k + ky * k + kx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut gb = Array::zeros(&[c]);
                    for (pi, gplane) in gout.data().chunks(ho * wo).enumerate() {
                        let s: T = gplane.iter().copied().sum();
                        gb.data_mut()[pi % c] = gb.data()[pi % c] + s;
                    }
                    gb
                }));
            }
            Ok(grads)
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Array, Tape};

    /// Direct seven-loop convolution used as an oracle.
    fn naive_conv(x: &Array<f64>, w: &Array<f64>, stride: usize, pad: usize) -> Array<f64> {
        let (b, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Array::zeros(&[b, co, ho, wo]);
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.get(&[bi, c, iy as usize, ix as usize]) * w.get(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[bi, o, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Array<f64> {
        let mut s = seed;
        Array::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 8, 8), (1, 1, 0, 4, 3), (3, 2, 1, 7, 5), (3, 1, 0, 4, 4)] {
            let x = pseudo(&[2, 3, h, w], 1);
            let wt = pseudo(&[4, 3, k, k], 2);
            let tape = Tape::<f64>::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(wt.clone()), None, stride, pad).unwrap();
            let expect = naive_conv(&x, &wt, stride, pad);
            assert_eq!(y.shape(), expect.shape().to_vec());
            for (a, b) in y.value().data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_matches_naive_per_channel() {
        let x = pseudo(&[2, 3, 5, 4], 3);
        let wt = pseudo(&[3, 1, 3, 3], 4);
        let tape = Tape::<f64>::new();
        let y = tape.constant(x.clone()).depthwise_conv2d(tape.constant(wt.clone()), None, 1).unwrap();
        for c in 0..3 {
            let xc = Array::from_fn(&[2, 1, 5, 4], |i| {
                let (b, r) = (i / 20, i % 20);
                x.data()[(b * 3 + c) * 20 + r]
            });
            let wc = Array::from_vec(&[1, 1, 3, 3], wt.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let e = naive_conv(&xc, &wc, 1, 1);
            for b in 0..2 {
                for i in 0..20 {
                    let got = y.value().data()[(b * 3 + c) * 20 + i];
                    assert!((got - e.data()[b * 20 + i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Array::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Array::zeros(&[2, 4, 3, 3]));
        assert!(x.conv2d(w, None, 1, 1).is_err());
    }
}
