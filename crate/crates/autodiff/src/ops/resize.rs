use crate::error::{Error, Result};
use crate::{Array, Scalar, Var};

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

/// Half-pixel-centre sampling positions (corners not aligned), clamped at the border.
fn taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            Tap { i0, i1, w0: T::lit(1.0 - l1), w1: T::lit(l1) }
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Bilinear resampling of `[B, C, H, W]` to `[B, C, out_h, out_w]` without corner alignment.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument(format!("resize target must be positive, got {out_h}x{out_w}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Argument("cannot resize an empty image".into()));
        }
        let (ty, tx) = (taps::<T>(h, out_h), taps::<T>(w, out_w));
        let mut out = Array::zeros(&[b, c, out_h, out_w]);
        for (dst, src) in out.data_mut().chunks_mut(out_h * out_w).zip(xv.data().chunks(h * w)) {
            for (oy, ry) in ty.iter().enumerate() {
                let (r0, r1) = (&src[ry.i0 * w..(ry.i0 + 1) * w], &src[ry.i1 * w..(ry.i1 + 1) * w]);
                for (ox, rx) in tx.iter().enumerate() {
                    let top = rx.w0 * r0[rx.i0] + rx.w1 * r0[rx.i1];
                    let bot = rx.w0 * r1[rx.i0] + rx.w1 * r1[rx.i1];
                    dst[oy * out_w + ox] = ry.w0 * top + ry.w1 * bot;
                }
            }
        }
        Ok(self.new_op("resize_bilinear", out, &[self], move |ctx| {
            let mut gx = Array::zeros(ctx.input(0).shape());
            for (dst, g) in gx.data_mut().chunks_mut(h * w).zip(ctx.grad.data().chunks(out_h * out_w)) {
                for (oy, ry) in ty.iter().enumerate() {
                    for (ox, rx) in tx.iter().enumerate() {
                        let gv = g[oy * out_w + ox];
                        let (top, bot) = (ry.w0 * gv, ry.w1 * gv);
                        dst[ry.i0 * w + rx.i0] = dst[ry.i0 * w + rx.i0] + top * rx.w0;
                        dst[ry.i0 * w + rx.i1] = dst[ry.i0 * w + rx.i1] + top * rx.w1;
                        dst[ry.i1 * w + rx.i0] = dst[ry.i1 * w + rx.i0] + bot * rx.w0;
                        dst[ry.i1 * w + rx.i1] = dst[ry.i1 * w + rx.i1] + bot * rx.w1;
                    }
                }
            }
            Ok(vec![Some(gx)])
        }))
    }
}
