use crate::error::{shape_err, Result};
use crate::{Array, Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    /// Separable filtering of every `[H, W]` plane with a fixed 1-D kernel applied along
    /// both axes, keeping only fully covered positions: output `[B, C, H-n+1, W-n+1]`.
    pub fn separable_filter_valid(self, kernel: &[f64]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4()?;
        let n = kernel.len();
        if n == 0 || n > h || n > w {
            return Err(shape_err!("filter of length {n} does not fit {h}x{w}"));
        }
        let k: Vec<T> = kernel.iter().map(|&v| T::lit(v)).collect();
        let (ho, wo) = (h - n + 1, w - n + 1);
        let mut out = Array::zeros(&[b, c, ho, wo]);
        let mut tmp = vec![T::zero(); h * wo];
        for (dst, src) in out.data_mut().chunks_mut(ho * wo).zip(xv.data().chunks(h * w)) {
            for y in 0..h {
                for x in 0..wo {
                    tmp[y * wo + x] = (0..n).fold(T::zero(), |a, j| a + k[j] * src[y * w + x + j]);
                }
            }
            for (i, &kv) in k.iter().enumerate() {
                for y in 0..ho {
                    let (d, s) = (&mut dst[y * wo..(y + 1) * wo], &tmp[(y + i) * wo..(y + i + 1) * wo]);
                    for (dd, &ss) in d.iter_mut().zip(s) {
                        *dd = *dd + kv * ss;
                    }
                }
            }
        }
        Ok(self.new_op("separable_filter", out, &[self], move |ctx| {
            let mut gx = Array::zeros(ctx.input(0).shape());
            let mut gtmp = vec![T::zero(); h * wo];
            for (dst, g) in gx.data_mut().chunks_mut(h * w).zip(ctx.grad.data().chunks(ho * wo)) {
                gtmp.fill(T::zero());
                for (i, &kv) in k.iter().enumerate() {
                    for y in 0..ho {
                        for x in 0..wo {
                            gtmp[(y + i) * wo + x] = gtmp[(y + i) * wo + x] + kv * g[y * wo + x];
                        }
                    }
                }
                for y in 0..h {
                    for x in 0..wo {
                        let gv = gtmp[y * wo + x];
                        for (j, &kv) in k.iter().enumerate() {
                            dst[y * w + x + j] = dst[y * w + x + j] + kv * gv;
                        }
                    }
                }
            }
            Ok(vec![Some(gx)])
        }))
    }
}
