use crate::error::{shape_err, Result};
use crate::ops::shape::split_axis;
use crate::{Array, Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        if axis >= xv.rank() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", xv.shape()));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = Array::zeros(xv.shape());
        let (x, y) = (xv.data(), out.data_mut());
        let mut mx = vec![T::zero(); inner];
        let mut den = vec![T::zero(); inner];
        for o in 0..outer {
            let base = o * n * inner;
            mx.copy_from_slice(&x[base..base + inner]);
            for k in 1..n {
                for (m, &v) in mx.iter_mut().zip(&x[base + k * inner..base + (k + 1) * inner]) {
                    *m = m.max(v);
                }
            }
            den.fill(T::zero());
            for k in 0..n {
                let r = base + k * inner..base + (k + 1) * inner;
                for ((yy, &v), (&m, d)) in y[r.clone()].iter_mut().zip(&x[r]).zip(mx.iter().zip(den.iter_mut())) {
                    *yy = (v - m).exp();
                    *d = *d + *yy;
                }
            }
            for k in 0..n {
                for (yy, &d) in y[base + k * inner..base + (k + 1) * inner].iter_mut().zip(&den) {
                    *yy = *yy / d;
                }
            }
        }
        Ok(self.new_op("softmax", out, &[self], move |ctx| {
            let (y, g) = (ctx.out.data(), ctx.grad.data());
            let mut gx = Array::zeros(ctx.out.shape());
            let dst = gx.data_mut();
            let mut dot = vec![T::zero(); inner];
            for o in 0..outer {
                let base = o * n * inner;
                dot.fill(T::zero());
                for k in 0..n {
                    let r = base + k * inner..base + (k + 1) * inner;
                    for ((d, &yy), &gg) in dot.iter_mut().zip(&y[r.clone()]).zip(&g[r]) {
                        *d = *d + yy * gg;
                    }
                }
                for k in 0..n {
                    for i in 0..inner {
                        let j = base + k * inner + i;
                        dst[j] = y[j] * (g[j] - dot[i]);
                    }
                }
            }
            Ok(vec![Some(gx)])
        }))
    }
}
