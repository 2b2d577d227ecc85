use crate::error::{shape_err, Result};
use crate::{Array, Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    /// Splits channels of `[B, 2k, H, W]` in half and multiplies the halves elementwise.
    pub fn simple_gate(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (b, c2, h, w) = xv.dims4()?;
        if c2 % 2 != 0 {
            return Err(shape_err!("simple gate needs an even channel count, got {c2}"));
        }
        let half = c2 / 2 * h * w;
        let mut out = Array::zeros(&[b, c2 / 2, h, w]);
        for (dst, src) in out.data_mut().chunks_mut(half).zip(xv.data().chunks(2 * half)) {
            let (x1, x2) = src.split_at(half);
            for ((d, &a), &bb) in dst.iter_mut().zip(x1).zip(x2) {
                *d = a * bb;
            }
        }
        Ok(self.new_op("simple_gate", out, &[self], move |ctx| {
            let mut gx = Array::zeros(ctx.input(0).shape());
            for ((dst, src), g) in gx.data_mut().chunks_mut(2 * half).zip(ctx.input(0).data().chunks(2 * half)).zip(ctx.grad.data().chunks(half)) {
                let (x1, x2) = src.split_at(half);
                let (d1, d2) = dst.split_at_mut(half);
                for i in 0..half {
                    d1[i] = g[i] * x2[i];
                    d2[i] = g[i] * x1[i];
                }
            }
            Ok(vec![Some(gx)])
        }))
    }
}
