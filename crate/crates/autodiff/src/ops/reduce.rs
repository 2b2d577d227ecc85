use crate::error::Result;
use crate::{Array, Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn sum_all(self) -> Var<'t, T> {
        let v = self.value();
        let out = Array::scalar(v.sum());
        self.new_op("sum_all", out, &[self], |ctx| Ok(vec![Some(Array::full(ctx.input(0).shape(), ctx.grad.data()[0]))]))
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let v = self.value();
        let n = T::lit(v.len().max(1) as f64);
        let out = Array::scalar(v.mean());
        self.new_op("mean_all", out, &[self], move |ctx| {
            Ok(vec![Some(Array::full(ctx.input(0).shape(), ctx.grad.data()[0] / n))])
        })
    }

    /// Spatial mean of `[B, C, H, W]`, keeping dims: `[B, C, 1, 1]`.
    pub fn mean_hw(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (b, c, h, w) = v.dims4()?;
        let hw = h * w;
        let n = T::lit(hw as f64);
        let data = v.data().chunks(hw.max(1)).map(|p| T::lit(p.iter().map(|x| x.as_f64()).sum::<f64>() / hw as f64)).collect();
        let out = Array::from_vec(&[b, c, 1, 1], data)?;
        Ok(self.new_op("mean_hw", out, &[self], move |ctx| {
            let g = ctx.grad.data();
            let mut gx = Array::zeros(ctx.input(0).shape());
            for (plane, &gv) in gx.data_mut().chunks_mut(hw.max(1)).zip(g) {
                plane.fill(gv / n);
            }
            Ok(vec![Some(gx)])
        }))
    }
}
