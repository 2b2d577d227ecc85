use crate::error::{shape_err, Result};
use crate::{Array, Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    /// Layer normalization over the channel axis of `[B, C, H, W]`, independently at each
    /// pixel, followed by a per-channel affine map (`gamma`, `beta` of shape `[C]`).
    pub fn layer_norm_channels(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!("layer norm affine params must be [{c}]"));
        }
        let hw = h * w;
        let (gv, bv) = (gamma.value(), beta.value());
        let inv_c = T::lit(1.0 / c as f64);
        let eps = T::lit(eps);
        let mut mean = vec![T::zero(); b * hw];
        let mut rstd = vec![T::zero(); b * hw];
        let mut out = Array::zeros(xv.shape());
        for bi in 0..b {
            let x = &xv.data()[bi * c * hw..(bi + 1) * c * hw];
            let m = &mut mean[bi * hw..(bi + 1) * hw];
            let r = &mut rstd[bi * hw..(bi + 1) * hw];
            for ch in x.chunks(hw) {
                for (mm, &v) in m.iter_mut().zip(ch) {
                    *mm = *mm + v;
                }
            }
            m.iter_mut().for_each(|v| *v = *v * inv_c);
            for ch in x.chunks(hw) {
                for ((rr, &mm), &v) in r.iter_mut().zip(m.iter()).zip(ch) {
                    let d = v - mm;
                    *rr = *rr + d * d;
                }
            }
            r.iter_mut().for_each(|v| *v = (*v * inv_c + eps).sqrt().recip());
            let o = &mut out.data_mut()[bi * c * hw..(bi + 1) * c * hw];
            for (ci, (och, xch)) in o.chunks_mut(hw).zip(x.chunks(hw)).enumerate() {
                let (g, be) = (gv.data()[ci], bv.data()[ci]);
                for (((ov, &xv), &mm), &rr) in och.iter_mut().zip(xch).zip(m.iter()).zip(r.iter()) {
                    *ov = (xv - mm) * rr * g + be;
                }
            }
        }
        Ok(self.new_op("layer_norm", out, &[self, gamma, beta], move |ctx| {
            let (xv, gv, gout) = (ctx.input(0), ctx.input(1), ctx.grad);
            let mut gx = ctx.needs[0].then(|| Array::zeros(xv.shape()));
            let mut gg = Array::zeros(&[c]);
            let mut gb = Array::zeros(&[c]);
            let mut sum_d = vec![T::zero(); hw];
            let mut sum_dx = vec![T::zero(); hw];
            for bi in 0..b {
                let x = &xv.data()[bi * c * hw..(bi + 1) * c * hw];
                let g = &gout.data()[bi * c * hw..(bi + 1) * c * hw];
                let m = &mean[bi * hw..(bi + 1) * hw];
                let r = &rstd[bi * hw..(bi + 1) * hw];
                sum_d.fill(T::zero());
                sum_dx.fill(T::zero());
                for (ci, (xch, gch)) in x.chunks(hw).zip(g.chunks(hw)).enumerate() {
                    let gamma = gv.data()[ci];
                    let (mut acc_g, mut acc_b) = (T::zero(), T::zero());
                    for p in 0..hw {
                        let xhat = (xch[p] - m[p]) * r[p];
                        acc_g = acc_g + gch[p] * xhat;
                        acc_b = acc_b + gch[p];
                        let d = gch[p] * gamma;
                        sum_d[p] = sum_d[p] + d;
                        sum_dx[p] = sum_dx[p] + d * xhat;
                    }
                    gg.data_mut()[ci] = gg.data()[ci] + acc_g;
                    gb.data_mut()[ci] = gb.data()[ci] + acc_b;
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx.data_mut()[bi * c * hw..(bi + 1) * c * hw];
                    for (ci, ((dch, xch), gch)) in dst.chunks_mut(hw).zip(x.chunks(hw)).zip(g.chunks(hw)).enumerate() {
                        let gamma = gv.data()[ci];
                        for p in 0..hw {
                            let xhat = (xch[p] - m[p]) * r[p];
                            dch[p] = r[p] * (gch[p] * gamma - sum_d[p] * inv_c - xhat * sum_dx[p] * inv_c);
                        }
                    }
                }
            }
            Ok(vec![gx, ctx.needs[1].then_some(gg), ctx.needs[2].then_some(gb)])
        }))
    }
}
