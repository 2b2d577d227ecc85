use crate::error::{shape_err, Error, Result};
use crate::{Array, Scalar, Var};

impl<'t, T: Scalar> Var<'t, T> {
    /// Mean absolute difference.
    pub fn l1_mean(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(shape_err!("l1 shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
        }
        let n = T::lit(a.len().max(1) as f64);
        let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs().as_f64()).sum();
        Ok(self.new_op("l1_mean", Array::scalar(T::lit(s / a.len().max(1) as f64)), &[self, target], move |ctx| {
            let (a, b) = (ctx.input(0), ctx.input(1));
            let scale = ctx.grad.data()[0] / n;
            let sign: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    let d = x - y;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let gb = ctx.needs[1].then(|| Array::from_vec(b.shape(), sign.iter().map(|&v| -v).collect())).transpose()?;
            Ok(vec![Some(Array::from_vec(a.shape(), sign)?), gb])
        }))
    }

    /// Pixel-wise cross-entropy of `[B, K, H, W]` logits against `[B·H·W]` labels with label
    /// smoothing: target mass `1 - eps` on the true class and `eps / (K - 1)` on each other class.
    /// Pixels labelled `ignore` do not contribute; the mean runs over the remaining pixels.
    pub fn cross_entropy_smoothed(self, labels: &[u8], eps: f64, ignore: Option<u8>) -> Result<Var<'t, T>> {
        let zv = self.value();
        let (b, k, h, w) = zv.dims4()?;
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(shape_err!("{} labels for logits {:?}", labels.len(), zv.shape()));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Argument(format!("label smoothing must be in [0, 1), got {eps}")));
        }
        if let Some(bad) = labels.iter().find(|&&l| Some(l) != ignore && l as usize >= k) {
            return Err(Error::Argument(format!("label {bad} out of range for {k} classes")));
        }
        let on = T::lit(1.0 - eps);
        let off = if k > 1 { T::lit(eps / (k - 1) as f64) } else { T::zero() };
        let z = zv.data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = 0f64;
        let mut count = 0usize;
        for bi in 0..b {
            for p in 0..hw {
                let label = labels[bi * hw + p];
                if Some(label) == ignore {
                    continue;
                }
                count += 1;
                let at = |c: usize| (bi * k + c) * hw + p;
                let m = (0..k).map(|c| z[at(c)]).fold(T::neg_infinity(), T::max);
                let se: T = (0..k).map(|c| (z[at(c)] - m).exp()).sum();
                let lse = m + se.ln();
                for c in 0..k {
                    probs[at(c)] = (z[at(c)] - lse).exp();
                    let t = if c == label as usize { on } else { off };
                    total -= (t * (z[at(c)] - lse)).as_f64();
                }
            }
        }
        let denom = T::lit(count.max(1) as f64);
        let tsum = on + off * T::lit(k.saturating_sub(1) as f64);
        let labels = labels.to_vec();
        Ok(self.new_op("cross_entropy", Array::scalar(T::lit(total / count.max(1) as f64)), &[self], move |ctx| {
            let scale = ctx.grad.data()[0] / denom;
            let mut gz = Array::zeros(ctx.input(0).shape());
            let gd = gz.data_mut();
            for bi in 0..b {
                for p in 0..hw {
                    let label = labels[bi * hw + p];
                    if Some(label) == ignore {
                        continue;
                    }
                    for c in 0..k {
                        let i = (bi * k + c) * hw + p;
                        let t = if c == label as usize { on } else { off };
                        gd[i] = (probs[i] * tsum - t) * scale;
                    }
                }
            }
            Ok(vec![Some(gz)])
        }))
    }
}
