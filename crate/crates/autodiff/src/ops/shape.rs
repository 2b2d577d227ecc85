use crate::array::numel;
use crate::error::{shape_err, Error, Result};
use crate::{Array, Scalar, Var};

/// Splits `shape` around `axis` into `(outer, dim, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.new_op("reshape", out, &[self], |ctx| {
            let x = ctx.input(0);
            Ok(vec![Some(ctx.grad.clone().reshape(x.shape())?)])
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {:?}", shape));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let out = Array::from_vec(&out_shape, data)?;
        Ok(self.new_op("narrow", out, &[self], move |ctx| {
            let mut gx = Array::zeros(&shape);
            let g = ctx.grad.data();
            let gxd = gx.data_mut();
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gxd[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(gx)])
        }))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::Argument("concat of empty list".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base_shape = values[0].shape().to_vec();
        if axis >= base_shape.len() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", base_shape));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base_shape.len()
                || s.iter().zip(&base_shape).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err!("concat shape mismatch {:?} vs {:?}", s, base_shape));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let dims: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let out = Array::from_vec(&out_shape, data)?;
        Ok(first.new_op("concat", out, parts, move |ctx| {
            let g = ctx.grad.data();
            let mut grads: Vec<Vec<T>> = dims.iter().map(|&d| Vec::with_capacity(outer * d * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &d) in grads.iter_mut().zip(&dims) {
                    gi.extend_from_slice(&g[off..off + d * inner]);
                    off += d * inner;
                }
            }
            grads
                .into_iter()
                .enumerate()
                .map(|(i, data)| {
                    if ctx.needs[i] {
                        Array::from_vec(ctx.input(i).shape(), data).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect()
        }))
    }

    /// Channel-to-space rearrangement: `[B, C·r², H, W] -> [B, C, H·r, W·r]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (b, cr, h, w) = v.dims4()?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(shape_err!("pixel_shuffle({r}) needs channels divisible by {}, got {cr}", r * r));
        }
        let c = cr / (r * r);
        let (ho, wo) = (h * r, w * r);
        // out[b, c, y*r+i, x*r+j] = in[b, c*r*r + i*r + j, y, x]
        let index = move |bi: usize, ci: usize, oy: usize, ox: usize| {
            let (y, i, x, j) = (oy / r, oy % r, ox / r, ox % r);
            ((bi * cr + ci * r * r + i * r + j) * h + y) * w + x
        };
        let mut out = Array::zeros(&[b, c, ho, wo]);
        {
            let (src, dst) = (v.data(), out.data_mut());
            let mut o = 0;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[o] = src[index(bi, ci, oy, ox)];
                            o += 1;
                        }
                    }
                }
            }
        }
        Ok(self.new_op("pixel_shuffle", out, &[self], move |ctx| {
            let mut gx = Array::zeros(ctx.input(0).shape());
            let (g, dst) = (ctx.grad.data(), gx.data_mut());
            let mut o = 0;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[index(bi, ci, oy, ox)] = g[o];
                            o += 1;
                        }
                    }
                }
            }
            Ok(vec![Some(gx)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Array, Tape, Var};

    #[test]
    fn pixel_shuffle_layout() {
        let tape = Tape::<f32>::new();
        // 4 channels of a 1x1 image -> one 2x2 channel in raster order
        let x = tape.constant(Array::from_vec(&[1, 4, 1, 1], vec![1., 2., 3., 4.]).unwrap());
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::from_fn(&[2, 4, 3], |i| i as f64), true);
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 3).unwrap();
        let y = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(*y.value(), *x.value());
        let g = tape.backward(y.sum_all()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
