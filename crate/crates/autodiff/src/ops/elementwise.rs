use crate::array::numel;
use crate::error::{shape_err, Result};
use crate::{Array, Scalar, Var};

/// Output shape of a same-rank broadcast where every axis is equal or 1 on one side.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err!("broadcast needs equal rank: {:?} vs {:?}", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        })
        .collect()
}

fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output element as `(out_index, a_index, b_index)`.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        if o >= total {
            break;
        }
        // odometer over the leading axes
        let mut d = rank - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped like the broadcast output) down to `shape`.
pub(crate) fn reduce_to<T: Scalar>(g: &Array<T>, shape: &[usize]) -> Array<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Array::zeros(shape);
    let st = strides_in(shape, g.shape());
    let zero = vec![0; shape.len()];
    let (gd, od) = (g.data(), out.data_mut());
    for_each_bcast(g.shape(), &st, &zero, |o, i, _| od[i] = od[i] + gd[o]);
    out
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline(always)]
    fn apply<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        }
    }
}

fn binary<'t, T: Scalar>(op: BinOp, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(av.shape(), bv.shape())?;
    let mut out = Array::zeros(&out_shape);
    if av.shape() == bv.shape() {
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
            *o = op.apply(x, y);
        }
    } else {
        let (sa, sb) = (strides_in(av.shape(), &out_shape), strides_in(bv.shape(), &out_shape));
        let (ad, bd, od) = (av.data(), bv.data(), out.data_mut());
        for_each_bcast(&out_shape, &sa, &sb, |o, i, j| od[o] = op.apply(ad[i], bd[j]));
    }
    Ok(a.new_op(op.name(), out, &[a, b], move |ctx| {
        let (x, y, g) = (ctx.input(0), ctx.input(1), ctx.grad);
        let shape = g.shape();
        let (sa, sb) = (strides_in(x.shape(), shape), strides_in(y.shape(), shape));
        let mut ga = ctx.needs[0].then(|| Array::zeros(x.shape()));
        let mut gb = ctx.needs[1].then(|| Array::zeros(y.shape()));
        let (xd, yd, gd) = (x.data(), y.data(), g.data());
        match op {
            BinOp::Add | BinOp::Sub => {
                if let Some(ga) = ga.as_mut() {
                    *ga = reduce_to(g, x.shape());
                }
                if let Some(gb) = gb.as_mut() {
                    let r = reduce_to(g, y.shape());
                    *gb = if op == BinOp::Sub { r.map(|v| -v) } else { r };
                }
            }
            BinOp::Mul => {
                if let Some(ga) = ga.as_mut() {
                    let gad = ga.data_mut();
                    for_each_bcast(shape, &sa, &sb, |o, i, j| gad[i] = gad[i] + gd[o] * yd[j]);
                }
                if let Some(gb) = gb.as_mut() {
                    let gbd = gb.data_mut();
                    for_each_bcast(shape, &sa, &sb, |o, i, j| gbd[j] = gbd[j] + gd[o] * xd[i]);
                }
            }
            BinOp::Div => {
                if let Some(ga) = ga.as_mut() {
                    let gad = ga.data_mut();
                    for_each_bcast(shape, &sa, &sb, |o, i, j| gad[i] = gad[i] + gd[o] / yd[j]);
                }
                if let Some(gb) = gb.as_mut() {
                    let gbd = gb.data_mut();
                    for_each_bcast(shape, &sa, &sb, |o, i, j| {
                        gbd[j] = gbd[j] - gd[o] * xd[i] / (yd[j] * yd[j])
                    });
                }
            }
        }
        Ok(vec![ga, gb])
    }))
}

fn unary<'t, T: Scalar>(
    x: Var<'t, T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let out = x.value().map(f);
    x.new_op(name, out, &[x], move |ctx| {
        let (xv, yv, g) = (ctx.input(0), ctx.out, ctx.grad);
        let data = g.data().iter().zip(xv.data()).zip(yv.data()).map(|((&g, &x), &y)| g * df(x, y)).collect();
        Ok(vec![Some(Array::from_vec(xv.shape(), data)?)])
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(BinOp::Add, self, rhs)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(BinOp::Sub, self, rhs)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(BinOp::Mul, self, rhs)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(BinOp::Div, self, rhs)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        unary(self, "scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        unary(self, "add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn sqr(self) -> Var<'t, T> {
        unary(self, "sqr", |x| x * x, |x, _| x + x)
    }

    /// Gaussian error linear unit, exact (erf) form.
    pub fn gelu(self) -> Var<'t, T> {
        unary(
            self,
            "gelu",
            |x| {
                let v = x.as_f64();
                T::lit(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
            },
            |x, _| {
                let v = x.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                T::lit(cdf + v * pdf)
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn broadcast_mul_matches_manual() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::from_fn(&[2, 3, 2, 2], |i| i as f64), true);
        let s = tape.leaf(Array::from_f64(&[2, 3, 1, 1], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let y = x.mul(s).unwrap();
        let v = y.value();
        assert_eq!(v.get(&[1, 2, 1, 1]), 23.0 * 6.0);
        assert_eq!(v.get(&[0, 1, 0, 1]), 5.0 * 2.0);
        let loss = y.sum_all();
        let g = tape.backward(loss).unwrap();
        // d/ds[b,c] = sum over the 4 pixels of x[b,c]
        assert_eq!(g.get(s).unwrap().get(&[0, 0, 0, 0]), 0. + 1. + 2. + 3.);
        assert_eq!(g.get(x).unwrap().get(&[1, 1, 0, 0]), 5.0);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Array::zeros(&[2, 3]));
        let b = tape.constant(Array::zeros(&[2, 4]));
        assert!(matches!(a.add(b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn reduce_to_sums_broadcast_axes() {
        let g = Array::<f64>::from_fn(&[2, 2, 3], |i| i as f64);
        let r = reduce_to(&g, &[1, 2, 1]);
        assert_eq!(r.data(), &[0. + 1. + 2. + 6. + 7. + 8., 3. + 4. + 5. + 9. + 10. + 11.]);
    }
}
