//! Pointwise unary and same-shape binary operations.

use crate::{Scalar, Tensor, Var};

impl<'t, T: Scalar> Var<'t, T> {
    /// Pointwise map with derivative `d(x, y)` evaluated from input and output.
    pub fn map_pointwise(self, f: impl Fn(T) -> T, d: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = std::rc::Rc::new(x.map(f));
        let id = self.id();
        let y_saved = y.clone();
        self.tape().op_shared(y, &[self], move |g, sink| {
            let data = x
                .data()
                .iter()
                .zip(y_saved.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| gv * d(xv, yv))
                .collect();
            sink.add(id, Tensor::new(g.shape().to_vec(), data));
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.map_pointwise(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.map_pointwise(move |v| v + c, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.map_pointwise(|v| v.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.map_pointwise(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.map_pointwise(|v| v.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn square(self) -> Var<'t, T> {
        self.map_pointwise(|v| v * v, |x, _| x + x)
    }

    pub fn recip(self) -> Var<'t, T> {
        self.map_pointwise(|v| T::one() / v, |_, y| -(y * y))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.map_pointwise(|v| if v > T::zero() { v } else { T::zero() }, |x, _| {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.map_pointwise(|v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.map_pointwise(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
        let half = T::lit(0.5);
        self.map_pointwise(
            move |v| half * v * (T::one() + (v * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-(half * x * x)).exp();
                cdf + x * pdf
            },
        )
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.map_pointwise(move |v| v.max(lo).min(hi), move |x, _| {
            if x < lo || x > hi {
                T::zero()
            } else {
                T::one()
            }
        })
    }

    fn binary_same(
        self,
        rhs: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "pointwise operands differ in shape");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        let (ia, ib) = (self.id(), rhs.id());
        self.tape().op(out, &[self, rhs], move |g, sink| {
            let shape = g.shape().to_vec();
            if sink.wants(ia) {
                let d = a.data().iter().zip(b.data()).zip(g.data()).map(|((&x, &y), &gv)| da(x, y, gv)).collect();
                sink.add(ia, Tensor::new(shape.clone(), d));
            }
            if sink.wants(ib) {
                let d = a.data().iter().zip(b.data()).zip(g.data()).map(|((&x, &y), &gv)| db(x, y, gv)).collect();
                sink.add(ib, Tensor::new(shape, d));
            }
        })
    }

    pub fn add(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary_same(rhs, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary_same(rhs, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary_same(rhs, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary_same(rhs, |x, y| x / y, |_, y, g| g / y, |x, y, g| -g * x / (y * y))
    }
}
