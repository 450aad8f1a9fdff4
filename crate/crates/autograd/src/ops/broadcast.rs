//! Binary operations where the right operand broadcasts into the left
//! operand's shape (numpy rules, right-aligned, size-1 or equal dims).

use crate::tensor::{numel, strides};
use crate::{Scalar, Tensor, Var};

/// For every flat index of `big`, the flat index of the broadcast `small`.
pub(crate) fn broadcast_offsets(big: &[usize], small: &[usize]) -> Vec<usize> {
    assert!(small.len() <= big.len(), "cannot broadcast {small:?} into {big:?}");
    let pad = big.len() - small.len();
    let small_strides = strides(small);
    // effective stride per big axis (0 where broadcast)
    let eff: Vec<usize> = (0..big.len())
        .map(|ax| {
            if ax < pad {
                0
            } else {
                let s = small[ax - pad];
                assert!(s == 1 || s == big[ax], "cannot broadcast {small:?} into {big:?}");
                if s == 1 {
                    0
                } else {
                    small_strides[ax - pad]
                }
            }
        })
        .collect();
    let n = numel(big);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..big.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < big[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums `g` (shaped like the big operand) back into the small shape.
pub(crate) fn reduce_to<T: Scalar>(g: &[T], offsets: &[usize], small: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); numel(small)];
    for (&o, &v) in offsets.iter().zip(g) {
        out[o] += v;
    }
    Tensor::new(small.to_vec(), out)
}

#[derive(Clone, Copy)]
enum Kind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Scalar> Var<'t, T> {
    fn bcast(self, rhs: Var<'t, T>, kind: Kind) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        let offs = std::rc::Rc::new(broadcast_offsets(a.shape(), b.shape()));
        let bd = b.data();
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(offs.iter())
            .map(|(&x, &o)| {
                let y = bd[o];
                match kind {
                    Kind::Add => x + y,
                    Kind::Sub => x - y,
                    Kind::Mul => x * y,
                    Kind::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        let (ia, ib) = (self.id(), rhs.id());
        self.tape().op(out, &[self, rhs], move |g, sink| {
            let bd = b.data();
            if sink.wants(ia) {
                let d: Vec<T> = match kind {
                    Kind::Add | Kind::Sub => g.data().to_vec(),
                    Kind::Mul => g.data().iter().zip(offs.iter()).map(|(&gv, &o)| gv * bd[o]).collect(),
                    Kind::Div => g.data().iter().zip(offs.iter()).map(|(&gv, &o)| gv / bd[o]).collect(),
                };
                sink.add(ia, Tensor::new(g.shape().to_vec(), d));
            }
            if sink.wants(ib) {
                let ad = a.data();
                let per: Vec<T> = match kind {
                    Kind::Add => g.data().to_vec(),
                    Kind::Sub => g.data().iter().map(|&v| -v).collect(),
                    Kind::Mul => g.data().iter().zip(ad).map(|(&gv, &x)| gv * x).collect(),
                    Kind::Div => g
                        .data()
                        .iter()
                        .zip(ad)
                        .zip(offs.iter())
                        .map(|((&gv, &x), &o)| -gv * x / (bd[o] * bd[o]))
                        .collect(),
                };
                sink.add(ib, reduce_to(&per, &offs, b.shape()));
            }
        })
    }

    pub fn add_b(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.bcast(rhs, Kind::Add)
    }

    pub fn sub_b(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.bcast(rhs, Kind::Sub)
    }

    pub fn mul_b(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.bcast(rhs, Kind::Mul)
    }

    pub fn div_b(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.bcast(rhs, Kind::Div)
    }
}
