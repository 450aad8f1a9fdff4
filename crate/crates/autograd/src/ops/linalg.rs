use crate::scalar::{gemm, MatLayout};
use crate::{Scalar, Tensor, Var};

fn layout(rows: usize, cols: usize, transposed: bool) -> MatLayout {
    if transposed {
        MatLayout::t(rows, cols)
    } else {
        MatLayout::new(rows, cols)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let xs = x.shape().to_vec();
        let fan_in = *xs.last().expect("linear on rank-0 tensor");
        assert_eq!(wv.rank(), 2, "weight must be [in, out]");
        assert_eq!(wv.shape()[0], fan_in, "linear: input width {fan_in} vs weight {:?}", wv.shape());
        let fan_out = wv.shape()[1];
        let rows = x.len() / fan_in.max(1);
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bv = b.value();
            assert_eq!(bv.shape(), &[fan_out], "bias shape");
            for r in 0..rows {
                out[r * fan_out..(r + 1) * fan_out].copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(x.data(), MatLayout::new(rows, fan_in), wv.data(), MatLayout::new(fan_in, fan_out), beta, &mut out);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = fan_out;
        let (ix, iw) = (self.id(), w.id());
        let ib = b.map(|b| b.id());
        let mut parents = vec![self, w];
        parents.extend(b);
        self.tape().op(Tensor::new(out_shape, out), &parents, move |g, sink| {
            let gd = g.data();
            if sink.wants(ix) {
                let mut dx = vec![T::zero(); rows * fan_in];
                gemm(gd, MatLayout::new(rows, fan_out), wv.data(), MatLayout::t(fan_in, fan_out), T::zero(), &mut dx);
                sink.add(ix, Tensor::new(xs.clone(), dx));
            }
            if sink.wants(iw) {
                let mut dw = vec![T::zero(); fan_in * fan_out];
                gemm(x.data(), MatLayout::t(rows, fan_in), gd, MatLayout::new(rows, fan_out), T::zero(), &mut dw);
                sink.add(iw, Tensor::new(vec![fan_in, fan_out], dw));
            }
            if let Some(ib) = ib {
                if sink.wants(ib) {
                    let mut db = vec![T::zero(); fan_out];
                    for r in 0..rows {
                        for (acc, &v) in db.iter_mut().zip(&gd[r * fan_out..(r + 1) * fan_out]) {
                            *acc += v;
                        }
                    }
                    sink.add(ib, Tensor::new(vec![fan_out], db));
                }
            }
        })
    }

    /// Batched matrix product of `[B, .., ..]` operands, each optionally
    /// read transposed.
    pub fn bmm(self, rhs: Var<'t, T>, trans_a: bool, trans_b: bool) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.rank(), 3, "bmm lhs must be rank 3");
        assert_eq!(b.rank(), 3, "bmm rhs must be rank 3");
        let batch = a.shape()[0];
        assert_eq!(b.shape()[0], batch, "bmm batch mismatch");
        let (ar, ac) = (a.shape()[1], a.shape()[2]);
        let (br, bc) = (b.shape()[1], b.shape()[2]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "bmm inner dimension mismatch {:?} x {:?}", a.shape(), b.shape());
        let (sa, sb, sc) = (ar * ac, br * bc, m * n);
        let mut out = vec![T::zero(); batch * sc];
        for i in 0..batch {
            gemm(
                &a.data()[i * sa..(i + 1) * sa],
                layout(ar, ac, trans_a),
                &b.data()[i * sb..(i + 1) * sb],
                layout(br, bc, trans_b),
                T::zero(),
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        let (ia, ib) = (self.id(), rhs.id());
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape().op(Tensor::new(vec![batch, m, n], out), &[self, rhs], move |g, sink| {
            let gd = g.data();
            if sink.wants(ia) {
                let mut da = vec![T::zero(); batch * sa];
                for i in 0..batch {
                    let gi = &gd[i * sc..(i + 1) * sc];
                    let bi = &b.data()[i * sb..(i + 1) * sb];
                    let dai = &mut da[i * sa..(i + 1) * sa];
                    if trans_a {
                        // stored [k, m] = op(B) [k, n] @ dC^T [n, m]
                        gemm(bi, layout(br, bc, trans_b), gi, MatLayout::t(m, n), T::zero(), dai);
                    } else {
                        // [m, k] = dC [m, n] @ op(B)^T [n, k]
                        gemm(gi, MatLayout::new(m, n), bi, layout(br, bc, !trans_b), T::zero(), dai);
                    }
                }
                sink.add(ia, Tensor::new(a_shape.clone(), da));
            }
            if sink.wants(ib) {
                let mut db = vec![T::zero(); batch * sb];
                for i in 0..batch {
                    let gi = &gd[i * sc..(i + 1) * sc];
                    let ai = &a.data()[i * sa..(i + 1) * sa];
                    let dbi = &mut db[i * sb..(i + 1) * sb];
                    if trans_b {
                        // stored [n, k] = dC^T [n, m] @ op(A) [m, k]
                        gemm(gi, MatLayout::t(m, n), ai, layout(ar, ac, trans_a), T::zero(), dbi);
                    } else {
                        // [k, n] = op(A)^T [k, m] @ dC [m, n]
                        gemm(ai, layout(ar, ac, !trans_a), gi, MatLayout::new(m, n), T::zero(), dbi);
                    }
                }
                sink.add(ib, Tensor::new(b_shape.clone(), db));
            }
        })
    }
}
