//! Fused neural-network primitives with hand-written backward passes.

use std::rc::Rc;

use crate::tensor::split_axis;
use crate::{Scalar, Tensor, Var};

fn softmax_axis_data<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = T::neg_infinity();
            for c in 0..n {
                m = m.max(x[base + c * inner]);
            }
            let mut s = T::zero();
            for c in 0..n {
                let e = (x[base + c * inner] - m).exp();
                y[base + c * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for c in 0..n {
                y[base + c * inner] *= inv;
            }
        }
    }
    y
}

fn softmax_axis_backward<T: Scalar>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut d = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for c in 0..n {
                dot += y[base + c * inner] * g[base + c * inner];
            }
            for c in 0..n {
                let k = base + c * inner;
                d[k] = y[k] * (g[k] - dot);
            }
        }
    }
    d
}

/// Contiguous-row softmax used by attention (`axis` is last).
fn softmax_rows_inplace<T: Scalar>(z: &mut [T], n: usize) {
    for row in z.chunks_exact_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn softmax(self, axis: usize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Rc::new(Tensor::new(shape.clone(), softmax_axis_data(x.data(), &shape, axis)));
        let saved = y.clone();
        let id = self.id();
        self.tape().op_shared(y, &[self], move |g, sink| {
            let d = softmax_axis_backward(saved.data(), g.data(), &shape, axis);
            sink.add(id, Tensor::new(shape.clone(), d));
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().expect("layer_norm on rank-0");
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), &[c], "gamma shape");
        assert_eq!(bv.shape(), &[c], "beta shape");
        let rows = x.len() / c;
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let (ix, ig, ib) = (self.id(), gamma.id(), beta.id());
        self.tape().op(Tensor::new(shape.clone(), out), &[self, gamma, beta], move |g, sink| {
            let gd = g.data();
            if sink.wants(ig) || sink.wants(ib) {
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let k = r * c + j;
                        dg[j] += gd[k] * xhat[k];
                        db[j] += gd[k];
                    }
                }
                sink.add(ig, Tensor::new(vec![c], dg));
                sink.add(ib, Tensor::new(vec![c], db));
            }
            if sink.wants(ix) {
                let mut dx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        let k = r * c + j;
                        let dh = gd[k] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[k];
                    }
                    mean_dh *= inv_c;
                    mean_dh_h *= inv_c;
                    for j in 0..c {
                        let k = r * c + j;
                        let dh = gd[k] * gv.data()[j];
                        dx[k] = rstd[r] * (dh - mean_dh - xhat[k] * mean_dh_h);
                    }
                }
                sink.add(ix, Tensor::new(shape.clone(), dx));
            }
        })
    }

    /// Softmax over the last axis of window-attention scores
    /// `[windows * batch, heads, n, n]` after adding a learned per-head
    /// bias `[heads, n, n]` and an optional constant mask `[windows, n, n]`
    /// (window index cycles fastest within the leading axis).
    pub fn attention_softmax(self, bias: Var<'t, T>, mask: Option<Rc<Tensor<T>>>) -> Var<'t, T> {
        let s = self.value();
        let shape = s.shape().to_vec();
        assert_eq!(shape.len(), 4, "attention scores must be rank 4");
        let (bw, heads, n) = (shape[0], shape[1], shape[2]);
        assert_eq!(shape[3], n);
        let bv = bias.value();
        assert_eq!(bv.shape(), &[heads, n, n], "attention bias shape");
        let plane = n * n;
        let mut z = s.data().to_vec();
        for w in 0..bw {
            for h in 0..heads {
                let zs = &mut z[(w * heads + h) * plane..(w * heads + h + 1) * plane];
                for (v, &b) in zs.iter_mut().zip(&bv.data()[h * plane..(h + 1) * plane]) {
                    *v += b;
                }
                if let Some(m) = &mask {
                    let nw = m.shape()[0];
                    let mw = &m.data()[(w % nw) * plane..(w % nw + 1) * plane];
                    for (v, &mv) in zs.iter_mut().zip(mw) {
                        *v += mv;
                    }
                }
            }
        }
        softmax_rows_inplace(&mut z, n);
        let y = Rc::new(Tensor::new(shape.clone(), z));
        let saved = y.clone();
        let (is, ib) = (self.id(), bias.id());
        self.tape().op_shared(y, &[self, bias], move |g, sink| {
            let yd = saved.data();
            let gd = g.data();
            let mut dz = vec![T::zero(); yd.len()];
            for ((dr, yr), gr) in dz.chunks_exact_mut(n).zip(yd.chunks_exact(n)).zip(gd.chunks_exact(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            if sink.wants(ib) {
                let mut db = vec![T::zero(); heads * plane];
                for w in 0..bw {
                    for h in 0..heads {
                        let src = &dz[(w * heads + h) * plane..(w * heads + h + 1) * plane];
                        for (acc, &v) in db[h * plane..(h + 1) * plane].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                sink.add(ib, Tensor::new(vec![heads, n, n], db));
            }
            sink.add(is, Tensor::new(shape.clone(), dz));
        })
    }

    /// Mean negative log-likelihood of `labels` under a softmax over axis 1
    /// of `[batch, classes, ...]` logits. `labels` is laid out like the
    /// logits with the class axis removed.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, c, inner) = split_axis(&shape, 1);
        assert_eq!(labels.len(), outer * inner, "label count does not match logits");
        let p = softmax_axis_data(x.data(), &shape, 1);
        let count = T::lit((outer * inner) as f64);
        let mut total = T::zero();
        for o in 0..outer {
            for i in 0..inner {
                let l = labels[o * inner + i];
                assert!(l < c, "label {l} out of range for {c} classes");
                let base = o * c * inner + i;
                // log-sum-exp for accuracy instead of ln(p)
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(x.data()[base + k * inner]);
                }
                let mut s = T::zero();
                for k in 0..c {
                    s += (x.data()[base + k * inner] - m).exp();
                }
                total += m + s.ln() - x.data()[base + l * inner];
            }
        }
        let labels = labels.to_vec();
        let id = self.id();
        self.tape().op(Tensor::scalar(total / count), &[self], move |g, sink| {
            let scale = g.item() / count;
            let mut d: Vec<T> = p.iter().map(|&v| v * scale).collect();
            for o in 0..outer {
                for i in 0..inner {
                    let l = labels[o * inner + i];
                    d[o * c * inner + l * inner + i] -= scale;
                }
            }
            sink.add(id, Tensor::new(shape.clone(), d));
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn uniform_logits_give_log_c() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 3, 3]));
        let labels = vec![1usize; 18];
        let l = x.cross_entropy(&labels);
        assert!((l.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 3, 2], &[0.1, -2.0, 3.0, 0.5, 1.0, 1.0]));
        let y = x.softmax(1).value();
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| y.data()[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
