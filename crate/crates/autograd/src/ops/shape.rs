//! Layout operations: reshape, permute, concatenation, slicing, rolls and
//! replicate-padded shifts.

use crate::tensor::{numel, split_axis, strides};
use crate::{Scalar, Tensor, Var};

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_stride[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let rows = n / inner_len;
    for _ in 0..rows {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(numel(shape), x.len(), "cannot reshape {:?} to {shape:?}", x.shape());
        let out = Tensor::new(shape.to_vec(), x.data().to_vec());
        let in_shape = x.shape().to_vec();
        let id = self.id();
        self.tape().op(out, &[self], move |g, sink| {
            sink.add(id, g.clone().reshaped(&in_shape));
        })
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let (data, out_shape) = permute_data(x.data(), x.shape(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let id = self.id();
        self.tape().op(Tensor::new(out_shape, data), &[self], move |g, sink| {
            let (d, s) = permute_data(g.data(), g.shape(), &inverse);
            sink.add(id, Tensor::new(s, d));
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Var<'t, T> {
        let r = self.shape().len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let total: usize = widths.iter().sum();
        parts[0].tape().op(Tensor::new(out_shape, out), parts, move |g, sink| {
            let mut start = 0;
            for ((&id, &w), shape) in ids.iter().zip(&widths).zip(&shapes) {
                if sink.wants(id) {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let s = o * total + start;
                        d.extend_from_slice(&g.data()[s..s + w]);
                    }
                    sink.add(id, Tensor::new(shape.clone(), d));
                }
                start += w;
            }
        })
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let id = self.id();
        self.tape().op(Tensor::new(out_shape, out), &[self], move |g, sink| {
            let mut d = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                let s = (o * n + start) * inner;
                d[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            sink.add(id, Tensor::new(shape.clone(), d));
        })
    }

    /// Cyclic shift along `axis`: element `i` moves to `i + shift (mod n)`.
    pub fn roll(self, axis: usize, shift: isize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::new(shape.clone(), roll_data(x.data(), &shape, axis, shift));
        let id = self.id();
        self.tape().op(out, &[self], move |g, sink| {
            sink.add(id, Tensor::new(shape.clone(), roll_data(g.data(), &shape, axis, -shift)));
        })
    }

    /// On a tensor whose last two axes are `(H, W)`, returns
    /// `out[.., y, x] = in[.., clamp(y + dy), clamp(x + dx)]`.
    pub fn shift_replicate(self, dy: isize, dx: isize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = x.len() / (h * w);
        let src = shift_index(h, w, dy, dx);
        let mut out = Vec::with_capacity(x.len());
        for p in 0..planes {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            out.extend(src.iter().map(|&s| plane[s]));
        }
        let id = self.id();
        self.tape().op(Tensor::new(shape.clone(), out), &[self], move |g, sink| {
            let mut d = vec![T::zero(); g.len()];
            for p in 0..planes {
                let gp = &g.data()[p * h * w..(p + 1) * h * w];
                let dp = &mut d[p * h * w..(p + 1) * h * w];
                for (&s, &gv) in src.iter().zip(gp) {
                    dp[s] += gv;
                }
            }
            sink.add(id, Tensor::new(shape.clone(), d));
        })
    }

    /// Gathers rows of a rank-2 table: `out[i, :] = table[index[i], :]`.
    pub fn index_rows(self, index: &[usize]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "index_rows expects a rank-2 table");
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            assert!(i < rows, "row index {i} out of range {rows}");
            out.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
        }
        let index = index.to_vec();
        let id = self.id();
        self.tape().op(Tensor::new(vec![index.len(), cols], out), &[self], move |g, sink| {
            let mut d = vec![T::zero(); rows * cols];
            for (k, &i) in index.iter().enumerate() {
                for c in 0..cols {
                    d[i * cols + c] += g.data()[k * cols + c];
                }
            }
            sink.add(id, Tensor::new(vec![rows, cols], d));
        })
    }
}

fn roll_data<T: Copy>(data: &[T], shape: &[usize], axis: usize, shift: isize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    if n == 0 {
        return data.to_vec();
    }
    let s = shift.rem_euclid(n as isize) as usize;
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        let block = &data[o * n * inner..(o + 1) * n * inner];
        // out[i] = in[(i - s) mod n]
        out.extend_from_slice(&block[(n - s) * inner..]);
        out.extend_from_slice(&block[..(n - s) * inner]);
    }
    out
}

fn shift_index(h: usize, w: usize, dy: isize, dx: isize) -> Vec<usize> {
    let mut src = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        let sy = (y + dy).clamp(0, h as isize - 1) as usize;
        for x in 0..w as isize {
            let sx = (x + dx).clamp(0, w as isize - 1) as usize;
            src.push(sy * w + sx);
        }
    }
    src
}
