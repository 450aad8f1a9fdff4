use super::broadcast::{broadcast_offsets, reduce_to};
use crate::{Scalar, Tensor, Var};

impl<'t, T: Scalar> Var<'t, T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let total = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        let id = self.id();
        self.tape().op(Tensor::scalar(total), &[self], move |g, sink| {
            sink.add(id, Tensor::full(&shape, g.item()));
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.numel();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let mut out_shape = x.shape().to_vec();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let offs = broadcast_offsets(x.shape(), &out_shape);
        let out = reduce_to(x.data(), &offs, &out_shape);
        let in_shape = x.shape().to_vec();
        let id = self.id();
        self.tape().op(out, &[self], move |g, sink| {
            let d: Vec<T> = offs.iter().map(|&o| g.data()[o]).collect();
            sink.add(id, Tensor::new(in_shape.clone(), d));
        })
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t, T> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(T::one() / T::lit(n as f64))
    }

    /// Weighted sum `sum_i w_i x_i` with constant weights of the same shape.
    pub fn dot_const(self, weights: &[T]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.len(), weights.len());
        let total = x.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let w = weights.to_vec();
        let shape = x.shape().to_vec();
        let id = self.id();
        self.tape().op(Tensor::scalar(total), &[self], move |g, sink| {
            let gv = g.item();
            sink.add(id, Tensor::new(shape.clone(), w.iter().map(|&v| v * gv).collect()));
        })
    }
}
