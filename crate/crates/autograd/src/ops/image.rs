//! Small-kernel image operators over the trailing `(H, W)` axes.

use crate::{Scalar, Tensor, Var};

/// Horizontal Sobel kernel, applied as a correlation (`Gx`).
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Vertical Sobel kernel (`Gy`), the transpose of [`SOBEL_X`].
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn plane_dims(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    assert!(r >= 2, "image op needs at least (H, W)");
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let planes = if h * w == 0 { 0 } else { shape.iter().product::<usize>() / (h * w) };
    (planes, h, w)
}

/// Sobel responses `(gx, gy)` of one plane, zero padded.
pub fn sobel_plane<T: Scalar>(img: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (T::zero(), T::zero());
            for a in 0..3 {
                let yy = y as isize + a as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for b in 0..3 {
                    let xx = x as isize + b as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let v = img[yy as usize * w + xx as usize];
                    sx += T::lit(SOBEL_X[a][b]) * v;
                    sy += T::lit(SOBEL_Y[a][b]) * v;
                }
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    (gx, gy)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Unnormalised Sobel gradient magnitude `sqrt(gx^2 + gy^2)` with zero
    /// padding. The gradient at points of zero magnitude is taken as zero.
    pub fn sobel_magnitude(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (planes, h, w) = plane_dims(&shape);
        let hw = h * w;
        let mut mag = vec![T::zero(); x.len()];
        let mut ux = vec![T::zero(); x.len()];
        let mut uy = vec![T::zero(); x.len()];
        for p in 0..planes {
            let (gx, gy) = sobel_plane(&x.data()[p * hw..(p + 1) * hw], h, w);
            for k in 0..hw {
                let m = (gx[k] * gx[k] + gy[k] * gy[k]).sqrt();
                mag[p * hw + k] = m;
                if m > T::zero() {
                    ux[p * hw + k] = gx[k] / m;
                    uy[p * hw + k] = gy[k] / m;
                }
            }
        }
        let id = self.id();
        self.tape().op(Tensor::new(shape.clone(), mag), &[self], move |g, sink| {
            let mut d = vec![T::zero(); g.len()];
            for p in 0..planes {
                let gd = &g.data()[p * hw..(p + 1) * hw];
                let dd = &mut d[p * hw..(p + 1) * hw];
                for y in 0..h {
                    for x in 0..w {
                        let k = y * w + x;
                        let dgx = gd[k] * ux[p * hw + k];
                        let dgy = gd[k] * uy[p * hw + k];
                        if dgx == T::zero() && dgy == T::zero() {
                            continue;
                        }
                        for a in 0..3 {
                            let yy = y as isize + a as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for b in 0..3 {
                                let xx = x as isize + b as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                dd[yy as usize * w + xx as usize] +=
                                    T::lit(SOBEL_X[a][b]) * dgx + T::lit(SOBEL_Y[a][b]) * dgy;
                            }
                        }
                    }
                }
            }
            sink.add(id, Tensor::new(shape.clone(), d));
        })
    }

    /// True 2-D convolution of every `(H, W)` plane with an odd square
    /// `kernel` `[k, k]`, replicate-padded so the output keeps the input size.
    pub fn conv2d_replicate(self, kernel: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let kv = kernel.value();
        let shape = x.shape().to_vec();
        let (planes, h, w) = plane_dims(&shape);
        let k = kv.shape()[0];
        assert!(kv.rank() == 2 && kv.shape()[1] == k && k % 2 == 1, "kernel must be odd square");
        let r = (k / 2) as isize;
        let hw = h * w;
        // src[(y*w + x) * k*k + a*k + b] = clamped input index of tap (a, b)
        let mut src = Vec::with_capacity(hw * k * k);
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for a in 0..k as isize {
                    let sy = (y - (a - r)).clamp(0, h as isize - 1) as usize;
                    for b in 0..k as isize {
                        let sx = (xx - (b - r)).clamp(0, w as isize - 1) as usize;
                        src.push(sy * w + sx);
                    }
                }
            }
        }
        let kk = k * k;
        let mut out = vec![T::zero(); x.len()];
        for p in 0..planes {
            let plane = &x.data()[p * hw..(p + 1) * hw];
            for q in 0..hw {
                let taps = &src[q * kk..(q + 1) * kk];
                out[p * hw + q] = taps.iter().zip(kv.data()).map(|(&s, &kw)| kw * plane[s]).sum();
            }
        }
        let (ix, ik) = (self.id(), kernel.id());
        let kshape = kv.shape().to_vec();
        self.tape().op(Tensor::new(shape.clone(), out), &[self, kernel], move |g, sink| {
            let want_x = sink.wants(ix);
            let mut dx = vec![T::zero(); if want_x { g.len() } else { 0 }];
            let mut dk = vec![T::zero(); kk];
            for p in 0..planes {
                let plane = &x.data()[p * hw..(p + 1) * hw];
                let gp = &g.data()[p * hw..(p + 1) * hw];
                for q in 0..hw {
                    let gv = gp[q];
                    let taps = &src[q * kk..(q + 1) * kk];
                    for t in 0..kk {
                        dk[t] += gv * plane[taps[t]];
                        if want_x {
                            dx[p * hw + taps[t]] += gv * kv.data()[t];
                        }
                    }
                }
            }
            sink.add(ik, Tensor::new(kshape.clone(), dk));
            if want_x {
                sink.add(ix, Tensor::new(shape.clone(), dx));
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn impulse_reproduces_kernel() {
        let tape = Tape::<f64>::new();
        let mut img = vec![0.0; 49];
        img[3 * 7 + 3] = 1.0;
        let x = tape.constant(Tensor::from_f64(&[7, 7], &img));
        let kvals: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let k = tape.leaf(Tensor::from_f64(&[3, 3], &kvals));
        let y = x.conv2d_replicate(k).value();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(y.data()[(2 + a) * 7 + 2 + b], kvals[a * 3 + b]);
            }
        }
    }

    #[test]
    fn sobel_of_constant_interior_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[5, 5], 1.0));
        let m = x.sobel_magnitude().value();
        assert_eq!(m.data()[2 * 5 + 2], 0.0);
        // zero padding makes the border respond
        assert!(m.data()[0] > 0.0);
    }
}
