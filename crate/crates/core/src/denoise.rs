//! Trainable denoising front-end: a Gaussian convolution and an
//! eight-direction anisotropic diffusion run alongside the raw image, fused
//! by a 1x1 convolution, batch norm, ReLU and sigmoid into a weight map
//! that multiplies the input.

use msunet_autograd::{Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};

pub const PREFIX: &str = "denoise";
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// `(dy, dx, distance factor)`: N, S, W, E, then the four diagonals.
pub const DIRECTIONS: [(isize, isize, f64); 8] = [
    (-1, 0, 1.0),
    (1, 0, 1.0),
    (0, -1, 1.0),
    (0, 1, 1.0),
    (-1, -1, 0.5),
    (-1, 1, 0.5),
    (1, -1, 0.5),
    (1, 1, 0.5),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    /// Edge-stopping scale.
    pub k: f64,
    pub lambda: f64,
    pub rounds: usize,
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { k: 0.1, lambda: 0.125, rounds: 30, kernel_size: 5, sigma: 1.0 }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 0.125) {
            return Err(Error::StabilityBound { lambda: self.lambda });
        }
        if !(self.k > 0.0) || self.rounds == 0 {
            return Err(Error::Config("diffusion needs k > 0 and at least one round".into()));
        }
        if self.kernel_size % 2 == 0 || !(self.sigma > 0.0) {
            return Err(Error::Config("gaussian kernel needs an odd size and sigma > 0".into()));
        }
        Ok(())
    }
}

/// Normalised `size x size` Gaussian.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(y * y + x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn neighbour_index(h: usize, w: usize, dy: isize, dx: isize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let yy = (y + dy).clamp(0, h as isize - 1) as usize;
            let xx = (x + dx).clamp(0, w as isize - 1) as usize;
            idx.push(yy * w + xx);
        }
    }
    idx
}

/// One explicit diffusion step on every `(H, W)` plane of `image`:
/// `I + lambda * sum_d f_d * c_d * grad_d I` with
/// `c_d = exp(-(omega_d * grad_d I)^2 / k^2)` and replicated borders.
pub fn diffuse_step<'t, T: Scalar>(image: Var<'t, T>, omega: Var<'t, T>, k: f64, lambda: f64) -> Result<Var<'t, T>> {
    if !(lambda > 0.0 && lambda <= 0.125) {
        return Err(Error::StabilityBound { lambda });
    }
    let x = image.value();
    let om = omega.value();
    if om.len() != DIRECTIONS.len() {
        return Err(Error::Dimension(format!("{} direction weights, expected 8", om.len())));
    }
    let shape = x.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("diffusion needs (H, W) planes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let hw = h * w;
    let planes = x.len() / hw.max(1);
    let nbr: Vec<Vec<usize>> = DIRECTIONS.iter().map(|&(dy, dx, _)| neighbour_index(h, w, dy, dx)).collect();
    let inv_k2 = T::lit(1.0 / (k * k));
    let lam = T::lit(lambda);
    let mut out = x.data().to_vec();
    for p in 0..planes {
        let src = &x.data()[p * hw..(p + 1) * hw];
        let dst = &mut out[p * hw..(p + 1) * hw];
        for (d, &(_, _, f)) in DIRECTIONS.iter().enumerate() {
            let (wd, fd) = (om.data()[d], T::lit(f));
            for q in 0..hw {
                let g = src[nbr[d][q]] - src[q];
                let a = wd * g;
                let c = (-(a * a) * inv_k2).exp();
                dst[q] += lam * fd * c * g;
            }
        }
    }
    let (ii, io) = (image.id(), omega.id());
    let tape = image.tape();
    Ok(tape.op(Tensor::new(shape.clone(), out), &[image, omega], move |gout, sink| {
        let want_x = sink.wants(ii);
        let mut dx = if want_x { gout.data().to_vec() } else { Vec::new() };
        let mut dom = vec![T::zero(); DIRECTIONS.len()];
        let two = T::lit(2.0);
        for p in 0..planes {
            let src = &x.data()[p * hw..(p + 1) * hw];
            let gp = &gout.data()[p * hw..(p + 1) * hw];
            for (d, &(_, _, f)) in DIRECTIONS.iter().enumerate() {
                let (wd, fd) = (om.data()[d], T::lit(f));
                let mut acc = T::zero();
                for q in 0..hw {
                    let n = nbr[d][q];
                    let g = src[n] - src[q];
                    let a2 = wd * wd * g * g * inv_k2;
                    let c = (-a2).exp();
                    let scale = gp[q] * lam * fd * c;
                    acc += scale * g * (-two * wd * g * g * inv_k2);
                    if want_x {
                        let t = scale * (T::one() - two * a2);
                        dx[p * hw + n] += t;
                        dx[p * hw + q] -= t;
                    }
                }
                dom[d] += acc;
            }
        }
        sink.add(io, Tensor::new(vec![DIRECTIONS.len()], dom));
        if want_x {
            sink.add(ii, Tensor::new(shape.clone(), dx));
        }
    }))
}

/// `rounds` diffusion steps.
pub fn anisotropic<'t, T: Scalar>(image: Var<'t, T>, omega: Var<'t, T>, cfg: &DenoiseConfig) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let mut x = image;
    for _ in 0..cfg.rounds {
        x = diffuse_step(x, omega, cfg.k, cfg.lambda)?;
    }
    Ok(x)
}

/// Batch statistics of one training-mode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchStats {
    pub mean: f64,
    /// Unbiased variance, as accumulated into the running estimate.
    pub var: f64,
}

#[derive(Clone, Debug)]
pub struct DenoiseModule {
    pub config: DenoiseConfig,
    pub kernel: ParamId,
    pub omega: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub struct DenoiseOutput<'t, T: Scalar> {
    /// Weighted image `W * I`.
    pub image: Var<'t, T>,
    pub weight: Var<'t, T>,
    pub stats: Option<BatchStats>,
}

impl DenoiseModule {
    pub fn new<T: Scalar>(config: DenoiseConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut root = ParamBuilder::new(store, rng);
        let mut pb = root.scope(PREFIX);
        let ks = config.kernel_size;
        let g: Vec<T> = gaussian_kernel(ks, config.sigma).into_iter().map(T::lit).collect();
        let kernel = pb.tensor("gaussian.kernel", Tensor::new(vec![ks, ks], g));
        let omega = pb.ones("diffusion.omega", &[DIRECTIONS.len()]);
        // default initialisation of a 3 -> 1 pointwise convolution
        let bound = 1.0 / 3f64.sqrt();
        let fuse_w = pb.uniform("fuse.weight", &[3, 1], bound);
        let fuse_b = pb.uniform("fuse.bias", &[1], bound);
        let bn_gamma = pb.ones("bn.weight", &[1]);
        let bn_beta = pb.zeros("bn.bias", &[1]);
        let running_mean = pb.buffer("bn.running_mean", Tensor::zeros(&[1]));
        let running_var = pb.buffer("bn.running_var", Tensor::full(&[1], T::one()));
        Ok(Self { config, kernel, omega, fuse_w, fuse_b, bn_gamma, bn_beta, running_mean, running_var })
    }

    /// Forward pass over `[B, C, H, W]` images; channels are processed
    /// independently. `train` selects batch statistics for the norm.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>, train: bool) -> Result<DenoiseOutput<'t, T>> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("expected [B, C, H, W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = image.reshape(&[b * c, 1, h, w]);
        let smooth = x.conv2d_replicate(p.get(self.kernel));
        let diffused = anisotropic(x, p.get(self.omega), &self.config)?;
        let stacked = Var::concat(&[smooth, diffused, x], 1).permute(&[0, 2, 3, 1]);
        let z = stacked.linear(p.get(self.fuse_w), Some(p.get(self.fuse_b))).reshape(&[b * c, h, w]);
        let (zn, stats) = if train {
            let n = z.numel() as f64;
            let mean = z.mean();
            let centred = z.sub_b(mean);
            let var = centred.square().mean();
            let zn = centred.div_b(var.add_scalar(T::lit(BN_EPS)).sqrt());
            let vb = var.item().as_f64();
            let stats = BatchStats { mean: mean.item().as_f64(), var: if n > 1.0 { vb * n / (n - 1.0) } else { vb } };
            (zn, Some(stats))
        } else {
            let rm = p.get(self.running_mean);
            let rv = p.get(self.running_var);
            (z.sub_b(rm).div_b(rv.add_scalar(T::lit(BN_EPS)).sqrt()), None)
        };
        let y = zn.mul_b(p.get(self.bn_gamma)).add_b(p.get(self.bn_beta));
        let weight = y.relu().sigmoid().reshape(&[b, c, h, w]);
        Ok(DenoiseOutput { image: weight.mul(image), weight, stats })
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, stats: BatchStats) {
        let m = T::lit(BN_MOMENTUM);
        let rm = store.value_mut(self.running_mean);
        rm.data_mut()[0] = (T::one() - m) * rm.data()[0] + m * T::lit(stats.mean);
        let rv = store.value_mut(self.running_var);
        rv.data_mut()[0] = (T::one() - m) * rv.data()[0] + m * T::lit(stats.var);
    }

    /// Learnable scalars in the module.
    pub fn count(&self) -> usize {
        let ks = self.config.kernel_size;
        ks * ks + DIRECTIONS.len() + 3 + 1 + 2
    }
}
