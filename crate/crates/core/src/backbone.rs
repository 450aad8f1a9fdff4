//! Token-grid building blocks: patch embedding, merging and expanding,
//! and (shifted) window attention blocks.
//!
//! Feature maps are `[batch, height, width, channels]` tensors.

use std::rc::Rc;

use msunet_autograd::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub window_size: usize,
    pub num_heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    /// Channels seen by the patch projection. A single-channel image is
    /// replicated up to this count.
    pub in_chans: usize,
}

impl BlockConfig {
    pub fn toy() -> Self {
        Self { embed_dim: 32, window_size: 4, num_heads: vec![1, 2, 4, 8], depths: vec![2; 4], mlp_ratio: 4, patch_size: 4, in_chans: 1 }
    }

    pub fn full() -> Self {
        Self {
            embed_dim: 96,
            window_size: 7,
            num_heads: vec![3, 6, 12, 24],
            depths: vec![2; 4],
            mlp_ratio: 4,
            patch_size: 4,
            in_chans: 3,
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.num_heads.len() != self.depths.len() {
            return Err(Error::Config(format!("{} head counts for {} stages", self.num_heads.len(), self.depths.len())));
        }
        if self.patch_size == 0 || self.window_size == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.in_chans == 0 {
            return Err(Error::Config("patch, window, embed, mlp ratio and channels must be positive".into()));
        }
        for (s, &h) in self.num_heads.iter().enumerate() {
            if h == 0 || self.stage_dim(s) % h != 0 {
                return Err(Error::ChannelDivisibility { what: "attention heads", channels: self.stage_dim(s), divisor: h });
            }
        }
        Ok(())
    }
}

/// Window size and shift actually used on a `side`-sized grid: a window
/// that covers the whole grid is clamped to it and never shifted.
pub fn effective_window(side: usize, window: usize) -> (usize, usize) {
    if side <= window {
        (side, 0)
    } else {
        (window, window / 2)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let mut s = pb.scope(name);
        let w = s.trunc_normal("weight", &[fan_in, fan_out], INIT_STD);
        let b = bias.then(|| s.zeros("bias", &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize) -> Self {
        let mut s = pb.scope(name);
        Self { gamma: s.ones("weight", &[dim]), beta: s.zeros("bias", &[dim]) }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

fn dims4<T: Scalar>(x: Var<'_, T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "feature map must be [B, H, W, C], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Non-overlapping patch projection of `[B, C_in, H, W]` images.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
    pub in_chans: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, cfg: &BlockConfig) -> Self {
        let mut s = pb.scope("patch_embed");
        let k = cfg.in_chans * cfg.patch_size * cfg.patch_size;
        Self {
            proj: Linear::new(&mut s, "proj", k, cfg.embed_dim, true),
            norm: LayerNorm::new(&mut s, "norm", cfg.embed_dim),
            patch: cfg.patch_size,
            in_chans: cfg.in_chans,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("image must be [B, C, H, W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ps = self.patch;
        if h % ps != 0 || w % ps != 0 {
            return Err(Error::Dimension(format!("image {h}x{w} not divisible by patch {ps}")));
        }
        let image = if c == self.in_chans {
            image
        } else if c == 1 {
            Var::concat(&vec![image; self.in_chans], 1)
        } else {
            return Err(Error::Dimension(format!("{c} input channels, model expects {}", self.in_chans)));
        };
        let c = self.in_chans;
        let (hp, wp) = (h / ps, w / ps);
        let tokens = image.reshape(&[b, c, hp, ps, wp, ps]).permute(&[0, 2, 4, 1, 3, 5]).reshape(&[b, hp, wp, c * ps * ps]);
        Ok(self.norm.forward(p, self.proj.forward(p, tokens)))
    }
}

/// 2x2 neighbourhood concatenation followed by a linear reduction `4C -> 2C`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize) -> Self {
        let mut s = pb.scope(name);
        Self { norm: LayerNorm::new(&mut s, "norm", 4 * dim), reduction: Linear::new(&mut s, "reduction", 4 * dim, 2 * dim, false) }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, h, w, c) = dims4(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddDimension { what: "patch merging", height: h, width: w });
        }
        // channel blocks in (row offset, col offset) order (0,0), (1,0), (0,1), (1,1)
        let x = x.reshape(&[b, h / 2, 2, w / 2, 2, c]).permute(&[0, 1, 3, 4, 2, 5]).reshape(&[b, h / 2, w / 2, 4 * c]);
        Ok(self.reduction.forward(p, self.norm.forward(p, x)))
    }
}

/// Linear channel expansion followed by a depth-to-space rearrangement by
/// `factor`: `(H, W, C) -> (factor H, factor W, C_out)`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub factor: usize,
    pub out_dim: usize,
}

impl PatchExpand {
    /// The 2x variant: `C -> C / 2` channels.
    pub fn double<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::ChannelDivisibility { what: "patch expand", channels: dim, divisor: 2 });
        }
        let mut s = pb.scope(name);
        Ok(Self {
            expand: Linear::new(&mut s, "expand", dim, 2 * dim, false),
            norm: LayerNorm::new(&mut s, "norm", dim / 2),
            factor: 2,
            out_dim: dim / 2,
        })
    }

    /// The final variant that undoes the patch embedding: `factor`x upsampling
    /// keeping `C` channels.
    pub fn full_resolution<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize, factor: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            expand: Linear::new(&mut s, "expand", dim, factor * factor * dim, false),
            norm: LayerNorm::new(&mut s, "norm", dim),
            factor,
            out_dim: dim,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let (b, h, w, _) = dims4(x);
        let f = self.factor;
        let c = self.out_dim;
        let x = self.expand.forward(p, x);
        let x = x.reshape(&[b, h, w, f, f, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(&[b, h * f, w * f, c]);
        self.norm.forward(p, x)
    }
}

fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Additive mask `[windows, n, n]` that blocks attention between tokens
/// that were not neighbours before the cyclic shift.
pub fn shift_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: usize) -> Tensor<T> {
    let region = |v: usize, side: usize| {
        if v < side - window {
            0
        } else if v < side - shift {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            ids[y * w + x] = region(y, h) * 3 + region(x, w);
        }
    }
    let (nh, nw) = (h / window, w / window);
    let n = window * window;
    let mut mask = vec![T::zero(); nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let wid = wy * nw + wx;
            let tok = |t: usize| ids[(wy * window + t / window) * w + wx * window + t % window];
            for i in 0..n {
                for j in 0..n {
                    if tok(i) != tok(j) {
                        mask[(wid * n + i) * n + j] = T::lit(MASK_VALUE);
                    }
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, n, n], mask)
}

/// Multi-head self-attention inside fixed windows with a learned relative
/// position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub heads: usize,
    pub window: usize,
    rel_index: Rc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize, heads: usize, window: usize) -> Self {
        let mut s = pb.scope(name);
        let span = 2 * window - 1;
        Self {
            bias_table: s.trunc_normal("relative_position_bias_table", &[span * span, heads], INIT_STD),
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, true),
            proj: Linear::new(&mut s, "proj", dim, dim, true),
            heads,
            window,
            rel_index: Rc::new(relative_position_index(window)),
        }
    }

    /// Attention over windows `[Bw, n, C]`; returns the projected output
    /// and the attention weights `[Bw, heads, n, n]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        mask: Option<Rc<Tensor<T>>>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let s = x.shape();
        let (bw, n, c) = (s[0], s[1], s[2]);
        let nh = self.heads;
        let hd = c / nh;
        let qkv = self.qkv.forward(p, x).reshape(&[bw, n, 3, nh, hd]).permute(&[2, 0, 3, 1, 4]);
        let part = |i| qkv.narrow(0, i, 1).reshape(&[bw * nh, n, hd]);
        let q = part(0).scale(T::lit(1.0 / (hd as f64).sqrt()));
        let (k, v) = (part(1), part(2));
        let bias = p.get(self.bias_table).index_rows(&self.rel_index).transpose_last().reshape(&[nh, n, n]);
        let attn = q.bmm(k, false, true).reshape(&[bw, nh, n, n]).attention_softmax(bias, mask);
        let out = attn.reshape(&[bw * nh, n, n]).bmm(v, false, false);
        let out = out.reshape(&[bw, nh, n, hd]).permute(&[0, 2, 1, 3]).reshape(&[bw, n, c]);
        (self.proj.forward(p, out), attn)
    }
}

/// Pre-norm transformer block on windows of a fixed `(H, W)` grid, with an
/// optional half-window cyclic shift.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub resolution: (usize, usize),
    pub window: usize,
    pub shift: usize,
    mask: Option<Rc<Tensor<f64>>>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        resolution: (usize, usize),
        window: usize,
        shifted: bool,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let (h, w) = resolution;
        let (window, shift) = effective_window(h.min(w), window);
        let shift = if shifted { shift } else { 0 };
        if h % window != 0 || w % window != 0 {
            return Err(Error::WindowDivisibility { window, height: h, width: w });
        }
        if dim % heads != 0 {
            return Err(Error::ChannelDivisibility { what: "attention heads", channels: dim, divisor: heads });
        }
        let mut s = pb.scope(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: WindowAttention::new(&mut s, "attn", dim, heads, window),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            fc1: Linear::new(&mut s, "mlp.fc1", dim, mlp_ratio * dim, true),
            fc2: Linear::new(&mut s, "mlp.fc2", mlp_ratio * dim, dim, true),
            resolution,
            window,
            shift,
            mask: (shift > 0).then(|| Rc::new(shift_mask(h, w, window, shift))),
        })
    }

    fn partition<'t, T: Scalar>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let (b, h, w, c) = dims4(x);
        let ws = self.window;
        x.reshape(&[b, h / ws, ws, w / ws, ws, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(&[b * (h / ws) * (w / ws), ws * ws, c])
    }

    fn reverse<'t, T: Scalar>(&self, x: Var<'t, T>, b: usize, c: usize) -> Var<'t, T> {
        let (h, w) = self.resolution;
        let ws = self.window;
        x.reshape(&[b, h / ws, w / ws, ws, ws, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(&[b, h, w, c])
    }

    /// Returns the block output and the attention weights.
    pub fn forward_with_attention<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (b, h, w, c) = dims4(x);
        if (h, w) != self.resolution {
            return Err(Error::Dimension(format!("block built for {:?}, got {h}x{w}", self.resolution)));
        }
        let s = self.shift as isize;
        let mut y = self.norm1.forward(p, x);
        if s > 0 {
            y = y.roll(1, -s).roll(2, -s);
        }
        let mask = self.mask.as_ref().map(|m| Rc::new(m.cast::<T>()));
        let (a, attn) = self.attn.forward(p, self.partition(y), mask);
        let mut y = self.reverse(a, b, c);
        if s > 0 {
            y = y.roll(1, s).roll(2, s);
        }
        let x = x.add(y);
        let m = self.fc2.forward(p, self.fc1.forward(p, self.norm2.forward(p, x)).gelu());
        Ok((x.add(m), attn))
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_with_attention(p, x).map(|(y, _)| y)
    }
}

/// `depth` blocks alternating plain and shifted windows.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
}

impl SwinStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        resolution: (usize, usize),
        window: usize,
        depth: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let blocks = (0..depth)
            .map(|i| SwinBlock::new(&mut s, &format!("blocks.{i}"), dim, heads, resolution, window, i % 2 == 1, mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        Ok(x)
    }
}

/// Per-pixel class scores: `[B, H, W, C] -> [B, classes, H, W]`.
#[derive(Clone, Debug)]
pub struct LinearProjection {
    pub head: Linear,
}

impl LinearProjection {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, dim: usize, classes: usize) -> Self {
        Self { head: Linear::new(pb, name, dim, classes, true) }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.head.forward(p, x).permute(&[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use msunet_autograd::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn patch_embed_shapes_and_divisibility() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BlockConfig { embed_dim: 8, ..BlockConfig::toy() };
        let pe = PatchEmbed::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = pe.forward(&p, tape.constant(random(&[1, 1, 8, 8], 1))).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2, 8]);
        assert!(pe.forward(&p, tape.constant(random(&[1, 1, 6, 8], 1))).is_err());
    }

    #[test]
    fn patch_embed_constant_image_gives_equal_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BlockConfig { embed_dim: 16, patch_size: 4, ..BlockConfig::toy() };
        let pe = PatchEmbed::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        // identity projection on the first 16 inputs
        let mut eye = Tensor::zeros(&[16, 16]);
        for i in 0..16 {
            eye.data_mut()[i * 16 + i] = 1.0;
        }
        store.set(pe.proj.w, eye);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = pe.forward(&p, tape.constant(Tensor::full(&[1, 1, 8, 8], 0.3))).unwrap().value();
        let first = &y.data()[..16];
        for tok in y.data().chunks(16) {
            assert_eq!(tok, first);
        }
    }

    #[test]
    fn merge_then_expand_restores_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let merge = PatchMerging::new(&mut pb, "m", 8);
        let expand = PatchExpand::double(&mut pb, "e", 16).unwrap();
        assert!(PatchExpand::double(&mut pb, "bad", 7).is_err());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[2, 4, 6, 8], 2));
        let m = merge.forward(&p, x).unwrap();
        assert_eq!(m.shape(), vec![2, 2, 3, 16]);
        assert_eq!(expand.forward(&p, m).shape(), vec![2, 4, 6, 8]);
        assert!(merge.forward(&p, tape.constant(random(&[1, 3, 4, 8], 2))).is_err());
    }

    #[test]
    fn merge_gathers_two_by_two_neighbourhoods() {
        let tape = Tape::<f64>::new();
        // channel value encodes (y, x)
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 4, 4, 1], &vals));
        let g = x.reshape(&[1, 2, 2, 2, 2, 1]).permute(&[0, 1, 3, 4, 2, 5]).reshape(&[1, 2, 2, 4]).value();
        // token (0, 0): (0,0), (1,0), (0,1), (1,1)
        assert_eq!(&g.data()[..4], &[0.0, 4.0, 1.0, 5.0]);
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stage = SwinStage::new(&mut ParamBuilder::new(&mut store, &mut rng), "s", 8, 2, (8, 8), 4, 2, 4).unwrap();
        for blk in &stage.blocks {
            for id in [blk.attn.proj.w, blk.attn.proj.b.unwrap(), blk.fc2.w, blk.fc2.b.unwrap()] {
                let shape = store.value(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape));
            }
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = random(&[1, 8, 8, 8], 3);
        let y = stage.forward(&p, tape.constant(x.clone())).unwrap().value();
        assert_eq!(*y, x);
    }

    #[test]
    fn window_divisibility_is_checked() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = SwinBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", 8, 2, (12, 12), 8, false, 4);
        assert!(matches!(r, Err(Error::WindowDivisibility { .. })));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blk = SwinBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", 16, 4, (8, 8), 4, true, 4).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (_, attn) = blk.forward_with_attention(&p, tape.constant(random(&[2, 8, 8, 16], 4).cast())).unwrap();
        let a = attn.value();
        assert_eq!(a.shape(), &[8, 4, 16, 16]);
        for row in a.data().chunks(16) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn single_window_equals_full_attention() {
        // full attention oracle written against plain loops
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (dim, heads, side) = (8, 2, 4);
        let attn = WindowAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", dim, heads, side);
        let x = random(&[1, side * side, dim], 6);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (y, _) = attn.forward(&p, tape.constant(x.clone()), None);
        let y = y.value();

        let n = side * side;
        let hd = dim / heads;
        let lin = |inp: &[f64], id: &Linear| -> Vec<f64> {
            let w = store.value(id.w).data();
            let b = store.value(id.b.unwrap()).data();
            let rows = inp.len() / id.fan_in;
            let mut out = vec![0.0; rows * id.fan_out];
            for r in 0..rows {
                for o in 0..id.fan_out {
                    out[r * id.fan_out + o] = b[o] + (0..id.fan_in).map(|i| inp[r * id.fan_in + i] * w[i * id.fan_out + o]).sum::<f64>();
                }
            }
            out
        };
        let qkv = lin(x.data(), &attn.qkv);
        let table = store.value(attn.bias_table).data();
        let span = 2 * side - 1;
        let mut merged = vec![0.0; n * dim];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let dot: f64 = (0..hd).map(|d| qkv[i * 3 * dim + h * hd + d] * qkv[j * 3 * dim + dim + h * hd + d]).sum();
                    let (dy, dx) = (i / side + side - 1 - j / side, i % side + side - 1 - j % side);
                    *sc = dot / (hd as f64).sqrt() + table[(dy * span + dx) * heads + h];
                }
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for d in 0..hd {
                    merged[i * dim + h * hd + d] =
                        (0..n).map(|j| (scores[j] - m).exp() / z * qkv[j * 3 * dim + 2 * dim + h * hd + d]).sum::<f64>();
                }
            }
        }
        let expect = lin(&merged, &attn.proj);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_mask_blocks_wrapped_tokens() {
        let m = shift_mask::<f64>(8, 8, 4, 2);
        assert_eq!(m.shape(), &[4, 16, 16]);
        // first window never wraps
        assert!(m.data()[..256].iter().all(|&v| v == 0.0));
        // last window mixes four regions
        assert!(m.data()[3 * 256..].iter().any(|&v| v == MASK_VALUE));
    }

    #[test]
    fn projection_of_zero_weights_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = LinearProjection::new(&mut ParamBuilder::new(&mut store, &mut rng), "head", 8, 3);
        store.set(head.head.w, Tensor::zeros(&[8, 3]));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = head.forward(&p, tape.constant(random(&[1, 4, 4, 8], 1))).value();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
