//! Encoder, nested decoder and segmentation head.
//!
//! Decoder nodes live on a grid `N(i, j)`: level `i` (1-based) runs at the
//! resolution of encoder stage `E_i`, column `j` counts how many upsampling
//! hops feed it. With `L` encoder stages the main path is
//! `N(L-1, 1), N(L-2, 2), .., N(1, L-1)`; structure variants add nodes
//! from the remaining grid positions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use msunet_autograd::{Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BlockConfig, LayerNorm, Linear, LinearProjection, PatchEmbed, PatchExpand, PatchMerging, SwinStage};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamStore};

/// Grid coordinate `(level, column)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize, pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N({},{})", self.0, self.1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Structure {
    None,
    Structure2,
    Structure1,
    Standard,
    /// Explicit set of nested (non-main-path) nodes.
    Custom(Vec<NodeId>),
}

impl Structure {
    pub const ALL: [Structure; 4] = [Structure::None, Structure::Structure2, Structure::Structure1, Structure::Standard];

    pub fn nested_nodes(&self) -> BTreeSet<NodeId> {
        let list: &[NodeId] = match self {
            Structure::None => &[],
            Structure::Structure2 => &[NodeId(1, 1)],
            Structure::Structure1 => &[NodeId(1, 1), NodeId(2, 1)],
            Structure::Standard => &[NodeId(1, 1), NodeId(2, 1), NodeId(1, 2)],
            Structure::Custom(v) => v,
        };
        list.iter().copied().collect()
    }

    pub fn name(&self) -> String {
        match self {
            Structure::None => "NONE".into(),
            Structure::Structure2 => "STRUCTURE2".into(),
            Structure::Structure1 => "STRUCTURE1".into(),
            Structure::Standard => "STANDARD".into(),
            Structure::Custom(v) => {
                let parts: Vec<String> = v.iter().map(|n| n.to_string()).collect();
                format!("CUSTOM[{}]", parts.join(","))
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(Structure::None),
            "STRUCTURE2" => Ok(Structure::Structure2),
            "STRUCTURE1" => Ok(Structure::Structure1),
            "STANDARD" => Ok(Structure::Standard),
            other => Err(Error::Config(format!("unknown structure {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BlockConfig,
    pub num_classes: usize,
    pub structure: Structure,
    pub input_size: usize,
}

impl ModelConfig {
    pub fn toy(structure: Structure) -> Self {
        Self { backbone: BlockConfig::toy(), num_classes: 3, structure, input_size: 64 }
    }

    pub fn full(structure: Structure) -> Self {
        Self { backbone: BlockConfig::full(), num_classes: 9, structure, input_size: 224 }
    }

    /// Small enough for finite-difference checks of the whole network.
    pub fn tiny(structure: Structure) -> Self {
        Self {
            backbone: BlockConfig {
                embed_dim: 4,
                window_size: 2,
                num_heads: vec![1, 1, 2, 2],
                depths: vec![2; 4],
                mlp_ratio: 2,
                patch_size: 2,
                in_chans: 1,
            },
            num_classes: 3,
            structure,
            input_size: 16,
        }
    }

    pub fn stages(&self) -> usize {
        self.backbone.stages()
    }

    /// Token-grid side of stage `i` (1-based).
    pub fn side(&self, level: usize) -> usize {
        self.input_size / self.backbone.patch_size >> (level - 1)
    }

    pub fn dim(&self, level: usize) -> usize {
        self.backbone.stage_dim(level - 1)
    }

    pub fn main_path(&self) -> Vec<NodeId> {
        let l = self.stages();
        (1..l).map(|j| NodeId(l - j, j)).collect()
    }

    /// All decoder nodes in evaluation order.
    pub fn decoder_nodes(&self) -> Result<Vec<NodeId>> {
        let l = self.stages();
        let mut all: BTreeSet<NodeId> = self.main_path().into_iter().collect();
        for n in self.structure.nested_nodes() {
            let NodeId(i, j) = n;
            if i == 0 || j == 0 || i + j >= l {
                return Err(Error::Config(format!("{n} is not a nested grid position for {l} stages")));
            }
            all.insert(n);
        }
        for &NodeId(i, j) in &all {
            if j > 1 && !all.contains(&NodeId(i + 1, j - 1)) {
                return Err(Error::DanglingNode { node: NodeId(i, j).to_string(), missing: NodeId(i + 1, j - 1).to_string() });
            }
        }
        let mut order: Vec<NodeId> = all.into_iter().collect();
        order.sort_by_key(|&NodeId(i, j)| (j, std::cmp::Reverse(i)));
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.stages() < 2 {
            return Err(Error::Config("the decoder needs at least two stages".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let div = self.backbone.patch_size << (self.stages() - 1);
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!("input size {} not divisible by {div}", self.input_size)));
        }
        self.decoder_nodes().map(|_| ())
    }
}

#[derive(Clone, Debug)]
struct DecoderNode {
    id: NodeId,
    /// Same-level inputs, in concatenation order (column 0 is `E_i`).
    same_level: Vec<usize>,
    up: PatchExpand,
    fuse: Linear,
    blocks: SwinStage,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    downsample: Option<PatchMerging>,
    blocks: SwinStage,
}

/// The full segmentation network. Parameters live in a separate
/// [`ParamStore`] under dotted names.
#[derive(Clone, Debug)]
pub struct MsUnet {
    pub config: ModelConfig,
    patch_embed: PatchEmbed,
    encoder: Vec<EncoderStage>,
    encoder_norm: LayerNorm,
    nodes: Vec<DecoderNode>,
    norm_up: LayerNorm,
    final_expand: PatchExpand,
    pub head: LinearProjection,
}

pub const HEAD_PREFIX: &str = "head.";

impl MsUnet {
    pub fn new<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let bc = &config.backbone;
        let mut pb = ParamBuilder::new(store, rng);
        let mut enc = pb.scope("encoder");
        let patch_embed = PatchEmbed::new(&mut enc, bc);
        let mut encoder = Vec::new();
        for s in 0..config.stages() {
            let level = s + 1;
            let side = config.side(level);
            let mut layer = enc.scope(&format!("layers.{s}"));
            let downsample = (s > 0).then(|| PatchMerging::new(&mut layer, "downsample", config.dim(level - 1)));
            let blocks =
                SwinStage::new(&mut layer, "stage", config.dim(level), bc.num_heads[s], (side, side), bc.window_size, bc.depths[s], bc.mlp_ratio)?;
            encoder.push(EncoderStage { downsample, blocks });
        }
        let encoder_norm = LayerNorm::new(&mut enc, "norm", config.dim(config.stages()));

        let order = config.decoder_nodes()?;
        let present: BTreeSet<NodeId> = order.iter().copied().collect();
        let mut dec = pb.scope("decoder");
        let mut nodes = Vec::new();
        for &id in &order {
            let NodeId(i, j) = id;
            let c = config.dim(i);
            let side = config.side(i);
            let same_level: Vec<usize> = (0..j).filter(|&jj| jj == 0 || present.contains(&NodeId(i, jj))).collect();
            let mut ns = dec.scope(&format!("node_{i}_{j}"));
            let up = PatchExpand::double(&mut ns, "up", config.dim(i + 1))?;
            let fuse = Linear::new(&mut ns, "fuse", (same_level.len() + 1) * c, c, true);
            let blocks = SwinStage::new(&mut ns, "stage", c, bc.num_heads[i - 1], (side, side), bc.window_size, 2, bc.mlp_ratio)?;
            nodes.push(DecoderNode { id, same_level, up, fuse, blocks });
        }
        let norm_up = LayerNorm::new(&mut dec, "norm_up", config.dim(1));
        let final_expand = PatchExpand::full_resolution(&mut dec, "final_expand", config.dim(1), config.backbone.patch_size);
        drop(dec);
        let head = LinearProjection::new(&mut pb, "head", config.dim(1), config.num_classes);
        Ok(Self { config, patch_embed, encoder, encoder_norm, nodes, norm_up, final_expand, head })
    }

    /// Builds the model and a freshly initialised parameter store.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn decoder_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    /// Encoder outputs `E_1 .. E_L`.
    pub fn encode<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut x = self.patch_embed.forward(p, image)?;
        let mut outs = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            if let Some(d) = &stage.downsample {
                x = d.forward(p, x)?;
            }
            x = stage.blocks.forward(p, x)?;
            outs.push(x);
        }
        let last = outs.len() - 1;
        outs[last] = self.encoder_norm.forward(p, outs[last]);
        Ok(outs)
    }

    /// Logits `[B, classes, H, W]` for images `[B, C, H, W]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = image.shape();
        if s.len() != 4 || s[2] != self.config.input_size || s[3] != self.config.input_size {
            return Err(Error::Dimension(format!("expected [B, C, {n}, {n}] images, got {s:?}", n = self.config.input_size)));
        }
        let enc = self.encode(p, image)?;
        let mut grid: BTreeMap<NodeId, Var<'t, T>> = BTreeMap::new();
        for (k, &e) in enc.iter().enumerate() {
            grid.insert(NodeId(k + 1, 0), e);
        }
        for node in &self.nodes {
            let NodeId(i, j) = node.id;
            let mut parts: Vec<Var<'t, T>> = node.same_level.iter().map(|&jj| grid[&NodeId(i, jj)]).collect();
            parts.push(node.up.forward(p, grid[&NodeId(i + 1, j - 1)]));
            let x = node.fuse.forward(p, Var::concat(&parts, 3));
            grid.insert(node.id, node.blocks.forward(p, x)?);
        }
        let out = grid[&NodeId(1, self.config.stages() - 1)];
        let x = self.final_expand.forward(p, self.norm_up.forward(p, out));
        Ok(self.head.forward(p, x))
    }
}

/// Learnable scalar count of a model configuration.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    // f32 storage keeps the full-size configuration cheap to instantiate
    let (_, store) = MsUnet::init::<f32>(config.clone(), 0)?;
    Ok(store.count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use msunet_autograd::{Tape, Tensor};

    #[test]
    fn node_sets_per_structure() {
        let n = |s| ModelConfig::toy(s).decoder_nodes().unwrap();
        assert_eq!(n(Structure::None), vec![NodeId(3, 1), NodeId(2, 2), NodeId(1, 3)]);
        let std = n(Structure::Standard);
        assert_eq!(std.len(), 6);
        assert_eq!(std, vec![NodeId(3, 1), NodeId(2, 1), NodeId(1, 1), NodeId(2, 2), NodeId(1, 2), NodeId(1, 3)]);
    }

    #[test]
    fn dangling_and_invalid_nodes_are_rejected() {
        let cfg = ModelConfig::toy(Structure::Custom(vec![NodeId(1, 2)]));
        assert!(matches!(cfg.validate(), Err(Error::DanglingNode { .. })));
        let cfg = ModelConfig::toy(Structure::Custom(vec![NodeId(3, 1)]));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig::toy(Structure::Custom(vec![NodeId(2, 2)]));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut cfg = ModelConfig::toy(Structure::None);
        cfg.backbone.depths.clear();
        cfg.backbone.num_heads.clear();
        assert!(count_parameters(&cfg).is_err());
        let mut cfg = ModelConfig::toy(Structure::None);
        cfg.input_size = 48;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encoder_geometry() {
        let (model, store) = MsUnet::init::<f32>(ModelConfig::toy(Structure::None), 0).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let enc = model.encode(&p, tape.constant(Tensor::zeros(&[1, 1, 64, 64]))).unwrap();
        let shapes: Vec<Vec<usize>> = enc.iter().map(|e| e.shape()).collect();
        assert_eq!(shapes, vec![vec![1, 16, 16, 32], vec![1, 8, 8, 64], vec![1, 4, 4, 128], vec![1, 2, 2, 256]]);
    }

    #[test]
    fn toy_forward_shape_and_batch_consistency() {
        let (model, store) = MsUnet::init::<f64>(ModelConfig::toy(Structure::Standard), 1).unwrap();
        let img: Vec<f64> = (0..64 * 64).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let mut batch = img.clone();
        batch.extend_from_slice(&img);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = model.forward(&p, tape.constant(Tensor::from_f64(&[2, 1, 64, 64], &batch))).unwrap().value();
        assert_eq!(y.shape(), &[2, 3, 64, 64]);
        assert!(y.is_finite());
        let half = y.len() / 2;
        assert_eq!(&y.data()[..half], &y.data()[half..]);
    }

    #[test]
    fn structure_param_counts_are_strictly_increasing() {
        let counts: Vec<usize> = Structure::ALL.iter().map(|s| count_parameters(&ModelConfig::toy(s.clone())).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }
}
