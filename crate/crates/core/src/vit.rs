//! Vision transformer backbone.
//!
//! `[CLS] ++ patch tokens + positions`, then `depth` pre-norm blocks
//! (`x + MHSA(LN(x))`, then `+ MLP(LN(.))`), and a linear head on the final
//! normalised `[CLS]` row.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::graph::{Graph, Var};
use crate::nn::{bind_leaf, join, LayerNorm, Linear, Module};
use crate::rng::{normal_tensor, Rng};
use crate::scalar::{s, Scalar};
use crate::tensor::{shape_err, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            depth: 8,
            dim: 64,
            heads: 4,
            mlp_hidden: 256,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_hidden < self.dim {
            return Err(config(format!(
                "mlp_hidden {} is smaller than dim {}",
                self.mlp_hidden, self.dim
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count `N` (the `[CLS]` token is extra).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub norm1: LayerNorm<P>,
    /// Fused Q/K/V projection, `D -> 3D`.
    pub qkv: Linear<P>,
    pub proj: Linear<P>,
    pub norm2: LayerNorm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

impl<P> BlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BlockParams<Q> {
        BlockParams {
            norm1: self.norm1.map(f),
            qkv: self.qkv.map(f),
            proj: self.proj.map(f),
            norm2: self.norm2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
}

impl<P> Module<P> for BlockParams<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.qkv.visit(&join(prefix, "attn.qkv"), out);
        self.proj.visit(&join(prefix, "attn.proj"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.fc1.visit(&join(prefix, "mlp.fc1"), out);
        self.fc2.visit(&join(prefix, "mlp.fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.norm1.visit_mut(out);
        self.qkv.visit_mut(out);
        self.proj.visit_mut(out);
        self.norm2.visit_mut(out);
        self.fc1.visit_mut(out);
        self.fc2.visit_mut(out);
    }
}

impl<T: Scalar> BlockParams<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        Self {
            norm1: LayerNorm::new(d),
            qkv: Linear::init(rng, d, 3 * d),
            proj: Linear::init(rng, d, d),
            norm2: LayerNorm::new(d),
            fc1: Linear::init(rng, d, cfg.mlp_hidden),
            fc2: Linear::init(rng, cfg.mlp_hidden, d),
        }
    }
}

/// Owned backbone weights.
pub type Backbone<T> = BackboneParams<Tensor<T>>;

/// All learnable weights of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<P> {
    pub patch: Linear<P>,
    pub cls: P,
    pub pos: P,
    pub blocks: Vec<BlockParams<P>>,
    pub norm: LayerNorm<P>,
    pub head: Linear<P>,
}

impl<P> BackboneParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BackboneParams<Q> {
        BackboneParams {
            patch: self.patch.map(f),
            cls: f(&self.cls),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            norm: self.norm.map(f),
            head: self.head.map(f),
        }
    }
}

impl<P> Module<P> for BackboneParams<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.patch.visit(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "cls_token"), &self.cls));
        out.push((join(prefix, "pos_embed"), &self.pos));
        self.blocks.visit(&join(prefix, "blocks"), out);
        self.norm.visit(&join(prefix, "norm"), out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.patch.visit_mut(out);
        out.push(&mut self.cls);
        out.push(&mut self.pos);
        self.blocks.visit_mut(out);
        self.norm.visit_mut(out);
        self.head.visit_mut(out);
    }
}

impl<T: Scalar> BackboneParams<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let n = cfg.num_patches();
        Self {
            patch: Linear::init(rng, cfg.patch_dim(), cfg.dim),
            cls: normal_tensor(rng, &[1, cfg.dim], 0.02),
            pos: normal_tensor(rng, &[n + 1, cfg.dim], 0.02),
            blocks: (0..cfg.depth).map(|_| BlockParams::init(cfg, rng)).collect(),
            norm: LayerNorm::new(cfg.dim),
            head: Linear::init(rng, cfg.dim, cfg.num_classes),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BackboneParams<Var> {
        self.map(&mut |t| bind_leaf(g, t, trainable))
    }

    /// Shapes implied by `cfg`, in traversal order.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::init(cfg, &mut Rng::seed(0));
        let got = self.named();
        let want = expected.named();
        if got.len() != want.len() {
            return Err(config(format!(
                "backbone has {} tensors, config implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((name, t), (_, w)) in got.iter().zip(&want) {
            if t.shape() != w.shape() {
                return Err(config(format!(
                    "{name}: shape {:?}, config implies {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Rearranges a `channels x size x size` image into `N x (channels * p * p)`
/// patch rows in raster order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (c, sz, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, sz, sz] {
        return Err(shape_err(
            "patchify",
            format!("image {:?}, config expects {:?}", image.shape(), [c, sz, sz]),
        )
        .into());
    }
    let grid = cfg.grid();
    let px = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * sz * sz + (gy * p + y) * sz + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![grid * grid, cfg.patch_dim()], out)?)
}

/// `[CLS] ++ (patches . W + b)`, plus positional encoding on every row.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    image: &Tensor<T>,
    params: &BackboneParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let patches = g.constant(patchify(image, cfg)?);
    let tokens = params.patch.forward(g, patches)?;
    let seq = g.concat_rows(&[params.cls, tokens])?;
    Ok(g.add(seq, params.pos)?)
}

/// Multi-head self-attention on already-normalised tokens, output-projected.
///
/// `mask`, when given, holds one value per token (row count of `x`); token
/// `j` contributes to row `i != j` in proportion to `mask[j]`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    block: &BlockParams<Var>,
    cfg: &ModelConfig,
    mask: Option<Var>,
) -> Result<Var> {
    let (d, hd) = (cfg.dim, cfg.head_dim());
    let qkv = block.qkv.forward(g, x)?;
    let scale: T = s(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice_cols(qkv, h * hd, hd)?;
        let k = g.slice_cols(qkv, d + h * hd, hd)?;
        let v = g.slice_cols(qkv, 2 * d + h * hd, hd)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let weights = match mask {
            Some(m) => g.masked_softmax_rows(scores, m)?,
            None => g.softmax_rows(scores)?,
        };
        heads.push(g.matmul(weights, v)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok(block.proj.forward(g, merged)?)
}

/// One pre-norm transformer block; `mask` is forwarded to [`attention`].
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    block: &BlockParams<Var>,
    cfg: &ModelConfig,
    mask: Option<Var>,
) -> Result<Var> {
    let h = block.norm1.forward(g, x)?;
    let a = attention(g, h, block, cfg, mask)?;
    let x = g.add(x, a)?;
    let h = block.norm2.forward(g, x)?;
    let h = block.fc1.forward(g, h)?;
    let h = g.gelu(h);
    let h = block.fc2.forward(g, h)?;
    Ok(g.add(x, h)?)
}

/// Final norm and classifier on row 0 (`[CLS]`); returns `1 x num_classes`.
pub fn classify<T: Scalar>(g: &mut Graph<T>, x: Var, params: &BackboneParams<Var>) -> Result<Var> {
    let cls = g.slice_rows(x, 0, 1)?;
    let cls = params.norm.forward(g, cls)?;
    Ok(params.head.forward(g, cls)?)
}

/// Full backbone forward. Returns the logits and every block's output.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    image: &Tensor<T>,
    params: &BackboneParams<Var>,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let mut x = patch_embed(g, image, params, cfg)?;
    let mut hidden = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        x = block_forward(g, x, block, cfg, None)?;
        hidden.push(x);
    }
    Ok((classify(g, x, params)?, hidden))
}

/// Logits of the unmodified backbone for one image.
pub fn baseline_forward<T: Scalar>(
    image: &Tensor<T>,
    params: &BackboneParams<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let (logits, _) = backbone_forward(&mut g, image, &bound, cfg)?;
    g.check_finite()?;
    Ok(g.value(logits).clone())
}

/// Token states after each block, for one image.
pub fn hidden_states<T: Scalar>(
    image: &Tensor<T>,
    params: &BackboneParams<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let (_, hidden) = backbone_forward(&mut g, image, &bound, cfg)?;
    Ok(hidden.into_iter().map(|v| g.value(v).clone()).collect())
}
