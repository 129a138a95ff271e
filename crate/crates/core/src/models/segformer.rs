//! Hierarchical transformer encoder with an all-MLP decode head.
//!
//! Four stages, each an overlapping patch embedding followed by transformer blocks
//! with spatially reduced self-attention and a Mix-FFN (MLP with a 3×3 depthwise
//! convolution). The head projects every stage to a common width, resamples to
//! the 1/4-resolution grid, fuses, classifies, and resamples to the input size.

use candle_core::Tensor;

use super::layers::{
    resize_bilinear, softmax, BatchNorm2d, Conv2d, DepthwiseConv3x3, LayerNorm, Linear, Scope,
};
use super::ModelConfig;
use crate::error::Result;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const PATCH_SIZES: [usize; 4] = [7, 3, 3, 3];
const STRIDES: [usize; 4] = [4, 2, 2, 2];

struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(s: &Scope, in_ch: usize, dim: usize, patch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&s.pp("proj"), in_ch, dim, patch, stride, patch / 2, true)?,
            norm: LayerNorm::new(&s.pp("norm"), dim, LN_EPS)?,
        })
    }

    /// Returns tokens `(B, H*W, C)` and the new grid size.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.proj.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        let tokens = y.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        Ok((self.norm.forward(&tokens)?, h, w))
    }
}

fn tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = tokens.dims3()?;
    Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    Ok(map.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

struct Attention {
    heads: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    reduction: Option<(Conv2d, LayerNorm)>,
    proj: Linear,
}

impl Attention {
    fn new(s: &Scope, dim: usize, heads: usize, sr: usize) -> Result<Self> {
        let reduction = if sr > 1 {
            Some((
                Conv2d::new(&s.pp("sr"), dim, dim, sr, sr, 0, true)?,
                LayerNorm::new(&s.pp("sr_norm"), dim, LN_EPS)?,
            ))
        } else {
            None
        };
        Ok(Self {
            heads,
            query: Linear::new(&s.pp("query"), dim, dim, true, INIT_STD)?,
            key: Linear::new(&s.pp("key"), dim, dim, true, INIT_STD)?,
            value: Linear::new(&s.pp("value"), dim, dim, true, INIT_STD)?,
            reduction,
            proj: Linear::new(&s.pp("proj"), dim, dim, true, INIT_STD)?,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let q = self.split_heads(&self.query.forward(x)?)?;
        let kv_src = match &self.reduction {
            Some((conv, norm)) => {
                let reduced = conv.forward(&tokens_to_map(x, h, w)?)?;
                norm.forward(&map_to_tokens(&reduced)?)?
            }
            None => x.clone(),
        };
        let k = self.split_heads(&self.key.forward(&kv_src)?)?;
        let v = self.split_heads(&self.value.forward(&kv_src)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = softmax(&scores, 3)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&ctx)
    }
}

struct MixFfn {
    fc1: Linear,
    dwconv: DepthwiseConv3x3,
    fc2: Linear,
}

impl MixFfn {
    fn new(s: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), dim, hidden, true, INIT_STD)?,
            dwconv: DepthwiseConv3x3::new(&s.pp("dwconv"), hidden)?,
            fc2: Linear::new(&s.pp("fc2"), hidden, dim, true, INIT_STD)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let hidden = self.fc1.forward(x)?;
        let mixed = self.dwconv.forward(&tokens_to_map(&hidden, h, w)?)?;
        let act = map_to_tokens(&mixed)?.gelu_erf()?;
        self.fc2.forward(&act)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn new(s: &Scope, dim: usize, heads: usize, sr: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&s.pp("norm1"), dim, LN_EPS)?,
            attn: Attention::new(&s.pp("attn"), dim, heads, sr)?,
            norm2: LayerNorm::new(&s.pp("norm2"), dim, LN_EPS)?,
            ffn: MixFfn::new(&s.pp("mlp"), dim, dim * mlp_ratio)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        let y = self.ffn.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok((x + y)?)
    }
}

struct Stage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

pub struct SegFormer {
    stages: Vec<Stage>,
    linear_c: Vec<Linear>,
    fuse: Conv2d,
    fuse_bn: BatchNorm2d,
    classifier: Conv2d,
}

impl SegFormer {
    pub fn new(s: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = cfg.input_channels;
        for i in 0..4 {
            let dim = cfg.embed_dims[i];
            let es = s.pp(format!("encoder.stage{i}"));
            let embed = PatchEmbed::new(&es.pp("patch_embed"), in_ch, dim, PATCH_SIZES[i], STRIDES[i])?;
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    Block::new(
                        &es.pp(format!("block{j}")),
                        dim,
                        cfg.num_heads[i],
                        cfg.sr_ratios[i],
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&es.pp("norm"), dim, LN_EPS)?;
            stages.push(Stage { embed, blocks, norm });
            in_ch = dim;
        }
        let ds = s.pp("decode_head");
        let d = cfg.decoder_dim;
        let linear_c = cfg
            .embed_dims
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(&ds.pp(format!("linear_c{i}")), c, d, true, INIT_STD))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            linear_c,
            fuse: Conv2d::new(&ds.pp("linear_fuse"), 4 * d, d, 1, 1, 0, false)?,
            fuse_bn: BatchNorm2d::new(&ds.pp("linear_fuse_bn"), d)?,
            classifier: Conv2d::new(&ds.pp("classifier"), d, cfg.num_classes, 1, 1, 0, true)?,
        })
    }

    /// Feature maps of the four stages, strides 4, 8, 16, 32.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(4);
        let mut cur = x.clone();
        for stage in &self.stages {
            let (mut tokens, h, w) = stage.embed.forward(&cur)?;
            for block in &stage.blocks {
                tokens = block.forward(&tokens, h, w)?;
            }
            let tokens = stage.norm.forward(&tokens)?;
            cur = tokens_to_map(&tokens, h, w)?;
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    /// Logits at the input resolution `(out_h, out_w)`.
    pub fn decode(&self, feats: &[Tensor], out_h: usize, out_w: usize, train: bool) -> Result<Tensor> {
        let (_, _, h4, w4) = feats[0].dims4()?;
        let mut projected = Vec::with_capacity(4);
        for (f, lin) in feats.iter().zip(&self.linear_c).rev() {
            let (_, _, h, w) = f.dims4()?;
            let p = tokens_to_map(&lin.forward(&map_to_tokens(f)?)?, h, w)?;
            projected.push(resize_bilinear(&p, h4, w4)?);
        }
        let fused = self.fuse.forward(&Tensor::cat(&projected, 1)?)?;
        let fused = self.fuse_bn.forward(&fused, train)?.relu()?;
        // the 1×1 classifier and bilinear resampling are both linear, so classifying
        // before upsampling equals upsampling the fused features first
        let logits = self.classifier.forward(&fused)?;
        resize_bilinear(&logits, out_h, out_w)
    }
}
