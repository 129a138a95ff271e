//! Segmentation networks behind a single forward interface.

pub mod checkpoint;
pub mod layers;
pub mod segformer;
pub mod unet;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{channel_dropout, Params};
use segformer::SegFormer;
use unet::AttentionUNet;

pub use checkpoint::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Segformer,
    AttUnet,
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "segformer" => Ok(Arch::Segformer),
            "att_unet" | "attention_unet" | "unet" => Ok(Arch::AttUnet),
            other => Err(Error::Model(format!(
                "unknown architecture `{other}` (expected segformer or att_unet)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Segformer => "segformer",
            Arch::AttUnet => "att_unet",
        })
    }
}

/// Named size presets. `B0`–`B5` are the SegFormer scales, `Full` is the
/// full-width attention U-Net, `Toy` is a desk-scale model of either family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
    Full,
    Toy,
    Custom,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "b0" => Variant::B0,
            "b1" => Variant::B1,
            "b2" => Variant::B2,
            "b3" => Variant::B3,
            "b4" => Variant::B4,
            "b5" => Variant::B5,
            "full" => Variant::Full,
            "toy" => Variant::Toy,
            "custom" => Variant::Custom,
            other => return Err(Error::Model(format!("unknown model variant `{other}`"))),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::B0 => "b0",
            Variant::B1 => "b1",
            Variant::B2 => "b2",
            Variant::B3 => "b3",
            Variant::B4 => "b4",
            Variant::B5 => "b5",
            Variant::Full => "full",
            Variant::Toy => "toy",
            Variant::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub variant: Variant,
    pub num_classes: usize,
    pub input_channels: usize,
    /// Transformer stage widths.
    pub embed_dims: Vec<usize>,
    /// Transformer blocks per stage.
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    /// Channels of the first U-Net level; each level doubles it.
    pub unet_base: usize,
    pub unet_levels: usize,
    /// Channel-dropout rate of the feature-perturbation stream.
    pub drop_rate_fp: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::segformer(Variant::B1).expect("b1 is a SegFormer preset")
    }
}

impl ModelConfig {
    fn base(arch: Arch, variant: Variant) -> Self {
        Self {
            arch,
            variant,
            num_classes: 2,
            input_channels: 3,
            embed_dims: vec![64, 128, 320, 512],
            depths: vec![2, 2, 2, 2],
            num_heads: vec![1, 2, 5, 8],
            sr_ratios: vec![8, 4, 2, 1],
            mlp_ratio: 4,
            decoder_dim: 256,
            unet_base: 128,
            unet_levels: 4,
            drop_rate_fp: 0.5,
            init_seed: 0,
        }
    }

    pub fn segformer(variant: Variant) -> Result<Self> {
        let mut c = Self::base(Arch::Segformer, variant);
        match variant {
            Variant::B0 => {
                c.embed_dims = vec![32, 64, 160, 256];
            }
            Variant::B1 => {}
            Variant::B2 => c.depths = vec![3, 4, 6, 3],
            Variant::B3 => c.depths = vec![3, 4, 18, 3],
            Variant::B4 => c.depths = vec![3, 8, 27, 3],
            Variant::B5 => c.depths = vec![3, 6, 40, 3],
            Variant::Toy => {
                c.embed_dims = vec![8, 16, 32, 64];
                c.depths = vec![1, 1, 1, 1];
                c.num_heads = vec![1, 1, 2, 4];
                c.decoder_dim = 32;
            }
            Variant::Custom => {}
            Variant::Full => {
                return Err(Error::Model(
                    "variant `full` names the attention U-Net; SegFormer uses b0..b5".into(),
                ))
            }
        }
        Ok(c)
    }

    pub fn att_unet(variant: Variant) -> Result<Self> {
        let mut c = Self::base(Arch::AttUnet, variant);
        match variant {
            Variant::Full | Variant::Custom => {}
            Variant::Toy => {
                c.unet_base = 8;
                c.unet_levels = 2;
            }
            other => {
                return Err(Error::Model(format!(
                    "variant `{other}` is a SegFormer scale; the attention U-Net takes full, toy or custom"
                )))
            }
        }
        Ok(c)
    }

    pub fn preset(arch: Arch, variant: Variant) -> Result<Self> {
        match arch {
            Arch::Segformer => Self::segformer(variant),
            Arch::AttUnet => Self::att_unet(variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate_fp) {
            return bad(format!("drop_rate_fp must lie in [0, 1), got {}", self.drop_rate_fp));
        }
        match self.arch {
            Arch::Segformer => {
                for (name, v) in [
                    ("embed_dims", &self.embed_dims),
                    ("depths", &self.depths),
                    ("num_heads", &self.num_heads),
                    ("sr_ratios", &self.sr_ratios),
                ] {
                    if v.len() != 4 {
                        return bad(format!("{name} needs 4 stage entries, got {}", v.len()));
                    }
                }
                for i in 0..4 {
                    let (d, h) = (self.embed_dims[i], self.num_heads[i]);
                    if d == 0 || h == 0 || d % h != 0 {
                        return bad(format!("stage {i}: width {d} is not divisible by {h} heads"));
                    }
                    if self.sr_ratios[i] == 0 {
                        return bad(format!("stage {i}: sr_ratio must be positive"));
                    }
                }
                if self.decoder_dim == 0 || self.mlp_ratio == 0 {
                    return bad("decoder_dim and mlp_ratio must be positive".into());
                }
            }
            Arch::AttUnet => {
                if self.unet_base == 0 || self.unet_levels == 0 {
                    return bad("unet_base and unet_levels must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        match self.arch {
            // 4 * 2 * 2 * 2
            Arch::Segformer => 32,
            Arch::AttUnet => 1 << self.unet_levels,
        }
    }

    /// Short human-readable label, e.g. `SegFormer_b1`.
    pub fn label(&self) -> String {
        match self.arch {
            Arch::Segformer => format!("SegFormer_{}", self.variant),
            Arch::AttUnet if self.variant == Variant::Full => "Attention U-Net".to_string(),
            Arch::AttUnet => format!("Attention U-Net_{}", self.variant),
        }
    }
}

enum Net {
    SegFormer(SegFormer),
    AttUnet(AttentionUNet),
}

pub struct SegModel {
    config: ModelConfig,
    params: Params,
    net: Net,
}

impl fmt::Debug for SegModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SegModel")
            .field("config", &self.config)
            .field("parameters", &self.params.count())
            .finish()
    }
}

/// Builds a model with seeded initialisation in single precision.
pub fn build_model(config: &ModelConfig) -> Result<SegModel> {
    SegModel::build(config, DType::F32)
}

pub fn count_parameters(model: &SegModel) -> usize {
    model.parameter_count()
}

impl SegModel {
    pub fn build(config: &ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = Params::new(dtype, config.init_seed);
        let net = {
            let root = params.root();
            match config.arch {
                Arch::Segformer => Net::SegFormer(SegFormer::new(&root, config)?),
                Arch::AttUnet => Net::AttUnet(AttentionUNet::new(&root, config)?),
            }
        };
        Ok(Self {
            config: config.clone(),
            params,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::Shape {
                what: "input channels".into(),
                expected: vec![self.config.input_channels],
                actual: vec![c],
            });
        }
        let m = self.config.required_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Model(format!(
                "input size {h}x{w} must be a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    fn encode(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        match &self.net {
            Net::SegFormer(m) => m.encode(x),
            Net::AttUnet(m) => m.encode(x, train),
        }
    }

    fn decode(&self, feats: &[Tensor], h: usize, w: usize, train: bool) -> Result<Tensor> {
        match &self.net {
            Net::SegFormer(m) => m.decode(feats, h, w, train),
            Net::AttUnet(m) => m.decode(feats, train),
        }
    }

    /// Inference-mode logits `(B, num_classes, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, false)
    }

    /// `train` selects batch statistics (and updates running statistics) in
    /// batch-norm layers.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let feats = self.encode(x, train)?;
        self.decode(&feats, h, w, train)
    }

    /// Forward pass with channel dropout on the deepest encoder output.
    pub fn forward_feature_perturbed(&self, x: &Tensor, drop_rate: f64, seed: u64, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut feats = self.encode(x, train)?;
        let deepest = feats.len() - 1;
        feats[deepest] = channel_dropout(&feats[deepest], drop_rate, seed)?;
        self.decode(&feats, h, w, train)
    }

    /// Clean and feature-perturbed logits sharing one encoder pass.
    pub fn forward_with_perturbation(
        &self,
        x: &Tensor,
        drop_rate: f64,
        seed: u64,
        train: bool,
    ) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let feats = self.encode(x, train)?;
        let clean = self.decode(&feats, h, w, train)?;
        let mut perturbed = feats;
        let deepest = perturbed.len() - 1;
        perturbed[deepest] = channel_dropout(&perturbed[deepest], drop_rate, seed)?;
        let fp = self.decode(&perturbed, h, w, train)?;
        Ok((clean, fp))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.config.clone(), self.params.named_tensors()?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Self::build(&ckpt.config, DType::F32)?;
        model.params.load(&ckpt.tensor_map(), true)?;
        Ok(model)
    }

    /// Copies matching tensors from a weights file (e.g. a pretrained encoder);
    /// returns how many names in the file were not used.
    pub fn load_initial_weights(&self, path: &std::path::Path) -> Result<usize> {
        let ckpt = Checkpoint::load(path).or_else(|_| Checkpoint::load_raw_safetensors(path))?;
        let unknown = self.params.load(&ckpt.tensor_map(), false)?;
        Ok(unknown.len())
    }
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Stacks same-size images into a normalised `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let plane = w * h;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != first.dimensions() {
            return Err(Error::Shape {
                what: "image batch".into(),
                expected: vec![h, w],
                actual: vec![img.height() as usize, img.width() as usize],
            });
        }
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + i] = (p[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
