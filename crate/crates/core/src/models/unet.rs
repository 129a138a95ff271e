//! U-Net with additive attention gates on the skip connections.

use candle_core::Tensor;

use super::layers::{sigmoid, BatchNorm2d, Conv2d, Scope};
use super::ModelConfig;
use crate::error::Result;

fn conv(s: &Scope, cin: usize, cout: usize, k: usize) -> Result<Conv2d> {
    Conv2d::new(s, cin, cout, k, 1, k / 2, true)
}

/// (conv3×3 → BN → ReLU) × 2
struct ConvBlock {
    c1: Conv2d,
    bn1: BatchNorm2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    fn new(s: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            c1: conv(&s.pp("conv1"), cin, cout, 3)?,
            bn1: BatchNorm2d::new(&s.pp("bn1"), cout)?,
            c2: conv(&s.pp("conv2"), cout, cout, 3)?,
            bn2: BatchNorm2d::new(&s.pp("bn2"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward(&self.c1.forward(x)?, train)?.relu()?;
        Ok(self.bn2.forward(&self.c2.forward(&x)?, train)?.relu()?)
    }
}

/// Nearest ×2 upsampling → conv3×3 → BN → ReLU
struct UpConv {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl UpConv {
    fn new(s: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: conv(&s.pp("conv"), cin, cout, 3)?,
            bn: BatchNorm2d::new(&s.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = x.upsample_nearest2d(2 * h, 2 * w)?;
        Ok(self.bn.forward(&self.conv.forward(&up)?, train)?.relu()?)
    }
}

/// Additive attention gate: the decoder signal `g` weights the skip features `x`.
struct AttentionGate {
    w_g: Conv2d,
    bn_g: BatchNorm2d,
    w_x: Conv2d,
    bn_x: BatchNorm2d,
    psi: Conv2d,
    bn_psi: BatchNorm2d,
}

impl AttentionGate {
    fn new(s: &Scope, f_g: usize, f_l: usize, f_int: usize) -> Result<Self> {
        Ok(Self {
            w_g: conv(&s.pp("w_g"), f_g, f_int, 1)?,
            bn_g: BatchNorm2d::new(&s.pp("bn_g"), f_int)?,
            w_x: conv(&s.pp("w_x"), f_l, f_int, 1)?,
            bn_x: BatchNorm2d::new(&s.pp("bn_x"), f_int)?,
            psi: conv(&s.pp("psi"), f_int, 1, 1)?,
            bn_psi: BatchNorm2d::new(&s.pp("bn_psi"), 1)?,
        })
    }

    fn forward(&self, g: &Tensor, x: &Tensor, train: bool) -> Result<Tensor> {
        let g1 = self.bn_g.forward(&self.w_g.forward(g)?, train)?;
        let x1 = self.bn_x.forward(&self.w_x.forward(x)?, train)?;
        let a = (g1 + x1)?.relu()?;
        let psi = sigmoid(&self.bn_psi.forward(&self.psi.forward(&a)?, train)?)?;
        Ok(x.broadcast_mul(&psi)?)
    }
}

pub struct AttentionUNet {
    encoders: Vec<ConvBlock>,
    ups: Vec<UpConv>,
    gates: Vec<AttentionGate>,
    decoders: Vec<ConvBlock>,
    head: Conv2d,
}

impl AttentionUNet {
    pub fn new(s: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let widths: Vec<usize> = (0..=cfg.unet_levels).map(|i| cfg.unet_base << i).collect();
        let mut encoders = Vec::new();
        let mut cin = cfg.input_channels;
        for (i, &w) in widths.iter().enumerate() {
            encoders.push(ConvBlock::new(&s.pp(format!("enc{i}")), cin, w)?);
            cin = w;
        }
        let mut ups = Vec::new();
        let mut gates = Vec::new();
        let mut decoders = Vec::new();
        // decoder level i joins widths[i + 1] (from below) with the skip at widths[i]
        for i in (0..cfg.unet_levels).rev() {
            let (lo, hi) = (widths[i], widths[i + 1]);
            ups.push(UpConv::new(&s.pp(format!("up{i}")), hi, lo)?);
            gates.push(AttentionGate::new(&s.pp(format!("att{i}")), lo, lo, (lo / 2).max(1))?);
            decoders.push(ConvBlock::new(&s.pp(format!("dec{i}")), 2 * lo, lo)?);
        }
        Ok(Self {
            encoders,
            ups,
            gates,
            decoders,
            head: conv(&s.pp("head"), widths[0], cfg.num_classes, 1)?,
        })
    }

    /// Skip features from shallow to deep; the last entry is the bottleneck.
    pub fn encode(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(self.encoders.len());
        let mut cur = x.clone();
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 {
                cur = cur.max_pool2d(2)?;
            }
            cur = enc.forward(&cur, train)?;
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    pub fn decode(&self, feats: &[Tensor], train: bool) -> Result<Tensor> {
        let levels = feats.len() - 1;
        let mut d = feats[levels].clone();
        for (j, ((up, gate), dec)) in self.ups.iter().zip(&self.gates).zip(&self.decoders).enumerate() {
            let skip = &feats[levels - 1 - j];
            let g = up.forward(&d, train)?;
            let attended = gate.forward(&g, skip, train)?;
            d = dec.forward(&Tensor::cat(&[&attended, &g], 1)?, train)?;
        }
        self.head.forward(&d)
    }
}
