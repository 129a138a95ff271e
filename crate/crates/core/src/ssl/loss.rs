//! Supervised and consistency losses.
//!
//! All losses take logits `(B, C, H, W)`. Class targets are `(B, H, W)` `u32`
//! tensors; confidence masks are `(B, H, W)` tensors of 0/1 in the logits' dtype.

use candle_core::{DType, Tensor};

use crate::augment::CutMixBox;
use crate::error::{Error, Result};
use crate::models::layers::{log_softmax, softmax};

fn check_same(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            what: what.to_string(),
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok(())
}

fn check_targets(logits: &Tensor, targets: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = logits.dims4()?;
    if targets.dims() != [b, h, w] {
        return Err(Error::Shape {
            what: "targets vs logits".into(),
            expected: vec![b, h, w],
            actual: targets.dims().to_vec(),
        });
    }
    Ok((b, c, h, w))
}

fn one_hot(targets: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let ids = Tensor::arange(0u32, classes as u32, targets.device())?.reshape((1, classes, 1, 1))?;
    Ok(targets
        .to_dtype(DType::U32)?
        .unsqueeze(1)?
        .broadcast_eq(&ids)?
        .to_dtype(dtype)?)
}

/// Per-pixel cross-entropy map `(B, H, W)`.
pub fn pixel_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = check_targets(logits, targets)?;
    let logp = log_softmax(logits, 1)?;
    let picked = (logp * one_hot(targets, c, logits.dtype())?)?.sum(1)?;
    Ok(picked.neg()?)
}

/// Mean per-pixel cross-entropy over every pixel.
pub fn supervised_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(pixel_cross_entropy(logits, targets)?.mean_all()?)
}

/// Cross-entropy averaged over pixels where `mask` is 1; zero when none are.
pub fn masked_cross_entropy(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let ce = pixel_cross_entropy(logits, targets)?;
    check_same("confidence mask", &ce, mask)?;
    let mask = mask.to_dtype(ce.dtype())?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(((ce * mask)?.sum_all()? / count.max(1.0))?)
}

/// Soft Dice loss on the foreground-class probability.
pub fn soft_dice_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = check_targets(logits, targets)?;
    let probs = softmax(logits, 1)?.narrow(1, c - 1, 1)?.squeeze(1)?;
    let fg = targets.to_dtype(DType::U32)?.eq(c as u32 - 1)?.to_dtype(logits.dtype())?;
    let inter = (&probs * &fg)?.sum_all()?;
    let denom = (probs.sum_all()? + fg.sum_all()?)?;
    let dice = ((inter * 2.0)? + 1.0)?.div(&(denom + 1.0)?)?;
    Ok(dice.neg()?.affine(1.0, 1.0)?)
}

/// Weak-view predictions turned into training targets.
#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    /// `(B, H, W)` argmax classes.
    pub labels: Tensor,
    /// `(B, H, W)`, 1 where the max softmax probability reaches the threshold.
    pub confidence_mask: Tensor,
}

impl PseudoLabelBatch {
    /// Fraction of pixels whose pseudo-label is kept.
    pub fn retention(&self) -> Result<f64> {
        Ok(self
            .confidence_mask
            .to_dtype(DType::F64)?
            .mean_all()?
            .to_scalar::<f64>()?)
    }

    /// Targets for a CutMix-ed stream: inside sample `i`'s box, labels and
    /// confidences come from its partner's pseudo-labels.
    pub fn mixed(&self, boxes: &[Option<CutMixBox>]) -> Result<Self> {
        let (b, h, w) = self.labels.dims3()?;
        if boxes.len() != b {
            return Err(Error::Shape {
                what: "CutMix boxes per batch".into(),
                expected: vec![b],
                actual: vec![boxes.len()],
            });
        }
        if boxes.iter().all(Option::is_none) {
            return Ok(self.clone());
        }
        let dtype = self.confidence_mask.dtype();
        let labels: Vec<u32> = self.labels.flatten_all()?.to_vec1()?;
        let conf: Vec<f64> = self.confidence_mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let (mut out_l, mut out_c) = (labels.clone(), conf.clone());
        let plane = h * w;
        for (i, bx) in boxes.iter().enumerate() {
            let Some(bx) = bx else { continue };
            let j = bx.partner.ok_or_else(|| {
                Error::Augment(format!("CutMix box of sample {i} has no partner index"))
            })?;
            if j >= b {
                return Err(Error::Augment(format!("CutMix partner {j} outside batch of {b}")));
            }
            for y in bx.y0 as usize..bx.y1 as usize {
                for x in bx.x0 as usize..bx.x1 as usize {
                    out_l[i * plane + y * w + x] = labels[j * plane + y * w + x];
                    out_c[i * plane + y * w + x] = conf[j * plane + y * w + x];
                }
            }
        }
        let dev = self.labels.device();
        Ok(Self {
            labels: Tensor::from_vec(out_l, (b, h, w), dev)?,
            confidence_mask: Tensor::from_vec(out_c, (b, h, w), dev)?.to_dtype(dtype)?,
        })
    }
}

/// Argmax pseudo-labels with a confidence threshold. Gradients never flow back
/// through the result.
pub fn make_pseudo_labels(weak_logits: &Tensor, tau: f64) -> Result<PseudoLabelBatch> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence threshold must lie in (0, 1], got {tau}"
        )));
    }
    let probs = softmax(&weak_logits.detach(), 1)?;
    let confidence = probs.max(1)?;
    let labels = probs.argmax(1)?;
    let confidence_mask = confidence.ge(tau)?.to_dtype(weak_logits.dtype())?;
    Ok(PseudoLabelBatch {
        labels,
        confidence_mask,
    })
}

pub fn pseudo_label_loss(logits: &Tensor, pseudo: &PseudoLabelBatch) -> Result<Tensor> {
    masked_cross_entropy(logits, &pseudo.labels, &pseudo.confidence_mask)
}

/// Strong-view cross-entropy against weak-view pseudo-labels, confident pixels only.
pub fn fixmatch_unsup_loss(weak_logits: &Tensor, strong_logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_same("strong vs weak logits", weak_logits, strong_logits)?;
    let pseudo = make_pseudo_labels(weak_logits, tau)?;
    pseudo_label_loss(strong_logits, &pseudo)
}

/// `w_fp · CE(fp) + ½ · (CE(strong1) + CE(strong2))`, every term masked by the
/// weak view's confidence.
pub fn unimatch_unsup_loss(
    weak_logits: &Tensor,
    fp_logits: &Tensor,
    strong1_logits: &Tensor,
    strong2_logits: &Tensor,
    tau: f64,
    w_fp: f64,
) -> Result<Tensor> {
    check_same("feature-perturbed vs weak logits", weak_logits, fp_logits)?;
    check_same("strong1 vs weak logits", weak_logits, strong1_logits)?;
    check_same("strong2 vs weak logits", weak_logits, strong2_logits)?;
    let pseudo = make_pseudo_labels(weak_logits, tau)?;
    combine_unimatch(
        &pseudo_label_loss(fp_logits, &pseudo)?,
        &pseudo_label_loss(strong1_logits, &pseudo)?,
        &pseudo_label_loss(strong2_logits, &pseudo)?,
        w_fp,
    )
}

pub(crate) fn combine_unimatch(fp: &Tensor, s1: &Tensor, s2: &Tensor, w_fp: f64) -> Result<Tensor> {
    Ok(((fp * w_fp)? + ((s1 + s2)? * 0.5)?)?)
}
