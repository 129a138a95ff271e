//! Supervised, FixMatch and UniMatch training loops.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::loss::{
    combine_unimatch, make_pseudo_labels, pseudo_label_loss, soft_dice_loss, supervised_loss,
};
use crate::augment::{strong_augment, weak_augment, CutMixBox, StrongAugSpec, WeakAugSpec};
use crate::catalog::{DatasetManifest, ManifestRole, PatchRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, load_pair, load_rgb, Aggregation};
use crate::mask::SegMask;
use crate::models::checkpoint::Checkpoint;
use crate::models::{images_to_tensor, SegModel};
use crate::rng::{self, mix, stream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Supervised,
    FixMatch,
    UniMatch,
}

impl Method {
    pub fn is_semi_supervised(self) -> bool {
        self != Method::Supervised
    }

    /// Name as printed in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Supervised => "Supervised",
            Method::FixMatch => "FixMatch",
            Method::UniMatch => "UniMatch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Supervised => "supervised",
            Method::FixMatch => "fixmatch",
            Method::UniMatch => "unimatch",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "supervised" => Ok(Method::Supervised),
            "fixmatch" => Ok(Method::FixMatch),
            "unimatch" => Ok(Method::UniMatch),
            _ => Err(Error::InvalidArgument(format!(
                "unknown method '{s}' (expected supervised, fixmatch or unimatch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 − iter / total_iters)^power`
    Poly { power: f64 },
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, iter: usize, total_iters: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Poly { power } => {
                let t = iter as f64 / total_iters.max(1) as f64;
                base * (1.0 - t).max(0.0).powf(power)
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("constant"),
            LrSchedule::Poly { power } => write!(f, "poly({power})"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "constant" {
            return Ok(LrSchedule::Constant);
        }
        if t == "poly" {
            return Ok(LrSchedule::Poly { power: 0.9 });
        }
        if let Some(inner) = t.strip_prefix("poly(").and_then(|r| r.strip_suffix(')')) {
            if let Ok(power) = inner.trim().parse::<f64>() {
                if power > 0.0 && power.is_finite() {
                    return Ok(LrSchedule::Poly { power });
                }
            }
        }
        Err(Error::InvalidArgument(format!(
            "unknown lr schedule '{s}' (expected constant, poly or poly(<power>))"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size_labeled: usize,
    /// Defaults to `batch_size_labeled`.
    pub batch_size_unlabeled: Option<usize>,
    pub epochs: usize,
    pub tau: f64,
    pub lambda_u: f64,
    pub w_fp: f64,
    pub lr_schedule: LrSchedule,
    /// Weight of an additive soft-Dice term on the labeled branch; 0 disables it.
    pub dice_loss_weight: f64,
    /// Write `epoch_{n}.ckpt` every this many epochs; 0 keeps only the last epoch.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Supervised,
            lr: 1e-4,
            momentum: 0.9,
            batch_size_labeled: 10,
            batch_size_unlabeled: None,
            epochs: 30,
            tau: 0.95,
            lambda_u: 1.0,
            w_fp: 0.5,
            lr_schedule: LrSchedule::Constant,
            dice_loss_weight: 0.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn unlabeled_batch(&self) -> usize {
        self.batch_size_unlabeled.unwrap_or(self.batch_size_labeled)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size_labeled == 0 || self.unlabeled_batch() == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad(format!("lambda_u must be non-negative, got {}", self.lambda_u));
        }
        if !(self.w_fp >= 0.0 && self.w_fp.is_finite()) {
            return bad(format!("w_fp must be non-negative, got {}", self.w_fp));
        }
        if !(self.dice_loss_weight >= 0.0 && self.dice_loss_weight.is_finite()) {
            return bad("dice_loss_weight must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpecs {
    pub weak: WeakAugSpec,
    pub strong: StrongAugSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    /// Mean fraction of unlabeled pixels kept as pseudo-labels; 0 when supervised.
    pub retention: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub wall_clock_s: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,sup_loss,unsup_loss,retention,lr`. Wall-clock time is left out so
    /// reruns produce identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,sup_loss,unsup_loss,retention,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.sup_loss, e.unsup_loss, e.retention, e.lr
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-on-validation weights when a validation set was given, else the final weights.
    pub checkpoint: Checkpoint,
    pub final_checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub best_epoch: Option<usize>,
}

/// `(B, H, W)` class-index tensor from masks of equal size.
pub fn masks_to_tensor(masks: &[&SegMask]) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if m.dims() != (w, h) {
            return Err(Error::Shape {
                what: "mask batch".into(),
                expected: vec![h, w],
                actual: vec![m.height(), m.width()],
            });
        }
        data.extend(m.as_slice().iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), h, w), &candle_core::Device::Cpu)?)
}

/// SGD with momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    momentum: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, momentum: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            momentum,
        }
    }

    pub fn step(&mut self, loss: &Tensor, lr: f64) -> Result<()> {
        let grads = loss.backward()?;
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            // parameters outside the graph keep their state, like a missing .grad
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // gradients of leaves can still reference forward activations; detaching
            // keeps the velocity from holding every step's graph alive
            let g = g.detach();
            let v = match vel.take() {
                Some(prev) => ((prev * self.momentum)? + g)?.detach(),
                None => g,
            };
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// Random cyclic permutation (Sattolo), so no index maps to itself.
fn derangement(n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Endless shuffled passes over `0..n`, reshuffled on every pass.
struct CycledLoader {
    n: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl CycledLoader {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    let mut rng = rng::seeded(mix(&[self.seed, self.pass]), stream::UNLABELED_LOADER);
                    self.order.shuffle(&mut rng);
                    self.pass += 1;
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

struct StepLosses {
    sup: f64,
    unsup: f64,
    retention: f64,
}

struct Trainer<'a> {
    model: &'a SegModel,
    cfg: &'a TrainConfig,
    specs: &'a AugmentSpecs,
    labeled: &'a [PatchRecord],
    unlabeled: &'a [PatchRecord],
}

impl Trainer<'_> {
    fn labeled_batch(&self, idx: &[usize], epoch: u64, step: u64) -> Result<(Tensor, Tensor)> {
        let mut images = Vec::with_capacity(idx.len());
        let mut masks = Vec::with_capacity(idx.len());
        for (i, &k) in idx.iter().enumerate() {
            let (img, mask) = load_pair(&self.labeled[k])?;
            let seed = mix(&[self.cfg.seed, epoch, step, i as u64, 0]);
            let (img, mask, _) = weak_augment(&img, Some(&mask), &self.specs.weak, seed)?;
            images.push(img);
            masks.push(mask.expect("mask given"));
        }
        let x = images_to_tensor(&images.iter().collect::<Vec<_>>(), self.model.dtype())?;
        let y = masks_to_tensor(&masks.iter().collect::<Vec<_>>())?;
        Ok((x, y))
    }

    /// Weak views and, per strong stream, the strong views with their CutMix boxes.
    fn unlabeled_views(
        &self,
        idx: &[usize],
        epoch: u64,
        step: u64,
        streams: usize,
    ) -> Result<(Vec<RgbImage>, Vec<(Vec<RgbImage>, Vec<Option<CutMixBox>>)>)> {
        let weak = idx
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let img = load_rgb(&self.unlabeled[k].image_path)?;
                let seed = mix(&[self.cfg.seed, epoch, step, i as u64, 1]);
                Ok(weak_augment(&img, None, &self.specs.weak, seed)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let b = weak.len();
        // a single image has no partner to paste from
        let no_cutmix;
        let spec = if b < 2 && self.specs.strong.cutmix_prob > 0.0 {
            no_cutmix = StrongAugSpec {
                cutmix_prob: 0.0,
                ..self.specs.strong.clone()
            };
            &no_cutmix
        } else {
            &self.specs.strong
        };
        let mut out = Vec::with_capacity(streams);
        for s in 0..streams as u64 {
            let mut pair_rng = rng::seeded(mix(&[self.cfg.seed, epoch, step, s]), stream::PAIRING);
            let partners = derangement(b, &mut pair_rng);
            let mut imgs = Vec::with_capacity(b);
            let mut boxes = Vec::with_capacity(b);
            for i in 0..b {
                let seed = mix(&[self.cfg.seed, epoch, step, i as u64, 2 + s]);
                let partner = (b > 1).then(|| &weak[partners[i]]);
                let (img, bx) = strong_augment(&weak[i], spec, seed, partner)?;
                imgs.push(img);
                boxes.push(bx.map(|bx| CutMixBox {
                    partner: Some(partners[i]),
                    ..bx
                }));
            }
            out.push((imgs, boxes));
        }
        Ok((weak, out))
    }

    fn to_tensor(&self, images: &[RgbImage]) -> Result<Tensor> {
        images_to_tensor(&images.iter().collect::<Vec<_>>(), self.model.dtype())
    }

    /// Returns the total loss and its components.
    fn step_loss(
        &self,
        l_idx: &[usize],
        u_idx: Option<&[usize]>,
        epoch: u64,
        step: u64,
    ) -> Result<(Tensor, StepLosses)> {
        let (x, y) = self.labeled_batch(l_idx, epoch, step)?;
        let logits = self.model.forward_t(&x, true)?;
        let mut sup = supervised_loss(&logits, &y)?;
        if self.cfg.dice_loss_weight > 0.0 {
            sup = (sup + (soft_dice_loss(&logits, &y)? * self.cfg.dice_loss_weight)?)?;
        }
        let Some(u_idx) = u_idx else {
            let v = scalar(&sup)?;
            return Ok((sup, StepLosses { sup: v, unsup: 0.0, retention: 0.0 }));
        };

        let (unsup, retention) = match self.cfg.method {
            Method::Supervised => unreachable!("no unlabeled batch when supervised"),
            Method::FixMatch => {
                let (weak, strong) = self.unlabeled_views(u_idx, epoch, step, 1)?;
                let weak_logits = self.model.forward_t(&self.to_tensor(&weak)?, true)?;
                let pseudo = make_pseudo_labels(&weak_logits, self.cfg.tau)?;
                let (imgs, boxes) = &strong[0];
                let strong_logits = self.model.forward_t(&self.to_tensor(imgs)?, true)?;
                let loss = pseudo_label_loss(&strong_logits, &pseudo.mixed(boxes)?)?;
                (loss, pseudo.retention()?)
            }
            Method::UniMatch => {
                let (weak, strong) = self.unlabeled_views(u_idx, epoch, step, 2)?;
                let drop_seed = mix(&[self.cfg.seed, epoch, step, 0xD0]);
                let (weak_logits, fp_logits) = self.model.forward_with_perturbation(
                    &self.to_tensor(&weak)?,
                    self.model.config().drop_rate_fp,
                    drop_seed,
                    true,
                )?;
                let pseudo = make_pseudo_labels(&weak_logits, self.cfg.tau)?;
                let b = weak.len();
                let both: Vec<RgbImage> = strong.iter().flat_map(|(imgs, _)| imgs.iter().cloned()).collect();
                let s_logits = self.model.forward_t(&self.to_tensor(&both)?, true)?;
                let s1 = s_logits.narrow(0, 0, b)?;
                let s2 = s_logits.narrow(0, b, b)?;
                let loss = combine_unimatch(
                    &pseudo_label_loss(&fp_logits, &pseudo)?,
                    &pseudo_label_loss(&s1, &pseudo.mixed(&strong[0].1)?)?,
                    &pseudo_label_loss(&s2, &pseudo.mixed(&strong[1].1)?)?,
                    self.cfg.w_fp,
                )?;
                (loss, pseudo.retention()?)
            }
        };
        let total = (&sup + (&unsup * self.cfg.lambda_u)?)?;
        Ok((
            total,
            StepLosses {
                sup: scalar(&sup)?,
                unsup: scalar(&unsup)?,
                retention,
            },
        ))
    }
}

/// Trains `model` in place.
///
/// One epoch is one pass over the labeled set; the unlabeled set is cycled
/// independently. Each stochastic purpose (loader order, augmentation, pairing,
/// dropout) draws from its own seeded stream, so with `lambda_u = 0` the
/// trainable parameters follow exactly the supervised trajectory.
///
/// With `run_dir`, writes `epoch_{n}.ckpt` and `best.ckpt` there.
pub fn train(
    model: &SegModel,
    labeled: &DatasetManifest,
    unlabeled: Option<&DatasetManifest>,
    validation: Option<&DatasetManifest>,
    cfg: &TrainConfig,
    specs: &AugmentSpecs,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    specs.weak.validate()?;
    specs.strong.validate()?;
    if labeled.role != ManifestRole::LabeledTrain {
        return Err(Error::Manifest(format!(
            "training needs a labeled manifest, got {:?}",
            labeled.role
        )));
    }
    labeled.validate()?;
    if labeled.len() < cfg.batch_size_labeled {
        return Err(Error::Config(format!(
            "batch_size_labeled {} exceeds the {} labeled patches",
            cfg.batch_size_labeled,
            labeled.len()
        )));
    }
    let unlabeled_records: &[PatchRecord] = match (cfg.method.is_semi_supervised(), unlabeled) {
        (false, _) => &[],
        (true, None) => {
            return Err(Error::Config(format!(
                "method {} needs an unlabeled manifest",
                cfg.method
            )))
        }
        (true, Some(u)) => {
            if u.len() < cfg.unlabeled_batch() {
                return Err(Error::Config(format!(
                    "batch_size_unlabeled {} exceeds the {} unlabeled patches",
                    cfg.unlabeled_batch(),
                    u.len()
                )));
            }
            &u.records
        }
    };
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let trainer = Trainer {
        model,
        cfg,
        specs,
        labeled: &labeled.records,
        unlabeled: unlabeled_records,
    };
    let n = labeled.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size_labeled);
    let total_iters = steps_per_epoch * cfg.epochs;
    let mut sgd = Sgd::new(model.vars(), cfg.momentum);
    let mut u_loader = CycledLoader::new(unlabeled_records.len(), cfg.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let started = Instant::now();
    let mut iter = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(mix(&[cfg.seed, epoch as u64]), stream::LABELED_LOADER));
        let (mut sup_sum, mut unsup_sum, mut ret_sum) = (0.0, 0.0, 0.0);
        let mut lr = cfg.lr;
        for (step, l_idx) in order.chunks(cfg.batch_size_labeled).enumerate() {
            lr = cfg.lr_schedule.lr_at(cfg.lr, iter, total_iters);
            let u_idx = cfg
                .method
                .is_semi_supervised()
                .then(|| u_loader.next_batch(cfg.unlabeled_batch()));
            let (total, parts) = trainer.step_loss(l_idx, u_idx.as_deref(), epoch as u64, step as u64)?;
            if !parts.sup.is_finite() || !parts.unsup.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: iter,
                    sup: parts.sup,
                    unsup: parts.unsup,
                });
            }
            sgd.step(&total, lr)?;
            sup_sum += parts.sup;
            unsup_sum += parts.unsup;
            ret_sum += parts.retention;
            iter += 1;
        }
        let k = steps_per_epoch as f64;
        let val_dice = match validation {
            Some(v) => Some(evaluate(model, v, Aggregation::Micro, cfg.method.label())?.dice),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            sup_loss: sup_sum / k,
            unsup_loss: unsup_sum / k,
            retention: ret_sum / k,
            lr,
            wall_clock_s: started.elapsed().as_secs_f64(),
            val_dice,
        };
        log::info!(
            "epoch {epoch}/{}: sup {:.4} unsup {:.4} retention {:.3}{}",
            cfg.epochs,
            stats.sup_loss,
            stats.unsup_loss,
            stats.retention,
            val_dice.map(|d| format!(" val dice {d:.4}")).unwrap_or_default()
        );
        history.epochs.push(stats);

        let last = epoch == cfg.epochs;
        let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if let Some(d) = val_dice {
            if best.as_ref().map_or(true, |b| d > b.0) {
                let ckpt = model.to_checkpoint()?.with_meta("epoch", epoch).with_meta("val_dice", d);
                best = Some((d, epoch, ckpt));
            }
        }
        if let Some(dir) = run_dir {
            if periodic || last {
                model
                    .to_checkpoint()?
                    .with_meta("epoch", epoch)
                    .save(&dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
        }
    }

    let final_checkpoint = model
        .to_checkpoint()?
        .with_meta("epoch", cfg.epochs)
        .with_meta("method", cfg.method.label());
    let (checkpoint, best_epoch) = match best {
        Some((_, e, c)) => (c.with_meta("method", cfg.method.label()), Some(e)),
        None => (final_checkpoint.clone(), None),
    };
    if let Some(dir) = run_dir {
        checkpoint.save(&dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        final_checkpoint,
        history,
        best_epoch,
    })
}
