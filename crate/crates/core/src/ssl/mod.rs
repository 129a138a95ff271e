//! Supervised and semi-supervised (FixMatch, UniMatch) training.

pub mod loss;
pub mod train;

pub use loss::{
    fixmatch_unsup_loss, make_pseudo_labels, masked_cross_entropy, pixel_cross_entropy, pseudo_label_loss,
    soft_dice_loss, supervised_loss,
    unimatch_unsup_loss, PseudoLabelBatch,
};
pub use train::{
    masks_to_tensor, train, AugmentSpecs, EpochStats, LrSchedule, Method, Sgd, TrainConfig,
    TrainHistory, TrainOutcome,
};
