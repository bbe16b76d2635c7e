//! Contrastive objectives and alignment quantities.

mod alignment;
mod batch;
mod spec;

pub use alignment::{
    alignment_loss, alignment_loss_grid, ar_loss_empirical, ar_loss_empirical_mode, ar_loss_exact,
    ar_values_exact, empirical_ar_curve, sample_views, transformed_features, McEstimate,
    Representation, ViewMode,
};
pub use batch::{
    aal_batch, arcl_batch, batch_loss_terms, contrastive_head, contrastive_loss, infonce_batch,
    moco_arcl_batch, moco_arcl_terms, moco_head, ordered_pairs, unordered_pairs, BatchLoss,
    LossNodes, PositiveRule,
};
pub use spec::{LossSpec, Objective, QueueConfig, ViewBatch, UNIT_TOLERANCE};
