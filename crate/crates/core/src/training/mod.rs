//! Dual-mask reconstruction training with a contrastive term, Adam and
//! early stopping.

pub mod adam;
pub mod loss;
pub mod masking;
pub mod trainer;

pub use adam::{adam_update, Adam, AdamConfig, AdamMoments};
pub use loss::{infonce_loss, mse, mse_loss, ContrastiveHead};
pub use masking::{dual_mask_batch, DualView};
pub use trainer::{
    composed_loss, train_loop, EarlyStopper, LogRecord, LossBreakdown, TrainConfig, TrainData, TrainSummary, Trainer,
};
