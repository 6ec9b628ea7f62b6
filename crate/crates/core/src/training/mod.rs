//! Losses, optimization, checkpoints and gradient verification.

mod adam;
mod checkpoint;
mod gradcheck;
mod loss;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, EpochLosses, MAGIC, VERSION};
pub use gradcheck::{
    analytic_gradients, gradcheck, gradcheck_with, random_problem, GradcheckOptions, GradcheckReport, TensorCheck,
};
pub use loss::{loss_blendshape, loss_terms, loss_total, loss_velocity, LossTerms};
pub use trainer::{
    clip_loss, constant_mean_baseline, feature_stem, infer_clip, load_split, make_windows, mean_clip_loss,
    prepare_clip, train, train_on_clips, window_batch, EpochLog, PreparedClip, TrainOptions, TrainOutcome, Trainer,
    Window,
};

#[cfg(test)]
mod tests;
