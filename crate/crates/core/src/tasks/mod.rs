//! Downstream classification and segmentation, and joint training with the augmenter.

pub mod joint;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod train;

pub use joint::{joint_train, JointConfig, JointOutcome, JointRound};
pub use loss::{clf_loss, seg_loss, seg_terms, SegTerms};
pub use metrics::{
    adjusted_rand_index, dice, dice_per_label, paired_t_test, ClassificationMetrics, ConfusionMatrix, TTest,
};
pub use models::{ClassifierModel, SegmenterModel, TaskMetrics, TaskModel};
pub use train::{train_task, EpochRecord, TaskOutcome, TaskTrainConfig, TaskTrainer};
