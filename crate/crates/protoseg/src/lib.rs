//! Few-shot segmentation with prototype-based predictors and transductive
//! fine-tuning.
//!
//! The crate provides a small trainable convolutional encoder, cluster-based
//! class prototypes with cosine-similarity prediction, the loss family used
//! to adapt an encoder to a new visual domain from one labeled support set
//! plus unlabeled queries, support-image selection, a synthetic two-domain
//! benchmark, and evaluation utilities. All training math runs on a tape
//! based reverse-mode autodiff engine (`tape`), so analytic gradients can be
//! checked against finite differences at double precision.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod guard;
pub mod losses;
pub mod prototype;
pub mod scalar;
pub mod support_selection;
pub mod tape;

pub use data::{
    downsample_mask, generate_synthetic, load_dataset, make_episodes, resize_pair, save_dataset,
    save_mask_png, two_fold_split, Dataset, DomainAppearance, Episode, GuardedMask, Image,
    LabelMask, QuerySample, QuerySet, Sample, SupportSample, SupportSet, SynthConfig,
};
pub use encoder::{
    encode, load_checkpoint, save_checkpoint, sgd_step, Backbone, Checkpointable, FeatureMap,
    OptimizerState, Param, ToyArchConfig, ToyEncoder,
};
pub use error::Error;
pub use eval::{
    dump_features, eval_unseen, evaluate, evaluate_with_masks, iou, load_feature_dump,
    random_support_study, sweep_support, EvalReport, StudyReport, SweepReport, UnseenReport,
};
pub use finetune::{
    finetune, FineTuneConfig, FineTuneResult, Reduction, RunLog, RunRecord, Strategy,
};
pub use losses::{
    boundary_loss, intra_inter, prototype_contrast, set_distance, soft_foreground, support_ce,
    total_loss, uncertainty_weight, LossBreakdown,
};
pub use prototype::{
    generate_prototypes, kmeans, predict_query, query_prototypes, split_class_features,
    split_class_features_multi, wcss, ClassFeatureSets, KmeansOutcome, PredictedMask,
    ProbabilityMap, PrototypeSet,
};
pub use scalar::Real;
pub use support_selection::{embed_all, image_embedding, select_support, EmbeddingTable};
pub use tape::{NodeId, Tape};
