//! FOCAL: forensic contrastive clustering for image forgery localization.
//!
//! The pipeline has two halves. Training fits a small patch embedder with a
//! per-image contrastive loss so that pristine and forged pixels of the same
//! image land in separable regions of feature space. Inference runs density
//! clustering (HDBSCAN) over the embedding of a test image and maps the
//! largest cluster to "pristine", everything else to "forged" — no trained
//! classifier is involved. Feature maps from two extractors can be fused by
//! resolution alignment and channel concatenation without retraining.

pub mod cluster;
pub mod config;
pub mod dict;
pub mod extractor;
pub mod fusion;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cluster::{
    core_distances, hdbscan, kmeans, labels_to_mask, mst_mutual_reachability, predict_mask,
    predict_mask_with, resolve_noise, ClusterAlgo, ClusterLabels, ClusterParams, CondensedNode,
    MstEdge, NOISE,
};
pub use dict::{build_dictionary, Dictionary};
pub use extractor::{extract, extract_backward, ExtractorParams, ParamGrads};
pub use fusion::{fuse, FusionSpec};
pub use loss::{
    info_nce_pp, info_nce_pp_grad, info_nce_vanilla, overall_loss, overall_loss_batchmerged,
    DictionaryGrad, LossConfig,
};
pub use metrics::{confusion, evaluate_dataset, iou, macro_f1, ConfusionCounts, DatasetReport};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use synth::{gen_pristine, gen_synthetic, SampleRole, SynthConfig, SynthSample};
pub use tensor::{
    flatten_features, l2_normalize_rows, resize_bilinear, unflatten_features, FeatureMap,
    FeatureMatrix, ForgeryMask, Tensor,
};
pub use train::{
    image_loss, image_loss_param_grads, train, LossVariant, TrainConfig, TrainResult,
};

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic, truncated payload, broken header).
    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The per-image contrastive loss needs at least two pristine rows and
    /// one forged row; callers decide whether to skip the image.
    #[error("contrastive loss undefined: fewer than two pristine rows or no forged rows")]
    UndefinedLoss,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("not enough points: {0}")]
    InsufficientData(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
