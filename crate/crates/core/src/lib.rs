//! Deterministic cross-modal text-image matching at desk scale.
//!
//! The pipeline: a five-stage visual feature pyramid distilled into a
//! salient global vector, bidirectional-GRU sentence and keyword encoders
//! guided by the visual features, trainable projection heads scored by
//! cosine similarity, and a bidirectional triplet loss whose margin adapts
//! to the prior text similarity of each negative pair. Around the core sit
//! retrieval metrics (R@K, mean recall), text-driven localization over
//! large scenes, and dataset-quality diagnostics.
//!
//! Everything is seeded and bit-reproducible: no threads, no global state,
//! fixed accumulation orders.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod locate;
pub mod loss;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod visual;

pub use checkpoint::{load_model, save_model, CheckpointError};
pub use data::{
    load_dataset, make_fixture, save_dataset, split_indices, DataError, Dataset, DatasetEntry,
    FixtureOptions, SplitIndices,
};
pub use eval::{evaluate, EvalError, QueryMode, RecallReport};
pub use fusion::{
    similarity, JointEmbedding, Model, ModelConfig, ModelDims, ModelError, PairContext,
    ProjectionHeads, TextQuery, VgaParams, VgaVariant,
};
pub use locate::{
    aggregate_map, emit_heatmap, median_filter, score_tiles, tile_multiscale, HeatmapMeta,
    LocateError, ProbabilityMap, TileSpec, TilingOptions,
};
pub use loss::{
    dynamic_margin, margin_curve, triplet_dynamic, triplet_fixed, LossError, MarginMode,
    NegativeStrategy, ScoreGrid,
};
pub use optim::{train, Adam, TrainConfig, TrainError, TrainReport};
pub use rng::Rng;
pub use tensor::{Tensor, TensorError};
pub use text::{tokenize, TextError, TokenSeq, Vocabulary};
pub use visual::{FeaturePyramid, VisualError};
