//! Streaming transformer encoder engine for keyword spotting: voice-trigger
//! detection through a phonetic CTC branch and false-trigger mitigation
//! through a phrase discrimination branch, sharing one encoder.
//!
//! The encoder runs in two provably equivalent modes: a full-sequence pass
//! under a block-window attention mask (training), and an iterative
//! block-streaming pass with bounded per-layer state (inference). The
//! equivalence is enforced by tests, not assumed.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod streaming;
pub mod tensor;
pub mod train;

pub use attention::{
    attend_full, attend_streaming, block_ranges, equivalence_report, AttentionMask,
    AttentionProjections, BlockSpec, LayerCache,
};
pub use bench::{bench_csv, run_bench, BenchOptions, BenchRow};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint};
pub use data::{
    generate_corpus, logistic_probe_accuracy, read_features, read_labels, read_split,
    write_corpus, write_features, write_labels, Corpus, CorpusSpec, LabelRecord, TokenAlphabet,
    Utterance,
};
pub use error::{Error, Result};
pub use eval::{
    det_csv, det_sweep, ft_rate_at_frr, score_corpus, vtd_metrics, DetPoint, ScoredUtterance,
    VtdMetrics,
};
pub use layers::{positional_encoding, relu, Dense, FeedForward, LayerNorm, Lstm, LstmState};
pub use losses::{ctc_greedy_decode, ctc_loss, frame_ce_loss, CtcTarget, FrameCeTarget};
pub use model::{
    forward_block, forward_full, mtl_loss, phrase_positive_prob, BlockState, ForwardOutput,
    ModelConfig, ModelParams, MtlBreakdown, PhraseLoss,
};
pub use rng::SplitMix64;
pub use train::{
    backward, clip_gradients, gradcheck, gradient_norm, metrics_csv, train, Adam, AdamOptions,
    BackwardResult, EpochMetrics, GradCheckEntry, TrainOptions,
};
pub use scalar::{Precision, Scalar};
pub use streaming::{
    DecisionState, Emission, SessionStats, StreamingSession, TriggerDecision, SMOOTHING_WINDOW,
};
pub use tensor::{logsumexp, row_log_softmax, row_softmax, Matrix};
