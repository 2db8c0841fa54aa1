//! Toolkit for mouse-trace trajectory processing: ingestion of timed
//! narration traces, word- and phrase-aligned segmentation,
//! importance-weighted simplification, trace tokenization, a windowed
//! bipartite trace metric, a numerically checked cross-attention reference,
//! and the training losses of a trace-conditioned segmentation head.
//!
//! Start with the runnable examples in `examples/`; each one exercises a
//! single capability end to end. The `tracekit` binary exposes the same
//! operations as subcommands over JSONL files.

pub mod ingest;
pub mod metrics;
pub mod seg;
pub mod simplify;
pub mod tokenize;
pub mod trace;
pub mod tvp;
pub mod weights;

pub use ingest::{open_jsonl, parse_record, segment_by_words, NarrativeRecord, WordSegment};
pub use metrics::{lbm, LbmConfig, LbmScore, WindowMode};
pub use seg::{dice_loss, refinement_loss, text_ce_loss, total_loss, Codebook, MaskBatch};
pub use simplify::{douglas_peucker, simplify_semantic, SimplifyReport};
pub use tokenize::{dequantize, parse, quantize, serialize, QuantizedTrace};
pub use trace::{AlignedSegment, PhraseSpan, TimedTrace, TimedWord, TracePoint};
pub use tvp::{grad_check, tvp_backward, tvp_forward, TvpConfig, TvpParams};
pub use weights::{tolerance_of, weight_of, ScorerConfig, ScorerMode};
