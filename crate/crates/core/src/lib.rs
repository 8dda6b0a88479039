//! Training-free compression of visual token sequences for multimodal
//! language models.
//!
//! A bundle of visual token embeddings is reduced in four steps:
//!
//! 1. tokens whose similarity to the class token stands out are kept,
//! 2. tokens the first step dropped but that match the text embedding are
//!    recovered,
//! 3. the remaining background is clustered around its own outliers and each
//!    cluster merged into one token,
//! 4. survivors and merged tokens are emitted in original token order.
//!
//! "Stands out" is decided per input by counting high-side local outlier
//! factor outliers of the normalized score distribution (see [`outlier`]).
//!
//! ```
//! use tokrec::{compress, gen_synthetic, CompressOptions, SynthSpec};
//!
//! let (bundle, _) = gen_synthetic(&SynthSpec::llava_like(0)).unwrap();
//! let out = compress(&bundle, &CompressOptions::default()).unwrap();
//! assert!(out.report.retention_ratio < 0.2);
//! ```
//!
//! Per-token loops run on rayon when the `parallel` feature is enabled
//! (default). Results are bit-identical to the sequential path.

pub mod cost;
pub mod error;
pub mod exec;
pub mod harness;
pub mod outlier;
pub mod pipeline;
pub mod recovery;
pub mod scoring;
pub mod tensor_io;
pub mod types;
pub mod viz;

pub use cost::{kv_cache_bytes, prefill_flops, ModelConfig};
pub use error::{Error, Result};
pub use exec::Execution;
pub use harness::{gen_synthetic, GroundTruth, SynthSpec};
pub use outlier::{build_lof_table, count_salient, dynamic_select, LofTable};
pub use pipeline::{compress, order_output, CompressOptions, Compression};
pub use recovery::{assign_clusters, merge_clusters, seed_centers};
pub use scoring::{minmax_normalize, project_tokens, softmax, text_score, visual_score};
pub use tensor_io::{read_bundle, read_csv_matrix, write_bundle, write_report};
pub use types::{
    validate_bundle, CompressionReport, LofParams, Matrix, OutputSlot, ProjectionMap, ScoreKind, ScoreVector,
    SelectionResult, TokenBundle, DEFAULT_TAU,
};
