//! Attention-phase analysis and diversity-based token masking for
//! vision-language models.
//!
//! * [`trace_io`]: the PATS container for attention, feature and decoder traces
//! * [`dynamics`]: per-layer concentration and focus-window detection
//! * [`dpp`]: token importance, similarity kernel and greedy DPP selection
//! * [`mask`]: additive masks and logit modulation for target layers
//! * [`var`]: visual attention ratio and condition comparison
//! * [`metrics`]: caption hallucination metrics
//! * [`synth`]: seeded fixtures with known ground truth

pub mod dpp;
pub mod dynamics;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod synth;
pub mod trace_io;
pub mod var;

pub use dpp::{
    build_kernel, greedy_map, similarity_matrix, token_importance, topk_select, DppKernel,
    ImportanceVector, SelectionResult, SimilarityMatrix,
};
pub use dynamics::{
    concentration_profile, detect_phases, ConcentrationProfile, Phase, PhaseConfig,
    PhaseDetection, PhaseProfile, WindowFraction,
};
pub use error::{Error, Result};
pub use mask::{build_mask, AdditiveMask, MaskFile, ModelMaskProfile, ModulationMode, RatioReading};
pub use metrics::{CaptionRecord, MetricsReport, ObjectLexicon};
pub use trace_io::{
    read_trace, write_trace, AttentionTrace, DecoderTrace, FeatureDump, Storage, TraceFile,
    TraceHeader, TraceKind,
};
pub use var::{compare_conditions, var_stats, Comparison, VarStats};
