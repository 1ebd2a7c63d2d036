//! Shared inputs for the benchmarks.

use focusgate::dpp::{build_kernel, similarity_matrix, token_importance, DppKernel};
use focusgate::synth::{gen_attention_trace, gen_feature_dump};
use focusgate::trace_io::{AttentionTrace, FeatureDump};

/// LLaVA-scale selection inputs: 576 patches plus CLS, 1024-dim features.
pub struct SelectionInputs {
    pub trace: AttentionTrace,
    pub features: FeatureDump,
    pub source_layers: Vec<usize>,
}

pub fn selection_inputs(heads: usize) -> SelectionInputs {
    let source_layers: Vec<usize> = (7..=11).collect();
    SelectionInputs {
        trace: gen_attention_trace(source_layers.clone(), heads, 577, true, 1.0, 1).unwrap(),
        features: gen_feature_dump(576, 1024, 64, 0.5, 2).unwrap(),
        source_layers,
    }
}

pub fn kernel(inputs: &SelectionInputs) -> DppKernel {
    let q = token_importance(&inputs.trace, &inputs.source_layers).unwrap();
    let s = similarity_matrix(&inputs.features).unwrap();
    build_kernel(&q, &s, 1e-6).unwrap()
}
