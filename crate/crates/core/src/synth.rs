//! Seeded synthetic traces with known ground truth.
//!
//! All generators draw from `ChaCha8Rng::seed_from_u64(seed)`, a portable
//! stream cipher RNG, so a fixture is a pure function of its spec.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_io::{
    AttentionTrace, DecoderTrace, FeatureDump, Storage, TraceFile, TraceHeader,
};

pub type FixtureRng = ChaCha8Rng;

pub fn fixture_rng(seed: u64) -> FixtureRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn default_model() -> String {
    "synthetic".to_string()
}
fn default_true() -> bool {
    true
}
fn default_diffusion_temp() -> f64 {
    4.0
}
fn default_focus_temp() -> f64 {
    0.5
}
fn default_rediffusion_temp() -> f64 {
    1.5
}
fn default_noise() -> f64 {
    0.05
}
fn default_focus_tokens() -> usize {
    4
}
fn default_focus_boost() -> f64 {
    4.0
}

/// Three-phase vision attention fixture.
///
/// Rows are `softmax(z / T)` with `z ~ N(0, 1)`. Layers `[0, b)` use the
/// diffusion temperature, `[b, b + K_true)` the focus temperature with
/// `focus_boost` added to a fixed subset of patch tokens, and the rest the
/// rediffusion temperature. Each (layer, head) temperature is scaled by
/// `exp(noise_std * e)` with `e ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseFixtureSpec {
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "H")]
    pub num_heads: usize,
    #[serde(rename = "N_total")]
    pub num_tokens: usize,
    #[serde(default = "default_true")]
    pub has_cls: bool,
    pub boundary: usize,
    #[serde(rename = "K_true")]
    pub window: usize,
    #[serde(default = "default_diffusion_temp")]
    pub diffusion_temp: f64,
    #[serde(default = "default_focus_temp")]
    pub focus_temp: f64,
    #[serde(default = "default_rediffusion_temp")]
    pub rediffusion_temp: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_focus_tokens")]
    pub focus_tokens: usize,
    #[serde(default = "default_focus_boost")]
    pub focus_boost: f64,
    #[serde(default)]
    pub storage: Storage,
    #[serde(default = "default_model")]
    pub model_id: String,
    pub seed: u64,
}

impl PhaseFixtureSpec {
    /// Defaults for every shape parameter not given.
    pub fn new(num_layers: usize, num_heads: usize, num_tokens: usize, boundary: usize, window: usize, seed: u64) -> Self {
        PhaseFixtureSpec {
            num_layers,
            num_heads,
            num_tokens,
            has_cls: true,
            boundary,
            window,
            diffusion_temp: default_diffusion_temp(),
            focus_temp: default_focus_temp(),
            rediffusion_temp: default_rediffusion_temp(),
            noise_std: default_noise(),
            focus_tokens: default_focus_tokens(),
            focus_boost: default_focus_boost(),
            storage: Storage::Full,
            model_id: default_model(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_layers == 0 || self.num_heads == 0 {
            return bad("L and H must be positive".into());
        }
        if !(0 < self.boundary && self.window > 0 && self.boundary + self.window <= self.num_layers) {
            return bad(format!(
                "need 0 < b < b + K_true <= L, got b={} K_true={} L={}",
                self.boundary, self.window, self.num_layers
            ));
        }
        let patches = self.num_tokens - usize::from(self.has_cls).min(self.num_tokens);
        if patches < 2 {
            return bad("need at least two patch tokens".into());
        }
        if self.focus_tokens == 0 || self.focus_tokens > patches {
            return bad(format!("focus_tokens must be in [1, {patches}]"));
        }
        for (name, t) in [
            ("diffusion_temp", self.diffusion_temp),
            ("focus_temp", self.focus_temp),
            ("rediffusion_temp", self.rediffusion_temp),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0 && self.focus_boost.is_finite()) {
            return bad("noise_std must be non-negative and focus_boost finite".into());
        }
        if self.storage == Storage::ClsReduced && !self.has_cls {
            return bad("cls_reduced storage requires a CLS token".into());
        }
        Ok(())
    }

    /// Last layer of the injected focus window.
    pub fn focus_end(&self) -> usize {
        self.boundary + self.window - 1
    }
}

fn softmax_into(logits: &[f64], temp: f64, out: &mut Vec<f32>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temp).exp()).collect();
    let sum: f64 = exps.iter().sum();
    out.extend(exps.iter().map(|e| (e / sum) as f32));
}

pub fn gen_phase_trace(spec: &PhaseFixtureSpec) -> Result<AttentionTrace> {
    spec.validate()?;
    let mut rng = fixture_rng(spec.seed);
    let n = spec.num_tokens;
    let skip = usize::from(spec.has_cls);
    let mut patch_ids: Vec<usize> = (skip..n).collect();
    patch_ids.shuffle(&mut rng);
    let focus = &patch_ids[..spec.focus_tokens];

    let rows_per_head = match spec.storage {
        Storage::Full => n,
        Storage::ClsReduced => 1,
    };
    let mut data = Vec::with_capacity(spec.num_layers * spec.num_heads * rows_per_head * n);
    let mut logits = vec![0.0; n];
    for layer in 0..spec.num_layers {
        let in_focus = layer >= spec.boundary && layer <= spec.focus_end();
        let base = if layer < spec.boundary {
            spec.diffusion_temp
        } else if in_focus {
            spec.focus_temp
        } else {
            spec.rediffusion_temp
        };
        for _ in 0..spec.num_heads {
            let e: f64 = rng.sample(StandardNormal);
            let temp = base * (spec.noise_std * e).exp();
            for _ in 0..rows_per_head {
                for z in logits.iter_mut() {
                    *z = rng.sample(StandardNormal);
                }
                if in_focus {
                    for &j in focus {
                        logits[j] += spec.focus_boost;
                    }
                }
                softmax_into(&logits, temp, &mut data);
            }
        }
    }
    let header = TraceHeader::vision(
        spec.model_id.clone(),
        (0..spec.num_layers).collect(),
        spec.num_heads,
        n,
        spec.has_cls,
        spec.storage,
    );
    AttentionTrace::new(header, data)
}

/// Random full attention over the given layers, each row `softmax(z / temp)`.
pub fn gen_attention_trace(
    layer_ids: Vec<usize>,
    num_heads: usize,
    num_tokens: usize,
    has_cls: bool,
    temp: f64,
    seed: u64,
) -> Result<AttentionTrace> {
    if !(temp.is_finite() && temp > 0.0) || num_tokens == 0 || num_heads == 0 {
        return Err(Error::InvalidArgument("invalid attention fixture dimensions".into()));
    }
    let mut rng = fixture_rng(seed);
    let rows = layer_ids.len() * num_heads * num_tokens;
    let mut data = Vec::with_capacity(rows * num_tokens);
    let mut logits = vec![0.0; num_tokens];
    for _ in 0..rows {
        for z in logits.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        softmax_into(&logits, temp, &mut data);
    }
    let header = TraceHeader::vision("synthetic", layer_ids, num_heads, num_tokens, has_cls, Storage::Full);
    AttentionTrace::new(header, data)
}

/// Cluster of patch token `i` in [`gen_feature_dump`].
pub fn cluster_of(i: usize, cluster_count: usize) -> usize {
    i % cluster_count
}

/// Patch features around `cluster_count` random centers.
///
/// Centers are standard normal in `R^dim`; token `i` belongs to cluster
/// `i % cluster_count` and adds `noise * N(0, 1)` per coordinate.
pub fn gen_feature_dump(
    num_patches: usize,
    dim: usize,
    cluster_count: usize,
    noise: f64,
    seed: u64,
) -> Result<FeatureDump> {
    if num_patches == 0 || dim == 0 {
        return Err(Error::InvalidArgument("feature fixture needs N > 0 and C > 0".into()));
    }
    if cluster_count == 0 || cluster_count > num_patches {
        return Err(Error::InvalidArgument(format!(
            "cluster_count must be in [1, {num_patches}], got {cluster_count}"
        )));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let mut rng = fixture_rng(seed);
    let centers: Vec<f64> = (0..cluster_count * dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut data = Vec::with_capacity(num_patches * dim);
    for i in 0..num_patches {
        let c = cluster_of(i, cluster_count);
        for d in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            data.push((centers[c * dim + d] + noise * eps) as f32);
        }
    }
    let header = TraceHeader::features("synthetic", 0, num_patches + 1, true, dim);
    FeatureDump::new(header, data)
}

/// Decoder fixture with a planted visual attention ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderFixtureSpec {
    #[serde(rename = "T")]
    pub tokens: usize,
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "H")]
    pub num_heads: usize,
    pub context_len: usize,
    pub visual_span: [usize; 2],
    pub target_var: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_model")]
    pub model_id: String,
    pub seed: u64,
}

/// Each row puts `target_var + u` on the visual span, with `u` uniform in
/// `[-a, a]` and `a = min(noise, target_var, 1 - target_var)`.
pub fn gen_decoder_trace(spec: &DecoderFixtureSpec) -> Result<DecoderTrace> {
    let [start, end] = spec.visual_span;
    if !(start < end && end <= spec.context_len) {
        return Err(Error::InvalidArgument(format!(
            "visual span [{start}, {end}) invalid for context of {}",
            spec.context_len
        )));
    }
    if !(0.0..=1.0).contains(&spec.target_var) {
        return Err(Error::InvalidArgument(format!(
            "target_var {} outside [0, 1]",
            spec.target_var
        )));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let text_tokens = spec.context_len - (end - start);
    if text_tokens == 0 && spec.target_var < 1.0 {
        return Err(Error::InvalidArgument(
            "visual span covers the whole context, target_var must be 1".into(),
        ));
    }
    if spec.tokens == 0 || spec.num_layers == 0 || spec.num_heads == 0 {
        return Err(Error::InvalidArgument("T, L and H must be positive".into()));
    }
    let mut rng = fixture_rng(spec.seed);
    let amp = spec.noise.min(spec.target_var).min(1.0 - spec.target_var);
    let rows = spec.tokens * spec.num_layers * spec.num_heads;
    let mut data = Vec::with_capacity(rows * spec.context_len);
    let mut weights = vec![0.0f64; spec.context_len];
    for _ in 0..rows {
        let v = if amp > 0.0 {
            spec.target_var + rng.random_range(-amp..=amp)
        } else {
            spec.target_var
        };
        for w in weights.iter_mut() {
            *w = rng.random::<f64>() + 1e-3;
        }
        let vis: f64 = weights[start..end].iter().sum();
        let txt: f64 = weights.iter().sum::<f64>() - vis;
        for (j, w) in weights.iter().enumerate() {
            let p = if (start..end).contains(&j) {
                v * w / vis
            } else {
                (1.0 - v) * w / txt
            };
            data.push(p as f32);
        }
    }
    let header = TraceHeader::decoder(
        spec.model_id.clone(),
        (0..spec.num_layers).collect(),
        spec.num_heads,
        spec.context_len,
        spec.visual_span,
        spec.tokens,
    );
    DecoderTrace::new(header, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFixtureSpec {
    #[serde(rename = "N")]
    pub num_patches: usize,
    #[serde(rename = "C")]
    pub dim: usize,
    pub cluster_count: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

/// One entry of a synth spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixtureSpec {
    Phase(PhaseFixtureSpec),
    Features(FeatureFixtureSpec),
    Decoder(DecoderFixtureSpec),
}

/// A generated trace with the ground truth recorded in its sidecar.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub trace: TraceFile,
    pub sidecar: serde_json::Value,
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    let (trace, truth) = match spec {
        FixtureSpec::Phase(p) => (
            TraceFile::from(gen_phase_trace(p)?),
            serde_json::json!({
                "l_start": p.boundary,
                "l_end": p.focus_end(),
                "K_true": p.window,
                "seed": p.seed,
            }),
        ),
        FixtureSpec::Features(f) => (
            TraceFile::from(gen_feature_dump(f.num_patches, f.dim, f.cluster_count, f.noise, f.seed)?),
            serde_json::json!({
                "clusters": (0..f.num_patches).map(|i| cluster_of(i, f.cluster_count)).collect::<Vec<_>>(),
                "seed": f.seed,
            }),
        ),
        FixtureSpec::Decoder(d) => (
            TraceFile::from(gen_decoder_trace(d)?),
            serde_json::json!({ "target_var": d.target_var, "seed": d.seed }),
        ),
    };
    let sidecar = serde_json::json!({ "spec": spec, "ground_truth": truth });
    Ok(Fixture { trace, sidecar })
}

/// Parses a spec file holding one spec object or an array of them.
pub fn parse_specs(json: &str) -> Result<Vec<FixtureSpec>> {
    let value: serde_json::Value = serde_json::from_str(json)?;
    let specs = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .map(serde_json::from_value)
            .collect::<std::result::Result<Vec<_>, _>>()?,
        other => vec![serde_json::from_value(other)?],
    };
    if specs.is_empty() {
        return Err(Error::EmptyInput("spec file holds no fixtures".into()));
    }
    Ok(specs)
}
