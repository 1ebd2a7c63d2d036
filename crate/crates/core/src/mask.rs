//! Additive attention masks and logit modulation for target layers.
//!
//! Masks are per-token additive logit values: `0` keeps a token, `-inf`
//! removes it. When composed with finite logits the `-inf` sentinel is
//! realized as `f64::MIN`, and suppressed entries are zeroed after the
//! softmax so they carry exactly no weight. The CLS token is never
//! suppressed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dpp::SelectionResult;
use crate::error::{Error, Result};
use crate::trace_io::TraceHeader;

pub const MASK_FILE_VERSION: u32 = 1;
pub const NEG_INF_LABEL: &str = "-inf";

const BUNDLED_PROFILES: &str = include_str!("../data/profiles.json");

/// Per-model masking configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMaskProfile {
    pub model_id: String,
    pub masking_ratio: f64,
    pub source_layers: Vec<usize>,
    pub feature_layer: usize,
    pub target_layers: Vec<usize>,
}

impl ModelMaskProfile {
    pub fn validate(&self) -> Result<()> {
        if self.target_layers.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "profile {} has no target layers",
                self.model_id
            )));
        }
        if !(self.masking_ratio > 0.0 && self.masking_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "masking ratio {} must be in (0, 1)",
                self.masking_ratio
            )));
        }
        Ok(())
    }
}

/// Profiles shipped with the toolkit for the commonly evaluated models.
pub fn bundled_profiles() -> Vec<ModelMaskProfile> {
    serde_json::from_str(BUNDLED_PROFILES).expect("bundled profiles are valid JSON")
}

pub fn bundled_profile(model_id: &str) -> Option<ModelMaskProfile> {
    bundled_profiles()
        .into_iter()
        .find(|p| p.model_id.eq_ignore_ascii_case(model_id))
}

/// How a masking ratio is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioReading {
    /// Fraction of patch tokens suppressed.
    #[default]
    Suppressed,
    /// Fraction of patch tokens retained.
    Retained,
}

/// Number of patch tokens to retain for a ratio.
pub fn retained_count(ratio: f64, num_patches: usize, reading: RatioReading) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} must be in (0, 1)")));
    }
    let keep = match reading {
        RatioReading::Suppressed => 1.0 - ratio,
        RatioReading::Retained => ratio,
    };
    let k = (keep * num_patches as f64).round() as usize;
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} retains no tokens out of {num_patches}"
        )));
    }
    Ok(k.min(num_patches))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    Mask,
    InverseMask,
    LogitShift,
}

/// Anything that contributes a per-token additive term to attention logits.
pub trait Modulation {
    /// One additive value per token; `-inf` marks suppression.
    fn additive_values(&self) -> Vec<f64>;
}

/// Hard mask keeping the selected patch tokens and CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMask {
    pub model_id: String,
    pub target_layers: Vec<usize>,
    pub n_total: usize,
    pub cls_index: Option<usize>,
    /// Absolute token ids kept, ascending.
    pub retained: Vec<usize>,
    pub values: Vec<f64>,
}

impl AdditiveMask {
    pub fn suppressed(&self) -> Vec<usize> {
        (0..self.n_total)
            .filter(|&i| self.values[i] == f64::NEG_INFINITY)
            .collect()
    }
}

impl Modulation for AdditiveMask {
    fn additive_values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

fn check_target_layers(header: &TraceHeader, target_layers: &[usize]) -> Result<()> {
    if target_layers.is_empty() {
        return Err(Error::InvalidArgument("no target layers".into()));
    }
    for &l in target_layers {
        if !header.layer_ids.contains(&l) {
            return Err(Error::LayerNotFound(l));
        }
    }
    Ok(())
}

/// Builds the hard mask for a selection of patch-token indices.
///
/// `header` describes the encoder the mask is applied to; its `layer_ids`
/// must cover `target_layers`. Patch index `p` maps to token `p + 1` when
/// the encoder has a CLS token.
pub fn build_mask(
    selection: &SelectionResult,
    header: &TraceHeader,
    target_layers: &[usize],
) -> Result<AdditiveMask> {
    if selection.selected.is_empty() {
        return Err(Error::EmptyInput("selection is empty".into()));
    }
    check_target_layers(header, target_layers)?;
    let n_patches = header.num_patches();
    let offset = usize::from(header.has_cls);
    let mut retained = BTreeSet::new();
    if let Some(cls) = header.cls_index() {
        retained.insert(cls);
    }
    for &p in &selection.selected {
        if p >= n_patches {
            return Err(Error::OutOfRange(format!(
                "patch index {p} >= {n_patches} patches"
            )));
        }
        if !retained.insert(p + offset) {
            return Err(Error::InvalidArgument(format!("patch index {p} selected twice")));
        }
    }
    let values = (0..header.num_tokens)
        .map(|i| if retained.contains(&i) { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Ok(AdditiveMask {
        model_id: header.model_id.clone(),
        target_layers: target_layers.to_vec(),
        n_total: header.num_tokens,
        cls_index: header.cls_index(),
        retained: retained.into_iter().collect(),
        values,
    })
}

/// Absolute ids of the patch tokens *not* selected: the low-attention group.
pub fn low_attention_group(selection: &SelectionResult, header: &TraceHeader) -> Vec<usize> {
    let offset = usize::from(header.has_cls);
    let chosen: BTreeSet<usize> = selection.selected.iter().map(|p| p + offset).collect();
    (offset..header.num_tokens)
        .filter(|i| !chosen.contains(i))
        .collect()
}

/// Modulation of a token group: masking, inverse masking, or a logit shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationSpec {
    pub mode: ModulationMode,
    /// Absolute token ids, ascending.
    pub group: Vec<usize>,
    pub delta: Option<f64>,
    pub target_layers: Vec<usize>,
    pub n_total: usize,
    pub cls_index: Option<usize>,
}

/// Validates and builds a [`ModulationSpec`].
///
/// `delta` is required (and must be finite) for `LogitShift` and ignored
/// otherwise.
pub fn build_modulation(
    group: &[usize],
    mode: ModulationMode,
    delta: Option<f64>,
    target_layers: &[usize],
    n_total: usize,
    cls_index: Option<usize>,
) -> Result<ModulationSpec> {
    if target_layers.is_empty() {
        return Err(Error::InvalidArgument("no target layers".into()));
    }
    let set: BTreeSet<usize> = group.iter().copied().collect();
    if let Some(&i) = set.iter().find(|&&i| i >= n_total) {
        return Err(Error::OutOfRange(format!("token {i} >= N_total {n_total}")));
    }
    if cls_index.is_some_and(|c| set.contains(&c)) {
        return Err(Error::InvalidArgument("the CLS token cannot be modulated".into()));
    }
    let delta = match mode {
        ModulationMode::LogitShift => match delta {
            Some(d) if d.is_finite() => Some(d),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "logit_shift needs a finite delta, got {other:?}"
                )))
            }
        },
        ModulationMode::Mask | ModulationMode::InverseMask => {
            if set.is_empty() {
                return Err(Error::EmptyInput("modulation group is empty".into()));
            }
            None
        }
    };
    Ok(ModulationSpec {
        mode,
        group: set.into_iter().collect(),
        delta,
        target_layers: target_layers.to_vec(),
        n_total,
        cls_index,
    })
}

impl Modulation for ModulationSpec {
    fn additive_values(&self) -> Vec<f64> {
        let in_group = |i: usize| self.group.binary_search(&i).is_ok();
        (0..self.n_total)
            .map(|i| match self.mode {
                ModulationMode::Mask if in_group(i) => f64::NEG_INFINITY,
                ModulationMode::InverseMask if !in_group(i) && Some(i) != self.cls_index => {
                    f64::NEG_INFINITY
                }
                ModulationMode::LogitShift if in_group(i) => self.delta.unwrap_or(0.0),
                _ => 0.0,
            })
            .collect()
    }
}

/// Softmax of `logits + modulation` for every row.
///
/// Suppressed tokens get exactly zero weight; a row with every token
/// suppressed is an error.
pub fn apply_mask_offline<M: Modulation + ?Sized>(
    logits: &[Vec<f64>],
    modulation: &M,
) -> Result<Vec<Vec<f64>>> {
    let values = modulation.additive_values();
    logits
        .iter()
        .enumerate()
        .map(|(r, row)| {
            if row.len() != values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "row {r} has {} logits, mask has {} tokens",
                    row.len(),
                    values.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {r} has non-finite logits")));
            }
            masked_softmax(row, &values).ok_or(Error::AllSuppressed { row: r })
        })
        .collect()
}

fn masked_softmax(logits: &[f64], values: &[f64]) -> Option<Vec<f64>> {
    let suppressed: Vec<bool> = values.iter().map(|&v| v == f64::NEG_INFINITY).collect();
    if suppressed.iter().all(|&s| s) {
        return None;
    }
    let shifted: Vec<f64> = logits
        .iter()
        .zip(values)
        .map(|(&z, &v)| z + if v == f64::NEG_INFINITY { f64::MIN } else { v })
        .collect();
    let max = shifted
        .iter()
        .zip(&suppressed)
        .filter(|(_, &s)| !s)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = shifted
        .iter()
        .zip(&suppressed)
        .map(|(&z, &s)| if s { 0.0 } else { (z - max).exp() })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Some(out)
}

/// On-disk mask contract consumed by the model bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub version: u32,
    pub model_id: String,
    pub target_layers: Vec<usize>,
    pub n_total: usize,
    pub cls_index: Option<usize>,
    pub retained: Vec<usize>,
    pub fill: String,
    pub mode: ModulationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Shifted tokens (`logit_shift` mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Vec<usize>>,
}

impl From<&AdditiveMask> for MaskFile {
    fn from(mask: &AdditiveMask) -> Self {
        MaskFile {
            version: MASK_FILE_VERSION,
            model_id: mask.model_id.clone(),
            target_layers: mask.target_layers.clone(),
            n_total: mask.n_total,
            cls_index: mask.cls_index,
            retained: mask.retained.clone(),
            fill: NEG_INF_LABEL.to_string(),
            mode: ModulationMode::Mask,
            delta: None,
            group: None,
        }
    }
}

impl MaskFile {
    pub fn from_modulation(spec: &ModulationSpec, model_id: impl Into<String>) -> Self {
        let values = spec.additive_values();
        let retained = (0..spec.n_total)
            .filter(|&i| values[i] != f64::NEG_INFINITY)
            .collect();
        let shift = spec.mode == ModulationMode::LogitShift;
        MaskFile {
            version: MASK_FILE_VERSION,
            model_id: model_id.into(),
            target_layers: spec.target_layers.clone(),
            n_total: spec.n_total,
            cls_index: spec.cls_index,
            retained,
            fill: NEG_INF_LABEL.to_string(),
            mode: spec.mode,
            delta: spec.delta,
            group: shift.then(|| spec.group.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MASK_FILE_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.fill != NEG_INF_LABEL {
            return Err(Error::InvalidHeader(format!("unsupported fill {:?}", self.fill)));
        }
        if self.retained.iter().any(|&i| i >= self.n_total) {
            return Err(Error::OutOfRange("retained token beyond n_total".into()));
        }
        if let Some(cls) = self.cls_index {
            if !self.retained.contains(&cls) {
                return Err(Error::InvalidHeader("CLS token is not retained".into()));
            }
        }
        Ok(())
    }
}

impl Modulation for MaskFile {
    fn additive_values(&self) -> Vec<f64> {
        let mut values = vec![f64::NEG_INFINITY; self.n_total];
        for &i in &self.retained {
            values[i] = 0.0;
        }
        if let (Some(group), Some(delta)) = (&self.group, self.delta) {
            for &i in group {
                if values[i] == 0.0 {
                    values[i] = delta;
                }
            }
        }
        values
    }
}
