//! Layer-wise attention statistics and focus-phase detection.
//!
//! For every layer the encoder's attention distribution over patch tokens is
//! summarized by its entropy `H` (nats) and its maximum score `M`. The
//! concentration ratio is `R = mean_h(M) / mean_h(H)`; its forward difference
//! `dR(l) = R(l) - R(l-1)` drives the detector, which places the focus onset
//! at the first layer whose increase exceeds the early-layer baseline by
//! `lambda` standard deviations and extends the window proportionally to the
//! network depth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_io::AttentionTrace;

/// Floor applied to the mean entropy (denominator of `R`) and to the
/// baseline standard deviation.
pub const DEFAULT_FLOOR: f64 = 1e-6;
const DISTRIBUTION_TOLERANCE: f64 = 1e-4;

/// Distribution assigned by the CLS query to the patch tokens.
///
/// The CLS-to-CLS entry is dropped and the remaining entries renormalized.
pub fn cls_distribution(trace: &AttentionTrace, layer: usize, head: usize) -> Result<Vec<f64>> {
    let pos = trace.header().layer_position(layer)?;
    cls_distribution_at(trace, pos, head)
}

fn cls_distribution_at(trace: &AttentionTrace, pos: usize, head: usize) -> Result<Vec<f64>> {
    let row = trace.cls_row(pos, head)?;
    let patches = &row[1..];
    let total: f64 = patches.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateDistribution(format!(
            "CLS row at layer position {pos}, head {head} puts no mass on patch tokens"
        )));
    }
    Ok(patches.iter().map(|&v| v as f64 / total).collect())
}

/// Average attention received by each token over all visual query tokens.
///
/// With a CLS token present, only patch rows and patch columns are used and
/// the result is renormalized over patches.
pub fn query_averaged_distribution(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let pos = trace.header().layer_position(layer)?;
    query_averaged_at(trace, pos, head)
}

fn query_averaged_at(trace: &AttentionTrace, pos: usize, head: usize) -> Result<Vec<f64>> {
    let matrix = trace.matrix(pos, head)?;
    let n_total = trace.num_tokens();
    let skip = usize::from(trace.header().has_cls);
    let n = n_total - skip;
    let mut out = vec![0.0f64; n];
    for row in matrix.chunks_exact(n_total).skip(skip) {
        for (acc, &v) in out.iter_mut().zip(&row[skip..]) {
            *acc += v as f64;
        }
    }
    if skip == 1 {
        let total: f64 = out.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateDistribution(
                "patch queries put no mass on patch tokens".into(),
            ));
        }
        out.iter_mut().for_each(|v| *v /= total);
    } else {
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(out)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(-dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Largest probability in the distribution.
pub fn max_score(dist: &[f64]) -> f64 {
    dist.iter().copied().fold(0.0, f64::max)
}

fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(Error::EmptyInput("empty distribution".into()));
    }
    if let Some((index, &value)) = dist.iter().enumerate().find(|(_, p)| p.is_nan() || **p < 0.0) {
        return Err(Error::NegativeProbability { index, value });
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::DegenerateDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerHeadStats {
    pub layer: usize,
    pub head: usize,
    pub entropy: f64,
    pub max_score: f64,
}

/// Entropy and max score for every (layer, head) of the trace.
///
/// Uses the CLS distribution when the trace has a CLS token, otherwise the
/// query-averaged distribution.
pub fn layer_head_stats(trace: &AttentionTrace) -> Result<Vec<LayerHeadStats>> {
    let header = trace.header();
    let mut out = Vec::with_capacity(header.num_layers * header.num_heads);
    for (pos, &layer) in header.layer_ids.iter().enumerate() {
        for head in 0..header.num_heads {
            let dist = if header.has_cls {
                cls_distribution_at(trace, pos, head)?
            } else {
                query_averaged_at(trace, pos, head)?
            };
            out.push(LayerHeadStats {
                layer,
                head,
                entropy: entropy(&dist)?,
                max_score: max_score(&dist),
            });
        }
    }
    Ok(out)
}

/// Per-layer concentration ratio and its forward difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationProfile {
    pub layer_ids: Vec<usize>,
    pub mean_max: Vec<f64>,
    pub mean_entropy: Vec<f64>,
    pub ratio: Vec<f64>,
    /// `None` for the first layer.
    pub delta: Vec<Option<f64>>,
}

impl ConcentrationProfile {
    /// Builds a profile from precomputed ratios (means are left empty).
    pub fn from_ratios(layer_ids: Vec<usize>, ratio: Vec<f64>) -> Result<Self> {
        if layer_ids.len() != ratio.len() || ratio.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} layer ids for {} ratios",
                layer_ids.len(),
                ratio.len()
            )));
        }
        let delta = forward_difference(&ratio);
        Ok(ConcentrationProfile {
            layer_ids,
            mean_max: Vec::new(),
            mean_entropy: Vec::new(),
            ratio,
            delta,
        })
    }

    pub fn len(&self) -> usize {
        self.ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratio.is_empty()
    }
}

fn forward_difference(ratio: &[f64]) -> Vec<Option<f64>> {
    std::iter::once(None)
        .chain(ratio.windows(2).map(|w| Some(w[1] - w[0])))
        .collect()
}

/// Computes `R` per layer with the mean entropy floored at `entropy_floor`.
pub fn concentration_profile(
    trace: &AttentionTrace,
    entropy_floor: f64,
) -> Result<ConcentrationProfile> {
    let stats = layer_head_stats(trace)?;
    let heads = trace.num_heads();
    let mut mean_max = Vec::with_capacity(trace.num_layers());
    let mut mean_entropy = Vec::with_capacity(trace.num_layers());
    let mut ratio = Vec::with_capacity(trace.num_layers());
    for layer_stats in stats.chunks_exact(heads) {
        let m = layer_stats.iter().map(|s| s.max_score).sum::<f64>() / heads as f64;
        let h = layer_stats.iter().map(|s| s.entropy).sum::<f64>() / heads as f64;
        mean_max.push(m);
        mean_entropy.push(h);
        ratio.push(m / h.max(entropy_floor));
    }
    let delta = forward_difference(&ratio);
    Ok(ConcentrationProfile {
        layer_ids: trace.header().layer_ids.clone(),
        mean_max,
        mean_entropy,
        ratio,
        delta,
    })
}

/// Focus window length as a fraction of depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFraction {
    Fixed(f64),
    /// 0.40 when the post-onset plateau (layers with `R >= 0.8 max R`)
    /// covers more than 35% of the depth, else 0.30.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub lambda: f64,
    pub baseline_fraction: f64,
    pub window: WindowFraction,
    pub sigma_floor: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            lambda: 2.0,
            baseline_fraction: 0.25,
            window: WindowFraction::Fixed(0.30),
            sigma_floor: DEFAULT_FLOOR,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        if !(self.baseline_fraction > 0.0 && self.baseline_fraction < 1.0) {
            return Err(Error::InvalidArgument(
                "baseline fraction must be in (0, 1)".into(),
            ));
        }
        if let WindowFraction::Fixed(rho) = self.window {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::InvalidArgument("window fraction must be in (0, 1)".into()));
            }
        }
        if self.sigma_floor.is_nan() || self.sigma_floor <= 0.0 {
            return Err(Error::InvalidArgument("sigma floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Diffusion,
    Focus,
    Rediffusion,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Diffusion => "diffusion",
            Phase::Focus => "focus",
            Phase::Rediffusion => "rediffusion",
        }
    }
}

/// Inclusive range of absolute layer ids belonging to one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub first_layer: usize,
    pub last_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseProfile {
    /// Absolute layer id of the focus onset.
    pub l_start: usize,
    /// Absolute layer id of the last focus layer.
    pub l_end: usize,
    pub window: usize,
    pub window_fraction: f64,
    pub baseline_layers: usize,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub threshold: f64,
    pub lambda: f64,
    /// Non-empty phases in layer order.
    pub phases: Vec<PhaseSpan>,
}

impl PhaseProfile {
    pub fn focus_layers(&self, layer_ids: &[usize]) -> Vec<usize> {
        layer_ids
            .iter()
            .copied()
            .filter(|l| (self.l_start..=self.l_end).contains(l))
            .collect()
    }

    pub fn phase_of(&self, layer: usize) -> Option<Phase> {
        self.phases
            .iter()
            .find(|s| (s.first_layer..=s.last_layer).contains(&layer))
            .map(|s| s.phase)
    }
}

/// Baseline statistics reported when no layer crosses the onset threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoFocus {
    pub baseline_layers: usize,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub threshold: f64,
    pub lambda: f64,
    pub max_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PhaseDetection {
    Detected(PhaseProfile),
    NoFocusDetected(NoFocus),
}

impl PhaseDetection {
    pub fn detected(self) -> Option<PhaseProfile> {
        match self {
            PhaseDetection::Detected(p) => Some(p),
            PhaseDetection::NoFocusDetected(_) => None,
        }
    }
}

/// Minimum number of layers for a meaningful baseline.
pub const MIN_LAYERS: usize = 8;

/// Locates the focus phase on a concentration profile.
pub fn detect_phases(profile: &ConcentrationProfile, cfg: &PhaseConfig) -> Result<PhaseDetection> {
    cfg.validate()?;
    let depth = profile.len();
    if depth < MIN_LAYERS {
        return Err(Error::TooFewLayers(depth));
    }
    let delta: Vec<f64> = profile.delta.iter().skip(1).map(|d| d.unwrap_or(f64::NAN)).collect();
    if let Some(i) = delta.iter().position(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite concentration difference at layer {}",
            profile.layer_ids[i + 1]
        )));
    }

    // Differences exist from position 1, so a baseline of n layers yields n-1 samples.
    let baseline_layers =
        (((cfg.baseline_fraction * depth as f64) - 1e-9).ceil() as usize).clamp(2, depth);
    let baseline = &delta[..baseline_layers - 1];
    let mean = baseline.iter().sum::<f64>() / baseline.len() as f64;
    let var = baseline.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / baseline.len() as f64;
    let std = var.sqrt();
    let threshold = mean + cfg.lambda * std.max(cfg.sigma_floor);

    let Some(start) = delta.iter().position(|&d| d > threshold).map(|i| i + 1) else {
        return Ok(PhaseDetection::NoFocusDetected(NoFocus {
            baseline_layers,
            baseline_mean: mean,
            baseline_std: std,
            threshold,
            lambda: cfg.lambda,
            max_delta: delta.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }));
    };

    let window_fraction = match cfg.window {
        WindowFraction::Fixed(rho) => rho,
        WindowFraction::Auto => auto_window_fraction(&profile.ratio, start),
    };
    let window = ((window_fraction * depth as f64).round() as usize).max(1);
    let end = (start + window - 1).min(depth - 1);

    let ids = &profile.layer_ids;
    let mut phases = vec![PhaseSpan {
        phase: Phase::Diffusion,
        first_layer: ids[0],
        last_layer: ids[start - 1],
    }];
    phases.push(PhaseSpan {
        phase: Phase::Focus,
        first_layer: ids[start],
        last_layer: ids[end],
    });
    if end + 1 < depth {
        phases.push(PhaseSpan {
            phase: Phase::Rediffusion,
            first_layer: ids[end + 1],
            last_layer: ids[depth - 1],
        });
    }

    Ok(PhaseDetection::Detected(PhaseProfile {
        l_start: ids[start],
        l_end: ids[end],
        window: end - start + 1,
        window_fraction,
        baseline_layers,
        baseline_mean: mean,
        baseline_std: std,
        threshold,
        lambda: cfg.lambda,
        phases,
    }))
}

fn auto_window_fraction(ratio: &[f64], start: usize) -> f64 {
    let post = &ratio[start..];
    let peak = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let plateau = post.iter().filter(|&&r| r >= 0.8 * peak).count();
    if plateau as f64 > 0.35 * ratio.len() as f64 {
        0.40
    } else {
        0.30
    }
}

/// One CSV row of a concentration profile.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub layer: usize,
    #[serde(rename = "R")]
    pub ratio: f64,
    #[serde(rename = "delta_R")]
    pub delta: Option<f64>,
    pub phase: &'static str,
}

/// Plot-ready rows (layer, R, dR, phase label).
pub fn profile_rows(profile: &ConcentrationProfile, phases: Option<&PhaseProfile>) -> Vec<ProfileRow> {
    profile
        .layer_ids
        .iter()
        .zip(&profile.ratio)
        .zip(&profile.delta)
        .map(|((&layer, &ratio), &delta)| ProfileRow {
            layer,
            ratio,
            delta,
            phase: phases
                .and_then(|p| p.phase_of(layer))
                .map_or("", Phase::as_str),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::{Storage, TraceHeader};

    fn cls_trace(rows: Vec<Vec<f32>>, heads: usize) -> AttentionTrace {
        let n = rows[0].len();
        let layers = rows.len() / heads;
        let header = TraceHeader::vision("t", (0..layers).collect(), heads, n, true, Storage::ClsReduced);
        AttentionTrace::new(header, rows.concat()).unwrap()
    }

    #[test]
    fn cls_uniform_after_removal() {
        let t = cls_trace(vec![vec![0.2; 5]], 1);
        let d = cls_distribution(&t, 0, 0).unwrap();
        assert_eq!(d, vec![0.25; 4]);
    }

    #[test]
    fn cls_one_hot() {
        let t = cls_trace(vec![vec![0.0, 0.0, 0.0, 1.0, 0.0]], 1);
        assert_eq!(cls_distribution(&t, 0, 0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn cls_required() {
        let header = TraceHeader::vision("t", vec![0], 1, 2, false, Storage::Full);
        let t = AttentionTrace::new(header, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(cls_distribution(&t, 0, 0), Err(Error::NoClsToken)));
    }

    #[test]
    fn query_average_small_cases() {
        let header = TraceHeader::vision("t", vec![4], 1, 2, false, Storage::Full);
        let t = AttentionTrace::new(header, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(query_averaged_distribution(&t, 4, 0).unwrap(), vec![0.5, 0.5]);

        let header = TraceHeader::vision("t", vec![0], 1, 4, false, Storage::Full);
        let t = AttentionTrace::new(header, vec![0.25; 16]).unwrap();
        assert_eq!(query_averaged_distribution(&t, 0, 0).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn query_average_needs_full_storage() {
        let t = cls_trace(vec![vec![0.2; 5]], 1);
        assert!(matches!(
            query_averaged_distribution(&t, 0, 0),
            Err(Error::ClsReducedStorage)
        ));
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.25; 4]).unwrap() - 1.386294).abs() < 1e-6);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            entropy(&[1.5, -0.5]),
            Err(Error::NegativeProbability { index: 1, .. })
        ));
    }

    #[test]
    fn uniform_profile_closed_form() {
        let t = cls_trace(vec![vec![1.0 / 101.0; 101]; 3], 3);
        let p = concentration_profile(&t, DEFAULT_FLOOR).unwrap();
        let expected = 0.01 / 100f64.ln();
        assert!((p.ratio[0] - expected).abs() < 1e-9);
        assert!((p.ratio[0] - 0.0021715).abs() < 1e-7);
        assert_eq!(p.delta[0], None);
    }

    #[test]
    fn one_hot_engages_guard() {
        let mut row = vec![0.0; 5];
        row[2] = 1.0;
        let t = cls_trace(vec![row; 2], 2);
        let p = concentration_profile(&t, DEFAULT_FLOOR).unwrap();
        assert_eq!(p.mean_entropy[0], 0.0);
        assert_eq!(p.ratio[0], 1.0 / DEFAULT_FLOOR);
        assert!(p.ratio[0].is_finite());
    }

    fn step_profile(depth: usize, step_at: usize) -> ConcentrationProfile {
        let ratio = (0..depth).map(|l| if l >= step_at { 0.5 } else { 0.1 }).collect();
        ConcentrationProfile::from_ratios((0..depth).collect(), ratio).unwrap()
    }

    #[test]
    fn flat_then_step_uses_floor() {
        let det = detect_phases(&step_profile(24, 12), &PhaseConfig::default()).unwrap();
        let p = det.detected().expect("focus");
        assert_eq!(p.baseline_std, 0.0);
        assert_eq!(p.l_start, 12);
        assert_eq!(p.window, 7);
        assert_eq!(p.l_end, 18);
        assert_eq!(
            p.phases,
            vec![
                PhaseSpan { phase: Phase::Diffusion, first_layer: 0, last_layer: 11 },
                PhaseSpan { phase: Phase::Focus, first_layer: 12, last_layer: 18 },
                PhaseSpan { phase: Phase::Rediffusion, first_layer: 19, last_layer: 23 },
            ]
        );
    }

    #[test]
    fn window_fraction_arithmetic() {
        let cfg = PhaseConfig { window: WindowFraction::Fixed(0.40), ..Default::default() };
        let p = detect_phases(&step_profile(24, 12), &cfg).unwrap().detected().unwrap();
        assert_eq!(p.window, 10);
        assert_eq!(p.l_end, 21);
        // K = round(0.3 * 32) = 10
        let p = detect_phases(&step_profile(32, 17), &PhaseConfig::default())
            .unwrap()
            .detected()
            .unwrap();
        assert_eq!((p.l_start, p.l_end), (17, 26));
    }

    #[test]
    fn window_clamped_at_last_layer() {
        let p = detect_phases(&step_profile(24, 20), &PhaseConfig::default())
            .unwrap()
            .detected()
            .unwrap();
        assert_eq!((p.l_start, p.l_end, p.window), (20, 23, 4));
        assert_eq!(p.phases.len(), 2);
    }

    #[test]
    fn auto_window_broad_plateau() {
        let ratio: Vec<f64> = (0..24).map(|l| if l >= 8 { 1.0 } else { 0.1 }).collect();
        let profile = ConcentrationProfile::from_ratios((0..24).collect(), ratio).unwrap();
        let cfg = PhaseConfig { window: WindowFraction::Auto, ..Default::default() };
        let p = detect_phases(&profile, &cfg).unwrap().detected().unwrap();
        assert_eq!(p.window_fraction, 0.40);

        let mut ratio = vec![0.1; 24];
        ratio[8] = 1.0;
        ratio[9] = 0.9;
        let profile = ConcentrationProfile::from_ratios((0..24).collect(), ratio).unwrap();
        let p = detect_phases(&profile, &cfg).unwrap().detected().unwrap();
        assert_eq!(p.window_fraction, 0.30);
    }

    #[test]
    fn flat_profile_reports_no_focus() {
        let profile = ConcentrationProfile::from_ratios((0..12).collect(), vec![0.3; 12]).unwrap();
        let det = detect_phases(&profile, &PhaseConfig::default()).unwrap();
        assert!(matches!(det, PhaseDetection::NoFocusDetected(_)));
    }

    #[test]
    fn too_few_layers() {
        let profile = ConcentrationProfile::from_ratios((0..7).collect(), vec![0.3; 7]).unwrap();
        assert!(matches!(
            detect_phases(&profile, &PhaseConfig::default()),
            Err(Error::TooFewLayers(7))
        ));
    }

    #[test]
    fn first_crossing_wins_over_late_spike() {
        let mut ratio = vec![0.1; 24];
        for r in &mut ratio[9..16] {
            *r = 0.6;
        }
        ratio[23] = 5.0;
        let profile = ConcentrationProfile::from_ratios((0..24).collect(), ratio).unwrap();
        let p = detect_phases(&profile, &PhaseConfig::default()).unwrap().detected().unwrap();
        assert_eq!((p.l_start, p.l_end), (9, 15));
    }

    #[test]
    fn profile_rows_label_phases() {
        let profile = step_profile(24, 12);
        let p = detect_phases(&profile, &PhaseConfig::default()).unwrap().detected().unwrap();
        let rows = profile_rows(&profile, Some(&p));
        assert_eq!(rows[0].phase, "diffusion");
        assert_eq!(rows[12].phase, "focus");
        assert_eq!(rows[23].phase, "rediffusion");
        assert!((rows[12].delta.unwrap() - 0.4).abs() < 1e-12);
    }
}
