//! Visual Attention Ratio over decoder attention.
//!
//! VAR of a generated token at one (layer, head) is the attention mass its
//! row places on the image tokens of the context. Image-level statistics
//! average uniformly over tokens, layers and heads; conditions are compared
//! with Welch's unequal-variance t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::trace_io::DecoderTrace;

/// VAR of generated token `k` at absolute `layer` and `head`.
pub fn var_per_token(trace: &DecoderTrace, k: usize, layer: usize, head: usize) -> Result<f64> {
    let pos = trace.header().layer_position(layer)?;
    var_at(trace, k, pos, head)
}

fn var_at(trace: &DecoderTrace, k: usize, pos: usize, head: usize) -> Result<f64> {
    let row = trace.row(k, pos, head)?;
    let [start, end] = trace.visual_span();
    if start >= end || end > row.len() {
        return Err(Error::OutOfRange(format!(
            "visual span [{start}, {end}) outside row of length {}",
            row.len()
        )));
    }
    Ok(row[start..end].iter().map(|&v| v as f64).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarStats {
    pub condition_label: String,
    pub layer_ids: Vec<usize>,
    pub num_heads: usize,
    pub num_tokens: usize,
    /// VAR values indexed `[layer][head][token]`, flattened.
    pub values: Vec<f64>,
    /// Mean VAR per (layer, head), `[layer][head]` flattened.
    pub layer_head_grid: Vec<f64>,
    pub image_mean: f64,
}

impl VarStats {
    pub fn value(&self, layer_pos: usize, head: usize, token: usize) -> f64 {
        self.values[(layer_pos * self.num_heads + head) * self.num_tokens + token]
    }

    pub fn grid_cell(&self, layer_pos: usize, head: usize) -> f64 {
        self.layer_head_grid[layer_pos * self.num_heads + head]
    }

    /// Plot-ready (layer, head, mean_var) rows.
    pub fn grid_rows(&self) -> Vec<GridRow> {
        self.layer_ids
            .iter()
            .enumerate()
            .flat_map(|(pos, &layer)| {
                (0..self.num_heads).map(move |head| GridRow {
                    layer,
                    head,
                    mean_var: self.grid_cell(pos, head),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridRow {
    pub layer: usize,
    pub head: usize,
    pub mean_var: f64,
}

/// Per-cell VAR, the layer-head grid and the image-level mean.
pub fn var_stats(trace: &DecoderTrace, label: impl Into<String>) -> Result<VarStats> {
    let (t, l, h) = (trace.num_generated(), trace.num_layers(), trace.num_heads());
    if t == 0 {
        return Err(Error::EmptyInput("decoder trace has no generated tokens".into()));
    }
    let mut values = Vec::with_capacity(l * h * t);
    let mut grid = Vec::with_capacity(l * h);
    for pos in 0..l {
        for head in 0..h {
            let start = values.len();
            for k in 0..t {
                values.push(var_at(trace, k, pos, head)?);
            }
            grid.push(values[start..].iter().sum::<f64>() / t as f64);
        }
    }
    let image_mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(VarStats {
        condition_label: label.into(),
        layer_ids: trace.header().layer_ids.clone(),
        num_heads: h,
        num_tokens: t,
        values,
        layer_head_grid: grid,
        image_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "a>b")]
    Greater,
    #[serde(rename = "a<b")]
    Less,
    #[serde(rename = "a=b")]
    Equal,
}

/// Welch two-sample t-test result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub direction: Direction,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's t-test with a two-sided p-value.
///
/// When both samples have zero variance the statistic is 0 with `p = 1` for
/// equal means, and infinite with `p = 0` otherwise.
pub fn compare_conditions(a: &[f64], b: &[f64]) -> Result<Comparison> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples per condition, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let (mean_a, var_a) = mean_var(a);
    let (mean_b, var_b) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let direction = match mean_a.partial_cmp(&mean_b) {
        Some(std::cmp::Ordering::Greater) => Direction::Greater,
        Some(std::cmp::Ordering::Less) => Direction::Less,
        _ => Direction::Equal,
    };
    let se_a = var_a / na;
    let se_b = var_b / nb;
    let se2 = se_a + se_b;
    let diff = mean_a - mean_b;

    let (statistic, df, p_value) = if se2 == 0.0 {
        if diff == 0.0 {
            (0.0, f64::NAN, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, f64::NAN, 0.0)
        }
    } else {
        let t = diff / se2.sqrt();
        let df = se2 * se2 / (se_a * se_a / (na - 1.0) + se_b * se_b / (nb - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
        let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
        (t, df, p)
    };
    Ok(Comparison {
        statistic,
        df,
        p_value,
        direction,
        mean_a,
        mean_b,
        n_a: a.len(),
        n_b: b.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::TraceHeader;

    fn decoder(rows: Vec<f32>, t: usize, layers: usize, heads: usize, n: usize, span: [usize; 2]) -> DecoderTrace {
        let header = TraceHeader::decoder("m", (0..layers).collect(), heads, n, span, t);
        DecoderTrace::new(header, rows).unwrap()
    }

    #[test]
    fn var_half_and_full() {
        let d = decoder(vec![0.25, 0.25, 0.5, 0.0], 1, 1, 1, 4, [0, 2]);
        assert_eq!(var_per_token(&d, 0, 0, 0).unwrap(), 0.5);
        let d = decoder(vec![0.0, 0.7, 0.3, 0.0], 1, 1, 1, 4, [1, 3]);
        assert!((var_per_token(&d, 0, 0, 0).unwrap() - 1.0).abs() < 1e-7);
        assert!(var_per_token(&d, 1, 0, 0).is_err());
        assert!(matches!(var_per_token(&d, 0, 5, 0), Err(Error::LayerNotFound(5))));
    }

    #[test]
    fn stats_means() {
        let d = decoder(vec![0.2, 0.8], 1, 1, 1, 2, [0, 1]);
        let s = var_stats(&d, "x").unwrap();
        assert!((s.image_mean - 0.2).abs() < 1e-7);

        let d = decoder(vec![0.2, 0.8, 0.6, 0.4], 2, 1, 1, 2, [0, 1]);
        let s = var_stats(&d, "x").unwrap();
        assert!((s.image_mean - 0.4).abs() < 1e-7);
        assert_eq!(s.grid_rows().len(), 1);
    }

    #[test]
    fn identical_samples() {
        let a = [0.4, 0.5, 0.6];
        let c = compare_conditions(&a, &a).unwrap();
        assert_eq!(c.statistic, 0.0);
        assert_eq!(c.p_value, 1.0);
        assert_eq!(c.direction, Direction::Equal);
    }

    #[test]
    fn constant_samples() {
        let c = compare_conditions(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!((c.statistic, c.p_value), (0.0, 1.0));
        let c = compare_conditions(&[0.6, 0.6], &[0.5, 0.5]).unwrap();
        assert_eq!(c.p_value, 0.0);
        assert_eq!(c.direction, Direction::Greater);
    }

    #[test]
    fn too_few_samples() {
        assert!(compare_conditions(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn direction_serializes() {
        assert_eq!(serde_json::to_value(Direction::Greater).unwrap(), "a>b");
    }
}
