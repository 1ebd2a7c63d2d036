use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use focusgate::dpp::{build_kernel, greedy_map, similarity_matrix, token_importance, topk_select};
use focusgate::dynamics::{
    concentration_profile, detect_phases, profile_rows, PhaseConfig, PhaseDetection, WindowFraction,
    DEFAULT_FLOOR,
};
use focusgate::mask::{
    build_mask, build_modulation, bundled_profile, low_attention_group, retained_count, MaskFile,
    ModulationMode, RatioReading,
};
use focusgate::metrics::{
    amber_from, analyze, build_records, chair_from, image_rows, object_f1_from, parse_annotations,
    parse_captions_jsonl, F1Mode, ObjectLexicon,
};
use focusgate::synth::{generate, FixtureSpec};
use focusgate::trace_io::{read_trace, write_trace, AttentionTrace, FeatureDump, TraceFile, TraceHeader};
use focusgate::var::{compare_conditions, var_stats, GridRow, VarStats};
use focusgate::{Error, SelectionResult};
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    Cli, CliError, MetricsArgs, ModeArg, Outcome, PhaseFlags, PhasesArgs, SelectArgs, Suite,
    SynthArgs, VarArgs, EXIT_NO_FOCUS, EXIT_OK,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dpp,
    Topk,
}

fn internal(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{what} {}: {e}", path.display()))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| internal("cannot create", dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| internal("cannot encode", path, e))?;
    fs::write(path, text + "\n").map_err(|e| internal("cannot write", path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| internal("cannot write", path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| internal("cannot write", path, e))?;
    }
    w.flush().map_err(|e| internal("cannot write", path, e))
}

fn load(path: &Path, strict: bool) -> Result<TraceFile, CliError> {
    let loaded = read_trace(path, strict)?;
    for w in &loaded.warnings {
        log::warn!("{}: {}: {}", path.display(), w.kind, w.message);
    }
    Ok(loaded.trace)
}

fn phase_config(flags: &PhaseFlags) -> Result<PhaseConfig, CliError> {
    let window = if flags.window_frac.eq_ignore_ascii_case("auto") {
        WindowFraction::Auto
    } else {
        let rho: f64 = flags.window_frac.parse().map_err(|_| {
            CliError::Usage(format!("--window-frac expects a number or auto, got {:?}", flags.window_frac))
        })?;
        WindowFraction::Fixed(rho)
    };
    let cfg = PhaseConfig {
        lambda: flags.lambda,
        baseline_fraction: flags.baseline_frac,
        window,
        ..PhaseConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn detection_json(detection: &PhaseDetection, header: &TraceHeader, cfg: &PhaseConfig) -> serde_json::Value {
    let mut value = serde_json::to_value(detection).expect("detection serializes");
    let obj = value.as_object_mut().expect("tagged enum is an object");
    obj.insert("model_id".into(), header.model_id.clone().into());
    obj.insert("layer_ids".into(), serde_json::json!(header.layer_ids));
    obj.insert(
        "config".into(),
        serde_json::json!({
            "lambda": cfg.lambda,
            "baseline_fraction": cfg.baseline_fraction,
            "window": match cfg.window {
                WindowFraction::Fixed(rho) => serde_json::json!(rho),
                WindowFraction::Auto => serde_json::json!("auto"),
            },
            "sigma_floor": cfg.sigma_floor,
        }),
    );
    value
}

pub(crate) fn phases(cli: &Cli, args: &PhasesArgs) -> Outcome {
    let cfg = phase_config(&args.phase)?;
    let trace = load(&args.trace, cli.strict)?.into_vision()?;
    let profile = concentration_profile(&trace, DEFAULT_FLOOR)?;
    let detection = detect_phases(&profile, &cfg)?;
    prepare_dir(&args.out_dir)?;
    let focus = match &detection {
        PhaseDetection::Detected(p) => Some(p),
        PhaseDetection::NoFocusDetected(_) => None,
    };
    write_csv(&args.out_dir.join("profile.csv"), &profile_rows(&profile, focus))?;
    let report = detection_json(&detection, trace.header(), &cfg);
    write_json(&args.out_dir.join("phases.json"), &report)?;
    match focus {
        Some(p) => {
            log::info!("focus window {}..={}", p.l_start, p.l_end);
            Ok(EXIT_OK)
        }
        None => {
            println!("{report}");
            Ok(EXIT_NO_FOCUS)
        }
    }
}

/// Resolved layer and ratio settings for `select`, with where each came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPlan {
    pub model_id: String,
    pub ratio: f64,
    pub ratio_reading: RatioReading,
    pub source_layers: Vec<usize>,
    pub feature_layer: usize,
    pub target_layers: Vec<usize>,
    /// `flag`, `profile` or `phases` per setting.
    pub resolved_from: BTreeMap<&'static str, &'static str>,
}

struct DetectedLayers {
    source: Vec<usize>,
    feature: usize,
    target: Vec<usize>,
}

fn layers_from_phases(trace: &AttentionTrace, cfg: &PhaseConfig) -> Result<DetectedLayers, CliError> {
    let profile = concentration_profile(trace, DEFAULT_FLOOR)?;
    let p = match detect_phases(&profile, cfg)? {
        PhaseDetection::Detected(p) => p,
        PhaseDetection::NoFocusDetected(_) => {
            return Err(CliError::Usage(
                "layers not given and no focus phase detected in the trace".into(),
            ))
        }
    };
    let ids = &trace.header().layer_ids;
    let source: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&l| l < p.l_start && l + 5 >= p.l_start)
        .collect();
    Ok(DetectedLayers {
        source,
        feature: p.l_start - 1,
        target: p.focus_layers(ids),
    })
}

/// Resolves each setting from flags, then the bundled model profile, then
/// the phases detected on `trace`.
pub fn resolve_layers(args: &SelectArgs, trace: &AttentionTrace) -> Result<LayerPlan, CliError> {
    let header = trace.header();
    let profile = match &args.model {
        Some(id) => Some(
            bundled_profile(id).ok_or_else(|| CliError::Usage(format!("no bundled profile for model {id:?}")))?,
        ),
        None => bundled_profile(&header.model_id),
    };
    let model_id = args
        .model
        .clone()
        .or_else(|| profile.as_ref().map(|p| p.model_id.clone()))
        .unwrap_or_else(|| header.model_id.clone());
    let mut from = BTreeMap::new();

    let ratio = match (args.ratio, &profile) {
        (Some(r), _) => {
            from.insert("ratio", "flag");
            r
        }
        (None, Some(p)) => {
            from.insert("ratio", "profile");
            p.masking_ratio
        }
        (None, None) => {
            return Err(CliError::Usage(
                "no masking ratio: pass --ratio or a bundled --model".into(),
            ))
        }
    };

    let needs_phases = profile.is_none()
        && (args.source_layers.is_none() || args.feature_layer.is_none() || args.target_layers.is_none());
    let detected = if needs_phases {
        Some(layers_from_phases(trace, &phase_config(&args.phase)?)?)
    } else {
        None
    };
    let pick = |flag: Option<Vec<usize>>, prof: Option<Vec<usize>>, det: Option<Vec<usize>>| {
        if let Some(v) = flag {
            (v, "flag")
        } else if let Some(v) = prof {
            (v, "profile")
        } else {
            (det.expect("phases resolved when needed"), "phases")
        }
    };
    let (source_layers, s) = pick(
        args.source_layers.clone(),
        profile.as_ref().map(|p| p.source_layers.clone()),
        detected.as_ref().map(|d| d.source.clone()),
    );
    let (feature, f) = pick(
        args.feature_layer.map(|l| vec![l]),
        profile.as_ref().map(|p| vec![p.feature_layer]),
        detected.as_ref().map(|d| vec![d.feature]),
    );
    let (target_layers, t) = pick(
        args.target_layers.clone(),
        profile.as_ref().map(|p| p.target_layers.clone()),
        detected.as_ref().map(|d| d.target.clone()),
    );
    from.insert("source_layers", s);
    from.insert("feature_layer", f);
    from.insert("target_layers", t);
    for (name, origin) in &from {
        log::info!("{name} resolved from {origin}");
    }
    if source_layers.is_empty() || target_layers.is_empty() {
        return Err(CliError::Usage("resolved an empty layer list".into()));
    }
    Ok(LayerPlan {
        model_id,
        ratio,
        ratio_reading: if args.ratio_means_retained {
            RatioReading::Retained
        } else {
            RatioReading::Suppressed
        },
        source_layers,
        feature_layer: feature[0],
        target_layers,
        resolved_from: from,
    })
}

/// The timed selection stage: importance, similarity, kernel and selector.
pub fn select_stage(
    trace: &AttentionTrace,
    features: &FeatureDump,
    source_layers: &[usize],
    k: usize,
    method: Method,
    jitter_rel: f64,
    gain_tol: f64,
) -> focusgate::Result<SelectionResult> {
    let q = token_importance(trace, source_layers)?;
    match method {
        Method::Topk => topk_select(&q, k),
        Method::Dpp => {
            let s = similarity_matrix(features)?;
            let kernel = build_kernel(&q, &s, jitter_rel)?;
            greedy_map(&kernel, k, gain_tol)
        }
    }
}

/// Header of the encoder the mask applies to: the trace's layers plus the targets.
fn encoder_header(header: &TraceHeader, model_id: &str, target_layers: &[usize]) -> TraceHeader {
    let layers: BTreeSet<usize> = header.layer_ids.iter().chain(target_layers).copied().collect();
    TraceHeader::vision(
        model_id,
        layers.into_iter().collect(),
        header.num_heads,
        header.num_tokens,
        header.has_cls,
        header.storage,
    )
}

pub(crate) fn select(cli: &Cli, args: &SelectArgs) -> Outcome {
    let trace = load(&args.trace, cli.strict)?.into_vision()?;
    let features = load(&args.features, cli.strict)?.into_features()?;
    let plan = resolve_layers(args, &trace)?;
    if features.source_layer() != plan.feature_layer {
        return Err(CliError::Usage(format!(
            "feature dump is from layer {}, resolved feature layer is {}",
            features.source_layer(),
            plan.feature_layer
        )));
    }
    if args.mode == ModeArg::LogitShift && args.delta.is_none() {
        return Err(CliError::Usage("--mode logit-shift needs --delta".into()));
    }
    let k = retained_count(plan.ratio, trace.header().num_patches(), plan.ratio_reading)?;

    let started = Instant::now();
    let selection = select_stage(
        &trace,
        &features,
        &plan.source_layers,
        k,
        args.method,
        args.jitter_rel,
        args.gain_tol,
    )?;
    log::info!(
        "selection stage ({:?}, K = {k}) took {:.3} s",
        args.method,
        started.elapsed().as_secs_f64()
    );
    if selection.stopped_early {
        log::warn!("selection stopped early with {} of {k} tokens", selection.k_selected);
    }

    let header = encoder_header(trace.header(), &plan.model_id, &plan.target_layers);
    let mask_file = match args.mode {
        ModeArg::Mask => MaskFile::from(&build_mask(&selection, &header, &plan.target_layers)?),
        ModeArg::InverseMask | ModeArg::LogitShift => {
            let mode = if args.mode == ModeArg::InverseMask {
                ModulationMode::InverseMask
            } else {
                ModulationMode::LogitShift
            };
            let group = low_attention_group(&selection, &header);
            let spec = build_modulation(
                &group,
                mode,
                args.delta,
                &plan.target_layers,
                header.num_tokens,
                header.cls_index(),
            )?;
            MaskFile::from_modulation(&spec, plan.model_id.clone())
        }
    };

    prepare_dir(&args.out_dir)?;
    let mut report = serde_json::to_value(&selection).expect("selection serializes");
    report["config_echo"] = serde_json::json!({
        "plan": plan,
        "method": args.method,
        "mode": mask_file.mode,
        "delta": args.delta,
        "jitter_rel": args.jitter_rel,
        "gain_tol": args.gain_tol,
        "num_patches": trace.header().num_patches(),
        "trace": args.trace,
        "features": args.features,
    });
    write_json(&args.out_dir.join("selection.json"), &report)?;
    write_json(&args.out_dir.join("mask.json"), &mask_file)?;
    Ok(EXIT_OK)
}

fn condition(paths: &[PathBuf], label: &str) -> Result<Vec<VarStats>, CliError> {
    paths
        .par_iter()
        .map(|p| {
            let trace = read_trace(p, false)?.trace.into_decoder()?;
            var_stats(&trace, label).map_err(CliError::from)
        })
        .collect()
}

fn mean_grid(stats: &[VarStats]) -> Result<Vec<GridRow>, CliError> {
    let first = &stats[0];
    if stats
        .iter()
        .any(|s| s.layer_ids != first.layer_ids || s.num_heads != first.num_heads)
    {
        return Err(Error::ShapeMismatch("traces of one condition differ in layers or heads".into()).into());
    }
    let mut rows = first.grid_rows();
    for (i, row) in rows.iter_mut().enumerate() {
        row.mean_var = stats.iter().map(|s| s.layer_head_grid[i]).sum::<f64>() / stats.len() as f64;
    }
    Ok(rows)
}

pub(crate) fn var(args: &VarArgs) -> Outcome {
    if args.a.len() < 2 || args.b.len() < 2 {
        return Err(CliError::Usage(format!(
            "need at least 2 traces per condition, got {} and {}",
            args.a.len(),
            args.b.len()
        )));
    }
    let a = condition(&args.a, &args.label_a)?;
    let b = condition(&args.b, &args.label_b)?;
    let means = |s: &[VarStats]| s.iter().map(|v| v.image_mean).collect::<Vec<_>>();
    let (ma, mb) = (means(&a), means(&b));
    let comparison = compare_conditions(&ma, &mb)?;
    prepare_dir(&args.out_dir)?;
    write_csv(&args.out_dir.join("grid_a.csv"), &mean_grid(&a)?)?;
    write_csv(&args.out_dir.join("grid_b.csv"), &mean_grid(&b)?)?;
    let side = |label: &str, paths: &[PathBuf], m: &[f64]| {
        serde_json::json!({
            "label": label,
            "n": m.len(),
            "traces": paths,
            "image_means": m,
            "mean": m.iter().sum::<f64>() / m.len() as f64,
        })
    };
    let report = serde_json::json!({
        "condition_a": side(&args.label_a, &args.a, &ma),
        "condition_b": side(&args.label_b, &args.b, &mb),
        "comparison": comparison,
        "test": "welch",
    });
    write_json(&args.out_dir.join("report.json"), &report)?;
    Ok(EXIT_OK)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

pub(crate) fn metrics(args: &MetricsArgs) -> Outcome {
    let lexicon = match &args.lexicon {
        Some(p) => ObjectLexicon::from_json(&read_text(p)?)?,
        None => ObjectLexicon::default_coco(),
    };
    let captions = parse_captions_jsonl(&read_text(&args.captions)?)?;
    if captions.is_empty() {
        return Err(CliError::Usage(format!("{} holds no captions", args.captions.display())));
    }
    let annotations = parse_annotations(&read_text(&args.annotations)?)?;
    let records = build_records(&captions, &annotations, &lexicon)?;
    let analyses: Vec<_> = records.par_iter().map(|r| analyze(r, &lexicon)).collect();
    let mode = if args.f1_pooled { F1Mode::Pooled } else { F1Mode::PerImage };
    let report = match args.suite {
        Suite::Chair => chair_from(&analyses).merge(object_f1_from(&analyses, mode)),
        Suite::Amber => amber_from(&analyses),
    };
    prepare_dir(&args.out_dir)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["suite"] = serde_json::json!(match args.suite {
        Suite::Chair => "chair",
        Suite::Amber => "amber",
    });
    write_json(&args.out_dir.join("metrics.json"), &value)?;
    write_csv(&args.out_dir.join("per_image.csv"), &image_rows(&analyses))?;
    Ok(EXIT_OK)
}

pub(crate) fn synth(cli: &Cli, args: &SynthArgs) -> Outcome {
    let text = read_text(&args.spec)?;
    let usage = |e: String| CliError::Usage(format!("invalid synth spec: {e}"));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(e.to_string()))?;
    let entries = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    if entries.is_empty() {
        return Err(usage("no fixtures".into()));
    }
    let mut jobs = Vec::with_capacity(entries.len());
    let mut names = BTreeSet::new();
    for (i, mut entry) in entries.into_iter().enumerate() {
        let obj = entry
            .as_object_mut()
            .ok_or_else(|| usage(format!("entry {i} is not an object")))?;
        let name = match obj.remove("name") {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => return Err(usage(format!("entry {i} has non-string name {other}"))),
            None => format!("fixture_{i:04}"),
        };
        if name.is_empty() || name.contains(['/', '\\']) || !names.insert(name.clone()) {
            return Err(usage(format!("entry {i}: bad or duplicate name {name:?}")));
        }
        obj.entry("seed").or_insert_with(|| (cli.seed + i as u64).into());
        let spec: FixtureSpec = serde_json::from_value(entry).map_err(|e| usage(format!("entry {i}: {e}")))?;
        jobs.push((name, spec));
    }
    let fixtures: Vec<_> = jobs
        .par_iter()
        .map(|(name, spec)| generate(spec).map(|f| (name, f)).map_err(|e| usage(format!("{name}: {e}"))))
        .collect::<Result<_, _>>()?;
    prepare_dir(&args.out_dir)?;
    for (name, fixture) in &fixtures {
        write_trace(args.out_dir.join(format!("{name}.pats")), &fixture.trace)?;
        write_json(&args.out_dir.join(format!("{name}.json")), &fixture.sidecar)?;
    }
    println!("{}", serde_json::json!({ "written": fixtures.len(), "out_dir": args.out_dir }));
    Ok(EXIT_OK)
}
