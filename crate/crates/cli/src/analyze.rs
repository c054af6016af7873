use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use comp_attn::analysis::{
    aggregate_value_scores, align_searches, collect_traces, complexity_report, label_matrix, matrix_csv,
    specialization_score, split_contrast, ComplexityReport, Grouping, SplitContrast, ValueScoreStats,
};
use comp_attn::model::{ModelConfig, TaskModel};
use comp_attn::task::TaskSpec;
use comp_attn::trainer::{streams, Checkpoint};
use comp_attn::Rng;
use serde::Serialize;

use crate::error::CliError;

/// Diagnostic summary of how value scores organise around the task's
/// ground-truth structure.
#[derive(Debug, Clone, Serialize)]
pub struct SpecializationSummary {
    /// Provenance of the quality numbers below.
    pub note: &'static str,
    /// Multi-head traces carry the fixed identity pairing, not learned
    /// scores; every statistic then reflects that identity.
    pub implicit_identity: bool,
    pub warning: Option<String>,
    /// Model search → task search used for the label grouping.
    pub search_map: Vec<usize>,
    /// Ground-truth label × learned retrieval slot.
    pub label_matrix: Vec<Vec<f64>>,
    pub label_assignment: Vec<Option<usize>>,
    pub label_quality: f64,
    /// Group key → assignment quality of that group's search × retrieval
    /// matrix.
    pub groups: BTreeMap<String, f64>,
    /// Train-combination vs held-out-combination pooled matrices, when the
    /// task has a split.
    pub split_contrast: Option<SplitContrast>,
}

pub const SPECIALIZATION_NOTE: &str =
    "quality = assigned mass / total mass under an exact maximum-weight assignment; a diagnostic defined by this tool";

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisOutput {
    pub stats: ValueScoreStats,
    pub specialization: SpecializationSummary,
    pub complexity: ComplexityReport,
}

/// Traces `batches` fresh batches over every preference combination and
/// summarises the value scores.
pub fn analyze_model(
    model: &TaskModel,
    spec: &TaskSpec,
    rng: &mut Rng,
    batches: usize,
    batch_size: usize,
    grouping: Grouping,
) -> Result<AnalysisOutput, CliError> {
    let traces = collect_traces(model, spec, rng, batches, batch_size, None)?;
    let search_map = align_searches(&traces, spec.retrievals)?;
    let stats = aggregate_value_scores(&traces, grouping, Some(&search_map))?;
    let by_label = aggregate_value_scores(&traces, Grouping::Retrieval, Some(&search_map))?;
    let labels = label_matrix(&by_label, spec.retrievals)?;
    let label_spec = specialization_score(&labels)?;
    let mut groups = BTreeMap::new();
    for g in &stats.groups {
        let observed: Vec<Vec<f64>> = g
            .mean
            .iter()
            .zip(&g.counts)
            .filter(|(_, &c)| c > 0)
            .map(|(row, _)| row.clone())
            .collect();
        groups.insert(g.key.clone(), specialization_score(&observed)?.quality);
    }
    let split_contrast = match &spec.ood {
        Some(split) => {
            let by_combo = if grouping == Grouping::Combo {
                stats.clone()
            } else {
                aggregate_value_scores(&traces, Grouping::Combo, Some(&search_map))?
            };
            Some(split_contrast(&by_combo, split)?)
        }
        None => None,
    };
    let implicit_identity = stats.implicit_identity;
    let specialization = SpecializationSummary {
        note: SPECIALIZATION_NOTE,
        implicit_identity,
        warning: implicit_identity
            .then(|| "multi-head attention: value scores are the fixed identity pairing, not learned".to_string()),
        search_map,
        label_matrix: labels,
        label_assignment: label_spec.assignment,
        label_quality: label_spec.quality,
        groups,
        split_contrast,
    };
    let complexity = complexity_report(&model.attention_config, spec.objects)?;
    Ok(AnalysisOutput {
        stats,
        specialization,
        complexity,
    })
}

fn file_safe(key: &str) -> String {
    key.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `value_scores.json`, one CSV per group under `value_scores/`,
/// `specialization.json` and `complexity.json` into `dir`.
pub fn write_analysis(dir: &Path, out: &AnalysisOutput) -> Result<(), CliError> {
    let csv_dir = dir.join("value_scores");
    fs::create_dir_all(&csv_dir)?;
    let grouping = match out.stats.grouping {
        Grouping::Retrieval => "retrieval",
        Grouping::Combo => "combo",
    };
    for g in &out.stats.groups {
        fs::write(
            csv_dir.join(format!("{grouping}_{}.csv", file_safe(&g.key))),
            matrix_csv(&g.mean),
        )?;
    }
    fs::write(dir.join("value_scores.json"), pretty_json(&out.stats))?;
    fs::write(dir.join("specialization.json"), pretty_json(&out.specialization))?;
    fs::write(dir.join("complexity.json"), pretty_json(&out.complexity))?;
    Ok(())
}

pub(crate) fn pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

/// Rebuilds the model stored in `checkpoint`, analyses it on fresh
/// batches from the checkpoint's task and writes the artifacts to `dir`.
pub fn analyze_checkpoint(
    checkpoint: &Path,
    grouping: Grouping,
    dir: &Path,
    batches: usize,
    batch_size: usize,
) -> Result<AnalysisOutput, CliError> {
    if batches == 0 || batch_size == 0 {
        return Err(CliError::Config(
            "analysis batches and batch size must be positive".into(),
        ));
    }
    let ck = Checkpoint::read(checkpoint)?;
    let config: ModelConfig = serde_json::from_value(ck.model.clone())
        .map_err(|e| CliError::Config(format!("checkpoint model configuration: {e}")))?;
    let model = TaskModel::new(
        &config,
        ck.task.input_width(),
        &mut Rng::with_stream(ck.seed, streams::INIT),
    )?;
    ck.load_params(&model.store)?;
    let mut rng = Rng::with_stream(ck.seed, streams::ANALYSIS);
    let out = analyze_model(&model, &ck.task, &mut rng, batches, batch_size, grouping)?;
    write_analysis(dir, &out)?;
    Ok(out)
}
