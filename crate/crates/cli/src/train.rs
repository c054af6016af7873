use std::fs;
use std::path::{Path, PathBuf};

use comp_attn::analysis::Grouping;
use comp_attn::task::OodSplit;
use comp_attn::trainer::{streams, write_metrics_csv, Hygiene, RunRecord, RunStatus, Trainer};
use comp_attn::Rng;
use serde::{Deserialize, Serialize};

use crate::analyze::{analyze_model, pretty_json, write_analysis};
use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub alpha: Vec<f64>,
    pub ood_split: Option<OodSplit>,
    pub parameter_count: usize,
    pub final_in_dist_loss: Option<f64>,
    pub final_ood_loss: Option<f64>,
    pub status: RunStatus,
    pub hygiene: Hygiene,
    pub wall_time_secs: f64,
    /// Frobenius distance between pooled train-combination and
    /// held-out-combination value-score matrices.
    pub split_contrast: Option<f64>,
    pub label_specialization: Option<f64>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub in_dist_loss: Option<MeanStd>,
    pub ood_loss: Option<MeanStd>,
    pub completed: usize,
    pub diverged: usize,
}

/// Everything needed to re-run an experiment, plus its per-seed results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub library_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedSummary>,
    pub summary: Summary,
}

impl RunManifest {
    pub fn diverged(&self) -> bool {
        self.summary.diverged > 0
    }
}

/// Trains one seed and writes its artifacts under `dir/seed_<seed>/`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedSummary, CliError> {
    let seed_dir = dir.join(format!("seed_{seed}"));
    fs::create_dir_all(&seed_dir)?;
    let mut trainer = Trainer::for_task(&config.model, &config.task, &config.train, seed)?;
    trainer.run()?;
    let record: RunRecord = trainer.record();
    write_metrics_csv(&seed_dir.join("metrics.csv"), trainer.metrics())?;
    trainer.save_checkpoint(&seed_dir.join("checkpoint.json"))?;
    fs::write(seed_dir.join("record.json"), pretty_json(&record))?;

    let (mut split_contrast, mut label_specialization) = (None, None);
    if record.status == RunStatus::Completed {
        let mut rng = Rng::with_stream(seed, streams::ANALYSIS);
        let out = analyze_model(
            &trainer.model,
            &trainer.spec,
            &mut rng,
            config.analysis.batches,
            config.analysis.batch_size,
            Grouping::Combo,
        )?;
        write_analysis(&seed_dir.join("analysis"), &out)?;
        split_contrast = out.specialization.split_contrast.as_ref().map(|c| c.frobenius);
        label_specialization = Some(out.specialization.label_quality);
    }
    Ok(SeedSummary {
        seed,
        alpha: record.task.alpha.clone(),
        ood_split: record.task.ood.clone(),
        parameter_count: record.parameter_count,
        final_in_dist_loss: record.final_in_dist_loss,
        final_ood_loss: record.final_ood_loss,
        status: record.status,
        hygiene: record.hygiene,
        wall_time_secs: record.wall_time_secs,
        split_contrast,
        label_specialization,
        dir: seed_dir,
    })
}

/// Runs every configured seed (sequentially, or one thread per seed) and
/// writes `manifest.json` into `dir`. Divergence is recorded, not raised;
/// see [`RunManifest::diverged`].
pub fn run_experiment(config: &ExperimentConfig, dir: &Path, parallel_seeds: bool) -> Result<RunManifest, CliError> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let seeds = &config.train.seeds;
    let results: Vec<Result<SeedSummary, CliError>> = if parallel_seeds {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(config, seed, dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(CliError::Other(anyhow::anyhow!("seed thread panicked"))))
                })
                .collect()
        })
    } else {
        seeds.iter().map(|&seed| run_seed(config, seed, dir)).collect()
    };
    let seeds = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let finals = |f: fn(&SeedSummary) -> Option<f64>| -> Option<MeanStd> {
        let v: Option<Vec<f64>> = seeds.iter().map(f).collect();
        v.and_then(|v| MeanStd::of(&v))
    };
    let summary = Summary {
        in_dist_loss: finals(|s| s.final_in_dist_loss),
        ood_loss: finals(|s| s.final_ood_loss),
        completed: seeds.iter().filter(|s| s.status == RunStatus::Completed).count(),
        diverged: seeds.iter().filter(|s| s.status != RunStatus::Completed).count(),
    };
    let manifest = RunManifest {
        name: config.name.clone(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.content_hash(),
        config: config.clone(),
        seeds,
        summary,
    };
    fs::write(dir.join("manifest.json"), pretty_json(&manifest))?;
    Ok(manifest)
}
