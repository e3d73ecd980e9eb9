//! Command implementations: run experiments and write their artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use selflearn::checkpoint::Checkpoint;
use selflearn::data::{generate, split_ssl};
use selflearn::encoder::EncoderModel;
use selflearn::losses::LossKind;
use selflearn::propagation::{DataPools, LabeledExample, Origin};
use selflearn::selftrain::{
    evaluate_accuracy, pretrain_source, run_self_learning, KnnReference, MetaIterationReport,
    TrainedModel,
};

use crate::config::{RunConfig, SweepCondition};

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings_final.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub iteration0_accuracy: f64,
    pub final_accuracy: f64,
    pub all_labeled_reference_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    started_at: String,
    finished_at: String,
    reports: &'a [MetaIterationReport],
    summary: &'a RunSummary,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn csv_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn write_results_csv(path: &Path, reports: &[MetaIterationReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writer.write_record([
        "meta_iteration",
        "labeled_count",
        "selected_count",
        "mean_confidence",
        "selected_pseudo_accuracy",
        "train_loss",
        "test_accuracy",
    ])?;
    for r in reports {
        writer.write_record([
            r.iteration.to_string(),
            r.labeled_count.to_string(),
            r.selected_count.to_string(),
            csv_opt(r.mean_confidence),
            csv_opt(r.selected_pseudo_accuracy),
            r.train_loss.to_string(),
            r.test_accuracy.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn write_embeddings_csv(path: &Path, model: &TrainedModel, pools: &DataPools) -> Result<()> {
    let features = pools.test_features().map_err(|e| anyhow!("{e}"))?;
    let embeddings = model.encoder.embed(&features).map_err(|e| anyhow!("{e}"))?;
    let d = embeddings.cols();
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    let mut header: Vec<String> = (0..d).map(|i| format!("e{i}")).collect();
    header.push("label".to_string());
    writer.write_record(&header)?;
    for (i, example) in pools.test.iter().enumerate() {
        let mut row: Vec<String> = embeddings.row(i).iter().map(|v| v.to_string()).collect();
        row.push(example.label.to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Train on every available label (seed + audited unlabeled) with no
/// meta-iterations; the resulting accuracy is the empirical upper bound.
fn all_labeled_accuracy(config: &RunConfig, pools: &DataPools) -> Result<f64> {
    let mut full = pools.clone();
    for example in full.unlabeled.drain(..) {
        let label = example
            .audit_label
            .ok_or_else(|| anyhow!("all_labeled_reference requires audited ground truth"))?;
        full.labeled.push(LabeledExample {
            features: example.features,
            label,
            origin: Origin::Seed,
        });
    }
    let mut experiment = config.experiment.clone();
    experiment.meta_iterations = 0;
    let outcome = run_self_learning(&experiment, full).map_err(|e| anyhow!("{e}"))?;
    Ok(outcome.reports[0].test_accuracy)
}

/// Execute one self-learning run and write results.csv, manifest.json, and
/// embeddings_final.csv under `out_dir`.
pub fn run_selftrain(config: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let started_at = now();

    let dataset = generate(&config.dataset).map_err(|e| anyhow!("{e}"))?;
    let pools = split_ssl(&dataset, &config.split, config.experiment.seed)
        .map_err(|e| anyhow!("{e}"))?;
    let reference = config
        .all_labeled_reference
        .then(|| all_labeled_accuracy(config, &pools))
        .transpose()?;

    let outcome = run_self_learning(&config.experiment, pools).map_err(|e| anyhow!("{e}"))?;
    let summary = RunSummary {
        iteration0_accuracy: outcome.reports[0].test_accuracy,
        final_accuracy: outcome.reports.last().expect("at least one report").test_accuracy,
        all_labeled_reference_accuracy: reference,
    };

    write_results_csv(&out_dir.join(RESULTS_FILE), &outcome.reports)?;
    write_embeddings_csv(&out_dir.join(EMBEDDINGS_FILE), &outcome.model, &outcome.pools)?;
    let manifest = Manifest {
        config,
        started_at,
        finished_at: now(),
        reports: &outcome.reports,
        summary: &summary,
    };
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    eprintln!(
        "selftrain: {} meta-iterations, labeled {} -> {}, accuracy {:.4} -> {:.4}",
        outcome.reports.len() - 1,
        outcome.reports[0].labeled_count,
        outcome.reports.last().unwrap().labeled_count,
        summary.iteration0_accuracy,
        summary.final_accuracy,
    );
    Ok(summary)
}

/// Train on the fully labeled source dataset and write the checkpoint.
pub fn run_pretrain(config: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let source = config
        .source_dataset
        .as_ref()
        .ok_or_else(|| anyhow!("config has no source_dataset section"))?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let dataset = generate(source).map_err(|e| anyhow!("{e}"))?;
    let task = format!("{:?}-c{}-seed{}", source.kind, dataset.classes, source.seed);
    let (_, checkpoint) =
        pretrain_source(&dataset, &config.experiment, &task).map_err(|e| anyhow!("{e}"))?;
    let path = out_dir.join(CHECKPOINT_FILE);
    checkpoint.save(&path).map_err(|e| anyhow!("{e}"))?;
    eprintln!(
        "pretrain: task {task}, {} parameter arrays -> {}",
        checkpoint.parameters.len(),
        path.display()
    );
    Ok(path)
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every sweep condition over `seeds` consecutive seeds and write the
/// aggregate table. Each run lands in `<out>/<condition>/seed_<seed>/`.
pub fn run_sweep(config: &RunConfig, out_dir: &Path, seeds: usize, fixed_seed: bool) -> Result<()> {
    if seeds < 2 {
        bail!("--seeds must be at least 2");
    }
    let default_conditions = vec![SweepCondition {
        name: "default".to_string(),
        loss: None,
        init: None,
    }];
    let conditions = config
        .sweep
        .as_ref()
        .map(|s| s.conditions.clone())
        .unwrap_or(default_conditions);

    fs::create_dir_all(out_dir)?;
    let mut writer = csv::Writer::from_path(out_dir.join(AGGREGATE_FILE))?;
    writer.write_record([
        "condition",
        "runs",
        "iteration0_mean",
        "iteration0_std",
        "final_mean",
        "final_std",
    ])?;

    for condition in &conditions {
        let mut iter0 = Vec::with_capacity(seeds);
        let mut finals = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let mut run_config = config.with_condition(condition);
            if !fixed_seed {
                run_config.experiment.seed = config.experiment.seed + s as u64;
            }
            let dir = out_dir
                .join(&condition.name)
                .join(format!("seed_{}", run_config.experiment.seed));
            let summary = run_selftrain(&run_config, &dir)
                .with_context(|| format!("condition `{}`, seed {s}", condition.name))?;
            iter0.push(summary.iteration0_accuracy);
            finals.push(summary.final_accuracy);
        }
        let (i_mean, i_std) = mean_and_std(&iter0);
        let (f_mean, f_std) = mean_and_std(&finals);
        writer.write_record([
            condition.name.clone(),
            iter0.len().to_string(),
            i_mean.to_string(),
            i_std.to_string(),
            f_mean.to_string(),
            f_std.to_string(),
        ])?;
        eprintln!(
            "sweep `{}`: iteration0 {:.4} +/- {:.4}, final {:.4} +/- {:.4}",
            condition.name, i_mean, i_std, f_mean, f_std
        );
    }
    writer.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct EvalReport {
    test_accuracy: f64,
    method: String,
    k: Option<usize>,
}

/// Rebuild the model from a checkpoint and report test accuracy: softmax
/// argmax for cross-entropy checkpoints, 1-NN over the seed-labeled
/// reference set for metric losses.
pub fn run_eval(config: &RunConfig, checkpoint_path: &Path, out_dir: &Path) -> Result<f64> {
    fs::create_dir_all(out_dir)?;
    let checkpoint = Checkpoint::load(checkpoint_path).map_err(|e| anyhow!("{e}"))?;
    let spec = &config.experiment.encoder;
    if checkpoint.metadata.encoder_fingerprint != spec.fingerprint() {
        bail!(
            "checkpoint incompatible with target encoder: checkpoint is `{}`, config expects `{}`",
            checkpoint.metadata.encoder_fingerprint,
            spec.fingerprint()
        );
    }
    let layer_count = spec.layer_dims().len();
    let mut body = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let weight = checkpoint
            .get(&format!("layer{i}.weight"))
            .ok_or_else(|| anyhow!("checkpoint is missing layer{i}.weight"))?
            .clone();
        let bias = checkpoint
            .get(&format!("layer{i}.bias"))
            .ok_or_else(|| anyhow!("checkpoint is missing layer{i}.bias"))?
            .clone();
        body.push((weight, bias));
    }
    let head = if config.experiment.loss.kind == LossKind::CrossEntropy {
        let weight = checkpoint
            .get("head.weight")
            .ok_or_else(|| anyhow!("cross-entropy eval requires head.weight in the checkpoint"))?
            .clone();
        let bias = checkpoint
            .get("head.bias")
            .ok_or_else(|| anyhow!("cross-entropy eval requires head.bias in the checkpoint"))?
            .clone();
        Some((weight, bias))
    } else {
        None
    };
    let encoder = EncoderModel::with_parameters(spec, body, head).map_err(|e| anyhow!("{e}"))?;
    let model = TrainedModel {
        encoder,
        arcface: None,
    };

    let dataset = generate(&config.dataset).map_err(|e| anyhow!("{e}"))?;
    let pools = split_ssl(&dataset, &config.split, config.experiment.seed)
        .map_err(|e| anyhow!("{e}"))?;

    let mut experiment = config.experiment.clone();
    experiment.knn_reference = KnnReference::SeedOnly;
    let features = pools.test_features().map_err(|e| anyhow!("{e}"))?;
    let labels = pools.test_labels();
    let accuracy = evaluate_accuracy(&model, &experiment, &pools, &features, &labels)
        .map_err(|e| anyhow!("{e}"))?;

    let report = EvalReport {
        test_accuracy: accuracy,
        method: match config.experiment.loss.kind {
            LossKind::CrossEntropy => "softmax".to_string(),
            _ => "knn".to_string(),
        },
        k: match config.experiment.loss.kind {
            LossKind::CrossEntropy => None,
            _ => Some(config.experiment.knn_k),
        },
    };
    fs::write(
        out_dir.join(EVAL_FILE),
        serde_json::to_string_pretty(&report)?,
    )?;
    eprintln!("eval: test accuracy {accuracy:.4} ({})", report.method);
    Ok(accuracy)
}
