//! Implementations of the five subcommands. Each writes its artifacts under
//! the experiment's output directory, alongside the fully resolved config
//! (`effective-config.json`) and a timestamped `run.log`; the log is the only
//! file that differs between identical reruns.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use avgzsl::checkpoint::Checkpoint;
use avgzsl::data::{Dataset, Split};
use avgzsl::generator::FeatureGenerator;
use avgzsl::metrics;
use avgzsl::ood::{DetectorKind, OodDetector};
use avgzsl::pipeline::{
    self, TrainedPipeline, SEED_BINARY, SEED_ENTROPY, SEED_GENERATOR, SEED_SEEN, SEED_UNSEEN,
};
use avgzsl::seen::SoftmaxClassifier;
use avgzsl::unseen::UnseenClassifier;
use avgzsl::GatingMethod;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::tables::{
    bias_roc_rows, bias_table_rows, classifier_table_rows, fmt_f64, neg_loss_table_rows,
    threshold_sweep_rows, write_csv, BIAS_HEADER, CLASSIFIER_HEADER, NEG_LOSS_HEADER, ROC_HEADER,
    THRESHOLD_HEADER,
};
use crate::{Ablation, Stage};

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generator => "generator",
            Stage::Ood => "ood",
            Stage::Seen => "seen",
            Stage::Unseen => "unseen",
        }
    }
}

/// Creates the output directory, records provenance, and appends to the run
/// log. Every subcommand that takes a config calls this first.
fn prepare_out_dir(config: &ExperimentConfig, command: &str) -> CliResult<()> {
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    let rendered = serde_json::to_vec_pretty(config).expect("config serializes");
    std::fs::write(dir.join("effective-config.json"), rendered)
        .map_err(|e| CliError::runtime(format!("cannot write effective config: {e}")))?;

    // Timestamps live only here so every other artifact is byte-stable.
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let line = format!("{stamp}\t{command}\n");
    let log = dir.join("run.log");
    let mut existing = std::fs::read_to_string(&log).unwrap_or_default();
    existing.push_str(&line);
    std::fs::write(&log, existing)
        .map_err(|e| CliError::runtime(format!("cannot write run log: {e}")))
}

/// Where `gen-data` writes and the other commands look for a materialized
/// dataset.
fn dataset_dir(config: &ExperimentConfig) -> PathBuf {
    config.dataset_dir.clone().unwrap_or_else(|| config.out_dir.join("dataset"))
}

/// Loads the materialized dataset if one exists, otherwise synthesizes the
/// configured benchmark with the primary seed.
fn resolve_dataset(config: &ExperimentConfig) -> CliResult<Dataset> {
    let dir = dataset_dir(config);
    if dir.join("manifest.json").exists() {
        return Dataset::load(&dir).map_err(CliError::from);
    }
    if config.dataset_dir.is_some() {
        return Err(CliError::dependency(format!(
            "dataset_dir {} has no manifest.json; run `avgzsl gen-data` or point it at a \
             saved dataset",
            dir.display()
        )));
    }
    Dataset::synthesize(&config.pipeline.dataset, config.primary_seed()).map_err(CliError::from)
}

pub fn gen_data(config: &ExperimentConfig) -> CliResult<()> {
    prepare_out_dir(config, "gen-data")?;
    let dataset = Dataset::synthesize(&config.pipeline.dataset, config.primary_seed())?;
    let dir = dataset_dir(config);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    dataset.save(&dir)?;
    println!("dataset written to {}", dir.display());
    println!(
        "classes: {} seen + {} unseen, {} samples",
        dataset.seen_class_ids().len(),
        dataset.unseen_class_ids().len(),
        dataset.sample_count()
    );
    Ok(())
}

fn stage_dir(config: &ExperimentConfig, stage: &str) -> PathBuf {
    config.out_dir.join(stage)
}

fn require_stage(config: &ExperimentConfig, stage: &str) -> CliResult<PathBuf> {
    let dir = stage_dir(config, stage);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::dependency(format!(
            "missing {stage} checkpoint at {}; run `avgzsl train {stage}` first",
            dir.display()
        )));
    }
    Ok(dir)
}

fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> CliResult<()> {
    ck.save(dir)?;
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

fn write_loss_trace(dir: &Path, header: &[&str], rows: Vec<Vec<String>>) -> CliResult<()> {
    write_csv(&dir.join("loss_trace.csv"), header, &rows)
}

pub fn train(stage: Stage, config: &ExperimentConfig) -> CliResult<()> {
    prepare_out_dir(config, &format!("train {}", stage.name()))?;
    // The detector trains against synthesized features, so its prerequisite
    // is checked before anything expensive happens.
    if matches!(stage, Stage::Ood) {
        require_stage(config, "generator")?;
    }

    let seed = config.primary_seed();
    let dataset = resolve_dataset(config)?;
    let dir = stage_dir(config, stage.name());

    match stage {
        Stage::Generator => {
            let (model, trace) = FeatureGenerator::train(
                &dataset,
                &config.pipeline.generator,
                seed.wrapping_add(SEED_GENERATOR),
            )?;
            save_checkpoint(&model.to_checkpoint(seed), &dir)?;
            let rows = trace
                .epochs
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    vec![
                        i.to_string(),
                        fmt_f64(e.critic_loss),
                        fmt_f64(e.generator_loss),
                        fmt_f64(e.penalty),
                        fmt_f64(e.interp_grad_norm),
                    ]
                })
                .collect();
            write_loss_trace(
                &dir,
                &["epoch", "critic_loss", "generator_loss", "penalty", "interp_grad_norm"],
                rows,
            )?;
        }
        Stage::Ood => {
            let generator = FeatureGenerator::from_checkpoint(&Checkpoint::load(&stage_dir(
                config,
                "generator",
            ))?)?;
            let offset =
                if config.pipeline.ood.kind == DetectorKind::Binary { SEED_BINARY } else { SEED_ENTROPY };
            let (model, trace) = OodDetector::train(
                &dataset,
                &generator,
                &config.pipeline.ood,
                seed.wrapping_add(offset),
            )?;
            save_checkpoint(&model.to_checkpoint(seed), &dir)?;
            println!("decision threshold: {}", model.threshold);
            let rows = epoch_loss_rows(&trace.epoch_loss);
            write_loss_trace(&dir, &["epoch", "loss"], rows)?;
        }
        Stage::Seen => {
            let (model, trace) = SoftmaxClassifier::train_seen(
                &dataset,
                &config.pipeline.seen,
                seed.wrapping_add(SEED_SEEN),
            )?;
            save_checkpoint(&model.to_checkpoint(seed), &dir)?;
            if let Some(acc) = trace.val_accuracy {
                println!("validation accuracy: {acc:.4}");
            }
            let rows = epoch_loss_rows(&trace.epoch_loss);
            write_loss_trace(&dir, &["epoch", "loss"], rows)?;
        }
        Stage::Unseen => {
            let (model, trace) = UnseenClassifier::train(
                &dataset,
                &config.pipeline.unseen,
                seed.wrapping_add(SEED_UNSEEN),
            )?;
            save_checkpoint(&model.to_checkpoint(seed), &dir)?;
            let rows = epoch_loss_rows(&trace.epoch_loss);
            write_loss_trace(&dir, &["epoch", "loss"], rows)?;
        }
    }
    Ok(())
}

fn epoch_loss_rows(losses: &[f64]) -> Vec<Vec<String>> {
    losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt_f64(*l)]).collect()
}

/// Loads the four stage checkpoints, checks they come from one seed, and
/// reassembles a [`TrainedPipeline`] around the resolved dataset.
fn load_pipeline(config: &ExperimentConfig) -> CliResult<TrainedPipeline> {
    let mut missing = Vec::new();
    for stage in ["generator", "ood", "seen", "unseen"] {
        if !stage_dir(config, stage).join("manifest.json").exists() {
            missing.push(stage);
        }
    }
    if !missing.is_empty() {
        return Err(CliError::dependency(format!(
            "missing checkpoints for: {}; run `avgzsl train <stage>` for each",
            missing.join(", ")
        )));
    }

    let load = |stage: &str| Checkpoint::load(&stage_dir(config, stage));
    let ck_generator = load("generator")?;
    let ck_ood = load("ood")?;
    let ck_seen = load("seen")?;
    let ck_unseen = load("unseen")?;

    let seed = ck_generator.seed;
    for (stage, ck) in [("ood", &ck_ood), ("seen", &ck_seen), ("unseen", &ck_unseen)] {
        if ck.seed != seed {
            return Err(CliError::dependency(format!(
                "stage checkpoints disagree on the seed: generator has {seed}, {stage} has {}; \
                 retrain with one seed",
                ck.seed
            )));
        }
    }

    let detector = OodDetector::from_checkpoint(&ck_ood)?;
    match (config.gating, detector.config.kind) {
        (GatingMethod::OodEntropy, DetectorKind::Binary) => {
            return Err(CliError::dependency(
                "the ood checkpoint holds a binary detector but the gate is ood-entropy; \
                 retrain the ood stage with kind \"entropy\"",
            ));
        }
        (GatingMethod::OodBinary, DetectorKind::Entropy) => {
            return Err(CliError::dependency(
                "the ood checkpoint holds an entropy detector but the gate is ood-binary; \
                 retrain the ood stage with kind \"binary\"",
            ));
        }
        _ => {}
    }

    let dataset = match config.dataset_dir.is_some()
        || dataset_dir(config).join("manifest.json").exists()
    {
        true => resolve_dataset(config)?,
        // No materialized dataset: regenerate with the checkpoints' seed so
        // evaluation sees exactly the data the stages trained on.
        false => Dataset::synthesize(&config.pipeline.dataset, seed)?,
    };

    // Both detector slots hold the single trained detector; the gate check
    // above guarantees only the matching slot is consulted.
    Ok(TrainedPipeline {
        config: config.pipeline.clone(),
        seed,
        dataset,
        generator: FeatureGenerator::from_checkpoint(&ck_generator)?,
        binary: detector.clone(),
        entropy: detector,
        seen: SoftmaxClassifier::from_checkpoint(&ck_seen)?,
        unseen: UnseenClassifier::from_checkpoint(&ck_unseen)?,
    })
}

pub fn evaluate(config: &ExperimentConfig) -> CliResult<()> {
    prepare_out_dir(config, "evaluate")?;
    let pipe = load_pipeline(config)?;
    let report = pipe.evaluate_gzsl(config.gating)?;

    let rendered = serde_json::to_vec_pretty(&report).expect("report serializes");
    let report_path = config.out_dir.join("report.json");
    std::fs::write(&report_path, rendered)
        .map_err(|e| CliError::runtime(format!("cannot write report: {e}")))?;

    // ROC plot data for score-based gates; the oracle routes on labels and
    // has no score to sweep.
    if let Some(auc) = report.auc {
        let ds = &pipe.dataset;
        let mut idx = ds.split_indices(Split::TestSeen);
        let n_seen = idx.len();
        idx.extend(ds.split_indices(Split::TestUnseen));
        let feats = ds.fused(&idx);
        let mut is_seen = vec![true; n_seen];
        is_seen.extend(vec![false; idx.len() - n_seen]);

        let scores = match config.gating {
            GatingMethod::OodEntropy => pipe.entropy.seen_scores(&feats),
            GatingMethod::OodBinary => pipe.binary.seen_scores(&feats),
            _ => pipe.stacking_scores(&feats),
        };
        let curve = metrics::roc_curve(&scores, &is_seen);
        let rows: Vec<Vec<String>> = curve
            .points
            .iter()
            .map(|p| {
                vec![config.gating.label().to_string(), fmt_f64(auc), fmt_f64(p.fpr), fmt_f64(p.tpr)]
            })
            .collect();
        write_csv(&config.out_dir.join("roc.csv"), &ROC_HEADER, &rows)?;
    }

    println!("report written to {}", report_path.display());
    println!(
        "gate {}: S {:.4}  U {:.4}  HM {:.4}  ZSL {:.4}",
        report.gating.label(),
        report.seen_acc,
        report.unseen_acc,
        report.harmonic,
        report.zsl_acc
    );
    if let Some(auc) = report.auc {
        println!("gate AUC {:.4}", auc);
    }
    Ok(())
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Bias => "bias",
            Ablation::Classifiers => "classifiers",
            Ablation::NegLoss => "neg-loss",
            Ablation::ThresholdSweep => "threshold-sweep",
        }
    }
}

pub fn ablate(which: Ablation, config: &ExperimentConfig) -> CliResult<()> {
    prepare_out_dir(config, &format!("ablate {}", which.name()))?;
    if config.dataset_dir.is_some() {
        return Err(CliError::usage(
            "ablations retrain per seed on the synthetic benchmark spec; unset dataset_dir",
        ));
    }
    let pipeline_config = &config.pipeline;
    let out = |name: &str| config.out_dir.join(name);

    match which {
        Ablation::Bias => {
            let ablation = pipeline::ablate_bias_methods(pipeline_config, &config.seeds)?;
            write_csv(&out("ablate-bias.csv"), &BIAS_HEADER, &bias_table_rows(&ablation))?;
            write_csv(&out("ablate-bias-roc.csv"), &ROC_HEADER, &bias_roc_rows(&ablation))?;
            println!("table written to {}", out("ablate-bias.csv").display());
            println!("plot data written to {}", out("ablate-bias-roc.csv").display());
            for row in &ablation.rows {
                println!(
                    "{:<22} AUC {:.4}  FPR@60TPR {:.4}  HM {:.4}",
                    row.method, row.auc, row.fpr_at_60_tpr, row.harmonic
                );
            }
        }
        Ablation::Classifiers => {
            let ablation = pipeline::ablate_classifiers(pipeline_config, &config.seeds)?;
            write_csv(
                &out("ablate-classifiers.csv"),
                &CLASSIFIER_HEADER,
                &classifier_table_rows(&ablation),
            )?;
            println!("table written to {}", out("ablate-classifiers.csv").display());
            for row in &ablation.rows {
                println!(
                    "seen {:<12} unseen {:<12} S {:.4}  U {:.4}  HM {:.4}",
                    row.seen_model, row.unseen_model, row.seen_acc, row.unseen_acc, row.harmonic
                );
            }
        }
        Ablation::NegLoss => {
            let ablation = pipeline::ablate_negative_losses(pipeline_config, &config.seeds)?;
            write_csv(&out("ablate-neg-loss.csv"), &NEG_LOSS_HEADER, &neg_loss_table_rows(&ablation))?;
            println!("table written to {}", out("ablate-neg-loss.csv").display());
            for row in &ablation.rows {
                println!(
                    "{:<10} U {:.4}  S {:.4}  HM {:.4}",
                    row.mask.label(),
                    row.unseen_acc,
                    row.seen_acc,
                    row.harmonic
                );
            }
        }
        Ablation::ThresholdSweep => {
            let pipe = pipeline::run_seed(pipeline_config, config.primary_seed())?;
            let sweep = pipe.threshold_sweep(config.threshold_sweep_points)?;
            write_csv(
                &out("ablate-threshold-sweep.csv"),
                &THRESHOLD_HEADER,
                &threshold_sweep_rows(&sweep),
            )?;
            println!("table written to {}", out("ablate-threshold-sweep.csv").display());
            let best =
                sweep.points.iter().map(|p| p.harmonic).fold(f64::NEG_INFINITY, f64::max);
            let at_operating =
                sweep.points.iter().find(|p| p.is_operating).map(|p| p.harmonic).unwrap_or(0.0);
            println!(
                "operating tau {:.4}: HM {:.4} (best over sweep {:.4})",
                sweep.operating_tau, at_operating, best
            );
        }
    }
    Ok(())
}

// Subcommand implementations are exercised end to end by tests/cli.rs, which
// drives the compiled binary through tiny configs.
