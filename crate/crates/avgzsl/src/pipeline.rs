//! End-to-end system: trains every stage on one benchmark, routes test
//! samples through a gate to the seen or unseen classifier, and scores the
//! composite with generalized zero-shot metrics.
//!
//! The gate is swappable: either trained detector, calibrated stacking with a
//! bias constant, or an oracle that routes by ground truth. The ablation
//! drivers retrain or swap single stages while holding the rest fixed:
//! detector comparison, classifier pairings, negative-loss masks of the
//! unseen classifier, and a threshold sweep of the entropy detector.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset, DatasetConfig, Split};
use crate::generator::{FeatureGenerator, GeneratorConfig};
use crate::metrics::{self, harmonic_mean, mean_class_accuracy, roc_curve, RocCurve};
use crate::nn::{Activation, Mat};
use crate::ood::{DetectorKind, OodConfig, OodDetector};
use crate::seen::{SeenConfig, SoftmaxClassifier};
use crate::unseen::{LossMask, UnseenClassifier, UnseenConfig};
use crate::{Error, Result};

/// Stage seed offsets, so stages draw from unrelated streams even though one
/// run seed drives everything.
pub const SEED_GENERATOR: u64 = 0x10;
pub const SEED_BINARY: u64 = 0x20;
pub const SEED_ENTROPY: u64 = 0x30;
pub const SEED_SEEN: u64 = 0x40;
pub const SEED_UNSEEN: u64 = 0x50;
/// Synthesis stream offset for the stacking tuner's fake unseen batch.
const SEED_TUNING_SYNTH: u64 = 0x57AC;

/// How test samples are routed between the two classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GatingMethod {
    /// Entropy detector at its trained threshold.
    OodEntropy,
    /// Binary detector at its trained threshold.
    OodBinary,
    /// Seen-confidence minus unseen-similarity minus `gamma`; `None` tunes
    /// gamma on the validation split before evaluating.
    CalibratedStacking { gamma: Option<f64> },
    /// Ground-truth routing; the upper bound for any gate on the same models.
    Oracle,
}

impl GatingMethod {
    pub fn label(&self) -> &'static str {
        match self {
            GatingMethod::OodEntropy => "ood-entropy",
            GatingMethod::OodBinary => "ood-binary",
            GatingMethod::CalibratedStacking { .. } => "calibrated-stacking",
            GatingMethod::Oracle => "oracle",
        }
    }
}

/// Hyperparameters for every stage of one run.
///
/// Both detector kinds are trained from the same `ood` block (its `kind`
/// field is overridden per detector). Defaults are tuned for the synthetic
/// desk-scale benchmark; the CLI presets carry the full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub generator: GeneratorConfig,
    pub ood: OodConfig,
    pub seen: SeenConfig,
    pub unseen: UnseenConfig,
    /// Resolution of the gamma sweep when tuning calibrated stacking.
    pub stacking_sweep_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetConfig::default(),
            generator: GeneratorConfig {
                noise_dim: 16,
                gen_hidden: vec![96],
                critic_hidden: vec![96],
                epochs: 25,
                batch_size: 16,
                lr: 5e-4,
                ..GeneratorConfig::default()
            },
            ood: OodConfig {
                kind: DetectorKind::Entropy,
                hidden: vec![64, 32],
                epochs: 60,
                batch_size: 32,
                lr: 1e-3,
                synthetic_per_class: 50,
            },
            seen: SeenConfig { hidden: vec![64, 32], epochs: 80, batch_size: 32, lr: 3e-3 },
            unseen: UnseenConfig {
                block_hidden: 24,
                joint_dim: 12,
                dropout_encoder: 0.0,
                dropout_projector: 0.0,
                dropout_decoder: 0.0,
                activation: Activation::LeakyRelu(0.2),
                text_jitter: 0.15,
                epochs: 300,
                batch_size: 16,
                lr: 4e-4,
                ..UnseenConfig::default()
            },
            stacking_sweep_points: 200,
        }
    }
}

/// One gate's evaluation on the combined test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gating: GatingMethod,
    /// Mean class accuracy on seen-class test samples under routing.
    pub seen_acc: f64,
    /// Mean class accuracy on unseen-class test samples under routing.
    pub unseen_acc: f64,
    pub harmonic: f64,
    /// Unseen-class accuracy with candidates restricted to unseen classes,
    /// independent of the gate.
    pub zsl_acc: f64,
    /// Area under the gate's seen-vs-unseen ROC; absent for the oracle,
    /// which has no score.
    pub auc: Option<f64>,
    /// False-positive rate where the gate reaches 60% true-positive rate.
    pub fpr_at_60_tpr: Option<f64>,
    pub routed_seen: usize,
    pub routed_unseen: usize,
    pub test_samples: usize,
    /// Free-form provenance notes (e.g. the stacking normalization rule and
    /// the gamma actually used).
    pub notes: Vec<String>,
}

/// Every trained stage of one run, ready to evaluate under any gate.
pub struct TrainedPipeline {
    pub config: PipelineConfig,
    pub seed: u64,
    pub dataset: Dataset,
    pub generator: FeatureGenerator,
    pub binary: OodDetector,
    pub entropy: OodDetector,
    pub seen: SoftmaxClassifier,
    pub unseen: UnseenClassifier,
}

/// Per-sample inputs shared by every gate evaluation: combined test features
/// in seen-then-unseen order, both classifiers' predictions, and the
/// gate-independent zero-shot accuracy.
struct EvalBatch {
    feats: Mat,
    labels: Vec<ClassId>,
    is_seen: Vec<bool>,
    seen_preds: Vec<ClassId>,
    unseen_preds: Vec<ClassId>,
    zsl_acc: f64,
}

/// Routed prediction per sample: the seen classifier's where `to_seen`, the
/// unseen classifier's otherwise. Each sample is answered by exactly one
/// classifier.
pub fn routed_predictions(
    to_seen: &[bool],
    seen_preds: &[ClassId],
    unseen_preds: &[ClassId],
) -> Vec<ClassId> {
    assert_eq!(to_seen.len(), seen_preds.len());
    assert_eq!(to_seen.len(), unseen_preds.len());
    to_seen
        .iter()
        .zip(seen_preds.iter().zip(unseen_preds))
        .map(|(&s, (&sp, &up))| if s { sp } else { up })
        .collect()
}

/// Splits routed predictions back into (seen-test accuracy, unseen-test
/// accuracy), each a mean class accuracy over its own split.
pub fn gated_accuracies(
    predictions: &[ClassId],
    labels: &[ClassId],
    is_seen_true: &[bool],
) -> (f64, f64) {
    assert_eq!(predictions.len(), labels.len());
    assert_eq!(predictions.len(), is_seen_true.len());
    let mut seen_preds = Vec::new();
    let mut seen_labels = Vec::new();
    let mut unseen_preds = Vec::new();
    let mut unseen_labels = Vec::new();
    for i in 0..labels.len() {
        if is_seen_true[i] {
            seen_preds.push(predictions[i]);
            seen_labels.push(labels[i]);
        } else {
            unseen_preds.push(predictions[i]);
            unseen_labels.push(labels[i]);
        }
    }
    (
        mean_class_accuracy(&seen_preds, &seen_labels),
        mean_class_accuracy(&unseen_preds, &unseen_labels),
    )
}

/// Raw calibrated-stacking score per sample, before subtracting gamma:
/// best seen-class probability minus best unseen-class similarity, where
/// similarity is the negated distance min-max normalized to [0,1] over the
/// whole evaluated batch. The gate routes seen when `score - gamma >= 0`.
pub fn calibrated_stacking_scores(max_seen_probs: &[f64], unseen_dists: &Mat) -> Vec<f64> {
    assert_eq!(max_seen_probs.len(), unseen_dists.rows, "probability/distance row mismatch");
    assert!(unseen_dists.cols > 0, "no unseen candidates");
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &d in &unseen_dists.data {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let span = hi - lo;
    (0..unseen_dists.rows)
        .map(|i| {
            let min_dist = unseen_dists.row(i).iter().cloned().fold(f64::INFINITY, f64::min);
            // All-equal distances carry no information; sit in the middle.
            let sim = if span > 0.0 { 1.0 - (min_dist - lo) / span } else { 0.5 };
            max_seen_probs[i] - sim
        })
        .collect()
}

impl TrainedPipeline {
    /// Trains all stages on `dataset` with stage seeds derived from `seed`.
    pub fn train(dataset: Dataset, config: &PipelineConfig, seed: u64) -> Result<TrainedPipeline> {
        let (generator, _) =
            FeatureGenerator::train(&dataset, &config.generator, seed.wrapping_add(SEED_GENERATOR))?;
        let binary_cfg = OodConfig { kind: DetectorKind::Binary, ..config.ood.clone() };
        let entropy_cfg = OodConfig { kind: DetectorKind::Entropy, ..config.ood.clone() };
        let (binary, _) =
            OodDetector::train(&dataset, &generator, &binary_cfg, seed.wrapping_add(SEED_BINARY))?;
        let (entropy, _) =
            OodDetector::train(&dataset, &generator, &entropy_cfg, seed.wrapping_add(SEED_ENTROPY))?;
        let (seen, _) =
            SoftmaxClassifier::train_seen(&dataset, &config.seen, seed.wrapping_add(SEED_SEEN))?;
        let (unseen, _) =
            UnseenClassifier::train(&dataset, &config.unseen, seed.wrapping_add(SEED_UNSEEN))?;
        Ok(TrainedPipeline {
            config: config.clone(),
            seed,
            dataset,
            generator,
            binary,
            entropy,
            seen,
            unseen,
        })
    }

    fn eval_batch(&self) -> Result<EvalBatch> {
        self.eval_batch_with(&self.seen, &self.unseen)
    }

    /// Same as [`eval_batch`](Self::eval_batch) but with substitute
    /// classifier heads, for the ablations that swap a single stage.
    fn eval_batch_with(
        &self,
        seen: &SoftmaxClassifier,
        unseen: &UnseenClassifier,
    ) -> Result<EvalBatch> {
        let ds = &self.dataset;
        let seen_idx = ds.split_indices(Split::TestSeen);
        let unseen_idx = ds.split_indices(Split::TestUnseen);
        if seen_idx.is_empty() || unseen_idx.is_empty() {
            return Err(Error::Config("both test splits must be non-empty".into()));
        }
        let mut idx = seen_idx.clone();
        idx.extend(&unseen_idx);
        let feats = ds.fused(&idx);
        let labels = ds.labels_of(&idx);
        let mut is_seen = vec![true; seen_idx.len()];
        is_seen.extend(vec![false; unseen_idx.len()]);

        let seen_preds = seen.predict(&feats);
        let unseen_preds = unseen.predict(&feats, &ds.text_embeddings, &ds.unseen_class_ids());
        let zsl_acc = {
            let preds: Vec<ClassId> = unseen_preds[seen_idx.len()..].to_vec();
            mean_class_accuracy(&preds, &labels[seen_idx.len()..])
        };
        Ok(EvalBatch { feats, labels, is_seen, seen_preds, unseen_preds, zsl_acc })
    }

    /// Seen-ness scores of the stacking gate over a feature batch, using this
    /// pipeline's classifier heads.
    pub fn stacking_scores(&self, feats: &Mat) -> Vec<f64> {
        let probs = self.seen.max_probabilities(feats);
        let texts = self.dataset.text_for_classes(&self.dataset.unseen_class_ids());
        let dists = self.unseen.distances_to_texts(feats, &texts);
        calibrated_stacking_scores(&probs, &dists)
    }

    /// Picks the stacking constant by maximizing harmonic-mean accuracy on a
    /// tuning batch of real validation (seen) samples plus synthesized
    /// unseen-class samples, swept over `stacking_sweep_points` candidates.
    pub fn tune_stacking_gamma(&self) -> Result<f64> {
        let ds = &self.dataset;
        let val_idx = ds.split_indices(Split::Val);
        if val_idx.is_empty() {
            return Err(Error::Config("stacking tuning needs a validation split".into()));
        }
        let unseen_classes = ds.unseen_class_ids();
        let (synth, synth_labels) = self.generator.synthesize(
            &ds.text_embeddings,
            &unseen_classes,
            self.config.ood.synthetic_per_class,
            self.seed.wrapping_add(SEED_TUNING_SYNTH),
        );

        let val_feats = ds.fused(&val_idx);
        let feats = Mat::vcat(&[&val_feats, &synth]);
        let mut labels = ds.labels_of(&val_idx);
        labels.extend(synth_labels);
        let mut is_seen = vec![true; val_idx.len()];
        is_seen.extend(vec![false; synth.rows]);

        let scores = self.stacking_scores(&feats);
        let seen_preds = self.seen.predict(&feats);
        let unseen_preds = self.unseen.predict(&feats, &ds.text_embeddings, &unseen_classes);

        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Pad so the sweep reaches both all-seen and all-unseen routings.
        let pad = 1e-6 + (hi - lo) * 0.01;
        let (lo, hi) = (lo - pad, hi + pad);
        let n = self.config.stacking_sweep_points.max(2);

        let mut best = (f64::NEG_INFINITY, lo);
        for k in 0..n {
            let gamma = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            let to_seen: Vec<bool> = scores.iter().map(|&s| s - gamma >= 0.0).collect();
            let preds = routed_predictions(&to_seen, &seen_preds, &unseen_preds);
            let (s, u) = gated_accuracies(&preds, &labels, &is_seen);
            let hm = harmonic_mean(s, u);
            if hm > best.0 {
                best = (hm, gamma);
            }
        }
        Ok(best.1)
    }

    /// Evaluates the full system on the combined test splits under one gate.
    pub fn evaluate_gzsl(&self, gating: GatingMethod) -> Result<EvalReport> {
        let batch = self.eval_batch()?;
        self.evaluate_on(&batch, gating)
    }

    fn evaluate_on(&self, batch: &EvalBatch, gating: GatingMethod) -> Result<EvalReport> {
        let mut notes = Vec::new();
        let (scores, to_seen): (Option<Vec<f64>>, Vec<bool>) = match gating {
            GatingMethod::OodEntropy | GatingMethod::OodBinary => {
                let det = if gating == GatingMethod::OodEntropy { &self.entropy } else { &self.binary };
                let scores = det.seen_scores(&batch.feats);
                let to_seen = scores.iter().map(|&s| s >= det.threshold).collect();
                notes.push(format!("detector threshold {}", det.threshold));
                (Some(scores), to_seen)
            }
            GatingMethod::CalibratedStacking { gamma } => {
                let gamma = match gamma {
                    Some(g) => g,
                    None => {
                        let g = self.tune_stacking_gamma()?;
                        notes.push("gamma tuned on validation + synthesized unseen".into());
                        g
                    }
                };
                notes.push(format!(
                    "gamma {gamma}; unseen distances min-max normalized over the test batch"
                ));
                let scores = self.stacking_scores(&batch.feats);
                let to_seen = scores.iter().map(|&s| s - gamma >= 0.0).collect();
                (Some(scores), to_seen)
            }
            GatingMethod::Oracle => (None, batch.is_seen.clone()),
        };

        let preds = routed_predictions(&to_seen, &batch.seen_preds, &batch.unseen_preds);
        let (seen_acc, unseen_acc) = gated_accuracies(&preds, &batch.labels, &batch.is_seen);
        let (auc, fpr) = match &scores {
            Some(s) => {
                let curve = roc_curve(s, &batch.is_seen);
                (Some(curve.auc), Some(metrics::fpr_at_tpr(&curve, 0.6)))
            }
            None => (None, None),
        };
        let routed_seen = to_seen.iter().filter(|&&b| b).count();
        Ok(EvalReport {
            gating,
            seen_acc,
            unseen_acc,
            harmonic: harmonic_mean(seen_acc, unseen_acc),
            zsl_acc: batch.zsl_acc,
            auc,
            fpr_at_60_tpr: fpr,
            routed_seen,
            routed_unseen: to_seen.len() - routed_seen,
            test_samples: to_seen.len(),
            notes,
        })
    }
}

/// Synthesizes the benchmark for `seed` and trains every stage on it.
pub fn run_seed(config: &PipelineConfig, seed: u64) -> Result<TrainedPipeline> {
    let dataset = Dataset::synthesize(&config.dataset, seed)?;
    TrainedPipeline::train(dataset, config, seed)
}

/// Independent full runs, one per seed, in parallel.
pub fn run_seeds(config: &PipelineConfig, seeds: &[u64]) -> Result<Vec<TrainedPipeline>> {
    seeds.par_iter().map(|&s| run_seed(config, s)).collect()
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One detector-comparison row: seed-averaged metrics for a gate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasMethodRow {
    pub method: String,
    pub auc: f64,
    pub fpr_at_60_tpr: f64,
    pub harmonic: f64,
}

/// ROC plot data for one gate, built from the scores of all seeds pooled,
/// so a single curve summarizes the whole comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocPlotData {
    pub method: String,
    /// Area of the pooled curve (the table column is the per-seed mean).
    pub auc: f64,
    pub curve: RocCurve,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasAblation {
    pub seeds: Vec<u64>,
    /// One row per gate: entropy, binary, stacking.
    pub rows: Vec<BiasMethodRow>,
    pub roc_curves: Vec<RocPlotData>,
}

/// Compares the three bias-reduction gates on the same trained models:
/// detector gates at their trained thresholds, stacking at its
/// validation-tuned gamma. Metrics are averaged over seeds; ROC plot data
/// pools all seeds' scores per gate.
pub fn ablate_bias_methods(config: &PipelineConfig, seeds: &[u64]) -> Result<BiasAblation> {
    require_seeds(seeds)?;
    let gates = [
        GatingMethod::OodEntropy,
        GatingMethod::OodBinary,
        GatingMethod::CalibratedStacking { gamma: None },
    ];

    struct SeedOutcome {
        reports: Vec<EvalReport>,
        scores: Vec<Vec<f64>>,
        is_seen: Vec<bool>,
    }

    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|&seed| -> Result<SeedOutcome> {
            let pipe = run_seed(config, seed)?;
            let batch = pipe.eval_batch()?;
            let mut reports = Vec::new();
            let mut scores = Vec::new();
            for gate in gates {
                let report = pipe.evaluate_on(&batch, gate)?;
                reports.push(report);
                scores.push(match gate {
                    GatingMethod::OodEntropy => pipe.entropy.seen_scores(&batch.feats),
                    GatingMethod::OodBinary => pipe.binary.seen_scores(&batch.feats),
                    GatingMethod::CalibratedStacking { .. } => pipe.stacking_scores(&batch.feats),
                    GatingMethod::Oracle => unreachable!(),
                });
            }
            Ok(SeedOutcome { reports, scores, is_seen: batch.is_seen })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut roc_curves = Vec::new();
    for (g, gate) in gates.iter().enumerate() {
        let aucs: Vec<f64> =
            outcomes.iter().map(|o| o.reports[g].auc.expect("scored gate")).collect();
        let fprs: Vec<f64> =
            outcomes.iter().map(|o| o.reports[g].fpr_at_60_tpr.expect("scored gate")).collect();
        let hms: Vec<f64> = outcomes.iter().map(|o| o.reports[g].harmonic).collect();
        rows.push(BiasMethodRow {
            method: gate.label().into(),
            auc: mean(&aucs),
            fpr_at_60_tpr: mean(&fprs),
            harmonic: mean(&hms),
        });

        let mut pooled_scores = Vec::new();
        let mut pooled_labels = Vec::new();
        for o in &outcomes {
            pooled_scores.extend_from_slice(&o.scores[g]);
            pooled_labels.extend_from_slice(&o.is_seen);
        }
        let curve = roc_curve(&pooled_scores, &pooled_labels);
        roc_curves.push(RocPlotData { method: gate.label().into(), auc: curve.auc, curve });
    }
    Ok(BiasAblation { seeds: seeds.to_vec(), rows, roc_curves })
}

/// One classifier-pairing row under the fixed entropy gate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierPairingRow {
    pub seen_model: String,
    pub unseen_model: String,
    /// Seen-test accuracy under routing (depends only on the seen head).
    pub seen_acc: f64,
    /// Unseen-test accuracy under routing (depends only on the unseen head).
    pub unseen_acc: f64,
    pub harmonic: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierAblation {
    pub seeds: Vec<u64>,
    /// Pairings: perceptron/perceptron, embedding/embedding,
    /// perceptron/embedding.
    pub rows: Vec<ClassifierPairingRow>,
}

/// Compares classifier pairings with the entropy gate fixed. "Perceptron" is
/// the softmax head; as an unseen classifier it can only train on synthesized
/// unseen features. "Embedding" is the joint-space model; as a seen
/// classifier it matches against seen-class texts.
pub fn ablate_classifiers(config: &PipelineConfig, seeds: &[u64]) -> Result<ClassifierAblation> {
    require_seeds(seeds)?;

    // (seen accuracy, unseen accuracy) per (head kind) per seed.
    let per_seed: Vec<[(f64, f64); 2]> = seeds
        .par_iter()
        .map(|&seed| -> Result<[(f64, f64); 2]> {
            let pipe = run_seed(config, seed)?;
            let ds = &pipe.dataset;
            let unseen_classes = ds.unseen_class_ids();

            // Perceptron unseen head: trained purely on synthesized features.
            let (synth, synth_labels) = pipe.generator.synthesize(
                &ds.text_embeddings,
                &unseen_classes,
                config.ood.synthetic_per_class,
                seed.wrapping_add(SEED_TUNING_SYNTH),
            );
            let (p_unseen, _) = SoftmaxClassifier::train_on(
                &synth,
                &synth_labels,
                &unseen_classes,
                &config.seen,
                seed.wrapping_add(SEED_SEEN).wrapping_add(1),
            )?;

            let batch = pipe.eval_batch()?;
            let to_seen = pipe.entropy.classify_seen(&batch.feats);

            // Heads beyond the pipeline's own: embedding-as-seen predicts the
            // nearest seen-class text; perceptron-as-unseen is `p_unseen`.
            let e_seen_preds =
                pipe.unseen.predict(&batch.feats, &ds.text_embeddings, &ds.seen_class_ids());
            let p_unseen_preds = p_unseen.predict(&batch.feats);

            let score = |seen_preds: &[ClassId], unseen_preds: &[ClassId]| {
                let preds = routed_predictions(&to_seen, seen_preds, unseen_preds);
                gated_accuracies(&preds, &batch.labels, &batch.is_seen)
            };
            // Perceptron heads then embedding heads; mixed pairings later
            // recombine the seen slot of one with the unseen slot of the
            // other, which is exact because S depends only on the seen head
            // and U only on the unseen head under a fixed gate.
            Ok([
                score(&batch.seen_preds, &p_unseen_preds),
                score(&e_seen_preds, &batch.unseen_preds),
            ])
        })
        .collect::<Result<_>>()?;

    let avg = |f: &dyn Fn(&[(f64, f64); 2]) -> f64| {
        mean(&per_seed.iter().map(f).collect::<Vec<_>>())
    };
    let p_s = avg(&|o| o[0].0);
    let p_u = avg(&|o| o[0].1);
    let e_s = avg(&|o| o[1].0);
    let e_u = avg(&|o| o[1].1);

    let row = |sm: &str, um: &str, s: f64, u: f64| ClassifierPairingRow {
        seen_model: sm.into(),
        unseen_model: um.into(),
        seen_acc: s,
        unseen_acc: u,
        harmonic: harmonic_mean(s, u),
    };
    Ok(ClassifierAblation {
        seeds: seeds.to_vec(),
        rows: vec![
            row("perceptron", "perceptron", p_s, p_u),
            row("embedding", "embedding", e_s, e_u),
            row("perceptron", "embedding", p_s, e_u),
        ],
    })
}

/// One negative-loss-mask row under the fixed entropy gate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NegLossRow {
    pub mask: LossMask,
    /// Unseen-test accuracy under routing with this mask's unseen head.
    pub unseen_acc: f64,
    /// Seen-test accuracy; identical across rows since only the unseen head
    /// changes.
    pub seen_acc: f64,
    pub harmonic: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NegLossAblation {
    pub seeds: Vec<u64>,
    /// One row per loss mask, in [`LossMask::ALL`] order.
    pub rows: Vec<NegLossRow>,
}

/// Retrains the unseen classifier under each loss mask with the generator,
/// detector, and seen classifier frozen, and scores each variant under the
/// entropy gate.
pub fn ablate_negative_losses(config: &PipelineConfig, seeds: &[u64]) -> Result<NegLossAblation> {
    require_seeds(seeds)?;
    let per_seed: Vec<Vec<(f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, f64)>> {
            let pipe = run_seed(config, seed)?;
            let mut rows = Vec::new();
            for mask in LossMask::ALL {
                let unseen = if mask == config.unseen.loss_mask {
                    pipe.unseen.clone()
                } else {
                    let cfg = UnseenConfig { loss_mask: mask, ..config.unseen.clone() };
                    UnseenClassifier::train(&pipe.dataset, &cfg, seed.wrapping_add(SEED_UNSEEN))?.0
                };
                let batch = pipe.eval_batch_with(&pipe.seen, &unseen)?;
                let to_seen = pipe.entropy.classify_seen(&batch.feats);
                let preds = routed_predictions(&to_seen, &batch.seen_preds, &batch.unseen_preds);
                rows.push(gated_accuracies(&preds, &batch.labels, &batch.is_seen));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let rows = LossMask::ALL
        .iter()
        .enumerate()
        .map(|(m, &mask)| {
            let s = mean(&per_seed.iter().map(|r| r[m].0).collect::<Vec<_>>());
            let u = mean(&per_seed.iter().map(|r| r[m].1).collect::<Vec<_>>());
            NegLossRow { mask, unseen_acc: u, seen_acc: s, harmonic: harmonic_mean(s, u) }
        })
        .collect();
    Ok(NegLossAblation { seeds: seeds.to_vec(), rows })
}

/// One point of the entropy-threshold sweep. `tau` is in entropy units: a
/// sample routes to the seen side when its predictive entropy is at most
/// `tau`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub tau: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub harmonic: f64,
    /// Fraction of seen-test samples routed seen.
    pub tpr: f64,
    /// Fraction of unseen-test samples routed seen.
    pub fpr: f64,
    /// Marks the detector's own operating threshold (mean training entropy).
    pub is_operating: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThresholdSweep {
    /// Sweep rows in ascending tau order, including the flagged operating
    /// point.
    pub points: Vec<ThresholdPoint>,
    pub operating_tau: f64,
}

impl TrainedPipeline {
    /// Sweeps the entropy detector's threshold over [0, ln K] with
    /// `n_points` rows total, one of them the trained operating point.
    pub fn threshold_sweep(&self, n_points: usize) -> Result<ThresholdSweep> {
        if n_points < 2 {
            return Err(Error::Config("threshold sweep needs at least 2 points".into()));
        }
        let batch = self.eval_batch()?;
        let scores = self.entropy.seen_scores(&batch.feats);
        let k = self.entropy.seen_classes.len() as f64;
        let operating_tau = -self.entropy.threshold;

        let mut taus: Vec<(f64, bool)> = (0..n_points - 1)
            .map(|i| (k.ln() * i as f64 / (n_points - 2) as f64, false))
            .collect();
        taus.push((operating_tau, true));
        taus.sort_by(|a, b| a.0.total_cmp(&b.0));

        let n_seen = batch.is_seen.iter().filter(|&&s| s).count() as f64;
        let n_unseen = batch.is_seen.len() as f64 - n_seen;
        let points = taus
            .into_iter()
            .map(|(tau, is_operating)| {
                // Score is negative entropy, so entropy <= tau means score >= -tau.
                let to_seen: Vec<bool> = scores.iter().map(|&s| s >= -tau).collect();
                let preds = routed_predictions(&to_seen, &batch.seen_preds, &batch.unseen_preds);
                let (seen_acc, unseen_acc) = gated_accuracies(&preds, &batch.labels, &batch.is_seen);
                let tp = to_seen
                    .iter()
                    .zip(&batch.is_seen)
                    .filter(|&(&r, &t)| r && t)
                    .count() as f64;
                let fp = to_seen
                    .iter()
                    .zip(&batch.is_seen)
                    .filter(|&(&r, &t)| r && !t)
                    .count() as f64;
                ThresholdPoint {
                    tau,
                    seen_acc,
                    unseen_acc,
                    harmonic: harmonic_mean(seen_acc, unseen_acc),
                    tpr: tp / n_seen,
                    fpr: fp / n_unseen,
                    is_operating,
                }
            })
            .collect();
        Ok(ThresholdSweep { points, operating_tau })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            dataset: DatasetConfig {
                seen_classes: 4,
                unseen_classes: 2,
                audio_dim: 4,
                visual_dim: 4,
                text_dim: 6,
                latent_dim: 3,
                samples_per_class: 30,
                spread: 0.2,
                text_noise: 0.01,
            },
            generator: GeneratorConfig {
                noise_dim: 4,
                gen_hidden: vec![24],
                critic_hidden: vec![24],
                epochs: 10,
                batch_size: 12,
                lr: 1e-3,
                ..GeneratorConfig::default()
            },
            ood: OodConfig {
                kind: DetectorKind::Entropy,
                hidden: vec![16],
                epochs: 20,
                batch_size: 16,
                lr: 2e-3,
                synthetic_per_class: 20,
            },
            seen: SeenConfig { hidden: vec![16], epochs: 25, batch_size: 16, lr: 5e-3 },
            unseen: UnseenConfig {
                block_hidden: 16,
                joint_dim: 8,
                dropout_encoder: 0.05,
                dropout_projector: 0.0,
                dropout_decoder: 0.05,
                epochs: 12,
                batch_size: 16,
                lr: 2e-3,
                ..UnseenConfig::default()
            },
            stacking_sweep_points: 60,
        }
    }

    fn random_routing_case(
        seed: u64,
    ) -> (Vec<ClassId>, Vec<bool>, Vec<ClassId>, Vec<ClassId>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(10..40);
        let seen_pool = [ClassId(0), ClassId(1), ClassId(2)];
        let unseen_pool = [ClassId(3), ClassId(4)];
        let mut labels = Vec::new();
        let mut is_seen = Vec::new();
        let mut seen_preds = Vec::new();
        let mut unseen_preds = Vec::new();
        let mut to_seen = Vec::new();
        for _ in 0..n {
            let seen = rng.random_bool(0.5);
            is_seen.push(seen);
            labels.push(if seen {
                seen_pool[rng.random_range(0..3)]
            } else {
                unseen_pool[rng.random_range(0..2)]
            });
            seen_preds.push(seen_pool[rng.random_range(0..3)]);
            unseen_preds.push(unseen_pool[rng.random_range(0..2)]);
            to_seen.push(rng.random_bool(0.5));
        }
        (labels, is_seen, seen_preds, unseen_preds, to_seen)
    }

    #[test]
    fn oracle_routing_never_loses_to_any_gate() {
        for seed in 0..1000 {
            let (labels, is_seen, seen_preds, unseen_preds, to_seen) = random_routing_case(seed);
            if is_seen.iter().all(|&s| s) || is_seen.iter().all(|&s| !s) {
                continue;
            }
            let gated = routed_predictions(&to_seen, &seen_preds, &unseen_preds);
            let oracle = routed_predictions(&is_seen, &seen_preds, &unseen_preds);
            let (gs, gu) = gated_accuracies(&gated, &labels, &is_seen);
            let (os, ou) = gated_accuracies(&oracle, &labels, &is_seen);
            assert!(gs <= os + 1e-12, "seed {seed}: gated S {gs} > oracle {os}");
            assert!(gu <= ou + 1e-12, "seed {seed}: gated U {gu} > oracle {ou}");
        }
    }

    #[test]
    fn routing_everything_unseen_zeroes_seen_accuracy() {
        let (labels, is_seen, seen_preds, unseen_preds, _) = random_routing_case(7);
        let to_seen = vec![false; labels.len()];
        let preds = routed_predictions(&to_seen, &seen_preds, &unseen_preds);
        let (s, _) = gated_accuracies(&preds, &labels, &is_seen);
        assert_eq!(s, 0.0);
        let (su, uu) = gated_accuracies(&preds, &labels, &is_seen);
        assert_eq!(harmonic_mean(su, uu), 0.0);
    }

    #[test]
    fn perfect_models_with_oracle_routing_score_one() {
        let (labels, is_seen, _, _, _) = random_routing_case(11);
        // Perfect heads answer the true label whenever it is in their space.
        let preds = routed_predictions(&is_seen, &labels, &labels);
        let (s, u) = gated_accuracies(&preds, &labels, &is_seen);
        assert_eq!((s, u), (1.0, 1.0));
        assert_eq!(harmonic_mean(s, u), 1.0);
    }

    #[test]
    fn stacking_score_is_confidence_minus_similarity() {
        // Two samples, two unseen candidates; distances span [1, 3].
        let dists = Mat::from_vec(2, 2, vec![1.0, 3.0, 2.0, 3.0]);
        let probs = vec![0.9, 0.4];
        let scores = calibrated_stacking_scores(&probs, &dists);
        // Sample 0: min dist 1 -> normalized 0 -> similarity 1.
        assert!((scores[0] - (0.9 - 1.0)).abs() < 1e-12);
        // Sample 1: min dist 2 -> normalized 0.5 -> similarity 0.5.
        assert!((scores[1] - (0.4 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn extreme_gammas_route_everything_one_way() {
        let dists = Mat::from_vec(3, 2, vec![1.0, 2.0, 0.5, 1.5, 2.0, 4.0]);
        let probs = vec![0.5, 0.8, 0.3];
        let scores = calibrated_stacking_scores(&probs, &dists);
        let all_unseen: Vec<bool> = scores.iter().map(|&s| s - 100.0 >= 0.0).collect();
        let all_seen: Vec<bool> = scores.iter().map(|&s| s + 100.0 >= 0.0).collect();
        assert!(all_unseen.iter().all(|&b| !b));
        assert!(all_seen.iter().all(|&b| b));
    }

    #[test]
    fn end_to_end_reports_are_consistent() {
        let config = tiny_config();
        let pipe = run_seed(&config, 5).unwrap();

        for gating in [
            GatingMethod::OodEntropy,
            GatingMethod::OodBinary,
            GatingMethod::CalibratedStacking { gamma: None },
            GatingMethod::Oracle,
        ] {
            let r = pipe.evaluate_gzsl(gating).unwrap();
            assert_eq!(r.routed_seen + r.routed_unseen, r.test_samples);
            assert!((0.0..=1.0).contains(&r.seen_acc), "{gating:?}: S {}", r.seen_acc);
            assert!((0.0..=1.0).contains(&r.unseen_acc));
            assert_eq!(r.harmonic, harmonic_mean(r.seen_acc, r.unseen_acc));
            match gating {
                GatingMethod::Oracle => assert!(r.auc.is_none() && r.fpr_at_60_tpr.is_none()),
                _ => {
                    assert!((0.0..=1.0).contains(&r.auc.unwrap()));
                    assert!((0.0..=1.0).contains(&r.fpr_at_60_tpr.unwrap()));
                }
            }
        }

        // The oracle bounds the trained gates on the same models.
        let oracle = pipe.evaluate_gzsl(GatingMethod::Oracle).unwrap();
        for gating in [GatingMethod::OodEntropy, GatingMethod::OodBinary] {
            let r = pipe.evaluate_gzsl(gating).unwrap();
            assert!(r.seen_acc <= oracle.seen_acc + 1e-12);
            assert!(r.unseen_acc <= oracle.unseen_acc + 1e-12);
            assert_eq!(r.zsl_acc, oracle.zsl_acc);
        }
    }

    #[test]
    fn threshold_sweep_covers_both_extremes() {
        let config = tiny_config();
        let pipe = run_seed(&config, 6).unwrap();
        let sweep = pipe.threshold_sweep(50).unwrap();
        assert_eq!(sweep.points.len(), 50);
        assert_eq!(sweep.points.iter().filter(|p| p.is_operating).count(), 1);

        let first = sweep.points.first().unwrap();
        let last = sweep.points.last().unwrap();
        // tau = 0: everything routed unseen; tau = ln K: everything seen.
        assert_eq!((first.tpr, first.fpr), (0.0, 0.0));
        assert_eq!(first.seen_acc, 0.0);
        assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
        assert_eq!(last.unseen_acc, 0.0);

        // Taus ascend and the routed-seen fractions ascend with them.
        for w in sweep.points.windows(2) {
            assert!(w[0].tau <= w[1].tau);
            assert!(w[0].tpr <= w[1].tpr + 1e-12);
            assert!(w[0].fpr <= w[1].fpr + 1e-12);
        }

        let op = sweep.points.iter().find(|p| p.is_operating).unwrap();
        assert!((op.tau - sweep.operating_tau).abs() < 1e-12);
        let report = pipe.evaluate_gzsl(GatingMethod::OodEntropy).unwrap();
        assert!((op.harmonic - report.harmonic).abs() < 1e-12);
    }

    #[test]
    fn seed_reruns_are_identical() {
        let config = tiny_config();
        let a = run_seed(&config, 3).unwrap();
        let b = run_seed(&config, 3).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let ra = a.evaluate_gzsl(GatingMethod::OodEntropy).unwrap();
        let rb = b.evaluate_gzsl(GatingMethod::OodEntropy).unwrap();
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
        let sa = a.evaluate_gzsl(GatingMethod::CalibratedStacking { gamma: None }).unwrap();
        let sb = b.evaluate_gzsl(GatingMethod::CalibratedStacking { gamma: None }).unwrap();
        assert_eq!(serde_json::to_string(&sa).unwrap(), serde_json::to_string(&sb).unwrap());
    }

    #[test]
    fn classifier_ablation_reuses_components_exactly() {
        let config = tiny_config();
        let table = ablate_classifiers(&config, &[4]).unwrap();
        assert_eq!(table.rows.len(), 3);
        let (pp, ee, pe) = (&table.rows[0], &table.rows[1], &table.rows[2]);
        assert_eq!(pe.seen_acc, pp.seen_acc);
        assert_eq!(pe.unseen_acc, ee.unseen_acc);
        for row in &table.rows {
            assert_eq!(row.harmonic, harmonic_mean(row.seen_acc, row.unseen_acc));
        }
    }

    #[test]
    fn neg_loss_ablation_keeps_seen_side_fixed() {
        let config = tiny_config();
        let table = ablate_negative_losses(&config, &[8]).unwrap();
        assert_eq!(table.rows.len(), 5);
        let s0 = table.rows[0].seen_acc;
        for row in &table.rows {
            assert_eq!(row.seen_acc, s0);
            assert_eq!(row.harmonic, harmonic_mean(row.seen_acc, row.unseen_acc));
        }
    }
}
