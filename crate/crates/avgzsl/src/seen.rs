//! Softmax classifier over a fixed class list, used as the seen-class head
//! and reused by the classifier ablations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{restore_mlp, Checkpoint};
use crate::data::{ClassId, Dataset, Split};
use crate::nn::{Activation, Adam, BoundMlp, Mat, Mlp, Tape, Var};
use crate::{Error, Result};

pub const SEEN_CHECKPOINT_KIND: &str = "seen-classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeenConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SeenConfig {
    fn default() -> Self {
        SeenConfig { hidden: vec![512, 256], epochs: 200, batch_size: 128, lr: 8e-3 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SeenTrace {
    pub epoch_loss: Vec<f64>,
    /// Mean class accuracy on the validation split after training (only set
    /// when a validation split exists).
    pub val_accuracy: Option<f64>,
}

/// Cross-entropy objective of the classifier on a feature batch.
pub fn classifier_loss(tape: &mut Tape, net: &BoundMlp, features: Var, labels: &[usize]) -> Var {
    let logits = net.forward(tape, features);
    tape.cross_entropy(logits, labels)
}

/// Softmax classifier with an explicit class list; logit column i scores
/// `classes[i]`.
#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    pub config: SeenConfig,
    pub feature_dim: usize,
    pub classes: Vec<ClassId>,
    pub net: Mlp,
}

impl SoftmaxClassifier {
    /// Trains on arbitrary (features, labels) pairs; every label must appear
    /// in `classes`.
    pub fn train_on(
        features: &Mat,
        labels: &[ClassId],
        classes: &[ClassId],
        config: &SeenConfig,
        seed: u64,
    ) -> Result<(Self, SeenTrace)> {
        if classes.len() < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        if config.epochs == 0 || config.batch_size < 2 {
            return Err(Error::Config("classifier needs epochs >= 1 and batch_size >= 2".into()));
        }
        assert_eq!(features.rows, labels.len(), "feature/label count mismatch");
        let index: std::collections::HashMap<ClassId, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let targets: Vec<usize> = labels
            .iter()
            .map(|c| {
                index.get(c).copied().ok_or_else(|| {
                    Error::Config(format!("label {} not in the classifier's class list", c.0))
                })
            })
            .collect::<Result<_>>()?;

        let mut sizes = vec![features.cols];
        sizes.extend(&config.hidden);
        sizes.push(classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(&sizes, Activation::Relu, &mut rng);
        let mut opt = Adam::for_params(config.lr, 0.9, 0.999, &net.params());

        let mut trace = SeenTrace::default();
        let mut order: Vec<usize> = (0..features.rows).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(config.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let batch = features.gather_rows(chunk);
                let batch_labels: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape);
                let x = tape.leaf(&batch);
                let loss = classifier_loss(&mut tape, &bound, x, &batch_labels);
                loss_sum += tape.scalar(loss);
                batches += 1;
                tape.backward(loss);
                let grads = bound.param_grads(&tape);
                opt.step(&mut net.params_mut(), &grads);
            }
            let mean_loss = loss_sum / batches.max(1) as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite classifier loss at epoch {epoch}"
                )));
            }
            trace.epoch_loss.push(mean_loss);
        }

        let model = SoftmaxClassifier {
            config: config.clone(),
            feature_dim: features.cols,
            classes: classes.to_vec(),
            net,
        };
        Ok((model, trace))
    }

    /// Trains the seen-class head on the seen training split and reports
    /// validation accuracy.
    pub fn train_seen(dataset: &Dataset, config: &SeenConfig, seed: u64) -> Result<(Self, SeenTrace)> {
        let train_idx = dataset.split_indices(Split::TrainSeen);
        let features = dataset.fused(&train_idx);
        let labels = dataset.labels_of(&train_idx);
        let classes = dataset.seen_class_ids();
        let (model, mut trace) = Self::train_on(&features, &labels, &classes, config, seed)?;

        let val_idx = dataset.split_indices(Split::Val);
        if !val_idx.is_empty() {
            let preds = model.predict(&dataset.fused(&val_idx));
            let val_labels = dataset.labels_of(&val_idx);
            trace.val_accuracy = Some(crate::metrics::mean_class_accuracy(&preds, &val_labels));
        }
        Ok((model, trace))
    }

    /// Row-wise softmax probabilities over the class list.
    pub fn probabilities(&self, features: &Mat) -> Mat {
        let logits = self.net.eval(features);
        let mut out = Mat::zeros(logits.rows, logits.cols);
        for i in 0..logits.rows {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.row_mut(i)[j] = e;
                sum += e;
            }
            for v in out.row_mut(i) {
                *v /= sum;
            }
        }
        out
    }

    /// Highest softmax probability per row, the confidence used by
    /// calibrated stacking.
    pub fn max_probabilities(&self, features: &Mat) -> Vec<f64> {
        let probs = self.probabilities(features);
        (0..probs.rows)
            .map(|i| probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn predict(&self, features: &Mat) -> Vec<ClassId> {
        let logits = self.net.eval(features);
        (0..logits.rows)
            .map(|i| {
                let row = logits.row(i);
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap();
                self.classes[best]
            })
            .collect()
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let config = json!({
            "classifier": self.config,
            "feature_dim": self.feature_dim,
            "classes": self.classes,
        });
        let mut ck = Checkpoint::new(SEEN_CHECKPOINT_KIND, seed, config);
        ck.push_named("net", &self.net.named_params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<SoftmaxClassifier> {
        ck.expect_kind(SEEN_CHECKPOINT_KIND)?;
        #[derive(Deserialize)]
        struct Stored {
            classifier: SeenConfig,
            feature_dim: usize,
            classes: Vec<ClassId>,
        }
        let stored: Stored = ck.config_as()?;
        let mut sizes = vec![stored.feature_dim];
        sizes.extend(&stored.classifier.hidden);
        sizes.push(stored.classes.len());
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&sizes, Activation::Relu, &mut scratch);
        restore_mlp(ck, "net", &mut net)?;
        Ok(SoftmaxClassifier {
            config: stored.classifier,
            feature_dim: stored.feature_dim,
            classes: stored.classes,
            net,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::nn::{finite_diff_grad, max_rel_error};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let net = Mlp::new(&[4, 5, 3], Activation::Relu, &mut rng);
        let data = (0..6 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let features = Mat::from_vec(6, 4, data);
        let labels = [0usize, 1, 2, 0, 1, 2];

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.leaf(&features);
        let loss = classifier_loss(&mut tape, &bound, x, &labels);
        tape.backward(loss);
        let analytic: Vec<f64> = bound.param_grads(&tape).concat();

        let theta: Vec<f64> = net.params().iter().flat_map(|m| m.data.clone()).collect();
        let mut f = |t: &[f64]| {
            let mut copy = net.clone();
            let mut at = 0;
            for p in copy.params_mut() {
                let n = p.len();
                p.data.copy_from_slice(&t[at..at + n]);
                at += n;
            }
            let mut tape = Tape::new();
            let bound = copy.bind(&mut tape);
            let x = tape.leaf(&features);
            let loss = classifier_loss(&mut tape, &bound, x, &labels);
            tape.scalar(loss)
        };
        let numeric = finite_diff_grad(&mut f, &theta);
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "classifier grad err {err:.3e}");
    }

    fn toy_dataset() -> Dataset {
        let cfg = DatasetConfig {
            seen_classes: 4,
            unseen_classes: 2,
            audio_dim: 4,
            visual_dim: 4,
            text_dim: 4,
            latent_dim: 3,
            samples_per_class: 30,
            spread: 0.25,
            text_noise: 0.01,
        };
        Dataset::synthesize(&cfg, 29).unwrap()
    }

    #[test]
    fn learns_well_separated_clusters() {
        let ds = toy_dataset();
        let cfg = SeenConfig { hidden: vec![32], epochs: 40, batch_size: 32, lr: 3e-3 };
        let (model, trace) = SoftmaxClassifier::train_seen(&ds, &cfg, 1).unwrap();
        let val_acc = trace.val_accuracy.unwrap();
        assert!(val_acc > 0.9, "validation accuracy {val_acc}");

        let test_idx = ds.split_indices(Split::TestSeen);
        let preds = model.predict(&ds.fused(&test_idx));
        let acc = crate::metrics::mean_class_accuracy(&preds, &ds.labels_of(&test_idx));
        assert!(acc > 0.9, "test accuracy {acc}");
    }

    #[test]
    fn probabilities_are_normalized() {
        let ds = toy_dataset();
        let cfg = SeenConfig { hidden: vec![16], epochs: 5, batch_size: 32, lr: 3e-3 };
        let (model, _) = SoftmaxClassifier::train_seen(&ds, &cfg, 1).unwrap();
        let idx = ds.split_indices(Split::TestSeen);
        let probs = model.probabilities(&ds.fused(&idx));
        for i in 0..probs.rows {
            let sum: f64 = probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let maxes = model.max_probabilities(&ds.fused(&idx));
        for &m in &maxes {
            assert!((1.0 / 4.0..=1.0).contains(&m), "max prob {m}");
        }
    }

    #[test]
    fn predictions_come_from_class_list() {
        let ds = toy_dataset();
        let cfg = SeenConfig { hidden: vec![16], epochs: 3, batch_size: 32, lr: 3e-3 };
        let (model, _) = SoftmaxClassifier::train_seen(&ds, &cfg, 1).unwrap();
        let idx = ds.split_indices(Split::TestUnseen);
        for pred in model.predict(&ds.fused(&idx)) {
            assert!(model.classes.contains(&pred));
        }
    }

    #[test]
    fn rejects_labels_outside_class_list() {
        let features = Mat::zeros(4, 3);
        let labels = vec![ClassId(0), ClassId(1), ClassId(5), ClassId(0)];
        let classes = vec![ClassId(0), ClassId(1)];
        let cfg = SeenConfig { hidden: vec![4], epochs: 1, batch_size: 2, lr: 1e-3 };
        assert!(SoftmaxClassifier::train_on(&features, &labels, &classes, &cfg, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let ds = toy_dataset();
        let cfg = SeenConfig { hidden: vec![16], epochs: 10, batch_size: 32, lr: 3e-3 };
        let (model, _) = SoftmaxClassifier::train_seen(&ds, &cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.to_checkpoint(2).save(dir.path()).unwrap();
        let loaded =
            SoftmaxClassifier::from_checkpoint(&Checkpoint::load(dir.path()).unwrap()).unwrap();
        assert_eq!(loaded.classes, model.classes);

        let idx = ds.split_indices(Split::TestSeen);
        let feats = ds.fused(&idx);
        let mut quantized = model.clone();
        for p in quantized.net.params_mut() {
            for v in &mut p.data {
                *v = *v as f32 as f64;
            }
        }
        assert_eq!(loaded.predict(&feats), quantized.predict(&feats));
    }
}
