//! Seen/unseen detectors trained on real seen features versus synthesized
//! unseen features.
//!
//! Both detectors expose a scalar "seen-ness" score where higher means more
//! likely seen, and a threshold in score space; ties route to the seen side.
//!
//! * The binary detector is a sigmoid discriminator: score = sigmoid(logit),
//!   fixed threshold 0.5, trained with cross-entropy toward 1 on real seen
//!   samples and 0 on synthesized unseen samples.
//! * The entropy detector is a softmax classifier over the seen classes:
//!   score = negative Shannon entropy of its predictive distribution. It is
//!   trained to be confident (low entropy) on real seen samples, uncertain
//!   (high entropy) on synthesized unseen samples, and correct on the seen
//!   labels. Its threshold is the mean training-set entropy, negated into
//!   score space.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{restore_mlp, Checkpoint};
use crate::data::{ClassId, Dataset, Split};
use crate::generator::FeatureGenerator;
use crate::nn::{Activation, Adam, BoundMlp, Mat, Mlp, Tape, Var};
use crate::{Error, Result};

pub const OOD_CHECKPOINT_KIND: &str = "ood-detector";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Binary,
    Entropy,
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DetectorKind::Binary => write!(f, "binary"),
            DetectorKind::Entropy => write!(f, "entropy"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodConfig {
    pub kind: DetectorKind,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Synthesized samples drawn per unseen class for training.
    pub synthetic_per_class: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig {
            kind: DetectorKind::Entropy,
            hidden: vec![512, 128],
            epochs: 80,
            batch_size: 64,
            lr: 1e-3,
            synthetic_per_class: 50,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OodTrace {
    pub epoch_loss: Vec<f64>,
    pub threshold: f64,
}

/// Binary detector objective: BCE(real logits, 1) + BCE(synthetic logits, 0).
pub fn binary_detector_loss(tape: &mut Tape, net: &BoundMlp, real: Var, synth: Var) -> Var {
    let real_logits = net.forward(tape, real);
    let synth_logits = net.forward(tape, synth);
    let n_real = tape.shape(real_logits).0;
    let n_synth = tape.shape(synth_logits).0;
    let loss_real = tape.bce_with_logits(real_logits, &vec![1.0; n_real]);
    let loss_synth = tape.bce_with_logits(synth_logits, &vec![0.0; n_synth]);
    tape.add(loss_real, loss_synth)
}

/// Entropy detector objective:
/// H(softmax(real)) - H(softmax(synth)) + CE(real, labels).
pub fn entropy_detector_loss(
    tape: &mut Tape,
    net: &BoundMlp,
    real: Var,
    synth: Var,
    real_labels: &[usize],
) -> Var {
    let real_logits = net.forward(tape, real);
    let synth_logits = net.forward(tape, synth);
    let h_real = tape.softmax_entropy(real_logits);
    let h_synth = tape.softmax_entropy(synth_logits);
    let ce = tape.cross_entropy(real_logits, real_labels);
    let gap = tape.sub(h_real, h_synth);
    tape.add(gap, ce)
}

/// Shannon entropy (nats) of the row-wise softmax of `logits`.
pub fn softmax_entropy_rows(logits: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.rows);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let mut h = 0.0;
        for &v in row {
            let lp = v - lse;
            h -= lp.exp() * lp;
        }
        out.push(h);
    }
    out
}

/// Trained seen/unseen detector.
#[derive(Clone, Debug)]
pub struct OodDetector {
    pub config: OodConfig,
    pub feature_dim: usize,
    /// Seen classes in the order used for entropy-detector logits.
    pub seen_classes: Vec<ClassId>,
    pub net: Mlp,
    /// Decision threshold in score space; samples scoring >= this are seen.
    pub threshold: f64,
}

impl OodDetector {
    /// Trains on real seen-train features versus features synthesized for
    /// the unseen classes by `generator`.
    pub fn train(
        dataset: &Dataset,
        generator: &FeatureGenerator,
        config: &OodConfig,
        seed: u64,
    ) -> Result<(Self, OodTrace)> {
        if config.epochs == 0 || config.batch_size < 2 {
            return Err(Error::Config("detector needs epochs >= 1 and batch_size >= 2".into()));
        }
        let seen_classes = dataset.seen_class_ids();
        if config.kind == DetectorKind::Entropy && seen_classes.len() < 2 {
            return Err(Error::Config("entropy detector needs at least 2 seen classes".into()));
        }
        let unseen_classes = dataset.unseen_class_ids();
        if unseen_classes.is_empty() {
            return Err(Error::Config("no unseen classes to synthesize".into()));
        }
        if config.synthetic_per_class == 0 {
            return Err(Error::Config("synthetic_per_class must be positive".into()));
        }

        let feature_dim = dataset.dims.fused();
        let train_idx = dataset.split_indices(Split::TrainSeen);
        let real = dataset.fused(&train_idx);
        let labels = dataset.labels_of(&train_idx);
        let seen_index: std::collections::HashMap<ClassId, usize> =
            seen_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let real_labels: Vec<usize> = labels.iter().map(|c| seen_index[c]).collect();

        let (synth, _) = generator.synthesize(
            &dataset.text_embeddings,
            &unseen_classes,
            config.synthetic_per_class,
            // Offset the stream so detector synthesis does not replay the
            // generator's own training draws.
            seed.wrapping_add(0x0D0D),
        );

        let out_dim = match config.kind {
            DetectorKind::Binary => 1,
            DetectorKind::Entropy => seen_classes.len(),
        };
        let mut sizes = vec![feature_dim];
        sizes.extend(&config.hidden);
        sizes.push(out_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(&sizes, Activation::Relu, &mut rng);
        let mut opt = Adam::for_params(config.lr, 0.9, 0.999, &net.params());

        let mut trace = OodTrace::default();
        let mut order: Vec<usize> = (0..real.rows).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(config.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let real_batch = real.gather_rows(chunk);
                let label_batch: Vec<usize> = chunk.iter().map(|&i| real_labels[i]).collect();
                let synth_rows: Vec<usize> =
                    (0..chunk.len()).map(|_| rng.random_range(0..synth.rows)).collect();
                let synth_batch = synth.gather_rows(&synth_rows);

                let mut tape = Tape::new();
                let bound = net.bind(&mut tape);
                let real_v = tape.leaf(&real_batch);
                let synth_v = tape.leaf(&synth_batch);
                let loss = match config.kind {
                    DetectorKind::Binary => {
                        binary_detector_loss(&mut tape, &bound, real_v, synth_v)
                    }
                    DetectorKind::Entropy => {
                        entropy_detector_loss(&mut tape, &bound, real_v, synth_v, &label_batch)
                    }
                };
                loss_sum += tape.scalar(loss);
                batches += 1;
                tape.backward(loss);
                let grads = bound.param_grads(&tape);
                opt.step(&mut net.params_mut(), &grads);
            }
            let mean_loss = loss_sum / batches.max(1) as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite detector loss at epoch {epoch}"
                )));
            }
            trace.epoch_loss.push(mean_loss);
        }

        let threshold = match config.kind {
            DetectorKind::Binary => 0.5,
            DetectorKind::Entropy => {
                // Mean training entropy, negated to match score orientation.
                let h = softmax_entropy_rows(&net.eval(&real));
                -(h.iter().sum::<f64>() / h.len() as f64)
            }
        };
        trace.threshold = threshold;

        let detector = OodDetector {
            config: config.clone(),
            feature_dim,
            seen_classes,
            net,
            threshold,
        };
        Ok((detector, trace))
    }

    /// Seen-ness score per row; higher means more likely seen. Binary
    /// detectors return sigmoid probabilities in (0,1); entropy detectors
    /// return negative entropy in [-ln K, 0].
    pub fn seen_scores(&self, features: &Mat) -> Vec<f64> {
        let logits = self.net.eval(features);
        match self.config.kind {
            DetectorKind::Binary => logits
                .data
                .iter()
                .map(|&z| if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) })
                .collect(),
            DetectorKind::Entropy => {
                softmax_entropy_rows(&logits).into_iter().map(|h| -h).collect()
            }
        }
    }

    /// Routes each row: true = seen side. Scores equal to the threshold go
    /// to the seen side.
    pub fn classify_seen(&self, features: &Mat) -> Vec<bool> {
        self.seen_scores(features).into_iter().map(|s| s >= self.threshold).collect()
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let config = json!({
            "detector": self.config,
            "feature_dim": self.feature_dim,
            "seen_classes": self.seen_classes,
        });
        let mut ck = Checkpoint::new(OOD_CHECKPOINT_KIND, seed, config);
        ck.set_scalar("threshold", self.threshold);
        ck.push_named("net", &self.net.named_params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<OodDetector> {
        ck.expect_kind(OOD_CHECKPOINT_KIND)?;
        #[derive(Deserialize)]
        struct Stored {
            detector: OodConfig,
            feature_dim: usize,
            seen_classes: Vec<ClassId>,
        }
        let stored: Stored = ck.config_as()?;
        let out_dim = match stored.detector.kind {
            DetectorKind::Binary => 1,
            DetectorKind::Entropy => stored.seen_classes.len(),
        };
        let mut sizes = vec![stored.feature_dim];
        sizes.extend(&stored.detector.hidden);
        sizes.push(out_dim);
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&sizes, Activation::Relu, &mut scratch);
        restore_mlp(ck, "net", &mut net)?;
        Ok(OodDetector {
            config: stored.detector,
            feature_dim: stored.feature_dim,
            seen_classes: stored.seen_classes,
            net,
            threshold: ck.scalar("threshold")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::generator::GeneratorConfig;
    use crate::nn::{finite_diff_grad, max_rel_error};
    use rand_distr::{Distribution, StandardNormal};

    fn randn_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Mat::from_vec(rows, cols, data)
    }

    fn fd_check(
        net: &Mlp,
        build: impl Fn(&mut Tape, &BoundMlp) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let loss = build(&mut tape, &bound);
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
            let loss = build(&mut tape, &bound);
            tape.scalar(loss)
        };
        let numeric = finite_diff_grad(&mut f, &theta);
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < tol, "detector loss grad err {err:.3e}");
    }

    #[test]
    fn binary_loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let net = Mlp::new(&[4, 5, 1], Activation::Relu, &mut rng);
        let real = randn_mat(&mut rng, 6, 4);
        let synth = randn_mat(&mut rng, 5, 4);
        fd_check(
            &net,
            |tape, bound| {
                let r = tape.leaf(&real);
                let s = tape.leaf(&synth);
                binary_detector_loss(tape, bound, r, s)
            },
            1e-4,
        );
    }

    #[test]
    fn entropy_loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let net = Mlp::new(&[4, 6, 3], Activation::Relu, &mut rng);
        let real = randn_mat(&mut rng, 6, 4);
        let synth = randn_mat(&mut rng, 6, 4);
        let labels = [0usize, 1, 2, 0, 1, 2];
        fd_check(
            &net,
            |tape, bound| {
                let r = tape.leaf(&real);
                let s = tape.leaf(&synth);
                entropy_detector_loss(tape, bound, r, s, &labels)
            },
            1e-4,
        );
    }

    #[test]
    fn entropy_rows_match_tape_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let logits = randn_mat(&mut rng, 5, 4);
        let plain = softmax_entropy_rows(&logits);
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let h = tape.softmax_entropy(l);
        let mean_plain = plain.iter().sum::<f64>() / plain.len() as f64;
        assert!((tape.scalar(h) - mean_plain).abs() < 1e-12);
        // Entropy of a K-way softmax is bounded by ln K.
        for &h in &plain {
            assert!((0.0..=(4.0f64).ln() + 1e-12).contains(&h));
        }
    }

    fn toy_setup() -> (Dataset, FeatureGenerator) {
        let cfg = DatasetConfig {
            seen_classes: 4,
            unseen_classes: 2,
            audio_dim: 4,
            visual_dim: 4,
            text_dim: 4,
            latent_dim: 4,
            samples_per_class: 30,
            spread: 0.25,
            text_noise: 0.01,
        };
        let ds = Dataset::synthesize(&cfg, 23).unwrap();
        let gcfg = GeneratorConfig {
            noise_dim: 4,
            gen_hidden: vec![24],
            critic_hidden: vec![24],
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            ..Default::default()
        };
        let (generator, _) = FeatureGenerator::train(&ds, &gcfg, 7).unwrap();
        (ds, generator)
    }

    #[test]
    fn entropy_detector_separates_seen_from_unseen() {
        let (ds, generator) = toy_setup();
        let cfg = OodConfig {
            kind: DetectorKind::Entropy,
            hidden: vec![32],
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            synthetic_per_class: 30,
        };
        let (det, trace) = OodDetector::train(&ds, &generator, &cfg, 3).unwrap();
        assert!(trace.epoch_loss.iter().all(|l| l.is_finite()));

        // Threshold is the negated mean training entropy.
        let train = ds.fused(&ds.split_indices(Split::TrainSeen));
        let h = softmax_entropy_rows(&det.net.eval(&train));
        let expected = -(h.iter().sum::<f64>() / h.len() as f64);
        assert!((det.threshold - expected).abs() < 1e-12);

        let seen_scores = det.seen_scores(&ds.fused(&ds.split_indices(Split::TestSeen)));
        let unseen_scores = det.seen_scores(&ds.fused(&ds.split_indices(Split::TestUnseen)));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&seen_scores) > mean(&unseen_scores),
            "seen {} vs unseen {}",
            mean(&seen_scores),
            mean(&unseen_scores)
        );
        // Entropy scores live in [-ln K, 0].
        let bound = -((det.seen_classes.len() as f64).ln()) - 1e-9;
        for &s in seen_scores.iter().chain(&unseen_scores) {
            assert!(s <= 1e-12 && s >= bound, "score {s} out of range");
        }
    }

    #[test]
    fn binary_detector_scores_are_probabilities() {
        let (ds, generator) = toy_setup();
        let cfg = OodConfig {
            kind: DetectorKind::Binary,
            hidden: vec![32],
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            synthetic_per_class: 30,
        };
        let (det, _) = OodDetector::train(&ds, &generator, &cfg, 3).unwrap();
        assert_eq!(det.threshold, 0.5);
        let scores = det.seen_scores(&ds.fused(&ds.split_indices(Split::TestSeen)));
        for &s in &scores {
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn ties_route_to_seen() {
        let (ds, generator) = toy_setup();
        let cfg = OodConfig {
            kind: DetectorKind::Binary,
            hidden: vec![8],
            epochs: 1,
            batch_size: 32,
            lr: 1e-3,
            synthetic_per_class: 10,
        };
        let (mut det, _) = OodDetector::train(&ds, &generator, &cfg, 3).unwrap();
        let idx = ds.split_indices(Split::TestSeen);
        let feats = ds.fused(&idx[..1]);
        let score = det.seen_scores(&feats)[0];
        det.threshold = score;
        assert!(det.classify_seen(&feats)[0], "tie must route to seen");
        det.threshold = score + 1e-9;
        assert!(!det.classify_seen(&feats)[0]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_decisions() {
        let (ds, generator) = toy_setup();
        let cfg = OodConfig {
            kind: DetectorKind::Entropy,
            hidden: vec![16],
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            synthetic_per_class: 20,
        };
        let (det, _) = OodDetector::train(&ds, &generator, &cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        det.to_checkpoint(9).save(dir.path()).unwrap();
        let loaded = OodDetector::from_checkpoint(&Checkpoint::load(dir.path()).unwrap()).unwrap();
        assert_eq!(loaded.threshold, det.threshold);
        assert_eq!(loaded.seen_classes, det.seen_classes);

        let feats = ds.fused(&ds.split_indices(Split::TestUnseen));
        let a = det.classify_seen(&feats);
        // Quantize the original to f32 to mirror checkpoint precision.
        let mut q = det.clone();
        for p in q.net.params_mut() {
            for v in &mut p.data {
                *v = *v as f32 as f64;
            }
        }
        let b = q.classify_seen(&feats);
        let loaded_decisions = loaded.classify_seen(&feats);
        assert_eq!(loaded_decisions, b);
        // Sanity: full-precision and quantized detectors rarely disagree.
        let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!(diff <= a.len() / 10);
    }
}
