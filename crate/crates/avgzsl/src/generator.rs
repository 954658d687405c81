//! Conditional feature generator trained with a Wasserstein critic and
//! gradient penalty.
//!
//! The generator maps Gaussian noise concatenated with a class text embedding
//! to a fused audio-visual feature. The critic scores (feature, text) pairs;
//! its objective is the usual Wasserstein difference plus a penalty pulling
//! the critic's feature-gradient norm toward 1 at random interpolates
//! between real and generated samples. The generator additionally carries a
//! reconstruction term (generated features stay near the paired real
//! features) and an embedding term (a linear head projects generated
//! features back onto their class text embedding).
//!
//! The penalty needs the derivative of the critic's input gradient with
//! respect to the critic's parameters. [`crate::nn::BoundMlp::input_gradient`]
//! provides that gradient as an ordinary first-order graph, so one backward
//! sweep trains everything.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{restore_mlp, Checkpoint};
use crate::data::{ClassId, Dataset, Split};
use crate::nn::{Activation, Adam, BoundMlp, Mat, Mlp, Tape, Var};
use crate::{Error, Result};

/// Negative slope shared by all generator-stage networks.
const LEAKY_SLOPE: f64 = 0.2;

pub const GENERATOR_CHECKPOINT_KIND: &str = "feature-generator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the gradient penalty in the critic objective.
    pub gp_weight: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Weight of the reconstruction term in the generator objective.
    pub rec_weight: f64,
    /// Weight of the embedding-projection term in the generator objective.
    pub emb_weight: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: 16,
            gen_hidden: vec![64],
            critic_hidden: vec![64],
            epochs: 5,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            gp_weight: 10.0,
            critic_steps: 5,
            rec_weight: 0.1,
            emb_weight: 0.01,
        }
    }
}

/// Per-epoch training statistics, kept finite-checked for divergence
/// detection and exported into run logs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanEpochStats {
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub penalty: f64,
    /// Mean critic feature-gradient norm at the interpolates seen this epoch;
    /// penalty training drives this toward 1.
    pub interp_grad_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GanTrace {
    pub epochs: Vec<GanEpochStats>,
}

/// Trained conditional generator with its critic and embedding head.
#[derive(Clone, Debug)]
pub struct FeatureGenerator {
    pub config: GeneratorConfig,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub gen: Mlp,
    pub critic: Mlp,
    pub embed: Mlp,
}

/// Gradient-penalty term: mean over rows of (||d critic / d feature|| - 1)^2
/// evaluated at `fused` (already interpolated), conditioned on `text`.
///
/// The norm covers only the feature block of the critic input; the
/// conditioning block is held fixed.
pub fn gradient_penalty(
    tape: &mut Tape,
    critic: &BoundMlp,
    fused: Var,
    text: Var,
    feature_dim: usize,
) -> Var {
    let input = tape.concat_cols(fused, text);
    let grad = critic.input_gradient(tape, input);
    let grad_x = tape.slice_cols(grad, 0, feature_dim);
    let norms = tape.row_norms(grad_x);
    let shifted = tape.add_scalar(norms, -1.0);
    let sq = tape.mul(shifted, shifted);
    tape.mean_all(sq)
}

/// Critic objective to minimize: E[D(fake)] - E[D(real)] + gp_weight * GP,
/// with per-row interpolates eps*real + (1-eps)*fake.
pub fn critic_objective(
    tape: &mut Tape,
    critic: &BoundMlp,
    real: Var,
    fake: Var,
    text: Var,
    eps: Var,
    gp_weight: f64,
) -> Var {
    let feature_dim = tape.shape(real).1;
    let real_in = tape.concat_cols(real, text);
    let fake_in = tape.concat_cols(fake, text);
    let d_real = critic.forward(tape, real_in);
    let d_fake = critic.forward(tape, fake_in);
    let mean_real = tape.mean_all(d_real);
    let mean_fake = tape.mean_all(d_fake);
    let wass = tape.sub(mean_fake, mean_real);

    let eps_real = tape.mul_colvec(real, eps);
    let one_minus = tape.scale(eps, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let eps_fake = tape.mul_colvec(fake, one_minus);
    let interp = tape.add(eps_real, eps_fake);
    let gp = gradient_penalty(tape, critic, interp, text, feature_dim);
    let weighted = tape.scale(gp, gp_weight);
    tape.add(wass, weighted)
}

/// Generator objective to minimize:
/// -E[D(fake)] + rec_weight * MSE(fake, real) + emb_weight * MSE(embed(fake), text).
pub fn generator_objective(
    tape: &mut Tape,
    critic: &BoundMlp,
    embed: &BoundMlp,
    fake: Var,
    real: Var,
    text: Var,
    rec_weight: f64,
    emb_weight: f64,
) -> Var {
    let fake_in = tape.concat_cols(fake, text);
    let d_fake = critic.forward(tape, fake_in);
    let mean_fake = tape.mean_all(d_fake);
    let adv = tape.scale(mean_fake, -1.0);

    let rec = tape.mse(fake, real);
    let rec_w = tape.scale(rec, rec_weight);

    let projected = embed.forward(tape, fake);
    let emb = tape.mse(projected, text);
    let emb_w = tape.scale(emb, emb_weight);

    let partial = tape.add(adv, rec_w);
    tape.add(partial, emb_w)
}

impl FeatureGenerator {
    /// Trains on the seen-class training split and returns the model with
    /// its per-epoch trace. Fails with [`Error::Diverged`] if any loss stops
    /// being finite.
    pub fn train(dataset: &Dataset, config: &GeneratorConfig, seed: u64) -> Result<(Self, GanTrace)> {
        if config.epochs == 0 || config.batch_size < 2 || config.critic_steps == 0 {
            return Err(Error::Config(
                "generator training needs epochs >= 1, batch_size >= 2, critic_steps >= 1".into(),
            ));
        }
        let feature_dim = dataset.dims.fused();
        let text_dim = dataset.dims.text;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut gen_sizes = vec![config.noise_dim + text_dim];
        gen_sizes.extend(&config.gen_hidden);
        gen_sizes.push(feature_dim);
        let mut critic_sizes = vec![feature_dim + text_dim];
        critic_sizes.extend(&config.critic_hidden);
        critic_sizes.push(1);

        let gen = Mlp::new(&gen_sizes, Activation::LeakyRelu(LEAKY_SLOPE), &mut rng);
        let critic = Mlp::new(&critic_sizes, Activation::LeakyRelu(LEAKY_SLOPE), &mut rng);
        let embed = Mlp::new(&[feature_dim, text_dim], Activation::Identity, &mut rng);
        let mut model = FeatureGenerator {
            config: config.clone(),
            feature_dim,
            text_dim,
            gen,
            critic,
            embed,
        };

        let train_idx = dataset.split_indices(Split::TrainSeen);
        if train_idx.len() < config.batch_size.min(4) {
            return Err(Error::Config("training split smaller than one batch".into()));
        }
        let features = dataset.fused(&train_idx);
        let labels = dataset.labels_of(&train_idx);
        let text_rows = dataset.text_for_labels(&labels);

        let mut critic_opt =
            Adam::for_params(config.lr, config.beta1, config.beta2, &model.critic.params());
        let gen_param_refs: Vec<&Mat> =
            model.gen.params().into_iter().chain(model.embed.params()).collect();
        let mut gen_opt = Adam::for_params(config.lr, config.beta1, config.beta2, &gen_param_refs);

        let mut trace = GanTrace::default();
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        let mut step = 0usize;

        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut stats = EpochAccumulator::default();

            for chunk in order.chunks(config.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let real = features.gather_rows(chunk);
                let text = text_rows.gather_rows(chunk);

                let (closs, pen, gnorm) =
                    model.critic_step(&real, &text, &mut critic_opt, &mut rng);
                stats.add_critic(closs, pen, gnorm);

                step += 1;
                if step % config.critic_steps == 0 {
                    let gloss = model.generator_step(&real, &text, &mut gen_opt, &mut rng);
                    stats.add_gen(gloss);
                }
            }

            let epoch_stats = stats.finish();
            if !epoch_stats.critic_loss.is_finite()
                || !epoch_stats.generator_loss.is_finite()
                || !epoch_stats.penalty.is_finite()
            {
                return Err(Error::Diverged(format!(
                    "non-finite generator training statistics at epoch {epoch}"
                )));
            }
            trace.epochs.push(epoch_stats);
        }
        Ok((model, trace))
    }

    fn critic_step(
        &mut self,
        real: &Mat,
        text: &Mat,
        opt: &mut Adam,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64, f64) {
        let n = real.rows;
        let fake = self.sample_features(text, rng);
        let eps_data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

        let mut tape = Tape::new();
        let critic = self.critic.bind(&mut tape);
        let real_v = tape.leaf(real);
        let fake_v = tape.leaf(&fake);
        let text_v = tape.leaf(text);
        let eps_v = tape.leaf_vec(n, 1, eps_data);
        let loss = critic_objective(
            &mut tape,
            &critic,
            real_v,
            fake_v,
            text_v,
            eps_v,
            self.config.gp_weight,
        );
        let loss_val = tape.scalar(loss);
        tape.backward(loss);
        let grads = critic.param_grads(&tape);
        opt.step(&mut self.critic.params_mut(), &grads);

        // Report the raw penalty and gradient norm at fresh interpolates.
        let (pen, gnorm) = self.penalty_report(real, &fake, text, rng);
        (loss_val, pen, gnorm)
    }

    /// Evaluates the current penalty and mean feature-gradient norm on fresh
    /// interpolates, without touching parameters.
    fn penalty_report(
        &self,
        real: &Mat,
        fake: &Mat,
        text: &Mat,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64) {
        let n = real.rows;
        let mut interp = Mat::zeros(n, real.cols);
        for i in 0..n {
            let e: f64 = rng.random();
            for j in 0..real.cols {
                interp.data[i * real.cols + j] =
                    e * real.data[i * real.cols + j] + (1.0 - e) * fake.data[i * real.cols + j];
            }
        }
        let norms = self.interpolate_gradient_norms(&interp, text);
        let pen: f64 = norms.iter().map(|&g| (g - 1.0) * (g - 1.0)).sum::<f64>() / n as f64;
        let mean_norm = norms.iter().sum::<f64>() / n as f64;
        (pen, mean_norm)
    }

    /// Critic feature-gradient norms at the given fused inputs.
    pub fn interpolate_gradient_norms(&self, fused: &Mat, text: &Mat) -> Vec<f64> {
        let mut tape = Tape::new();
        let critic = self.critic.bind(&mut tape);
        let fused_v = tape.leaf(fused);
        let text_v = tape.leaf(text);
        let input = tape.concat_cols(fused_v, text_v);
        let grad = critic.input_gradient(&mut tape, input);
        let grad_x = tape.slice_cols(grad, 0, self.feature_dim);
        let norms = tape.row_norms(grad_x);
        tape.value(norms).to_vec()
    }

    fn generator_step(
        &mut self,
        real: &Mat,
        text: &Mat,
        opt: &mut Adam,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let z = self.sample_noise(real.rows, rng);
        let mut tape = Tape::new();
        let gen = self.gen.bind(&mut tape);
        let critic = self.critic.bind(&mut tape);
        let embed = self.embed.bind(&mut tape);
        let z_v = tape.leaf(&z);
        let text_v = tape.leaf(text);
        let real_v = tape.leaf(real);
        let gen_in = tape.concat_cols(z_v, text_v);
        let fake = gen.forward(&mut tape, gen_in);
        let loss = generator_objective(
            &mut tape,
            &critic,
            &embed,
            fake,
            real_v,
            text_v,
            self.config.rec_weight,
            self.config.emb_weight,
        );
        let loss_val = tape.scalar(loss);
        tape.backward(loss);
        let mut grads = gen.param_grads(&tape);
        grads.extend(embed.param_grads(&tape));
        let mut params = self.gen.params_mut();
        params.extend(self.embed.params_mut());
        opt.step(&mut params, &grads);
        loss_val
    }

    fn sample_noise(&self, rows: usize, rng: &mut ChaCha8Rng) -> Mat {
        let data =
            (0..rows * self.config.noise_dim).map(|_| StandardNormal.sample(rng)).collect();
        Mat::from_vec(rows, self.config.noise_dim, data)
    }

    /// Generates features for each text row using the supplied rng.
    fn sample_features(&self, text: &Mat, rng: &mut ChaCha8Rng) -> Mat {
        let z = self.sample_noise(text.rows, rng);
        self.generate(&z, text)
    }

    /// Deterministic forward pass: one feature row per (noise, text) row.
    pub fn generate(&self, noise: &Mat, text: &Mat) -> Mat {
        assert_eq!(noise.rows, text.rows, "noise/text row mismatch");
        assert_eq!(noise.cols, self.config.noise_dim, "noise width mismatch");
        assert_eq!(text.cols, self.text_dim, "text width mismatch");
        let input = Mat::hcat(noise, text);
        self.gen.eval(&input)
    }

    /// Synthesizes `per_class` features for each listed class. Each class
    /// draws from its own rng stream keyed by class id, so the sample block
    /// for one class does not depend on which other classes are requested.
    pub fn synthesize(
        &self,
        text_embeddings: &Mat,
        classes: &[ClassId],
        per_class: usize,
        seed: u64,
    ) -> (Mat, Vec<ClassId>) {
        let mut blocks = Vec::with_capacity(classes.len());
        let mut labels = Vec::with_capacity(classes.len() * per_class);
        for &class in classes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(class.0 as u64);
            let z = self.sample_noise(per_class, &mut rng);
            let text_row = Mat::from_vec(1, self.text_dim, text_embeddings.row(class.index()).to_vec());
            let text = text_row.gather_rows(&vec![0; per_class]);
            blocks.push(self.generate(&z, &text));
            labels.extend(std::iter::repeat(class).take(per_class));
        }
        let refs: Vec<&Mat> = blocks.iter().collect();
        (Mat::vcat(&refs), labels)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let config = json!({
            "generator": self.config,
            "feature_dim": self.feature_dim,
            "text_dim": self.text_dim,
        });
        let mut ck = Checkpoint::new(GENERATOR_CHECKPOINT_KIND, seed, config);
        ck.push_named("gen", &self.gen.named_params());
        ck.push_named("critic", &self.critic.named_params());
        ck.push_named("embed", &self.embed.named_params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<FeatureGenerator> {
        ck.expect_kind(GENERATOR_CHECKPOINT_KIND)?;
        #[derive(Deserialize)]
        struct Stored {
            generator: GeneratorConfig,
            feature_dim: usize,
            text_dim: usize,
        }
        let stored: Stored = ck.config_as()?;
        let config = stored.generator;

        let mut gen_sizes = vec![config.noise_dim + stored.text_dim];
        gen_sizes.extend(&config.gen_hidden);
        gen_sizes.push(stored.feature_dim);
        let mut critic_sizes = vec![stored.feature_dim + stored.text_dim];
        critic_sizes.extend(&config.critic_hidden);
        critic_sizes.push(1);

        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = FeatureGenerator {
            gen: Mlp::new(&gen_sizes, Activation::LeakyRelu(LEAKY_SLOPE), &mut scratch),
            critic: Mlp::new(&critic_sizes, Activation::LeakyRelu(LEAKY_SLOPE), &mut scratch),
            embed: Mlp::new(
                &[stored.feature_dim, stored.text_dim],
                Activation::Identity,
                &mut scratch,
            ),
            config,
            feature_dim: stored.feature_dim,
            text_dim: stored.text_dim,
        };
        restore_mlp(ck, "gen", &mut model.gen)?;
        restore_mlp(ck, "critic", &mut model.critic)?;
        restore_mlp(ck, "embed", &mut model.embed)?;
        Ok(model)
    }
}

#[derive(Default)]
struct EpochAccumulator {
    critic_sum: f64,
    penalty_sum: f64,
    gnorm_sum: f64,
    critic_count: usize,
    gen_sum: f64,
    gen_count: usize,
}

impl EpochAccumulator {
    fn add_critic(&mut self, loss: f64, penalty: f64, gnorm: f64) {
        self.critic_sum += loss;
        self.penalty_sum += penalty;
        self.gnorm_sum += gnorm;
        self.critic_count += 1;
    }

    fn add_gen(&mut self, loss: f64) {
        self.gen_sum += loss;
        self.gen_count += 1;
    }

    fn finish(self) -> GanEpochStats {
        let c = self.critic_count.max(1) as f64;
        let g = self.gen_count.max(1) as f64;
        GanEpochStats {
            critic_loss: self.critic_sum / c,
            generator_loss: self.gen_sum / g,
            penalty: self.penalty_sum / c,
            interp_grad_norm: self.gnorm_sum / c,
        }
    }
}
