//! Embedding-based unseen-class classifier.
//!
//! Audio and visual features are encoded into text-embedding width, exchanged
//! through a pair of single-token cross-attention blocks (audio queries
//! visual and vice versa), projected into a joint space, and compared against
//! projected class text embeddings; the nearest candidate text wins.
//!
//! Training aligns the joint space with three loss families, each computed
//! for the anchor sample ("positive") and for a randomly drawn different-class
//! sample ("negative", with its own class text), mirroring roles:
//!
//! * four cooperating triplet terms between the fused audio-visual embedding
//!   and the text embedding,
//! * reconstruction: decoders map each projected modality back to the class
//!   text,
//! * regularization: reconstructors map decoder outputs back toward the
//!   original encoder outputs.
//!
//! The loss mask selects which negative-side families participate, which is
//! the ablation axis for the negative-loss study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{restore_mlp, restore_named, Checkpoint};
use crate::data::{ClassId, Dataset, Split};
use crate::nn::{dropout_mask, Activation, Adam, BoundMlp, Mat, Mlp, Tape, Var};
use crate::{Error, Result};

pub const UNSEEN_CHECKPOINT_KIND: &str = "unseen-classifier";

/// Which loss families are active. The positive side is always on; the
/// variants add negative-side families one at a time, up to all of them.
/// Serialized names follow the ablation-table row labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMask {
    #[serde(rename = "L+")]
    PositiveOnly,
    #[serde(rename = "L+trip-")]
    WithNegativeTriplet,
    #[serde(rename = "L+rec-")]
    WithNegativeReconstruction,
    #[serde(rename = "L+reg-")]
    WithNegativeRegularization,
    #[serde(rename = "full")]
    Full,
}

impl LossMask {
    pub const ALL: [LossMask; 5] = [
        LossMask::PositiveOnly,
        LossMask::WithNegativeTriplet,
        LossMask::WithNegativeReconstruction,
        LossMask::WithNegativeRegularization,
        LossMask::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LossMask::PositiveOnly => "L+",
            LossMask::WithNegativeTriplet => "L+trip-",
            LossMask::WithNegativeReconstruction => "L+rec-",
            LossMask::WithNegativeRegularization => "L+reg-",
            LossMask::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnseenConfig {
    /// Hidden width of every encoder/projector/decoder/reconstructor block.
    pub block_hidden: usize,
    /// Width of the joint embedding space.
    pub joint_dim: usize,
    /// Triplet margin.
    pub margin: f64,
    pub dropout_encoder: f64,
    pub dropout_projector: f64,
    pub dropout_decoder: f64,
    /// Hidden-layer activation of every block.
    pub activation: Activation,
    /// Number of stacked cross-attention block pairs.
    pub attention_blocks: usize,
    /// Stddev of Gaussian noise added to text inputs during training.
    /// Features arrive with natural within-class spread, but each class has
    /// a single exact text row; jitter keeps the text projector smooth
    /// around those anchors instead of memorizing them pointwise.
    pub text_jitter: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss_mask: LossMask,
}

impl Default for UnseenConfig {
    fn default() -> Self {
        UnseenConfig {
            block_hidden: 64,
            joint_dim: 64,
            margin: 1.0,
            dropout_encoder: 0.3,
            dropout_projector: 0.1,
            dropout_decoder: 0.2,
            activation: Activation::Relu,
            attention_blocks: 1,
            text_jitter: 0.1,
            epochs: 50,
            batch_size: 64,
            lr: 5e-4,
            loss_mask: LossMask::Full,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct UnseenTrace {
    pub epoch_loss: Vec<f64>,
}

/// Single-head cross-attention over one token per modality: the query stream
/// attends to the other stream's single key/value token, followed by a
/// residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln_gamma: Mat,
    pub ln_beta: Mat,
}

impl CrossAttention {
    fn new(dim: usize, rng: &mut impl Rng) -> CrossAttention {
        let bound = (3.0 / dim as f64).sqrt();
        CrossAttention {
            wq: Mat::uniform(dim, dim, bound, rng),
            wk: Mat::uniform(dim, dim, bound, rng),
            wv: Mat::uniform(dim, dim, bound, rng),
            wo: Mat::uniform(dim, dim, bound, rng),
            ln_gamma: Mat::from_vec(1, dim, vec![1.0; dim]),
            ln_beta: Mat::zeros(1, dim),
        }
    }

    fn named_params(&self) -> Vec<(String, &Mat)> {
        vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("wo".into(), &self.wo),
            ("ln_gamma".into(), &self.ln_gamma),
            ("ln_beta".into(), &self.ln_beta),
        ]
    }

    fn params(&self) -> Vec<&Mat> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo, &self.ln_gamma, &self.ln_beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }

    fn bind(&self, tape: &mut Tape) -> BoundAttention {
        BoundAttention {
            wq: tape.leaf(&self.wq),
            wk: tape.leaf(&self.wk),
            wv: tape.leaf(&self.wv),
            wo: tape.leaf(&self.wo),
            ln_gamma: tape.leaf(&self.ln_gamma),
            ln_beta: tape.leaf(&self.ln_beta),
            dim: self.wq.rows,
        }
    }
}

pub struct BoundAttention {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln_gamma: Var,
    ln_beta: Var,
    dim: usize,
}

impl BoundAttention {
    fn forward(&self, tape: &mut Tape, query_in: Var, kv_in: Var) -> Var {
        let q = tape.matmul_nt(query_in, self.wq);
        let k = tape.matmul_nt(kv_in, self.wk);
        let v = tape.matmul_nt(kv_in, self.wv);
        let qk = tape.mul(q, k);
        let score = tape.sum_cols(qk);
        let scaled = tape.scale(score, 1.0 / (self.dim as f64).sqrt());
        // One key/value token per query: the softmax collapses to weight 1.
        let weights = tape.softmax_rows(scaled);
        let ctx = tape.mul_colvec(v, weights);
        let out = tape.matmul_nt(ctx, self.wo);
        let res = tape.add(query_in, out);
        tape.layer_norm_rows(res, self.ln_gamma, self.ln_beta)
    }

    fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        [self.wq, self.wk, self.wv, self.wo, self.ln_gamma, self.ln_beta]
            .iter()
            .map(|&v| tape.grad(v).to_vec())
            .collect()
    }
}

/// Softening constant inside the triplet distances. Untrained projectors can
/// emit identical rows (a fully dead hidden layer zeroes its whole output
/// row), and the exact norm has an infinite gradient at distance zero.
const DIST_EPS: f64 = 1e-12;

/// Four cooperating triplet terms between fused audio-visual embeddings and
/// text embeddings, averaged over the batch:
/// anchor av vs negative av, anchor t vs negative t, anchor t vs negative av,
/// anchor av vs negative t. Every term shares the positive distance
/// ||av - t|| of the anchor pair.
pub fn quadruple_triplet(
    tape: &mut Tape,
    av_pos: Var,
    t_pos: Var,
    av_neg: Var,
    t_neg: Var,
    margin: f64,
) -> Var {
    let dist = |tape: &mut Tape, a: Var, b: Var| {
        let d = tape.sub(a, b);
        tape.row_norms_eps(d, DIST_EPS)
    };
    let d_pos = dist(tape, av_pos, t_pos);
    let d_av_avn = dist(tape, av_pos, av_neg);
    let d_t_tn = dist(tape, t_pos, t_neg);
    let d_t_avn = dist(tape, t_pos, av_neg);
    let d_av_tn = dist(tape, av_pos, t_neg);

    let mut total: Option<Var> = None;
    for neg in [d_av_avn, d_t_tn, d_t_avn, d_av_tn] {
        let diff = tape.sub(d_pos, neg);
        let shifted = tape.add_scalar(diff, margin);
        let hinge = tape.relu(shifted);
        total = Some(match total {
            None => hinge,
            Some(t) => tape.add(t, hinge),
        });
    }
    tape.mean_all(total.expect("four terms"))
}

/// The six loss families of one training step, still on the tape.
pub struct LossParts {
    pub trip_pos: Var,
    pub trip_neg: Var,
    pub rec_pos: Var,
    pub rec_neg: Var,
    pub reg_pos: Var,
    pub reg_neg: Var,
}

impl LossParts {
    /// Combines the families selected by `mask` into the training objective.
    pub fn total(&self, tape: &mut Tape, mask: LossMask) -> Var {
        let pos = {
            let a = tape.add(self.trip_pos, self.rec_pos);
            tape.add(a, self.reg_pos)
        };
        let extra: Vec<Var> = match mask {
            LossMask::PositiveOnly => vec![],
            LossMask::WithNegativeTriplet => vec![self.trip_neg],
            LossMask::WithNegativeReconstruction => vec![self.rec_neg],
            LossMask::WithNegativeRegularization => vec![self.reg_neg],
            LossMask::Full => vec![self.trip_neg, self.rec_neg, self.reg_neg],
        };
        let mut total = pos;
        for e in extra {
            total = tape.add(total, e);
        }
        total
    }
}

/// Joint-space views of one embedded sample batch.
pub struct SampleEmbedding {
    pub enc_a: Var,
    pub enc_v: Var,
    pub proj_a: Var,
    pub proj_v: Var,
    /// Fused audio-visual embedding: mean of the two projections.
    pub av: Var,
}

#[derive(Clone, Debug)]
pub struct UnseenClassifier {
    pub config: UnseenConfig,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    enc_a: Mlp,
    enc_v: Mlp,
    attn_a: Vec<CrossAttention>,
    attn_v: Vec<CrossAttention>,
    proj_a: Mlp,
    proj_v: Mlp,
    proj_t: Mlp,
    dec_a: Mlp,
    dec_v: Mlp,
    dec_t: Mlp,
    rec_a: Mlp,
    rec_v: Mlp,
}

/// Two-layer block forward with inverted dropout on the hidden activation
/// when an rng is supplied (training mode).
fn block_forward(
    tape: &mut Tape,
    block: &BoundMlp,
    x: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Var {
    let last = block.weights.len() - 1;
    let mut h = x;
    for i in 0..block.weights.len() {
        let lin = tape.matmul_nt(h, block.weights[i]);
        let a = tape.add_row(lin, block.biases[i]);
        h = if i < last {
            let act = tape.relu(a);
            maybe_dropout(tape, act, p, rng)
        } else {
            a
        };
    }
    h
}

fn maybe_dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    if p <= 0.0 {
        return x;
    }
    match rng {
        None => x,
        Some(r) => {
            let (rows, cols) = tape.shape(x);
            let mask = dropout_mask(rows, cols, p, *r);
            let m = tape.leaf(&mask);
            tape.mul(x, m)
        }
    }
}

pub struct BoundUnseen {
    enc_a: BoundMlp,
    enc_v: BoundMlp,
    attn_a: Vec<BoundAttention>,
    attn_v: Vec<BoundAttention>,
    proj_a: BoundMlp,
    proj_v: BoundMlp,
    proj_t: BoundMlp,
    dec_a: BoundMlp,
    dec_v: BoundMlp,
    dec_t: BoundMlp,
    rec_a: BoundMlp,
    rec_v: BoundMlp,
    config: UnseenConfig,
}

impl BoundUnseen {
    /// Encoder -> cross-attention -> projector chain for a feature batch.
    /// `rng` enables dropout; pass `None` for evaluation.
    pub fn embed_sample(
        &self,
        tape: &mut Tape,
        audio: Var,
        visual: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> SampleEmbedding {
        let c = &self.config;
        let enc_a = block_forward(tape, &self.enc_a, audio, c.dropout_encoder, &mut rng);
        let enc_v = block_forward(tape, &self.enc_v, visual, c.dropout_encoder, &mut rng);
        let (mut att_a, mut att_v) = (enc_a, enc_v);
        for (block_a, block_v) in self.attn_a.iter().zip(&self.attn_v) {
            let next_a = block_a.forward(tape, att_a, att_v);
            let next_v = block_v.forward(tape, att_v, att_a);
            att_a = next_a;
            att_v = next_v;
        }
        let proj_a = block_forward(tape, &self.proj_a, att_a, c.dropout_projector, &mut rng);
        let proj_v = block_forward(tape, &self.proj_v, att_v, c.dropout_projector, &mut rng);
        let sum = tape.add(proj_a, proj_v);
        let av = tape.scale(sum, 0.5);
        SampleEmbedding { enc_a, enc_v, proj_a, proj_v, av }
    }

    /// Text-embedding projection into the joint space.
    pub fn project_text(
        &self,
        tape: &mut Tape,
        text: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        block_forward(tape, &self.proj_t, text, self.config.dropout_projector, &mut rng)
    }

    /// Builds all six loss families for an anchor batch and its mirrored
    /// negative batch. The negative rows must hold different classes than
    /// their anchor rows, with `text_neg` the negatives' own class texts.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_parts(
        &self,
        tape: &mut Tape,
        audio_pos: Var,
        visual_pos: Var,
        text_pos: Var,
        audio_neg: Var,
        visual_neg: Var,
        text_neg: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> LossParts {
        let pos = self.embed_sample(tape, audio_pos, visual_pos, rng.as_deref_mut());
        let neg = self.embed_sample(tape, audio_neg, visual_neg, rng.as_deref_mut());
        let t_pos = self.project_text(tape, text_pos, rng.as_deref_mut());
        let t_neg = self.project_text(tape, text_neg, rng.as_deref_mut());

        let margin = self.config.margin;
        let trip_pos = quadruple_triplet(tape, pos.av, t_pos, neg.av, t_neg, margin);
        let trip_neg = quadruple_triplet(tape, neg.av, t_neg, pos.av, t_pos, margin);

        let (rec_pos, reg_pos) = self.rec_and_reg(tape, &pos, t_pos, text_pos, &mut rng);
        let (rec_neg, reg_neg) = self.rec_and_reg(tape, &neg, t_neg, text_neg, &mut rng);

        LossParts { trip_pos, trip_neg, rec_pos, rec_neg, reg_pos, reg_neg }
    }

    /// Reconstruction (decoders vs. raw text) and regularization
    /// (reconstructors vs. encoder outputs) for one polarity.
    fn rec_and_reg(
        &self,
        tape: &mut Tape,
        emb: &SampleEmbedding,
        t_proj: Var,
        text_raw: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Var, Var) {
        let p = self.config.dropout_decoder;
        let dec_a = block_forward(tape, &self.dec_a, emb.proj_a, p, rng);
        let dec_v = block_forward(tape, &self.dec_v, emb.proj_v, p, rng);
        let dec_t = block_forward(tape, &self.dec_t, t_proj, p, rng);
        let rec = {
            let ra = tape.mse(dec_a, text_raw);
            let rv = tape.mse(dec_v, text_raw);
            let rt = tape.mse(dec_t, text_raw);
            let s = tape.add(ra, rv);
            tape.add(s, rt)
        };
        let rec_a = block_forward(tape, &self.rec_a, dec_a, p, rng);
        let rec_v = block_forward(tape, &self.rec_v, dec_v, p, rng);
        let reg = {
            let ga = tape.mse(rec_a, emb.enc_a);
            let gv = tape.mse(rec_v, emb.enc_v);
            tape.add(ga, gv)
        };
        (rec, reg)
    }

    /// Gradients in [`UnseenClassifier::params`] order.
    pub fn param_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        out.extend(self.enc_a.param_grads(tape));
        out.extend(self.enc_v.param_grads(tape));
        for (a, v) in self.attn_a.iter().zip(&self.attn_v) {
            out.extend(a.grads(tape));
            out.extend(v.grads(tape));
        }
        for b in [&self.proj_a, &self.proj_v, &self.proj_t, &self.dec_a, &self.dec_v, &self.dec_t, &self.rec_a, &self.rec_v] {
            out.extend(b.param_grads(tape));
        }
        out
    }
}

impl UnseenClassifier {
    pub fn new(
        audio_dim: usize,
        visual_dim: usize,
        text_dim: usize,
        config: &UnseenConfig,
        rng: &mut impl Rng,
    ) -> UnseenClassifier {
        assert!(config.attention_blocks >= 1, "need at least one attention block");
        let h = config.block_hidden;
        let j = config.joint_dim;
        let t = text_dim;
        let enc_a = Mlp::new(&[audio_dim, h, t], config.activation, rng);
        let enc_v = Mlp::new(&[visual_dim, h, t], config.activation, rng);
        let mut attn_a = Vec::new();
        let mut attn_v = Vec::new();
        for _ in 0..config.attention_blocks {
            attn_a.push(CrossAttention::new(t, rng));
            attn_v.push(CrossAttention::new(t, rng));
        }
        UnseenClassifier {
            config: config.clone(),
            audio_dim,
            visual_dim,
            text_dim,
            enc_a,
            enc_v,
            attn_a,
            attn_v,
            proj_a: Mlp::new(&[t, h, j], config.activation, rng),
            proj_v: Mlp::new(&[t, h, j], config.activation, rng),
            proj_t: Mlp::new(&[t, h, j], config.activation, rng),
            dec_a: Mlp::new(&[j, h, t], config.activation, rng),
            dec_v: Mlp::new(&[j, h, t], config.activation, rng),
            dec_t: Mlp::new(&[j, h, t], config.activation, rng),
            rec_a: Mlp::new(&[t, h, t], config.activation, rng),
            rec_v: Mlp::new(&[t, h, t], config.activation, rng),
        }
    }

    fn blocks(&self) -> Vec<(&'static str, &Mlp)> {
        vec![
            ("enc_a", &self.enc_a),
            ("enc_v", &self.enc_v),
            ("proj_a", &self.proj_a),
            ("proj_v", &self.proj_v),
            ("proj_t", &self.proj_t),
            ("dec_a", &self.dec_a),
            ("dec_v", &self.dec_v),
            ("dec_t", &self.dec_t),
            ("rec_a", &self.rec_a),
            ("rec_v", &self.rec_v),
        ]
    }

    /// All trainable parameters in a fixed order shared with
    /// [`BoundUnseen::param_grads`] and the checkpoint layout.
    pub fn params(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        out.extend(self.enc_a.params());
        out.extend(self.enc_v.params());
        for (a, v) in self.attn_a.iter().zip(&self.attn_v) {
            out.extend(a.params());
            out.extend(v.params());
        }
        for (_, b) in &self.blocks()[2..] {
            out.extend(b.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        out.extend(self.enc_a.params_mut());
        out.extend(self.enc_v.params_mut());
        for (a, v) in self.attn_a.iter_mut().zip(&mut self.attn_v) {
            out.extend(a.params_mut());
            out.extend(v.params_mut());
        }
        out.extend(self.proj_a.params_mut());
        out.extend(self.proj_v.params_mut());
        out.extend(self.proj_t.params_mut());
        out.extend(self.dec_a.params_mut());
        out.extend(self.dec_v.params_mut());
        out.extend(self.dec_t.params_mut());
        out.extend(self.rec_a.params_mut());
        out.extend(self.rec_v.params_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundUnseen {
        BoundUnseen {
            enc_a: self.enc_a.bind(tape),
            enc_v: self.enc_v.bind(tape),
            attn_a: self.attn_a.iter().map(|b| b.bind(tape)).collect(),
            attn_v: self.attn_v.iter().map(|b| b.bind(tape)).collect(),
            proj_a: self.proj_a.bind(tape),
            proj_v: self.proj_v.bind(tape),
            proj_t: self.proj_t.bind(tape),
            dec_a: self.dec_a.bind(tape),
            dec_v: self.dec_v.bind(tape),
            dec_t: self.dec_t.bind(tape),
            rec_a: self.rec_a.bind(tape),
            rec_v: self.rec_v.bind(tape),
            config: self.config.clone(),
        }
    }

    /// Trains on the seen training split with randomly drawn different-class
    /// negatives.
    pub fn train(dataset: &Dataset, config: &UnseenConfig, seed: u64) -> Result<(Self, UnseenTrace)> {
        if config.epochs == 0 || config.batch_size < 2 {
            return Err(Error::Config("unseen classifier needs epochs >= 1, batch_size >= 2".into()));
        }
        if dataset.seen_class_ids().len() < 2 {
            return Err(Error::Config("negative sampling needs at least 2 seen classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = UnseenClassifier::new(
            dataset.dims.audio,
            dataset.dims.visual,
            dataset.dims.text,
            config,
            &mut rng,
        );

        let train_idx = dataset.split_indices(Split::TrainSeen);
        let labels = dataset.labels_of(&train_idx);
        let audio = dataset.audio.gather_rows(&train_idx);
        let visual = dataset.visual.gather_rows(&train_idx);
        let texts = dataset.text_for_labels(&labels);

        // Local sample indices per class, for class-first negative draws.
        let seen_ids = dataset.seen_class_ids();
        let by_class: Vec<Vec<usize>> = seen_ids
            .iter()
            .map(|c| (0..labels.len()).filter(|&i| labels[i] == *c).collect())
            .collect();

        let mut opt = Adam::for_params(config.lr, 0.9, 0.999, &model.params());
        let mut trace = UnseenTrace::default();
        let mut order: Vec<usize> = (0..train_idx.len()).collect();

        for epoch in 0..config.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            // One negative per sample, redrawn each epoch: a uniformly chosen
            // other class, then a uniformly chosen sample of that class.
            let epoch_negs: Vec<usize> = (0..labels.len())
                .map(|i| loop {
                    let c = rng.random_range(0..seen_ids.len());
                    if seen_ids[c] != labels[i] && !by_class[c].is_empty() {
                        let pick = rng.random_range(0..by_class[c].len());
                        break by_class[c][pick];
                    }
                })
                .collect();
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(config.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let negatives: Vec<usize> = chunk.iter().map(|&i| epoch_negs[i]).collect();

                let jittered = |rows: &[usize], rng: &mut ChaCha8Rng| {
                    let mut m = texts.gather_rows(rows);
                    if config.text_jitter > 0.0 {
                        for v in &mut m.data {
                            let z: f64 = StandardNormal.sample(rng);
                            *v += config.text_jitter * z;
                        }
                    }
                    m
                };
                let t_pos_mat = jittered(chunk, &mut rng);
                let t_neg_mat = jittered(&negatives, &mut rng);

                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let a_pos = tape.leaf(&audio.gather_rows(chunk));
                let v_pos = tape.leaf(&visual.gather_rows(chunk));
                let t_pos = tape.leaf(&t_pos_mat);
                let a_neg = tape.leaf(&audio.gather_rows(&negatives));
                let v_neg = tape.leaf(&visual.gather_rows(&negatives));
                let t_neg = tape.leaf(&t_neg_mat);

                let parts = bound.loss_parts(
                    &mut tape,
                    a_pos,
                    v_pos,
                    t_pos,
                    a_neg,
                    v_neg,
                    t_neg,
                    Some(&mut rng),
                );
                let loss = parts.total(&mut tape, config.loss_mask);
                loss_sum += tape.scalar(loss);
                batches += 1;
                tape.backward(loss);
                let grads = bound.param_grads(&tape);
                opt.step(&mut model.params_mut(), &grads);
            }
            let mean_loss = loss_sum / batches.max(1) as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite unseen-classifier loss at epoch {epoch}"
                )));
            }
            trace.epoch_loss.push(mean_loss);
        }
        Ok((model, trace))
    }

    /// Joint embeddings of fused feature rows (evaluation mode, no dropout).
    pub fn embed(&self, fused: &Mat) -> Mat {
        assert_eq!(fused.cols, self.audio_dim + self.visual_dim, "fused width mismatch");
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = tape.leaf(fused);
        let audio = tape.slice_cols(f, 0, self.audio_dim);
        let visual = tape.slice_cols(f, self.audio_dim, self.visual_dim);
        let emb = bound.embed_sample(&mut tape, audio, visual, None);
        tape.value_mat(emb.av)
    }

    /// Joint embeddings of class text rows (evaluation mode).
    pub fn embed_texts(&self, texts: &Mat) -> Mat {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let t = tape.leaf(texts);
        let proj = bound.project_text(&mut tape, t, None);
        tape.value_mat(proj)
    }

    /// Euclidean distances between each fused sample and each candidate
    /// text, both taken in the joint space; result (samples, candidates).
    pub fn distances_to_texts(&self, fused: &Mat, texts: &Mat) -> Mat {
        let e = self.embed(fused);
        let t = self.embed_texts(texts);
        let mut out = Mat::zeros(e.rows, t.rows);
        for i in 0..e.rows {
            for k in 0..t.rows {
                let d: f64 = e
                    .row(i)
                    .iter()
                    .zip(t.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                out.row_mut(i)[k] = d;
            }
        }
        out
    }

    /// Nearest-text classification over `candidates`; `all_texts` is indexed
    /// by class id. Distance ties resolve to the earlier candidate.
    pub fn predict(&self, fused: &Mat, all_texts: &Mat, candidates: &[ClassId]) -> Vec<ClassId> {
        assert!(!candidates.is_empty(), "no candidate classes");
        let rows: Vec<usize> = candidates.iter().map(|c| c.index()).collect();
        let texts = all_texts.gather_rows(&rows);
        let dists = self.distances_to_texts(fused, &texts);
        (0..dists.rows)
            .map(|i| {
                let row = dists.row(i);
                let mut best = 0;
                for (k, &d) in row.iter().enumerate() {
                    if d < row[best] {
                        best = k;
                    }
                }
                candidates[best]
            })
            .collect()
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let config = json!({
            "unseen": self.config,
            "audio_dim": self.audio_dim,
            "visual_dim": self.visual_dim,
            "text_dim": self.text_dim,
        });
        let mut ck = Checkpoint::new(UNSEEN_CHECKPOINT_KIND, seed, config);
        for (name, block) in self.blocks() {
            ck.push_named(name, &block.named_params());
        }
        for (i, (a, v)) in self.attn_a.iter().zip(&self.attn_v).enumerate() {
            ck.push_named(&format!("attn_a{i}"), &a.named_params());
            ck.push_named(&format!("attn_v{i}"), &v.named_params());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<UnseenClassifier> {
        ck.expect_kind(UNSEEN_CHECKPOINT_KIND)?;
        #[derive(Deserialize)]
        struct Stored {
            unseen: UnseenConfig,
            audio_dim: usize,
            visual_dim: usize,
            text_dim: usize,
        }
        let stored: Stored = ck.config_as()?;
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = UnseenClassifier::new(
            stored.audio_dim,
            stored.visual_dim,
            stored.text_dim,
            &stored.unseen,
            &mut scratch,
        );
        restore_mlp(ck, "enc_a", &mut model.enc_a)?;
        restore_mlp(ck, "enc_v", &mut model.enc_v)?;
        restore_mlp(ck, "proj_a", &mut model.proj_a)?;
        restore_mlp(ck, "proj_v", &mut model.proj_v)?;
        restore_mlp(ck, "proj_t", &mut model.proj_t)?;
        restore_mlp(ck, "dec_a", &mut model.dec_a)?;
        restore_mlp(ck, "dec_v", &mut model.dec_v)?;
        restore_mlp(ck, "dec_t", &mut model.dec_t)?;
        restore_mlp(ck, "rec_a", &mut model.rec_a)?;
        restore_mlp(ck, "rec_v", &mut model.rec_v)?;
        for i in 0..model.attn_a.len() {
            for (prefix, attn) in [
                (format!("attn_a{i}"), &mut model.attn_a[i]),
                (format!("attn_v{i}"), &mut model.attn_v[i]),
            ] {
                let names: Vec<String> =
                    attn.named_params().iter().map(|(n, _)| n.clone()).collect();
                let mut slots: Vec<(String, &mut Mat)> =
                    names.into_iter().zip(attn.params_mut()).collect();
                restore_named(ck, &prefix, &mut slots)?;
            }
        }
        Ok(model)
    }
}
