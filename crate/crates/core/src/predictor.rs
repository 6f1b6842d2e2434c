//! The prediction module Ψ(x, y) and a small attention text classifier.
//!
//! The classifier embeds tokens, scores them against a learned global
//! context vector through a tanh projection, pools the embeddings with the
//! resulting softmax attention and applies a linear softmax output layer.
//! Gradients are derived by hand; `loss_and_gradients` is exposed so they can
//! be checked against finite differences.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Instance, TokenId, UNK};
use crate::dist::{log_sum_exp, softmax_in_place, LabelMatrix};

const CHECKPOINT_MAGIC: &[u8; 8] = b"S4PSI\0\0\0";
const CHECKPOINT_VERSION: u32 = 1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{0}")]
    Shape(String),
}

/// Per-instance target distributions (the E-step marginals) for a set of
/// training instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticLabelSet {
    ids: Vec<usize>,
    probs: LabelMatrix,
}

impl ProbabilisticLabelSet {
    /// Targets for instances `0..probs.rows()`.
    pub fn full(probs: LabelMatrix) -> Result<Self, PredictorError> {
        let ids = (0..probs.rows()).collect();
        Self::partial(ids, probs)
    }

    /// Targets for the listed instances; row k belongs to `ids[k]`.
    pub fn partial(ids: Vec<usize>, probs: LabelMatrix) -> Result<Self, PredictorError> {
        if ids.len() != probs.rows() {
            return Err(PredictorError::Shape(format!(
                "{} instance ids for {} target rows",
                ids.len(),
                probs.rows()
            )));
        }
        let err = probs.max_normalization_error();
        if err > 1e-9 {
            return Err(PredictorError::Shape(format!(
                "target rows must be distributions (deviation {err:e})"
            )));
        }
        Ok(ProbabilisticLabelSet { ids, probs })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn probs(&self) -> &LabelMatrix {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.probs.n_labels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Clear the adaptive moment estimates before training.
    pub reset_optimizer: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5,
            learning_rate: 0.001,
            batch_size: 32,
            reset_optimizer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    /// Loss on all targets after the last update.
    pub final_loss: f64,
}

/// Interface the learning loop and proposers need from Ψ.
pub trait Predictor: Clone + Send + Sync {
    fn n_labels(&self) -> usize;

    /// P(y | x), a distribution over labels.
    fn predict(&self, x: &Instance) -> Vec<f64>;

    /// Normalized attention over `x.tokens`.
    fn attention(&self, x: &Instance) -> Vec<f64>;

    /// Document vector used for similarity.
    fn embed(&self, x: &Instance) -> Vec<f64>;

    fn train(
        &mut self,
        corpus: &Corpus,
        targets: &ProbabilisticLabelSet,
        opts: &TrainOptions,
    ) -> Result<TrainReport, PredictorError>;

    /// Writes the parameters to `path`.
    fn save_checkpoint(&self, path: &Path) -> Result<(), PredictorError>;

    fn predict_all(&self, corpus: &Corpus) -> LabelMatrix {
        let rows: Vec<Vec<f64>> = corpus
            .instances()
            .par_iter()
            .map(|x| self.predict(x))
            .collect();
        LabelMatrix::from_rows(&rows, self.n_labels())
    }

    fn embed_all(&self, corpus: &Corpus) -> Vec<Vec<f64>> {
        corpus
            .instances()
            .par_iter()
            .map(|x| self.embed(x))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub dim: usize,
    pub context_dim: usize,
    /// Standard deviation of the initial embeddings.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            dim: 64,
            context_dim: 5,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// Parameter tensors, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embeddings,
    AttentionWeight,
    AttentionBias,
    Context,
    Output,
    OutputBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Embeddings,
        ParamGroup::AttentionWeight,
        ParamGroup::AttentionBias,
        ParamGroup::Context,
        ParamGroup::Output,
        ParamGroup::OutputBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::AttentionWeight => "attention.weight",
            ParamGroup::AttentionBias => "attention.bias",
            ParamGroup::Context => "attention.context",
            ParamGroup::Output => "output.weight",
            ParamGroup::OutputBias => "output.bias",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    emb: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    ctx: Vec<f64>,
    out: Vec<f64>,
    out_b: Vec<f64>,
}

impl Params {
    fn get(&self, g: ParamGroup) -> &Vec<f64> {
        match g {
            ParamGroup::Embeddings => &self.emb,
            ParamGroup::AttentionWeight => &self.w,
            ParamGroup::AttentionBias => &self.b,
            ParamGroup::Context => &self.ctx,
            ParamGroup::Output => &self.out,
            ParamGroup::OutputBias => &self.out_b,
        }
    }

    fn get_mut(&mut self, g: ParamGroup) -> &mut Vec<f64> {
        match g {
            ParamGroup::Embeddings => &mut self.emb,
            ParamGroup::AttentionWeight => &mut self.w,
            ParamGroup::AttentionBias => &mut self.b,
            ParamGroup::Context => &mut self.ctx,
            ParamGroup::Output => &mut self.out,
            ParamGroup::OutputBias => &mut self.out_b,
        }
    }

    fn zeros_like(&self) -> Params {
        Params {
            emb: vec![0.0; self.emb.len()],
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
            ctx: vec![0.0; self.ctx.len()],
            out: vec![0.0; self.out.len()],
            out_b: vec![0.0; self.out_b.len()],
        }
    }
}

/// Loss gradients; embedding rows are stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embeddings: HashMap<TokenId, Vec<f64>>,
    pub attention_weight: Vec<f64>,
    pub attention_bias: Vec<f64>,
    pub context: Vec<f64>,
    pub output: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl Gradients {
    /// Gradient of `group` laid out like the parameter tensor.
    pub fn dense(&self, group: ParamGroup, model: &AttentionClassifier) -> Vec<f64> {
        match group {
            ParamGroup::Embeddings => {
                let d = model.cfg.dim;
                let mut g = vec![0.0; model.params.emb.len()];
                for (&t, row) in &self.embeddings {
                    g[t as usize * d..(t as usize + 1) * d].copy_from_slice(row);
                }
                g
            }
            ParamGroup::AttentionWeight => self.attention_weight.clone(),
            ParamGroup::AttentionBias => self.attention_bias.clone(),
            ParamGroup::Context => self.context.clone(),
            ParamGroup::Output => self.output.clone(),
            ParamGroup::OutputBias => self.output_bias.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: Params,
    v: Params,
    t: u64,
}

struct Forward {
    tokens: Vec<usize>,
    /// tanh activations, one row of `context_dim` per token.
    u: Vec<f64>,
    attention: Vec<f64>,
    z: Vec<f64>,
    log_probs: Vec<f64>,
}

/// Embeddings + global-context attention + linear softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionClassifier {
    cfg: PredictorConfig,
    vocab_size: usize,
    n_labels: usize,
    params: Params,
    adam: Adam,
    shuffle: ChaCha8Rng,
}

impl AttentionClassifier {
    /// Seeded random embeddings and attention parameters; the output layer
    /// starts at zero so initial predictions are uniform.
    pub fn new(vocab_size: usize, n_labels: usize, cfg: PredictorConfig) -> Self {
        assert!(vocab_size > 0 && n_labels > 0 && cfg.dim > 0 && cfg.context_dim > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, c) = (cfg.dim, cfg.context_dim);
        let normal = Normal::new(0.0, cfg.init_scale).expect("finite init scale");
        let emb = (0..vocab_size * d)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let bound = (6.0 / (c + d) as f64).sqrt();
        let w: Vec<f64> = (0..c * d)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let ctx_bound = (1.0 / c as f64).sqrt();
        let ctx = (0..c)
            .map(|_| rng.random_range(-ctx_bound..ctx_bound))
            .collect();
        let params = Params {
            emb,
            w,
            b: vec![0.0; c],
            ctx,
            out: vec![0.0; n_labels * d],
            out_b: vec![0.0; n_labels],
        };
        let adam = Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        };
        let shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
        AttentionClassifier {
            cfg,
            vocab_size,
            n_labels,
            params,
            adam,
            shuffle,
        }
    }

    /// Sized for `corpus`.
    pub fn for_corpus(corpus: &Corpus, cfg: PredictorConfig) -> Self {
        Self::new(corpus.vocabulary().len(), corpus.n_labels(), cfg)
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn param(&self, group: ParamGroup) -> &[f64] {
        self.params.get(group)
    }

    pub fn param_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        self.params.get_mut(group)
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = Adam {
            m: self.params.zeros_like(),
            v: self.params.zeros_like(),
            t: 0,
        };
    }

    fn token_index(&self, t: TokenId) -> usize {
        let t = t as usize;
        if t < self.vocab_size {
            t
        } else {
            UNK as usize
        }
    }

    fn forward(&self, x: &Instance) -> Forward {
        let (d, c, nl) = (self.cfg.dim, self.cfg.context_dim, self.n_labels);
        let p = &self.params;
        let tokens: Vec<usize> = x.tokens.iter().map(|&t| self.token_index(t)).collect();
        let n = tokens.len();
        let mut u = vec![0.0; n * c];
        let mut scores = vec![0.0; n];
        for (j, &t) in tokens.iter().enumerate() {
            let h = &p.emb[t * d..(t + 1) * d];
            for r in 0..c {
                let row = &p.w[r * d..(r + 1) * d];
                let pre: f64 = p.b[r] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                u[j * c + r] = pre.tanh();
            }
            scores[j] = (0..c).map(|r| p.ctx[r] * u[j * c + r]).sum();
        }
        let mut attention = scores;
        if n > 0 {
            softmax_in_place(&mut attention);
        }
        let mut z = vec![0.0; d];
        for (j, &t) in tokens.iter().enumerate() {
            let h = &p.emb[t * d..(t + 1) * d];
            for k in 0..d {
                z[k] += attention[j] * h[k];
            }
        }
        let mut logits: Vec<f64> = (0..nl)
            .map(|l| {
                p.out_b[l]
                    + p.out[l * d..(l + 1) * d]
                        .iter()
                        .zip(&z)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let lse = log_sum_exp(&logits);
        logits.iter_mut().for_each(|v| *v -= lse);
        Forward {
            tokens,
            u,
            attention,
            z,
            log_probs: logits,
        }
    }

    /// Cross-entropy of one instance, accumulating `scale` times its
    /// gradient into `grads`.
    fn backward(
        &self,
        x: &Instance,
        target: &[f64],
        scale: f64,
        grads: &mut Params,
        emb_grads: &mut HashMap<usize, Vec<f64>>,
    ) -> f64 {
        let (d, c, nl) = (self.cfg.dim, self.cfg.context_dim, self.n_labels);
        let p = &self.params;
        let f = self.forward(x);
        let loss: f64 = -target
            .iter()
            .zip(&f.log_probs)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, lp)| q * lp)
            .sum::<f64>();
        let dlogits: Vec<f64> = (0..nl)
            .map(|l| (f.log_probs[l].exp() - target[l]) * scale)
            .collect();
        let mut dz = vec![0.0; d];
        for l in 0..nl {
            grads.out_b[l] += dlogits[l];
            for k in 0..d {
                grads.out[l * d + k] += dlogits[l] * f.z[k];
                dz[k] += p.out[l * d + k] * dlogits[l];
            }
        }
        let n = f.tokens.len();
        let da: Vec<f64> = f
            .tokens
            .iter()
            .map(|&t| {
                p.emb[t * d..(t + 1) * d]
                    .iter()
                    .zip(&dz)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let mean_da: f64 = (0..n).map(|j| f.attention[j] * da[j]).sum();
        let mut dpre = vec![0.0; c];
        for (j, &t) in f.tokens.iter().enumerate() {
            let a = f.attention[j];
            let ds = a * (da[j] - mean_da);
            let uj = &f.u[j * c..(j + 1) * c];
            for r in 0..c {
                grads.ctx[r] += ds * uj[r];
                dpre[r] = ds * p.ctx[r] * (1.0 - uj[r] * uj[r]);
                grads.b[r] += dpre[r];
            }
            let h = &p.emb[t * d..(t + 1) * d];
            let dh = emb_grads.entry(t).or_insert_with(|| vec![0.0; d]);
            for k in 0..d {
                let mut g = a * dz[k];
                for r in 0..c {
                    grads.w[r * d + k] += dpre[r] * h[k];
                    g += p.w[r * d + k] * dpre[r];
                }
                dh[k] += g;
            }
        }
        loss
    }

    /// Mean cross-entropy over `ids` against the matching target rows, and
    /// its gradient.
    pub fn loss_and_gradients(
        &self,
        corpus: &Corpus,
        targets: &ProbabilisticLabelSet,
    ) -> (f64, Gradients) {
        let mut grads = self.params.zeros_like();
        grads.emb = Vec::new();
        let mut emb = HashMap::new();
        let scale = 1.0 / targets.len().max(1) as f64;
        let mut loss = 0.0;
        for (k, &i) in targets.ids().iter().enumerate() {
            loss += self.backward(
                corpus.instance(i),
                targets.probs().row(k),
                scale,
                &mut grads,
                &mut emb,
            );
        }
        let grads = Gradients {
            embeddings: emb.into_iter().map(|(t, g)| (t as TokenId, g)).collect(),
            attention_weight: grads.w,
            attention_bias: grads.b,
            context: grads.ctx,
            output: grads.out,
            output_bias: grads.out_b,
        };
        (loss * scale, grads)
    }

    /// Mean cross-entropy over the targets.
    pub fn loss(&self, corpus: &Corpus, targets: &ProbabilisticLabelSet) -> f64 {
        let total: f64 = targets
            .ids()
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let lp = self.forward(corpus.instance(i)).log_probs;
                -targets
                    .probs()
                    .row(k)
                    .iter()
                    .zip(&lp)
                    .filter(|(q, _)| **q > 0.0)
                    .map(|(q, l)| q * l)
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        total / targets.len().max(1) as f64
    }

    fn adam_step(&mut self, grads: &Params, emb_grads: &HashMap<usize, Vec<f64>>, lr: f64) {
        self.adam.t += 1;
        let t = self.adam.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for k in 0..p.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        };
        for group in ParamGroup::ALL.into_iter().skip(1) {
            update(
                self.params.get_mut(group),
                self.adam.m.get_mut(group),
                self.adam.v.get_mut(group),
                grads.get(group),
            );
        }
        // Lazy update: only rows that appeared in the batch move.
        let d = self.cfg.dim;
        for (&t, g) in emb_grads {
            let r = t * d..(t + 1) * d;
            update(
                &mut self.params.emb[r.clone()],
                &mut self.adam.m.emb[r.clone()],
                &mut self.adam.v.emb[r],
                g,
            );
        }
    }

    /// Writes all parameter tensors; optimizer moments are not saved.
    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            self.vocab_size as u64,
            self.n_labels as u64,
            self.cfg.dim as u64,
            self.cfg.context_dim as u64,
            self.cfg.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.cfg.init_scale.to_le_bytes())?;
        w.write_all(&(ParamGroup::ALL.len() as u32).to_le_bytes())?;
        for g in ParamGroup::ALL {
            let name = g.name().as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let shape = self.shape(g);
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for s in shape {
                w.write_all(&(s as u64).to_le_bytes())?;
            }
            for x in self.params.get(g) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let mut r = BufReader::new(File::open(path)?);
        let bad = |m: &str| PredictorError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(PredictorError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let vocab_size = read_u64(&mut r)? as usize;
        let n_labels = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let context_dim = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let init_scale = f64::from_le_bytes(read_array(&mut r)?);
        if vocab_size == 0 || n_labels == 0 || dim == 0 || context_dim == 0 {
            return Err(bad("zero dimension"));
        }
        let cfg = PredictorConfig {
            dim,
            context_dim,
            init_scale,
            seed,
        };
        let mut model = AttentionClassifier::new(vocab_size, n_labels, cfg);
        let count = read_u32(&mut r)? as usize;
        if count != ParamGroup::ALL.len() {
            return Err(bad("unexpected tensor count"));
        }
        for g in ParamGroup::ALL {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            if name != g.name().as_bytes() {
                return Err(PredictorError::Checkpoint(format!(
                    "expected tensor {}, found {}",
                    g.name(),
                    String::from_utf8_lossy(&name)
                )));
            }
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if shape != model.shape(g) {
                return Err(PredictorError::Checkpoint(format!(
                    "shape mismatch for {}",
                    g.name()
                )));
            }
            for x in model.params.get_mut(g).iter_mut() {
                *x = f64::from_le_bytes(read_array(&mut r)?);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    fn shape(&self, g: ParamGroup) -> Vec<usize> {
        let (d, c, nl) = (self.cfg.dim, self.cfg.context_dim, self.n_labels);
        match g {
            ParamGroup::Embeddings => vec![self.vocab_size, d],
            ParamGroup::AttentionWeight => vec![c, d],
            ParamGroup::AttentionBias | ParamGroup::Context => vec![c],
            ParamGroup::Output => vec![nl, d],
            ParamGroup::OutputBias => vec![nl],
        }
    }

    /// True when every parameter matches `other` bit for bit.
    pub fn same_parameters(&self, other: &AttentionClassifier) -> bool {
        ParamGroup::ALL.iter().all(|&g| {
            let (a, b) = (self.params.get(g), other.params.get(g));
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], PredictorError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32, PredictorError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64, PredictorError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

impl Predictor for AttentionClassifier {
    fn n_labels(&self) -> usize {
        self.n_labels
    }

    fn predict(&self, x: &Instance) -> Vec<f64> {
        self.forward(x).log_probs.iter().map(|l| l.exp()).collect()
    }

    fn attention(&self, x: &Instance) -> Vec<f64> {
        self.forward(x).attention
    }

    fn embed(&self, x: &Instance) -> Vec<f64> {
        self.forward(x).z
    }

    fn save_checkpoint(&self, path: &Path) -> Result<(), PredictorError> {
        self.save(path)
    }

    fn train(
        &mut self,
        corpus: &Corpus,
        targets: &ProbabilisticLabelSet,
        opts: &TrainOptions,
    ) -> Result<TrainReport, PredictorError> {
        if targets.n_labels() != self.n_labels {
            return Err(PredictorError::Shape(format!(
                "targets have {} labels, model has {}",
                targets.n_labels(),
                self.n_labels
            )));
        }
        if let Some(&bad) = targets.ids().iter().find(|&&i| i >= corpus.len()) {
            return Err(PredictorError::Shape(format!(
                "target instance {bad} is out of range"
            )));
        }
        if opts.reset_optimizer {
            self.reset_optimizer();
        }
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        let mut order: Vec<usize> = (0..targets.len()).collect();
        let batch = opts.batch_size.max(1);
        for epoch in 0..opts.epochs {
            order.shuffle(&mut self.shuffle);
            let mut sum = 0.0;
            for (b, chunk) in order.chunks(batch).enumerate() {
                let mut grads = self.params.zeros_like();
                grads.emb = Vec::new();
                let mut emb = HashMap::new();
                let scale = 1.0 / chunk.len() as f64;
                let mut loss = 0.0;
                for &k in chunk {
                    let x = corpus.instance(targets.ids()[k]);
                    loss += self.backward(x, targets.probs().row(k), scale, &mut grads, &mut emb);
                }
                let loss = loss * scale;
                if !loss.is_finite() {
                    return Err(PredictorError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        loss,
                    });
                }
                sum += loss * chunk.len() as f64;
                self.adam_step(&grads, &emb, opts.learning_rate);
            }
            epoch_losses.push(sum / targets.len().max(1) as f64);
        }
        let final_loss = self.loss(corpus, targets);
        if !final_loss.is_finite() {
            return Err(PredictorError::NonFiniteLoss {
                epoch: opts.epochs,
                batch: 0,
                loss: final_loss,
            });
        }
        Ok(TrainReport {
            epoch_losses,
            final_loss,
        })
    }
}
