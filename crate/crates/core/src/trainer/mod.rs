//! Deterministic minibatch training: shuffle, forward, policy loss,
//! backward, global-norm clipping, Adam.
//!
//! Everything random is derived from `config.seed`: weight init uses stream 0
//! of a ChaCha8 generator and the shuffle for epoch `e` uses stream `e + 1`,
//! so the position in training is fully described by the step counter.

mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{backward, Batch, Example, ModelDims, ModelParams};
use crate::corpus::{Corpus, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::funny_score::FunnyScorePolicy;
use crate::nn::{clip_global_norm, AdamConfig, AdamState};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub policy: FunnyScorePolicy,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub min_freq: usize,
    /// Longest caption in ids, BOS and EOS included. Longer ones are cut and
    /// re-terminated with EOS.
    pub max_caption_len: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: Some(DEFAULT_CLIP_NORM),
            policy: FunnyScorePolicy::uniform(),
            feature_dim: 16,
            embed_dim: 128,
            hidden_dim: 128,
            min_freq: 1,
            max_caption_len: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.feature_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if matches!(self.max_caption_len, Some(n) if n < 2) {
            return bad("max_caption_len must be at least 2".into());
        }
        let a = self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam hyperparameters {a:?}"));
        }
        self.policy.validate()
    }

    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims::new(self.feature_dim, self.embed_dim, self.hidden_dim, vocab_size)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub n_high: usize,
    pub n_low: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Seconds since this trainer was created.
    pub wallclock: f64,
}

fn truncate_caption(caption: &[u32], max_len: Option<usize>) -> Vec<u32> {
    match max_len {
        Some(n) if caption.len() > n => {
            let mut c = caption[..n - 1].to_vec();
            c.push(EOS);
            c
        }
        _ => caption.to_vec(),
    }
}

pub struct Trainer<'a> {
    config: TrainingConfig,
    vocab: Vocabulary,
    corpus: &'a Corpus,
    params: ModelParams,
    adam: AdamState,
    step: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainingConfig, vocab: Vocabulary, corpus: &'a Corpus) -> Result<Self> {
        config.validate()?;
        let dims = config.dims(vocab.len());
        dims.validate()?;
        let params = ModelParams::init(dims, config.seed);
        let adam = AdamState::new(config.adam, &params.tensors());
        Self::assemble(config, vocab, corpus, params, adam, 0)
    }

    /// Continues from a checkpoint; `corpus` must be the one it was trained on.
    pub fn resume(ckpt: Checkpoint, corpus: &'a Corpus) -> Result<Self> {
        if ckpt.n_records != corpus.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained on {} records, corpus has {}",
                ckpt.n_records,
                corpus.len()
            )));
        }
        Self::assemble(ckpt.config, ckpt.vocab, corpus, ckpt.params, ckpt.adam, ckpt.step)
    }

    fn assemble(
        config: TrainingConfig,
        vocab: Vocabulary,
        corpus: &'a Corpus,
        params: ModelParams,
        adam: AdamState,
        step: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if corpus.dim() != config.feature_dim {
            return Err(Error::DimensionMismatch { expected: config.feature_dim, found: corpus.dim() });
        }
        if let Some(&bad) = corpus.records.iter().flat_map(|r| &r.caption).find(|&&t| t as usize >= vocab.len()) {
            return Err(Error::UnknownId(bad));
        }
        params.validate()?;
        Ok(Self { config, vocab, corpus, params, adam, step, epoch_order: None, started: Instant::now() })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.corpus.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn order_for(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch + 1);
            let mut order: Vec<usize> = (0..self.corpus.len()).collect();
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        &self.epoch_order.as_ref().unwrap().1
    }

    fn batch_for_step(&mut self, step: u64) -> Batch {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let bs = self.config.batch_size;
        let max_len = self.config.max_caption_len;
        let corpus = self.corpus;
        let order = self.order_for(epoch);
        let idx = &order[k * bs..((k + 1) * bs).min(order.len())];
        let examples = idx
            .iter()
            .map(|&i| {
                let r = &corpus.records[i];
                Example {
                    features: corpus.features.get_f64(&r.image_id).expect("validated corpus"),
                    caption: truncate_caption(&r.caption, max_len),
                    stars: r.stars,
                }
            })
            .collect();
        Batch::from_examples(examples)
    }

    /// One optimizer step on the next minibatch.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let batch = self.batch_for_step(step);
        let mut out = backward(&self.params, &batch, &self.config.policy)?;
        if !out.report.batch_loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut out.grads.tensors_mut(), c),
            None => out.grads.global_norm(),
        };
        let grads = out.grads.tensors();
        match self.adam.step(&mut self.params.tensors_mut(), &grads) {
            Err(Error::NonFiniteGradient) => return Err(Error::Divergence { step }),
            other => other?,
        }
        self.step += 1;
        Ok(MetricsRecord {
            step,
            epoch: step / self.steps_per_epoch(),
            loss: out.report.batch_loss,
            n_high: out.report.n_high,
            n_low: out.report.n_low,
            grad_norm,
            wallclock: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs up to `max_steps` more steps, stopping early at the end of the
    /// configured epochs.
    pub fn run_steps(&mut self, max_steps: u64) -> Result<Vec<MetricsRecord>> {
        let mut log = Vec::new();
        for _ in 0..max_steps {
            if self.is_done() {
                break;
            }
            log.push(self.step()?);
        }
        Ok(log)
    }

    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        self.run_steps(u64::MAX)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            n_records: self.corpus.len(),
            rng: RngState { seed: self.config.seed, stream: self.step / self.steps_per_epoch() + 1 },
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint()
    }
}

/// Trains for `config.epochs` full epochs.
pub fn train(config: TrainingConfig, vocab: Vocabulary, corpus: &Corpus) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(config, vocab, corpus)?;
    let log = t.run()?;
    Ok((t.into_checkpoint(), log))
}

/// Line-delimited JSON metrics log.
pub fn write_metrics(path: impl AsRef<std::path::Path>, log: &[MetricsRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
