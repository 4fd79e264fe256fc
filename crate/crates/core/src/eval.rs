//! Evaluation: per-bucket perplexity, model-score ranking of candidate
//! captions, and a policy-by-seed experiment driver.
//!
//! These are machine proxies for human funniness judgments. They measure how
//! probable the model finds captions from each star bucket, nothing more.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::caption_score;
use crate::corpus::{Corpus, SyntheticConfig, SyntheticCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::funny_score::{FunnyScorePolicy, PolicyMode, DEFAULT_THRESHOLD};
use crate::trainer::{train, Checkpoint, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketEval {
    pub records: usize,
    /// Predicted token positions (EOS included).
    pub tokens: usize,
    /// Mean cross-entropy per predicted token.
    pub mean_loss: f64,
    /// `exp(mean_loss)`
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub policy: FunnyScorePolicy,
    pub threshold: u32,
    pub n_low: usize,
    pub n_high: usize,
    /// `None` when no record falls below the threshold.
    pub low: Option<BucketEval>,
    pub high: Option<BucketEval>,
}

/// Token-weighted loss and perplexity on each side of `threshold`.
pub fn eval_buckets(ckpt: &Checkpoint, corpus: &Corpus, threshold: u32) -> Result<EvalReport> {
    // (records, tokens, summed loss)
    let mut acc = [(0usize, 0usize, 0.0f64); 2];
    for r in &corpus.records {
        let f = corpus.features.get_f64(&r.image_id).ok_or_else(|| Error::DanglingImageId(r.image_id.clone()))?;
        let s = caption_score(&f, &r.caption, &ckpt.params)?;
        let a = &mut acc[usize::from(r.stars >= threshold)];
        a.0 += 1;
        a.1 += s.predicted;
        a.2 += s.loss * s.predicted as f64;
    }
    let bucket = |(records, tokens, sum): (usize, usize, f64)| {
        (records > 0).then(|| {
            let mean_loss = sum / tokens as f64;
            BucketEval { records, tokens, mean_loss, perplexity: mean_loss.exp() }
        })
    };
    Ok(EvalReport {
        model_id: ckpt.model_id(),
        policy: ckpt.config.policy,
        threshold,
        n_low: acc[0].0,
        n_high: acc[1].0,
        low: bucket(acc[0]),
        high: bucket(acc[1]),
    })
}

/// Splits by image so no image appears on both sides. The held-out side gets
/// `round(frac · images)` images, at least one when `frac > 0`.
pub fn split_by_image(corpus: &Corpus, held_out_frac: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(0.0..1.0).contains(&held_out_frac) {
        return Err(Error::InvalidArgument("held-out fraction must lie in [0, 1)".into()));
    }
    let mut ids = corpus.image_ids();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_test = (held_out_frac * ids.len() as f64).round() as usize;
    if held_out_frac > 0.0 {
        n_test = n_test.clamp(1, ids.len().saturating_sub(1));
    }
    let test: HashSet<&str> = ids[..n_test].iter().copied().collect();
    let train: HashSet<&str> = ids[n_test..].iter().copied().collect();
    Ok((corpus.subset_images(&train), corpus.subset_images(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    /// Position in the input list.
    pub index: usize,
    pub caption: String,
    pub log_prob: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    /// Best first.
    pub ranked: Vec<RankedCandidate>,
}

impl RankingResult {
    /// 0-based rank of the input candidate at `index`.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.ranked.iter().position(|c| c.index == index)
    }
}

/// Orders candidate captions for one image by model log-probability,
/// ties broken by caption text.
pub fn rank_candidates<S: AsRef<str>>(ckpt: &Checkpoint, features: &[f64], candidates: &[S]) -> Result<RankingResult> {
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least two candidates".into()));
    }
    let mut ranked = candidates
        .iter()
        .enumerate()
        .map(|(index, text)| {
            let s = caption_score(features, &ckpt.vocab.tokenize(text.as_ref()), &ckpt.params)?;
            Ok(RankedCandidate {
                index,
                caption: text.as_ref().to_owned(),
                log_prob: s.log_prob,
                perplexity: s.perplexity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.log_prob.total_cmp(&a.log_prob).then_with(|| a.caption.cmp(&b.caption)).then_with(|| a.index.cmp(&b.index))
    });
    Ok(RankingResult { ranked })
}

/// Policies × seeds over synthetic corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub corpus: SyntheticConfig,
    pub training: TrainingConfig,
    pub policies: Vec<FunnyScorePolicy>,
    pub seeds: Vec<u64>,
    pub held_out_frac: f64,
    pub threshold: u32,
    /// Regenerate the corpus from each cell's seed instead of `corpus.seed`.
    pub corpus_per_seed: bool,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            corpus: SyntheticConfig::default(),
            training: TrainingConfig::default(),
            policies: vec![FunnyScorePolicy::uniform(), FunnyScorePolicy::weighted(2.0, 1.0)],
            seeds: vec![0],
            held_out_frac: 0.1,
            threshold: DEFAULT_THRESHOLD,
            corpus_per_seed: true,
        }
    }
}

pub fn policy_label(p: &FunnyScorePolicy) -> String {
    match p.mode {
        PolicyMode::Uniform => "uniform".into(),
        PolicyMode::LiteralOffset => format!("literal(t={},d={})", p.threshold, p.offset),
        PolicyMode::Weighted => format!("weighted(t={},hi={},lo={})", p.threshold, p.w_high, p.w_low),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell_id: String,
    pub policy: FunnyScorePolicy,
    pub seed: u64,
    pub final_train_loss: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub cells: usize,
    pub mean_high_perplexity: Option<f64>,
    pub mean_low_perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub rows: Vec<CellResult>,
    pub policies: Vec<PolicySummary>,
}

/// Train/held-out corpora and the training vocabulary for one seed.
pub fn prepare_data(grid: &ExperimentGrid, seed: u64) -> Result<(Vocabulary, Corpus, Corpus)> {
    let mut cfg = grid.corpus.clone();
    if grid.corpus_per_seed {
        cfg.seed = seed;
    }
    let synth = SyntheticCorpus::generate(&cfg)?;
    let (train_c, test_c) = split_by_image(&synth.corpus, grid.held_out_frac, cfg.seed)?;
    let texts = train_c.records.iter().map(|r| synth.vocab.detokenize(&r.caption)).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::build_from_texts(&texts, grid.training.min_freq)?;
    let train_c = train_c.reencode(&synth.vocab, &vocab)?;
    let test_c = test_c.reencode(&synth.vocab, &vocab)?;
    Ok((vocab, train_c, test_c))
}

/// Trains and evaluates one (policy, seed) cell. Depends only on its inputs.
pub fn run_cell(grid: &ExperimentGrid, policy: &FunnyScorePolicy, seed: u64) -> Result<CellResult> {
    let cell_id = format!("{}/seed={seed}", policy_label(policy));
    let wrap = |e: Error| Error::Cell { cell: cell_id.clone(), source: Box::new(e) };
    let (vocab, train_c, test_c) = prepare_data(grid, seed).map_err(wrap)?;
    let config = TrainingConfig { seed, policy: *policy, feature_dim: train_c.dim(), ..grid.training.clone() };
    let (ckpt, log) = train(config, vocab, &train_c).map_err(wrap)?;
    let report = eval_buckets(&ckpt, &test_c, grid.threshold).map_err(wrap)?;
    Ok(CellResult {
        cell_id: cell_id.clone(),
        policy: *policy,
        seed,
        final_train_loss: log.last().map(|m| m.loss),
        report,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_experiment(grid: &ExperimentGrid) -> Result<ExperimentSummary> {
    if grid.policies.is_empty() || grid.seeds.is_empty() {
        return Err(Error::InvalidArgument("experiment grid needs policies and seeds".into()));
    }
    for p in &grid.policies {
        p.validate()?;
    }
    let mut rows = Vec::with_capacity(grid.policies.len() * grid.seeds.len());
    for policy in &grid.policies {
        for &seed in &grid.seeds {
            rows.push(run_cell(grid, policy, seed)?);
        }
    }
    let policies = grid
        .policies
        .iter()
        .map(|p| {
            let cells: Vec<&CellResult> = rows.iter().filter(|r| r.policy == *p).collect();
            PolicySummary {
                policy: policy_label(p),
                cells: cells.len(),
                mean_high_perplexity: mean(cells.iter().filter_map(|c| c.report.high.map(|b| b.perplexity))),
                mean_low_perplexity: mean(cells.iter().filter_map(|c| c.report.low.map(|b| b.perplexity))),
            }
        })
        .collect();
    Ok(ExperimentSummary { rows, policies })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl ExperimentSummary {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<36} {:>8} {:>10} {:>10}", "cell", "n_high", "ppl_high", "ppl_low");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<36} {:>8} {:>10} {:>10}",
                r.cell_id,
                r.report.n_high,
                fmt_opt(r.report.high.map(|b| b.perplexity)),
                fmt_opt(r.report.low.map(|b| b.perplexity)),
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<36} {:>8} {:>10} {:>10}", "policy (mean)", "cells", "ppl_high", "ppl_low");
        for p in &self.policies {
            let _ = writeln!(
                s,
                "{:<36} {:>8} {:>10} {:>10}",
                p.policy,
                p.cells,
                fmt_opt(p.mean_high_perplexity),
                fmt_opt(p.mean_low_perplexity),
            );
        }
        s.push_str("\nPerplexities are model-likelihood proxies, not human funniness ratings.\n");
        s
    }

    /// Pairs cells by seed and counts seeds where `a` has the lower
    /// high-bucket perplexity. Returns `(wins, pairs)`.
    pub fn paired_high_wins(&self, a: &FunnyScorePolicy, b: &FunnyScorePolicy) -> (usize, usize) {
        let mut wins = 0;
        let mut pairs = 0;
        for ra in self.rows.iter().filter(|r| r.policy == *a) {
            let rb = self.rows.iter().find(|r| r.policy == *b && r.seed == ra.seed);
            if let (Some(ha), Some(hb)) = (ra.report.high, rb.and_then(|r| r.report.high)) {
                pairs += 1;
                if ha.perplexity.partial_cmp(&hb.perplexity) == Some(Ordering::Less) {
                    wins += 1;
                }
            }
        }
        (wins, pairs)
    }
}
