//! Star-thresholded loss policy.
//!
//! A caption at or above the star threshold counts as "high". The literal
//! rule keeps a caption's loss `L` below the threshold and returns `L - 1.0`
//! at or above it. Because that offset is a constant it has no effect on
//! gradients, so a multiplicative variant is provided as well.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: u32 = 100;
pub const DEFAULT_OFFSET: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Uniform,
    LiteralOffset,
    Weighted,
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyMode::Uniform => "uniform",
            PolicyMode::LiteralOffset => "literal",
            PolicyMode::Weighted => "weighted",
        })
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PolicyMode::Uniform),
            "literal" | "literal_offset" => Ok(PolicyMode::LiteralOffset),
            "weighted" => Ok(PolicyMode::Weighted),
            other => Err(Error::InvalidArgument(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunnyScorePolicy {
    pub mode: PolicyMode,
    /// Stars at or above this are "high".
    pub threshold: u32,
    pub offset: f64,
    pub w_high: f64,
    pub w_low: f64,
}

impl Default for FunnyScorePolicy {
    fn default() -> Self {
        Self::uniform()
    }
}

impl FunnyScorePolicy {
    pub fn uniform() -> Self {
        Self {
            mode: PolicyMode::Uniform,
            threshold: DEFAULT_THRESHOLD,
            offset: DEFAULT_OFFSET,
            w_high: 2.0,
            w_low: 1.0,
        }
    }

    pub fn literal() -> Self {
        Self { mode: PolicyMode::LiteralOffset, ..Self::uniform() }
    }

    pub fn weighted(w_high: f64, w_low: f64) -> Self {
        Self { mode: PolicyMode::Weighted, w_high, w_low, ..Self::uniform() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return Err(Error::InvalidArgument("offset must be finite and >= 0".into()));
        }
        if !(self.w_high > 0.0 && self.w_low > 0.0 && self.w_high.is_finite() && self.w_low.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn is_high(&self, stars: u32) -> bool {
        stars >= self.threshold
    }

    fn weight(&self, stars: u32) -> f64 {
        if self.is_high(stars) {
            self.w_high
        } else {
            self.w_low
        }
    }

    /// Per-example loss under this policy.
    pub fn example_transform(&self, loss: f64, stars: u32) -> f64 {
        match self.mode {
            PolicyMode::Uniform => loss,
            PolicyMode::LiteralOffset if self.is_high(stars) => loss - self.offset,
            PolicyMode::LiteralOffset => loss,
            PolicyMode::Weighted => self.weight(stars) * loss,
        }
    }

    /// Weighted mode with equal weights is the plain mean.
    fn is_plain_mean(&self) -> bool {
        self.mode != PolicyMode::Weighted || self.w_high == self.w_low
    }

    /// `∂ batch_loss / ∂ L_i` for every example. Uniform and literal share one
    /// code path, so their coefficients are bitwise equal.
    pub fn coefficients(&self, stars: &[u32]) -> Result<Vec<f64>> {
        if stars.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(match self.mode {
            _ if self.is_plain_mean() => {
                let c = 1.0 / stars.len() as f64;
                vec![c; stars.len()]
            }
            _ => {
                let total: f64 = stars.iter().map(|&s| self.weight(s)).sum();
                stars.iter().map(|&s| self.weight(s) / total).collect()
            }
        })
    }

    /// Combines per-example losses into the batch objective: the mean of
    /// transformed losses, or `Σ wᵢLᵢ / Σ wᵢ` in weighted mode.
    pub fn batch_loss(&self, losses: &[f64], stars: &[u32]) -> Result<BatchLossReport> {
        if losses.len() != stars.len() {
            return Err(Error::Shape(format!("{} losses for {} star counts", losses.len(), stars.len())));
        }
        if losses.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = losses.len() as f64;
        let batch_loss = match self.mode {
            PolicyMode::Uniform | PolicyMode::LiteralOffset => {
                losses.iter().zip(stars).map(|(&l, &s)| self.example_transform(l, s)).sum::<f64>() / n
            }
            PolicyMode::Weighted if self.is_plain_mean() => losses.iter().sum::<f64>() / n,
            PolicyMode::Weighted => {
                let num: f64 = losses.iter().zip(stars).map(|(&l, &s)| self.weight(s) * l).sum();
                let den: f64 = stars.iter().map(|&s| self.weight(s)).sum();
                num / den
            }
        };
        let n_high = stars.iter().filter(|&&s| self.is_high(s)).count();
        Ok(BatchLossReport {
            per_example_losses: losses.to_vec(),
            stars: stars.to_vec(),
            batch_loss,
            n_high,
            n_low: stars.len() - n_high,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub per_example_losses: Vec<f64>,
    pub stars: Vec<u32>,
    pub batch_loss: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// Record count and mean stars for one side of the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    /// `None` when the bucket is empty.
    pub mean_stars: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub threshold: u32,
    pub low: Bucket,
    pub high: Bucket,
}

pub fn bucket_stats(corpus: &Corpus, threshold: u32) -> Result<BucketStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut low, mut high) = ((0usize, 0u64), (0usize, 0u64));
    for r in &corpus.records {
        let b = if r.stars >= threshold { &mut high } else { &mut low };
        b.0 += 1;
        b.1 += u64::from(r.stars);
    }
    let bucket =
        |(count, sum): (usize, u64)| Bucket { count, mean_stars: (count > 0).then(|| sum as f64 / count as f64) };
    Ok(BucketStats { threshold, low: bucket(low), high: bucket(high) })
}
