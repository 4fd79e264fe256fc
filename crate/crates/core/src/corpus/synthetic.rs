//! Seeded synthetic corpus with two planted caption distributions.
//!
//! High-star records (stars >= 100) draw tokens from distribution A, the rest
//! from distribution B. Both are Zipf-shaped over a shared lexicon; A puts
//! most of its mass on the first half of the lexicon and B on the second.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusRecord, FeatureTable, ManifestRecord, Vocabulary};
use crate::error::{Error, Result};

/// 999,571 captions over 70,981 images is about 14.08 captions per image.
pub const DEFAULT_CAPTIONS_PER_IMAGE: usize = 14;

/// Star count separating the two planted distributions.
const PLANTED_THRESHOLD: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_images: usize,
    pub captions_per_image: usize,
    pub dim: usize,
    pub frac_high: f64,
    /// Lexicon size; split evenly between the two planted distributions.
    pub lexicon_size: usize,
    pub min_caption_tokens: usize,
    pub max_caption_tokens: usize,
    /// Share of each distribution's mass on its own half of the lexicon.
    pub planted_mass: f64,
    /// Success probability of the geometric tail added to 100 for high records.
    pub star_tail_p: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 100,
            captions_per_image: DEFAULT_CAPTIONS_PER_IMAGE,
            dim: 16,
            frac_high: 0.05,
            lexicon_size: 40,
            min_caption_tokens: 3,
            max_caption_tokens: 8,
            planted_mass: 0.9,
            star_tail_p: 0.02,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_images == 0 || self.captions_per_image == 0 || self.dim == 0 {
            return bad("image count, captions per image and dim must all be at least 1");
        }
        if !(0.0..=1.0).contains(&self.frac_high) {
            return bad("frac_high must lie in [0, 1]");
        }
        if self.lexicon_size < 2 || !self.lexicon_size.is_multiple_of(2) {
            return bad("lexicon_size must be even and at least 2");
        }
        if self.min_caption_tokens == 0 || self.min_caption_tokens > self.max_caption_tokens {
            return bad("caption length range is empty");
        }
        if !(0.0..=1.0).contains(&self.planted_mass) {
            return bad("planted_mass must lie in [0, 1]");
        }
        if !(self.star_tail_p > 0.0 && self.star_tail_p <= 1.0) {
            return bad("star_tail_p must lie in (0, 1]");
        }
        Ok(())
    }

    fn lexicon(&self) -> Vec<String> {
        let width = (self.lexicon_size - 1).to_string().len().max(2);
        (0..self.lexicon_size).map(|i| format!("w{i:0width$}")).collect()
    }

    /// Token weights for one planted distribution; `first_half` selects A.
    fn planted_weights(&self, first_half: bool) -> Vec<f64> {
        let half = self.lexicon_size / 2;
        let zipf: Vec<f64> = (0..half).map(|k| 1.0 / (k + 1) as f64).collect();
        let z: f64 = zipf.iter().sum();
        let own = zipf.iter().map(|w| self.planted_mass * w / z);
        let other = zipf.iter().map(|w| (1.0 - self.planted_mass) * w / z);
        if first_half {
            own.chain(other).collect()
        } else {
            other.chain(own).collect()
        }
    }
}

/// Generator output: encoded corpus, the vocabulary built over all texts,
/// and the text form of every record (aligned with `corpus.records`).
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub manifest: Vec<ManifestRecord>,
}

impl SyntheticCorpus {
    pub fn texts(&self) -> Vec<&str> {
        self.manifest.iter().map(|m| m.caption.as_str()).collect()
    }

    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let lexicon = config.lexicon();
        let dist_high =
            WeightedIndex::new(config.planted_weights(true)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let dist_low =
            WeightedIndex::new(config.planted_weights(false)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let tail = Geometric::new(config.star_tail_p).map_err(|e| Error::InvalidArgument(e.to_string()))?;

        let mut features = FeatureTable::new(config.dim);
        let mut manifest = Vec::with_capacity(config.n_images * config.captions_per_image);
        let width = config.n_images.saturating_sub(1).to_string().len().max(6);
        for img in 0..config.n_images {
            let image_id = format!("img{img:0width$}");
            let row: Vec<f32> = (0..config.dim).map(|_| rng.sample(StandardNormal)).collect();
            features.insert(image_id.clone(), &row)?;

            for _ in 0..config.captions_per_image {
                let high = rng.random::<f64>() < config.frac_high;
                let stars = if high {
                    let extra = u32::try_from(tail.sample(&mut rng)).unwrap_or(u32::MAX - PLANTED_THRESHOLD);
                    PLANTED_THRESHOLD.saturating_add(extra)
                } else {
                    rng.random_range(0..PLANTED_THRESHOLD)
                };
                let n_tokens = rng.random_range(config.min_caption_tokens..=config.max_caption_tokens);
                let dist = if high { &dist_high } else { &dist_low };
                let caption =
                    (0..n_tokens).map(|_| lexicon[dist.sample(&mut rng)].as_str()).collect::<Vec<_>>().join(" ");
                manifest.push(ManifestRecord { image_id: image_id.clone(), stars, caption });
            }
        }

        let texts: Vec<&str> = manifest.iter().map(|m| m.caption.as_str()).collect();
        let vocab = Vocabulary::build_from_texts(&texts, 1)?;
        let records = manifest
            .iter()
            .map(|m| CorpusRecord::new(m.image_id.clone(), vocab.tokenize(&m.caption), m.stars))
            .collect::<Result<Vec<_>>>()?;
        let corpus = Corpus::new(records, features)?;
        Ok(Self { config: config.clone(), corpus, vocab, manifest })
    }
}

/// Generator with default shape parameters.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_images: usize,
    captions_per_image: usize,
    dim: usize,
    frac_high: f64,
) -> Result<SyntheticCorpus> {
    SyntheticCorpus::generate(&SyntheticConfig {
        seed,
        n_images,
        captions_per_image,
        dim,
        frac_high,
        ..SyntheticConfig::default()
    })
}
