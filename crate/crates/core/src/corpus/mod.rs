//! Caption corpora: vocabulary, records, on-disk formats and a seeded
//! synthetic generator.

mod format;
mod synthetic;
mod vocab;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    load_corpus, read_features, read_manifest, save_corpus, sidecar_index_path, write_features, write_manifest,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus, DEFAULT_CAPTIONS_PER_IMAGE};
pub use vocab::{split_tokens, Vocabulary, BOS, EOS, NUM_SPECIAL, PAD, SPECIAL_TOKENS, UNK};

/// One caption for one image, with its star count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub image_id: String,
    /// `BOS, .., EOS`; never contains PAD.
    pub caption: Vec<u32>,
    pub stars: u32,
}

impl CorpusRecord {
    pub fn new(image_id: impl Into<String>, caption: Vec<u32>, stars: u32) -> Result<Self> {
        validate_caption(&caption)?;
        Ok(Self { image_id: image_id.into(), caption, stars })
    }

    pub fn is_high(&self, threshold: u32) -> bool {
        self.stars >= threshold
    }
}

pub(crate) fn validate_caption(caption: &[u32]) -> Result<()> {
    if caption.len() < 2 {
        return Err(Error::InvalidCaption(format!("caption has {} ids, need at least BOS and EOS", caption.len())));
    }
    if caption[0] != BOS || caption[caption.len() - 1] != EOS {
        return Err(Error::InvalidCaption("caption must start with BOS and end with EOS".into()));
    }
    if caption.contains(&PAD) {
        return Err(Error::InvalidCaption("PAD inside caption".into()));
    }
    Ok(())
}

/// The line-per-caption text form used by manifest files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub stars: u32,
    pub caption: String,
}

/// Fixed-dimension feature rows keyed by image id, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: row.len() });
        }
        let image_id = image_id.into();
        if self.index.contains_key(&image_id) {
            return Err(Error::Malformed(format!("duplicate feature row for {image_id:?}")));
        }
        self.index.insert(image_id.clone(), self.ids.len());
        self.ids.push(image_id);
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Image ids in row order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.index.get(image_id).map(|&i| self.row(i))
    }

    /// Widened copy of a row, as consumed by the model.
    pub fn get_f64(&self, image_id: &str) -> Option<Vec<f64>> {
        self.get(image_id).map(|r| r.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }
}

/// Records plus the feature rows they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub features: FeatureTable,
}

impl Corpus {
    pub fn new(records: Vec<CorpusRecord>, features: FeatureTable) -> Result<Self> {
        for r in &records {
            validate_caption(&r.caption)?;
            if !features.contains(&r.image_id) {
                return Err(Error::DanglingImageId(r.image_id.clone()));
            }
        }
        Ok(Self { records, features })
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct image ids referenced by records, in first-appearance order.
    pub fn image_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records.iter().map(|r| r.image_id.as_str()).filter(|id| seen.insert(*id)).collect()
    }

    /// Records whose image is in `keep`, with only those feature rows.
    pub fn subset_images(&self, keep: &HashSet<&str>) -> Corpus {
        let mut features = FeatureTable::new(self.dim());
        for id in self.features.ids() {
            if keep.contains(id.as_str()) {
                features.insert(id.clone(), self.features.get(id).unwrap()).unwrap();
            }
        }
        let records = self.records.iter().filter(|r| keep.contains(r.image_id.as_str())).cloned().collect();
        Corpus { records, features }
    }

    /// Re-encodes every record with another vocabulary.
    pub fn reencode(&self, from: &Vocabulary, to: &Vocabulary) -> Result<Corpus> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let text = from.detokenize(&r.caption)?;
                CorpusRecord::new(r.image_id.clone(), to.tokenize(&text), r.stars)
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { records, features: self.features.clone() })
    }
}
