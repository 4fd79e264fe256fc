//! Manifest (JSON lines) and binary feature file formats.
//!
//! Feature file, little-endian:
//! - magic `BKDB`
//! - version: u32 (= 1)
//! - count: u32, dim: u32
//! - count * dim f32 values, row-major
//!
//! The sidecar `<features>.index` lists one image id per line in row order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Corpus, CorpusRecord, FeatureTable, ManifestRecord, Vocabulary};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"BKDB";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn sidecar_index_path(features_path: impl AsRef<Path>) -> PathBuf {
    let mut p = features_path.as_ref().as_os_str().to_owned();
    p.push(".index");
    PathBuf::from(p)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("manifest line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_features(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    let path = path.as_ref();
    let count = u32::try_from(table.len()).map_err(|_| Error::InvalidArgument("too many feature rows".into()))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + table.values.len() * 4);
    bytes.extend_from_slice(&FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&count.to_le_bytes());
    bytes.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for v in &table.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;

    let mut index = String::new();
    for id in table.ids() {
        index.push_str(id);
        index.push('\n');
    }
    fs::write(sidecar_index_path(path), index)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Malformed("feature file shorter than its header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic { expected: FEATURE_MAGIC, found: magic });
    }
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: FEATURE_VERSION });
    }
    let count = word(8) as usize;
    let dim = word(12) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * dim * 4 {
        return Err(Error::FeatureCountMismatch {
            expected: count,
            found: (body.len() / 4).checked_div(dim).unwrap_or(0),
        });
    }

    let index = fs::read_to_string(sidecar_index_path(path))?;
    let ids: Vec<&str> = index.lines().collect();
    if ids.len() != count {
        return Err(Error::FeatureCountMismatch { expected: count, found: ids.len() });
    }

    let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut table = FeatureTable::new(dim);
    for (i, id) in ids.into_iter().enumerate() {
        table.insert(id, &values[i * dim..(i + 1) * dim])?;
    }
    Ok(table)
}

/// Writes captions as text (via `vocab`) to the manifest and features to the
/// binary file plus its sidecar index.
pub fn save_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
    manifest_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
) -> Result<()> {
    let manifest = corpus
        .records
        .iter()
        .map(|r| {
            Ok(ManifestRecord { image_id: r.image_id.clone(), stars: r.stars, caption: vocab.detokenize(&r.caption)? })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(manifest_path, &manifest)?;
    write_features(features_path, &corpus.features)
}

pub fn load_corpus(
    manifest_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<Corpus> {
    let features = read_features(features_path)?;
    let records = read_manifest(manifest_path)?
        .into_iter()
        .map(|m| CorpusRecord::new(m.image_id, vocab.tokenize(&m.caption), m.stars))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(records, features)
}
