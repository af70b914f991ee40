//! Directory archives for block term decompositions.
//!
//! An archive directory holds `meta.json` plus one `GBT1` file per core and
//! present factor: `core_<r>.gbt` and `factor_<r>_<n>.gbt`, with `r` and `n`
//! counted from 1. `meta.json` records a SHA-256 digest of every tensor file
//! so that corrupted payloads are rejected on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::term::{BlockTermDecomp, ModeRank, TuckerTerm};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{DenseTensor, FactorMatrix};

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    #[serde(rename = "R")]
    pub terms: usize,
    pub rank_signature: Vec<ModeRank>,
    pub target_shape: Vec<usize>,
    pub error_trace: Vec<f64>,
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
}

pub fn core_file(term: usize) -> String {
    format!("core_{}.gbt", term + 1)
}

pub fn factor_file(term: usize, mode: usize) -> String {
    format!("factor_{}_{}.gbt", term + 1, mode + 1)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `dir/name` and records its digest.
pub(crate) fn write_tracked(
    dir: &Path,
    name: &str,
    t: &DenseTensor,
    digests: &mut BTreeMap<String, String>,
) -> Result<()> {
    let bytes = io::encode(t);
    let path = dir.join(name);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    digests.insert(name.to_string(), sha256_hex(&bytes));
    Ok(())
}

/// Reads `dir/name`, checking it against `digests` when an entry exists.
pub(crate) fn read_tracked(
    dir: &Path,
    name: &str,
    digests: &BTreeMap<String, String>,
) -> Result<DenseTensor> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(expected) = digests.get(name) {
        if &sha256_hex(&bytes) != expected {
            return Err(Error::format(
                format!("archive file {}", path.display()),
                "digest mismatch",
            ));
        }
    }
    io::decode(&bytes)
        .map_err(|e| Error::format(format!("archive file {}", path.display()), e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}", path.display()), e.to_string()))
}

pub fn write_archive(
    dir: impl AsRef<Path>,
    decomp: &BlockTermDecomp,
    error_trace: &[f64],
) -> Result<ArchiveMeta> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut digests = BTreeMap::new();
    for (r, term) in decomp.terms().iter().enumerate() {
        write_tracked(dir, &core_file(r), term.core(), &mut digests)?;
        for (n, f) in term.factors().iter().enumerate() {
            if let Some(f) = f {
                write_tracked(dir, &factor_file(r, n), &f.to_tensor(), &mut digests)?;
            }
        }
    }
    let meta = ArchiveMeta {
        terms: decomp.num_terms(),
        rank_signature: decomp.rank_signature(),
        target_shape: decomp.target_shape().to_vec(),
        error_trace: error_trace.to_vec(),
        digests,
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

pub fn read_archive(dir: impl AsRef<Path>) -> Result<(BlockTermDecomp, ArchiveMeta)> {
    let dir = dir.as_ref();
    let meta: ArchiveMeta = read_json(&dir.join(META_FILE))?;
    if meta.terms == 0 {
        return Err(Error::format("archive meta", "R must be at least 1"));
    }
    if meta.rank_signature.len() != meta.target_shape.len() {
        return Err(Error::format(
            "archive meta",
            "rank signature and target shape differ in length",
        ));
    }
    let mut terms = Vec::with_capacity(meta.terms);
    for r in 0..meta.terms {
        let core = read_tracked(dir, &core_file(r), &meta.digests)?;
        let mut factors = Vec::with_capacity(meta.rank_signature.len());
        for (n, rank) in meta.rank_signature.iter().enumerate() {
            factors.push(match rank {
                Some(_) => Some(FactorMatrix::from_tensor(&read_tracked(
                    dir,
                    &factor_file(r, n),
                    &meta.digests,
                )?)?),
                None => None,
            });
        }
        let term = TuckerTerm::new(core, factors)
            .map_err(|e| Error::format(format!("archive term {}", r + 1), e.to_string()))?;
        terms.push(term);
    }
    let decomp = BlockTermDecomp::new(terms, meta.target_shape.clone())
        .map_err(|e| Error::format("archive", e.to_string()))?;
    if decomp.rank_signature() != meta.rank_signature {
        return Err(Error::format(
            "archive",
            "stored factors disagree with rank signature",
        ));
    }
    Ok((decomp, meta))
}
