//! Rated-pair manifests and in-memory datasets.
//!
//! A manifest is UTF-8 text with one JSON object per line:
//!
//! ```text
//! {"pair_id": "p1", "test_path": "conv/a.lrp", "ref_path": "nat/b.lrp", "score": 3.0, "system_id": "N17"}
//! ```
//!
//! Relative paths are resolved against the representation directory.
//! Representations are loaded once per distinct path and shared between
//! the pairs that reference them.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::{read_lrp, LayerwiseRepr};

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedPair {
    pub pair_id: String,
    pub test_path: PathBuf,
    pub ref_path: PathBuf,
    pub score: f64,
    pub system_id: String,
}

impl RatedPair {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_SCORE..=MAX_SCORE).contains(&self.score) {
            return Err(Error::ScoreRange {
                pair_id: self.pair_id.clone(),
                score: self.score,
            });
        }
        if self.system_id.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "pair {}: empty system_id",
                self.pair_id
            )));
        }
        Ok(())
    }
}

/// A rated pair together with its loaded representations.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pair: RatedPair,
    pub test: Arc<LayerwiseRepr>,
    pub reference: Arc<LayerwiseRepr>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    repr_dir: PathBuf,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset from already-loaded samples, checking every invariant
    /// that [`load_manifest`] checks except file existence.
    pub fn from_samples(repr_dir: impl Into<PathBuf>, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut shape: Option<(usize, usize, String)> = None;
        for s in &samples {
            s.pair.validate()?;
            if !seen.insert(s.pair.pair_id.as_str()) {
                return Err(Error::DuplicatePair(s.pair.pair_id.clone()));
            }
            for r in [&s.test, &s.reference] {
                check_shape(&mut shape, r, &s.pair.pair_id)?;
            }
        }
        Ok(Self {
            repr_dir: repr_dir.into(),
            samples,
        })
    }

    pub fn repr_dir(&self) -> &Path {
        &self.repr_dir
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn pairs(&self) -> impl Iterator<Item = &RatedPair> {
        self.samples.iter().map(|s| &s.pair)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shared `(num_layers, dim)`, or `None` for an empty dataset.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.test.num_layers(), s.test.dim()))
    }
}

fn check_shape(
    shape: &mut Option<(usize, usize, String)>,
    repr: &LayerwiseRepr,
    pair_id: &str,
) -> Result<()> {
    match shape {
        None => {
            *shape = Some((repr.num_layers(), repr.dim(), pair_id.to_string()));
            Ok(())
        }
        Some((l, d, first)) if (*l, *d) != (repr.num_layers(), repr.dim()) => {
            Err(Error::DimensionMismatch(format!(
                "pair {pair_id} has L={} D={}, pair {first} has L={l} D={d}",
                repr.num_layers(),
                repr.dim()
            )))
        }
        Some(_) => Ok(()),
    }
}

/// One problem found while validating a manifest.
#[derive(Debug)]
pub struct Diagnostic {
    pub line: usize,
    pub pair_id: Option<String>,
    pub error: Error,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.pair_id {
            Some(id) => write!(f, "line {} (pair {}): {}", self.line, id, self.error),
            None => write!(f, "line {}: {}", self.line, self.error),
        }
    }
}

/// Result of a full, non-short-circuiting manifest check.
#[derive(Debug)]
pub struct ValidationReport {
    pub dataset: Option<Dataset>,
    pub diagnostics: Vec<Diagnostic>,
    pub num_records: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.diagnostics.is_empty()
    }
}

/// Checks every record and file of a manifest, collecting all problems
/// instead of stopping at the first.
pub fn validate_manifest(
    path: impl AsRef<Path>,
    repr_dir: impl AsRef<Path>,
) -> Result<ValidationReport> {
    let path = path.as_ref();
    let repr_dir = repr_dir.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut diagnostics = Vec::new();
    let mut cache: HashMap<PathBuf, Option<Arc<LayerwiseRepr>>> = HashMap::new();
    let mut seen = HashSet::new();
    let mut shape: Option<(usize, usize, String)> = None;
    let mut samples = Vec::new();
    let mut num_records = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        num_records += 1;
        let pair: RatedPair = match serde_json::from_str(raw) {
            Ok(p) => p,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    line,
                    pair_id: None,
                    error: Error::Manifest {
                        path: path.to_path_buf(),
                        line,
                        message: e.to_string(),
                    },
                });
                continue;
            }
        };
        let mut push = |error: Error| {
            diagnostics.push(Diagnostic {
                line,
                pair_id: Some(pair.pair_id.clone()),
                error,
            })
        };
        let mut ok = true;
        if !seen.insert(pair.pair_id.clone()) {
            push(Error::DuplicatePair(pair.pair_id.clone()));
            ok = false;
        }
        if let Err(e) = pair.validate() {
            push(e);
            ok = false;
        }
        let mut loaded = Vec::with_capacity(2);
        for rel in [&pair.test_path, &pair.ref_path] {
            let full = repr_dir.join(rel);
            let entry = cache.entry(full.clone()).or_insert_with(|| None);
            if entry.is_none() {
                if !full.is_file() {
                    push(Error::MissingFile {
                        pair_id: pair.pair_id.clone(),
                        path: full,
                    });
                    ok = false;
                    continue;
                }
                match read_lrp(&full) {
                    Ok(r) => *entry = Some(Arc::new(r)),
                    Err(e) => {
                        push(Error::InvalidRepr(format!("{}: {e}", full.display())));
                        ok = false;
                        continue;
                    }
                }
            }
            let repr = entry.clone().expect("populated above");
            if let Err(e) = check_shape(&mut shape, &repr, &pair.pair_id) {
                push(e);
                ok = false;
            }
            loaded.push(repr);
        }
        if ok && loaded.len() == 2 {
            let reference = loaded.pop().expect("two entries");
            let test = loaded.pop().expect("two entries");
            samples.push(Sample {
                pair,
                test,
                reference,
            });
        }
    }

    let dataset = diagnostics.is_empty().then(|| Dataset {
        repr_dir: repr_dir.to_path_buf(),
        samples,
    });
    Ok(ValidationReport {
        dataset,
        diagnostics,
        num_records,
    })
}

/// Loads a manifest and every representation it references, preserving
/// manifest order. Fails on the first problem found.
pub fn load_manifest(path: impl AsRef<Path>, repr_dir: impl AsRef<Path>) -> Result<Dataset> {
    let mut report = validate_manifest(path, repr_dir)?;
    if let Some(first) = report.diagnostics.drain(..).next() {
        return Err(first.error);
    }
    Ok(report.dataset.expect("clean report carries a dataset"))
}

/// Writes pairs as a newline-delimited JSON manifest.
pub fn write_manifest<'a>(
    path: impl AsRef<Path>,
    pairs: impl IntoIterator<Item = &'a RatedPair>,
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in pairs {
        text.push_str(&serde_json::to_string(p).expect("RatedPair serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seeded random partition into `(train, test)`. Each side keeps the
/// original relative order.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "train_fraction {train_fraction} not in (0, 1)"
        )));
    }
    let n = ds.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidSplit(format!(
            "{n} pairs at fraction {train_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = ds
        .samples
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    let strip = |v: Vec<(Sample, bool)>| Dataset {
        repr_dir: ds.repr_dir.clone(),
        samples: v.into_iter().map(|(s, _)| s).collect(),
    };
    Ok((strip(train), strip(test)))
}
