//! Class embedding tables: loading, saving, and deterministic synthesis.
//!
//! Every stored vector is unit-norm, so cosine similarity against a table
//! entry reduces to a dot product with the normalized query.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Vectors whose norm is this close to 1 are stored untouched, which keeps
/// save/load round trips bit-exact.
const UNIT_NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate class name `{name}`")]
    DuplicateClass { line: usize, name: String },
    #[error("class `{name}` has a zero or non-finite vector and cannot be normalized")]
    ZeroVector { name: String },
    #[error("embedding table must contain at least one class")]
    Empty,
    #[error("dimension {dim} cannot hold {needed} mutually orthogonal directions")]
    Capacity { dim: usize, needed: usize },
    #[error("invalid similarity pair: {0}")]
    InvalidPair(String),
    #[error("cosine similarity needs nonzero vectors of equal length")]
    Domain,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered class-name → unit-vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    names: Vec<String>,
    vectors: Array2<f64>,
    index: HashMap<String, usize>,
}

impl ClassEmbeddingTable {
    /// Builds a table, normalizing each vector to unit length.
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self, EmbeddingError> {
        let dim = match entries.first() {
            Some((_, v)) => v.len(),
            None => return Err(EmbeddingError::Empty),
        };
        if dim == 0 {
            return Err(EmbeddingError::Parse {
                line: 0,
                message: "embedding dimension must be positive".into(),
            });
        }
        let mut names = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        let mut vectors = Array2::zeros((entries.len(), dim));
        for (row, (name, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    line: row + 1,
                    expected: dim,
                    found: v.len(),
                });
            }
            if index.insert(name.clone(), row).is_some() {
                return Err(EmbeddingError::DuplicateClass { line: row + 1, name });
            }
            let unit = normalize(&v).ok_or_else(|| EmbeddingError::ZeroVector { name: name.clone() })?;
            vectors.row_mut(row).assign(&ArrayView1::from(&unit));
            names.push(name);
        }
        Ok(Self { names, vectors, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn get(&self, name: &str) -> Option<ArrayView1<'_, f64>> {
        self.index_of(name).map(|i| self.vector(i))
    }

    /// k × dim matrix of unit rows, in table order.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.vectors
    }

    /// New table with only `names`, in the given order.
    pub fn subset<S: AsRef<str>>(&self, names: &[S]) -> Result<Self, EmbeddingError> {
        let entries = names
            .iter()
            .map(|n| {
                let n = n.as_ref();
                self.get(n)
                    .map(|v| (n.to_string(), v.to_vec()))
                    .ok_or_else(|| EmbeddingError::InvalidPair(format!("unknown class `{n}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries)
    }
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return None;
    }
    if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
        return Some(v.to_vec());
    }
    Some(v.iter().map(|x| x / norm).collect())
}

/// Cosine of the angle between `u` and `v`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::Domain);
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if !(uu > 0.0 && vv > 0.0) {
        return Err(EmbeddingError::Domain);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Parses the line-oriented embedding format:
///
/// ```text
/// dim=4
/// horse 0.5 0.5 0.5 0.5
/// zebra 1 0 0 0
/// ```
///
/// Blank lines are skipped.
pub fn load_embeddings<R: BufRead>(source: R) -> Result<ClassEmbeddingTable, EmbeddingError> {
    let mut dim: Option<usize> = None;
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(expected) = dim else {
            let value = trimmed.strip_prefix("dim=").ok_or_else(|| EmbeddingError::Parse {
                line: line_no,
                message: format!("expected `dim=<int>` header, found `{trimmed}`"),
            })?;
            let d: usize = value.parse().map_err(|_| EmbeddingError::Parse {
                line: line_no,
                message: format!("invalid dimension `{value}`"),
            })?;
            if d == 0 {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    message: "dimension must be positive".into(),
                });
            }
            dim = Some(d);
            continue;
        };
        let mut fields = trimmed.split_whitespace();
        let name = fields.next().expect("non-empty line has a first field").to_string();
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| EmbeddingError::Parse {
                    line: line_no,
                    message: format!("invalid number `{f}` for class `{name}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != expected {
            return Err(EmbeddingError::DimensionMismatch {
                line: line_no,
                expected,
                found: values.len(),
            });
        }
        if seen.insert(name.clone(), line_no).is_some() {
            return Err(EmbeddingError::DuplicateClass { line: line_no, name });
        }
        if normalize(&values).is_none() {
            return Err(EmbeddingError::ZeroVector { name });
        }
        entries.push((name, values));
    }
    if dim.is_none() {
        return Err(EmbeddingError::Parse {
            line: 0,
            message: "missing `dim=<int>` header".into(),
        });
    }
    ClassEmbeddingTable::new(entries)
}

pub fn save_embeddings<W: Write>(table: &ClassEmbeddingTable, mut sink: W) -> Result<(), EmbeddingError> {
    writeln!(sink, "dim={}", table.dim())?;
    for (i, name) in table.names().iter().enumerate() {
        write!(sink, "{name}")?;
        for v in table.vector(i) {
            write!(sink, " {v:?}")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

/// Target cosine between a derived class and the class it is placed near.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPair {
    pub class: String,
    pub anchor: String,
    pub cosine: f64,
}

impl SimilarityPair {
    pub fn new(class: impl Into<String>, anchor: impl Into<String>, cosine: f64) -> Self {
        Self {
            class: class.into(),
            anchor: anchor.into(),
            cosine,
        }
    }
}

/// Draws `count` orthonormal vectors in `dim` dimensions (Gram–Schmidt on
/// Gaussian samples, orthogonalized twice for accuracy).
pub fn random_orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    if count > dim {
        return Err(EmbeddingError::Capacity { dim, needed: count });
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Resample on a (practically impossible) near-degenerate draw.
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(basis)
}

/// Deterministic table where unpaired classes are mutually orthogonal and
/// each pair's `class` sits at exactly `cosine` from its `anchor`.
///
/// A class may be derived from at most one anchor, and anchor chains must not
/// form cycles.
pub fn synth_embeddings<S: AsRef<str>>(
    class_names: &[S],
    dim: usize,
    seed: u64,
    similarity_pairs: &[SimilarityPair],
) -> Result<ClassEmbeddingTable, EmbeddingError> {
    let names: Vec<String> = class_names.iter().map(|s| s.as_ref().to_string()).collect();
    if names.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    if dim < names.len() {
        return Err(EmbeddingError::Capacity { dim, needed: names.len() });
    }
    let position: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    if position.len() != names.len() {
        return Err(EmbeddingError::InvalidPair("duplicate class names".into()));
    }

    let mut derived_from: Vec<Option<(usize, f64)>> = vec![None; names.len()];
    for p in similarity_pairs {
        let lookup = |n: &str| {
            position
                .get(n)
                .copied()
                .ok_or_else(|| EmbeddingError::InvalidPair(format!("unknown class `{n}`")))
        };
        let (c, a) = (lookup(&p.class)?, lookup(&p.anchor)?);
        if c == a {
            return Err(EmbeddingError::InvalidPair(format!("`{}` paired with itself", p.class)));
        }
        if !(p.cosine > -1.0 && p.cosine < 1.0) {
            return Err(EmbeddingError::InvalidPair(format!(
                "cosine {} for `{}` must lie in (-1, 1)",
                p.cosine, p.class
            )));
        }
        if derived_from[c].replace((a, p.cosine)).is_some() {
            return Err(EmbeddingError::InvalidPair(format!("`{}` appears as derived class twice", p.class)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = random_orthonormal(names.len(), dim, &mut rng)?;

    let mut resolved: Vec<Option<Vec<f64>>> = vec![None; names.len()];
    for i in 0..names.len() {
        if derived_from[i].is_none() {
            resolved[i] = Some(basis[i].clone());
        }
    }
    // Each pass resolves every class whose anchor is ready; a pass that
    // makes no progress means a cycle.
    loop {
        let mut progressed = false;
        let mut pending = false;
        for i in 0..names.len() {
            if resolved[i].is_some() {
                continue;
            }
            let (anchor, cos) = derived_from[i].expect("unresolved classes are derived");
            match &resolved[anchor] {
                Some(t) => {
                    let sin = (1.0 - cos * cos).sqrt();
                    let v: Vec<f64> = t.iter().zip(&basis[i]).map(|(a, e)| cos * a + sin * e).collect();
                    resolved[i] = Some(v);
                    progressed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        if !progressed {
            return Err(EmbeddingError::InvalidPair("similarity pairs form a cycle".into()));
        }
    }

    ClassEmbeddingTable::new(
        names
            .into_iter()
            .zip(resolved)
            .map(|(n, v)| (n, v.expect("all classes resolved")))
            .collect(),
    )
}
