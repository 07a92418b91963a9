//! Word embeddings for object classes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WORD_DIM: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    Synthetic { seed: u64 },
    File { path: String },
}

/// One vector per object class, all of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Array1<f64>>,
    source: EmbeddingSource,
}

impl EmbeddingTable {
    /// Seeded pseudo-random unit vectors, one per class.
    pub fn synthetic(n_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e3b3_0000_0000);
        let vectors = (0..n_classes)
            .map(|_| {
                let v: Array1<f64> =
                    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
                let norm = v.dot(&v).sqrt();
                v / norm
            })
            .collect();
        Self {
            dim,
            vectors,
            source: EmbeddingSource::Synthetic { seed },
        }
    }

    /// Builds a table from a plain-text `token v1 ... vd` file. Class names
    /// made of several whitespace-separated words use the mean of their
    /// token vectors.
    pub fn from_text_file(path: &Path, class_names: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::from_text(&text, class_names)?;
        table.source = EmbeddingSource::File {
            path: path.display().to_string(),
        };
        Ok(table)
    }

    pub fn from_text(text: &str, class_names: &[String]) -> Result<Self> {
        let mut tokens: HashMap<&str, Array1<f64>> = HashMap::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("embedding line {}: {e}", lineno + 1)))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("embedding line {}: non-finite value", lineno + 1)));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::shape("embedding file", d, values.len()));
                }
                _ => {}
            }
            tokens.insert(token, Array1::from(values));
        }
        let dim = dim.ok_or_else(|| Error::Format("embedding file is empty".into()))?;
        let vectors = class_names
            .iter()
            .map(|name| {
                let words: Vec<&str> = name.split_whitespace().collect();
                let mut acc = Array1::zeros(dim);
                for w in &words {
                    let v = tokens
                        .get(w)
                        .ok_or_else(|| Error::Format(format!("no embedding for token `{w}` of class `{name}`")))?;
                    acc += v;
                }
                if words.is_empty() {
                    return Err(Error::Format("empty class name".into()));
                }
                Ok(acc / words.len() as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            vectors,
            source: EmbeddingSource::File { path: String::new() },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn source(&self) -> &EmbeddingSource {
        &self.source
    }

    pub fn lookup(&self, class_id: usize) -> Result<ArrayView1<'_, f64>> {
        self.vectors
            .get(class_id)
            .map(|v| v.view())
            .ok_or(Error::Lookup(class_id))
    }

    /// Serializes in the text format accepted by [`EmbeddingTable::from_text`].
    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        for (name, v) in class_names.iter().zip(&self.vectors) {
            out.push_str(&name.replace(char::is_whitespace, "_"));
            for x in v {
                out.push(' ');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        }
        out
    }
}
