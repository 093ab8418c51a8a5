//! Ordered, named query embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryOrigin {
    Text,
    Image,
}

/// One named query. Several embeddings (one per prompt) are scored
/// separately and their probabilities averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub name: String,
    pub origin: QueryOrigin,
    pub embeddings: Vec<Vec<f64>>,
}

impl QueryEntry {
    pub fn single(name: impl Into<String>, origin: QueryOrigin, embedding: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            origin,
            embeddings: vec![embedding],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    entries: Vec<QueryEntry>,
}

impl QuerySet {
    pub fn new(entries: Vec<QueryEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("query set"));
        }
        let dim = entries[0].embeddings.first().map_or(0, Vec::len);
        for e in &entries {
            if e.embeddings.is_empty() {
                return Err(Error::InvalidData(format!(
                    "query {:?} has no embedding",
                    e.name
                )));
            }
            for v in &e.embeddings {
                if v.len() != dim || dim == 0 {
                    return Err(Error::InvalidData(format!(
                        "query {:?} has inconsistent width",
                        e.name
                    )));
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "query {:?} is not finite",
                        e.name
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// One single-embedding text query per row of `embeddings`.
    pub fn from_rows(names: &[String], embeddings: &Tensor) -> Result<Self> {
        if names.len() != embeddings.rows() {
            return Err(Error::config("one name per query row"));
        }
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    QueryEntry::single(n.clone(), QueryOrigin::Text, embeddings.row(i).to_vec())
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[QueryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embeddings[0].len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    /// All embeddings stacked `[M x D]`, with the entry index of every row.
    pub fn flatten(&self) -> (Tensor, Vec<usize>) {
        let mut rows = Vec::new();
        let mut group = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            for v in &e.embeddings {
                rows.push(v.clone());
                group.push(i);
            }
        }
        (Tensor::from_rows(&rows), group)
    }
}
