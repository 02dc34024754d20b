//! Precomputed text-guidance vectors, one per classification task.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLED_TEXT_SEED: u64 = 0x7e47;

const BUNDLED: &str = include_str!("../../assets/text_guidance.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    /// Negative / Neutral / Positive.
    Ternary,
    /// Borderline versus the rest.
    Binary,
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskTag::Ternary => "ternary",
            TaskTag::Binary => "binary",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub task_tag: TaskTag,
    pub vector: Vec<f64>,
}

/// On-disk guidance file: `{"dim": d_t, "ternary": [...], "binary": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextGuidance {
    pub dim: usize,
    pub ternary: Vec<f64>,
    pub binary: Vec<f64>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl TextGuidance {
    /// Two independent random unit vectors.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ternary = unit_gaussian(&mut rng, dim);
        let binary = unit_gaussian(&mut rng, dim);
        TextGuidance { dim, ternary, binary }
    }

    /// The default guidance shipped with the crate (`d_t = 64`).
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED).expect("bundled guidance parses")
    }

    /// All-zero vectors; used to switch text guidance off.
    pub fn zeros(dim: usize) -> Self {
        TextGuidance { dim, ternary: vec![0.0; dim], binary: vec![0.0; dim] }
    }

    pub fn get(&self, tag: TaskTag) -> &[f64] {
        match tag {
            TaskTag::Ternary => &self.ternary,
            TaskTag::Binary => &self.binary,
        }
    }

    pub fn embeddings(&self) -> BTreeMap<TaskTag, TextEmbedding> {
        [TaskTag::Ternary, TaskTag::Binary]
            .into_iter()
            .map(|tag| {
                let vector = self.get(tag).to_vec();
                (tag, TextEmbedding { task_tag: tag, vector })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("guidance serializes");
        s.push('\n');
        s
    }
}

/// Loads a guidance file whose vectors must have length `dim`. Vectors whose
/// norm is off by more than 1e-12 are rescaled to unit length with a warning.
pub fn load_text_embeddings(path: &Path, dim: usize) -> Result<TextGuidance> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    for tag in ["ternary", "binary"] {
        if raw.get(tag).is_none() {
            return Err(Error::format(path, format!("missing task tag {tag:?}")));
        }
    }
    let mut g: TextGuidance = serde_json::from_value(raw).map_err(|e| Error::format(path, e.to_string()))?;
    if g.dim != dim {
        return Err(Error::format(path, format!("file declares dim {}, model expects {dim}", g.dim)));
    }
    for tag in [TaskTag::Ternary, TaskTag::Binary] {
        let declared = g.dim;
        let v = match tag {
            TaskTag::Ternary => &mut g.ternary,
            TaskTag::Binary => &mut g.binary,
        };
        if v.len() != declared {
            return Err(Error::format(path, format!("{tag} vector has {} entries, expected {declared}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(path, format!("{tag} vector has non-finite entries")));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::format(path, format!("{tag} vector is all zeros and cannot be normalized")));
        }
        if (norm - 1.0).abs() > 1e-12 {
            log::warn!("{}: {tag} vector has norm {norm}, renormalizing", path.display());
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(g)
}
