//! Two-stage inference and OOD evaluation.
//!
//! Stage 1 predicts a category from prompt matching; stage 2 builds the
//! sample graph with that category's prompt set and scores it with the
//! trained ViG.

mod metrics;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use metrics::{aupr, auroc, fpr95, id_accuracy};

use crate::adapter::{positive_probs, AdapterState, PromptReps, Side};
use crate::error::{Error, Result};
use crate::graph::{build_graph, MultiModalGraph, TopKConfig};
use crate::linalg::{argmax, l2_normalize, softmax, Vector};
use crate::prompts::PromptLayout;
use crate::vig::{energy, vig_logits, ViGModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub name: String,
    pub predicted: String,
    pub score: f64,
    pub is_id: bool,
}

/// How the final confidence is read off the ViG logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// `-E(G)`.
    #[default]
    Energy,
    /// Largest softmax probability of the head logits.
    MaxSoftmax,
    /// Prompt-matching baseline; the ViG is not consulted.
    Mcm,
}

/// Which image representation drives category prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage1Source {
    /// Re-normalized mean of the transformed patch vectors.
    #[default]
    Patches,
    /// The transformed global image embedding.
    Global,
}

/// Argmax category (ties to the lowest index) and the full matching
/// distribution for a unit image representation.
pub fn predict_category(image: &Vector, reps: &PromptReps, layout: &PromptLayout, tau: f64) -> (usize, Vec<f64>) {
    let probs = positive_probs(image, reps, layout, tau);
    (argmax(&probs), probs)
}

/// Maximum matching probability over categories.
pub fn mcm_score(image: &Vector, reps: &PromptReps, layout: &PromptLayout, tau: f64) -> f64 {
    let probs = positive_probs(image, reps, layout, tau);
    probs.into_iter().fold(f64::MIN, f64::max)
}

pub fn transform_patches(raw: &[Vector], state: &AdapterState) -> Result<Vec<Vector>> {
    raw.iter().map(|p| state.transform(p, Side::Image)).collect()
}

/// Unit mean of already-transformed patch vectors.
pub fn pooled_patch_rep(patches: &[Vector]) -> Result<Vector> {
    let first = patches.first().ok_or(Error::EmptySet)?;
    let mut sum = Vector::zeros(first.len());
    for p in patches {
        sum += p;
    }
    l2_normalize(sum.view())
}

/// Graph of transformed patches and the transformed prompt set of `category`.
pub fn sample_graph(patches: &[Vector], reps: &PromptReps, category: usize, topk: &TopKConfig) -> Result<MultiModalGraph> {
    build_graph(patches, reps.category(category), topk)
}

/// Inputs shared by every scored sample.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    pub layout: &'a PromptLayout,
    pub reps: &'a PromptReps,
    pub state: &'a AdapterState,
    pub model: &'a ViGModel,
    pub topk: TopKConfig,
    pub tau: f64,
    pub temperature: f64,
    pub mode: ScoreMode,
    pub stage1: Stage1Source,
}

impl Scorer<'_> {
    /// Scores one sample from its raw patch vectors; `global` is the raw
    /// global embedding, required when stage 1 reads it.
    pub fn score(&self, name: &str, raw_patches: &[Vector], global: Option<&Vector>, is_id: bool) -> Result<ScoreRecord> {
        let patches = transform_patches(raw_patches, self.state)?;
        let image = match self.stage1 {
            Stage1Source::Patches => pooled_patch_rep(&patches)?,
            Stage1Source::Global => {
                let g = global.ok_or_else(|| Error::Invalid(format!("no global embedding for {name:?}")))?;
                self.state.transform(g, Side::Image)?
            }
        };
        let (category, probs) = predict_category(&image, self.reps, self.layout, self.tau);
        let score = match self.mode {
            ScoreMode::Mcm => probs.iter().copied().fold(f64::MIN, f64::max),
            mode => {
                let graph = sample_graph(&patches, self.reps, category, &self.topk)?;
                self.model.check_graph(&graph)?;
                let logits = vig_logits(&graph, self.model);
                if mode == ScoreMode::Energy {
                    -energy(&logits, self.temperature)
                } else {
                    softmax(&logits).into_iter().fold(f64::MIN, f64::max)
                }
            }
        };
        if !score.is_finite() {
            return Err(Error::NonFiniteValue(format!("score of {name:?}")));
        }
        Ok(ScoreRecord {
            name: name.to_string(),
            predicted: self.layout.category_name(category).to_string(),
            score,
            is_id,
        })
    }
}

/// CSV with header `name,predicted,score,is_id`; scores at full precision.
pub fn export_scores(records: &[ScoreRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["name", "predicted", "score", "is_id"])?;
    for r in records {
        w.write_record([r.name.as_str(), r.predicted.as_str(), &r.score.to_string(), &r.is_id.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["name", "predicted", "score", "is_id"] {
        return Err(Error::Invalid("score file must have header name,predicted,score,is_id".into()));
    }
    let records = r.deserialize().collect::<std::result::Result<Vec<ScoreRecord>, _>>()?;
    if let Some(bad) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::NonFiniteValue(format!("score of {:?}", bad.name)));
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub id_acc: Option<f64>,
}

impl MetricReport {
    pub fn compute(id: &[f64], ood: &[f64], id_acc: Option<f64>) -> Result<Self> {
        Ok(Self {
            auroc: auroc(id, ood)?,
            aupr: aupr(id, ood)?,
            fpr95: fpr95(id, ood)?,
            id_acc,
        })
    }

    /// JSON object with six decimal places; `id_acc` is `null` when unknown.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{");
        let _ = write!(
            s,
            "\"auroc\": {:.6}, \"aupr\": {:.6}, \"fpr95\": {:.6}, \"id_acc\": ",
            self.auroc, self.aupr, self.fpr95
        );
        match self.id_acc {
            Some(a) => {
                let _ = write!(s, "{a:.6}");
            }
            None => s.push_str("null"),
        }
        s.push('}');
        s
    }
}
