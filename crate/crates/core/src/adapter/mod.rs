//! Learnable text/image adapters and the five prompt-alignment losses.
//!
//! Both adapters are square matrices applied to frozen encoder outputs and
//! followed by re-normalization, so every inner product below is a cosine.

mod checkpoint;
mod loss;
mod train;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, Matrix, Vector};
use crate::prompts::{prompt_record_name, PromptLayout};
use crate::store::EmbeddingTable;

pub use checkpoint::{load_adapters, read_adapters, save_adapters, write_adapters};
pub use loss::{
    adapter_gradients, loss_nir, loss_nnd, loss_npd, loss_pir, loss_ppd, match_prob_positive, npd_pair_cosines,
    p_minus, positive_probs, s_minus, total_adapter_loss, weighted_adapter_gradients, weighted_adapter_loss,
    AdapterGradient, LossBreakdown, LossWeights, TermWeights,
};
pub use train::{loss_trace_csv, optimize_adapters, AdapterConfig, AdapterRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub w_text: Matrix,
    pub w_image: Matrix,
}

impl AdapterState {
    pub fn identity(dim: usize) -> Self {
        Self {
            w_text: Array2::eye(dim),
            w_image: Array2::eye(dim),
        }
    }

    /// Identity plus i.i.d. Gaussian noise of the given scale.
    pub fn perturbed_identity(dim: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let mut m = Array2::<f64>::eye(dim);
            m.mapv_inplace(|x| {
                let g: f64 = StandardNormal.sample(&mut rng);
                x + noise * g
            });
            m
        };
        let w_text = draw();
        let w_image = draw();
        Self { w_text, w_image }
    }

    pub fn dim(&self) -> usize {
        self.w_text.nrows()
    }

    pub fn matrix(&self, side: Side) -> &Matrix {
        match side {
            Side::Text => &self.w_text,
            Side::Image => &self.w_image,
        }
    }

    /// `normalize(W * raw)` for the chosen side.
    pub fn transform(&self, raw: &Vector, side: Side) -> Result<Vector> {
        let w = self.matrix(side);
        if raw.len() != w.ncols() {
            return Err(Error::DimensionMismatch {
                expected: w.ncols(),
                found: raw.len(),
            });
        }
        l2_normalize(w.dot(raw).view())
    }

    pub fn is_finite(&self) -> bool {
        self.w_text.iter().chain(self.w_image.iter()).all(|x| x.is_finite())
    }
}

/// A training image: raw global embedding plus its category id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub raw: Vector,
    pub label: usize,
}

impl LabeledImage {
    /// Every record of `table` whose label is a valid category id.
    pub fn from_table(table: &EmbeddingTable, num_categories: usize) -> Result<Vec<Self>> {
        table
            .records()
            .iter()
            .map(|r| {
                let label = usize::try_from(r.label)
                    .ok()
                    .filter(|&l| l < num_categories)
                    .ok_or_else(|| Error::OutOfRange(format!("record {:?} has label {}", r.name, r.label)))?;
                Ok(LabeledImage {
                    raw: r.first_f64(),
                    label,
                })
            })
            .collect()
    }
}

/// Raw prompt embeddings arranged by category and flat index.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddings {
    layout: PromptLayout,
    // raw[c][flat_index - 1]
    raw: Vec<Vec<Vector>>,
}

impl PromptEmbeddings {
    pub fn new(layout: PromptLayout, raw: Vec<Vec<Vector>>) -> Result<Self> {
        if raw.len() != layout.num_categories() {
            return Err(Error::LengthMismatch {
                left: raw.len(),
                right: layout.num_categories(),
            });
        }
        let dim = raw.iter().flatten().map(|v| v.len()).next().unwrap_or(0);
        for (c, row) in raw.iter().enumerate() {
            if row.len() != layout.prompt_count(c) {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: layout.prompt_count(c),
                });
            }
            if let Some(v) = row.iter().find(|v| v.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
        }
        Ok(Self { layout, raw })
    }

    /// Looks up `{category}#{flat_index}` for every prompt of the layout.
    pub fn from_table(table: &EmbeddingTable, layout: &PromptLayout) -> Result<Self> {
        let raw = (0..layout.num_categories())
            .map(|c| {
                let name = layout.category_name(c);
                (1..=layout.prompt_count(c))
                    .map(|flat| {
                        let key = prompt_record_name(name, flat);
                        table
                            .get(&key)
                            .map(|r| r.first_f64())
                            .ok_or_else(|| Error::MissingCategory(key))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layout.clone(), raw)
    }

    pub fn layout(&self) -> &PromptLayout {
        &self.layout
    }

    pub fn raw(&self) -> &[Vec<Vector>] {
        &self.raw
    }

    pub fn dim(&self) -> usize {
        self.raw.iter().flatten().map(|v| v.len()).next().unwrap_or(0)
    }

    /// Transformed (unit) representations under `state`.
    pub fn transform(&self, state: &AdapterState) -> Result<PromptReps> {
        let vectors = self
            .raw
            .iter()
            .map(|row| row.iter().map(|v| state.transform(v, Side::Text)).collect())
            .collect::<Result<_>>()?;
        Ok(PromptReps { vectors })
    }
}

/// Unit prompt representations, `vectors[c][flat_index - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptReps {
    pub vectors: Vec<Vec<Vector>>,
}

impl PromptReps {
    pub fn positive(&self, layout: &PromptLayout, c: usize, n: usize) -> &Vector {
        debug_assert!(n >= 1 && n <= layout.n_features());
        &self.vectors[c][n - 1]
    }

    /// Negative of `c` negating feature `n` of its sibling `d`.
    pub fn negative(&self, layout: &PromptLayout, c: usize, d: usize, n: usize) -> &Vector {
        let rank = layout.sibling_rank(c, d).expect("d is a sibling of c");
        &self.vectors[c][rank * layout.n_features() + n - 1]
    }

    /// All prompts of category `c` in flat-index order.
    pub fn category(&self, c: usize) -> &[Vector] {
        &self.vectors[c]
    }
}
