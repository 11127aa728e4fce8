//! Deterministic synthetic embeddings standing in for encoder outputs.
//!
//! Every category gets a random unit mean. Images are re-normalized
//! Gaussian perturbations of their mean, patches are perturbations of their
//! image, and prompts are perturbations of their category mean (negatives
//! additionally mix in the borrowed feature's positive direction, mimicking
//! an encoder that largely ignores the word "no").

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EmbeddingRecord, EmbeddingTable, Modality, UNKNOWN_LABEL};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, Vector};
use crate::prompts::PromptLayout;

const MEAN_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const OOD_MEAN_STREAM: u64 = 1_000;
const PROMPT_STREAM: u64 = 2_000;

/// Weight of the borrowed positive feature inside a synthetic negative prompt.
const NEGATIVE_MIX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub patches_per_image: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid("synthetic data needs at least 2 classes".into()));
        }
        if self.per_class < 1 {
            return Err(Error::Invalid("per_class must be at least 1".into()));
        }
        if self.dim < 1 || self.patches_per_image < 1 {
            return Err(Error::Invalid("dim and patches_per_image must be positive".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Invalid("cluster_spread must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub images: EmbeddingTable,
    pub patches: EmbeddingTable,
    pub means: EmbeddingTable,
}

impl SynthDataset {
    /// Category means widened to `f64`, indexed by label.
    pub fn mean_vectors(&self) -> Vec<Vector> {
        self.means.records().iter().map(|r| r.first_f64()).collect()
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Array1::from_iter((0..dim).map(|_| StandardNormal.sample(rng)))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        if let Ok(v) = l2_normalize(gaussian(rng, dim).view()) {
            return v;
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, base: &Vector, spread: f64) -> Vector {
    // Draw even at zero spread so the stream layout does not depend on it.
    let noise = gaussian(rng, base.len());
    if spread == 0.0 {
        return base.clone();
    }
    let v = base + &(noise * spread);
    l2_normalize(v.view()).unwrap_or_else(|_| base.clone())
}

fn widen(v: &Vector) -> Vector {
    v.mapv(|x| f64::from(x as f32))
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut mean_rng = rng(spec.seed, MEAN_STREAM);
    let mut means = EmbeddingTable::new(spec.dim)?;
    let mut mean_vectors = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let mu = random_unit(&mut mean_rng, spec.dim);
        means.push(EmbeddingRecord::from_f64(
            format!("class{c}"),
            c as i32,
            Modality::ImageGlobal,
            std::slice::from_ref(&mu),
        ))?;
        // Samples are generated around the stored (f32) mean.
        mean_vectors.push(widen(&mu));
    }
    let (images, patches) = synth_samples(spec, &mean_vectors, spec.per_class, TRAIN_STREAM, "s", None)?;
    Ok(SynthDataset { images, patches, means })
}

/// Draws `per_class` more samples around each of `means`.
///
/// Records are named `{prefix}{c}_{k}` in both tables. `label` overrides
/// the per-mean label when given.
pub fn synth_samples(
    spec: &SynthSpec,
    means: &[Vector],
    per_class: usize,
    stream: u64,
    prefix: &str,
    label: Option<i32>,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    spec.validate()?;
    let mut r = rng(spec.seed, stream);
    let mut images = EmbeddingTable::new(spec.dim)?;
    let mut patches = EmbeddingTable::new(spec.dim)?;
    for (c, mu) in means.iter().enumerate() {
        if mu.len() != spec.dim {
            return Err(Error::DimensionMismatch {
                expected: spec.dim,
                found: mu.len(),
            });
        }
        for k in 0..per_class {
            let name = format!("{prefix}{c}_{k}");
            let label = label.unwrap_or(c as i32);
            let image = perturb(&mut r, mu, spec.cluster_spread);
            let patch_set: Vec<Vector> = (0..spec.patches_per_image)
                .map(|_| perturb(&mut r, &image, spec.cluster_spread))
                .collect();
            images.push(EmbeddingRecord::from_f64(
                name.clone(),
                label,
                Modality::ImageGlobal,
                std::slice::from_ref(&image),
            ))?;
            patches.push(EmbeddingRecord::from_f64(name, label, Modality::ImagePatchSet, &patch_set))?;
        }
    }
    Ok((images, patches))
}

/// Out-of-distribution samples drawn around `num_means` fresh unit means
/// that share no stream with the in-distribution means. Labels are
/// [`UNKNOWN_LABEL`].
pub fn synth_ood(spec: &SynthSpec, num_means: usize, per_mean: usize) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let mut mean_rng = rng(spec.seed, OOD_MEAN_STREAM);
    let means: Vec<Vector> = (0..num_means)
        .map(|_| widen(&random_unit(&mut mean_rng, spec.dim)))
        .collect();
    synth_samples(spec, &means, per_mean, OOD_MEAN_STREAM + 1, "ood", Some(UNKNOWN_LABEL))
}

/// Prompt embeddings for every flat index of `layout`, named
/// `{category}#{flat_index}` and labeled with the owning category.
///
/// The positive for feature `n` of `c` is a perturbation of `c`'s mean; the
/// negative of `c` borrowing sibling `d`'s feature `n` is a perturbation of
/// `mean_c + positive_{d,n}`.
pub fn synth_prompt_table(means: &[Vector], layout: &PromptLayout, spread: f64, seed: u64) -> Result<EmbeddingTable> {
    if means.len() != layout.num_categories() {
        return Err(Error::LengthMismatch {
            left: means.len(),
            right: layout.num_categories(),
        });
    }
    let dim = means.first().map(|m| m.len()).unwrap_or(1);
    let n = layout.n_features();
    let mut r = rng(seed, PROMPT_STREAM);
    let positives: Vec<Vec<Vector>> = means
        .iter()
        .map(|mu| (0..n).map(|_| perturb(&mut r, mu, spread)).collect())
        .collect();

    let mut table = EmbeddingTable::new(dim)?;
    for c in 0..layout.num_categories() {
        let name = layout.category_name(c);
        for (k, pos) in positives[c].iter().enumerate() {
            let flat = layout.positive_index(k + 1)?;
            table.push(EmbeddingRecord::from_f64(
                format!("{name}#{flat}"),
                c as i32,
                Modality::TextPrompt,
                std::slice::from_ref(pos),
            ))?;
        }
        for &d in layout.siblings(c) {
            for k in 0..n {
                let mixed = &means[c] + &(&positives[d][k] * NEGATIVE_MIX);
                let base = l2_normalize(mixed.view()).unwrap_or_else(|_| means[c].clone());
                let neg = perturb(&mut r, &base, spread);
                let flat = layout.negative_index(c, d, k + 1)?;
                table.push(EmbeddingRecord::from_f64(
                    format!("{name}#{flat}"),
                    c as i32,
                    Modality::TextPrompt,
                    std::slice::from_ref(&neg),
                ))?;
            }
        }
    }
    Ok(table)
}
