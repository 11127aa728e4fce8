//! Alignment losses over transformed image and prompt representations.
//!
//! Each term is written once, as a function that returns its value and,
//! when asked, accumulates its gradient with respect to the unit
//! representations. The chain rule through normalization and the adapter
//! matrices is applied afterwards in [`adapter_gradients`].

use ndarray::Array2;

use super::{AdapterState, LabeledImage, PromptEmbeddings, PromptReps, Side};
use crate::error::{Error, Result};
use crate::linalg::{abs_grad, log_sum_exp, normalize_backward, sigmoid, Matrix, Vector};
use crate::prompts::PromptLayout;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub lambda_npd: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pos: 1e-5,
            lambda_neg: 1e-3,
            lambda_npd: 1.0,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_pos", self.lambda_pos),
            ("lambda_neg", self.lambda_neg),
            ("lambda_npd", self.lambda_npd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn terms(&self) -> TermWeights {
        TermWeights {
            pir: 1.0,
            ppd: self.lambda_pos,
            nir: 1.0,
            nnd: self.lambda_neg,
            npd: self.lambda_npd,
        }
    }
}

/// Multiplier applied to each of the five terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermWeights {
    pub pir: f64,
    pub ppd: f64,
    pub nir: f64,
    pub nnd: f64,
    pub npd: f64,
}

impl TermWeights {
    /// Weights that select a single term by name.
    pub fn only(term: &str) -> Option<Self> {
        let mut w = Self::default();
        match term {
            "pir" => w.pir = 1.0,
            "ppd" => w.ppd = 1.0,
            "nir" => w.nir = 1.0,
            "nnd" => w.nnd = 1.0,
            "npd" => w.npd = 1.0,
            _ => return None,
        }
        Some(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub pir: f64,
    pub ppd: f64,
    pub nir: f64,
    pub nnd: f64,
    pub npd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.pir, self.ppd, self.nir, self.nnd, self.npd, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradient {
    pub w_text: Matrix,
    pub w_image: Matrix,
}

/// Gradient accumulators for the unit representations.
struct RepGrads {
    images: Vec<Vector>,
    prompts: Vec<Vec<Vector>>,
}

impl RepGrads {
    fn zeros(images: &[Vector], reps: &PromptReps) -> Self {
        let zero = |v: &Vector| Vector::zeros(v.len());
        Self {
            images: images.iter().map(zero).collect(),
            prompts: reps.vectors.iter().map(|row| row.iter().map(zero).collect()).collect(),
        }
    }
}

type Sink<'a> = Option<(&'a mut RepGrads, f64)>;

fn positive_logits(image: &Vector, reps: &PromptReps, layout: &PromptLayout, tau: f64) -> Vec<Vec<f64>> {
    (0..layout.num_categories())
        .map(|c| {
            (1..=layout.n_features())
                .map(|n| image.dot(reps.positive(layout, c, n)) / tau)
                .collect()
        })
        .collect()
}

/// Matching probability of `image` against every category's positives.
pub fn positive_probs(image: &Vector, reps: &PromptReps, layout: &PromptLayout, tau: f64) -> Vec<f64> {
    let logits = positive_logits(image, reps, layout, tau);
    let per_class: Vec<f64> = logits.iter().map(|l| log_sum_exp(l)).collect();
    let total = log_sum_exp(&per_class);
    per_class.iter().map(|l| (l - total).exp()).collect()
}

pub fn match_prob_positive(image: &Vector, reps: &PromptReps, layout: &PromptLayout, target: usize, tau: f64) -> f64 {
    positive_probs(image, reps, layout, tau)[target]
}

fn pir_term(images: &[Vector], labels: &[usize], reps: &PromptReps, layout: &PromptLayout, tau: f64, mut sink: Sink) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let batch = images.len() as f64;
    let mut total = 0.0;
    for (b, (image, &y)) in images.iter().zip(labels).enumerate() {
        let logits = positive_logits(image, reps, layout, tau);
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let lse_all = log_sum_exp(&flat);
        let lse_own = log_sum_exp(&logits[y]);
        total += lse_all - lse_own;

        if let Some((grads, scale)) = sink.as_mut() {
            let scale = *scale / batch;
            for (c, row) in logits.iter().enumerate() {
                for (k, &a) in row.iter().enumerate() {
                    let mut q = (a - lse_all).exp();
                    if c == y {
                        q -= (a - lse_own).exp();
                    }
                    let coef = scale * q / tau;
                    if coef == 0.0 {
                        continue;
                    }
                    let pos = reps.positive(layout, c, k + 1);
                    grads.images[b].scaled_add(coef, pos);
                    grads.prompts[c][k].scaled_add(coef, image);
                }
            }
        }
    }
    total / batch
}

/// Mean of `-log p+` over the batch.
pub fn loss_pir(images: &[Vector], labels: &[usize], reps: &PromptReps, layout: &PromptLayout, tau: f64) -> f64 {
    pir_term(images, labels, reps, layout, tau, None)
}

/// Sum of |<a_i, a_j>| over unordered pairs of a block of vectors.
fn pairwise_abs(block: &[Vector], offset: (usize, usize), sink: &mut Sink) -> f64 {
    let mut total = 0.0;
    for i in 0..block.len() {
        for j in i + 1..block.len() {
            let dot = block[i].dot(&block[j]);
            total += dot.abs();
            if let Some((grads, scale)) = sink.as_mut() {
                let g = *scale * abs_grad(dot);
                let (c, base) = offset;
                grads.prompts[c][base + i].scaled_add(g, &block[j]);
                grads.prompts[c][base + j].scaled_add(g, &block[i]);
            }
        }
    }
    total
}

fn ppd_term(reps: &PromptReps, layout: &PromptLayout, mut sink: Sink) -> f64 {
    let n = layout.n_features();
    (0..layout.num_categories())
        .map(|c| pairwise_abs(&reps.category(c)[..n], (c, 0), &mut sink))
        .sum()
}

/// Pairwise |cosine| among each category's positives, summed.
pub fn loss_ppd(reps: &PromptReps, layout: &PromptLayout) -> f64 {
    ppd_term(reps, layout, None)
}

fn check_sibling(layout: &PromptLayout, i: usize, c: usize, n: usize) -> Result<()> {
    if layout.sibling_rank(i, c).is_none() {
        return Err(Error::OutOfRange(format!("category {c} is not a sibling of {i}")));
    }
    layout.positive_index(n).map(|_| ())
}

/// Binary softmax between the image's similarity to the negative of `i`
/// borrowing from `c` and the negative of `c` borrowing from `i`.
pub fn s_minus(image: &Vector, reps: &PromptReps, layout: &PromptLayout, i: usize, c: usize, n: usize) -> Result<f64> {
    check_sibling(layout, i, c, n)?;
    let own = image.dot(reps.negative(layout, i, c, n));
    let other = image.dot(reps.negative(layout, c, i, n));
    Ok(sigmoid(own - other))
}

/// Sum of [`s_minus`] over every sibling of `i` and feature position.
pub fn p_minus(image: &Vector, reps: &PromptReps, layout: &PromptLayout, i: usize) -> Result<f64> {
    if layout.siblings(i).is_empty() {
        return Err(Error::EmptyNegativeSet(i));
    }
    let mut total = 0.0;
    for &c in layout.siblings(i) {
        for n in 1..=layout.n_features() {
            total += s_minus(image, reps, layout, i, c, n)?;
        }
    }
    Ok(total)
}

fn nir_term(images: &[Vector], labels: &[usize], reps: &PromptReps, layout: &PromptLayout, mut sink: Sink) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let batch = images.len() as f64;
    let n_feat = layout.n_features();
    let mut total = 0.0;
    for (b, (image, &i)) in images.iter().zip(labels).enumerate() {
        let siblings = layout.siblings(i);
        if siblings.is_empty() {
            continue;
        }
        let count = (siblings.len() * n_feat) as f64;
        // (sibling, n, s) for every term of p-
        let mut terms = Vec::with_capacity(siblings.len() * n_feat);
        for &c in siblings {
            for n in 1..=n_feat {
                let own = image.dot(reps.negative(layout, i, c, n));
                let other = image.dot(reps.negative(layout, c, i, n));
                terms.push((c, n, sigmoid(own - other)));
            }
        }
        let p: f64 = terms.iter().map(|t| t.2).sum();
        total += -p.ln() / count;

        if let Some((grads, scale)) = sink.as_mut() {
            for &(c, n, s) in &terms {
                let coef = -*scale / batch / (count * p) * s * (1.0 - s);
                let own_idx = layout.sibling_rank(i, c).unwrap() * n_feat + n - 1;
                let other_idx = layout.sibling_rank(c, i).unwrap() * n_feat + n - 1;
                let own = &reps.vectors[i][own_idx];
                let other = &reps.vectors[c][other_idx];
                grads.images[b].scaled_add(coef, own);
                grads.images[b].scaled_add(-coef, other);
                grads.prompts[i][own_idx].scaled_add(coef, image);
                grads.prompts[c][other_idx].scaled_add(-coef, image);
            }
        }
    }
    total / batch
}

/// Mean over the batch of `-log(p-) / ((s-1) N)`; images whose super-class
/// is a singleton contribute zero.
pub fn loss_nir(images: &[Vector], labels: &[usize], reps: &PromptReps, layout: &PromptLayout) -> f64 {
    nir_term(images, labels, reps, layout, None)
}

fn nnd_term(reps: &PromptReps, layout: &PromptLayout, mut sink: Sink) -> f64 {
    let n = layout.n_features();
    let mut total = 0.0;
    for c in 0..layout.num_categories() {
        for rank in 1..layout.group_size(c) {
            let start = rank * n;
            total += pairwise_abs(&reps.category(c)[start..start + n], (c, start), &mut sink);
        }
    }
    total
}

/// Pairwise |cosine| within each block of negatives borrowed from one sibling.
pub fn loss_nnd(reps: &PromptReps, layout: &PromptLayout) -> f64 {
    nnd_term(reps, layout, None)
}

fn npd_term(reps: &PromptReps, layout: &PromptLayout, mut sink: Sink) -> f64 {
    let n_feat = layout.n_features();
    let mut total = 0.0;
    for c in 0..layout.num_categories() {
        for &d in layout.siblings(c) {
            let neg_base = layout.sibling_rank(d, c).unwrap() * n_feat;
            for k in 0..n_feat {
                let pos = &reps.vectors[c][k];
                let neg = &reps.vectors[d][neg_base + k];
                let dot = pos.dot(neg);
                total += dot.abs();
                if let Some((grads, scale)) = sink.as_mut() {
                    let g = *scale * abs_grad(dot);
                    grads.prompts[c][k].scaled_add(g, neg);
                    grads.prompts[d][neg_base + k].scaled_add(g, pos);
                }
            }
        }
    }
    total
}

/// |cosine| between each positive of `c` and the negative of each sibling
/// `d` that negates the same feature.
pub fn loss_npd(reps: &PromptReps, layout: &PromptLayout) -> f64 {
    npd_term(reps, layout, None)
}

/// Signed cosines of every pair contributing to [`loss_npd`].
pub fn npd_pair_cosines(reps: &PromptReps, layout: &PromptLayout) -> Vec<f64> {
    let n_feat = layout.n_features();
    let mut out = Vec::new();
    for c in 0..layout.num_categories() {
        for &d in layout.siblings(c) {
            let neg_base = layout.sibling_rank(d, c).unwrap() * n_feat;
            for k in 0..n_feat {
                out.push(reps.vectors[c][k].dot(&reps.vectors[d][neg_base + k]));
            }
        }
    }
    out
}

struct Transformed {
    images: Vec<Vector>,
    image_norms: Vec<f64>,
    reps: PromptReps,
    prompt_norms: Vec<Vec<f64>>,
}

fn transform_all(batch: &[LabeledImage], state: &AdapterState, prompts: &PromptEmbeddings) -> Result<Transformed> {
    let d = state.dim();
    if prompts.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: prompts.dim(),
        });
    }
    let split = |w: &Matrix, raw: &Vector| -> Result<(Vector, f64)> {
        if raw.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: raw.len(),
            });
        }
        let z = w.dot(raw);
        let norm = z.dot(&z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok((z / norm, norm))
    };
    let mut images = Vec::with_capacity(batch.len());
    let mut image_norms = Vec::with_capacity(batch.len());
    for item in batch {
        if item.label >= prompts.layout().num_categories() {
            return Err(Error::OutOfRange(format!("label {} has no prompts", item.label)));
        }
        let (u, norm) = split(state.matrix(Side::Image), &item.raw)?;
        images.push(u);
        image_norms.push(norm);
    }
    let mut vectors = Vec::new();
    let mut prompt_norms = Vec::new();
    for row in prompts.raw() {
        let mut vs = Vec::with_capacity(row.len());
        let mut ns = Vec::with_capacity(row.len());
        for raw in row {
            let (v, norm) = split(state.matrix(Side::Text), raw)?;
            vs.push(v);
            ns.push(norm);
        }
        vectors.push(vs);
        prompt_norms.push(ns);
    }
    Ok(Transformed {
        images,
        image_norms,
        reps: PromptReps { vectors },
        prompt_norms,
    })
}

fn evaluate(
    batch: &[LabeledImage],
    state: &AdapterState,
    prompts: &PromptEmbeddings,
    tau: f64,
    weights: &TermWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<AdapterGradient>)> {
    let t = transform_all(batch, state, prompts)?;
    let layout = prompts.layout();
    let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
    let mut grads = want_grad.then(|| RepGrads::zeros(&t.images, &t.reps));
    fn sink(grads: &mut Option<RepGrads>, w: f64) -> Option<(&mut RepGrads, f64)> {
        grads.as_mut().filter(|_| w != 0.0).map(|g| (g, w))
    }

    let pir = pir_term(&t.images, &labels, &t.reps, layout, tau, sink(&mut grads, weights.pir));
    let ppd = ppd_term(&t.reps, layout, sink(&mut grads, weights.ppd));
    let nir = nir_term(&t.images, &labels, &t.reps, layout, sink(&mut grads, weights.nir));
    let nnd = nnd_term(&t.reps, layout, sink(&mut grads, weights.nnd));
    let npd = npd_term(&t.reps, layout, sink(&mut grads, weights.npd));
    let total = weights.pir * pir + weights.ppd * ppd + weights.nir * nir + weights.nnd * nnd + weights.npd * npd;
    let breakdown = LossBreakdown {
        pir,
        ppd,
        nir,
        nnd,
        npd,
        total,
    };

    let gradient = grads.map(|g| {
        let d = state.dim();
        let mut w_image = Array2::<f64>::zeros((d, d));
        for (b, item) in batch.iter().enumerate() {
            let gz = normalize_backward(&t.images[b], t.image_norms[b], &g.images[b]);
            outer_add(&mut w_image, &gz, &item.raw);
        }
        let mut w_text = Array2::<f64>::zeros((d, d));
        for (c, row) in prompts.raw().iter().enumerate() {
            for (k, raw) in row.iter().enumerate() {
                let gz = normalize_backward(&t.reps.vectors[c][k], t.prompt_norms[c][k], &g.prompts[c][k]);
                outer_add(&mut w_text, &gz, raw);
            }
        }
        AdapterGradient { w_text, w_image }
    });
    Ok((breakdown, gradient))
}

fn outer_add(m: &mut Matrix, left: &Vector, right: &Vector) {
    for (i, &l) in left.iter().enumerate() {
        if l != 0.0 {
            m.row_mut(i).scaled_add(l, right);
        }
    }
}

/// All five terms and their weighted total for `state` on `batch`.
pub fn total_adapter_loss(
    batch: &[LabeledImage],
    state: &AdapterState,
    prompts: &PromptEmbeddings,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    evaluate(batch, state, prompts, weights.tau, &weights.terms(), false).map(|r| r.0)
}

/// Weighted objective under arbitrary per-term multipliers.
pub fn weighted_adapter_loss(
    batch: &[LabeledImage],
    state: &AdapterState,
    prompts: &PromptEmbeddings,
    tau: f64,
    terms: &TermWeights,
) -> Result<LossBreakdown> {
    evaluate(batch, state, prompts, tau, terms, false).map(|r| r.0)
}

/// Analytic gradient of the weighted objective with respect to both adapters.
pub fn weighted_adapter_gradients(
    batch: &[LabeledImage],
    state: &AdapterState,
    prompts: &PromptEmbeddings,
    tau: f64,
    terms: &TermWeights,
) -> Result<(LossBreakdown, AdapterGradient)> {
    let (loss, grad) = evaluate(batch, state, prompts, tau, terms, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

pub fn adapter_gradients(
    batch: &[LabeledImage],
    state: &AdapterState,
    prompts: &PromptEmbeddings,
    weights: &LossWeights,
) -> Result<(LossBreakdown, AdapterGradient)> {
    weights.validate()?;
    weighted_adapter_gradients(batch, state, prompts, weights.tau, &weights.terms())
}
