//! Isotropic vision-GNN over a fixed multi-modal graph.
//!
//! Each grapher block applies a max-relative graph convolution and a
//! feed-forward sub-block, both residual:
//!
//! ```text
//! m_i = max_{j in N(i)} (h_j - h_i)            (elementwise, 0 if N(i) is empty)
//! u_i = W2 relu(W1 [h_i; m_i] + b1) + b2 + h_i
//! o_i = F2 relu(F1 u_i + c1) + c2 + u_i
//! ```
//!
//! Patch nodes are pooled into a graph vector and a linear head produces
//! class logits. Gradients are computed by a hand-written reverse pass.

mod checkpoint;
mod train;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::MultiModalGraph;
use crate::linalg::{log_sum_exp, softmax, Matrix, Vector};

pub use checkpoint::{load_vig, read_vig, save_vig, write_vig};
pub use train::{evaluate_vig, train_vig, vig_trace_csv, VigEpoch, VigRun, VigTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrapherLayer {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub f1: Matrix,
    pub c1: Vector,
    pub f2: Matrix,
    pub c2: Vector,
}

impl GrapherLayer {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((dim, 2 * dim)),
            b1: Array1::zeros(dim),
            w2: Array2::zeros((dim, dim)),
            b2: Array1::zeros(dim),
            f1: Array2::zeros((hidden, dim)),
            c1: Array1::zeros(hidden),
            f2: Array2::zeros((dim, hidden)),
            c2: Array1::zeros(dim),
        }
    }

    fn arrays(&self) -> [&[f64]; 8] {
        [
            slice(&self.w1),
            self.b1.as_slice().unwrap(),
            slice(&self.w2),
            self.b2.as_slice().unwrap(),
            slice(&self.f1),
            self.c1.as_slice().unwrap(),
            slice(&self.f2),
            self.c2.as_slice().unwrap(),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.f1.as_slice_mut().unwrap(),
            self.c1.as_slice_mut().unwrap(),
            self.f2.as_slice_mut().unwrap(),
            self.c2.as_slice_mut().unwrap(),
        ]
    }
}

fn slice(m: &Matrix) -> &[f64] {
    m.as_slice().expect("standard layout")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViGModel {
    pub layers: Vec<GrapherLayer>,
    pub head_w: Matrix,
    pub head_b: Vector,
    pub pooling: Pooling,
}

impl ViGModel {
    pub fn zeros(dim: usize, hidden: usize, num_layers: usize, num_classes: usize) -> Self {
        Self {
            layers: (0..num_layers).map(|_| GrapherLayer::zeros(dim, hidden)).collect(),
            head_w: Array2::zeros((num_classes, dim)),
            head_b: Array1::zeros(num_classes),
            pooling: Pooling::Mean,
        }
    }

    /// Gaussian initialization scaled by fan-in; biases start at zero and
    /// the residual branch outputs are damped so the stack starts close to
    /// the identity.
    pub fn init(dim: usize, hidden: usize, num_layers: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_layers == 0 || num_classes == 0 {
            return Err(Error::Invalid("ViG needs positive dim, depth and class count".into()));
        }
        if hidden < dim {
            return Err(Error::Invalid(format!("hidden width {hidden} is below the feature width {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut Matrix, scale: f64| {
            m.mapv_inplace(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
        };
        let mut model = Self::zeros(dim, hidden, num_layers, num_classes);
        for layer in &mut model.layers {
            fill(&mut layer.w1, (1.0 / (2 * dim) as f64).sqrt());
            fill(&mut layer.w2, 0.5 * (1.0 / dim as f64).sqrt());
            fill(&mut layer.f1, (1.0 / dim as f64).sqrt());
            fill(&mut layer.f2, 0.5 * (1.0 / hidden as f64).sqrt());
        }
        fill(&mut model.head_w, (1.0 / dim as f64).sqrt());
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.head_w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map(|l| l.f1.nrows()).unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.head_w.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// All parameters in checkpoint order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.layers.iter().flat_map(|l| l.arrays()).collect();
        out.push(slice(&self.head_w));
        out.push(self.head_b.as_slice().unwrap());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.layers.iter_mut().flat_map(|l| l.arrays_mut()).collect();
        out.push(self.head_w.as_slice_mut().unwrap());
        out.push(self.head_b.as_slice_mut().unwrap());
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        assert_eq!(offset, values.len(), "parameter count mismatch");
    }

    /// `self += alpha * other` over every parameter.
    pub fn add_scaled(&mut self, alpha: f64, other: &ViGModel) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dim(), self.hidden(), self.num_layers(), self.num_classes());
        z.pooling = self.pooling;
        z
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn check_graph(&self, graph: &MultiModalGraph) -> Result<()> {
        if graph.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: graph.dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub temperature: f64,
    pub margin_in: f64,
    pub lambda_energy: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            margin_in: 10.0,
            lambda_energy: 0.1,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invalid("energy temperature must be positive".into()));
        }
        if !(self.lambda_energy >= 0.0) {
            return Err(Error::Invalid("lambda_energy must be non-negative".into()));
        }
        if self.margin_in.is_nan() {
            return Err(Error::Invalid("m_in must be a number".into()));
        }
        Ok(())
    }
}

/// `-T log sum_i exp(f_i / T)`.
pub fn energy(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|f| f / temperature).collect();
    -temperature * log_sum_exp(&scaled)
}

/// Node features as rows.
fn stack(features: &[Vector], dim: usize) -> Matrix {
    let mut m = Array2::zeros((features.len(), dim));
    for (i, f) in features.iter().enumerate() {
        m.row_mut(i).assign(f);
    }
    m
}

const NO_ARGMAX: usize = usize::MAX;

/// Intermediate values of one grapher block kept for the reverse pass.
struct LayerCache {
    input: Matrix,
    argmax: Vec<usize>,
    concat: Matrix,
    pre1: Matrix,
    relu1: Matrix,
    mid: Matrix,
    pre2: Matrix,
    relu2: Matrix,
}

fn relu(m: &Matrix) -> Matrix {
    m.mapv(|x| x.max(0.0))
}

fn add_row(m: &mut Matrix, bias: &Vector) {
    for mut row in m.rows_mut() {
        row += bias;
    }
}

fn max_relative(h: &Matrix, neighbors: &[Vec<usize>]) -> (Matrix, Vec<usize>) {
    let (n, d) = h.dim();
    let mut m = Array2::zeros((n, d));
    let mut argmax = vec![NO_ARGMAX; n * d];
    for (i, js) in neighbors.iter().enumerate() {
        if js.is_empty() {
            continue;
        }
        for k in 0..d {
            let mut best = js[0];
            let mut best_val = h[[best, k]] - h[[i, k]];
            for &j in &js[1..] {
                let v = h[[j, k]] - h[[i, k]];
                if v > best_val {
                    best = j;
                    best_val = v;
                }
            }
            m[[i, k]] = best_val;
            argmax[i * d + k] = best;
        }
    }
    (m, argmax)
}

fn layer_forward(layer: &GrapherLayer, h: &Matrix, neighbors: &[Vec<usize>]) -> (Matrix, LayerCache) {
    let (m, argmax) = max_relative(h, neighbors);
    let concat = concatenate(Axis(1), &[h.view(), m.view()]).expect("same row count");
    let mut pre1 = concat.dot(&layer.w1.t());
    add_row(&mut pre1, &layer.b1);
    let relu1 = relu(&pre1);
    let mut mid = relu1.dot(&layer.w2.t());
    add_row(&mut mid, &layer.b2);
    mid += h;
    let mut pre2 = mid.dot(&layer.f1.t());
    add_row(&mut pre2, &layer.c1);
    let relu2 = relu(&pre2);
    let mut out = relu2.dot(&layer.f2.t());
    add_row(&mut out, &layer.c2);
    out += &mid;
    let cache = LayerCache {
        input: h.clone(),
        argmax,
        concat,
        pre1,
        relu1,
        mid,
        pre2,
        relu2,
    };
    (out, cache)
}

/// One grapher block applied to `features` over `neighbors` (in-neighbor lists).
pub fn grapher_forward(features: &[Vector], neighbors: &[Vec<usize>], layer: &GrapherLayer) -> Vec<Vector> {
    let dim = layer.w2.nrows();
    let (out, _) = layer_forward(layer, &stack(features, dim), neighbors);
    out.rows().into_iter().map(|r| r.to_owned()).collect()
}

/// Node representations after every grapher block.
pub fn vig_forward(graph: &MultiModalGraph, model: &ViGModel) -> Vec<Vector> {
    let neighbors = graph.in_neighbors();
    let mut h = stack(&graph.features(), model.dim());
    for layer in &model.layers {
        h = layer_forward(layer, &h, &neighbors).0;
    }
    h.rows().into_iter().map(|r| r.to_owned()).collect()
}

fn pool_rows(h: &Matrix, count: usize, pooling: Pooling) -> (Vector, Vec<usize>) {
    let patches = h.slice(s![..count, ..]);
    match pooling {
        Pooling::Mean => (patches.mean_axis(Axis(0)).expect("at least one patch"), Vec::new()),
        Pooling::Max => {
            let d = h.ncols();
            let mut arg = vec![0; d];
            let mut out = Array1::zeros(d);
            for k in 0..d {
                let mut best = 0;
                for i in 1..count {
                    if patches[[i, k]] > patches[[best, k]] {
                        best = i;
                    }
                }
                arg[k] = best;
                out[k] = patches[[best, k]];
            }
            (out, arg)
        }
    }
}

/// Graph-level vector from the first `patch_count` node representations.
pub fn pool_patches(node_reps: &[Vector], patch_count: usize, pooling: Pooling) -> Vector {
    assert!(patch_count >= 1 && patch_count <= node_reps.len());
    let dim = node_reps[0].len();
    pool_rows(&stack(&node_reps[..patch_count], dim), patch_count, pooling).0
}

pub fn head_logits(model: &ViGModel, pooled: &Vector) -> Vec<f64> {
    (model.head_w.dot(pooled) + &model.head_b).to_vec()
}

/// Head logits for a graph.
pub fn vig_logits(graph: &MultiModalGraph, model: &ViGModel) -> Vec<f64> {
    let reps = vig_forward(graph, model);
    head_logits(model, &pool_patches(&reps, graph.num_patches(), model.pooling))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VigLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub energy: f64,
    /// `relu(E - m_in)^2`, before weighting by lambda.
    pub energy_penalty: f64,
    pub logits: Vec<f64>,
}

/// Cross-entropy of the softmaxed logits plus `lambda * relu(E - m_in)^2`.
pub fn loss_from_logits(logits: &[f64], label: usize, config: &EnergyConfig) -> VigLoss {
    let ce = log_sum_exp(logits) - logits[label];
    let e = energy(logits, config.temperature);
    let excess = (e - config.margin_in).max(0.0);
    let penalty = excess * excess;
    VigLoss {
        total: ce + config.lambda_energy * penalty,
        cross_entropy: ce,
        energy: e,
        energy_penalty: penalty,
        logits: logits.to_vec(),
    }
}

fn logits_gradient(logits: &[f64], label: usize, config: &EnergyConfig) -> Vec<f64> {
    let probs = softmax(logits);
    let scaled: Vec<f64> = logits.iter().map(|f| f / config.temperature).collect();
    let tempered = softmax(&scaled);
    let e = energy(logits, config.temperature);
    let excess = (e - config.margin_in).max(0.0);
    probs
        .iter()
        .zip(&tempered)
        .enumerate()
        .map(|(i, (p, t))| {
            let ce = p - if i == label { 1.0 } else { 0.0 };
            // dE/df_i = -softmax(f / T)_i
            ce - config.lambda_energy * 2.0 * excess * t
        })
        .collect()
}

pub fn vig_loss(graph: &MultiModalGraph, label: usize, model: &ViGModel, config: &EnergyConfig) -> Result<VigLoss> {
    model.check_graph(graph)?;
    check_label(label, model)?;
    Ok(loss_from_logits(&vig_logits(graph, model), label, config))
}

fn check_label(label: usize, model: &ViGModel) -> Result<()> {
    if label >= model.num_classes() {
        return Err(Error::OutOfRange(format!(
            "label {label} with {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VigGradients {
    pub loss: VigLoss,
    /// Same shape as the model.
    pub params: ViGModel,
    /// Gradient with respect to the input node features, in node order.
    pub inputs: Vec<Vector>,
}

/// Exact reverse-mode gradients of [`vig_loss`].
pub fn vig_gradients(
    graph: &MultiModalGraph,
    label: usize,
    model: &ViGModel,
    config: &EnergyConfig,
) -> Result<VigGradients> {
    model.check_graph(graph)?;
    check_label(label, model)?;
    let neighbors = graph.in_neighbors();
    let d = model.dim();
    let mut h = stack(&graph.features(), d);
    let mut caches = Vec::with_capacity(model.num_layers());
    for layer in &model.layers {
        let (out, cache) = layer_forward(layer, &h, &neighbors);
        caches.push(cache);
        h = out;
    }
    let m = graph.num_patches();
    let (pooled, pool_arg) = pool_rows(&h, m, model.pooling);
    let logits = head_logits(model, &pooled);
    let loss = loss_from_logits(&logits, label, config);

    let mut grads = model.zeros_like();
    let dlogits = Array1::from(logits_gradient(&logits, label, config));
    for (c, &g) in dlogits.iter().enumerate() {
        grads.head_w.row_mut(c).scaled_add(g, &pooled);
    }
    grads.head_b.assign(&dlogits);
    let dpooled = model.head_w.t().dot(&dlogits);

    let mut dh = Array2::<f64>::zeros(h.dim());
    match model.pooling {
        Pooling::Mean => {
            let share = &dpooled / m as f64;
            for i in 0..m {
                dh.row_mut(i).assign(&share);
            }
        }
        Pooling::Max => {
            for (k, &i) in pool_arg.iter().enumerate() {
                dh[[i, k]] += dpooled[k];
            }
        }
    }

    for ((layer, cache), glayer) in model.layers.iter().zip(&caches).zip(&mut grads.layers).rev() {
        dh = layer_backward(layer, cache, &dh, glayer);
    }
    let inputs = dh.rows().into_iter().map(|r| r.to_owned()).collect();
    Ok(VigGradients {
        loss,
        params: grads,
        inputs,
    })
}

fn relu_mask(grad: &Matrix, pre: &Matrix) -> Matrix {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

fn layer_backward(layer: &GrapherLayer, cache: &LayerCache, dout: &Matrix, g: &mut GrapherLayer) -> Matrix {
    let d = layer.w2.nrows();
    // feed-forward sub-block
    let mut dmid = dout.clone();
    g.f2 += &dout.t().dot(&cache.relu2);
    g.c2 += &dout.sum_axis(Axis(0));
    let dpre2 = relu_mask(&dout.dot(&layer.f2), &cache.pre2);
    g.f1 += &dpre2.t().dot(&cache.mid);
    g.c1 += &dpre2.sum_axis(Axis(0));
    dmid += &dpre2.dot(&layer.f1);

    // graph-convolution sub-block
    let mut dh = dmid.clone();
    g.w2 += &dmid.t().dot(&cache.relu1);
    g.b2 += &dmid.sum_axis(Axis(0));
    let dpre1 = relu_mask(&dmid.dot(&layer.w2), &cache.pre1);
    g.w1 += &dpre1.t().dot(&cache.concat);
    g.b1 += &dpre1.sum_axis(Axis(0));
    let dconcat = dpre1.dot(&layer.w1);
    dh += &dconcat.slice(s![.., ..d]);

    let dmax = dconcat.slice(s![.., d..]);
    let n = cache.input.nrows();
    for i in 0..n {
        for k in 0..d {
            let j = cache.argmax[i * d + k];
            if j == NO_ARGMAX {
                continue;
            }
            let gm = dmax[[i, k]];
            dh[[j, k]] += gm;
            dh[[i, k]] -= gm;
        }
    }
    dh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, TopKConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_params_isolated_node_is_identity() {
        let layer = GrapherLayer::zeros(3, 4);
        let x = vec![array![0.5, -1.0, 2.0]];
        assert_eq!(grapher_forward(&x, &[vec![]], &layer), x);
    }

    #[test]
    fn identical_neighbors_give_zero_message() {
        let mut layer = GrapherLayer::zeros(2, 2);
        layer.w1 = array![[0.3, -0.2, 1.0, 0.5], [0.1, 0.4, -0.7, 0.2]];
        layer.w2 = array![[1.0, 0.5], [-0.5, 1.0]];
        let h = array![0.2, 0.9];
        let one = grapher_forward(&[h.clone(), h.clone()], &[vec![1], vec![0]], &layer);
        let many = grapher_forward(
            &[h.clone(), h.clone(), h.clone(), h.clone()],
            &[vec![1, 2, 3], vec![0], vec![0], vec![0]],
            &layer,
        );
        let alone = grapher_forward(&[h.clone()], &[vec![]], &layer);
        assert_eq!(one[0], many[0]);
        assert_eq!(one[0], alone[0]);
    }

    #[test]
    fn two_node_path_by_hand() {
        // d = 2, hidden = 2
        let layer = GrapherLayer {
            w1: array![[1.0, 0.0, 1.0, 0.0], [0.0, -1.0, 0.0, 2.0]],
            b1: array![0.0, 0.5],
            w2: array![[1.0, 1.0], [0.0, 1.0]],
            b2: array![0.1, 0.0],
            f1: array![[1.0, 0.0], [0.0, 1.0]],
            c1: array![0.0, -10.0],
            f2: array![[2.0, 0.0], [0.0, 3.0]],
            c2: array![0.0, 0.0],
        };
        let h0 = array![1.0, 2.0];
        let h1 = array![3.0, 1.0];
        let out = grapher_forward(&[h0.clone(), h1.clone()], &[vec![1], vec![0]], &layer);
        // node 0: m = h1 - h0 = [2, -1]
        //   pre1 = [1 + 2, -2 + (-2) + 0.5] = [3, -3.5] -> relu [3, 0]
        //   u = [3 + 0 + 0.1, 0] + h0 = [4.1, 2]
        //   pre2 = [4.1, 2 - 10] -> relu [4.1, 0]; out = [8.2, 0] + u = [12.3, 2]
        assert_abs_diff_eq!(out[0][0], 12.3, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0][1], 2.0, epsilon = 1e-12);
        // node 1: m = h0 - h1 = [-2, 1]
        //   pre1 = [3 - 2, -1 + 2 + 0.5] = [1, 1.5] -> relu [1, 1.5]
        //   u = [1 + 1.5 + 0.1, 1.5] + h1 = [5.6, 2.5]
        //   pre2 = [5.6, -7.5] -> [5.6, 0]; out = [11.2, 0] + u = [16.8, 2.5]
        assert_abs_diff_eq!(out[1][0], 16.8, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1][1], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_model_is_identity() {
        let patches = vec![array![1.0, 0.0], array![0.0, 1.0], array![0.6, 0.8]];
        let g = build_graph(&patches, &[array![0.5, 0.5]], &TopKConfig::default()).unwrap();
        let model = ViGModel::zeros(2, 2, 3, 2);
        assert_eq!(vig_forward(&g, &model), g.features());
    }

    #[test]
    fn pooling() {
        let reps = vec![array![1.0, 0.0], array![0.0, 1.0], array![9.0, 9.0]];
        assert_eq!(pool_patches(&reps, 2, Pooling::Mean), array![0.5, 0.5]);
        assert_eq!(pool_patches(&reps, 1, Pooling::Mean), array![1.0, 0.0]);
        assert_eq!(pool_patches(&reps, 2, Pooling::Max), array![1.0, 1.0]);
        let mut perturbed = reps.clone();
        perturbed[2] = array![-5.0, 3.0];
        assert_eq!(pool_patches(&perturbed, 2, Pooling::Mean), pool_patches(&reps, 2, Pooling::Mean));
    }

    #[test]
    fn energy_values() {
        assert_eq!(energy(&[0.0], 1.0), 0.0);
        for a in [-3.0, 0.5, 40.0] {
            assert_abs_diff_eq!(energy(&[a], 1.0), -a, epsilon = 1e-12);
            assert_abs_diff_eq!(energy(&[a], 2.5), -a, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(energy(&[1.0, 1.0], 1.0), -(1.0 + 2f64.ln()), epsilon = 1e-12);
        assert!(energy(&[1000.0, 999.0], 1.0).is_finite());
    }

    #[test]
    fn loss_values() {
        let cfg = EnergyConfig {
            temperature: 1.0,
            margin_in: 10.0,
            lambda_energy: 0.0,
        };
        let l = loss_from_logits(&[0.3; 4], 2, &cfg);
        assert_abs_diff_eq!(l.total, 4f64.ln(), epsilon = 1e-12);

        let cfg = EnergyConfig {
            temperature: 1.0,
            margin_in: -10.0,
            lambda_energy: 1.0,
        };
        let l = loss_from_logits(&[5.0, 0.0, 0.0], 0, &cfg);
        let e = -(5f64.exp() + 2.0).ln();
        let ce = (5f64.exp() + 2.0).ln() - 5.0;
        assert_abs_diff_eq!(l.energy, e, epsilon = 1e-12);
        assert_abs_diff_eq!(l.total, ce + (e + 10.0).powi(2), epsilon = 1e-12);

        // energy below the margin contributes nothing
        let cfg = EnergyConfig {
            margin_in: 10.0,
            ..cfg
        };
        let l = loss_from_logits(&[5.0, 0.0, 0.0], 0, &cfg);
        assert_eq!(l.energy_penalty, 0.0);
        assert_abs_diff_eq!(l.total, ce, epsilon = 1e-12);
    }

    #[test]
    fn init_validates_widths() {
        assert!(ViGModel::init(4, 3, 1, 2, 0).is_err());
        assert!(ViGModel::init(4, 4, 0, 2, 0).is_err());
        let m = ViGModel::init(4, 8, 2, 3, 0).unwrap();
        assert_eq!(m.flat_params().len(), 2 * (4 * 8 + 4 + 16 + 4 + 32 + 8 + 32 + 4) + 12 + 3);
    }

    #[test]
    fn flat_params_round_trip() {
        let m = ViGModel::init(3, 4, 2, 2, 5).unwrap();
        let mut z = m.zeros_like();
        z.set_flat_params(&m.flat_params());
        assert_eq!(z, m);
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_gradient() {
        let patches = vec![array![1.0, 0.0], array![0.9, 0.1]];
        let g = build_graph(&patches, &[], &TopKConfig::default()).unwrap();
        let mut model = ViGModel::zeros(2, 2, 1, 2);
        model.head_w = array![[60.0, 0.0], [-60.0, 0.0]];
        let cfg = EnergyConfig {
            lambda_energy: 0.0,
            ..EnergyConfig::default()
        };
        let grads = vig_gradients(&g, 0, &model, &cfg).unwrap();
        let norm: f64 = grads.params.flat_params().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }
}
