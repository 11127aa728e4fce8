//! Central finite-difference checks of the analytic gradients on small
//! random instances.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::adapter::{
    weighted_adapter_gradients, weighted_adapter_loss, AdapterState, LabeledImage, PromptEmbeddings, TermWeights,
};
use crate::error::Result;
use crate::graph::{build_graph, MultiModalGraph, TopKConfig};
use crate::linalg::Vector;
use crate::prompts::{PromptLayout, SuperClassPartition};
use crate::vig::{energy, vig_gradients, vig_logits, vig_loss, EnergyConfig, Pooling, ViGModel};

pub const FD_STEP: f64 = 1e-5;
pub const ADAPTER_TERMS: [&str; 5] = ["pir", "ppd", "nir", "nnd", "npd"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub target: String,
    pub instance: usize,
    pub params: usize,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors, with a floor on
/// the denominator so that two vanishing gradients compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

fn central_difference(x: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(x);
            x[i] = orig - step;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    Array1::from_iter((0..dim).map(|_| {
        let g: f64 = StandardNormal.sample(rng);
        scale * g
    }))
}

/// A random adapter problem: partition with groups of size 1 to 3, a few
/// features per category, a small labeled batch and a perturbed identity.
#[derive(Debug, Clone)]
pub struct AdapterInstance {
    pub batch: Vec<LabeledImage>,
    pub state: AdapterState,
    pub prompts: PromptEmbeddings,
    pub tau: f64,
}

pub fn adapter_instance(seed: u64) -> Result<AdapterInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..=8);
    let num_groups = rng.random_range(1..=3);
    let mut groups = Vec::new();
    let mut next = 0;
    for g in 0..num_groups {
        let size = rng.random_range(1..=3);
        let members = (0..size).map(|k| format!("c{}", next + k)).collect();
        next += size;
        groups.push((format!("g{g}"), members));
    }
    let layout = PromptLayout::new(&SuperClassPartition::new(groups), rng.random_range(1..=3))?;
    let raw = (0..layout.num_categories())
        .map(|c| {
            (0..layout.prompt_count(c))
                .map(|_| gaussian_vec(&mut rng, dim, 1.0))
                .collect()
        })
        .collect();
    let prompts = PromptEmbeddings::new(layout, raw)?;
    let batch = (0..rng.random_range(2..=5))
        .map(|_| LabeledImage {
            raw: gaussian_vec(&mut rng, dim, 1.0),
            label: rng.random_range(0..prompts.layout().num_categories()),
        })
        .collect();
    let state = AdapterState::perturbed_identity(dim, 0.3, rng.random());
    let tau = rng.random_range(0.01..0.5);
    Ok(AdapterInstance {
        batch,
        state,
        prompts,
        tau,
    })
}

fn flatten_state(state: &AdapterState) -> Vec<f64> {
    state.w_text.iter().chain(state.w_image.iter()).copied().collect()
}

fn unflatten_state(values: &[f64], dim: usize) -> AdapterState {
    let half = dim * dim;
    let m = |s: &[f64]| Array2::from_shape_vec((dim, dim), s.to_vec()).expect("square");
    AdapterState {
        w_text: m(&values[..half]),
        w_image: m(&values[half..]),
    }
}

/// Checks the gradient of one named term (or `"total"` for all five with
/// unit weights) on `instance`.
pub fn check_adapter(instance: &AdapterInstance, terms: &TermWeights) -> Result<f64> {
    let AdapterInstance {
        batch,
        state,
        prompts,
        tau,
    } = instance;
    let (_, grad) = weighted_adapter_gradients(batch, state, prompts, *tau, terms)?;
    let analytic: Vec<f64> = grad.w_text.iter().chain(grad.w_image.iter()).copied().collect();
    let dim = state.dim();
    let mut x = flatten_state(state);
    let numeric = central_difference(&mut x, FD_STEP, |x| {
        weighted_adapter_loss(batch, &unflatten_state(x, dim), prompts, *tau, terms)
            .map(|l| l.total)
            .unwrap_or(f64::NAN)
    });
    Ok(relative_error(&analytic, &numeric))
}

/// A random ViG problem with active nonlinearities.
#[derive(Debug, Clone)]
pub struct VigInstance {
    pub graph: MultiModalGraph,
    pub label: usize,
    pub model: ViGModel,
    pub energy: EnergyConfig,
}

pub fn vig_instance(seed: u64) -> Result<VigInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_61);
    let dim = rng.random_range(2..=6);
    let hidden = dim + rng.random_range(0..=dim);
    let layers = rng.random_range(1..=2);
    let classes = rng.random_range(2..=4);
    let patches: Vec<Vector> = (0..rng.random_range(2..=6))
        .map(|_| gaussian_vec(&mut rng, dim, 1.0))
        .collect();
    let prompts: Vec<Vector> = (0..rng.random_range(0..=5))
        .map(|_| gaussian_vec(&mut rng, dim, 1.0))
        .collect();
    let k = TopKConfig {
        k_text: rng.random_range(1..=2),
        k_patch: rng.random_range(1..=3),
        k_cross: rng.random_range(1..=2),
    };
    let graph = build_graph(&patches, &prompts, &k)?;
    let mut model = ViGModel::zeros(dim, hidden, layers, classes);
    let n = model.flat_params().len();
    let params: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            0.5 * g
        })
        .collect();
    model.set_flat_params(&params);
    model.pooling = if rng.random_bool(0.5) { Pooling::Mean } else { Pooling::Max };
    let label = rng.random_range(0..classes);
    // Put the margin on either side of the current energy so both branches
    // of the hinge get exercised.
    let temperature = rng.random_range(0.5..2.0);
    let e = energy(&vig_logits(&graph, &model), temperature);
    let offset = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
    let energy = EnergyConfig {
        temperature,
        margin_in: e + offset,
        lambda_energy: rng.random_range(0.05..1.0),
    };
    Ok(VigInstance {
        graph,
        label,
        model,
        energy,
    })
}

/// Relative errors of the parameter gradient and the input-feature gradient.
pub fn check_vig(instance: &VigInstance) -> Result<(f64, f64)> {
    let VigInstance {
        graph,
        label,
        model,
        energy,
    } = instance;
    let grads = vig_gradients(graph, *label, model, energy)?;

    let mut x = model.flat_params();
    let mut probe = model.clone();
    let numeric = central_difference(&mut x, FD_STEP, |x| {
        probe.set_flat_params(x);
        vig_loss(graph, *label, &probe, energy).map(|l| l.total).unwrap_or(f64::NAN)
    });
    let param_err = relative_error(&grads.params.flat_params(), &numeric);

    let dim = graph.dim();
    let m = graph.num_patches();
    let mut feats: Vec<f64> = graph.features().iter().flatten().copied().collect();
    let mut probe_graph = graph.clone();
    let numeric = central_difference(&mut feats, FD_STEP, |x| {
        // Edges stay fixed; only the node features move.
        for (i, chunk) in x.chunks(dim).enumerate() {
            let row = Array1::from(chunk.to_vec());
            if i < m {
                probe_graph.patch_features[i] = row;
            } else {
                probe_graph.prompt_features[i - m] = row;
            }
        }
        vig_loss(&probe_graph, *label, model, energy).map(|l| l.total).unwrap_or(f64::NAN)
    });
    let analytic: Vec<f64> = grads.inputs.iter().flatten().copied().collect();
    Ok((param_err, relative_error(&analytic, &numeric)))
}

/// Runs `instances` random checks for every adapter term and the ViG.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for i in 0..instances {
        let inst = adapter_instance(seed.wrapping_add(i as u64))?;
        let params = 2 * inst.state.dim() * inst.state.dim();
        for term in ADAPTER_TERMS {
            let weights = TermWeights::only(term).expect("known term");
            out.push(GradCheck {
                target: term.to_string(),
                instance: i,
                params,
                rel_error: check_adapter(&inst, &weights)?,
            });
        }
        let v = vig_instance(seed.wrapping_add(i as u64))?;
        let (p, f) = check_vig(&v)?;
        out.push(GradCheck {
            target: "vig".into(),
            instance: i,
            params: v.model.flat_params().len(),
            rel_error: p,
        });
        out.push(GradCheck {
            target: "vig_inputs".into(),
            instance: i,
            params: v.graph.node_count() * v.graph.dim(),
            rel_error: f,
        });
    }
    Ok(out)
}
