use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use promptood::gradcheck::vig_instance;
use promptood::graph::{build_graph, Edge, MultiModalGraph, TopKConfig};
use promptood::linalg::Vector;
use promptood::vig::{
    energy, grapher_forward, train_vig, vig_forward, vig_gradients, vig_logits, EnergyConfig, Pooling,
    VigTrainConfig, ViGModel,
};

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Array1::from_iter((0..dim).map(|_| {
        let g: f64 = StandardNormal.sample(rng);
        g
    }))
}

fn random_graph(rng: &mut ChaCha8Rng, dim: usize, m: usize, p: usize) -> MultiModalGraph {
    let patches: Vec<Vector> = (0..m).map(|_| gaussian(rng, dim)).collect();
    let prompts: Vec<Vector> = (0..p).map(|_| gaussian(rng, dim)).collect();
    let k = TopKConfig {
        k_text: 2,
        k_patch: 3,
        k_cross: 2,
    };
    build_graph(&patches, &prompts, &k).unwrap()
}

/// Relabels patches by `pp` and prompts by `tp` (old index -> new index).
fn permute(g: &MultiModalGraph, pp: &[usize], tp: &[usize]) -> MultiModalGraph {
    let m = g.num_patches();
    let map = |i: usize| if i < m { pp[i] } else { m + tp[i - m] };
    let mut patches = g.patch_features.clone();
    for (old, &new) in pp.iter().enumerate() {
        patches[new] = g.patch_features[old].clone();
    }
    let mut prompts = g.prompt_features.clone();
    for (old, &new) in tp.iter().enumerate() {
        prompts[new] = g.prompt_features[old].clone();
    }
    let edges = |es: &[Edge]| -> Vec<Edge> {
        es.iter()
            .map(|e| Edge {
                src: map(e.src),
                dst: map(e.dst),
            })
            .collect()
    };
    MultiModalGraph {
        patch_features: patches,
        prompt_features: prompts,
        intra_edges: edges(&g.intra_edges),
        inter_edges: edges(&g.inter_edges),
    }
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn node_permutation_is_equivariant(seed in any::<u64>(), max_pool in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(2..=6);
        let (m, p) = (rng.random_range(2..=7), rng.random_range(0..=5));
        let g = random_graph(&mut rng, dim, m, p);
        let mut model = ViGModel::init(dim, 2 * dim, 2, 3, seed).unwrap();
        model.pooling = if max_pool { Pooling::Max } else { Pooling::Mean };
        let pp = shuffled(&mut rng, g.num_patches());
        let tp = shuffled(&mut rng, g.prompt_features.len());
        let h = permute(&g, &pp, &tp);

        let before = vig_forward(&g, &model);
        let after = vig_forward(&h, &model);
        let m = g.num_patches();
        for (old, row) in before.iter().enumerate() {
            let new = if old < m { pp[old] } else { m + tp[old - m] };
            for (a, b) in row.iter().zip(after[new].iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
        for (a, b) in vig_logits(&g, &model).iter().zip(vig_logits(&h, &model)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn two_layers_compose_single_blocks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(2..=6);
        let (m, p) = (rng.random_range(2..=7), rng.random_range(0..=5));
        let g = random_graph(&mut rng, dim, m, p);
        let model = ViGModel::init(dim, dim + 3, 2, 2, seed).unwrap();
        let nbrs = g.in_neighbors();
        let once = grapher_forward(&g.features(), &nbrs, &model.layers[0]);
        let twice = grapher_forward(&once, &nbrs, &model.layers[1]);
        prop_assert_eq!(vig_forward(&g, &model), twice);
    }

    #[test]
    fn isolated_prompt_has_no_influence(seed in 0u64..500) {
        let inst = vig_instance(seed).unwrap();
        let g = inst.graph;
        prop_assume!(!g.prompt_features.is_empty());
        let lonely = g.node_count() - 1;
        let keep = |e: &&Edge| e.src != lonely && e.dst != lonely;
        let cut = MultiModalGraph {
            intra_edges: g.intra_edges.iter().filter(keep).copied().collect(),
            inter_edges: g.inter_edges.iter().filter(keep).copied().collect(),
            ..g.clone()
        };
        let grads = vig_gradients(&cut, inst.label, &inst.model, &inst.energy).unwrap();
        prop_assert!(grads.inputs[lonely].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn energy_is_bounded_by_the_top_logit(
        logits in prop::collection::vec(-30.0f64..30.0, 1..8),
        t in 0.1f64..4.0,
    ) {
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = energy(&logits, t);
        // -T lse(f/T) lies in [-top - T log C, -top]
        prop_assert!(e <= -top + 1e-9);
        prop_assert!(e >= -top - t * (logits.len() as f64).ln() - 1e-9);
    }
}

fn toy_samples(seed: u64, per_class: usize) -> Vec<(MultiModalGraph, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let centers: Vec<Vector> = (0..3).map(|_| gaussian(&mut rng, dim)).collect();
    let mut out = Vec::new();
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            let patches: Vec<Vector> = (0..4).map(|_| center + &(gaussian(&mut rng, dim) * 0.5)).collect();
            let prompts: Vec<Vector> = (0..2).map(|_| center + &(gaussian(&mut rng, dim) * 0.2)).collect();
            out.push((build_graph(&patches, &prompts, &TopKConfig::default()).unwrap(), c));
        }
    }
    out
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let samples = toy_samples(1, 2);
    let model = ViGModel::init(16, 32, 1, 3, 9).unwrap();
    let run = train_vig(&samples, model.clone(), &VigTrainConfig { epochs: 0, ..Default::default() }).unwrap();
    assert_eq!(run.model, model);
    assert_eq!(run.trace.len(), 1);
}

#[test]
fn unreachable_margin_matches_no_energy_term() {
    let samples = toy_samples(2, 4);
    let model = ViGModel::init(16, 32, 2, 3, 4).unwrap();
    let run = |energy| {
        let cfg = VigTrainConfig {
            energy,
            epochs: 4,
            batch_size: 5,
            ..Default::default()
        };
        train_vig(&samples, model.clone(), &cfg).unwrap()
    };
    let off = run(EnergyConfig {
        margin_in: 1.0,
        lambda_energy: 0.0,
        ..Default::default()
    });
    let unreachable = run(EnergyConfig {
        margin_in: f64::INFINITY,
        lambda_energy: 0.7,
        ..Default::default()
    });
    assert_eq!(off.model, unreachable.model);
    assert_eq!(off.trace, unreachable.trace);
}

#[test]
fn training_reduces_cross_entropy_on_separable_toy_set() {
    let samples = toy_samples(3, 10);
    let model = ViGModel::init(16, 32, 2, 3, 0).unwrap();
    let cfg = VigTrainConfig {
        epochs: 15,
        batch_size: 6,
        ..Default::default()
    };
    let run = train_vig(&samples, model, &cfg).unwrap();
    let first = run.trace[0].mean_cross_entropy;
    let last = run.trace.last().unwrap().mean_cross_entropy;
    assert!(last < 0.5 * first, "cross-entropy {first} -> {last}");
    assert!(run.trace.last().unwrap().accuracy >= 0.9);
}

#[test]
fn training_is_deterministic() {
    let samples = toy_samples(4, 3);
    let model = ViGModel::init(16, 16, 1, 3, 1).unwrap();
    let cfg = VigTrainConfig {
        epochs: 3,
        batch_size: 4,
        ..Default::default()
    };
    assert_eq!(
        train_vig(&samples, model.clone(), &cfg).unwrap(),
        train_vig(&samples, model, &cfg).unwrap()
    );
}
