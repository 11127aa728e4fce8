//! Table-level glue between the stages: adapters, per-sample graphs, ViG
//! training and scoring.

use rayon::prelude::*;

use crate::adapter::{optimize_adapters, AdapterRun, AdapterState, LabeledImage, PromptEmbeddings, PromptReps};
use crate::config::RunConfig;
use crate::detect::{
    id_accuracy, pooled_patch_rep, predict_category, sample_graph, transform_patches, MetricReport, ScoreRecord,
    Scorer,
};
use crate::error::{Error, Result};
use crate::graph::MultiModalGraph;
use crate::prompts::{PromptLayout, SuperClassPartition};
use crate::store::{synth_dataset, synth_ood, synth_prompt_table, synth_samples, EmbeddingTable, SynthSpec};
use crate::vig::{train_vig, VigRun, ViGModel};

/// A graph together with the sample it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGraph {
    pub name: String,
    /// Ground-truth category, `None` for unlabeled samples.
    pub label: Option<usize>,
    /// Category whose prompt set was attached.
    pub prompt_category: usize,
    pub graph: MultiModalGraph,
}

fn label_of(label: i32, layout: &PromptLayout, name: &str) -> Result<Option<usize>> {
    match usize::try_from(label) {
        Ok(l) if l < layout.num_categories() => Ok(Some(l)),
        Ok(_) => Err(Error::OutOfRange(format!("record {name:?} has label {label}"))),
        Err(_) => Ok(None),
    }
}

/// One graph per patch-set record.
///
/// Labeled samples get their own category's prompt set; unlabeled ones get
/// the predicted category's, exactly as at scoring time.
pub fn build_sample_graphs(
    patches: &EmbeddingTable,
    layout: &PromptLayout,
    reps: &PromptReps,
    state: &AdapterState,
    config: &RunConfig,
) -> Result<Vec<SampleGraph>> {
    let topk = config.topk();
    topk.validate()?;
    patches
        .records()
        .par_iter()
        .map(|r| {
            let label = label_of(r.label, layout, &r.name)?;
            let transformed = transform_patches(&r.vectors_f64(), state)?;
            let category = match label {
                Some(l) => l,
                None => predict_category(&pooled_patch_rep(&transformed)?, reps, layout, config.tau).0,
            };
            Ok(SampleGraph {
                name: r.name.clone(),
                label,
                prompt_category: category,
                graph: sample_graph(&transformed, reps, category, &topk)?,
            })
        })
        .collect()
}

/// Trains a freshly initialized ViG on every labeled graph.
pub fn train_vig_on(graphs: &[SampleGraph], num_classes: usize, config: &RunConfig) -> Result<VigRun> {
    let samples: Vec<(MultiModalGraph, usize)> = graphs
        .iter()
        .filter_map(|g| g.label.map(|l| (g.graph.clone(), l)))
        .collect();
    let dim = samples
        .first()
        .map(|(g, _)| g.dim())
        .ok_or_else(|| Error::Invalid("no labeled graphs to train on".into()))?;
    if let Some((g, _)) = samples.iter().find(|(g, _)| g.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: g.dim(),
        });
    }
    let mut model = ViGModel::init(dim, config.hidden_for(dim), config.vig_layers, num_classes, config.seed)?;
    model.pooling = config.pooling;
    train_vig(&samples, model, &config.vig())
}

/// Scores every record of `patches`; `images` supplies global embeddings
/// by name when stage 1 reads them. Output order follows `patches`.
pub fn score_table(scorer: &Scorer<'_>, patches: &EmbeddingTable, images: Option<&EmbeddingTable>) -> Result<Vec<ScoreRecord>> {
    patches
        .records()
        .par_iter()
        .map(|r| {
            let global = images.and_then(|t| t.get(&r.name)).map(|g| g.first_f64());
            scorer.score(&r.name, &r.vectors_f64(), global.as_ref(), r.label >= 0)
        })
        .collect()
}

/// ID accuracy of the `predicted` column against labels in `truth`,
/// matched by record name. Only ID records take part.
pub fn prediction_accuracy(records: &[ScoreRecord], truth: &EmbeddingTable, layout: &PromptLayout) -> Result<f64> {
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for r in records.iter().filter(|r| r.is_id) {
        let t = truth
            .get(&r.name)
            .ok_or_else(|| Error::Invalid(format!("no label for {:?}", r.name)))?;
        let label = label_of(t.label, layout, &t.name)?
            .ok_or_else(|| Error::Invalid(format!("{:?} is marked ID but has no label", r.name)))?;
        predicted.push(r.predicted.as_str());
        actual.push(layout.category_name(label));
    }
    id_accuracy(&predicted, &actual)
}

pub fn split_scores(records: &[ScoreRecord]) -> (Vec<f64>, Vec<f64>) {
    let id = records.iter().filter(|r| r.is_id).map(|r| r.score).collect();
    let ood = records.iter().filter(|r| !r.is_id).map(|r| r.score).collect();
    (id, ood)
}

/// Shape of a synthetic end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSetup {
    pub data: SynthSpec,
    pub super_classes: usize,
    pub test_per_class: usize,
    pub ood_means: usize,
    pub ood_per_mean: usize,
    pub prompt_spread: f64,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        Self {
            data: SynthSpec {
                num_classes: 6,
                per_class: 30,
                dim: 32,
                patches_per_image: 8,
                cluster_spread: 0.15,
                seed: 0,
            },
            super_classes: 2,
            test_per_class: 20,
            ood_means: 2,
            ood_per_mean: 60,
            prompt_spread: 0.15,
        }
    }
}

/// Every table a synthetic run reads.
#[derive(Debug, Clone)]
pub struct SyntheticTables {
    pub partition: SuperClassPartition,
    pub layout: PromptLayout,
    pub prompts: EmbeddingTable,
    pub train_images: EmbeddingTable,
    pub train_patches: EmbeddingTable,
    /// Held-out ID samples followed by OOD samples.
    pub test_images: EmbeddingTable,
    pub test_patches: EmbeddingTable,
}

/// Stream used for held-out ID test samples.
pub const TEST_STREAM: u64 = 500;

pub fn synthetic_tables(setup: &SyntheticSetup, n_features: usize) -> Result<SyntheticTables> {
    let data = synth_dataset(&setup.data)?;
    let categories: Vec<String> = data.means.records().iter().map(|r| r.name.clone()).collect();
    let partition = SuperClassPartition::contiguous(&categories, setup.super_classes)?;
    let layout = PromptLayout::new(&partition, n_features)?;
    let means = data.mean_vectors();
    let prompts = synth_prompt_table(&means, &layout, setup.prompt_spread, setup.data.seed)?;
    let (mut test_images, mut test_patches) =
        synth_samples(&setup.data, &means, setup.test_per_class, TEST_STREAM, "t", None)?;
    let (ood_images, ood_patches) = synth_ood(&setup.data, setup.ood_means, setup.ood_per_mean)?;
    for r in ood_images.records() {
        test_images.push(r.clone())?;
    }
    for r in ood_patches.records() {
        test_patches.push(r.clone())?;
    }
    Ok(SyntheticTables {
        partition,
        layout,
        prompts,
        train_images: data.images,
        train_patches: data.patches,
        test_images,
        test_patches,
    })
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub adapters: AdapterRun,
    pub vig: VigRun,
    pub scores: Vec<ScoreRecord>,
    pub report: MetricReport,
}

/// Adapters, graphs, ViG and scoring over in-memory tables.
pub fn run_end_to_end(tables: &SyntheticTables, config: &RunConfig) -> Result<EndToEnd> {
    config.validate()?;
    let layout = &tables.layout;
    let prompts = PromptEmbeddings::from_table(&tables.prompts, layout)?;
    let images = LabeledImage::from_table(&tables.train_images, layout.num_categories())?;
    let adapters = optimize_adapters(&images, &prompts, &config.adapter(), None)?;
    let reps = prompts.transform(&adapters.state)?;
    let graphs = build_sample_graphs(&tables.train_patches, layout, &reps, &adapters.state, config)?;
    let vig = train_vig_on(&graphs, layout.num_categories(), config)?;
    let scorer = Scorer {
        layout,
        reps: &reps,
        state: &adapters.state,
        model: &vig.model,
        topk: config.topk(),
        tau: config.tau,
        temperature: config.t_energy,
        mode: config.score,
        stage1: config.stage1,
    };
    let scores = score_table(&scorer, &tables.test_patches, Some(&tables.test_images))?;
    let (id, ood) = split_scores(&scores);
    let acc = prediction_accuracy(&scores, &tables.test_patches, layout)?;
    let report = MetricReport::compute(&id, &ood, Some(acc))?;
    Ok(EndToEnd {
        adapters,
        vig,
        scores,
        report,
    })
}
