//! Command-line front end. Exit codes: 0 success, 1 usage or validation
//! error, 2 I/O error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapter::{load_adapters, loss_trace_csv, optimize_adapters, save_adapters, LabeledImage, PromptEmbeddings};
use crate::config::{load_config, RunConfig};
use crate::detect::{parse_scores, export_scores, MetricReport, ScoreRecord, Scorer};
use crate::error::{Error, Result};
use crate::gradcheck::run_gradcheck;
use crate::pipeline::{build_sample_graphs, prediction_accuracy, score_table, split_scores, train_vig_on, TEST_STREAM};
use crate::prompts::{
    build_prompts, emit_queries, ingest_features, validate_partition, FeatureBank, PromptLayout, SuperClassPartition,
};
use crate::store::{load_table, save_table, synth_dataset, synth_ood, synth_prompt_table, synth_samples, EmbeddingTable, SynthSpec};
use crate::vig::{load_vig, save_vig, vig_trace_csv};

#[derive(Debug, Parser)]
#[command(name = "promptood", version, about = "Prompt-supervised OOD detection over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print one feature query per category.
    GenQueries {
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand a feature file into the positive/negative prompt bank.
    BuildPrompts {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the text and image adapters.
    OptimizeAdapters {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        prompts: PromptArgs,
        /// Global image embeddings with category labels.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss breakdown as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Dump the per-sample graphs as JSON.
    BuildGraphs {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the graph network on labeled patch sets.
    TrainVig {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss and accuracy as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score patch sets; records with label -1 are marked OOD.
    Score {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long)]
        patches: PathBuf,
        /// Global embeddings, needed when `stage1 = global`.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        vig: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute AUROC, AUPR, FPR95 and ID accuracy from score files.
    Eval {
        /// One score file split by its is_id column.
        #[arg(long, conflicts_with_all = ["id", "ood"])]
        scores: Option<PathBuf>,
        /// Score file whose rows are all treated as ID.
        #[arg(long, requires = "ood")]
        id: Option<PathBuf>,
        /// Score file whose rows are all treated as OOD.
        #[arg(long, requires = "id")]
        ood: Option<PathBuf>,
        /// Table holding ground-truth labels for ID accuracy.
        #[arg(long, requires = "partition")]
        labels: Option<PathBuf>,
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Write synthetic embedding tables.
    Synth(SynthArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Super-class JSON: group name -> category names.
    #[arg(long)]
    pub partition: PathBuf,
    /// Prompt embeddings named `{category}#{flat_index}`.
    #[arg(long)]
    pub prompts: PathBuf,
}

impl PromptArgs {
    fn load(&self, cfg: &RunConfig) -> Result<(PromptLayout, PromptEmbeddings)> {
        let partition = load_partition(&self.partition)?;
        let layout = PromptLayout::new(&partition, cfg.n_features)?;
        let prompts = PromptEmbeddings::from_table(&load_table(&self.prompts)?, &layout)?;
        Ok((layout, prompts))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub patches: usize,
    #[arg(long, default_value_t = 0.15)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Also write a partition, feature file, prompt bank and prompt embeddings.
    #[arg(long)]
    pub super_classes: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub n_features: usize,
    /// Held-out ID samples per class, written with the OOD samples.
    #[arg(long, default_value_t = 0)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub ood_means: usize,
    #[arg(long, default_value_t = 0)]
    pub ood_per_mean: usize,
}

/// Reads a super-class file and rejects repeated categories and empty groups.
fn load_partition(path: &Path) -> Result<SuperClassPartition> {
    let partition = SuperClassPartition::from_json(&fs::read_to_string(path)?)?;
    validate_partition(&partition, &partition.categories()).map_err(Error::InvalidPartition)?;
    Ok(partition)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenQueries { partition, out } => {
            let text = emit_queries(&load_partition(&partition)?)?;
            match out {
                Some(p) => write(&p, text)?,
                None => print!("{text}"),
            }
        }
        Command::BuildPrompts {
            run,
            partition,
            features,
            out,
        } => {
            let cfg = run.load()?;
            let partition = load_partition(&partition)?;
            let bank = ingest_features(&fs::read_to_string(features)?, cfg.n_features)?;
            write(&out, build_prompts(&bank, &partition)?.to_json())?;
        }
        Command::OptimizeAdapters {
            run,
            prompts,
            images,
            out,
            trace,
        } => {
            let cfg = run.load()?;
            let (layout, prompts) = prompts.load(&cfg)?;
            let images = LabeledImage::from_table(&load_table(images)?, layout.num_categories())?;
            let result = optimize_adapters(&images, &prompts, &cfg.adapter(), None)?;
            let (first, last) = (result.trace[0], result.trace[result.trace.len() - 1]);
            log::info!("adapter loss {:.6} -> {:.6}", first.total, last.total);
            save_adapters(&result.state, out)?;
            if let Some(p) = trace {
                write(&p, loss_trace_csv(&result.trace))?;
            }
        }
        Command::BuildGraphs {
            run,
            prompts,
            patches,
            adapters,
            out,
        } => {
            let cfg = run.load()?;
            let (layout, prompts) = prompts.load(&cfg)?;
            let state = load_adapters(adapters)?;
            let reps = prompts.transform(&state)?;
            let graphs = build_sample_graphs(&load_table(patches)?, &layout, &reps, &state, &cfg)?;
            let dump: Vec<serde_json::Value> = graphs
                .iter()
                .map(|g| {
                    serde_json::json!({
                        "name": g.name,
                        "label": g.label,
                        "prompt_category": layout.category_name(g.prompt_category),
                        "graph": g.graph.dump(),
                    })
                })
                .collect();
            write(&out, serde_json::to_string(&dump)?)?;
        }
        Command::TrainVig {
            run,
            prompts,
            patches,
            adapters,
            out,
            trace,
        } => {
            let cfg = run.load()?;
            let (layout, prompts) = prompts.load(&cfg)?;
            let state = load_adapters(adapters)?;
            let reps = prompts.transform(&state)?;
            let graphs = build_sample_graphs(&load_table(patches)?, &layout, &reps, &state, &cfg)?;
            let result = train_vig_on(&graphs, layout.num_categories(), &cfg)?;
            let last = result.trace[result.trace.len() - 1];
            log::info!("vig loss {:.6}, train accuracy {:.4}", last.mean_loss, last.accuracy);
            save_vig(&result.model, out)?;
            if let Some(p) = trace {
                write(&p, vig_trace_csv(&result.trace))?;
            }
        }
        Command::Score {
            run,
            prompts,
            patches,
            images,
            adapters,
            vig,
            out,
        } => {
            let cfg = run.load()?;
            let (layout, prompts) = prompts.load(&cfg)?;
            let state = load_adapters(adapters)?;
            let mut model = load_vig(vig)?;
            model.pooling = cfg.pooling;
            let reps = prompts.transform(&state)?;
            let images = images.map(load_table).transpose()?;
            let scorer = Scorer {
                layout: &layout,
                reps: &reps,
                state: &state,
                model: &model,
                topk: cfg.topk(),
                tau: cfg.tau,
                temperature: cfg.t_energy,
                mode: cfg.score,
                stage1: cfg.stage1,
            };
            let records = score_table(&scorer, &load_table(patches)?, images.as_ref())?;
            let text = export_scores(&records)?;
            match out {
                Some(p) => write(&p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Eval {
            scores,
            id,
            ood,
            labels,
            partition,
        } => {
            let records: Vec<ScoreRecord> = match (scores, id, ood) {
                (Some(s), _, _) => parse_scores(&fs::read_to_string(s)?)?,
                (None, Some(i), Some(o)) => {
                    let mut all = parse_scores(&fs::read_to_string(i)?)?;
                    all.iter_mut().for_each(|r| r.is_id = true);
                    let mut rest = parse_scores(&fs::read_to_string(o)?)?;
                    rest.iter_mut().for_each(|r| r.is_id = false);
                    all.extend(rest);
                    all
                }
                _ => return Err(Error::Invalid("eval needs --scores or both --id and --ood".into())),
            };
            let id_acc = match (labels, partition) {
                (Some(l), Some(p)) => {
                    let partition = load_partition(&p)?;
                    let layout = PromptLayout::new(&partition, 1)?;
                    Some(prediction_accuracy(&records, &load_table(l)?, &layout)?)
                }
                _ => None,
            };
            let (id, ood) = split_scores(&records);
            println!("{}", MetricReport::compute(&id, &ood, id_acc)?.to_json());
        }
        Command::Synth(args) => synth(&args)?,
        Command::Gradcheck { seed, instances } => {
            let results = run_gradcheck(seed, instances)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.rel_error < 1e-4;
                failed += usize::from(!ok);
                println!(
                    "{} {} instance {} params {} rel_error {:.3e}",
                    if ok { "ok  " } else { "FAIL" },
                    r.target,
                    r.instance,
                    r.params,
                    r.rel_error
                );
            }
            println!("{} checks, {} failed", results.len(), failed);
            return Ok(if failed == 0 { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        patches_per_image: args.patches,
        cluster_spread: args.spread,
        seed: args.seed,
    };
    let data = synth_dataset(&spec)?;
    fs::create_dir_all(&args.out_dir)?;
    let path = |name: &str| args.out_dir.join(name);
    save_table(&data.images, path("images.pemb"))?;
    save_table(&data.patches, path("patches.pemb"))?;
    save_table(&data.means, path("means.pemb"))?;

    let means = data.mean_vectors();
    if let Some(groups) = args.super_classes {
        let categories: Vec<String> = data.means.records().iter().map(|r| r.name.clone()).collect();
        let partition = SuperClassPartition::contiguous(&categories, groups)?;
        let bank = FeatureBank::synthetic(&categories, args.n_features);
        let layout = PromptLayout::new(&partition, args.n_features)?;
        write(&path("partition.json"), partition.to_json())?;
        write(&path("features.json"), bank.to_json(&categories))?;
        write(&path("prompt_bank.json"), build_prompts(&bank, &partition)?.to_json())?;
        save_table(&synth_prompt_table(&means, &layout, args.spread, args.seed)?, path("prompts.pemb"))?;
    }
    if args.test_per_class > 0 || (args.ood_means > 0 && args.ood_per_mean > 0) {
        let (mut images, mut patches) = if args.test_per_class > 0 {
            synth_samples(&spec, &means, args.test_per_class, TEST_STREAM, "t", None)?
        } else {
            (EmbeddingTable::new(args.dim)?, EmbeddingTable::new(args.dim)?)
        };
        if args.ood_means > 0 && args.ood_per_mean > 0 {
            let (oi, op) = synth_ood(&spec, args.ood_means, args.ood_per_mean)?;
            for r in oi.records() {
                images.push(r.clone())?;
            }
            for r in op.records() {
                patches.push(r.clone())?;
            }
        }
        save_table(&images, path("test_images.pemb"))?;
        save_table(&patches, path("test_patches.pemb"))?;
    }
    Ok(())
}
