use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{adapter_gradients, total_adapter_loss, LossBreakdown, LossWeights};
use super::{AdapterState, LabeledImage, PromptEmbeddings};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Images per update; 0 means the whole set.
    pub batch_size: usize,
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 0,
            init_noise: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterRun {
    pub state: AdapterState,
    /// Full-set loss before training (row 0) and after every epoch.
    pub trace: Vec<LossBreakdown>,
}

/// Plain gradient descent on both adapters.
///
/// Starts from `initial` when given, otherwise from a perturbed identity
/// seeded by `config.seed`.
pub fn optimize_adapters(
    images: &[LabeledImage],
    prompts: &PromptEmbeddings,
    config: &AdapterConfig,
    initial: Option<AdapterState>,
) -> Result<AdapterRun> {
    config.weights.validate()?;
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Invalid("adapter learning rate must be positive".into()));
    }
    let dim = prompts.dim();
    let mut state = initial.unwrap_or_else(|| AdapterState::perturbed_identity(dim, config.init_noise, config.seed));
    if state.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            found: dim,
        });
    }
    if let Some(bad) = images.iter().find(|i| i.raw.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.raw.len(),
        });
    }

    let mut trace = Vec::with_capacity(config.epochs + 1);
    trace.push(total_adapter_loss(images, &state, prompts, &config.weights)?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let batch_size = if config.batch_size == 0 { images.len().max(1) } else { config.batch_size };

    for epoch in 0..config.epochs {
        if batch_size < images.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch_size) {
            let batch: Vec<LabeledImage> = chunk.iter().map(|&i| images[i].clone()).collect();
            let (_, grad) = adapter_gradients(&batch, &state, prompts, &config.weights)?;
            state.w_text.scaled_add(-config.learning_rate, &grad.w_text);
            state.w_image.scaled_add(-config.learning_rate, &grad.w_image);
        }
        if !state.is_finite() {
            return Err(Error::Invalid(format!("adapter weights diverged at epoch {}", epoch + 1)));
        }
        let loss = total_adapter_loss(images, &state, prompts, &config.weights)?;
        log::debug!("adapter epoch {} total {:.6}", epoch + 1, loss.total);
        trace.push(loss);
    }
    Ok(AdapterRun { state, trace })
}

/// CSV with columns `epoch,l_pir,l_ppd,l_nir,l_nnd,l_npd,total`.
pub fn loss_trace_csv(trace: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,l_pir,l_ppd,l_nir,l_nnd,l_npd,total\n");
    for (e, l) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{e},{},{},{},{},{},{}\n",
            l.pir, l.ppd, l.nir, l.nnd, l.npd, l.total
        ));
    }
    out
}
