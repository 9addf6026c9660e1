//! Client-local state and the local training loop.

use thiserror::Error;

use crate::data::{binarize, dice, pixel_accuracy, ChannelStats, ClientDataset};
use crate::model::{LayeredModel, LoadFilter, ModelError, ParamSet};
use crate::seeding::rng_for;
use crate::tensor::{adam_step, loss_bce, AdamState, Mode, TensorError};

use super::consistency::loss_sc;
use super::server::Method;
use super::synthetic::SyntheticBank;

const SHUFFLE_TAG: u64 = 0x5f_7368;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("client {0} has no training samples")]
    EmptyTrainSet(u16),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Knobs the local loop needs from the experiment configuration.
#[derive(Debug, Clone)]
pub struct LocalTrainConfig {
    pub method: Method,
    pub epochs: u32,
    pub epsilon: f64,
    pub alpha_sc: f64,
    pub prox_mu: f64,
    /// Consistency loss active (fedsoda with the lsc module on).
    pub lsc_on: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainMetrics {
    pub loss_ce: f64,
    pub loss_sc: f64,
    pub steps: usize,
}

/// Everything one client owns across rounds.
pub struct ClientState {
    pub id: u16,
    pub model: LayeredModel<f32>,
    pub adam: AdamState<f32>,
    pub dataset: ClientDataset,
    pub stats: ChannelStats,
    pub bank: SyntheticBank<f32>,
    pub master_seed: u64,
}

impl ClientState {
    pub fn new(
        id: u16,
        model: LayeredModel<f32>,
        dataset: ClientDataset,
        stats: ChannelStats,
        master_seed: u64,
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) -> Self {
        let adam = AdamState::new(&model.param_blocks(), lr, beta1, beta2);
        Self {
            id,
            model,
            adam,
            dataset,
            stats,
            bank: SyntheticBank::new(id, stats),
            master_seed,
        }
    }

    fn load_filter(method: Method) -> LoadFilter {
        if method == Method::FedBn {
            LoadFilter::SkipNorm
        } else {
            LoadFilter::All
        }
    }
}

/// Loads the broadcast global parameters (normalization layers stay local
/// under FedBN), then runs `epochs` passes of single-image Adam steps over
/// a per-round shuffled order. Returns the updated parameters and the mean
/// training losses.
pub fn local_train(
    client: &mut ClientState,
    global: &ParamSet<f32>,
    round: u32,
    cfg: &LocalTrainConfig,
) -> Result<(ParamSet<f32>, TrainMetrics), TrainError> {
    if client.dataset.train.is_empty() {
        return Err(TrainError::EmptyTrainSet(client.id));
    }
    client
        .model
        .params_load(global, ClientState::load_filter(cfg.method))?;
    let prox_ref = (cfg.method == Method::FedProx).then(|| global.clone());

    let mut metrics = TrainMetrics::default();
    let n = client.dataset.train.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(
            client.master_seed,
            &[SHUFFLE_TAG, client.id as u64, round as u64, epoch as u64],
        );
        // Fisher-Yates, deterministic per (client, round, epoch).
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for &idx in &order {
            let sample = &client.dataset.train[idx];
            let pred = client.model.forward(&sample.image, Mode::Train)?;
            let (ce, mut grad) = loss_bce(&sample.mask, &pred)?;
            metrics.loss_ce += ce as f64;
            if cfg.lsc_on {
                let (sc, grad_sc) = loss_sc(&sample.mask, &pred, cfg.epsilon)?;
                metrics.loss_sc += sc as f64;
                grad.axpy(cfg.alpha_sc as f32, &grad_sc);
            }
            client.model.backward(&grad)?;
            if let Some(reference) = &prox_ref {
                // Proximal pull (mu/2)||p - w||^2 adds mu (p - w) per coordinate.
                let mu = cfg.prox_mu as f32;
                for (block, anchor) in client.model.param_blocks_mut().iter_mut().zip(reference) {
                    for i in 0..block.weights.len() {
                        block.grad_weights.data_mut()[i] +=
                            mu * (block.weights.data()[i] - anchor.weights.data()[i]);
                    }
                    for i in 0..block.bias.len() {
                        block.grad_bias.data_mut()[i] +=
                            mu * (block.bias.data()[i] - anchor.bias.data()[i]);
                    }
                }
            }
            adam_step(&mut client.model.param_blocks_mut(), &mut client.adam)?;
            metrics.steps += 1;
        }
    }
    if metrics.steps > 0 {
        metrics.loss_ce /= metrics.steps as f64;
        metrics.loss_sc /= metrics.steps as f64;
    }
    Ok((client.model.params_export(), metrics))
}

/// Mean segmentation quality of `model` over a sample slice, eval mode,
/// predictions binarized at 0.5. Also reports the eval-split losses used
/// for the pre-training row.
pub fn evaluate_model(
    model: &mut LayeredModel<f32>,
    samples: &[crate::data::Sample],
    epsilon: f64,
    with_sc: bool,
) -> Result<super::round::EvalOutcome, TrainError> {
    let mut dice_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut sc_sum = 0.0;
    for s in samples {
        let pred = model.forward(&s.image, Mode::Eval)?;
        let hard = binarize(&pred, 0.5);
        dice_sum += dice(&s.mask, &hard)?;
        acc_sum += pixel_accuracy(&s.mask, &hard)?;
        let (ce, _) = loss_bce(&s.mask, &pred)?;
        ce_sum += ce as f64;
        if with_sc {
            let (sc, _) = loss_sc(&s.mask, &pred, epsilon)?;
            sc_sum += sc as f64;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(super::round::EvalOutcome {
        dice: dice_sum / n,
        accuracy: acc_sum / n,
        loss_ce: ce_sum / n,
        loss_sc: sc_sum / n,
    })
}
