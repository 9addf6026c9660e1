//! Gaussian synthetic probes and the per-client memory bank.
//!
//! Each round a client draws probe images from its own intensity
//! distribution N(mean, std) and folds them into an exponential moving
//! average `bank = gamma * bank + (1 - gamma) * fresh`, so the probe space
//! stays stable across rounds while tracking the current statistics.

use rand::Rng;

use crate::data::ChannelStats;
use crate::seeding::standard_normal;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Draws `count` probe images of shape `[channels, h, w]` with i.i.d.
/// Gaussian pixels at the client's statistics; output is `[count, c, h, w]`.
pub fn gen_synthetic<T: Scalar>(
    stats: &ChannelStats,
    channels: usize,
    h: usize,
    w: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    debug_assert!(stats.std > 0.0);
    Tensor::from_fn(vec![count, channels, h, w], |_| {
        T::from_f64(stats.mean + stats.std * standard_normal(rng))
    })
}

/// EMA-maintained synthetic probe state for one client.
#[derive(Debug, Clone)]
pub struct SyntheticBank<T> {
    pub client_id: u16,
    pub stats: ChannelStats,
    /// None until the first round has generated probes.
    value: Option<Tensor<T>>,
}

impl<T: Scalar> SyntheticBank<T> {
    pub fn new(client_id: u16, stats: ChannelStats) -> Self {
        Self {
            client_id,
            stats,
            value: None,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.value.is_some()
    }

    pub fn value(&self) -> Option<&Tensor<T>> {
        self.value.as_ref()
    }

    /// Folds freshly generated probes into the bank. The first update
    /// adopts `fresh` directly; afterwards
    /// `bank = gamma * bank + (1 - gamma) * fresh`, elementwise.
    pub fn update(&mut self, fresh: Tensor<T>, gamma: f64) -> Result<&Tensor<T>, TensorError> {
        debug_assert!((0.0..=1.0).contains(&gamma));
        match &mut self.value {
            None => self.value = Some(fresh),
            Some(bank) => {
                bank.check_same_shape(&fresh, "bank update")?;
                let g = T::from_f64(gamma);
                let keep = T::ONE - g;
                for (b, &f) in bank.data_mut().iter_mut().zip(fresh.data()) {
                    *b = g * *b + keep * f;
                }
            }
        }
        Ok(self.value.as_ref().unwrap())
    }
}
