//! Finite-difference verification of the model's backward pass.
//!
//! Runs in f64: analytic gradients from one training-mode backward are
//! compared against central differences of the cross-entropy loss at
//! sampled parameter coordinates. The two stages are exposed separately so
//! a test can corrupt the analytic gradients and confirm the check fails.

use rand::Rng;

use crate::model::{LayeredModel, ModelError};
use crate::seeding::rng_for;
use crate::tensor::{loss_bce, Mode, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error bound: |analytic - numeric| / max(1, |analytic|).
    pub tolerance: f64,
    /// Coordinates sampled per parameterized layer (with replacement when a
    /// layer has fewer coordinates).
    pub samples_per_layer: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            samples_per_layer: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordReport {
    /// (parameter-layer ordinal, weight-or-bias flag, flat index)
    pub layer_ordinal: usize,
    pub is_bias: bool,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer_ordinal: usize,
    pub layer_index: usize,
    pub kind: &'static str,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<CoordReport>,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layers: Vec<LayerReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(LayerReport::passed)
    }

    /// Ordinals of layers whose gradients disagreed with the numeric check.
    pub fn failing_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| !l.passed())
            .map(|l| l.layer_ordinal)
            .collect()
    }
}

/// Per-parameter-layer analytic gradients (weights, bias) of the mean BCE
/// loss at the model's current parameters.
pub fn analytic_grads(
    model: &mut LayeredModel<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>, ModelError> {
    model.zero_grads();
    let pred = model.forward(input, Mode::Train)?;
    let (_, grad) = loss_bce(target, &pred)?;
    model.backward(&grad)?;
    let grads = model
        .param_blocks()
        .iter()
        .map(|b| (b.grad_weights.clone(), b.grad_bias.clone()))
        .collect();
    model.zero_grads();
    Ok(grads)
}

fn loss_at(
    model: &mut LayeredModel<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
) -> Result<f64, ModelError> {
    let pred = model.forward(input, Mode::Train)?;
    let (loss, _) = loss_bce(target, &pred)?;
    Ok(loss)
}

/// Compares the supplied analytic gradients against central differences at
/// sampled coordinates.
pub fn check_against_fd(
    model: &mut LayeredModel<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    grads: &[(Tensor<f64>, Tensor<f64>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, ModelError> {
    let kinds: Vec<(&'static str, usize)> = model
        .param_blocks()
        .iter()
        .map(|b| {
            (
                if b.is_norm() { "norm" } else { "conv" },
                b.layer_index,
            )
        })
        .collect();
    let mut rng = rng_for(cfg.seed, &[0x67_7263]);
    let mut layers = Vec::with_capacity(grads.len());

    for (ordinal, (grad_w, grad_b)) in grads.iter().enumerate() {
        let (kind, layer_index) = kinds[ordinal];
        let n_w = grad_w.len();
        let n_b = grad_b.len();
        let mut max_rel = 0.0f64;
        let mut failures = Vec::new();

        for _ in 0..cfg.samples_per_layer {
            // Sample uniformly over the layer's weight+bias coordinates.
            let pick = rng.gen_range(0..n_w + n_b);
            let (is_bias, coord) = if pick < n_w { (false, pick) } else { (true, pick - n_w) };
            let analytic = if is_bias {
                grad_b.data()[coord]
            } else {
                grad_w.data()[coord]
            };

            let nudge = |model: &mut LayeredModel<f64>, delta: f64| {
                let mut blocks = model.param_blocks_mut();
                let tensor = if is_bias {
                    &mut blocks[ordinal].bias
                } else {
                    &mut blocks[ordinal].weights
                };
                tensor.data_mut()[coord] += delta;
            };

            nudge(model, cfg.step);
            let plus = loss_at(model, input, target)?;
            nudge(model, -2.0 * cfg.step);
            let minus = loss_at(model, input, target)?;
            nudge(model, cfg.step);

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel = (analytic - numeric).abs() / f64::max(1.0, analytic.abs());
            max_rel = max_rel.max(rel);
            if rel >= cfg.tolerance {
                failures.push(CoordReport {
                    layer_ordinal: ordinal,
                    is_bias,
                    coord,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        layers.push(LayerReport {
            layer_ordinal: ordinal,
            layer_index,
            kind,
            coords_checked: cfg.samples_per_layer,
            max_rel_error: max_rel,
            failures,
        });
    }
    Ok(GradCheckReport { layers })
}

/// Full check: analytic gradients followed by the finite-difference sweep.
pub fn grad_check(
    model: &mut LayeredModel<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, ModelError> {
    let grads = analytic_grads(model, input, target)?;
    check_against_fd(model, input, target, &grads, cfg)
}

/// Deterministic test fixture: random input and blob-like binary target.
pub fn grad_check_fixture(
    channels: usize,
    side: usize,
    seed: u64,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = rng_for(seed, &[0xf1c5]);
    let input = Tensor::from_fn(vec![channels, side, side], |_| {
        crate::seeding::uniform(&mut rng, 0.0, 1.0)
    });
    let target = Tensor::from_fn(vec![1, side, side], |_| {
        if crate::seeding::uniform(&mut rng, 0.0, 1.0) > 0.6 {
            1.0
        } else {
            0.0
        }
    });
    (input, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, default_model_spec, LayerSpec};
    use crate::tensor::ActKind;

    #[test]
    fn linear_conv_model_passes_tightly() {
        let spec = vec![
            LayerSpec::Conv { in_ch: 1, out_ch: 1, kernel: 1 },
            LayerSpec::Act { act: ActKind::Sigmoid },
        ];
        let mut model = build_model::<f64>(&spec, 5).unwrap();
        let (input, target) = grad_check_fixture(1, 6, 5);
        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            samples_per_layer: 50,
            ..Default::default()
        };
        let report = grad_check(&mut model, &input, &target, &cfg).unwrap();
        assert!(report.passed(), "max rel {:?}", report.layers[0].max_rel_error);
    }

    #[test]
    fn default_model_passes_at_default_tolerance() {
        let mut model = build_model::<f64>(&default_model_spec(), 7).unwrap();
        let (input, target) = grad_check_fixture(1, 10, 7);
        let cfg = GradCheckConfig {
            samples_per_layer: 40, // the acceptance suite runs the full 200
            ..Default::default()
        };
        let report = grad_check(&mut model, &input, &target, &cfg).unwrap();
        assert!(
            report.passed(),
            "failures: {:?}",
            report
                .layers
                .iter()
                .map(|l| (l.layer_ordinal, l.max_rel_error))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn sign_flipped_backward_fails_and_names_the_layer() {
        let mut model = build_model::<f64>(&default_model_spec(), 9).unwrap();
        let (input, target) = grad_check_fixture(1, 8, 9);
        let mut grads = analytic_grads(&mut model, &input, &target).unwrap();
        let corrupted = 2;
        grads[corrupted].0.scale(-1.0);
        grads[corrupted].1.scale(-1.0);
        let cfg = GradCheckConfig {
            samples_per_layer: 60,
            ..Default::default()
        };
        let report = check_against_fd(&mut model, &input, &target, &grads, &cfg).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing_layers(), vec![corrupted]);
    }
}
