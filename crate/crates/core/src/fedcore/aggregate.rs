//! Server-side parameter aggregation.
//!
//! The stratified rule combines, per layer l,
//! `w_l = (1/m) * sum_k [ lambda * p_k + (1 - lambda) * sum_{j!=k} s_l[k][j] * p_j ]`.
//! The implementation folds the double sum into one coefficient per client,
//! `coeff_j = (lambda + (1 - lambda) * sum_{k!=j} s_l[k][j]) / m`; the
//! brute-force transcription of the bracketed form lives in the tests and
//! the acceptance suite as an independent oracle. Because each similarity
//! row is a convex combination, the coefficients are non-negative and sum
//! to one, making every aggregated coordinate a convex combination of the
//! client values.

use thiserror::Error;

use log::warn;

use crate::model::{LayerParams, ParamSet};
use crate::tensor::{NormRunning, Scalar, Tensor, TensorError};

use super::similarity::SimilarityCube;

#[derive(Debug, Error)]
pub enum AggError {
    #[error("no parameter sets to aggregate")]
    Empty,
    #[error("client {client}: expected {expected} layers, got {actual}")]
    LayerCount {
        client: usize,
        expected: usize,
        actual: usize,
    },
    #[error("similarity cube covers {cube} layers, models have {model}")]
    CubeLayers { cube: usize, model: usize },
    #[error("sample counts: expected {expected}, got {actual}")]
    CountLen { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_uniform_structure<T: Scalar>(sets: &[ParamSet<T>]) -> Result<usize, AggError> {
    let layers = sets[0].len();
    for (client, set) in sets.iter().enumerate() {
        if set.len() != layers {
            return Err(AggError::LayerCount {
                client,
                expected: layers,
                actual: set.len(),
            });
        }
        for (l, p) in set.iter().enumerate() {
            sets[0][l]
                .weights
                .check_same_shape(&p.weights, "aggregate weights")?;
            sets[0][l].bias.check_same_shape(&p.bias, "aggregate bias")?;
        }
    }
    Ok(layers)
}

/// Weighted sum of one layer across clients with per-client coefficients.
fn combine_layer<T: Scalar>(
    sets: &[ParamSet<T>],
    layer: usize,
    coeffs: &[f64],
) -> LayerParams<T> {
    let template = &sets[0][layer];
    let mut weights = Tensor::zeros(template.weights.shape().to_vec());
    let mut bias = Tensor::zeros(template.bias.shape().to_vec());
    let mut norm = template.norm.as_ref().map(|n| NormRunning {
        mean: Tensor::zeros(n.mean.shape().to_vec()),
        var: Tensor::zeros(n.var.shape().to_vec()),
    });
    for (set, &c) in sets.iter().zip(coeffs) {
        let c = T::from_f64(c);
        weights.axpy(c, &set[layer].weights);
        bias.axpy(c, &set[layer].bias);
        if let (Some(acc), Some(n)) = (&mut norm, &set[layer].norm) {
            acc.mean.axpy(c, &n.mean);
            acc.var.axpy(c, &n.var);
        }
    }
    LayerParams {
        layer_index: template.layer_index,
        weights,
        bias,
        norm,
    }
}

/// Stratified aggregation with normalized similarity weights. Running
/// normalization statistics ride along with their layer's coefficients.
/// A single client degenerates to its own parameters.
pub fn dynamic_aggregate<T: Scalar>(
    sets: &[ParamSet<T>],
    cube: &SimilarityCube,
    lambda: f64,
) -> Result<ParamSet<T>, AggError> {
    if sets.is_empty() {
        return Err(AggError::Empty);
    }
    debug_assert!((0.0..=1.0).contains(&lambda));
    let m = sets.len();
    let layers = check_uniform_structure(sets)?;
    if m == 1 {
        warn!("dynamic aggregation over a single client returns its parameters unchanged");
        return Ok(sets[0].clone());
    }
    if cube.layers() != layers || cube.clients() != m {
        return Err(AggError::CubeLayers {
            cube: cube.layers(),
            model: layers,
        });
    }

    let inv_m = 1.0 / m as f64;
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let coeffs: Vec<f64> = (0..m)
            .map(|j| {
                let peer_mass: f64 = (0..m)
                    .filter(|&k| k != j)
                    .map(|k| cube.normalized(k, j, l))
                    .sum();
                (lambda + (1.0 - lambda) * peer_mass) * inv_m
            })
            .collect();
        out.push(combine_layer(sets, l, &coeffs));
    }
    Ok(out)
}

/// Sample-count-weighted mean: `w = sum_k n_k p_k / sum_k n_k`.
pub fn fedavg_aggregate<T: Scalar>(
    sets: &[ParamSet<T>],
    sample_counts: &[usize],
) -> Result<ParamSet<T>, AggError> {
    if sets.is_empty() {
        return Err(AggError::Empty);
    }
    if sample_counts.len() != sets.len() {
        return Err(AggError::CountLen {
            expected: sets.len(),
            actual: sample_counts.len(),
        });
    }
    let layers = check_uniform_structure(sets)?;
    let total: usize = sample_counts.iter().sum();
    let coeffs: Vec<f64> = if total == 0 {
        vec![1.0 / sets.len() as f64; sets.len()]
    } else {
        sample_counts.iter().map(|&n| n as f64 / total as f64).collect()
    };
    Ok((0..layers).map(|l| combine_layer(sets, l, &coeffs)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedcore::similarity::normalize_similarity;
    use crate::seeding::{rng_for, uniform};

    /// Scalar parameter sets: one tensor of `params` values per layer.
    pub(crate) fn random_sets(
        m: usize,
        layers: usize,
        params: usize,
        seed: u64,
    ) -> Vec<ParamSet<f64>> {
        let mut rng = rng_for(seed, &[0xa66]);
        (0..m)
            .map(|_| {
                (0..layers)
                    .map(|l| LayerParams {
                        layer_index: l,
                        weights: Tensor::from_fn(vec![params], |_| uniform(&mut rng, -2.0, 2.0)),
                        bias: Tensor::from_fn(vec![1], |_| uniform(&mut rng, -1.0, 1.0)),
                        norm: None,
                    })
                    .collect()
            })
            .collect()
    }

    pub(crate) fn random_cube(m: usize, layers: usize, seed: u64) -> SimilarityCube {
        let mut rng = rng_for(seed, &[0xc4be]);
        let mut cube = SimilarityCube::new(m, layers);
        for k in 0..m {
            for j in 0..m {
                for l in 0..layers {
                    cube.set_raw(k, j, l, if k == j { 1.0 } else { uniform(&mut rng, -0.2, 1.0) });
                }
            }
        }
        normalize_similarity(&mut cube);
        cube
    }

    /// Straight-line transcription of the bracketed aggregation rule,
    /// coordinate by coordinate. Written before the coefficient-folding
    /// implementation; deliberately naive.
    pub(crate) fn brute_force_oracle(
        sets: &[ParamSet<f64>],
        cube: &SimilarityCube,
        lambda: f64,
    ) -> ParamSet<f64> {
        let m = sets.len();
        let layers = sets[0].len();
        let mut out = Vec::new();
        for l in 0..layers {
            let mut weights = Tensor::<f64>::zeros(sets[0][l].weights.shape().to_vec());
            let mut bias = Tensor::<f64>::zeros(sets[0][l].bias.shape().to_vec());
            for i in 0..weights.len() {
                let mut acc = 0.0;
                for k in 0..m {
                    let mut bracket = lambda * sets[k][l].weights.data()[i];
                    for j in 0..m {
                        if j != k {
                            bracket +=
                                (1.0 - lambda) * cube.normalized(k, j, l) * sets[j][l].weights.data()[i];
                        }
                    }
                    acc += bracket;
                }
                weights.data_mut()[i] = acc / m as f64;
            }
            for i in 0..bias.len() {
                let mut acc = 0.0;
                for k in 0..m {
                    let mut bracket = lambda * sets[k][l].bias.data()[i];
                    for j in 0..m {
                        if j != k {
                            bracket += (1.0 - lambda) * cube.normalized(k, j, l) * sets[j][l].bias.data()[i];
                        }
                    }
                    acc += bracket;
                }
                bias.data_mut()[i] = acc / m as f64;
            }
            out.push(LayerParams {
                layer_index: l,
                weights,
                bias,
                norm: None,
            });
        }
        out
    }

    pub(crate) fn max_param_diff(a: &ParamSet<f64>, b: &ParamSet<f64>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                x.weights
                    .max_abs_diff(&y.weights)
                    .max(x.bias.max_abs_diff(&y.bias))
            })
            .fold(0.0, f64::max)
    }

    fn uniform_cube(m: usize, layers: usize) -> SimilarityCube {
        let mut cube = SimilarityCube::new(m, layers);
        for k in 0..m {
            for j in 0..m {
                for l in 0..layers {
                    cube.set_raw(k, j, l, if k == j { 1.0 } else { 0.5 });
                }
            }
        }
        normalize_similarity(&mut cube);
        cube
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..20 {
            let m = 2 + (seed as usize % 4);
            let layers = 1 + (seed as usize % 3);
            let sets = random_sets(m, layers, 17, seed);
            let cube = random_cube(m, layers, seed + 100);
            let lambda = (seed as f64 % 5.0) / 4.0;
            let fast = dynamic_aggregate(&sets, &cube, lambda).unwrap();
            let slow = brute_force_oracle(&sets, &cube, lambda);
            assert!(max_param_diff(&fast, &slow) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn lambda_one_is_uniform_fedavg() {
        let sets = random_sets(4, 3, 9, 3);
        let cube = random_cube(4, 3, 8);
        let agg = dynamic_aggregate(&sets, &cube, 1.0).unwrap();
        let avg = fedavg_aggregate(&sets, &[1, 1, 1, 1]).unwrap();
        assert!(max_param_diff(&agg, &avg) < 1e-12);
    }

    #[test]
    fn uniform_similarity_reduces_to_plain_mean_for_any_lambda() {
        let sets = random_sets(5, 2, 11, 4);
        let cube = uniform_cube(5, 2);
        let mean = fedavg_aggregate(&sets, &[1; 5]).unwrap();
        for &lambda in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let agg = dynamic_aggregate(&sets, &cube, lambda).unwrap();
            assert!(
                max_param_diff(&agg, &mean) < 1e-12,
                "lambda {lambda}: {}",
                max_param_diff(&agg, &mean)
            );
        }
    }

    #[test]
    fn two_client_closed_form() {
        // m = 2, lambda = 0.4, both off-diagonal weights 1:
        // w = 0.5 (0.4 p0 + 0.6 p1) + 0.5 (0.4 p1 + 0.6 p0) = 0.5 (p0 + p1).
        let sets = random_sets(2, 1, 5, 21);
        let mut cube = SimilarityCube::new(2, 1);
        cube.set_raw(0, 0, 0, 1.0);
        cube.set_raw(1, 1, 0, 1.0);
        cube.set_raw(0, 1, 0, 1.0);
        cube.set_raw(1, 0, 0, 1.0);
        normalize_similarity(&mut cube);
        let agg = dynamic_aggregate(&sets, &cube, 0.4).unwrap();
        for i in 0..5 {
            let expect = 0.5 * (sets[0][0].weights.data()[i] + sets[1][0].weights.data()[i]);
            assert!((agg[0].weights.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_convex_combination_per_coordinate() {
        let sets = random_sets(4, 2, 13, 6);
        let cube = random_cube(4, 2, 7);
        let agg = dynamic_aggregate(&sets, &cube, 0.3).unwrap();
        for l in 0..2 {
            for i in 0..13 {
                let vals: Vec<f64> = sets.iter().map(|s| s[l].weights.data()[i]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = agg[l].weights.data()[i];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn single_client_returns_own_parameters() {
        let sets = random_sets(1, 2, 4, 2);
        let cube = SimilarityCube::new(1, 2);
        let agg = dynamic_aggregate(&sets, &cube, 0.4).unwrap();
        assert_eq!(max_param_diff(&agg, &sets[0]), 0.0);
    }

    #[test]
    fn permuting_clients_and_cube_consistently_leaves_w_invariant() {
        let sets = random_sets(4, 2, 9, 14);
        let cube = random_cube(4, 2, 15);
        let agg = dynamic_aggregate(&sets, &cube, 0.4).unwrap();

        let perm = [2usize, 0, 3, 1];
        let permuted_sets: Vec<ParamSet<f64>> = perm.iter().map(|&i| sets[i].clone()).collect();
        let mut permuted_cube = SimilarityCube::new(4, 2);
        for k in 0..4 {
            for j in 0..4 {
                for l in 0..2 {
                    permuted_cube.set_raw(k, j, l, cube.raw(perm[k], perm[j], l));
                }
            }
        }
        normalize_similarity(&mut permuted_cube);
        let agg_perm = dynamic_aggregate(&permuted_sets, &permuted_cube, 0.4).unwrap();
        assert!(max_param_diff(&agg, &agg_perm) < 1e-9);
    }

    #[test]
    fn fedavg_weighted_mean_closed_forms() {
        let mut sets = random_sets(2, 1, 1, 30);
        sets[0][0].weights.data_mut()[0] = 0.0;
        sets[1][0].weights.data_mut()[0] = 4.0;
        // counts (1, 3) on values (0, 4): weighted mean 3.0
        let agg = fedavg_aggregate(&sets, &[1, 3]).unwrap();
        assert!((agg[0].weights.data()[0] - 3.0).abs() < 1e-12);
        // equal counts: arithmetic mean
        let agg = fedavg_aggregate(&sets, &[5, 5]).unwrap();
        assert!((agg[0].weights.data()[0] - 2.0).abs() < 1e-12);
        // single client: identity
        let solo = fedavg_aggregate(&sets[..1], &[7]).unwrap();
        assert_eq!(solo[0].weights.data()[0], 0.0);
        // permutation invariance
        let swapped = fedavg_aggregate(&[sets[1].clone(), sets[0].clone()], &[3, 1]).unwrap();
        assert!((swapped[0].weights.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn structural_mismatch_is_rejected() {
        let mut sets = random_sets(2, 2, 4, 1);
        sets[1].pop();
        let cube = random_cube(2, 2, 1);
        assert!(matches!(
            dynamic_aggregate(&sets, &cube, 0.5).unwrap_err(),
            AggError::LayerCount { client: 1, .. }
        ));
        let sets = random_sets(2, 3, 4, 1);
        let cube = random_cube(2, 2, 1);
        assert!(matches!(
            dynamic_aggregate(&sets, &cube, 0.5).unwrap_err(),
            AggError::CubeLayers { .. }
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        /// lambda = 1 collapses to the uniform mean regardless of the cube,
        /// for m in 2..=6.
        #[test]
        fn lambda_one_reduction(m in 2usize..=6, layers in 1usize..=3, seed in 0u64..5000) {
            let sets = random_sets(m, layers, 8, seed);
            let cube = random_cube(m, layers, seed ^ 0x55);
            let agg = dynamic_aggregate(&sets, &cube, 1.0).unwrap();
            let avg = fedavg_aggregate(&sets, &vec![1; m]).unwrap();
            proptest::prop_assert!(max_param_diff(&agg, &avg) < 1e-6);
        }

        /// Uniform similarity equals the plain mean for every lambda.
        #[test]
        fn uniform_cube_reduction(m in 2usize..=6, seed in 0u64..5000, lambda_q in 0u8..=4) {
            let sets = random_sets(m, 2, 8, seed);
            let cube = uniform_cube(m, 2);
            let lambda = lambda_q as f64 / 4.0;
            let agg = dynamic_aggregate(&sets, &cube, lambda).unwrap();
            let avg = fedavg_aggregate(&sets, &vec![1; m]).unwrap();
            proptest::prop_assert!(max_param_diff(&agg, &avg) < 1e-6);
        }
    }
}
