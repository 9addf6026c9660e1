//! Cross-client similarity assessment over per-layer probe features.
//!
//! Every client's probe batch is pushed through every client's model on
//! the server; the tap features are batch-averaged, flattened, and compared
//! by cosine. Normalization turns each (client, layer) row into a convex
//! combination over the other clients.

use thiserror::Error;

use crate::model::{build_model, LayerSpec, LayeredModel, LoadFilter, ModelError, ParamSet};
use crate::tensor::{Mode, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("client {0} probe batch must be rank 4 [B, C, H, W], got {1:?}")]
    BadProbeShape(usize, Vec<usize>),
    #[error("expected {expected} parameter sets / probes, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Raw and normalized cross-assessment weights, indexed `[k][j][l]`:
/// probes of client k, model of client j, stratified layer l.
#[derive(Debug, Clone)]
pub struct SimilarityCube {
    clients: usize,
    layers: usize,
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

impl SimilarityCube {
    pub fn new(clients: usize, layers: usize) -> Self {
        Self {
            clients,
            layers,
            raw: vec![0.0; clients * clients * layers],
            normalized: vec![0.0; clients * clients * layers],
        }
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    #[inline]
    fn idx(&self, k: usize, j: usize, l: usize) -> usize {
        (k * self.clients + j) * self.layers + l
    }

    pub fn raw(&self, k: usize, j: usize, l: usize) -> f64 {
        self.raw[self.idx(k, j, l)]
    }

    pub fn set_raw(&mut self, k: usize, j: usize, l: usize, v: f64) {
        let i = self.idx(k, j, l);
        self.raw[i] = v;
    }

    pub fn normalized(&self, k: usize, j: usize, l: usize) -> f64 {
        self.normalized[self.idx(k, j, l)]
    }

    /// A cube whose every layer holds this cube's layer-averaged normalized
    /// weights — the layer-uniform variant used when stratified aggregation
    /// is disabled but cross-assessment is on.
    pub fn layer_averaged(&self) -> SimilarityCube {
        let mut out = SimilarityCube::new(self.clients, self.layers);
        for k in 0..self.clients {
            for j in 0..self.clients {
                let mean = (0..self.layers)
                    .map(|l| self.normalized(k, j, l))
                    .sum::<f64>()
                    / self.layers as f64;
                for l in 0..self.layers {
                    let i = out.idx(k, j, l);
                    out.raw[i] = mean;
                    out.normalized[i] = mean;
                }
            }
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        // Zero-norm features carry no direction; define their similarity as 0.
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Batch-averaged, flattened tap features of `model` on a probe batch
/// `[B, C, H, W]`, eval mode.
fn probe_features<T: Scalar>(
    model: &mut LayeredModel<T>,
    probes: &Tensor<T>,
    client: usize,
) -> Result<Vec<Vec<f64>>, SimilarityError> {
    if probes.rank() != 4 {
        return Err(SimilarityError::BadProbeShape(client, probes.shape().to_vec()));
    }
    let (batch, c, h, w) = (
        probes.shape()[0],
        probes.shape()[1],
        probes.shape()[2],
        probes.shape()[3],
    );
    let mut features: Vec<Vec<f64>> = Vec::new();
    for b in 0..batch {
        let start = probes.idx4(b, 0, 0, 0);
        let image = Tensor::new(
            vec![c, h, w],
            probes.data()[start..start + c * h * w].to_vec(),
        )
        .expect("probe slice is well-shaped");
        let (taps, _) = model.forward_with_taps(&image, Mode::Eval)?;
        if features.is_empty() {
            features = taps
                .iter()
                .map(|t| t.data().iter().map(|v| v.to_f64()).collect())
                .collect();
        } else {
            for (acc, tap) in features.iter_mut().zip(&taps) {
                for (a, v) in acc.iter_mut().zip(tap.data()) {
                    *a += v.to_f64();
                }
            }
        }
    }
    let inv_b = 1.0 / batch as f64;
    for tap in &mut features {
        for v in tap.iter_mut() {
            *v *= inv_b;
        }
    }
    Ok(features)
}

/// Runs every client's probes through every client's model and fills the
/// raw similarity cube: `raw[k][j][l] = cos(f_l(model_k, probe_k),
/// f_l(model_j, probe_k))`. The diagonal is 1 by definition.
pub fn cross_assess<T: Scalar>(
    spec: &[LayerSpec],
    param_sets: &[ParamSet<T>],
    probes: &[Tensor<T>],
) -> Result<SimilarityCube, SimilarityError> {
    let m = param_sets.len();
    if probes.len() != m {
        return Err(SimilarityError::CountMismatch {
            expected: m,
            actual: probes.len(),
        });
    }
    let mut scratch: LayeredModel<T> = build_model(spec, 0)?;
    let layers = scratch.param_layer_count();
    let mut cube = SimilarityCube::new(m, layers);
    if m == 0 {
        return Ok(cube);
    }

    // Pass 1: reference features of each client's own model on its probes.
    let mut self_features: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
    for k in 0..m {
        scratch.params_load(&param_sets[k], LoadFilter::All)?;
        self_features.push(probe_features(&mut scratch, &probes[k], k)?);
    }
    // Pass 2: features of model j on probes k, compared against the refs.
    for j in 0..m {
        scratch.params_load(&param_sets[j], LoadFilter::All)?;
        for k in 0..m {
            if k == j {
                for l in 0..layers {
                    cube.set_raw(k, k, l, 1.0);
                }
                continue;
            }
            let cross = probe_features(&mut scratch, &probes[k], k)?;
            for l in 0..layers {
                cube.set_raw(k, j, l, cosine(&self_features[k][l], &cross[l]));
            }
        }
    }
    Ok(cube)
}

/// Fills the normalized side of the cube: raw values are clamped to [0, 1]
/// and each (k, l) row is normalized over j != k to sum to one. Rows whose
/// clamped mass is zero fall back to the uniform 1/(m-1).
pub fn normalize_similarity(cube: &mut SimilarityCube) {
    let (m, layers) = (cube.clients, cube.layers);
    if m <= 1 {
        for v in &mut cube.normalized {
            *v = 0.0;
        }
        return;
    }
    for k in 0..m {
        for l in 0..layers {
            let mut sum = 0.0;
            for j in 0..m {
                if j != k {
                    sum += cube.raw(k, j, l).clamp(0.0, 1.0);
                }
            }
            for j in 0..m {
                let i = cube.idx(k, j, l);
                cube.normalized[i] = if j == k {
                    0.0
                } else if sum > 0.0 {
                    cube.raw(k, j, l).clamp(0.0, 1.0) / sum
                } else {
                    1.0 / (m - 1) as f64
                };
            }
        }
    }
}
