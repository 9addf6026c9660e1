//! Layered segmentation network with per-layer feature taps.
//!
//! The network is a chain of convolution, normalization, and activation
//! layers. Convolution and normalization layers carry parameters; their
//! count L is the stratification every layer-wise aggregation step works
//! over. `forward_with_taps` records, for each parameterized layer, the
//! activation output that follows it (the final parameterized layer is
//! followed by the output sigmoid, so its tap is the model output).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ftns::{decode_tensor_prefix, encode_tensor, AnyTensor, FtnsError};
use crate::seeding::{rng_for, uniform};
use crate::tensor::{
    activation_backward, activation_forward, conv2d_backward, conv2d_forward, norm2d_backward,
    norm2d_forward, ActKind, Mode, NormCache, NormRunning, ParamBlock, Scalar, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model spec is empty")]
    EmptySpec,
    #[error("layer {index}: expected {expected} input channels, previous layer provides {actual}")]
    ChannelMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("layer {index}: convolution kernel size {kernel} must be odd")]
    EvenKernel { index: usize, kernel: usize },
    #[error("model must end with a sigmoid activation over a single channel, found {found}")]
    BadOutputLayer { found: String },
    #[error("parameter set has {actual} layers, model has {expected}")]
    ParamCountMismatch { expected: usize, actual: usize },
    #[error("parameter layer {index}: {source}")]
    ParamShape {
        index: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Ftns(#[from] FtnsError),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Norm {
        ch: usize,
    },
    #[serde(rename = "activation")]
    Act {
        act: ActKind,
    },
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Norm { .. })
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, LayerSpec::Norm { .. })
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Norm { .. } => "norm",
            LayerSpec::Act { .. } => "activation",
        }
    }
}

/// The default desk-scale network: four convolutions with two normalization
/// layers, sigmoid head. Six parameterized layers, ~2.5k parameters.
pub fn default_model_spec() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { in_ch: 1, out_ch: 8, kernel: 3 },
        Norm { ch: 8 },
        Act { act: ActKind::Relu },
        Conv { in_ch: 8, out_ch: 16, kernel: 3 },
        Norm { ch: 16 },
        Act { act: ActKind::Relu },
        Conv { in_ch: 16, out_ch: 8, kernel: 3 },
        Act { act: ActKind::Relu },
        Conv { in_ch: 8, out_ch: 1, kernel: 1 },
        Act { act: ActKind::Sigmoid },
    ]
}

#[derive(Debug, Clone)]
enum Layer<T> {
    Conv {
        block: ParamBlock<T>,
        cached_input: Option<Tensor<T>>,
    },
    Norm {
        block: ParamBlock<T>,
        cache: Option<NormCache<T>>,
    },
    Act {
        kind: ActKind,
        cached_output: Option<Tensor<T>>,
    },
}

/// Weights, bias, and (for normalization layers) running statistics of one
/// parameterized layer — the unit that travels between client and server.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub layer_index: usize,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: Option<NormRunning<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn is_norm(&self) -> bool {
        self.norm.is_some()
    }
}

/// Ordered parameters of every parameterized layer.
pub type ParamSet<T> = Vec<LayerParams<T>>;

/// Which layers `params_load` overwrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadFilter {
    All,
    /// Normalization layers keep their local parameters and running stats.
    SkipNorm,
}

#[derive(Debug, Clone)]
pub struct LayeredModel<T> {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
    in_channels: usize,
}

fn validate_spec(specs: &[LayerSpec]) -> Result<usize, ModelError> {
    if specs.is_empty() {
        return Err(ModelError::EmptySpec);
    }
    let in_channels = match specs[0] {
        LayerSpec::Conv { in_ch, .. } => in_ch,
        LayerSpec::Norm { ch } => ch,
        LayerSpec::Act { .. } => 1,
    };
    let mut channels = in_channels;
    for (index, spec) in specs.iter().enumerate() {
        match *spec {
            LayerSpec::Conv { in_ch, out_ch, kernel } => {
                if in_ch != channels {
                    return Err(ModelError::ChannelMismatch {
                        index,
                        expected: in_ch,
                        actual: channels,
                    });
                }
                if kernel % 2 == 0 {
                    return Err(ModelError::EvenKernel { index, kernel });
                }
                channels = out_ch;
            }
            LayerSpec::Norm { ch } => {
                if ch != channels {
                    return Err(ModelError::ChannelMismatch {
                        index,
                        expected: ch,
                        actual: channels,
                    });
                }
            }
            LayerSpec::Act { .. } => {}
        }
    }
    let last = specs.last().unwrap();
    if !matches!(last, LayerSpec::Act { act: ActKind::Sigmoid }) || channels != 1 {
        return Err(ModelError::BadOutputLayer {
            found: format!("{} with {} channels", last.name(), channels),
        });
    }
    Ok(in_channels)
}

/// Builds a model with He-uniform convolution weights, deterministic from
/// `seed`. Normalization layers start at scale 1, shift 0.
pub fn build_model<T: Scalar>(specs: &[LayerSpec], seed: u64) -> Result<LayeredModel<T>, ModelError> {
    let in_channels = validate_spec(specs)?;
    let mut rng = rng_for(seed, &[0x6d6f_64656c]);
    let layers = specs
        .iter()
        .enumerate()
        .map(|(index, spec)| match *spec {
            LayerSpec::Conv { in_ch, out_ch, kernel } => {
                let fan_in = (in_ch * kernel * kernel) as f64;
                let limit = (6.0 / fan_in).sqrt();
                let weights = Tensor::from_fn(vec![out_ch, in_ch, kernel, kernel], |_| {
                    T::from_f64(uniform(&mut rng, -limit, limit))
                });
                let bias = Tensor::zeros(vec![out_ch]);
                Layer::Conv {
                    block: ParamBlock::new(index, weights, bias),
                    cached_input: None,
                }
            }
            LayerSpec::Norm { ch } => {
                let block = ParamBlock::new(index, Tensor::full(vec![ch], T::ONE), Tensor::zeros(vec![ch]))
                    .with_norm_state(ch);
                Layer::Norm { block, cache: None }
            }
            LayerSpec::Act { act } => Layer::Act {
                kind: act,
                cached_output: None,
            },
        })
        .collect();
    Ok(LayeredModel {
        specs: specs.to_vec(),
        layers,
        in_channels,
    })
}

impl<T: Scalar> LayeredModel<T> {
    pub fn spec(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_channels(&self) -> usize {
        self.in_channels
    }

    /// Number of parameterized layers: the L every stratified operation
    /// ranges over.
    pub fn param_layer_count(&self) -> usize {
        self.specs.iter().filter(|s| s.is_parameterized()).count()
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.param_count()).sum()
    }

    pub fn param_blocks(&self) -> Vec<&ParamBlock<T>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { block, .. } | Layer::Norm { block, .. } => Some(block),
                Layer::Act { .. } => None,
            })
            .collect()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut ParamBlock<T>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv { block, .. } | Layer::Norm { block, .. } => Some(block),
                Layer::Act { .. } => None,
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for block in self.param_blocks_mut() {
            block.zero_grads();
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_impl(input, mode, false)?.1)
    }

    /// Runs the chain and returns the per-parameterized-layer feature taps
    /// along with the output. Two parameterized layers separated only by a
    /// normalization share the activation that follows them, so their taps
    /// coincide by construction.
    pub fn forward_with_taps(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>), ModelError> {
        let (taps, out) = self.forward_impl(input, mode, true)?;
        Ok((taps, out))
    }

    fn forward_impl(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        want_taps: bool,
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>), ModelError> {
        if input.rank() != 3 || input.shape()[0] != self.in_channels {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                context: "model input",
                expected: vec![self.in_channels, 0, 0],
                actual: input.shape().to_vec(),
            }));
        }
        // outputs[i] = output of layer i; used to resolve taps afterwards.
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &mut self.layers {
            let next = match layer {
                Layer::Conv { block, cached_input } => {
                    let out = conv2d_forward(&current, block)?;
                    *cached_input = (mode == Mode::Train).then(|| current.clone());
                    out
                }
                Layer::Norm { block, cache } => {
                    let (out, c) = norm2d_forward(&current, block, mode)?;
                    *cache = (mode == Mode::Train).then_some(c);
                    out
                }
                Layer::Act { kind, cached_output } => {
                    let out = activation_forward(&current, *kind);
                    *cached_output = (mode == Mode::Train).then(|| out.clone());
                    out
                }
            };
            if want_taps {
                outputs.push(next.clone());
            }
            current = next;
        }
        let taps = if want_taps {
            let mut taps = Vec::with_capacity(self.param_layer_count());
            for (i, spec) in self.specs.iter().enumerate() {
                if !spec.is_parameterized() {
                    continue;
                }
                let tap_pos = self.specs[i..]
                    .iter()
                    .position(|s| matches!(s, LayerSpec::Act { .. }))
                    .map(|off| i + off)
                    .unwrap_or(self.specs.len() - 1);
                taps.push(outputs[tap_pos].clone());
            }
            taps
        } else {
            Vec::new()
        };
        Ok((taps, current))
    }

    /// Backpropagates through the cached training-mode forward, accumulating
    /// parameter gradients, and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut grad = grad_output.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = match layer {
                Layer::Conv { block, cached_input } => {
                    let input = cached_input
                        .as_ref()
                        .ok_or(TensorError::MissingCache("conv input"))?;
                    conv2d_backward(&grad, input, block)?
                }
                Layer::Norm { block, cache } => {
                    let cache = cache.as_ref().ok_or(TensorError::MissingCache("norm"))?;
                    norm2d_backward(&grad, cache, block)?
                }
                Layer::Act { kind, cached_output } => {
                    let out = cached_output
                        .as_ref()
                        .ok_or(TensorError::MissingCache("activation output"))?;
                    activation_backward(&grad, *kind, out)
                }
            };
        }
        Ok(grad)
    }

    /// Ordered snapshot of every parameterized layer.
    pub fn params_export(&self) -> ParamSet<T> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { block, .. } | Layer::Norm { block, .. } => Some(LayerParams {
                    layer_index: block.layer_index,
                    weights: block.weights.clone(),
                    bias: block.bias.clone(),
                    norm: block.norm_state.clone(),
                }),
                Layer::Act { .. } => None,
            })
            .collect()
    }

    /// Loads a parameter set exported from a structurally identical model.
    pub fn params_load(&mut self, params: &ParamSet<T>, filter: LoadFilter) -> Result<(), ModelError> {
        let mut blocks = self.param_blocks_mut();
        if blocks.len() != params.len() {
            return Err(ModelError::ParamCountMismatch {
                expected: blocks.len(),
                actual: params.len(),
            });
        }
        for (ord, (block, incoming)) in blocks.iter_mut().zip(params).enumerate() {
            if block.is_norm() != incoming.is_norm() {
                return Err(ModelError::ParamShape {
                    index: ord,
                    source: TensorError::ShapeMismatch {
                        context: "norm/conv layer kind",
                        expected: block.weights.shape().to_vec(),
                        actual: incoming.weights.shape().to_vec(),
                    },
                });
            }
            if filter == LoadFilter::SkipNorm && block.is_norm() {
                continue;
            }
            block
                .weights
                .check_same_shape(&incoming.weights, "loaded weights")
                .map_err(|source| ModelError::ParamShape { index: ord, source })?;
            block
                .bias
                .check_same_shape(&incoming.bias, "loaded bias")
                .map_err(|source| ModelError::ParamShape { index: ord, source })?;
            block.weights = incoming.weights.clone();
            block.bias = incoming.bias.clone();
            if let (Some(state), Some(new_state)) = (&mut block.norm_state, &incoming.norm) {
                state.mean = new_state.mean.clone();
                state.var = new_state.var.clone();
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint / wire encoding: JSON manifest + concatenated FTNS tensors.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    layer_index: usize,
    kind: String,
    weights_shape: Vec<usize>,
    bias_shape: Vec<usize>,
    has_norm_state: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    layers: Vec<ManifestLayer>,
}

/// Encodes a parameter set as `u32 LE manifest length + manifest JSON +
/// concatenated FTNS tensors` — the checkpoint format and the payload of
/// model-carrying frames.
pub fn encode_param_set<T: Scalar>(params: &ParamSet<T>) -> Vec<u8> {
    let manifest = Manifest {
        layers: params
            .iter()
            .map(|p| ManifestLayer {
                layer_index: p.layer_index,
                kind: if p.is_norm() { "norm" } else { "conv" }.to_string(),
                weights_shape: p.weights.shape().to_vec(),
                bias_shape: p.bias.shape().to_vec(),
                has_norm_state: p.is_norm(),
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for p in params {
        out.extend_from_slice(&encode_tensor(&p.weights));
        out.extend_from_slice(&encode_tensor(&p.bias));
        if let Some(norm) = &p.norm {
            out.extend_from_slice(&encode_tensor(&norm.mean));
            out.extend_from_slice(&encode_tensor(&norm.var));
        }
    }
    out
}

fn take_tensor<T: Scalar>(bytes: &[u8], offset: &mut usize) -> Result<Tensor<T>, ModelError> {
    let (t, used) = decode_tensor_prefix(&bytes[*offset..])?;
    *offset += used;
    match (t, T::DTYPE) {
        (AnyTensor::F32(t), crate::tensor::Dtype::F32) => Ok(t.convert()),
        (AnyTensor::F64(t), crate::tensor::Dtype::F64) => Ok(t.convert()),
        _ => Err(ModelError::Manifest("tensor dtype mismatch".to_string())),
    }
}

pub fn decode_param_set<T: Scalar>(bytes: &[u8]) -> Result<ParamSet<T>, ModelError> {
    if bytes.len() < 4 {
        return Err(ModelError::Manifest("payload shorter than length prefix".into()));
    }
    let mlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + mlen {
        return Err(ModelError::Manifest("manifest truncated".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[4..4 + mlen])
        .map_err(|e| ModelError::Manifest(e.to_string()))?;
    let mut offset = 4 + mlen;
    let mut params = Vec::with_capacity(manifest.layers.len());
    for layer in &manifest.layers {
        let weights: Tensor<T> = take_tensor(bytes, &mut offset)?;
        let bias: Tensor<T> = take_tensor(bytes, &mut offset)?;
        if weights.shape() != layer.weights_shape.as_slice()
            || bias.shape() != layer.bias_shape.as_slice()
        {
            return Err(ModelError::Manifest(format!(
                "layer {} tensor shapes disagree with manifest",
                layer.layer_index
            )));
        }
        let norm = if layer.has_norm_state {
            let mean: Tensor<T> = take_tensor(bytes, &mut offset)?;
            let var: Tensor<T> = take_tensor(bytes, &mut offset)?;
            Some(NormRunning { mean, var })
        } else {
            None
        };
        params.push(LayerParams {
            layer_index: layer.layer_index,
            weights,
            bias,
            norm,
        });
    }
    if offset != bytes.len() {
        return Err(ModelError::Manifest(format!(
            "{} trailing bytes after parameter tensors",
            bytes.len() - offset
        )));
    }
    Ok(params)
}

/// Writes a parameter set as a checkpoint file.
pub fn save_checkpoint<T: Scalar>(path: &std::path::Path, params: &ParamSet<T>) -> Result<(), ModelError> {
    std::fs::write(path, encode_param_set(params))
        .map_err(|e| ModelError::Manifest(format!("write {}: {e}", path.display())))
}

pub fn load_checkpoint<T: Scalar>(path: &std::path::Path) -> Result<ParamSet<T>, ModelError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::Manifest(format!("read {}: {e}", path.display())))?;
    decode_param_set(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a = build_model::<f32>(&default_model_spec(), 17).unwrap();
        let b = build_model::<f32>(&default_model_spec(), 17).unwrap();
        for (x, y) in a.param_blocks().iter().zip(b.param_blocks()) {
            assert_eq!(x.weights, y.weights);
            assert_eq!(x.bias, y.bias);
        }
        let c = build_model::<f32>(&default_model_spec(), 18).unwrap();
        assert_ne!(a.param_blocks()[0].weights, c.param_blocks()[0].weights);
    }

    #[test]
    fn default_spec_has_six_parameterized_layers() {
        // Four convolutions plus two normalization layers.
        let model = build_model::<f32>(&default_model_spec(), 0).unwrap();
        assert_eq!(model.param_layer_count(), 6);
    }

    #[test]
    fn empty_spec_is_an_error() {
        assert!(matches!(
            build_model::<f32>(&[], 0).unwrap_err(),
            ModelError::EmptySpec
        ));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let spec = vec![
            LayerSpec::Conv { in_ch: 1, out_ch: 4, kernel: 3 },
            LayerSpec::Conv { in_ch: 8, out_ch: 1, kernel: 1 },
            LayerSpec::Act { act: ActKind::Sigmoid },
        ];
        assert!(matches!(
            build_model::<f32>(&spec, 0).unwrap_err(),
            ModelError::ChannelMismatch { index: 1, .. }
        ));
    }

    #[test]
    fn must_end_with_single_channel_sigmoid() {
        let spec = vec![
            LayerSpec::Conv { in_ch: 1, out_ch: 4, kernel: 3 },
            LayerSpec::Act { act: ActKind::Relu },
        ];
        assert!(matches!(
            build_model::<f32>(&spec, 0).unwrap_err(),
            ModelError::BadOutputLayer { .. }
        ));
    }

    #[test]
    fn taps_match_param_layer_count_and_output() {
        let mut model = build_model::<f32>(&default_model_spec(), 3).unwrap();
        let input = Tensor::from_fn(vec![1, 8, 8], |i| (i as f32 * 0.37).sin());
        let (taps, out) = model.forward_with_taps(&input, Mode::Eval).unwrap();
        assert_eq!(taps.len(), 6);
        // Conv and the norm that follows it share the post-relu tap.
        assert_eq!(taps[0], taps[1]);
        assert_eq!(taps[2], taps[3]);
        // Final parameterized layer taps the model output.
        assert_eq!(taps[5], out);
        assert_eq!(out.shape(), &[1, 8, 8]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut model = build_model::<f32>(&default_model_spec(), 4).unwrap();
        let input = Tensor::from_fn(vec![1, 6, 6], |i| (i as f32 * 0.11).cos());
        let a = model.forward(&input, Mode::Eval).unwrap();
        let b = model.forward(&input, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_final_layer_outputs_half_everywhere() {
        let spec = vec![
            LayerSpec::Conv { in_ch: 1, out_ch: 1, kernel: 1 },
            LayerSpec::Act { act: ActKind::Sigmoid },
        ];
        let mut model = build_model::<f32>(&spec, 0).unwrap();
        for b in model.param_blocks_mut() {
            b.weights.fill(0.0);
            b.bias.fill(0.0);
        }
        let input = Tensor::from_fn(vec![1, 4, 4], |i| i as f32);
        let out = model.forward(&input, Mode::Eval).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn export_load_round_trips_bit_exactly() {
        let mut model = build_model::<f32>(&default_model_spec(), 9).unwrap();
        let exported = model.params_export();
        let mut other = build_model::<f32>(&default_model_spec(), 10).unwrap();
        other.params_load(&exported, LoadFilter::All).unwrap();
        assert_eq!(other.params_export(), exported);
        // Round trip through the model it came from is the identity.
        model.params_load(&exported, LoadFilter::All).unwrap();
        assert_eq!(model.params_export(), exported);
    }

    #[test]
    fn load_zeros_zeroes_everything() {
        let mut model = build_model::<f32>(&default_model_spec(), 2).unwrap();
        let mut zeros = model.params_export();
        for p in &mut zeros {
            p.weights.fill(0.0);
            p.bias.fill(0.0);
        }
        model.params_load(&zeros, LoadFilter::All).unwrap();
        for b in model.param_blocks() {
            assert!(b.weights.data().iter().all(|&v| v == 0.0));
            assert!(b.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn load_mean_of_two_models_is_elementwise_mean() {
        let a = build_model::<f64>(&default_model_spec(), 5).unwrap().params_export();
        let b = build_model::<f64>(&default_model_spec(), 6).unwrap().params_export();
        let mean: ParamSet<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| LayerParams {
                layer_index: x.layer_index,
                weights: x.weights.zip_map(&y.weights, |p, q| 0.5 * (p + q)).unwrap(),
                bias: x.bias.zip_map(&y.bias, |p, q| 0.5 * (p + q)).unwrap(),
                norm: x.norm.clone(),
            })
            .collect();
        let mut model = build_model::<f64>(&default_model_spec(), 7).unwrap();
        model.params_load(&mean, LoadFilter::All).unwrap();
        for ((blk, x), y) in model.param_blocks().iter().zip(&a).zip(&b) {
            for i in 0..blk.weights.len() {
                let expect = 0.5 * (x.weights.data()[i] + y.weights.data()[i]);
                assert_eq!(blk.weights.data()[i], expect);
            }
        }
    }

    #[test]
    fn skip_norm_preserves_local_norm_layers() {
        let mut model = build_model::<f32>(&default_model_spec(), 1).unwrap();
        // Give the local norm layers distinctive values.
        for b in model.param_blocks_mut() {
            if b.is_norm() {
                b.weights.fill(3.0);
            }
        }
        let mut incoming = build_model::<f32>(&default_model_spec(), 2).unwrap().params_export();
        for p in &mut incoming {
            p.weights.fill(7.0);
        }
        model.params_load(&incoming, LoadFilter::SkipNorm).unwrap();
        for b in model.param_blocks() {
            if b.is_norm() {
                assert!(b.weights.data().iter().all(|&v| v == 3.0));
            } else {
                assert!(b.weights.data().iter().all(|&v| v == 7.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = build_model::<f32>(&default_model_spec(), 41).unwrap();
        let params = model.params_export();
        let bytes = encode_param_set(&params);
        let back: ParamSet<f32> = decode_param_set(&bytes).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let model = build_model::<f32>(&default_model_spec(), 41).unwrap();
        let bytes = encode_param_set(&model.params_export());
        assert!(decode_param_set::<f32>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_param_set::<f32>(&bytes[..2]).is_err());
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("fedsoda_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let params = build_model::<f32>(&default_model_spec(), 77).unwrap().params_export();
        save_checkpoint(&path, &params).unwrap();
        let back: ParamSet<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        /// Tap count equals parameterized layer count for any valid spec.
        #[test]
        fn taps_equal_param_layers_on_random_specs(
            seed in 0u64..500,
            blocks in proptest::collection::vec((1usize..=3, proptest::bool::ANY, proptest::bool::ANY), 0..4),
        ) {
            let mut spec = Vec::new();
            let mut ch = 1usize;
            for (out_ch, with_norm, with_act) in blocks {
                spec.push(LayerSpec::Conv { in_ch: ch, out_ch, kernel: 3 });
                ch = out_ch;
                if with_norm {
                    spec.push(LayerSpec::Norm { ch });
                }
                if with_act {
                    spec.push(LayerSpec::Act { act: ActKind::Relu });
                }
            }
            spec.push(LayerSpec::Conv { in_ch: ch, out_ch: 1, kernel: 1 });
            spec.push(LayerSpec::Act { act: ActKind::Sigmoid });

            let mut model = build_model::<f32>(&spec, seed).unwrap();
            let expected = model.param_layer_count();
            let input = Tensor::from_fn(vec![1, 5, 5], |i| (i as f32 * 0.31).sin());
            let (taps, _) = model.forward_with_taps(&input, Mode::Eval).unwrap();
            proptest::prop_assert_eq!(taps.len(), expected);
        }
    }
}
