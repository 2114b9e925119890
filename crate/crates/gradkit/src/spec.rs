use rand::Rng;

use crate::error::{GradError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding so the output keeps the input's spatial size.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Affine map applied to each row of a `[rows, inputs]` tensor. A tensor
    /// whose total length equals `inputs` is flattened to a single row.
    Linear { inputs: usize, outputs: usize },
    Relu,
    /// Per-row normalization over the trailing `dim` features.
    LayerNorm { dim: usize },
    /// Convolution over a `[channels, height, width]` tensor.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    /// Max pooling over a `[channels, height, width]` tensor; odd sizes floor.
    MaxPool2d { size: usize, stride: usize },
    /// Inverted dropout: active only in [`crate::Mode::Train`].
    Dropout { p: f32 },
    /// Softmax over the last axis.
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "Linear",
            LayerSpec::Relu => "ReLU",
            LayerSpec::LayerNorm { .. } => "LayerNorm",
            LayerSpec::Conv2d { .. } => "Conv2D",
            LayerSpec::MaxPool2d { .. } => "MaxPool2D",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Softmax => "Softmax",
        }
    }

    /// Shapes of this layer's learnable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::LayerNorm { dim } => vec![vec![dim], vec![dim]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            _ => Vec::new(),
        }
    }

    fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => &["weight", "bias"],
            LayerSpec::LayerNorm { .. } => &["gain", "bias"],
            _ => &[],
        }
    }

    fn mismatch(&self, layer: usize, expected: String, got: &[usize]) -> GradError {
        GradError::ShapeMismatch {
            layer,
            kind: self.kind(),
            expected,
            got: got.to_vec(),
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => {
                let len: usize = input.iter().product();
                if input.last() == Some(&inputs) && input.len() == 2 {
                    Ok(vec![input[0], outputs])
                } else if len == inputs {
                    Ok(vec![1, outputs])
                } else {
                    Err(self.mismatch(layer, format!("[rows, {inputs}] or {inputs} values"), input))
                }
            }
            LayerSpec::LayerNorm { dim } => {
                if input.last() == Some(&dim) {
                    Ok(input.to_vec())
                } else {
                    Err(self.mismatch(layer, format!("[.., {dim}]"), input))
                }
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => {
                if input.is_empty() {
                    Err(self.mismatch(layer, "non-scalar".into(), input))
                } else {
                    Ok(input.to_vec())
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(self.mismatch(layer, format!("[{in_channels}, H, W]"), input));
                }
                let pad = match padding {
                    Padding::Same => (kernel - 1) / 2,
                    Padding::Valid => 0,
                };
                let (h, w) = (input[1] + 2 * pad, input[2] + 2 * pad);
                if h < kernel || w < kernel {
                    return Err(self.mismatch(
                        layer,
                        format!("[{in_channels}, >={k}, >={k}]", k = kernel - 2 * pad),
                        input,
                    ));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if input.len() != 3 || input[1] < size || input[2] < size {
                    return Err(self.mismatch(layer, format!("[C, >={size}, >={size}]"), input));
                }
                Ok(vec![
                    input[0],
                    (input[1] - size) / stride + 1,
                    (input[2] - size) / stride + 1,
                ])
            }
        }
    }
}

/// Ordered layer list plus the declared input shape (`0` = any size).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Builds a spec, rejecting conv/pool configurations other than 3x3
    /// stride-1 convolutions and 2x2 stride-2 pooling.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self {
            input_shape,
            layers,
        };
        spec.check(false)?;
        Ok(spec)
    }

    /// Builds a spec allowing any odd conv kernel, stride and pool size.
    pub fn new_unrestricted(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self {
            input_shape,
            layers,
        };
        spec.check(true)?;
        Ok(spec)
    }

    fn check(&self, unrestricted: bool) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    if kernel % 2 == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
                        return Err(GradError::InvalidSpec(format!("layer {i}: bad Conv2D")));
                    }
                    if !unrestricted && (kernel != 3 || stride != 1) {
                        return Err(GradError::InvalidSpec(format!(
                            "layer {i}: only 3x3 stride-1 convolutions are enabled"
                        )));
                    }
                }
                LayerSpec::MaxPool2d { size, stride } => {
                    if size == 0 || stride == 0 {
                        return Err(GradError::InvalidSpec(format!("layer {i}: bad MaxPool2D")));
                    }
                    if !unrestricted && (size != 2 || stride != 2) {
                        return Err(GradError::InvalidSpec(format!(
                            "layer {i}: only 2x2 stride-2 pooling is enabled"
                        )));
                    }
                }
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(GradError::InvalidSpec(format!(
                            "layer {i}: dropout probability {p} outside [0, 1)"
                        )));
                    }
                }
                LayerSpec::Linear { inputs, outputs } if inputs == 0 || outputs == 0 => {
                    return Err(GradError::InvalidSpec(format!("layer {i}: empty Linear")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks `input` against the declared input shape.
    pub fn check_input(&self, input: &[usize]) -> Result<()> {
        let ok = input.len() == self.input_shape.len()
            && input
                .iter()
                .zip(&self.input_shape)
                .all(|(&got, &want)| want == 0 || got == want);
        if ok {
            Ok(())
        } else {
            Err(GradError::ShapeMismatch {
                layer: 0,
                kind: self.layers.first().map_or("Input", |l| l.kind()),
                expected: format!("{:?} (0 = any)", self.input_shape),
                got: input.to_vec(),
            })
        }
    }

    /// Shapes after every layer, starting with the input itself.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check_input(input)?;
        let mut shapes = vec![input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(self.shape_trace(input)?.pop().expect("non-empty"))
    }

    /// Index of the first parameter tensor owned by each layer.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            offsets.push(at);
            at += layer.param_shapes().len();
        }
        offsets
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names().iter().map(move |n| format!("{i}.{n}")))
            .collect()
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// The same network without trailing softmax layers, producing logits.
    pub fn without_softmax(&self) -> NetworkSpec {
        let mut layers = self.layers.clone();
        while layers.last() == Some(&LayerSpec::Softmax) {
            layers.pop();
        }
        NetworkSpec {
            input_shape: self.input_shape.clone(),
            layers,
        }
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        // FNV-1a over the debug rendering; stable within a process.
        let text = format!("{self:?}");
        text.bytes().fold(0xcbf29ce484222325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
        })
    }
}

/// Learnable tensors of a network, in [`NetworkSpec::param_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<S = f32> {
    pub tensors: Vec<Tensor<S>>,
    version: u64,
}

impl<S: Scalar> NetworkParams<S> {
    pub fn from_tensors(tensors: Vec<Tensor<S>>) -> Self {
        Self {
            tensors,
            version: 0,
        }
    }

    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut tensors = Vec::new();
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Linear { inputs, outputs } => {
                    tensors.push(glorot(&[outputs, inputs], inputs, outputs, rng));
                    tensors.push(Tensor::zeros(&[outputs]));
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let area = kernel * kernel;
                    tensors.push(glorot(
                        &[out_channels, in_channels, kernel, kernel],
                        in_channels * area,
                        out_channels * area,
                        rng,
                    ));
                    tensors.push(Tensor::zeros(&[out_channels]));
                }
                LayerSpec::LayerNorm { dim } => {
                    tensors.push(Tensor::filled(&[dim], S::ONE));
                    tensors.push(Tensor::zeros(&[dim]));
                }
                _ => {}
            }
        }
        Self::from_tensors(tensors)
    }

    pub fn zeros_like(spec: &NetworkSpec) -> Self {
        Self::from_tensors(spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect())
    }

    /// Verifies tensor count and shapes against `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(GradError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (i, (want, t)) in shapes.iter().zip(&self.tensors).enumerate() {
            if want.as_slice() != t.shape() {
                return Err(GradError::ParamMismatch(format!(
                    "tensor {i}: expected shape {want:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Incremented on every optimizer update; tapes record it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version = self.version.wrapping_add(1);
    }

    pub fn cast<T: Scalar>(&self) -> NetworkParams<T> {
        NetworkParams::from_tensors(self.tensors.iter().map(Tensor::cast).collect())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn add_assign(&mut self, other: &NetworkParams<S>) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: S) {
        for t in &mut self.tensors {
            t.scale(factor);
        }
    }

    pub fn named(&self, spec: &NetworkSpec) -> Vec<(String, Tensor<S>)> {
        spec.param_names().into_iter().zip(self.tensors.iter().cloned()).collect()
    }

    /// Rebuilds parameters from named tensors, validating names and shapes.
    pub fn from_named(spec: &NetworkSpec, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let names = spec.param_names();
        if names.len() != named.len() {
            return Err(GradError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (want, (name, tensor)) in names.iter().zip(named) {
            if *want != name {
                return Err(GradError::ParamMismatch(format!(
                    "expected tensor {want}, found {name}"
                )));
            }
            tensors.push(tensor);
        }
        let params = Self::from_tensors(tensors);
        params.check(spec)?;
        Ok(params)
    }
}

fn glorot<S: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_standard_conv_unless_enabled() {
        let conv5 = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: 5,
            stride: 1,
            padding: Padding::Same,
        };
        assert!(NetworkSpec::new(vec![1, 8, 8], vec![conv5.clone()]).is_err());
        assert!(NetworkSpec::new_unrestricted(vec![1, 8, 8], vec![conv5]).is_ok());
        let pool3 = LayerSpec::MaxPool2d { size: 3, stride: 3 };
        assert!(NetworkSpec::new(vec![1, 8, 8], vec![pool3]).is_err());
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = NetworkSpec::new(
            vec![0, 4],
            vec![
                LayerSpec::Linear { inputs: 4, outputs: 3 },
                LayerSpec::Relu,
                LayerSpec::Linear { inputs: 5, outputs: 2 },
            ],
        )
        .unwrap();
        let err = spec.output_shape(&[7, 4]).unwrap_err().to_string();
        assert!(err.contains("layer 2") && err.contains("Linear"), "{err}");
    }

    #[test]
    fn odd_pool_sizes_floor() {
        let pool = LayerSpec::MaxPool2d { size: 2, stride: 2 };
        assert_eq!(pool.output_shape(0, &[3, 25, 7]).unwrap(), vec![3, 12, 3]);
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        use rand::SeedableRng;
        let spec = NetworkSpec::new(
            vec![0, 6],
            vec![
                LayerSpec::LayerNorm { dim: 6 },
                LayerSpec::Linear { inputs: 6, outputs: 4 },
            ],
        )
        .unwrap();
        let a: NetworkParams<f32> = NetworkParams::init(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let b: NetworkParams<f32> = NetworkParams::init(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let bound = (6.0f32 / 10.0).sqrt();
        assert!(a.tensors[2].data().iter().all(|w| w.abs() <= bound));
        assert_eq!(spec.param_names(), vec!["0.gain", "0.bias", "1.weight", "1.bias"]);
    }
}
