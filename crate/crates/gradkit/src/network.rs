use rand::{Rng, RngCore};

use crate::error::{GradError, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::spec::{LayerSpec, NetworkParams, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Cache<S> {
    Linear { x: Vec<S>, rows: usize, in_shape: Vec<usize> },
    Relu { mask: Vec<bool> },
    LayerNorm { xhat: Vec<S>, inv_std: Vec<f64> },
    Conv { cols: Vec<S>, geom: ConvGeom },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Dropout { mask: Option<Vec<S>> },
    Softmax { y: Vec<S>, classes: usize },
}

/// Record of one forward pass, consumed by [`backward`].
pub struct Tape<S = f32> {
    fingerprint: u64,
    version: u64,
    caches: Vec<Cache<S>>,
    output_shape: Vec<usize>,
}

impl<S> Tape<S> {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Result of [`backward`].
#[derive(Clone, Debug)]
pub struct Gradients<S = f32> {
    pub params: NetworkParams<S>,
    /// Gradient with respect to the network input.
    pub input: Tensor<S>,
}

/// Runs the network and records a tape.
///
/// `rng` drives dropout masks and is only consulted in [`Mode::Train`].
pub fn forward<S: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<S>,
    input: Tensor<S>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<S>, Tape<S>)> {
    run(spec, params, input, mode, Some(rng), true).map(|(y, tape)| (y, tape.expect("recorded")))
}

/// Eval-mode forward without recording.
pub fn infer<S: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<S>,
    input: Tensor<S>,
) -> Result<Tensor<S>> {
    run(spec, params, input, Mode::Eval, None, false).map(|(y, _)| y)
}

fn run<S: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<S>,
    input: Tensor<S>,
    mode: Mode,
    mut rng: Option<&mut dyn RngCore>,
    record: bool,
) -> Result<(Tensor<S>, Option<Tape<S>>)> {
    params.check(spec)?;
    spec.check_input(input.shape())?;
    let offsets = spec.param_offsets();
    let mut caches = Vec::with_capacity(if record { spec.layers.len() } else { 0 });
    let mut shape = input.shape().to_vec();
    let mut x = input.into_data();

    for (i, layer) in spec.layers.iter().enumerate() {
        let out_shape = layer.output_shape(i, &shape)?;
        let p = &params.tensors[offsets[i]..];
        let (y, cache) = match *layer {
            LayerSpec::Linear { inputs, .. } => {
                let rows = x.len() / inputs;
                let y = kernels::linear_forward(&x, rows, inputs, p[0].data(), p[1].data());
                let cache = record.then(|| Cache::Linear {
                    x,
                    rows,
                    in_shape: shape.clone(),
                });
                (y, cache)
            }
            LayerSpec::Relu => {
                let mask: Vec<bool> = x.iter().map(|v| *v > S::ZERO).collect();
                let y = x
                    .iter()
                    .zip(&mask)
                    .map(|(v, &m)| if m { *v } else { S::ZERO })
                    .collect();
                (y, record.then_some(Cache::Relu { mask }))
            }
            LayerSpec::LayerNorm { .. } => {
                let (y, xhat, inv_std) = kernels::layer_norm_forward(&x, p[0].data(), p[1].data());
                (y, record.then_some(Cache::LayerNorm { xhat, inv_std }))
            }
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let geom = ConvGeom::new(&shape, kernel, stride, padding);
                let (y, cols) = kernels::conv_forward(&x, &geom, p[0].data(), p[1].data());
                (y, record.then_some(Cache::Conv { cols, geom }))
            }
            LayerSpec::MaxPool2d { size, stride } => {
                let (y, argmax) = kernels::maxpool_forward(&x, &shape, size, stride);
                let cache = record.then(|| Cache::Pool {
                    argmax,
                    in_shape: shape.clone(),
                });
                (y, cache)
            }
            LayerSpec::Dropout { p: drop } => {
                if mode == Mode::Train && drop > 0.0 {
                    let rng = rng
                        .as_mut()
                        .expect("train-mode forward always carries an rng");
                    let keep = S::from_f64(1.0 / (1.0 - f64::from(drop)));
                    let mask: Vec<S> = (0..x.len())
                        .map(|_| {
                            if rng.gen::<f32>() < drop {
                                S::ZERO
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(v, m)| *v * *m).collect();
                    (y, record.then_some(Cache::Dropout { mask: Some(mask) }))
                } else {
                    (x, record.then_some(Cache::Dropout { mask: None }))
                }
            }
            LayerSpec::Softmax => {
                let classes = *shape.last().expect("non-scalar");
                let y = kernels::softmax_rows(&x, classes);
                let cache = record.then(|| Cache::Softmax {
                    y: y.clone(),
                    classes,
                });
                (y, cache)
            }
        };
        if let Some(c) = cache {
            caches.push(c);
        }
        x = y;
        shape = out_shape;
    }

    kernels::check_finite("forward output", spec.layers.len(), &x)?;
    let output = Tensor::new(shape.clone(), x)?;
    let tape = record.then(|| Tape {
        fingerprint: spec.fingerprint(),
        version: params.version(),
        caches,
        output_shape: shape,
    });
    Ok((output, tape))
}

/// Back-propagates `loss_grad` (gradient of the loss with respect to the
/// network output) through a tape produced by [`forward`] on the same spec
/// and unchanged parameters.
pub fn backward<S: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<S>,
    tape: Tape<S>,
    loss_grad: &Tensor<S>,
) -> Result<Gradients<S>> {
    if tape.fingerprint != spec.fingerprint()
        || tape.version != params.version()
        || tape.caches.len() != spec.layers.len()
    {
        return Err(GradError::StaleTape);
    }
    if loss_grad.shape() != tape.output_shape.as_slice() {
        return Err(GradError::GradShape {
            expected: tape.output_shape.clone(),
            got: loss_grad.shape().to_vec(),
        });
    }
    let offsets = spec.param_offsets();
    let mut grads = NetworkParams::zeros_like(spec);
    let mut g = loss_grad.data().to_vec();
    let mut in_shape = Vec::new();

    for (i, (layer, cache)) in spec.layers.iter().zip(tape.caches).enumerate().rev() {
        let off = offsets[i];
        g = match (layer, cache) {
            (LayerSpec::Linear { inputs, .. }, Cache::Linear { x, rows, in_shape: s }) => {
                let (dx, dw, db) =
                    kernels::linear_backward(&x, rows, *inputs, params.tensors[off].data(), &g);
                grads.tensors[off].data_mut().copy_from_slice(&dw);
                grads.tensors[off + 1].data_mut().copy_from_slice(&db);
                in_shape = s;
                dx
            }
            (LayerSpec::Relu, Cache::Relu { mask }) => g
                .iter()
                .zip(&mask)
                .map(|(v, &m)| if m { *v } else { S::ZERO })
                .collect(),
            (LayerSpec::LayerNorm { .. }, Cache::LayerNorm { xhat, inv_std }) => {
                let (dx, dgain, dbias) =
                    kernels::layer_norm_backward(&xhat, &inv_std, params.tensors[off].data(), &g);
                grads.tensors[off].data_mut().copy_from_slice(&dgain);
                grads.tensors[off + 1].data_mut().copy_from_slice(&dbias);
                dx
            }
            (LayerSpec::Conv2d { .. }, Cache::Conv { cols, geom }) => {
                let (dx, dw, db) =
                    kernels::conv_backward(&cols, &geom, params.tensors[off].data(), &g, true);
                grads.tensors[off].data_mut().copy_from_slice(&dw);
                grads.tensors[off + 1].data_mut().copy_from_slice(&db);
                in_shape = vec![geom.channels, geom.height, geom.width];
                dx.expect("requested")
            }
            (LayerSpec::MaxPool2d { .. }, Cache::Pool { argmax, in_shape: s }) => {
                let len = s.iter().product();
                in_shape = s;
                kernels::maxpool_backward(&argmax, len, &g)
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => match mask {
                Some(m) => g.iter().zip(&m).map(|(a, b)| *a * *b).collect(),
                None => g,
            },
            (LayerSpec::Softmax, Cache::Softmax { y, classes }) => {
                kernels::softmax_backward(&y, &g, classes)
            }
            _ => return Err(GradError::StaleTape),
        };
    }

    // Shape-preserving layers at the front leave `in_shape` unset; the
    // gradient then has the spec's declared input rank with concrete sizes
    // recovered from the data length.
    let input_shape = if in_shape.iter().product::<usize>() == g.len() && !in_shape.is_empty() {
        in_shape
    } else {
        infer_input_shape(spec, g.len())
    };
    Ok(Gradients {
        params: grads,
        input: Tensor::new(input_shape, g)?,
    })
}

fn infer_input_shape(spec: &NetworkSpec, len: usize) -> Vec<usize> {
    let known: usize = spec.input_shape.iter().filter(|&&d| d != 0).product();
    spec.input_shape
        .iter()
        .map(|&d| if d == 0 { len / known.max(1) } else { d })
        .collect()
}
