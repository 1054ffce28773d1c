//! Desk-scale differentiable encoders for both modalities.
//!
//! An [`Encoder`] is an ordered stack of layers over batches shaped
//! `(N, T, C)`: vision inputs use a single position `T = 1`, language inputs
//! are embedded token matrices with `T = l_max`. Training-mode forwards
//! record a [`ForwardTrace`] that the reverse-mode [`Encoder::backward`]
//! replays; nothing is mutated by a forward pass, batch-norm running
//! statistics are folded in explicitly via [`Encoder::update_running_stats`].

pub mod gradcheck;

pub use gradcheck::{gradient_check, GradCheckReport};

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scalar::{cast, cast_usize, Scalar};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Architecture description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    /// Width-3 one-dimensional convolution with same-padding.
    Conv1dK3 {
        channels: usize,
    },
    Relu,
    BatchNorm,
    /// Inverted dropout; `keep_prob` is the survival probability.
    Dropout {
        keep_prob: f64,
    },
    /// Averages over the position axis, collapsing `T` to 1. With
    /// `masked = true` only the first `length` positions of each sample
    /// contribute and the divisor is that length.
    GlobalAvgPool {
        #[serde(default)]
        masked: bool,
    },
    /// Skip connection `y = x + body(x)`; the body must preserve shape.
    Residual {
        body: Vec<LayerSpec>,
    },
}

/// Forward/backward execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, live dropout masks, trace recording.
    Train,
    /// Running statistics, dropout disabled; a pure function of the input.
    Eval,
}

/// A batch of inputs shaped `(N, T, C)` with optional per-sample true
/// lengths along `T` (used by masked pooling and the all-padding check).
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub data: Array3<F>,
    pub lengths: Option<Vec<usize>>,
}

impl<F: Scalar> Batch<F> {
    /// Wraps `(N, C)` feature vectors as a single-position batch.
    pub fn from_vectors(rows: Array2<F>) -> Self {
        let (n, c) = rows.dim();
        Batch {
            data: rows.into_shape_with_order((n, 1, c)).expect("row-major reshape"),
            lengths: None,
        }
    }

    /// Stacks equally shaped `(T, C)` matrices into a batch.
    pub fn from_matrices(items: &[Array2<F>], lengths: Option<Vec<usize>>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::ShapeMismatch {
            context: "batch assembly".into(),
            expected: "at least one item".into(),
            actual: "0 items".into(),
        })?;
        let (t, c) = first.dim();
        let mut data = Array3::zeros((items.len(), t, c));
        for (i, m) in items.iter().enumerate() {
            if m.dim() != (t, c) {
                return Err(Error::ShapeMismatch {
                    context: format!("batch item {i}"),
                    expected: format!("{t}x{c}"),
                    actual: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
            data.slice_mut(s![i, .., ..]).assign(m);
        }
        Ok(Batch { data, lengths })
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
enum LayerParams<F> {
    Dense {
        w: Array2<F>,
        b: Array1<F>,
    },
    Conv {
        /// Taps for offsets −1, 0, +1; each is `C_in × C_out`.
        w: [Array2<F>; 3],
        b: Array1<F>,
    },
    BatchNorm {
        gamma: Array1<F>,
        beta: Array1<F>,
        running_mean: Array1<F>,
        running_var: Array1<F>,
    },
    Stateless,
    Residual {
        body: Vec<Layer<F>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<F> {
    spec: LayerSpec,
    params: LayerParams<F>,
}

/// Gradients (or momentum buffers) mirroring an encoder's parameters.
#[derive(Debug, Clone)]
pub struct EncoderGrads<F> {
    layers: Vec<LayerGrads<F>>,
}

#[derive(Debug, Clone)]
enum LayerGrads<F> {
    Dense {
        dw: Array2<F>,
        db: Array1<F>,
    },
    Conv {
        dw: [Array2<F>; 3],
        db: Array1<F>,
    },
    BatchNorm {
        dgamma: Array1<F>,
        dbeta: Array1<F>,
    },
    Stateless,
    Residual {
        body: Vec<LayerGrads<F>>,
    },
}

/// Per-layer values recorded by a training-mode forward.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    mode: Mode,
    batch_len: usize,
    layers: Vec<LayerTrace<F>>,
}

#[derive(Debug, Clone)]
enum LayerTrace<F> {
    Dense {
        input: Array3<F>,
    },
    Conv {
        input: Array3<F>,
    },
    Relu {
        input: Array3<F>,
    },
    BatchNorm {
        xhat: Array3<F>,
        inv_std: Array1<F>,
        batch_mean: Array1<F>,
        batch_var: Array1<F>,
    },
    BatchNormEval,
    Dropout {
        /// Element multipliers: 0 for dropped units, 1/keep_prob otherwise.
        mult: Option<Array3<F>>,
    },
    Pool {
        t_in: usize,
        lengths: Option<Vec<usize>>,
        masked: bool,
    },
    Residual {
        body: Vec<LayerTrace<F>>,
    },
}

/// A modality encoder: layer stack, expected input shape, feature size.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    name: String,
    input_shape: (usize, usize),
    layers: Vec<Layer<F>>,
    feature_dim: usize,
    /// First layer of the always-learnable FC head; `layers.len()` when the
    /// whole stack belongs to the branch's frozen group.
    head_start: usize,
}

impl<F: Scalar> Encoder<F> {
    /// Vision branch: free-form body, then the mandatory head of two dense
    /// layers with batch normalization after each and dropout before the
    /// last dense layer.
    pub fn vision(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let head_start = validate_vision_arch(specs)?;
        Self::build("vision", (1, input_dim), specs, head_start, seed)
    }

    /// Language branch: a conv1d_k3 stack (relu/batch-norm/dropout allowed)
    /// ending in global average pooling, with no dense layers.
    pub fn language(l_max: usize, e_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_language_arch(specs)?;
        Self::build("language", (l_max, e_dim), specs, specs.len(), seed)
    }

    /// Contract-free stack for verification tools; every layer is treated
    /// as head (always learnable).
    pub fn stack(name: &str, input_shape: (usize, usize), specs: &[LayerSpec], seed: u64) -> Result<Self> {
        Self::build(name, input_shape, specs, specs.len(), seed)
    }

    fn build(
        name: &str,
        input_shape: (usize, usize),
        specs: &[LayerSpec],
        head_start: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = substream(seed, &format!("encoder-init-{name}"));
        let (t, c) = walk_shapes(input_shape, specs)?;
        if t != 1 {
            return Err(Error::InvalidArchitecture {
                reason: format!("{name} stack must end with a single position, got T={t}"),
            });
        }
        let layers = init_layers(input_shape, specs, &mut rng)?;
        Ok(Encoder {
            name: name.to_string(),
            input_shape,
            layers,
            feature_dim: c,
            head_start,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.export_arrays("").iter().map(|(_, _, data)| data.len()).sum()
    }

    /// Runs the stack. Training mode records a full trace and draws live
    /// dropout masks from `rng`; eval mode is a pure function of the input.
    /// Returns the `(N, d)` features and the trace.
    pub fn forward(
        &self,
        batch: &Batch<F>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<F>, ForwardTrace<F>)> {
        let (n, t, c) = batch.data.dim();
        if (t, c) != self.input_shape {
            return Err(Error::ShapeMismatch {
                context: format!("{} encoder input", self.name),
                expected: format!("(T, C) = {:?}", self.input_shape),
                actual: format!("({t}, {c})"),
            });
        }
        if n == 0 {
            return Err(Error::ShapeMismatch {
                context: format!("{} encoder input", self.name),
                expected: "non-empty batch".into(),
                actual: "0 samples".into(),
            });
        }
        if let Some(lengths) = &batch.lengths {
            if lengths.len() != n {
                return Err(Error::ShapeMismatch {
                    context: format!("{} batch lengths", self.name),
                    expected: n.to_string(),
                    actual: lengths.len().to_string(),
                });
            }
            if lengths.iter().any(|&l| l == 0) {
                return Err(Error::AllPadding);
            }
            if lengths.iter().any(|&l| l > t) {
                return Err(Error::ShapeMismatch {
                    context: format!("{} batch lengths", self.name),
                    expected: format!("lengths <= {t}"),
                    actual: "length beyond the position axis".into(),
                });
            }
        }
        if !batch.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{} encoder input", self.name),
            });
        }

        let mut x = batch.data.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        forward_layers(
            &self.layers,
            &mut x,
            mode,
            &mut rng,
            batch.lengths.as_deref(),
            &mut traces,
            0,
        )?;
        let (n_out, t_out, c_out) = x.dim();
        debug_assert_eq!(t_out, 1);
        let features = x
            .into_shape_with_order((n_out, c_out))
            .expect("row-major reshape");
        Ok((
            features,
            ForwardTrace {
                mode,
                batch_len: n,
                layers: traces,
            },
        ))
    }

    /// Eval-mode forward without trace bookkeeping for callers.
    pub fn forward_eval(&self, batch: &Batch<F>) -> Result<Array2<F>> {
        self.forward(batch, Mode::Eval, None).map(|(f, _)| f)
    }

    /// Folds the batch statistics recorded in a training trace into the
    /// running batch-norm statistics (exponential average, momentum 0.1,
    /// unbiased variance). Layers before `from_layer` are left untouched so
    /// frozen groups stay bitwise stable.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace<F>, from_layer: usize) {
        let start = from_layer.min(self.layers.len());
        update_stats_layers(&mut self.layers[start..], &trace.layers[start..], trace.batch_len);
    }

    /// Reverse-mode differentiation. `out_grad` is `(N, d)`; returns the
    /// parameter gradients and the gradient w.r.t. the batch input.
    pub fn backward(
        &self,
        trace: &ForwardTrace<F>,
        out_grad: &Array2<F>,
    ) -> Result<(EncoderGrads<F>, Array3<F>)> {
        if trace.mode != Mode::Train {
            return Err(Error::TraceMismatch {
                reason: "trace was recorded in eval mode".into(),
            });
        }
        if trace.layers.len() != self.layers.len() {
            return Err(Error::TraceMismatch {
                reason: format!(
                    "trace has {} layers, encoder has {}",
                    trace.layers.len(),
                    self.layers.len()
                ),
            });
        }
        let (n, d) = out_grad.dim();
        if n != trace.batch_len || d != self.feature_dim {
            return Err(Error::ShapeMismatch {
                context: format!("{} output gradient", self.name),
                expected: format!("({}, {})", trace.batch_len, self.feature_dim),
                actual: format!("({n}, {d})"),
            });
        }
        let mut grad = out_grad
            .clone()
            .into_shape_with_order((n, 1, d))
            .expect("row-major reshape");
        let mut grads = vec![];
        backward_layers(&self.layers, &trace.layers, &mut grad, &mut grads)?;
        Ok((EncoderGrads { layers: grads }, grad))
    }

    /// Zero gradient/velocity buffers matching this encoder's parameters.
    pub fn zero_grads(&self) -> EncoderGrads<F> {
        EncoderGrads {
            layers: self.layers.iter().map(zero_grads_layer).collect(),
        }
    }

    /// SGD-with-momentum update applied to layers `from_layer..`; earlier
    /// layers (a frozen group) keep parameters and velocity untouched.
    pub fn sgd_step(
        &mut self,
        grads: &EncoderGrads<F>,
        velocity: &mut EncoderGrads<F>,
        lr: F,
        momentum: F,
        from_layer: usize,
    ) {
        for (i, (layer, (g, v))) in self
            .layers
            .iter_mut()
            .zip(grads.layers.iter().zip(velocity.layers.iter_mut()))
            .enumerate()
        {
            if i >= from_layer {
                sgd_layer(layer, g, v, lr, momentum);
            }
        }
    }

    /// Copies all parameters from a structurally identical encoder.
    pub fn copy_params_from(&mut self, other: &Encoder<F>) -> Result<()> {
        if self.specs() != other.specs() || self.input_shape != other.input_shape {
            return Err(Error::InvalidArchitecture {
                reason: format!("{} encoders differ structurally", self.name),
            });
        }
        self.layers = other.layers.clone();
        Ok(())
    }

    /// Copies only the body (layers before the head boundary) from a
    /// structurally identical encoder, keeping this encoder's head.
    pub fn copy_body_from(&mut self, other: &Encoder<F>) -> Result<()> {
        if self.specs() != other.specs() || self.input_shape != other.input_shape {
            return Err(Error::InvalidArchitecture {
                reason: format!("{} encoders differ structurally", self.name),
            });
        }
        for i in 0..self.head_start {
            self.layers[i] = other.layers[i].clone();
        }
        Ok(())
    }

    /// Named parameter arrays `(name, shape, row-major f64 data)` for
    /// persistence; names are `{prefix}layer{i}/{slot}`.
    pub fn export_arrays(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        export_layers(&self.layers, prefix, &mut out);
        out
    }

    /// Restores parameters exported by [`Encoder::export_arrays`].
    pub fn import_arrays(&mut self, prefix: &str, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mut expected = Vec::new();
        export_layers(&self.layers, prefix, &mut expected);
        let lookup: std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = arrays
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let mut imported = Vec::with_capacity(expected.len());
        for (name, shape, _) in &expected {
            let (got_shape, data) = lookup.get(name.as_str()).ok_or_else(|| Error::CorruptCheckpoint {
                reason: format!("missing array {name:?}"),
            })?;
            if *got_shape != shape {
                return Err(Error::CorruptCheckpoint {
                    reason: format!("array {name:?} has shape {got_shape:?}, expected {shape:?}"),
                });
            }
            imported.push((*data).clone());
        }
        let mut iter = imported.into_iter();
        import_layers(&mut self.layers, &mut iter);
        Ok(())
    }

    /// Bitwise digest of the parameters in layers `range` (frozen-group
    /// verification).
    pub fn params_digest(&self, from_layer: usize, to_layer: usize) -> String {
        let mut bytes = Vec::new();
        let mut arrays = Vec::new();
        export_layers(&self.layers[from_layer..to_layer.min(self.layers.len())], "", &mut arrays);
        for (_, _, data) in arrays {
            for v in data {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::util::sha256_hex(&bytes)
    }
}

impl<F: Scalar> EncoderGrads<F> {
    /// Scales every gradient in place (λ-weighting).
    pub fn scale(&mut self, factor: F) {
        for layer in &mut self.layers {
            scale_layer(layer, factor);
        }
    }

    /// Flattens to f64 in the same order as [`Encoder::export_arrays`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        flatten_layers(&self.layers, &mut out);
        out
    }
}

/// Shape propagation and structural validation shared by all constructors.
fn walk_shapes(input: (usize, usize), specs: &[LayerSpec]) -> Result<(usize, usize)> {
    let (mut t, mut c) = input;
    if t == 0 || c == 0 {
        return Err(Error::InvalidArchitecture {
            reason: format!("input shape ({t}, {c}) has a zero axis"),
        });
    }
    for (i, spec) in specs.iter().enumerate() {
        match spec {
            LayerSpec::Dense { units } => {
                if *units == 0 {
                    return Err(Error::InvalidArchitecture {
                        reason: format!("layer {i}: dense with zero units"),
                    });
                }
                c = *units;
            }
            LayerSpec::Conv1dK3 { channels } => {
                if *channels == 0 {
                    return Err(Error::InvalidArchitecture {
                        reason: format!("layer {i}: conv with zero channels"),
                    });
                }
                c = *channels;
            }
            LayerSpec::Relu | LayerSpec::BatchNorm => {}
            LayerSpec::Dropout { keep_prob } => {
                if !(*keep_prob > 0.0 && *keep_prob <= 1.0) {
                    return Err(Error::InvalidArchitecture {
                        reason: format!("layer {i}: dropout keep_prob {keep_prob} outside (0, 1]"),
                    });
                }
            }
            LayerSpec::GlobalAvgPool { .. } => {
                t = 1;
            }
            LayerSpec::Residual { body } => {
                let (bt, bc) = walk_shapes((t, c), body)?;
                if (bt, bc) != (t, c) {
                    return Err(Error::InvalidArchitecture {
                        reason: format!(
                            "layer {i}: residual body maps ({t}, {c}) to ({bt}, {bc}), must preserve shape"
                        ),
                    });
                }
            }
        }
    }
    Ok((t, c))
}

/// The vision head contract: the stack ends with dense, batch_norm,
/// optional relu, dropout, dense, batch_norm. Returns the head start index.
fn validate_vision_arch(specs: &[LayerSpec]) -> Result<usize> {
    let dense_positions: Vec<usize> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, LayerSpec::Dense { .. }))
        .map(|(i, _)| i)
        .collect();
    let err = |reason: &str| Error::InvalidArchitecture {
        reason: format!("vision stack: {reason}"),
    };
    let [.., first, last] = dense_positions.as_slice() else {
        return Err(err("needs two dense layers before the classifier"));
    };
    let (first, last) = (*first, *last);
    if last + 2 != specs.len()
        || !matches!(specs[last + 1], LayerSpec::BatchNorm)
        || !matches!(specs[first + 1], LayerSpec::BatchNorm)
    {
        return Err(err("both head dense layers need batch normalization after them"));
    }
    if !matches!(specs[last - 1], LayerSpec::Dropout { .. }) {
        return Err(err("dropout must sit directly before the last dense layer"));
    }
    let between_ok = match last - first {
        3 => true,                                              // dense bn dropout dense
        4 => matches!(specs[first + 2], LayerSpec::Relu),       // dense bn relu dropout dense
        _ => false,
    };
    if !between_ok {
        return Err(err("head must be dense, batch_norm, optional relu, dropout, dense, batch_norm"));
    }
    Ok(first)
}

/// The language contract: a convolutional stack ending in global average
/// pooling, with no dense layers anywhere before the feature.
fn validate_language_arch(specs: &[LayerSpec]) -> Result<()> {
    let err = |reason: &str| Error::InvalidArchitecture {
        reason: format!("language stack: {reason}"),
    };
    let Some((last, rest)) = specs.split_last() else {
        return Err(err("stack is empty"));
    };
    if !matches!(last, LayerSpec::GlobalAvgPool { .. }) {
        return Err(err("must end in global_avg_pool"));
    }
    fn no_dense_or_pool(specs: &[LayerSpec]) -> bool {
        specs.iter().all(|s| match s {
            LayerSpec::Dense { .. } | LayerSpec::GlobalAvgPool { .. } => false,
            LayerSpec::Residual { body } => no_dense_or_pool(body),
            _ => true,
        })
    }
    if !no_dense_or_pool(rest) {
        return Err(err("no dense layers or inner pooling before the pooled feature"));
    }
    fn has_conv(specs: &[LayerSpec]) -> bool {
        specs.iter().any(|s| match s {
            LayerSpec::Conv1dK3 { .. } => true,
            LayerSpec::Residual { body } => has_conv(body),
            _ => false,
        })
    }
    if !has_conv(rest) {
        return Err(err("needs at least one conv1d_k3 layer"));
    }
    Ok(())
}

fn init_layers<F: Scalar>(
    input: (usize, usize),
    specs: &[LayerSpec],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Layer<F>>> {
    use rand_distr::StandardNormal;
    fn normal<F: Scalar>(rng: &mut ChaCha8Rng, sigma: f64) -> F {
        cast::<F>(rng.sample::<f64, _>(StandardNormal) * sigma)
    }
    let (mut t, mut c) = input;
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let params = match spec {
            LayerSpec::Dense { units } => {
                let sigma = 1.0 / (c as f64).sqrt();
                let w = Array2::from_shape_fn((c, *units), |_| normal::<F>(rng, sigma));
                let p = LayerParams::Dense {
                    w,
                    b: Array1::zeros(*units),
                };
                c = *units;
                p
            }
            LayerSpec::Conv1dK3 { channels } => {
                let sigma = 1.0 / ((3 * c) as f64).sqrt();
                let tap = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((c, *channels), |_| normal::<F>(rng, sigma));
                let w = [tap(rng), tap(rng), tap(rng)];
                let p = LayerParams::Conv {
                    w,
                    b: Array1::zeros(*channels),
                };
                c = *channels;
                p
            }
            LayerSpec::BatchNorm => LayerParams::BatchNorm {
                gamma: Array1::from_elem(c, F::one()),
                beta: Array1::zeros(c),
                running_mean: Array1::zeros(c),
                running_var: Array1::from_elem(c, F::one()),
            },
            LayerSpec::Relu | LayerSpec::Dropout { .. } => LayerParams::Stateless,
            LayerSpec::GlobalAvgPool { .. } => {
                t = 1;
                LayerParams::Stateless
            }
            LayerSpec::Residual { body } => LayerParams::Residual {
                body: init_layers((t, c), body, rng)?,
            },
        };
        layers.push(Layer {
            spec: spec.clone(),
            params,
        });
    }
    Ok(layers)
}

fn flat2<F: Scalar>(a: &Array3<F>) -> Array2<F> {
    let (n, t, c) = a.dim();
    a.clone().into_shape_with_order((n * t, c)).expect("row-major reshape")
}

fn unflat<F: Scalar>(a: Array2<F>, n: usize, t: usize) -> Array3<F> {
    let c = a.ncols();
    a.into_shape_with_order((n, t, c)).expect("row-major reshape")
}

/// `out[n, t] = a[n, t + d]` where available, zero at the boundaries.
fn shift_t<F: Scalar>(a: &Array3<F>, d: isize) -> Array3<F> {
    let (n, t, c) = a.dim();
    let mut out = Array3::zeros((n, t, c));
    for dst in 0..t as isize {
        let src = dst + d;
        if src >= 0 && src < t as isize {
            out.slice_mut(s![.., dst as usize, ..])
                .assign(&a.slice(s![.., src as usize, ..]));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn forward_layers<F: Scalar>(
    layers: &[Layer<F>],
    x: &mut Array3<F>,
    mode: Mode,
    rng: &mut Option<&mut ChaCha8Rng>,
    lengths: Option<&[usize]>,
    traces: &mut Vec<LayerTrace<F>>,
    layer_offset: usize,
) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        let trace = forward_one(layer, x, mode, rng, lengths)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: layer_offset + i,
            });
        }
        traces.push(trace);
    }
    Ok(())
}

fn forward_one<F: Scalar>(
    layer: &Layer<F>,
    x: &mut Array3<F>,
    mode: Mode,
    rng: &mut Option<&mut ChaCha8Rng>,
    lengths: Option<&[usize]>,
) -> Result<LayerTrace<F>> {
    let (n, t, _c) = x.dim();
    match (&layer.spec, &layer.params) {
        (LayerSpec::Dense { .. }, LayerParams::Dense { w, b }) => {
            let input = x.clone();
            let y2 = flat2(x).dot(w) + b;
            *x = unflat(y2, n, t);
            Ok(LayerTrace::Dense { input })
        }
        (LayerSpec::Conv1dK3 { .. }, LayerParams::Conv { w, b }) => {
            let input = x.clone();
            let x2 = flat2(x);
            let m1 = unflat(x2.dot(&w[0]), n, t);
            let z0 = unflat(x2.dot(&w[1]), n, t);
            let p1 = unflat(x2.dot(&w[2]), n, t);
            let mut y = shift_t(&m1, -1) + z0 + shift_t(&p1, 1);
            y += &b.view().insert_axis(Axis(0)).insert_axis(Axis(0));
            *x = y;
            Ok(LayerTrace::Conv { input })
        }
        (LayerSpec::Relu, _) => {
            let input = x.clone();
            x.mapv_inplace(|v| v.max(F::zero()));
            Ok(LayerTrace::Relu { input })
        }
        (LayerSpec::BatchNorm, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
            let eps = cast::<F>(BN_EPS);
            match mode {
                Mode::Train => {
                    let m = cast_usize::<F>(n * t);
                    let x2 = flat2(x);
                    let mean = x2.sum_axis(Axis(0)) / m;
                    let centered = &x2 - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / m;
                    let inv_std = var.mapv(|v| (v + eps).sqrt().recip());
                    let xhat2 = &centered * &inv_std;
                    let y2 = &xhat2 * gamma + beta;
                    let xhat = unflat(xhat2, n, t);
                    *x = unflat(y2, n, t);
                    Ok(LayerTrace::BatchNorm {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                    })
                }
                Mode::Eval => {
                    let inv_std = running_var.mapv(|v| (v + eps).sqrt().recip());
                    let x2 = flat2(x);
                    let y2 = (&x2 - running_mean) * &inv_std * gamma + beta;
                    *x = unflat(y2, n, t);
                    Ok(LayerTrace::BatchNormEval)
                }
            }
        }
        (LayerSpec::Dropout { keep_prob }, _) => match mode {
            Mode::Train => {
                let rng = rng.as_deref_mut().ok_or_else(|| Error::Config {
                    reason: "training-mode dropout needs a random stream".into(),
                })?;
                let keep = *keep_prob;
                let inv = cast::<F>(1.0 / keep);
                let mult = Array3::from_shape_fn(x.dim(), |_| {
                    if rng.random::<f64>() < keep {
                        inv
                    } else {
                        F::zero()
                    }
                });
                *x *= &mult;
                Ok(LayerTrace::Dropout { mult: Some(mult) })
            }
            Mode::Eval => Ok(LayerTrace::Dropout { mult: None }),
        },
        (LayerSpec::GlobalAvgPool { masked }, _) => {
            let (n, t_in, c) = x.dim();
            let mut y = Array3::zeros((n, 1, c));
            if *masked {
                let lengths = lengths.ok_or_else(|| Error::Config {
                    reason: "masked pooling needs per-sample lengths".into(),
                })?;
                for s_i in 0..n {
                    let len = lengths[s_i].min(t_in);
                    let inv = cast_usize::<F>(len).recip();
                    let slice = x.slice(s![s_i, ..len, ..]);
                    y.slice_mut(s![s_i, 0, ..]).assign(&(&slice.sum_axis(Axis(0)) * inv));
                }
            } else {
                let inv = cast_usize::<F>(t_in).recip();
                let summed = x.sum_axis(Axis(1)) * inv;
                y.slice_mut(s![.., 0, ..]).assign(&summed);
            }
            *x = y;
            Ok(LayerTrace::Pool {
                t_in,
                lengths: lengths.map(|l| l.to_vec()),
                masked: *masked,
            })
        }
        (LayerSpec::Residual { .. }, LayerParams::Residual { body }) => {
            let skip = x.clone();
            let mut traces = Vec::with_capacity(body.len());
            forward_layers(body, x, mode, rng, lengths, &mut traces, 0)?;
            *x += &skip;
            Ok(LayerTrace::Residual { body: traces })
        }
        _ => unreachable!("spec/params kept in sync by construction"),
    }
}

fn backward_layers<F: Scalar>(
    layers: &[Layer<F>],
    traces: &[LayerTrace<F>],
    grad: &mut Array3<F>,
    out: &mut Vec<LayerGrads<F>>,
) -> Result<()> {
    let mut rev = Vec::with_capacity(layers.len());
    for (layer, trace) in layers.iter().zip(traces.iter()).rev() {
        rev.push(backward_one(layer, trace, grad)?);
    }
    rev.reverse();
    out.extend(rev);
    Ok(())
}

fn backward_one<F: Scalar>(
    layer: &Layer<F>,
    trace: &LayerTrace<F>,
    grad: &mut Array3<F>,
) -> Result<LayerGrads<F>> {
    let mismatch = || Error::TraceMismatch {
        reason: "trace layer kind does not match encoder layer".into(),
    };
    match (&layer.params, trace) {
        (LayerParams::Dense { w, .. }, LayerTrace::Dense { input }) => {
            let (n, t, _c) = input.dim();
            let g2 = flat2(grad);
            let x2 = flat2(input);
            let dw = x2.t().dot(&g2);
            let db = g2.sum_axis(Axis(0));
            *grad = unflat(g2.dot(&w.t()), n, t);
            Ok(LayerGrads::Dense { dw, db })
        }
        (LayerParams::Conv { w, .. }, LayerTrace::Conv { input }) => {
            let (n, t, _c) = input.dim();
            let g2 = flat2(grad);
            let db = g2.sum_axis(Axis(0));
            let xm = flat2(&shift_t(input, -1));
            let x0 = flat2(input);
            let xp = flat2(&shift_t(input, 1));
            let dw = [xm.t().dot(&g2), x0.t().dot(&g2), xp.t().dot(&g2)];
            let gm = flat2(&shift_t(grad, 1)).dot(&w[0].t());
            let g0 = g2.dot(&w[1].t());
            let gp = flat2(&shift_t(grad, -1)).dot(&w[2].t());
            *grad = unflat(gm + g0 + gp, n, t);
            Ok(LayerGrads::Conv { dw, db })
        }
        (LayerParams::Stateless, LayerTrace::Relu { input }) => {
            ndarray::Zip::from(&mut *grad).and(input).for_each(|g, &x| {
                if x <= F::zero() {
                    *g = F::zero();
                }
            });
            Ok(LayerGrads::Stateless)
        }
        (
            LayerParams::BatchNorm { gamma, .. },
            LayerTrace::BatchNorm { xhat, inv_std, .. },
        ) => {
            let (n, t, _c) = xhat.dim();
            let m = cast_usize::<F>(n * t);
            let g2 = flat2(grad);
            let xhat2 = flat2(xhat);
            let dgamma = (&g2 * &xhat2).sum_axis(Axis(0));
            let dbeta = g2.sum_axis(Axis(0));
            let dxhat = &g2 * gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &xhat2).sum_axis(Axis(0));
            let dx2 = (dxhat * m - &sum_dxhat - &xhat2 * &sum_dxhat_xhat) * inv_std / m;
            *grad = unflat(dx2, n, t);
            Ok(LayerGrads::BatchNorm { dgamma, dbeta })
        }
        (LayerParams::BatchNorm { .. }, LayerTrace::BatchNormEval) => Err(Error::TraceMismatch {
            reason: "batch-norm eval traces cannot be differentiated".into(),
        }),
        (LayerParams::Stateless, LayerTrace::Dropout { mult }) => {
            if let Some(mult) = mult {
                *grad *= mult;
            }
            Ok(LayerGrads::Stateless)
        }
        (LayerParams::Stateless, LayerTrace::Pool { t_in, lengths, masked }) => {
            let (n, _one, c) = grad.dim();
            let mut dx = Array3::zeros((n, *t_in, c));
            if *masked {
                let lengths = lengths.as_ref().expect("masked pool traced with lengths");
                for s_i in 0..n {
                    let len = lengths[s_i].min(*t_in);
                    let inv = cast_usize::<F>(len).recip();
                    let row = &grad.slice(s![s_i, 0, ..]) * inv;
                    for t_i in 0..len {
                        dx.slice_mut(s![s_i, t_i, ..]).assign(&row);
                    }
                }
            } else {
                let inv = cast_usize::<F>(*t_in).recip();
                for t_i in 0..*t_in {
                    dx.slice_mut(s![.., t_i, ..])
                        .assign(&(&grad.slice(s![.., 0, ..]) * inv));
                }
            }
            *grad = dx;
            Ok(LayerGrads::Stateless)
        }
        (LayerParams::Residual { body }, LayerTrace::Residual { body: traces }) => {
            let skip = grad.clone();
            let mut body_grads = Vec::with_capacity(body.len());
            backward_layers(body, traces, grad, &mut body_grads)?;
            *grad += &skip;
            Ok(LayerGrads::Residual { body: body_grads })
        }
        _ => Err(mismatch()),
    }
}

fn update_stats_layers<F: Scalar>(layers: &mut [Layer<F>], traces: &[LayerTrace<F>], batch_n: usize) {
    let momentum = cast::<F>(BN_MOMENTUM);
    for (layer, trace) in layers.iter_mut().zip(traces.iter()) {
        match (&mut layer.params, trace) {
            (
                LayerParams::BatchNorm { running_mean, running_var, .. },
                LayerTrace::BatchNorm { batch_mean, batch_var, xhat, .. },
            ) => {
                let m = batch_n * xhat.dim().1;
                let unbias = if m > 1 {
                    cast::<F>(m as f64 / (m as f64 - 1.0))
                } else {
                    F::one()
                };
                let one = F::one();
                ndarray::Zip::from(running_mean).and(batch_mean).for_each(|r, &b| {
                    *r = (one - momentum) * *r + momentum * b;
                });
                ndarray::Zip::from(running_var).and(batch_var).for_each(|r, &b| {
                    *r = (one - momentum) * *r + momentum * b * unbias;
                });
            }
            (LayerParams::Residual { body }, LayerTrace::Residual { body: btr }) => {
                update_stats_layers(body, btr, batch_n);
            }
            _ => {}
        }
    }
}

fn zero_grads_layer<F: Scalar>(layer: &Layer<F>) -> LayerGrads<F> {
    match &layer.params {
        LayerParams::Dense { w, b } => LayerGrads::Dense {
            dw: Array2::zeros(w.dim()),
            db: Array1::zeros(b.len()),
        },
        LayerParams::Conv { w, b } => LayerGrads::Conv {
            dw: [
                Array2::zeros(w[0].dim()),
                Array2::zeros(w[1].dim()),
                Array2::zeros(w[2].dim()),
            ],
            db: Array1::zeros(b.len()),
        },
        LayerParams::BatchNorm { gamma, .. } => LayerGrads::BatchNorm {
            dgamma: Array1::zeros(gamma.len()),
            dbeta: Array1::zeros(gamma.len()),
        },
        LayerParams::Stateless => LayerGrads::Stateless,
        LayerParams::Residual { body } => LayerGrads::Residual {
            body: body.iter().map(zero_grads_layer).collect(),
        },
    }
}

fn sgd_layer<F: Scalar>(layer: &mut Layer<F>, g: &LayerGrads<F>, v: &mut LayerGrads<F>, lr: F, momentum: F) {
    fn step<F: Scalar, D: ndarray::Dimension>(
        p: &mut ndarray::Array<F, D>,
        g: &ndarray::Array<F, D>,
        v: &mut ndarray::Array<F, D>,
        lr: F,
        momentum: F,
    ) {
        ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
            *v = momentum * *v + g;
            *p = *p - lr * *v;
        });
    }
    match (&mut layer.params, g, v) {
        (LayerParams::Dense { w, b }, LayerGrads::Dense { dw, db }, LayerGrads::Dense { dw: vw, db: vb }) => {
            step(w, dw, vw, lr, momentum);
            step(b, db, vb, lr, momentum);
        }
        (LayerParams::Conv { w, b }, LayerGrads::Conv { dw, db }, LayerGrads::Conv { dw: vw, db: vb }) => {
            for k in 0..3 {
                step(&mut w[k], &dw[k], &mut vw[k], lr, momentum);
            }
            step(b, db, vb, lr, momentum);
        }
        (
            LayerParams::BatchNorm { gamma, beta, .. },
            LayerGrads::BatchNorm { dgamma, dbeta },
            LayerGrads::BatchNorm { dgamma: vg, dbeta: vb },
        ) => {
            step(gamma, dgamma, vg, lr, momentum);
            step(beta, dbeta, vb, lr, momentum);
        }
        (LayerParams::Stateless, LayerGrads::Stateless, LayerGrads::Stateless) => {}
        (LayerParams::Residual { body }, LayerGrads::Residual { body: gb }, LayerGrads::Residual { body: vb }) => {
            for ((l, g), v) in body.iter_mut().zip(gb.iter()).zip(vb.iter_mut()) {
                sgd_layer(l, g, v, lr, momentum);
            }
        }
        _ => unreachable!("gradient structures mirror parameters by construction"),
    }
}

fn scale_layer<F: Scalar>(g: &mut LayerGrads<F>, factor: F) {
    match g {
        LayerGrads::Dense { dw, db } => {
            dw.mapv_inplace(|x| x * factor);
            db.mapv_inplace(|x| x * factor);
        }
        LayerGrads::Conv { dw, db } => {
            for k in dw.iter_mut() {
                k.mapv_inplace(|x| x * factor);
            }
            db.mapv_inplace(|x| x * factor);
        }
        LayerGrads::BatchNorm { dgamma, dbeta } => {
            dgamma.mapv_inplace(|x| x * factor);
            dbeta.mapv_inplace(|x| x * factor);
        }
        LayerGrads::Stateless => {}
        LayerGrads::Residual { body } => {
            for g in body {
                scale_layer(g, factor);
            }
        }
    }
}

fn flatten_layers<F: Scalar>(layers: &[LayerGrads<F>], out: &mut Vec<f64>) {
    use crate::scalar::to_f64;
    for g in layers {
        match g {
            LayerGrads::Dense { dw, db } => {
                out.extend(dw.iter().map(|&v| to_f64(v)));
                out.extend(db.iter().map(|&v| to_f64(v)));
            }
            LayerGrads::Conv { dw, db } => {
                for k in dw {
                    out.extend(k.iter().map(|&v| to_f64(v)));
                }
                out.extend(db.iter().map(|&v| to_f64(v)));
            }
            LayerGrads::BatchNorm { dgamma, dbeta } => {
                out.extend(dgamma.iter().map(|&v| to_f64(v)));
                out.extend(dbeta.iter().map(|&v| to_f64(v)));
            }
            LayerGrads::Stateless => {}
            LayerGrads::Residual { body } => flatten_layers(body, out),
        }
    }
}

fn export_layers<F: Scalar>(
    layers: &[Layer<F>],
    prefix: &str,
    out: &mut Vec<(String, Vec<usize>, Vec<f64>)>,
) {
    use crate::scalar::to_f64;
    let push1 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: String, a: &Array1<F>| {
        out.push((name, vec![a.len()], a.iter().map(|&v| to_f64(v)).collect()));
    };
    let push2 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: String, a: &Array2<F>| {
        out.push((
            name,
            vec![a.nrows(), a.ncols()],
            a.iter().map(|&v| to_f64(v)).collect(),
        ));
    };
    for (i, layer) in layers.iter().enumerate() {
        let base = format!("{prefix}layer{i}");
        match &layer.params {
            LayerParams::Dense { w, b } => {
                push2(out, format!("{base}/w"), w);
                push1(out, format!("{base}/b"), b);
            }
            LayerParams::Conv { w, b } => {
                for (k, tap) in w.iter().enumerate() {
                    push2(out, format!("{base}/w{k}"), tap);
                }
                push1(out, format!("{base}/b"), b);
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                push1(out, format!("{base}/gamma"), gamma);
                push1(out, format!("{base}/beta"), beta);
                push1(out, format!("{base}/running_mean"), running_mean);
                push1(out, format!("{base}/running_var"), running_var);
            }
            LayerParams::Stateless => {}
            LayerParams::Residual { body } => {
                export_layers(body, &format!("{base}/body/"), out);
            }
        }
    }
}

fn import_layers<F: Scalar>(layers: &mut [Layer<F>], data: &mut impl Iterator<Item = Vec<f64>>) {
    fn fill1<F: Scalar>(a: &mut Array1<F>, d: Vec<f64>) {
        for (slot, v) in a.iter_mut().zip(d) {
            *slot = cast::<F>(v);
        }
    }
    fn fill2<F: Scalar>(a: &mut Array2<F>, d: Vec<f64>) {
        for (slot, v) in a.iter_mut().zip(d) {
            *slot = cast::<F>(v);
        }
    }
    for layer in layers {
        match &mut layer.params {
            LayerParams::Dense { w, b } => {
                fill2(w, data.next().expect("validated length"));
                fill1(b, data.next().expect("validated length"));
            }
            LayerParams::Conv { w, b } => {
                for tap in w.iter_mut() {
                    fill2(tap, data.next().expect("validated length"));
                }
                fill1(b, data.next().expect("validated length"));
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                fill1(gamma, data.next().expect("validated length"));
                fill1(beta, data.next().expect("validated length"));
                fill1(running_mean, data.next().expect("validated length"));
                fill1(running_var, data.next().expect("validated length"));
            }
            LayerParams::Stateless => {}
            LayerParams::Residual { body } => import_layers(body, data),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn vision_specs(hidden: usize, d: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { units: hidden },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Dense { units: hidden },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Dropout { keep_prob: 0.5 },
            LayerSpec::Dense { units: d },
            LayerSpec::BatchNorm,
        ]
    }

    fn language_specs(channels: usize, d: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv1dK3 { channels },
            LayerSpec::Relu,
            LayerSpec::Conv1dK3 { channels: d },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool { masked: false },
        ]
    }

    #[test]
    fn vision_head_contract_is_enforced() {
        assert!(Encoder::<f64>::vision(8, &vision_specs(6, 4), 1).is_ok());
        // Head start sits at the first of the two trailing dense layers.
        let enc = Encoder::<f64>::vision(8, &vision_specs(6, 4), 1).unwrap();
        assert_eq!(enc.head_start(), 3);
        assert_eq!(enc.feature_dim(), 4);

        let no_dropout = vec![
            LayerSpec::Dense { units: 6 },
            LayerSpec::BatchNorm,
            LayerSpec::Dense { units: 4 },
            LayerSpec::BatchNorm,
        ];
        assert!(matches!(
            Encoder::<f64>::vision(8, &no_dropout, 1),
            Err(Error::InvalidArchitecture { .. })
        ));

        let bn_missing = vec![
            LayerSpec::Dense { units: 6 },
            LayerSpec::BatchNorm,
            LayerSpec::Dropout { keep_prob: 0.5 },
            LayerSpec::Dense { units: 4 },
        ];
        assert!(matches!(
            Encoder::<f64>::vision(8, &bn_missing, 1),
            Err(Error::InvalidArchitecture { .. })
        ));
    }

    #[test]
    fn language_contract_is_enforced() {
        assert!(Encoder::<f64>::language(6, 5, &language_specs(7, 4), 1).is_ok());

        let with_dense = vec![
            LayerSpec::Conv1dK3 { channels: 4 },
            LayerSpec::Dense { units: 4 },
            LayerSpec::GlobalAvgPool { masked: false },
        ];
        assert!(matches!(
            Encoder::<f64>::language(6, 5, &with_dense, 1),
            Err(Error::InvalidArchitecture { .. })
        ));

        let no_pool = vec![LayerSpec::Conv1dK3 { channels: 4 }];
        assert!(matches!(
            Encoder::<f64>::language(6, 5, &no_pool, 1),
            Err(Error::InvalidArchitecture { .. })
        ));
    }

    #[test]
    fn zero_input_through_linear_stack_is_zero() {
        let enc = Encoder::<f64>::stack("probe", (1, 5), &[LayerSpec::Dense { units: 3 }], 7).unwrap();
        let batch = Batch::from_vectors(Array2::zeros((2, 5)));
        let f = enc.forward_eval(&batch).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_and_dropout_free() {
        let enc = Encoder::<f64>::vision(8, &vision_specs(6, 4), 3).unwrap();
        let batch = Batch::from_vectors(Array2::from_shape_fn((3, 8), |(i, j)| (i + j) as f64 * 0.1));
        let a = enc.forward_eval(&batch).unwrap();
        let b = enc.forward_eval(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conv_identity_kernel_pools_to_row_average() {
        // Single conv layer whose center tap is the identity; on a one-hot
        // row sequence the pooled output equals the average of the rows.
        let specs = vec![
            LayerSpec::Conv1dK3 { channels: 4 },
            LayerSpec::GlobalAvgPool { masked: false },
        ];
        let mut enc = Encoder::<f64>::stack("probe", (4, 4), &specs, 1).unwrap();
        let eye: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
            ("layer0/w0".into(), vec![4, 4], vec![0.0; 16]),
            (
                "layer0/w1".into(),
                vec![4, 4],
                Array2::<f64>::eye(4).iter().copied().collect(),
            ),
            ("layer0/w2".into(), vec![4, 4], vec![0.0; 16]),
            ("layer0/b".into(), vec![4], vec![0.0; 4]),
        ];
        enc.import_arrays("", &eye).unwrap();
        let mut tokens = Array2::zeros((4, 4));
        for t in 0..4 {
            tokens[[t, t]] = 1.0;
        }
        let batch = Batch::from_matrices(&[tokens], None).unwrap();
        let f = enc.forward_eval(&batch).unwrap();
        for j in 0..4 {
            assert!((f[[0, j]] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_same_padding_matches_direct_evaluation() {
        // Pooled conv output equals the mean over positions of the direct
        // evaluation y[t] = x[t-1] w0 + x[t] w1 + x[t+1] w2 + b, with
        // out-of-range neighbours contributing zero (same-padding).
        let specs = vec![
            LayerSpec::Conv1dK3 { channels: 2 },
            LayerSpec::GlobalAvgPool { masked: false },
        ];
        let enc = Encoder::<f64>::stack("probe", (5, 3), &specs, 11).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(t, c)| (t as f64 + 1.0) * 0.3 - c as f64 * 0.2);
        let batch = Batch::from_matrices(&[x.clone()], None).unwrap();
        let f = enc.forward_eval(&batch).unwrap();

        let arrays = enc.export_arrays("");
        let get = |name: &str| {
            arrays
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, shape, data)| Array2::from_shape_vec((shape[0], shape[1]), data.clone()).unwrap())
                .unwrap()
        };
        let w0 = get("layer0/w0");
        let w1 = get("layer0/w1");
        let w2 = get("layer0/w2");

        let mut y_direct: Array2<f64> = Array2::zeros((5, 2));
        for t in 0..5usize {
            let mut row: Array1<f64> = Array1::zeros(2);
            if t >= 1 {
                row = row + x.row(t - 1).dot(&w0);
            }
            row = row + x.row(t).dot(&w1);
            if t + 1 < 5 {
                row = row + x.row(t + 1).dot(&w2);
            }
            y_direct.row_mut(t).assign(&row);
        }
        let mean_direct = y_direct.sum_axis(Axis(0)) / 5.0;
        for j in 0..2 {
            assert!((f[[0, j]] - mean_direct[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_pool_ignores_padding_positions() {
        let specs = vec![
            LayerSpec::Conv1dK3 { channels: 3 },
            LayerSpec::GlobalAvgPool { masked: true },
        ];
        let mut enc = Encoder::<f64>::stack("probe", (4, 3), &specs, 2).unwrap();
        // Identity conv so positions pass through unchanged.
        let eye: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
            ("layer0/w0".into(), vec![3, 3], vec![0.0; 9]),
            (
                "layer0/w1".into(),
                vec![3, 3],
                Array2::<f64>::eye(3).iter().copied().collect(),
            ),
            ("layer0/w2".into(), vec![3, 3], vec![0.0; 9]),
            ("layer0/b".into(), vec![3], vec![0.0; 3]),
        ];
        enc.import_arrays("", &eye).unwrap();
        let mut x = Array2::zeros((4, 3));
        x.row_mut(0).fill(2.0);
        x.row_mut(1).fill(4.0);
        let batch = Batch::from_matrices(&[x], Some(vec![2])).unwrap();
        let f = enc.forward_eval(&batch).unwrap();
        for j in 0..3 {
            assert!((f[[0, j]] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_padding_sequences_are_rejected() {
        let enc = Encoder::<f64>::language(4, 3, &language_specs(4, 3), 1).unwrap();
        let batch = Batch {
            data: Array3::zeros((1, 4, 3)),
            lengths: Some(vec![0]),
        };
        assert!(matches!(enc.forward_eval(&batch), Err(Error::AllPadding)));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let enc = Encoder::<f64>::vision(8, &vision_specs(6, 4), 3).unwrap();
        let batch = Batch::from_vectors(Array2::<f64>::zeros((2, 5)));
        assert!(matches!(enc.forward_eval(&batch), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let mut enc = Encoder::<f64>::stack("probe", (1, 2), &[LayerSpec::Dense { units: 2 }], 1).unwrap();
        let huge: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
            ("layer0/w".into(), vec![2, 2], vec![1e308; 4]),
            ("layer0/b".into(), vec![2], vec![0.0; 2]),
        ];
        enc.import_arrays("", &huge).unwrap();
        let batch = Batch::from_vectors(Array2::from_elem((1, 2), 10.0));
        match enc.forward_eval(&batch) {
            Err(Error::NonFiniteActivation { layer }) => assert_eq!(layer, 0),
            other => panic!("expected non-finite activation, got {other:?}"),
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let enc = Encoder::<f64>::vision(6, &vision_specs(5, 3), 5).unwrap();
        let batch = Batch::from_vectors(Array2::from_shape_fn((4, 6), |(i, j)| (i * j) as f64 * 0.1 - 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (f, trace) = enc.forward(&batch, Mode::Train, Some(&mut rng)).unwrap();
        let (grads, _) = enc.backward(&trace, &Array2::zeros(f.dim())).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dense_gradient_matches_closed_form() {
        // Loss ½‖y‖² for y = Wx has dW = y xᵀ (here transposed storage: x yᵀ).
        let enc = Encoder::<f64>::stack("probe", (1, 3), &[LayerSpec::Dense { units: 2 }], 9).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let batch = Batch::from_vectors(x.clone());
        let (y, trace) = enc.forward(&batch, Mode::Train, None).unwrap();
        let (grads, dx) = enc.backward(&trace, &y).unwrap();
        let flat = grads.flatten();
        // dW entries in row-major (c_in, units) order.
        for c in 0..3 {
            for u in 0..2 {
                let expected = x[[0, c]] * y[[0, u]];
                assert!((flat[c * 2 + u] - expected).abs() < 1e-12);
            }
        }
        // db = y.
        assert!((flat[6] - y[[0, 0]]).abs() < 1e-12);
        assert!((flat[7] - y[[0, 1]]).abs() < 1e-12);
        assert_eq!(dx.dim(), (1, 1, 3));
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivations() {
        let enc = Encoder::<f64>::stack("probe", (1, 2), &[LayerSpec::Relu], 1).unwrap();
        let batch = Batch::from_vectors(Array2::from_shape_vec((1, 2), vec![-1.0, 3.0]).unwrap());
        let (_, trace) = enc.forward(&batch, Mode::Train, None).unwrap();
        let (_, dx) = enc.backward(&trace, &Array2::ones((1, 2))).unwrap();
        assert_eq!(dx[[0, 0, 0]], 0.0);
        assert_eq!(dx[[0, 0, 1]], 1.0);
    }

    #[test]
    fn batch_norm_eval_is_affine_in_its_input() {
        let specs = vec![LayerSpec::BatchNorm];
        let mut enc = Encoder::<f64>::stack("probe", (1, 2), &specs, 1).unwrap();
        // Seed non-trivial running stats through a training update.
        let batch = Batch::from_vectors(Array2::from_shape_fn((8, 2), |(i, j)| i as f64 * 0.7 - j as f64));
        let (_, trace) = enc.forward(&batch, Mode::Train, None).unwrap();
        enc.update_running_stats(&trace, 0);

        let x1 = Array2::from_shape_vec((1, 2), vec![1.0, -2.0]).unwrap();
        let x2 = &x1 * 3.0;
        let y1 = enc.forward_eval(&Batch::from_vectors(x1.clone())).unwrap();
        let y2 = enc.forward_eval(&Batch::from_vectors(x2)).unwrap();
        let y0 = enc.forward_eval(&Batch::from_vectors(Array2::zeros((1, 2)))).unwrap();
        // Affine map: f(3x) - f(0) = 3 (f(x) - f(0)).
        for j in 0..2 {
            let lhs = y2[[0, j]] - y0[[0, j]];
            let rhs = 3.0 * (y1[[0, j]] - y0[[0, j]]);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn dropout_masks_replay_in_backward() {
        let enc = Encoder::<f64>::stack("probe", (1, 4), &[LayerSpec::Dropout { keep_prob: 0.5 }], 1).unwrap();
        let batch = Batch::from_vectors(Array2::ones((1, 4)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (y, trace) = enc.forward(&batch, Mode::Train, Some(&mut rng)).unwrap();
        let (_, dx) = enc.backward(&trace, &Array2::ones((1, 4))).unwrap();
        for j in 0..4 {
            // Surviving units forward 2.0 and backward 2.0; dropped give 0.
            assert_eq!(y[[0, j]], dx[[0, 0, j]]);
            assert!(y[[0, j]] == 0.0 || y[[0, j]] == 2.0);
        }
    }

    #[test]
    fn training_mode_dropout_without_rng_is_an_error() {
        let enc = Encoder::<f64>::stack("probe", (1, 4), &[LayerSpec::Dropout { keep_prob: 0.5 }], 1).unwrap();
        let batch = Batch::from_vectors(Array2::ones((1, 4)));
        assert!(matches!(
            enc.forward(&batch, Mode::Train, None),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn residual_skip_adds_identity_gradient() {
        let specs = vec![LayerSpec::Residual {
            body: vec![LayerSpec::Dense { units: 3 }],
        }];
        let mut enc = Encoder::<f64>::stack("probe", (1, 3), &specs, 1).unwrap();
        // Zero the body so the block is exactly the identity.
        let zeros: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
            ("layer0/body/layer0/w".into(), vec![3, 3], vec![0.0; 9]),
            ("layer0/body/layer0/b".into(), vec![3], vec![0.0; 3]),
        ];
        enc.import_arrays("", &zeros).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let batch = Batch::from_vectors(x.clone());
        let (y, trace) = enc.forward(&batch, Mode::Train, None).unwrap();
        assert_eq!(y, x);
        let (_, dx) = enc.backward(&trace, &Array2::ones((1, 3))).unwrap();
        assert!(dx.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn export_import_round_trips_and_digest_tracks_changes() {
        let enc = Encoder::<f64>::vision(8, &vision_specs(6, 4), 3).unwrap();
        let arrays = enc.export_arrays("vision/");
        let mut other = Encoder::<f64>::vision(8, &vision_specs(6, 4), 4).unwrap();
        assert_ne!(enc.params_digest(0, enc.layer_count()), other.params_digest(0, other.layer_count()));
        other.import_arrays("vision/", &arrays).unwrap();
        assert_eq!(enc.params_digest(0, enc.layer_count()), other.params_digest(0, other.layer_count()));
        assert_eq!(enc, other);
    }

    #[test]
    fn frozen_layers_keep_parameters_under_sgd() {
        let mut enc = Encoder::<f64>::vision(8, &vision_specs(6, 4), 3).unwrap();
        let head_start = enc.head_start();
        let body_digest = enc.params_digest(0, head_start);
        let batch = Batch::from_vectors(Array2::from_shape_fn((4, 8), |(i, j)| (i + 2 * j) as f64 * 0.05));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, trace) = enc.forward(&batch, Mode::Train, Some(&mut rng)).unwrap();
        let (grads, _) = enc.backward(&trace, &Array2::ones(f.dim())).unwrap();
        let mut velocity = enc.zero_grads();
        enc.sgd_step(&grads, &mut velocity, 0.1, 0.9, head_start);
        assert_eq!(enc.params_digest(0, head_start), body_digest);
        // Head did change.
        let fresh = Encoder::<f64>::vision(8, &vision_specs(6, 4), 3).unwrap();
        assert_ne!(
            enc.params_digest(head_start, enc.layer_count()),
            fresh.params_digest(head_start, fresh.layer_count())
        );
    }

    #[test]
    fn param_count_is_reported() {
        let enc = Encoder::<f64>::stack(
            "probe",
            (1, 4),
            &[LayerSpec::Dense { units: 3 }, LayerSpec::BatchNorm],
            1,
        )
        .unwrap();
        // dense 4*3+3, batch-norm 4 vectors of 3.
        assert_eq!(enc.param_count(), 15 + 12);
    }
}
