//! Convolutional classifiers: layer specs, initialization, forward passes
//! (both straight-line and tape-recorded), and the loss functions used by
//! attacks and training.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod archive;

/// One layer of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
    /// Pass-through layer; lets a spec designate the raw input (or any
    /// intermediate value) as a feature layer.
    Identity,
}

/// Architecture description: ordered layers, which layer outputs feed the
/// perceptual embedding, the input shape, and the class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// Indices into `layers` whose outputs are used for the LPIPS embedding.
    pub feature_layers: Vec<usize>,
    /// Input shape as [channels, height, width].
    pub input_shape: [usize; 3],
    pub class_count: usize,
}

impl ModelSpec {
    /// Desk-scale default: conv(8,3x3)-relu-pool-conv(16,3x3)-relu-pool-
    /// flatten-dense, with both post-relu outputs as feature layers.
    pub fn tiny_cnn(input_shape: [usize; 3], class_count: usize) -> ModelSpec {
        ModelSpec {
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv2d {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    out_features: class_count,
                },
            ],
            feature_layers: vec![1, 4],
            input_shape,
            class_count,
        }
    }

    /// Single-identity-layer spec: the embedding sees the raw input.
    pub fn identity_feature(input_shape: [usize; 3], class_count: usize) -> ModelSpec {
        ModelSpec {
            layers: vec![
                LayerSpec::Identity,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    out_features: class_count,
                },
            ],
            feature_layers: vec![0],
            input_shape,
            class_count,
        }
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: conv2d needs a [c,h,w] input, got {shape:?}"
                        )));
                    }
                    let oh = tensor::conv_out_extent(shape[1], *kernel, *stride, *padding)
                        .map_err(|e| Error::InvalidSpec(format!("layer {i}: {e}")))?;
                    let ow = tensor::conv_out_extent(shape[2], *kernel, *stride, *padding)
                        .map_err(|e| Error::InvalidSpec(format!("layer {i}: {e}")))?;
                    vec![*out_channels, oh, ow]
                }
                LayerSpec::Relu | LayerSpec::Identity => shape,
                LayerSpec::MaxPool { size, stride } => {
                    if shape.len() != 3 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: max-pool needs a [c,h,w] input, got {shape:?}"
                        )));
                    }
                    let oh = tensor::conv_out_extent(shape[1], *size, *stride, 0)
                        .map_err(|e| Error::InvalidSpec(format!("layer {i}: {e}")))?;
                    let ow = tensor::conv_out_extent(shape[2], *size, *stride, 0)
                        .map_err(|e| Error::InvalidSpec(format!("layer {i}: {e}")))?;
                    vec![shape[0], oh, ow]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { out_features } => {
                    if shape.len() != 1 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: dense needs a flattened input, got {shape:?}"
                        )));
                    }
                    vec![*out_features]
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Validate structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.class_count
            )));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("zero-sized input shape".into()));
        }
        let shapes = self.layer_shapes()?;
        let last = shapes
            .last()
            .ok_or_else(|| Error::InvalidSpec("empty layer list".into()))?;
        if last.as_slice() != [self.class_count] {
            return Err(Error::InvalidSpec(format!(
                "final layer produces shape {last:?}, expected [{}]",
                self.class_count
            )));
        }
        let mut prev: Option<usize> = None;
        for &idx in &self.feature_layers {
            if idx >= self.layers.len() {
                return Err(Error::InvalidSpec(format!(
                    "feature layer {idx} out of range ({} layers)",
                    self.layers.len()
                )));
            }
            if let Some(p) = prev {
                if idx <= p {
                    return Err(Error::InvalidSpec(
                        "feature layers must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(idx);
            match self.layers[idx] {
                LayerSpec::Relu | LayerSpec::Identity => {}
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "feature layer {idx} must be a post-activation (relu/identity) layer"
                    )))
                }
            }
            if shapes[idx].len() != 3 {
                return Err(Error::InvalidSpec(format!(
                    "feature layer {idx} output must be [c,h,w], got {:?}",
                    shapes[idx]
                )));
            }
        }
        Ok(())
    }

    /// Shapes ([c, h, w]) of each designated feature layer.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let shapes = self.layer_shapes()?;
        Ok(self
            .feature_layers
            .iter()
            .map(|&i| [shapes[i][0], shapes[i][1], shapes[i][2]])
            .collect())
    }
}

/// Weight/bias pair for a parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A classifier: spec plus parameters, indexed per parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    spec: ModelSpec,
    /// One entry per layer; `None` for parameter-free layers.
    params: Vec<Option<LayerParams>>,
}

/// Tape handles produced by a recorded forward pass.
pub struct RecordedForward {
    pub logits: Var,
    /// One handle per designated feature layer, in layer order.
    pub features: Vec<Var>,
    /// (layer index, weight var, bias var) for every parameterized layer.
    pub params: Vec<(usize, Var, Var)>,
}

/// Reproducible scaled-uniform fan-in initialization.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ClassifierModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.layers.len());
    let mut shape: Vec<usize> = spec.input_shape.to_vec();
    let shapes = spec.layer_shapes()?;
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = match layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let c_in = shape[0];
                let fan_in = c_in * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let wshape = [*out_channels, c_in, *kernel, *kernel];
                let weight = uniform_tensor(&mut rng, &wshape, bound)?;
                let bias = uniform_tensor(&mut rng, &[*out_channels], bound)?;
                Some(LayerParams { weight, bias })
            }
            LayerSpec::Dense { out_features } => {
                let fan_in = shape[0];
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = uniform_tensor(&mut rng, &[*out_features, fan_in], bound)?;
                let bias = uniform_tensor(&mut rng, &[*out_features], bound)?;
                Some(LayerParams { weight, bias })
            }
            _ => None,
        };
        params.push(p);
        shape = shapes[i].clone();
    }
    Ok(ClassifierModel {
        spec: spec.clone(),
        params,
    })
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

impl ClassifierModel {
    /// Assemble a model from a spec and explicit parameters (archive loading,
    /// hand-built fixtures). Shapes are checked against the spec.
    pub fn from_parts(spec: ModelSpec, params: Vec<Option<LayerParams>>) -> Result<Self> {
        spec.validate()?;
        let reference = init_model(&spec, 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} layer parameter slots, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (i, (got, want)) in params.iter().zip(&reference.params).enumerate() {
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => {
                    if g.weight.shape() != w.weight.shape() || g.bias.shape() != w.bias.shape() {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: parameter shapes {:?}/{:?} do not match spec {:?}/{:?}",
                            g.weight.shape(),
                            g.bias.shape(),
                            w.weight.shape(),
                            w.bias.shape()
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "layer {i}: parameter presence does not match spec"
                    )))
                }
            }
        }
        Ok(ClassifierModel { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    /// Flat list of parameter tensors in spec order (weight then bias per
    /// parameterized layer). This is the serialization and SGD order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in self.params.iter().flatten() {
            out.push(&p.weight);
            out.push(&p.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in self.params.iter_mut().flatten() {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.spec.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?}, model expects {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Straight-line forward through all layers; returns every layer output.
    fn run_layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut outputs = Vec::with_capacity(self.spec.layers.len());
        for (layer, params) in self.spec.layers.iter().zip(&self.params) {
            cur = match layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let p = params.as_ref().expect("conv params");
                    let c = tensor::conv2d(&cur, &p.weight, *stride, *padding)?;
                    tensor::channel_bias(&c, &p.bias)?
                }
                LayerSpec::Relu => tensor::relu(&cur)?,
                LayerSpec::MaxPool { size, stride } => tensor::max_pool(&cur, *size, *stride)?.0,
                LayerSpec::Flatten => cur.flatten(),
                LayerSpec::Dense { .. } => {
                    let p = params.as_ref().expect("dense params");
                    let z = tensor::matmul(&p.weight, &cur)?;
                    tensor::add(&z, &p.bias)?
                }
                LayerSpec::Identity => cur,
            };
            outputs.push(cur.clone());
        }
        Ok(outputs)
    }

    /// Class logits for one input. One full network evaluation.
    pub fn logits(&self, x: &Tensor, counter: &mut PassCounter) -> Result<Tensor> {
        counter.record_forward();
        let outs = self.run_layers(x)?;
        Ok(outs.last().expect("non-empty layer list").clone())
    }

    /// Activations at the designated feature layers. One network evaluation.
    pub fn activations(&self, x: &Tensor, counter: &mut PassCounter) -> Result<Vec<Tensor>> {
        counter.record_forward();
        let outs = self.run_layers(x)?;
        Ok(self
            .spec
            .feature_layers
            .iter()
            .map(|&i| outs[i].clone())
            .collect())
    }

    /// Logits and feature activations from a single network evaluation.
    pub fn logits_and_activations(
        &self,
        x: &Tensor,
        counter: &mut PassCounter,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        counter.record_forward();
        let outs = self.run_layers(x)?;
        let feats = self
            .spec
            .feature_layers
            .iter()
            .map(|&i| outs[i].clone())
            .collect();
        Ok((outs.last().expect("non-empty layer list").clone(), feats))
    }

    /// Logits for a batch `[n, c, h, w]`, one row per example.
    pub fn logits_batch(&self, xs: &Tensor, counter: &mut PassCounter) -> Result<Tensor> {
        let shape = xs.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "batch must be [n,c,h,w], got {shape:?}"
            )));
        }
        let n = shape[0];
        let per = shape[1] * shape[2] * shape[3];
        let mut rows = Vec::with_capacity(n * self.spec.class_count);
        for i in 0..n {
            let x = Tensor::new(
                vec![shape[1], shape[2], shape[3]],
                xs.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            rows.extend_from_slice(self.logits(&x, counter)?.data());
        }
        Tensor::new(vec![n, self.spec.class_count], rows)
    }

    /// Graph-recording forward pass. Registers every parameter as a tape
    /// leaf so gradients with respect to both the input and the parameters
    /// are available from one reverse sweep. One network evaluation.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        x: Var,
        counter: &mut PassCounter,
    ) -> Result<RecordedForward> {
        self.check_input(tape.value(x))?;
        counter.record_forward();
        let mut cur = x;
        let mut features = Vec::new();
        let mut param_vars = Vec::new();
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            cur = match layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let p = params.as_ref().expect("conv params");
                    let w = tape.leaf(p.weight.clone());
                    let b = tape.leaf(p.bias.clone());
                    param_vars.push((i, w, b));
                    let c = tape.conv2d(cur, w, *stride, *padding)?;
                    tape.channel_bias(c, b)?
                }
                LayerSpec::Relu => tape.relu(cur)?,
                LayerSpec::MaxPool { size, stride } => tape.max_pool(cur, *size, *stride)?,
                LayerSpec::Flatten => tape.flatten(cur)?,
                LayerSpec::Dense { .. } => {
                    let p = params.as_ref().expect("dense params");
                    let w = tape.leaf(p.weight.clone());
                    let b = tape.leaf(p.bias.clone());
                    param_vars.push((i, w, b));
                    let z = tape.matmul(w, cur)?;
                    tape.add(z, b)?
                }
                LayerSpec::Identity => cur,
            };
            if self.spec.feature_layers.contains(&i) {
                features.push(cur);
            }
        }
        Ok(RecordedForward {
            logits: cur,
            features,
            params: param_vars,
        })
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn check_label(logits: &Tensor, y: usize) -> Result<usize> {
    let k = logits.numel();
    if logits.rank() != 1 || k < 2 {
        return Err(Error::ShapeMismatch(format!(
            "logits must be a vector of >= 2 classes, got {:?}",
            logits.shape()
        )));
    }
    if y >= k {
        return Err(Error::InvalidLabel {
            label: y,
            classes: k,
        });
    }
    Ok(k)
}

/// Margin loss `max_{i != y}(z_i - z_y)`: positive iff the classifier is
/// fooled (under smallest-index argmax tie-breaking, a zero margin counts as
/// a correct classification).
pub fn margin_loss(logits: &Tensor, y: usize) -> Result<f64> {
    let k = check_label(logits, y)?;
    let zy = logits.data()[y];
    let best_other = (0..k)
        .filter(|&i| i != y)
        .map(|i| logits.data()[i])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best_other - zy)
}

/// Taped margin loss; same value as [`margin_loss`], differentiable.
pub fn margin_loss_node(tape: &mut Tape, logits: Var, y: usize) -> Result<Var> {
    let k = check_label(tape.value(logits), y)?;
    let others: Vec<usize> = (0..k).filter(|&i| i != y).collect();
    let other_vals = tape.gather(logits, &others)?;
    let best = tape.reduce_max(other_vals)?;
    let own = tape.gather(logits, &[y])?;
    let own_scalar = tape.sum(own)?;
    tape.sub(best, own_scalar)
}

/// Cross-entropy `-log softmax(logits)[y]`, stabilized by max subtraction.
pub fn cross_entropy_loss(logits: &Tensor, y: usize) -> Result<f64> {
    check_label(logits, y)?;
    let ls = tensor::log_softmax(logits)?;
    Ok(-ls.data()[y])
}

/// Taped cross-entropy loss.
pub fn cross_entropy_node(tape: &mut Tape, logits: Var, y: usize) -> Result<Var> {
    check_label(tape.value(logits), y)?;
    let ls = tape.log_softmax(logits)?;
    let own = tape.gather(ls, &[y])?;
    let s = tape.sum(own)?;
    tape.scalar_mul(s, -1.0)
}

/// Predicted class: argmax with smallest-index tie-breaking.
pub fn predict(logits: &Tensor) -> usize {
    let mut arg = 0;
    for (i, v) in logits.data().iter().enumerate() {
        if *v > logits.data()[arg] {
            arg = i;
        }
    }
    arg
}

/// Gradient oracle: on `instances` freshly initialized TinyCNNs with random
/// inputs and labels, compare the reverse-mode gradient of the cross-entropy
/// (with respect to the input and a sample of parameter coordinates) against
/// central finite differences with the given step. Returns the largest
/// relative error observed.
pub fn gradient_check(instances: usize, seed: u64, step: f64) -> Result<f64> {
    use crate::data::derive_seed;
    use crate::numerics::finite_diff_grad;

    let input_shape = [1usize, 8, 8];
    let spec = ModelSpec::tiny_cnn(input_shape, 3);
    let mut worst: f64 = 0.0;

    for i in 0..instances {
        let model = init_model(&spec, derive_seed(seed, 40, i as u64))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 41, i as u64));
        let n: usize = input_shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::new(input_shape.to_vec(), data)?;
        let y = rng.random_range(0..3usize);

        let mut scratch = crate::passes::PassCounter::new();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let rec = model.record_forward(&mut tape, xv, &mut scratch)?;
        let loss = cross_entropy_node(&mut tape, rec.logits, y)?;
        let grads = tape.backward(loss)?;

        // input gradient against the full central-difference estimate
        let analytic = grads.wrt_or_zeros(xv, x.shape());
        let numeric = finite_diff_grad(
            |p| {
                let mut c = crate::passes::PassCounter::new();
                cross_entropy_loss(&model.logits(p, &mut c)?, y)
            },
            &x,
            step,
        )?;
        let denom = analytic.l2_norm().max(numeric.l2_norm()).max(1e-12);
        worst = worst.max(tensor::sub(&analytic, &numeric)?.l2_norm() / denom);

        // a sampled slice of parameter coordinates per parameterized layer
        for (layer_idx, wv, bv) in &rec.params {
            for (var, tensor_ref) in [
                (*wv, &model.layer_params()[*layer_idx].as_ref().unwrap().weight),
                (*bv, &model.layer_params()[*layer_idx].as_ref().unwrap().bias),
            ] {
                let g = grads.wrt_or_zeros(var, tensor_ref.shape());
                let count = tensor_ref.numel().min(4);
                let mut sampled_analytic = Vec::with_capacity(count);
                let mut sampled_numeric = Vec::with_capacity(count);
                for _ in 0..count {
                    let coord = rng.random_range(0..tensor_ref.numel());
                    sampled_analytic.push(g.data()[coord]);
                    let eval = |v: f64| -> Result<f64> {
                        let mut perturbed = model.clone();
                        let slot = perturbed.params[*layer_idx].as_mut().unwrap();
                        let target = if var == *wv {
                            &mut slot.weight
                        } else {
                            &mut slot.bias
                        };
                        target.data_mut()[coord] = v;
                        let mut c = crate::passes::PassCounter::new();
                        cross_entropy_loss(&perturbed.logits(&x, &mut c)?, y)
                    };
                    let orig = tensor_ref.data()[coord];
                    sampled_numeric.push((eval(orig + step)? - eval(orig - step)?) / (2.0 * step));
                }
                let na: f64 = sampled_analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nn: f64 = sampled_numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
                let diff: f64 = sampled_analytic
                    .iter()
                    .zip(&sampled_numeric)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(diff / na.max(nn).max(1e-12));
            }
        }
    }
    Ok(worst)
}
