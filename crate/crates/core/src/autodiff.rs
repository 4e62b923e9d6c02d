//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! A [`Tape`] records a computation graph; node indices grow in topological
//! order, so one reverse sweep over the node vector visits every node exactly
//! once. Forward values are produced by the kernels in [`crate::tensor`], the
//! same code the straight-line evaluation paths use.
//!
//! A graph is confined to one thread; independent graphs may run in parallel.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        input: usize,
        bias: usize,
    },
    Relu(usize),
    MaxPool {
        input: usize,
        switches: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Gather {
        input: usize,
        indices: Vec<usize>,
    },
    ReduceMax {
        input: usize,
        argmax: usize,
    },
    LogSoftmax(usize),
    ChannelNormalize {
        input: usize,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` influenced the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros if unreached.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = tensor::scalar_mul(self.value(a), c)?;
        Ok(self.push(v, Op::ScalarMul(a.0, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = tensor::add_scalar(self.value(a), c)?;
        Ok(self.push(v, Op::AddScalar(a.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a.0, b.0)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                padding,
            },
        ))
    }

    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let v = tensor::channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push(
            v,
            Op::ChannelBias {
                input: input.0,
                bias: bias.0,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = tensor::relu(self.value(a))?;
        Ok(self.push(v, Op::Relu(a.0)))
    }

    pub fn max_pool(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let (v, switches) = tensor::max_pool(self.value(input), size, stride)?;
        Ok(self.push(
            v,
            Op::MaxPool {
                input: input.0,
                switches,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = tensor::sum(self.value(a))?;
        Ok(self.push(v, Op::Sum(a.0)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = tensor::mean(self.value(a))?;
        Ok(self.push(v, Op::Mean(a.0)))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let v = tensor::l2_norm(self.value(a))?;
        Ok(self.push(v, Op::L2Norm(a.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        self.reshape(a, &[n])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = tensor::concat(&tensors)?;
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = tensor::gather(self.value(a), indices)?;
        Ok(self.push(
            v,
            Op::Gather {
                input: a.0,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reduce_max(&mut self, a: Var) -> Result<Var> {
        let (v, argmax) = tensor::reduce_max(self.value(a))?;
        Ok(self.push(v, Op::ReduceMax { input: a.0, argmax }))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = tensor::log_softmax(self.value(a))?;
        Ok(self.push(v, Op::LogSoftmax(a.0)))
    }

    pub fn channel_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = tensor::channel_normalize(self.value(a), eps)?;
        Ok(self.push(v, Op::ChannelNormalize { input: a.0, eps }))
    }

    /// Reverse sweep from a scalar root, seeding its adjoint with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.sweep(root, Tensor::from_parts(vec![], vec![1.0]))
    }

    /// Reverse sweep seeding the adjoint of `node` with an arbitrary
    /// cotangent: computes the vector-Jacobian product `J^T c` with respect
    /// to every leaf feeding `node`.
    pub fn backward_with_cotangent(&self, node: Var, cotangent: &Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.value(node).shape() {
            return Err(Error::ShapeMismatch(format!(
                "cotangent shape {:?} does not match node shape {:?}",
                cotangent.shape(),
                self.value(node).shape()
            )));
        }
        self.sweep(node, cotangent.clone())
    }

    fn sweep(&self, start: Var, seed: Tensor) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[start.0] = Some(seed);
        for i in (0..=start.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) -> Result<()> {
        grads[idx] = Some(match grads[idx].take() {
            Some(g) => tensor::add(&g, &delta)?,
            None => delta,
        });
        Ok(())
    }

    fn dispatch(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, tensor::scalar_mul(g, -1.0)?)?;
            }
            Op::Mul(a, b) => {
                Self::accumulate(grads, *a, tensor::mul(g, &self.nodes[*b].value)?)?;
                Self::accumulate(grads, *b, tensor::mul(g, &self.nodes[*a].value)?)?;
            }
            Op::ScalarMul(a, c) => {
                Self::accumulate(grads, *a, tensor::scalar_mul(g, *c)?)?;
            }
            Op::AddScalar(a) => {
                Self::accumulate(grads, *a, g.clone())?;
            }
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                match (av.shape(), bv.shape()) {
                    ([m, k], [_, n]) => {
                        // g: [m,n]; dA = g B^T, dB = A^T g
                        let (m, k, n) = (*m, *k, *n);
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k * n];
                        for ii in 0..m {
                            for jj in 0..n {
                                let gv = g.data()[ii * n + jj];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[ii * k + p] += gv * bv.data()[p * n + jj];
                                    db[p * n + jj] += gv * av.data()[ii * k + p];
                                }
                            }
                        }
                        Self::accumulate(grads, *a, Tensor::new(vec![m, k], da)?)?;
                        Self::accumulate(grads, *b, Tensor::new(vec![k, n], db)?)?;
                    }
                    ([m, k], [_]) => {
                        // g: [m]; dA = g x^T, dx = A^T g
                        let (m, k) = (*m, *k);
                        let mut da = vec![0.0; m * k];
                        let mut dx = vec![0.0; k];
                        for ii in 0..m {
                            let gv = g.data()[ii];
                            for p in 0..k {
                                da[ii * k + p] += gv * bv.data()[p];
                                dx[p] += gv * av.data()[ii * k + p];
                            }
                        }
                        Self::accumulate(grads, *a, Tensor::new(vec![m, k], da)?)?;
                        Self::accumulate(grads, *b, Tensor::new(vec![k], dx)?)?;
                    }
                    _ => unreachable!("matmul recorded with unsupported shapes"),
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let iv = &self.nodes[*input].value;
                let kv = &self.nodes[*kernel].value;
                let gi = tensor::conv2d_grad_input(g, kv, iv.shape(), *stride, *padding)?;
                let gk = tensor::conv2d_grad_kernel(g, iv, kv.shape(), *stride, *padding)?;
                Self::accumulate(grads, *input, gi)?;
                Self::accumulate(grads, *kernel, gk)?;
            }
            Op::ChannelBias { input, bias } => {
                Self::accumulate(grads, *input, g.clone())?;
                let shape = self.nodes[*input].value.shape();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    gb[ch] = g.data()[ch * hw..(ch + 1) * hw].iter().sum();
                }
                Self::accumulate(grads, *bias, Tensor::new(vec![c], gb)?)?;
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                let data = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                Self::accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?)?;
            }
            Op::MaxPool { input, switches } => {
                let ishape = self.nodes[*input].value.shape().to_vec();
                let mut gi = Tensor::zeros(&ishape);
                for (o, &src) in switches.iter().enumerate() {
                    gi.data_mut()[src] += g.data()[o];
                }
                Self::accumulate(grads, *input, gi)?;
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let gv = g.scalar_value()?;
                Self::accumulate(grads, *a, Tensor::full(&shape, gv)?)?;
            }
            Op::Mean(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let n: usize = self.nodes[*a].value.numel();
                let gv = g.scalar_value()? / n as f64;
                Self::accumulate(grads, *a, Tensor::full(&shape, gv)?)?;
            }
            Op::L2Norm(a) => {
                let av = &self.nodes[*a].value;
                let n = self.nodes[i].value.scalar_value()?;
                // Undefined at the origin; return zero there instead of NaN.
                let gi = if n <= 1e-30 {
                    Tensor::zeros(av.shape())
                } else {
                    tensor::scalar_mul(av, g.scalar_value()? / n)?
                };
                Self::accumulate(grads, *a, gi)?;
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                Self::accumulate(grads, *a, g.reshape(&shape)?)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[*p].value.numel();
                    let slice = g.data()[offset..offset + n].to_vec();
                    Self::accumulate(grads, *p, Tensor::new(vec![n], slice)?)?;
                    offset += n;
                }
            }
            Op::Gather { input, indices } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let mut gi = Tensor::zeros(&shape);
                for (o, &src) in indices.iter().enumerate() {
                    gi.data_mut()[src] += g.data()[o];
                }
                Self::accumulate(grads, *input, gi)?;
            }
            Op::ReduceMax { input, argmax } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let mut gi = Tensor::zeros(&shape);
                gi.data_mut()[*argmax] = g.scalar_value()?;
                Self::accumulate(grads, *input, gi)?;
            }
            Op::LogSoftmax(a) => {
                // d/dx_j = g_j - softmax_j * sum(g)
                let y = &self.nodes[i].value;
                let gsum: f64 = g.data().iter().sum();
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(ls, gv)| gv - ls.exp() * gsum)
                    .collect();
                Self::accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::ChannelNormalize { input, eps } => {
                let iv = &self.nodes[*input].value;
                let gi = tensor::channel_normalize_grad(iv, g, *eps)?;
                Self::accumulate(grads, *input, gi)?;
            }
        }
        Ok(())
    }
}
