use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: usize, kernels: usize, bias: usize, geom: ConvGeom },
    Dense { input: usize, weights: usize, bias: usize, rows: usize, cols: usize },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Concat(Vec<usize>),
    Slice { input: usize, start: usize },
    Reshape(usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape holds one forward pass. [`GradTape::backward`] walks it in exact
/// reverse order once; a second call is rejected.
#[derive(Debug)]
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; all zeros when `var` did not
    /// influence the loss or does not require gradients.
    pub fn get(&self, var: Var) -> Tensor {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        let shape = self.shapes[var.index].clone();
        match &self.grads[var.index] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed gradient slice, `None` for untouched values.
    pub fn raw(&self, var: Var) -> Option<&[f32]> {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        self.grads[var.index].as_deref()
    }
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::Contract(
                "variable is not recorded on this tape".into(),
            ));
        }
        Ok(var.index)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value: value.with_requires_grad(requires_grad),
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn needs(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf; it is tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(Op::Leaf, tensor, rg)
    }

    /// Records a tracked leaf regardless of the tensor's own flag.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor, true)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let i = self.index(var).expect("foreign variable");
        &self.nodes[i].value
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (i, k, b) = (self.index(input)?, self.index(kernels)?, self.index(bias)?);
        let geom = ConvGeom::check(
            self.nodes[i].value.shape(),
            self.nodes[k].value.shape(),
            self.nodes[b].value.shape(),
            stride,
        )?;
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[i].value.data(),
            self.nodes[k].value.data(),
            self.nodes[b].value.data(),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.needs(&[i, k, b]);
        Ok(self.push(Op::Conv2d { input: i, kernels: k, bias: b, geom }, value, rg))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.index(input)?, self.index(weights)?, self.index(bias)?);
        let (rows, cols) = kernels::check_dense(
            self.nodes[i].value.shape(),
            self.nodes[w].value.shape(),
            self.nodes[b].value.shape(),
        )?;
        let out = kernels::dense_forward(
            rows,
            cols,
            self.nodes[i].value.data(),
            self.nodes[w].value.data(),
            self.nodes[b].value.data(),
        );
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.needs(&[i, w, b]);
        Ok(self.push(Op::Dense { input: i, weights: w, bias: b, rows, cols }, value, rg))
    }

    fn unary(&mut self, x: Var, make: fn(usize) -> Op, f: fn(f32) -> f32) -> Result<Var> {
        let i = self.index(x)?;
        let value = self.nodes[i].value.map(f);
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(make(i), value, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh, f32::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        make: fn(usize, usize) -> Op,
        f: fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data: Vec<f32> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(make(ia, ib), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let i = self.index(x)?;
        let value = self.nodes[i].value.map(|v| v * factor);
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(Op::Scale(i, factor), value, rg))
    }

    /// `a + factor·b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, factor: f32) -> Result<Var> {
        let scaled = self.scale(b, factor)?;
        self.add(a, scaled)
    }

    /// Joins flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::new();
        for &i in &idx {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let value = Tensor::from_vec(data);
        let rg = self.needs(&idx);
        Ok(self.push(Op::Concat(idx), value, rg))
    }

    /// Contiguous sub-range of a flattened input.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.index(x)?;
        let src = &self.nodes[i].value;
        if len == 0 || start + len > src.numel() {
            return Err(TensorError::Shape {
                op: "slice",
                left: src.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let value = Tensor::from_vec(src.data()[start..start + len].to_vec());
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(Op::Slice { input: i, start }, value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.index(x)?;
        let value = self.nodes[i].value.reshape(shape)?;
        let rg = self.nodes[i].requires_grad;
        Ok(self.push(Op::Reshape(i), value, rg))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, vec![n])
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.index(pred)?, self.index(target)?);
        let value = kernels::mse_loss(&self.nodes[p].value, &self.nodes[t].value)?;
        let rg = self.needs(&[p, t]);
        Ok(self.push(Op::Mse(p, t), value, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.index(loss)?;
        if self.consumed {
            return Err(TensorError::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![1.0]);
        }

        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernels, bias, geom } => {
                    let (input, kernels, bias) = (*input, *kernels, *bias);
                    let mut gi = self.grad_buf(&mut grads, input);
                    let mut gk = self.grad_buf(&mut grads, kernels);
                    let mut gb = self.grad_buf(&mut grads, bias);
                    kernels::conv2d_backward(
                        geom,
                        self.nodes[input].value.data(),
                        self.nodes[kernels].value.data(),
                        &g,
                        gi.as_deref_mut(),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    restore(&mut grads, input, gi);
                    restore(&mut grads, kernels, gk);
                    restore(&mut grads, bias, gb);
                }
                Op::Dense { input, weights, bias, rows, cols } => {
                    let (input, weights, bias) = (*input, *weights, *bias);
                    let mut gi = self.grad_buf(&mut grads, input);
                    let mut gw = self.grad_buf(&mut grads, weights);
                    let mut gb = self.grad_buf(&mut grads, bias);
                    kernels::dense_backward(
                        *rows,
                        *cols,
                        self.nodes[input].value.data(),
                        self.nodes[weights].value.data(),
                        &g,
                        gi.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    restore(&mut grads, input, gi);
                    restore(&mut grads, weights, gw);
                    restore(&mut grads, bias, gb);
                }
                Op::Relu(x) => {
                    let out = node.value.data();
                    self.accumulate(&mut grads, *x, |i| if out[i] > 0.0 { g[i] } else { 0.0 });
                }
                Op::Tanh(x) => {
                    let out = node.value.data();
                    self.accumulate(&mut grads, *x, |i| g[i] * (1.0 - out[i] * out[i]));
                }
                Op::Sigmoid(x) => {
                    let out = node.value.data();
                    self.accumulate(&mut grads, *x, |i| g[i] * out[i] * (1.0 - out[i]));
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |i| g[i]);
                    self.accumulate(&mut grads, *b, |i| g[i]);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |i| g[i]);
                    self.accumulate(&mut grads, *b, |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    self.accumulate(&mut grads, *a, |i| g[i] * vb[i]);
                    self.accumulate(&mut grads, *b, |i| g[i] * va[i]);
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    self.accumulate(&mut grads, *x, |i| g[i] * f);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.numel();
                        self.accumulate(&mut grads, p, |i| g[offset + i]);
                        offset += len;
                    }
                }
                Op::Slice { input, start } => {
                    let (input, start, len) = (*input, *start, g.len());
                    if self.nodes[input].requires_grad {
                        let numel = self.nodes[input].value.numel();
                        let buf = grads[input].get_or_insert_with(|| vec![0.0; numel]);
                        for (dst, src) in buf[start..start + len].iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::Reshape(x) => self.accumulate(&mut grads, *x, |i| g[i]),
                Op::Mse(p, t) => {
                    let (vp, vt) = (self.nodes[*p].value.data(), self.nodes[*t].value.data());
                    let scale = 2.0 * g[0] / vp.len() as f32;
                    self.accumulate(&mut grads, *p, |i| scale * (vp[i] - vt[i]));
                    self.accumulate(&mut grads, *t, |i| -scale * (vp[i] - vt[i]));
                }
            }
            // Intermediate gradients are not kept; leaves keep theirs.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        // Leaves appear before their consumers, so they were visited (and
        // re-stored) in the sweep; intermediates were taken and dropped.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad || !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { tape: self.id, grads, shapes })
    }

    fn grad_buf(&self, grads: &mut [Option<Vec<f32>>], i: usize) -> Option<Vec<f32>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let numel = self.nodes[i].value.numel();
        Some(grads[i].take().unwrap_or_else(|| vec![0.0; numel]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], target: usize, f: impl Fn(usize) -> f32) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let numel = self.nodes[target].value.numel();
        match &mut grads[target] {
            Some(buf) => {
                for (i, v) in buf.iter_mut().enumerate() {
                    *v += f(i);
                }
            }
            slot @ None => *slot = Some((0..numel).map(f).collect()),
        }
    }
}

fn restore(grads: &mut [Option<Vec<f32>>], i: usize, buf: Option<Vec<f32>>) {
    if buf.is_some() {
        grads[i] = buf;
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}
