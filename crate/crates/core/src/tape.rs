//! Reverse-mode differentiation over a linear op record.
//!
//! Every op appends one node holding its output value plus whatever the
//! backward rule needs. `backward` walks the nodes in exact reverse order of
//! execution, so no topological sort is needed.

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_INDEX};
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        // None for pointwise convs, where the input already is the patch matrix
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    PermuteReshape { src: Var, axes: Vec<usize>, permuted_shape: Vec<usize> },
    Upsample(Var),
    CrossEntropy { logits: Var, dlogits: Vec<f64> },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable input; its gradient is reported under `index`.
    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Zero-padded cross-correlation of a `C_in×H×W` input with a
    /// `C_out×C_in×k×k` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let (c_out, k) = match *self.shape(kernel) {
            [co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => {
                return Err(Error::shape(format!(
                    "kernel {:?} does not fit input {:?}",
                    self.shape(kernel),
                    self.shape(input)
                )))
            }
        };
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(format!("bias {:?} for {c_out} output channels", self.shape(bias))));
        }
        let geom = ConvGeom::new(c_in, h, w, k, stride, pad)?;
        let cols = (!geom.is_pointwise()).then(|| tensor::im2col(self.value(input).data(), &geom));
        let patches = cols.as_deref().unwrap_or_else(|| self.value(input).data());
        let p = geom.out_pixels();
        let mut out = vec![0.0; c_out * p];
        for (row, &b) in out.chunks_mut(p).zip(self.value(bias).data()) {
            row.fill(b);
        }
        tensor::gemm_nn(c_out, geom.patch_rows(), p, self.value(kernel).data(), patches, &mut out);
        let out = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())
            .expect("same shape");
        self.push(out, Op::Relu(x))
    }

    /// Row-wise softmax of an `N×M` matrix with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.value(x).matrix_dims()?;
        let mut out = self.value(x).clone();
        tensor::softmax_rows_inplace(out.data_mut(), m);
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}: trailing extents differ",
                    self.shape(*first),
                    s
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Channel concatenation of `C_a×H×W` and `C_b×H×W`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ha, wa) = self.value(a).chw()?;
        let (_, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels spatial mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        self.concat(&[a, b])
    }

    /// Permutes axes (`axis_order[i]` is the source of output axis `i`), then
    /// reshapes to `new_shape`.
    pub fn reshape_permute(&mut self, x: Var, new_shape: &[usize], axis_order: &[usize]) -> Result<Var> {
        let permuted = tensor::permute(self.value(x), axis_order)?;
        let permuted_shape = permuted.shape().to_vec();
        let out = permuted.reshaped(new_shape).map_err(|_| {
            Error::shape(format!(
                "cannot reshape {:?} (permuted by {axis_order:?}) into {new_shape:?}",
                self.shape(x)
            ))
        })?;
        Ok(self.push(out, Op::PermuteReshape { src: x, axes: axis_order.to_vec(), permuted_shape }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let order: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reshape_permute(x, new_shape, &order)
    }

    /// Bilinear resize of a `C×h×w` tensor to `C×H×W` (half-pixel centers).
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if height == 0 || width == 0 {
            return Err(Error::shape("upsample target must be positive"));
        }
        let data = tensor::resize_bilinear(self.value(x).data(), c, h, w, height, width);
        let out = Tensor::new(vec![c, height, width], data)?;
        Ok(self.push(out, Op::Upsample(x)))
    }

    /// Mean per-pixel negative log-softmax over channels, skipping pixels
    /// labelled [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, labels: &LabelMap) -> Result<Var> {
        let (c, h, w) = self.value(logits).chw()?;
        if (labels.height(), labels.width()) != (h, w) {
            return Err(Error::shape(format!(
                "labels {}×{} do not match logits {:?}",
                labels.height(),
                labels.width(),
                self.shape(logits)
            )));
        }
        labels.validate(c)?;
        let hw = h * w;
        let valid = labels.data().iter().filter(|&&l| l != IGNORE_INDEX).count();
        if valid == 0 {
            return Err(Error::EmptyLoss);
        }
        let x = self.value(logits).data();
        let mut dlogits = vec![0.0; c * hw];
        let mut total = 0.0;
        let inv_n = 1.0 / valid as f64;
        for (px, &label) in labels.data().iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            let max = (0..c).map(|ch| x[ch * hw + px]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).map(|ch| (x[ch * hw + px] - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - x[label as usize * hw + px];
            for ch in 0..c {
                let p = (x[ch * hw + px] - log_z).exp();
                let onehot = if ch == label as usize { 1.0 } else { 0.0 };
                dlogits[ch * hw + px] = (p - onehot) * inv_n;
            }
        }
        Ok(self.push(Tensor::scalar(total * inv_n), Op::CrossEntropy { logits, dlogits }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::new(self.shape(root).to_vec(), vec![1.0])?);
        let mut visited = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).matrix_dims()?;
                    let n = self.value(*b).shape()[1];
                    let mut da = vec![0.0; m * k];
                    tensor::gemm_nt(m, n, k, g.data(), self.value(*b).data(), &mut da);
                    let mut db = vec![0.0; k * n];
                    tensor::gemm_tn(k, m, n, self.value(*a).data(), g.data(), &mut db);
                    accumulate(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                }
                Op::Conv2d { input, kernel, bias, geom, cols } => {
                    let c_out = self.shape(*kernel)[0];
                    let p = geom.out_pixels();
                    let r = geom.patch_rows();
                    let patches = cols.as_deref().unwrap_or_else(|| self.value(*input).data());
                    let mut dk = vec![0.0; c_out * r];
                    tensor::gemm_nt(c_out, p, r, g.data(), patches, &mut dk);
                    let mut dcols = vec![0.0; r * p];
                    tensor::gemm_tn(r, c_out, p, self.value(*kernel).data(), g.data(), &mut dcols);
                    let dinput = if geom.is_pointwise() { dcols } else { tensor::col2im(&dcols, geom) };
                    let db: Vec<f64> = g.data().chunks(p).map(|row| row.iter().sum()).collect();
                    accumulate(&mut grads, *input, Tensor::new(self.shape(*input).to_vec(), dinput)?);
                    accumulate(&mut grads, *kernel, Tensor::new(self.shape(*kernel).to_vec(), dk)?);
                    accumulate(&mut grads, *bias, Tensor::new(vec![c_out], db)?);
                }
                Op::Relu(x) => {
                    let d: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let m = y.shape()[1];
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(m).zip(y.data().chunks(m)).zip(g.data().chunks(m)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, p, Tensor::new(self.shape(p).to_vec(), piece)?);
                    }
                }
                Op::PermuteReshape { src, axes, permuted_shape } => {
                    let unshaped = g.clone().reshaped(permuted_shape)?;
                    let d = tensor::permute(&unshaped, &tensor::inverse_permutation(axes))?;
                    accumulate(&mut grads, *src, d);
                }
                Op::Upsample(x) => {
                    let (c, h, w) = self.value(*x).chw()?;
                    let (_, oh, ow) = node.value.chw()?;
                    let d = tensor::resize_bilinear_backward(g.data(), c, h, w, oh, ow);
                    accumulate(&mut grads, *x, Tensor::new(vec![c, h, w], d)?);
                }
                Op::CrossEntropy { logits, dlogits } => {
                    let s = g.item();
                    let d = dlogits.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(x, factor) => {
                    let d = g.data().iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Sum(x) => {
                    let s = g.item();
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), s));
                }
            }
            grads[idx] = Some(g);
        }

        let params = visited
            .iter()
            .rev()
            .filter_map(|&i| match self.nodes[i].op {
                Op::Param(p) => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, visited, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Node indices in the order the sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    /// `(parameter index, gradient)` for every parameter the root depends on.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> + '_ {
        self.params
            .iter()
            .map(|&(p, node)| (p, self.grads[node].as_ref().expect("visited param has a gradient")))
    }
}
