//! Differentiable operations. Shapes are always explicit: the only implicit
//! expansion is none at all. Bias addition and row repetition are their own
//! operations.

use super::element::Element;
use super::tape::{NodeId, Op, Tape, Var};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn permute_data<E: Copy>(data: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let n = data.len();
    if rank == 0 {
        return data.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&data[offset..offset + inner_len]);
        } else {
            let mut o = offset;
            for _ in 0..inner_len {
                out.push(data[o]);
                o += inner_stride;
            }
        }
        // advance the outer multi-index
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// `(1 + tanh(u)) / 2` written as `sigmoid(2u)`: one exp instead of a tanh.
pub(crate) fn gelu_gate<E: Element>(x: E) -> E {
    let u = E::of(GELU_C) * (x + E::of(GELU_A) * x * x * x);
    E::one() / (E::one() + (E::of(-2.0) * u).exp())
}

pub(crate) fn gelu<E: Element>(x: E) -> E {
    x * gelu_gate(x)
}

impl<'t, E: Element> Var<'t, E> {
    fn unary(self, f: impl FnOnce(&Tensor<E>) -> Result<(Tensor<E>, Op<E>)>) -> Result<Var<'t, E>> {
        let (value, op) = {
            let nodes = self.tape.nodes();
            f(&nodes[self.id].value)?
        };
        let rg = self.tape.requires_grad(self.id);
        Ok(self.tape.push(value, op, rg))
    }

    fn binary(
        self,
        other: Var<'t, E>,
        f: impl FnOnce(&Tensor<E>, &Tensor<E>) -> Result<(Tensor<E>, Op<E>)>,
    ) -> Result<Var<'t, E>> {
        self.same_tape(&other)?;
        let (value, op) = {
            let nodes = self.tape.nodes();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        Ok(self.tape.push(value, op, rg))
    }

    fn elementwise(
        self,
        other: Var<'t, E>,
        name: &'static str,
        op: fn(NodeId, NodeId) -> Op<E>,
        f: impl Fn(E, E) -> E,
    ) -> Result<Var<'t, E>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            if x.shape() != y.shape() {
                return Err(Error::Dimension {
                    op: name,
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, op(a, b)))
        })
    }

    pub fn add(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.elementwise(other, "add", Op::Add, |p, q| p + q)
    }

    pub fn sub(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.elementwise(other, "sub", Op::Sub, |p, q| p - q)
    }

    pub fn mul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.elementwise(other, "mul", Op::Mul, |p, q| p * q)
    }

    pub fn div(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.elementwise(other, "div", Op::Div, |p, q| p / q)
    }

    pub fn scale(self, c: f64) -> Var<'t, E> {
        let c = E::of(c);
        let id = self.id;
        self.unary(|x| {
            let data = x.data().iter().map(|&v| v * c).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Op::Scale(id, c)))
        })
        .expect("scale is shape-preserving")
    }

    pub fn neg(self) -> Var<'t, E> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, E> {
        let c = E::of(c);
        let id = self.id;
        self.unary(|x| {
            let data = x.data().iter().map(|&v| v + c).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Op::AddScalar(id)))
        })
        .expect("add_scalar is shape-preserving")
    }

    pub fn square(self) -> Result<Var<'t, E>> {
        self.mul(self)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            let (xs, ys) = (x.shape(), y.shape());
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: xs.to_vec(),
                    rhs: ys.to_vec(),
                });
            }
            let (m, k, n) = (xs[0], xs[1], ys[1]);
            let out = gemm_batched(x.data(), y.data(), 1, m, k, n, false);
            Ok((
                Tensor::new(vec![m, n], out)?,
                Op::MatMul {
                    a,
                    b,
                    batch: 1,
                    m,
                    k,
                    n,
                    trans_b: false,
                },
            ))
        })
    }

    /// Batched product `[b, m, k] x [b, k, n] -> [b, m, n]`; with `trans_b`
    /// the right operand is stored as `[b, n, k]`.
    pub fn bmm(self, other: Var<'t, E>, trans_b: bool) -> Result<Var<'t, E>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            let (xs, ys) = (x.shape(), y.shape());
            let bad = || Error::Dimension {
                op: "bmm",
                lhs: xs.to_vec(),
                rhs: ys.to_vec(),
            };
            if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] {
                return Err(bad());
            }
            let (batch, m, k) = (xs[0], xs[1], xs[2]);
            let (yk, n) = if trans_b {
                (ys[2], ys[1])
            } else {
                (ys[1], ys[2])
            };
            if yk != k {
                return Err(bad());
            }
            let out = gemm_batched(x.data(), y.data(), batch, m, k, n, trans_b);
            Ok((
                Tensor::new(vec![batch, m, n], out)?,
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                },
            ))
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, E>> {
        let id = self.id;
        self.unary(|x| Ok((x.clone().reshape(shape)?, Op::Reshape(id))))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, E>> {
        let id = self.id;
        self.unary(|x| {
            let rank = x.shape().len();
            let mut seen = vec![false; rank];
            if perm.len() != rank
                || perm
                    .iter()
                    .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
            {
                return Err(Error::param(format!(
                    "invalid permutation {perm:?} for shape {:?}",
                    x.shape()
                )));
            }
            let shape = perm.iter().map(|&p| x.shape()[p]).collect();
            let data = permute_data(x.data(), x.shape(), perm);
            Ok((
                Tensor::new(shape, data)?,
                Op::Permute {
                    x: id,
                    perm: perm.to_vec(),
                },
            ))
        })
    }

    /// Swap of the two axes of a matrix.
    pub fn transpose(self) -> Result<Var<'t, E>> {
        if self.shape().len() != 2 {
            return Err(Error::param(format!(
                "transpose expects a matrix, got {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    pub fn sum(self) -> Var<'t, E> {
        let id = self.id;
        self.unary(|x| {
            Ok((
                Tensor::scalar(x.data().iter().copied().sum()),
                Op::SumAll(id),
            ))
        })
        .expect("sum never fails")
    }

    pub fn mean(self) -> Var<'t, E> {
        let id = self.id;
        self.unary(|x| {
            let n = E::of(x.numel() as f64);
            Ok((
                Tensor::scalar(x.data().iter().copied().sum::<E>() / n),
                Op::Mean(id),
            ))
        })
        .expect("mean never fails")
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, E>> {
        let id = self.id;
        self.unary(|x| {
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::param(format!(
                    "axis {axis} out of range for {shape:?}"
                )));
            }
            let outer = numel(&shape[..axis]);
            let mid = shape[axis];
            let inner = numel(&shape[axis + 1..]);
            let mut out = vec![E::zero(); outer * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let src = &x.data()[(o * mid + m) * inner..][..inner];
                    for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                        *acc = *acc + v;
                    }
                }
            }
            let mut new_shape = shape.to_vec();
            new_shape.remove(axis);
            Ok((
                Tensor::new(new_shape, out)?,
                Op::SumAxis {
                    x: id,
                    outer,
                    mid,
                    inner,
                },
            ))
        })
    }

    /// Softmax over the last axis of `x / temperature`, max-subtracted.
    pub fn softmax_rows(self, temperature: f64) -> Result<Var<'t, E>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let inv_temp = E::of(1.0 / temperature);
        let id = self.id;
        self.unary(|x| {
            let cols = *x
                .shape()
                .last()
                .ok_or_else(|| Error::param("softmax of a scalar"))?;
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(cols) {
                let max = row.iter().copied().fold(E::neg_infinity(), E::max);
                let start = out.len();
                let mut total = E::zero();
                for &v in row {
                    let e = ((v - max) * inv_temp).exp();
                    total = total + e;
                    out.push(e);
                }
                for v in &mut out[start..] {
                    *v = *v / total;
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), out)?,
                Op::Softmax { x: id, inv_temp },
            ))
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t, E> {
        let id = self.id;
        self.unary(|x| {
            let data = x.data().iter().map(|&v| gelu(v)).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Op::Gelu(id)))
        })
        .expect("gelu is shape-preserving")
    }

    /// Normalizes the last axis, then applies per-feature gain and shift.
    pub fn layer_norm(self, gamma: Var<'t, E>, beta: Var<'t, E>, eps: f64) -> Result<Var<'t, E>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        let (value, op) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[xid].value, &nodes[gid].value, &nodes[bid].value);
            let d = *x
                .shape()
                .last()
                .ok_or_else(|| Error::param("layer_norm of a scalar"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = x.numel() / d;
            let inv_d = E::of(1.0 / d as f64);
            let eps = E::of(eps);
            let mut out = Vec::with_capacity(x.numel());
            let mut means = Vec::with_capacity(rows);
            let mut rstds = Vec::with_capacity(rows);
            for row in x.data().chunks(d) {
                let mean = row.iter().copied().sum::<E>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
                let rstd = (var + eps).sqrt().recip();
                for ((&v, &gi), &bi) in row.iter().zip(g.data()).zip(b.data()) {
                    out.push((v - mean) * rstd * gi + bi);
                }
                means.push(mean);
                rstds.push(rstd);
            }
            (
                Tensor::new(x.shape().to_vec(), out)?,
                Op::LayerNorm {
                    x: xid,
                    gamma: gid,
                    beta: bid,
                    mean: means,
                    rstd: rstds,
                },
            )
        };
        let rg = [xid, gid, bid].iter().any(|&i| self.tape.requires_grad(i));
        Ok(self.tape.push(value, op, rg))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, E>> {
        let id = self.id;
        self.unary(|table| {
            let s = table.shape();
            if s.len() != 2 {
                return Err(Error::param(format!(
                    "embedding table must be 2-d, got {s:?}"
                )));
            }
            let (vocab, dim) = (s[0], s[1]);
            if ids.is_empty() {
                return Err(Error::param("empty embedding lookup"));
            }
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &i in ids {
                if i >= vocab {
                    return Err(Error::param(format!(
                        "id {i} outside vocabulary of {vocab}"
                    )));
                }
                out.extend_from_slice(&table.data()[i * dim..][..dim]);
            }
            Ok((
                Tensor::new(vec![ids.len(), dim], out)?,
                Op::Embedding {
                    table: id,
                    ids: ids.to_vec(),
                },
            ))
        })
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(self, bias: Var<'t, E>) -> Result<Var<'t, E>> {
        let (xid, bid) = (self.id, bias.id);
        self.binary(bias, |x, b| {
            let d = *x.shape().last().unwrap_or(&1);
            if b.shape() != [d] {
                return Err(Error::Dimension {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(d) {
                for (v, &bi) in row.iter_mut().zip(b.data()) {
                    *v = *v + bi;
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), out)?,
                Op::AddBias { x: xid, bias: bid },
            ))
        })
    }

    /// `[r, d] -> [r * times, d]`, each row repeated `times` times in place.
    pub fn repeat_rows(self, times: usize) -> Result<Var<'t, E>> {
        let id = self.id;
        self.unary(|x| {
            let s = x.shape();
            if s.len() != 2 || times == 0 {
                return Err(Error::param(format!("repeat_rows({times}) on shape {s:?}")));
            }
            let d = s[1];
            let mut out = Vec::with_capacity(x.numel() * times);
            for row in x.data().chunks(d) {
                for _ in 0..times {
                    out.extend_from_slice(row);
                }
            }
            Ok((
                Tensor::new(vec![s[0] * times, d], out)?,
                Op::RepeatRows { x: id, times },
            ))
        })
    }

    /// Correlation of the trailing two axes with a fixed odd-sized kernel
    /// under circular (wrap) padding. The kernel receives no gradient.
    pub fn conv2d_wrap(self, kernel: &Tensor<E>) -> Result<Var<'t, E>> {
        let ks = kernel.shape();
        if ks.len() != 2 || ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(Error::param(format!(
                "kernel must be 2-d with odd sides, got {ks:?}"
            )));
        }
        let id = self.id;
        self.unary(|x| {
            let s = x.shape();
            if s.len() < 2 {
                return Err(Error::param(format!(
                    "conv2d_wrap needs >= 2 axes, got {s:?}"
                )));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let out = conv_wrap_forward(x.data(), h, w, kernel);
            Ok((
                Tensor::new(s.to_vec(), out)?,
                Op::Conv2dWrap {
                    x: id,
                    kernel: kernel.clone(),
                },
            ))
        })
    }

    /// Maximum element; the gradient goes to the lowest flat index among ties.
    pub fn reduce_max(self) -> Var<'t, E> {
        let id = self.id;
        self.unary(|x| {
            let mut index = 0;
            for (i, &v) in x.data().iter().enumerate() {
                if v > x.data()[index] {
                    index = i;
                }
            }
            Ok((
                Tensor::scalar(x.data()[index]),
                Op::ReduceMax { x: id, index },
            ))
        })
        .expect("tensors are never empty")
    }

    /// Picks flat elements, producing a tensor of `shape`.
    pub fn gather(self, indices: &[usize], shape: &[usize]) -> Result<Var<'t, E>> {
        let id = self.id;
        self.unary(|x| {
            if indices.is_empty() {
                return Err(Error::param("gather with no indices"));
            }
            if numel(shape) != indices.len() {
                return Err(Error::Dimension {
                    op: "gather",
                    lhs: vec![indices.len()],
                    rhs: shape.to_vec(),
                });
            }
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                let v = *x
                    .data()
                    .get(i)
                    .ok_or_else(|| Error::param(format!("gather index {i} out of range")))?;
                out.push(v);
            }
            Ok((
                Tensor::new(shape.to_vec(), out)?,
                Op::Gather {
                    x: id,
                    indices: indices.to_vec(),
                },
            ))
        })
    }
}

impl<E: Element> Tape<E> {
    /// Flattens and joins the inputs into one 1-d tensor.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, E>]) -> Result<Var<'t, E>> {
        if parts.is_empty() {
            return Err(Error::param("concat of nothing"));
        }
        for p in parts {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::contract("concat operand from another tape"));
            }
        }
        let data: Vec<E> = {
            let nodes = self.nodes();
            parts
                .iter()
                .flat_map(|p| nodes[p.id].value.data().iter().copied())
                .collect()
        };
        let rg = parts.iter().any(|p| self.requires_grad(p.id));
        let n = data.len();
        Ok(self.push(
            Tensor::new(vec![n], data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }
}

pub(crate) fn gemm_batched<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<E> {
    let mut out = vec![E::zero(); batch * m * n];
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    for i in 0..batch {
        let (pa, pb) = (&a[i * m * k..][..m * k], &b[i * k * n..][..k * n]);
        let pc = &mut out[i * m * n..][..m * n];
        // SAFETY: slices are exactly the sizes implied by the dimensions/strides.
        unsafe {
            E::gemm(
                m,
                k,
                n,
                E::one(),
                pa.as_ptr(),
                k as isize,
                1,
                pb.as_ptr(),
                rsb,
                csb,
                E::zero(),
                pc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    out
}

pub(crate) fn conv_wrap_forward<E: Element>(
    x: &[E],
    h: usize,
    w: usize,
    kernel: &Tensor<E>,
) -> Vec<E> {
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (ch, cw) = (kh / 2, kw / 2);
    let mut out = vec![E::zero(); x.len()];
    for (plane, dst) in x.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                let mut acc = E::zero();
                for u in 0..kh {
                    let r = (i + h * kh + u - ch) % h;
                    for v in 0..kw {
                        let c = (j + w * kw + v - cw) % w;
                        acc = acc + kernel.data()[u * kw + v] * plane[r * w + c];
                    }
                }
                dst[i * w + j] = acc;
            }
        }
    }
    out
}
