use super::element::Element;
use super::ops::{gelu_gate, permute_data, GELU_A, GELU_C};
use super::tape::{Node, NodeId, Op};
use super::tensor::Tensor;

struct Acc<'a, E> {
    nodes: &'a [Node<E>],
    grads: &'a mut [Option<Vec<E>>],
}

impl<'a, E: Element> Acc<'a, E> {
    /// Mutable gradient slot for `id`, or `None` if `id` is not differentiable.
    fn slot(&mut self, id: NodeId) -> Option<&mut [E]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![E::zero(); n]))
    }

    fn add(&mut self, id: NodeId, contribution: impl IntoIterator<Item = E>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(slot) => {
                for (s, c) in slot.iter_mut().zip(contribution) {
                    *s = *s + c;
                }
            }
            // first contribution: take it as is rather than adding to zeros
            empty => {
                let first: Vec<E> = contribution.into_iter().collect();
                debug_assert_eq!(first.len(), self.nodes[id].value.numel());
                *empty = Some(first);
            }
        }
    }

    fn value(&self, id: NodeId) -> &'a Tensor<E> {
        let nodes: &'a [Node<E>] = self.nodes;
        &nodes[id].value
    }
}

pub(crate) fn propagate<E: Element>(
    op: &Op<E>,
    out: &Tensor<E>,
    g: &[E],
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
) {
    let mut acc = Acc { nodes, grads };
    match op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => matmul_backward(&mut acc, g, a, b, batch, m, k, n, trans_b),
        &Op::Add(a, b) => {
            acc.add(a, g.iter().copied());
            acc.add(b, g.iter().copied());
        }
        &Op::Sub(a, b) => {
            acc.add(a, g.iter().copied());
            acc.add(b, g.iter().map(|&v| -v));
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (acc.value(a).data(), acc.value(b).data());
            acc.add(a, g.iter().zip(vb).map(|(&gi, &bi)| gi * bi));
            acc.add(b, g.iter().zip(va).map(|(&gi, &ai)| gi * ai));
        }
        &Op::Div(a, b) => {
            let (va, vb) = (acc.value(a).data(), acc.value(b).data());
            acc.add(a, g.iter().zip(vb).map(|(&gi, &bi)| gi / bi));
            acc.add(
                b,
                g.iter()
                    .zip(va.iter().zip(vb))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi)),
            );
        }
        &Op::Scale(x, c) => acc.add(x, g.iter().map(|&v| v * c)),
        &Op::AddScalar(x) | &Op::Reshape(x) => acc.add(x, g.iter().copied()),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gx = permute_data(g, out.shape(), &inv);
            acc.add(*x, gx);
        }
        &Op::SumAll(x) => {
            let n = acc.value(x).numel();
            acc.add(x, std::iter::repeat_n(g[0], n));
        }
        &Op::Mean(x) => {
            let n = acc.value(x).numel();
            let v = g[0] / E::of(n as f64);
            acc.add(x, std::iter::repeat_n(v, n));
        }
        &Op::SumAxis {
            x,
            outer,
            mid,
            inner,
        } => {
            if let Some(slot) = acc.slot(x) {
                for o in 0..outer {
                    let src = &g[o * inner..][..inner];
                    for m in 0..mid {
                        for (s, &v) in slot[(o * mid + m) * inner..][..inner].iter_mut().zip(src) {
                            *s = *s + v;
                        }
                    }
                }
            }
        }
        &Op::Softmax { x, inv_temp } => {
            let cols = *out.shape().last().expect("softmax output has an axis");
            if let Some(slot) = acc.slot(x) {
                for ((y, gr), dst) in out
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(slot.chunks_mut(cols))
                {
                    let dot: E = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                        *d = *d + yi * (gi - dot) * inv_temp;
                    }
                }
            }
        }
        &Op::Gelu(x) => {
            let xv = acc.value(x).data();
            let (c, a) = (E::of(GELU_C), E::of(GELU_A));
            let (two, three) = (E::of(2.0), E::of(3.0));
            acc.add(
                x,
                xv.iter().zip(g).map(|(&v, &gi)| {
                    let s = gelu_gate(v);
                    let d = s + two * v * s * (E::one() - s) * c * (E::one() + three * a * v * v);
                    gi * d
                }),
            );
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => layer_norm_backward(&mut acc, g, *x, *gamma, *beta, mean, rstd),
        Op::Embedding { table, ids } => {
            let dim = acc.value(*table).shape()[1];
            if let Some(slot) = acc.slot(*table) {
                for (r, &i) in ids.iter().enumerate() {
                    for (s, &v) in slot[i * dim..][..dim].iter_mut().zip(&g[r * dim..][..dim]) {
                        *s = *s + v;
                    }
                }
            }
        }
        &Op::AddBias { x, bias } => {
            acc.add(x, g.iter().copied());
            let d = acc.value(bias).numel();
            if let Some(slot) = acc.slot(bias) {
                for row in g.chunks(d) {
                    for (s, &v) in slot.iter_mut().zip(row) {
                        *s = *s + v;
                    }
                }
            }
        }
        &Op::RepeatRows { x, times } => {
            let d = acc.value(x).shape()[1];
            if let Some(slot) = acc.slot(x) {
                for (r, dst) in slot.chunks_mut(d).enumerate() {
                    for s in 0..times {
                        for (t, &v) in dst.iter_mut().zip(&g[(r * times + s) * d..][..d]) {
                            *t = *t + v;
                        }
                    }
                }
            }
        }
        Op::Conv2dWrap { x, kernel } => {
            let s = out.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
            let (ch, cw) = (kh / 2, kw / 2);
            if let Some(slot) = acc.slot(*x) {
                for (gp, dst) in g.chunks(h * w).zip(slot.chunks_mut(h * w)) {
                    for i in 0..h {
                        for j in 0..w {
                            let gv = gp[i * w + j];
                            for u in 0..kh {
                                let r = (i + h * kh + u - ch) % h;
                                for v in 0..kw {
                                    let c = (j + w * kw + v - cw) % w;
                                    dst[r * w + c] =
                                        dst[r * w + c] + kernel.data()[u * kw + v] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        &Op::ReduceMax { x, index } => {
            if let Some(slot) = acc.slot(x) {
                slot[index] = slot[index] + g[0];
            }
        }
        Op::Gather { x, indices } => {
            if let Some(slot) = acc.slot(*x) {
                for (&i, &v) in indices.iter().zip(g) {
                    slot[i] = slot[i] + v;
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = acc.value(p).numel();
                acc.add(p, g[offset..offset + n].iter().copied());
                offset += n;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<E: Element>(
    acc: &mut Acc<'_, E>,
    g: &[E],
    a: NodeId,
    b: NodeId,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) {
    let (va, vb) = (acc.value(a).data(), acc.value(b).data());
    if let Some(ga) = acc.slot(a) {
        // dA = G · Bᵀ
        let (rs, cs) = if trans_b {
            (k as isize, 1)
        } else {
            (1, n as isize)
        };
        for i in 0..batch {
            let (pg, pb) = (&g[i * m * n..][..m * n], &vb[i * k * n..][..k * n]);
            let pga = &mut ga[i * m * k..][..m * k];
            // SAFETY: slice sizes match the dimensions and strides.
            unsafe {
                E::gemm(
                    m,
                    n,
                    k,
                    E::one(),
                    pg.as_ptr(),
                    n as isize,
                    1,
                    pb.as_ptr(),
                    rs,
                    cs,
                    E::one(),
                    pga.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
    }
    if let Some(gb) = acc.slot(b) {
        for i in 0..batch {
            let (pg, pa) = (&g[i * m * n..][..m * n], &va[i * m * k..][..m * k]);
            let pgb = &mut gb[i * k * n..][..k * n];
            // SAFETY: as above.
            unsafe {
                if trans_b {
                    // dB[n, k] = Gᵀ · A
                    E::gemm(
                        n,
                        m,
                        k,
                        E::one(),
                        pg.as_ptr(),
                        1,
                        n as isize,
                        pa.as_ptr(),
                        k as isize,
                        1,
                        E::one(),
                        pgb.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                } else {
                    // dB[k, n] = Aᵀ · G
                    E::gemm(
                        k,
                        m,
                        n,
                        E::one(),
                        pa.as_ptr(),
                        1,
                        k as isize,
                        pg.as_ptr(),
                        n as isize,
                        1,
                        E::one(),
                        pgb.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    }
}

fn layer_norm_backward<E: Element>(
    acc: &mut Acc<'_, E>,
    g: &[E],
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mean: &[E],
    rstd: &[E],
) {
    let xv = acc.value(x).data();
    let gv = acc.value(gamma).data();
    let d = gv.len();
    let inv_d = E::of(1.0 / d as f64);
    let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];

    if let Some(slot) = acc.slot(gamma) {
        for (r, gr) in g.chunks(d).enumerate() {
            for (j, s) in slot.iter_mut().enumerate() {
                *s = *s + gr[j] * xhat(r, j);
            }
        }
    }
    if let Some(slot) = acc.slot(beta) {
        for gr in g.chunks(d) {
            for (s, &v) in slot.iter_mut().zip(gr) {
                *s = *s + v;
            }
        }
    }
    if let Some(slot) = acc.slot(x) {
        for (r, (gr, dst)) in g.chunks(d).zip(slot.chunks_mut(d)).enumerate() {
            let mut m1 = E::zero();
            let mut m2 = E::zero();
            for j in 0..d {
                let gh = gr[j] * gv[j];
                m1 = m1 + gh;
                m2 = m2 + gh * xhat(r, j);
            }
            m1 = m1 * inv_d;
            m2 = m2 * inv_d;
            for j in 0..d {
                let gh = gr[j] * gv[j];
                dst[j] = dst[j] + rstd[r] * (gh - m1 - xhat(r, j) * m2);
            }
        }
    }
}
