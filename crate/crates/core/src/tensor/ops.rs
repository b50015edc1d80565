use std::cell::Cell;

use super::{numel, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Corrupts the sigmoid-gate backward rules on the current thread. Negative
/// control for the gradient checker.
#[doc(hidden)]
pub fn inject_backward_fault(on: bool) {
    BACKWARD_FAULT.with(|f| f.set(on));
}

fn gate_fault() -> f64 {
    if BACKWARD_FAULT.with(|f| f.get()) {
        1.5
    } else {
        1.0
    }
}

/// `c = a · b + beta · c` for logical `a: [m×k]`, `b: [k×n]`, `c: [m×n]`.
/// `a_t` means `a` is stored as `[k×m]`, `b_t` that `b` is stored as `[n×k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides above address each of them within bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How an operand maps onto a broadcast output.
enum Map {
    Identity,
    Scalar,
    Modulo(usize),
    Table(Vec<usize>),
}

impl Map {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Map::Identity => i,
            Map::Scalar => 0,
            Map::Modulo(n) => i % n,
            Map::Table(t) => t[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn operand_map(shape: &[usize], out: &[usize]) -> Map {
    if shape == out {
        return Map::Identity;
    }
    let n = numel(shape);
    if n == 1 {
        return Map::Scalar;
    }
    let offset = out.len() - shape.len();
    if out[offset..] == *shape {
        return Map::Modulo(n);
    }
    // strides over the output index space, 0 where broadcast
    let mut strides = vec![0usize; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = s;
        }
        s *= shape[i];
    }
    let total = numel(out);
    let mut table = Vec::with_capacity(total);
    let mut counter = vec![0usize; out.len()];
    let mut idx = 0usize;
    for _ in 0..total {
        table.push(idx);
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Map::Table(table)
}

fn reduce_grad(g: &[f64], map: &Map, len: usize) -> Vec<f64> {
    match map {
        Map::Identity => g.to_vec(),
        _ => {
            let mut out = vec![0.0; len];
            for (i, gi) in g.iter().enumerate() {
                out[map.at(i)] += gi;
            }
            out
        }
    }
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        grads: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let ma = operand_map(self.shape(), &out_shape);
        let mb = operand_map(other.shape(), &out_shape);
        let total = numel(&out_shape);
        let data = {
            let a = self.data();
            let b = other.data();
            (0..total).map(|i| f(a[ma.at(i)], b[mb.at(i)])).collect()
        };
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            name,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let a = p[0].data();
                let b = p[1].data();
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                for (i, gi) in g.iter().enumerate() {
                    let (ia, ib) = (ma.at(i), mb.at(i));
                    let (da, db) = grads(a[ia], b[ib], *gi);
                    ga[ia] += da;
                    gb[ib] += db;
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Element-wise sum with trailing-dimension broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out_shape = broadcast_shape("add", self.shape(), other.shape())?;
        let ma = operand_map(self.shape(), &out_shape);
        let mb = operand_map(other.shape(), &out_shape);
        let total = numel(&out_shape);
        let data = {
            let a = self.data();
            let b = other.data();
            match (&ma, &mb) {
                (Map::Identity, Map::Identity) => a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
                _ => (0..total).map(|i| a[ma.at(i)] + b[mb.at(i)]).collect(),
            }
        };
        let (na, nb) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            "add",
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, _| vec![Some(reduce_grad(g, &ma, na)), Some(reduce_grad(g, &mb, nb))]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    /// Element-wise product with trailing-dimension broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, out, p| {
                let x = p[0].data();
                let gx = g
                    .iter()
                    .zip(x.iter().zip(out))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|gi| gi * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        let fault = gate_fault();
        let data: Vec<f64> = self.data().iter().map(|&x| sigmoid(x)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, out, _| {
                vec![Some(g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y) * fault).collect())]
            }),
        )
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        check_rank("transpose", self, 2)?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        check_rank("matmul", self, 2)?;
        check_rank("matmul", other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, &mut out, 0.0);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &p[1].data(), true, &mut ga, 0.0);
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &p[0].data(), true, g, false, &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product of `[B×m×k]` with `[B×k×n]`, or with `[B×n×k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        check_rank("bmm", self, 3)?;
        check_rank("bmm", other, 3)?;
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bs2, x, y) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        let (k2, n) = if trans_b { (y, x) } else { (x, y) };
        if bs != bs2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; bs * m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    false,
                    &b[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        Ok(Tensor::from_op(
            "bmm",
            vec![bs, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let a = p[0].data();
                let b = p[1].data();
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &b[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &a[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, dst, 0.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, 0.0);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "concat", axis, rank });
        }
        for p in parts {
            let same = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
                for o in 0..outer {
                    let mut at = o * row;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g[at..at + w]);
                        at += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if start >= end || end > len {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{end} on extent {len}"),
            });
        }
        let w = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * w);
        {
            let src = self.data();
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                data.extend_from_slice(&src[base..base + w]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let n = self.numel();
        Ok(Tensor::from_op(
            "slice",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    gx[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "log_softmax",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (data[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    data[at(j)] -= lse;
                }
            }
        }
        Ok(Tensor::from_op(
            "log_softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[T×V]` logits, over positions where `mask` is set.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        check_rank("cross_entropy", self, 2)?;
        let (t, v) = (self.shape()[0], self.shape()[1]);
        if targets.len() != t || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        for (&tg, &m) in targets.iter().zip(mask) {
            if m && tg >= v {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: tg,
                    limit: v,
                });
            }
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        {
            let x = self.data();
            for r in (0..t).filter(|&r| mask[r]) {
                let row = &x[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                loss += max + total.ln() - row[targets[r]];
                for j in 0..v {
                    probs[r * v + j] = (row[j] - max).exp() / total;
                }
            }
        }
        let inv = 1.0 / count as f64;
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy",
            Vec::new(),
            vec![loss * inv],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = probs.clone();
                for r in 0..t {
                    if mask[r] {
                        gx[r * v + targets[r]] -= 1.0;
                    }
                }
                let s = g[0] * inv;
                gx.iter_mut().for_each(|x| *x *= s);
                vec![Some(gx)]
            }),
        ))
    }

    /// Gated linear unit over the last axis: `[rows × 2c] → [rows × c]`,
    /// first half times sigmoid of the second half.
    pub fn glu(&self) -> Result<Tensor> {
        check_rank("glu", self, 2)?;
        let (rows, w) = (self.shape()[0], self.shape()[1]);
        if w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "glu",
                msg: format!("odd channel count {w}"),
            });
        }
        let c = w / 2;
        let mut data = vec![0.0; rows * c];
        {
            let x = self.data();
            for r in 0..rows {
                for j in 0..c {
                    data[r * c + j] = x[r * w + j] * sigmoid(x[r * w + c + j]);
                }
            }
        }
        let fault = gate_fault();
        Ok(Tensor::from_op(
            "glu",
            vec![rows, c],
            data,
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let x = p[0].data();
                let mut gx = vec![0.0; rows * w];
                for r in 0..rows {
                    for j in 0..c {
                        let a = x[r * w + j];
                        let s = sigmoid(x[r * w + c + j]);
                        let gi = g[r * c + j];
                        gx[r * w + j] = gi * s;
                        gx[r * w + c + j] = gi * a * s * (1.0 - s) * fault;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Causal im2col: rows are grouped into segments of `seg_len`; output row
    /// `t` holds input rows `t-k+1 ..= t` of its segment (oldest first), with
    /// zero frames before the segment start.
    pub fn causal_unfold(&self, seg_len: usize, k: usize) -> Result<Tensor> {
        check_rank("causal_unfold", self, 2)?;
        let (rows, c) = (self.shape()[0], self.shape()[1]);
        if seg_len == 0 || rows % seg_len != 0 || k == 0 {
            return Err(Error::InvalidShape {
                op: "causal_unfold",
                msg: format!("{rows} rows, segment {seg_len}, kernel {k}"),
            });
        }
        let w = k * c;
        let mut data = vec![0.0; rows * w];
        {
            let x = self.data();
            for r in 0..rows {
                let t = r % seg_len;
                for j in 0..k {
                    if t + j + 1 >= k {
                        let src = r + j + 1 - k;
                        data[r * w + j * c..r * w + (j + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "causal_unfold",
            vec![rows, w],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    let t = r % seg_len;
                    for j in 0..k {
                        if t + j + 1 >= k {
                            let src = r + j + 1 - k;
                            for i in 0..c {
                                gx[src * c + i] += g[r * w + j * c + i];
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Column-wise max over the first `counts[s]` rows of each segment of
    /// `seg_len` rows. Ties resolve to the lowest row.
    pub fn segment_max(&self, seg_len: usize, counts: &[usize]) -> Result<Tensor> {
        check_rank("segment_max", self, 2)?;
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        if seg_len == 0 || rows != seg_len * counts.len() || counts.iter().any(|&c| c == 0 || c > seg_len) {
            return Err(Error::InvalidShape {
                op: "segment_max",
                msg: format!("{rows} rows, segment {seg_len}, counts {counts:?}"),
            });
        }
        let segs = counts.len();
        let mut data = vec![0.0; segs * d];
        let mut argmax = vec![0usize; segs * d];
        {
            let x = self.data();
            for (s, &count) in counts.iter().enumerate() {
                for j in 0..d {
                    let mut best = s * seg_len;
                    for r in s * seg_len + 1..s * seg_len + count {
                        if x[r * d + j] > x[best * d + j] {
                            best = r;
                        }
                    }
                    data[s * d + j] = x[best * d + j];
                    argmax[s * d + j] = best;
                }
            }
        }
        Ok(Tensor::from_op(
            "segment_max",
            vec![segs, d],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; rows * d];
                for (o, &r) in argmax.iter().enumerate() {
                    gx[r * d + o % d] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&self, index: &[Option<usize>]) -> Result<Tensor> {
        check_rank("gather_rows", self, 2)?;
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                limit: rows,
            });
        }
        if index.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: "empty index".into(),
            });
        }
        let mut data = vec![0.0; index.len() * d];
        {
            let x = self.data();
            for (o, i) in index.iter().enumerate() {
                if let Some(i) = *i {
                    data[o * d..(o + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
                }
            }
        }
        let index = index.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![index.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; rows * d];
                for (o, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..d {
                            gx[i * d + j] += g[o * d + j];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sparse row mixing: `out[o] = Σ w · x[i]` over `(o, i, w)` entries.
    pub fn combine_rows(&self, n_out: usize, entries: &[(usize, usize, f64)]) -> Result<Tensor> {
        check_rank("combine_rows", self, 2)?;
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        for &(o, i, _) in entries {
            if o >= n_out || i >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "combine_rows",
                    index: if o >= n_out { o } else { i },
                    limit: if o >= n_out { n_out } else { rows },
                });
            }
        }
        let mut data = vec![0.0; n_out * d];
        {
            let x = self.data();
            for &(o, i, w) in entries {
                for j in 0..d {
                    data[o * d + j] += w * x[i * d + j];
                }
            }
        }
        let entries = entries.to_vec();
        Ok(Tensor::from_op(
            "combine_rows",
            vec![n_out, d],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; rows * d];
                for &(o, i, w) in &entries {
                    for j in 0..d {
                        gx[i * d + j] += w * g[o * d + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// All-pairs sum within each of `batch` groups:
    /// `[B·n × h] ⊕ [B·r × h] → [B·n·r × h]`, row `(b, i, j) = a[b,i] + c[b,j]`.
    pub fn pairwise_add(&self, other: &Tensor, batch: usize) -> Result<Tensor> {
        check_rank("pairwise_add", self, 2)?;
        check_rank("pairwise_add", other, 2)?;
        let (an, h) = (self.shape()[0], self.shape()[1]);
        let (bn, h2) = (other.shape()[0], other.shape()[1]);
        if h != h2 || batch == 0 || an % batch != 0 || bn % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_add",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (n, r) = (an / batch, bn / batch);
        let mut data = vec![0.0; batch * n * r * h];
        {
            let a = self.data();
            let c = other.data();
            for b in 0..batch {
                for i in 0..n {
                    let ar = &a[(b * n + i) * h..(b * n + i + 1) * h];
                    for j in 0..r {
                        let cr = &c[(b * r + j) * h..(b * r + j + 1) * h];
                        let o = ((b * n + i) * r + j) * h;
                        for q in 0..h {
                            data[o + q] = ar[q] + cr[q];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "pairwise_add",
            vec![batch * n * r, h],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, _| {
                let mut ga = vec![0.0; an * h];
                let mut gc = vec![0.0; bn * h];
                for b in 0..batch {
                    for i in 0..n {
                        for j in 0..r {
                            let o = ((b * n + i) * r + j) * h;
                            for q in 0..h {
                                ga[(b * n + i) * h + q] += g[o + q];
                                gc[(b * r + j) * h + q] += g[o + q];
                            }
                        }
                    }
                }
                vec![Some(ga), Some(gc)]
            }),
        ))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
