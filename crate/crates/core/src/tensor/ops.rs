//! Differentiable operations and their backward rules.

use super::broadcast::{broadcast_shape, broadcast_strides, for_each_pair};
use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Abs,
    Relu,
    MatMul,
    TransposeLast2,
    Reshape,
    Concat { axis: usize },
    Softmax { axis: usize },
    Sum,
    Mean,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

/// Boolean keep-mask for [`Tensor::softmax`]; `false` entries are excluded.
/// Broadcast against the logits like any other operand.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], keep: Vec<bool>) -> Result<Mask> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::contract(format!(
                "mask shape {shape:?} does not match {} entries",
                keep.len()
            )));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }

    /// `n×n` mask excluding the diagonal.
    pub fn off_diagonal(n: usize) -> Mask {
        let keep = (0..n * n).map(|i| i / n != i % n).collect();
        Mask {
            shape: vec![n, n],
            keep,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Expands to one flag per element of `target`.
    fn expand(&self, target: &[usize]) -> Result<Vec<bool>> {
        let out = broadcast_shape(&self.shape, target)
            .filter(|s| s.as_slice() == target)
            .ok_or_else(|| Error::dim("softmax mask", &self.shape, target))?;
        let sm = broadcast_strides(&self.shape, &out);
        let zeros = vec![0; out.len()];
        let mut full = vec![true; out.iter().product()];
        for_each_pair(&out, &sm, &zeros, |o, m, _| full[o] = self.keep[m]);
        Ok(full)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            let data: Vec<f64> = {
                let (a, b) = (self.data(), other.data());
                a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
            };
            return Ok(Tensor::from_op(
                sa.to_vec(),
                data,
                vec![self.clone(), other.clone()],
                op,
            ));
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::dim(name, sa, sb))?;
        let (st_a, st_b) = (broadcast_strides(sa, &out), broadcast_strides(sb, &out));
        let mut data = vec![0.0; out.iter().product()];
        {
            let (a, b) = (self.data(), other.data());
            for_each_pair(&out, &st_a, &st_b, |o, i, j| data[o] = f(a[i], b[j]));
        }
        Ok(Tensor::from_op(out, data, vec![self.clone(), other.clone()], op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], op)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.unary(Op::Scale(factor), |x| x * factor)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::dim("matmul", sa, sb))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut data = vec![0.0; out_shape.iter().product()];
        {
            let (a, b) = (self.data(), other.data());
            if bb.iter().all(|&e| e == 1) && batch.as_slice() == ba {
                let rows = a.len() / k;
                gemm(rows, k, n, &a, false, &b, false, &mut data, false);
            } else {
                let (st_a, st_b) = (broadcast_strides(ba, &batch), broadcast_strides(bb, &batch));
                for_each_pair(&batch, &st_a, &st_b, |o, i, j| {
                    gemm(
                        m,
                        k,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        false,
                        &b[j * k * n..(j + 1) * k * n],
                        false,
                        &mut data[o * m * n..(o + 1) * m * n],
                        false,
                    );
                });
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Op::MatMul,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out_shape = s.to_vec();
        let rank = out_shape.len();
        out_shape.swap(rank - 2, rank - 1);
        let data = transpose_blocks(&self.data(), r, c);
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], Op::TransposeLast2))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Op::Reshape,
        ))
    }

    /// Joins tensors along an existing axis.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat needs at least one part"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        for p in &parts[1..] {
            let s = p.shape();
            let agrees = s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::dim("concat", base, s));
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out_shape = base.to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (p, v) in parts.iter().zip(&views) {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(views);
        Ok(Tensor::from_op(out_shape, data, parts.to_vec(), Op::Concat { axis }))
    }

    /// Normalized exponentials along `axis`. Entries whose mask flag is
    /// `false` are excluded and come out exactly zero.
    pub fn softmax(&self, axis: usize, mask: Option<&Mask>) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let keep = mask.map(|m| m.expand(shape)).transpose()?;
        let (outer, len, inner) = split_axis(shape, axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let kept = |l: usize| keep.as_ref().is_none_or(|k| k[at(l)]);
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for l in 0..len {
                    if kept(l) {
                        any = true;
                        max = max.max(x[at(l)]);
                    }
                }
                if !any {
                    return Err(Error::DegenerateSlice {
                        axis,
                        slice: o * inner + i,
                    });
                }
                let mut total = 0.0;
                for l in 0..len {
                    if kept(l) {
                        let e = (x[at(l)] - max).exp();
                        y[at(l)] = e;
                        total += e;
                    }
                }
                for l in 0..len {
                    y[at(l)] /= total;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            shape.to_vec(),
            y,
            vec![self.clone()],
            Op::Softmax { axis },
        ))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![s], vec![self.clone()], Op::Sum)
    }

    pub fn mean(&self) -> Tensor {
        let d = self.data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        drop(d);
        Tensor::from_op(Vec::new(), vec![s], vec![self.clone()], Op::Mean)
    }

    /// Normalizes each vector along the last axis to zero mean, unit variance.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let width = *self.shape().last().unwrap_or(&1);
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / width);
        for (row, out) in x.chunks(width).zip(xhat.chunks_mut(width)) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        drop(x);
        let data = xhat.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Op::LayerNorm { xhat, inv_std },
        )
    }
}

fn transpose_blocks(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Sums a gradient laid out over `out` back down to a broadcast operand.
fn reduce_to(shape: &[usize], out: &[usize], g: &[f64], scale_by: Option<(&[f64], &[usize])>) -> Vec<f64> {
    let mut acc = vec![0.0; shape.iter().product()];
    let st = broadcast_strides(shape, out);
    match scale_by {
        None => {
            let zeros = vec![0; out.len()];
            for_each_pair(out, &st, &zeros, |o, i, _| acc[i] += g[o]);
        }
        Some((other, other_shape)) => {
            let so = broadcast_strides(other_shape, out);
            for_each_pair(out, &st, &so, |o, i, j| acc[i] += g[o] * other[j]);
        }
    }
    acc
}

/// Gradient contributions for each parent (None where not needed).
pub(crate) fn backward(
    op: &Op,
    parents: &[Tensor],
    out_shape: &[usize],
    out: &[f64],
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let wants = |i: usize| parents[i].requires_grad();
    match op {
        Op::Add | Op::Sub => {
            let sign = if matches!(op, Op::Sub) { -1.0 } else { 1.0 };
            (0..2)
                .map(|i| {
                    wants(i).then(|| {
                        let s = parents[i].shape();
                        let mut r = if s == out_shape {
                            g.to_vec()
                        } else {
                            reduce_to(s, out_shape, g, None)
                        };
                        if i == 1 && sign < 0.0 {
                            r.iter_mut().for_each(|v| *v = -*v);
                        }
                        r
                    })
                })
                .collect()
        }
        Op::Mul => (0..2)
            .map(|i| {
                wants(i).then(|| {
                    let other = &parents[1 - i];
                    let od = other.data();
                    let s = parents[i].shape();
                    if s == out_shape && other.shape() == out_shape {
                        g.iter().zip(od.iter()).map(|(a, b)| a * b).collect()
                    } else {
                        reduce_to(s, out_shape, g, Some((&od, other.shape())))
                    }
                })
            })
            .collect(),
        Op::Scale(c) => vec![wants(0).then(|| g.iter().map(|v| v * c).collect())],
        Op::Abs => vec![wants(0).then(|| {
            let x = parents[0].data();
            g.iter()
                .zip(x.iter())
                .map(|(gv, &xv)| {
                    if xv > 0.0 {
                        *gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .collect()
        })],
        Op::Relu => vec![wants(0).then(|| {
            let x = parents[0].data();
            g.iter()
                .zip(x.iter())
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect()
        })],
        Op::MatMul => matmul_backward(parents, out_shape, g),
        Op::TransposeLast2 => vec![wants(0).then(|| {
            let r = out_shape.len();
            transpose_blocks(g, out_shape[r - 2], out_shape[r - 1])
        })],
        Op::Reshape => vec![wants(0).then(|| g.to_vec())],
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            parents
                .iter()
                .map(|p| {
                    let width = p.shape()[*axis];
                    let start = offset;
                    offset += width;
                    p.requires_grad().then(|| {
                        let mut r = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            r.extend_from_slice(&g[base..base + width * inner]);
                        }
                        r
                    })
                })
                .collect()
        }
        Op::Softmax { axis } => vec![wants(0).then(|| {
            let (outer, len, inner) = split_axis(out_shape, *axis);
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| o * len * inner + l * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = out[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            dx
        })],
        Op::Sum => vec![wants(0).then(|| vec![g[0]; parents[0].len()])],
        Op::Mean => vec![wants(0).then(|| {
            let n = parents[0].len();
            vec![g[0] / n as f64; n]
        })],
        Op::LayerNorm { xhat, inv_std } => vec![wants(0).then(|| {
            let width = *out_shape.last().unwrap_or(&1);
            let mut dx = vec![0.0; g.len()];
            for (((gr, xr), dr), is) in g
                .chunks(width)
                .zip(xhat.chunks(width))
                .zip(dx.chunks_mut(width))
                .zip(inv_std)
            {
                let mg = gr.iter().sum::<f64>() / width as f64;
                let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                for ((d, gv), xv) in dr.iter_mut().zip(gr).zip(xr) {
                    *d = is * (gv - mg - xv * mgx);
                }
            }
            dx
        })],
    }
}

fn matmul_backward(parents: &[Tensor], out_shape: &[usize], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (a_t, b_t) = (&parents[0], &parents[1]);
    let (sa, sb) = (a_t.shape(), b_t.shape());
    let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch = &out_shape[..out_shape.len() - 2];
    let a = a_t.data();
    let b = b_t.data();
    let mut ga = a_t.requires_grad().then(|| vec![0.0; a.len()]);
    let mut gb = b_t.requires_grad().then(|| vec![0.0; b.len()]);

    if bb.iter().all(|&e| e == 1) && batch == ba {
        let rows = a.len() / k;
        if let Some(ga) = ga.as_mut() {
            gemm(rows, n, k, g, false, &b, true, ga, false);
        }
        if let Some(gb) = gb.as_mut() {
            gemm(k, rows, n, &a, true, g, false, gb, false);
        }
    } else {
        let (st_a, st_b) = (broadcast_strides(ba, batch), broadcast_strides(bb, batch));
        for_each_pair(batch, &st_a, &st_b, |o, i, j| {
            let go = &g[o * m * n..(o + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                gemm(
                    m,
                    n,
                    k,
                    go,
                    false,
                    &b[j * k * n..(j + 1) * k * n],
                    true,
                    &mut ga[i * m * k..(i + 1) * m * k],
                    true,
                );
            }
            if let Some(gb) = gb.as_mut() {
                gemm(
                    k,
                    m,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    true,
                    go,
                    false,
                    &mut gb[j * k * n..(j + 1) * k * n],
                    true,
                );
            }
        });
    }
    vec![ga, gb]
}
