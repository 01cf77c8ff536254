//! Op set: forward kernels and their vector-Jacobian products.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::numerics::tensor::{numel, Graph, Node, Var};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    Matmul,
    Conv2d { stride: usize, pad: usize },
    Reshape,
    Permute(Vec<usize>),
    BroadcastTo,
    Reorder { perm: Arc<Vec<usize>> },
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    SumAll,
    MeanAll,
    RowSums,
    LayerNorm { eps: f64 },
    Softmax,
    Silu,
    Gelu,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style right-aligned broadcast shape.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides into `shape` right-aligned against `out_rank`, zeroed on broadcast axes.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let st = strides(shape);
    let mut out = vec![0usize; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 {
            0
        } else {
            st[i]
        };
    }
    out
}

fn binary_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = numel(out_shape);
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = aligned_strides(a_shape, out_shape);
    let sb = aligned_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        // Odometer increment.
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

/// Sums `grad` (shaped `from`) down to `to` by collapsing broadcast axes.
fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let st_to = aligned_strides(to, from);
    let mut out = vec![0.0; numel(to)];
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            it += st_to[d];
            if coords[d] < from[d] {
                break;
            }
            it -= st_to[d] * from[d];
            coords[d] = 0;
        }
    }
    out
}

fn expand_to_shape(data: &[f64], from: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let n = numel(out_shape);
    let s = aligned_strides(from, out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut idx = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(data[idx]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            idx += s[d];
            if coords[d] < out_shape[d] {
                break;
            }
            idx -= s[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Row-major GEMM: `c[m,n] (+)= a[m,k] @ b[k,n]`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
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

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let err = || CoreError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch_dims = &a[..a.len() - 2];
    let b_shared = b.len() == 2 && a.len() > 2;
    if !b_shared && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    let batch = batch_dims.iter().product::<usize>().max(1);
    let mut out_shape = batch_dims.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok((
        MatmulDims {
            batch,
            m,
            k,
            n,
            b_shared,
        },
        out_shape,
    ))
}

impl Graph {
    fn binary(&mut self, op: Op, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let f = match op {
            Op::Add => |x: f64, y: f64| x + y,
            Op::Sub => |x: f64, y: f64| x - y,
            Op::Mul => |x: f64, y: f64| x * y,
            _ => unreachable!(),
        };
        let data = binary_broadcast(
            self.value(a),
            self.shape(a),
            self.value(b),
            self.shape(b),
            &out_shape,
            f,
        );
        Ok(self.push(data, out_shape, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| -x).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Neg, vec![a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::AddScalar, vec![a])
    }

    /// `a [..., m, k] @ b [..., k, n]`; `b` may be rank-2 and shared across
    /// the batch dimensions of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (d, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; d.batch * d.m * d.n];
        let av = self.value(a);
        let bv = self.value(b);
        for i in 0..d.batch {
            let a_off = i * d.m * d.k;
            let b_off = if d.b_shared { 0 } else { i * d.k * d.n };
            gemm(
                d.m,
                d.k,
                d.n,
                &av[a_off..a_off + d.m * d.k],
                d.k as isize,
                1,
                &bv[b_off..b_off + d.k * d.n],
                d.n as isize,
                1,
                0.0,
                &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
            );
        }
        Ok(self.push(out, out_shape, Op::Matmul, vec![a, b]))
    }

    /// 2D convolution. `input [N, Cin, H, W]`, `weight [Cout, Cin, kh, kw]`,
    /// `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let ish = self.shape(input).to_vec();
        let wsh = self.shape(weight).to_vec();
        if ish.len() != 4 || wsh.len() != 4 || ish[1] != wsh[1] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: ish,
                rhs: wsh,
            });
        }
        let (n, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
        let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        if self.shape(bias) != [cout] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![cout],
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let iv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = bv[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    s += iv[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wv[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![n, cout, ho, wo],
            Op::Conv2d { stride, pad },
            vec![input, weight, bias],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).to_vec();
        Ok(self.push(data, shape.to_vec(), Op::Reshape, vec![a]))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if axes.len() != in_shape.len() {
            return Err(CoreError::invalid(format!(
                "permute: axes {:?} do not match rank of shape {:?}",
                axes, in_shape
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(CoreError::invalid(format!("permute: invalid axes {:?}", axes)));
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let data = permute_data(self.value(a), &in_shape, axes, &out_shape);
        Ok(self.push(data, out_shape, Op::Permute(axes.to_vec()), vec![a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(CoreError::invalid("transpose_last: rank must be >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        // Validate compatibility.
        let check = broadcast_shape("broadcast_to", &a_shape, shape)?;
        if check != shape {
            return Err(CoreError::ShapeMismatch {
                op: "broadcast_to",
                lhs: a_shape,
                rhs: shape.to_vec(),
            });
        }
        let data = expand_to_shape(self.value(a), &a_shape, shape);
        Ok(self.push(data, shape.to_vec(), Op::BroadcastTo, vec![a]))
    }

    /// Element gather by a precomputed flat-index permutation:
    /// `out[i] = a[perm[i]]`. `perm` must be a bijection on the elements.
    pub fn reorder(&mut self, a: Var, perm: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if perm.len() != av.len() || numel(out_shape) != av.len() {
            return Err(CoreError::invalid(format!(
                "reorder: perm length {} vs {} elements (out shape {:?})",
                perm.len(),
                av.len(),
                out_shape
            )));
        }
        let data: Vec<f64> = perm.iter().map(|&i| av[i]).collect();
        Ok(self.push(data, out_shape.to_vec(), Op::Reorder { perm }, vec![a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat: no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::invalid(format!(
                "concat: axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sh.to_vec(),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let row = axis_total * inner;
        let mut axis_off = 0usize;
        for &p in parts {
            let len = self.shape(p)[axis];
            let v = self.value(p);
            for o in 0..outer {
                let src = &v[o * len * inner..(o + 1) * len * inner];
                let dst = &mut data[o * row + axis_off * inner..o * row + (axis_off + len) * inner];
                dst.copy_from_slice(src);
            }
            axis_off += len;
        }
        Ok(self.push(data, out_shape, Op::Concat { axis }, parts.to_vec()))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(CoreError::invalid(format!(
                "narrow: slice {}..{} on axis {} of shape {:?}",
                start,
                start + len,
                axis,
                in_shape
            )));
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let v = self.value(a);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = o * in_shape[axis] * inner + start * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        Ok(self.push(data, out_shape, Op::Narrow { axis, start }, vec![a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![s], vec![1], Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![s / n as f64], vec![1], Op::MeanAll, vec![a])
    }

    /// `[rows, cols] -> [rows]` sum over the second axis.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(CoreError::invalid(format!(
                "row_sums: expected rank-2 input, got {:?}",
                sh
            )));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let v = self.value(a);
        let data: Vec<f64> = (0..rows)
            .map(|r| v[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        Ok(self.push(data, vec![rows], Op::RowSums, vec![a]))
    }

    /// Layer normalization over the last axis, no learnable affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| CoreError::invalid("layer_norm: rank-0 input"))?;
        let v = self.value(a);
        let mut data = vec![0.0; v.len()];
        for r in 0..v.len() / d {
            let row = &v[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                data[r * d + i] = (row[i] - mu) * inv;
            }
        }
        Ok(self.push(data, shape, Op::LayerNorm { eps }, vec![a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| CoreError::invalid("softmax: rank-0 input"))?;
        let v = self.value(a);
        let mut data = vec![0.0; v.len()];
        for r in 0..v.len() / d {
            let row = &v[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..d {
                let e = (row[i] - m).exp();
                data[r * d + i] = e;
                z += e;
            }
            for i in 0..d {
                data[r * d + i] /= z;
            }
        }
        Ok(self.push(data, shape, Op::Softmax, vec![a]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Silu, vec![a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Gelu, vec![a])
    }

    /// Mean squared error over all elements: `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }
}

fn permute_data(v: &[f64], in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let in_strides = strides(in_shape);
    let mapped: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let rank = out_shape.len();
    let n = numel(out_shape);
    let mut coords = vec![0usize; rank];
    let mut idx = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(v[idx]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            idx += mapped[d];
            if coords[d] < out_shape[d] {
                break;
            }
            idx -= mapped[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

impl Op {
    /// Parent gradient contributions, aligned with `node.parents`. `None`
    /// marks a parent that needs no gradient.
    pub(crate) fn backward(
        &self,
        g: &[f64],
        node: &Node,
        nodes: &[Node],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let parent = |i: usize| -> &Node { &nodes[node.parents[i].0] };
        let needs = |i: usize| -> bool { parent(i).requires_grad };
        Ok(match self {
            Op::Leaf => vec![],
            Op::Add => {
                let ga = needs(0)
                    .then(|| reduce_to_shape(g, &node.shape, &parent(0).shape));
                let gb = needs(1)
                    .then(|| reduce_to_shape(g, &node.shape, &parent(1).shape));
                vec![ga, gb]
            }
            Op::Sub => {
                let ga = needs(0)
                    .then(|| reduce_to_shape(g, &node.shape, &parent(0).shape));
                let gb = needs(1).then(|| {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    reduce_to_shape(&neg, &node.shape, &parent(1).shape)
                });
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (parent(0), parent(1));
                let ga = needs(0).then(|| {
                    let gb_full = binary_broadcast(g, &node.shape, &b.data, &b.shape, &node.shape, |x, y| x * y);
                    reduce_to_shape(&gb_full, &node.shape, &a.shape)
                });
                let gb = needs(1).then(|| {
                    let ga_full = binary_broadcast(g, &node.shape, &a.data, &a.shape, &node.shape, |x, y| x * y);
                    reduce_to_shape(&ga_full, &node.shape, &b.shape)
                });
                vec![ga, gb]
            }
            Op::Neg => vec![needs(0).then(|| g.iter().map(|x| -x).collect())],
            Op::Scale(c) => vec![needs(0).then(|| g.iter().map(|x| x * c).collect())],
            Op::AddScalar => vec![needs(0).then(|| g.to_vec())],
            Op::Matmul => {
                let (a, b) = (parent(0), parent(1));
                let (d, _) = matmul_dims(&a.shape, &b.shape)?;
                let ga = needs(0).then(|| {
                    // dA = G @ B^T per batch.
                    let mut out = vec![0.0; a.data.len()];
                    for i in 0..d.batch {
                        let b_off = if d.b_shared { 0 } else { i * d.k * d.n };
                        gemm(
                            d.m,
                            d.n,
                            d.k,
                            &g[i * d.m * d.n..(i + 1) * d.m * d.n],
                            d.n as isize,
                            1,
                            &b.data[b_off..b_off + d.k * d.n],
                            1,
                            d.n as isize,
                            0.0,
                            &mut out[i * d.m * d.k..(i + 1) * d.m * d.k],
                        );
                    }
                    out
                });
                let gb = needs(1).then(|| {
                    // dB = A^T @ G per batch, accumulated when B is shared.
                    let mut out = vec![0.0; b.data.len()];
                    for i in 0..d.batch {
                        let (b_off, beta) = if d.b_shared { (0, 1.0) } else { (i * d.k * d.n, 0.0) };
                        gemm(
                            d.k,
                            d.m,
                            d.n,
                            &a.data[i * d.m * d.k..(i + 1) * d.m * d.k],
                            1,
                            d.k as isize,
                            &g[i * d.m * d.n..(i + 1) * d.m * d.n],
                            d.n as isize,
                            1,
                            beta,
                            &mut out[b_off..b_off + d.k * d.n],
                        );
                    }
                    out
                });
                vec![ga, gb]
            }
            Op::Conv2d { stride, pad } => {
                let (input, weight) = (parent(0), parent(1));
                let (n, cin, h, w) = (
                    input.shape[0],
                    input.shape[1],
                    input.shape[2],
                    input.shape[3],
                );
                let (cout, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let mut gi = needs(0).then(|| vec![0.0; input.data.len()]);
                let mut gw = needs(1).then(|| vec![0.0; weight.data.len()]);
                let mut gb = needs(2).then(|| vec![0.0; cout]);
                for b in 0..n {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[((b * cout + co) * ho + oy) * wo + ox];
                                if let Some(gb) = gb.as_mut() {
                                    gb[co] += go;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let ii = ((b * cin + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                            if let Some(gi) = gi.as_mut() {
                                                gi[ii] += go * weight.data[wi];
                                            }
                                            if let Some(gw) = gw.as_mut() {
                                                gw[wi] += go * input.data[ii];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gi, gw, gb]
            }
            Op::Reshape => vec![needs(0).then(|| g.to_vec())],
            Op::Permute(axes) => vec![needs(0).then(|| {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                permute_data(g, &node.shape, &inverse, &parent(0).shape)
            })],
            Op::BroadcastTo => {
                vec![needs(0).then(|| reduce_to_shape(g, &node.shape, &parent(0).shape))]
            }
            Op::Reorder { perm } => vec![needs(0).then(|| {
                let mut out = vec![0.0; parent(0).data.len()];
                for (i, &src) in perm.iter().enumerate() {
                    out[src] += g[i];
                }
                out
            })],
            Op::Concat { axis } => {
                let axis = *axis;
                let out_shape = &node.shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut grads = Vec::with_capacity(node.parents.len());
                let mut axis_off = 0usize;
                for i in 0..node.parents.len() {
                    let len = parent(i).shape[axis];
                    grads.push(needs(i).then(|| {
                        let mut out = Vec::with_capacity(parent(i).data.len());
                        for o in 0..outer {
                            let base = o * row + axis_off * inner;
                            out.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out
                    }));
                    axis_off += len;
                }
                grads
            }
            Op::Narrow { axis, start } => vec![needs(0).then(|| {
                let in_shape = &parent(0).shape;
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut out = vec![0.0; parent(0).data.len()];
                for o in 0..outer {
                    let dst = o * in_shape[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                out
            })],
            Op::SumAll => vec![needs(0).then(|| vec![g[0]; parent(0).data.len()])],
            Op::MeanAll => vec![needs(0).then(|| {
                let n = parent(0).data.len();
                vec![g[0] / n as f64; n]
            })],
            Op::RowSums => vec![needs(0).then(|| {
                let cols = parent(0).shape[1];
                let mut out = Vec::with_capacity(parent(0).data.len());
                for &gr in g {
                    out.extend(std::iter::repeat(gr).take(cols));
                }
                out
            })],
            Op::LayerNorm { eps } => vec![needs(0).then(|| {
                let x = &parent(0).data;
                let d = *node.shape.last().unwrap();
                let y = &node.data;
                let mut out = vec![0.0; x.len()];
                for r in 0..x.len() / d {
                    let row = &x[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let g_mean = gr.iter().sum::<f64>() / d as f64;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        out[r * d + i] = inv * (gr[i] - g_mean - yr[i] * gy_mean);
                    }
                }
                out
            })],
            Op::Softmax => vec![needs(0).then(|| {
                let d = *node.shape.last().unwrap();
                let y = &node.data;
                let mut out = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        out[r * d + i] = yr[i] * (gr[i] - dot);
                    }
                }
                out
            })],
            Op::Silu => vec![needs(0).then(|| {
                parent(0)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    })
                    .collect()
            })],
            Op::Gelu => vec![needs(0).then(|| {
                parent(0)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect()
            })],
        })
    }
}
