use std::sync::Arc;

use super::{numel, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
const GELU_COEFF: f64 = 0.044715;

/// `C[m×n] = A[m×k]·B[k×n] + beta·C` with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || ((m - 1) * rsa + (k - 1) * csa) < a.len());
    assert!(k == 0 || ((k - 1) * rsb + (n - 1) * csb) < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: bounds of all three operands are checked above and the output
    // is a distinct, exclusively borrowed buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 where the
/// input is broadcast).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Maps each flat output index to the flat input index under broadcasting.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; out.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        idx.push(offset);
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

fn reduce_to(grad: &[f64], index: &Option<Vec<usize>>, len: usize) -> Vec<f64> {
    match index {
        None => grad.to_vec(),
        Some(idx) => {
            let mut out = vec![0.0; len];
            for (g, &i) in grad.iter().zip(idx) {
                out[i] += g;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp, name: &str) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| shape_err(name, a.shape(), b.shape()))?;
    let ia = (a.shape() != out_shape.as_slice()).then(|| broadcast_index(a.shape(), &out_shape));
    let ib = (b.shape() != out_shape.as_slice()).then(|| broadcast_index(b.shape(), &out_shape));
    let av = a.shared_values();
    let bv = b.shared_values();
    let total = numel(&out_shape);
    let at = |i: usize, idx: &Option<Vec<usize>>, v: &[f64]| match idx {
        None => v[i],
        Some(m) => v[m[i]],
    };
    let value: Vec<f64> = (0..total)
        .map(|i| {
            let x = at(i, &ia, &av);
            let y = at(i, &ib, &bv);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            }
        })
        .collect();
    let (la, lb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(out_shape, value, vec![a.clone(), b.clone()], move |g, need| {
        let ga = need[0].then(|| {
            let local: Vec<f64> = match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * at(i, &ib, &bv)).collect(),
                BinOp::Div => g.iter().enumerate().map(|(i, gi)| gi / at(i, &ib, &bv)).collect(),
            };
            reduce_to(&local, &ia, la)
        });
        let gb = need[1].then(|| {
            let local: Vec<f64> = match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|gi| -gi).collect(),
                BinOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * at(i, &ia, &av)).collect(),
                BinOp::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let y = at(i, &ib, &bv);
                        -gi * at(i, &ia, &av) / (y * y)
                    })
                    .collect(),
            };
            reduce_to(&local, &ib, lb)
        });
        vec![ga, gb]
    }))
}

/// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let xv = x.shared_values();
    let value: Vec<f64> = xv.iter().map(|&v| f(v)).collect();
    let yv = Arc::new(value.clone());
    Tensor::from_op(x.shape().to_vec(), value, vec![x.clone()], move |g, _| {
        vec![Some(g.iter().zip(xv.iter()).zip(yv.iter()).map(|((gi, &xi), &yi)| gi * df(xi, yi)).collect())]
    })
}

fn gelu_value(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Div, "div")
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn log(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn sin(&self) -> Tensor {
        unary(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        unary(self, f64::cos, |x, _| -x.sin())
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(self, move |x| if x >= 0.0 { x } else { slope * x }, move |x, _| if x >= 0.0 { 1.0 } else { slope })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        unary(self, gelu_value, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_value, |_, y| y * (1.0 - y))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(self, move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.values().to_vec(), vec![self.clone()], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let total = self.values().iter().sum();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reduce_sum(&self, axis: usize) -> Result<Tensor> {
        check_axis(self.shape(), axis, "reduce_sum")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let v = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        Ok(Tensor::from_op(removed_axis(self.shape(), axis), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    gx[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn reduce_mean(&self, axis: usize) -> Result<Tensor> {
        check_axis(self.shape(), axis, "reduce_mean")?;
        let len = self.shape()[axis] as f64;
        Ok(self.reduce_sum(axis)?.scale(1.0 / len))
    }

    /// Maximum along `axis`; the gradient goes to the first arg-max.
    pub fn reduce_max(&self, axis: usize) -> Result<Tensor> {
        check_axis(self.shape(), axis, "reduce_max")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let v = self.values();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let x = v[base + i];
                    let slot = o * inner + i;
                    if x > out[slot] || l == 0 {
                        out[slot] = x;
                        arg[slot] = base + i;
                    }
                }
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(removed_axis(self.shape(), axis), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (gi, &a) in g.iter().zip(&arg) {
                gx[a] += gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Euclidean norm over the last axis.
    pub fn row_norm(&self) -> Result<Tensor> {
        let shape = self.shape();
        let c = *shape.last().expect("rank >= 1");
        let rows = self.numel() / c;
        let xv = self.shared_values();
        let norms: Vec<f64> = xv.chunks_exact(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let nv = Arc::new(norms.clone());
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        Ok(Tensor::from_op(out_shape, norms, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; rows * c];
            for r in 0..rows {
                let n = nv[r];
                if n > 0.0 {
                    let s = g[r] / n;
                    for j in 0..c {
                        gx[r * c + j] = s * xv[r * c + j];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, ax1: usize, ax2: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::shape(format!("transpose: axes ({ax1},{ax2}) out of range for {:?}", self.shape())));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(ax1, ax2);
        Ok(self.permute(&perm))
    }

    fn permute(&self, perm: &[usize]) -> Tensor {
        let shape = self.shape();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // src_index[i] = input offset of output element i
        let src_index = {
            let total = numel(&out_shape);
            let mut idx = Vec::with_capacity(total);
            let mut counter = vec![0usize; out_shape.len()];
            let mut offset = 0usize;
            for _ in 0..total {
                idx.push(offset);
                for d in (0..out_shape.len()).rev() {
                    counter[d] += 1;
                    offset += strides[d];
                    if counter[d] < out_shape[d] {
                        break;
                    }
                    offset -= strides[d] * out_shape[d];
                    counter[d] = 0;
                }
            }
            idx
        };
        let v = self.values();
        let value: Vec<f64> = src_index.iter().map(|&i| v[i]).collect();
        let n = self.numel();
        Tensor::from_op(out_shape, value, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (gi, &i) in g.iter().zip(&src_index) {
                gx[i] = *gi;
            }
            vec![Some(gx)]
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(self.shape(), axis, "slice")?;
        let (outer, full, inner) = split_axis(self.shape(), axis);
        if len == 0 || start + len > full {
            return Err(Error::shape(format!("slice {start}..{} of axis {axis} with extent {full}", start + len)));
        }
        let v = self.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Rows of a `[N, ...]` tensor picked by `index` (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let n = shape[0];
        let row = self.numel() / n;
        if index.is_empty() {
            return Err(Error::shape("gather_rows: empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_rows: index {bad} out of range for {n} rows")));
        }
        let v = self.values();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = index.len();
        let index = index.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; total];
            for (k, &i) in index.iter().enumerate() {
                gx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]).for_each(|(a, b)| *a += b);
            }
            vec![Some(gx)]
        }))
    }

    /// Repeats a tensor along a new leading axis.
    pub fn repeat_leading(&self, times: usize) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape());
        let one = self.reshape(&shape)?;
        let idx = vec![0usize; times];
        one.gather_rows(&idx)
    }
}

pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    check_axis(first.shape(), axis, "concat")?;
    for x in xs {
        let ok = x.shape().len() == first.shape().len()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", first.shape(), x.shape()));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total_len: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total_len * inner);
    for o in 0..outer {
        for (x, &l) in xs.iter().zip(&lens) {
            out.extend_from_slice(&x.values()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_len;
    Ok(Tensor::from_op(shape, out, xs.to_vec(), move |g, need| {
        let mut grads: Vec<Option<Vec<f64>>> = lens.iter().zip(need).map(|(&l, &nd)| nd.then(|| Vec::with_capacity(outer * l * inner))).collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (gx, &l) in grads.iter_mut().zip(&lens) {
                if let Some(gx) = gx {
                    gx.extend_from_slice(&g[pos..pos + l * inner]);
                }
                pos += l * inner;
            }
        }
        grads
    }))
}

/// `a[..., m, k] · b[k, n]` (shared right operand) or batched
/// `a[B..., m, k] · b[B..., k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(shape_err("matmul", sa, sb));
    }
    let k = sa[sa.len() - 1];
    let m = sa[sa.len() - 2];
    let n = sb[sb.len() - 1];
    if sb[sb.len() - 2] != k {
        return Err(shape_err("matmul", sa, sb));
    }
    let av = a.shared_values();
    let bv = b.shared_values();
    if sb.len() == 2 {
        let rows = a.numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, &av, (k, 1), &bv, (n, 1), 0.0, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        return Ok(Tensor::from_op(shape, out, vec![a.clone(), b.clone()], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; rows * k];
                gemm(rows, n, k, g, (n, 1), &bv, (1, n), 0.0, &mut ga);
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, rows, n, &av, (1, k), g, (n, 1), 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        }));
    }
    if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(shape_err("matmul", sa, sb));
    }
    let batch = numel(&sa[..sa.len() - 2]);
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(m, k, n, &av[i * m * k..], (k, 1), &bv[i * k * n..], (n, 1), 0.0, &mut out[i * m * n..(i + 1) * m * n]);
    }
    let mut shape = sa[..sa.len() - 1].to_vec();
    shape.push(n);
    Ok(Tensor::from_op(shape, out, vec![a.clone(), b.clone()], move |g, need| {
        let ga = need[0].then(|| {
            let mut ga = vec![0.0; batch * m * k];
            for i in 0..batch {
                gemm(m, n, k, &g[i * m * n..], (n, 1), &bv[i * k * n..], (1, n), 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
            }
            ga
        });
        let gb = need[1].then(|| {
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                gemm(k, m, n, &av[i * m * k..], (1, k), &g[i * m * n..], (n, 1), 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
            }
            gb
        });
        vec![ga, gb]
    }))
}

/// Fully connected layer `x[..., in] · W[in, out] + b[out]`; also a
/// kernel-size-1 convolution over the leading axes.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sx = x.shape();
    let sw = w.shape();
    if sw.len() != 2 || sx[sx.len() - 1] != sw[0] || b.shape() != [sw[1]] {
        return Err(Error::shape(format!("affine: x {sx:?}, W {sw:?}, b {:?}", b.shape())));
    }
    let (k, n) = (sw[0], sw[1]);
    let rows = x.numel() / k;
    let xv = x.shared_values();
    let wv = w.shared_values();
    let bv = b.values();
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(bv);
    }
    gemm(rows, k, n, &xv, (k, 1), &wv, (n, 1), 1.0, &mut out);
    let mut shape = sx[..sx.len() - 1].to_vec();
    shape.push(n);
    Ok(Tensor::from_op(shape, out, vec![x.clone(), w.clone(), b.clone()], move |g, need| {
        let gx = need[0].then(|| {
            let mut gx = vec![0.0; rows * k];
            gemm(rows, n, k, g, (n, 1), &wv, (1, n), 0.0, &mut gx);
            gx
        });
        let gw = need[1].then(|| {
            let mut gw = vec![0.0; k * n];
            gemm(k, rows, n, &xv, (1, k), g, (n, 1), 0.0, &mut gw);
            gw
        });
        let gb = need[2].then(|| {
            let mut gb = vec![0.0; n];
            for r in 0..rows {
                gb.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
            }
            gb
        });
        vec![gx, gw, gb]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::variable(values.to_vec(), shape).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = t(&[1.0, -2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        x.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![1.0; 6]);
    }

    #[test]
    fn activation_definitions() {
        let x = t(&[0.0, -1.0], &[2]);
        assert_eq!(x.gelu().values()[0], 0.0);
        assert_eq!(x.leaky_relu(DEFAULT_LEAKY_SLOPE).values()[1], -0.01);
        assert_eq!(x.sigmoid().values()[0], 0.5);
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        let y = a.add(&b).unwrap();
        assert_eq!(y.values(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad(), vec![2.0, 2.0, 2.0]);
        let col = t(&[1.0, 2.0], &[2, 1]);
        let z = a.mul(&col).unwrap();
        assert_eq!(z.values(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
        assert!(a.add(&t(&[1.0, 2.0], &[2])).is_err());
    }

    #[test]
    fn matmul_shapes_and_values() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(matmul(&a, &b).unwrap().values(), &[19.0, 22.0, 43.0, 50.0]);
        let err = matmul(&a, &t(&[1.0; 6], &[3, 2])).unwrap_err();
        assert!(err.to_string().contains("[2, 2]") && err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn reduce_max_ties_route_to_first() {
        let x = t(&[3.0, 3.0, 1.0, 2.0], &[2, 2]);
        let m = x.reduce_max(0).unwrap();
        assert_eq!(m.values(), &[3.0, 3.0]);
        m.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![1.0, 1.0, 0.0, 0.0]);
        let y = t(&[5.0, 5.0, 5.0], &[3]);
        y.reduce_max(0).unwrap().sum().backward().unwrap();
        assert_eq!(y.grad(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_and_leaves_unused_zero() {
        let x = t(&[1.0, 2.0], &[2]);
        let unused = t(&[1.0, 2.0], &[2]);
        assert!(matches!(x.square().backward(), Err(Error::InvalidArgument(_))));
        x.square().sum().backward().unwrap();
        assert_eq!(unused.grad(), vec![0.0, 0.0]);
        assert!(!unused.has_grad());
    }

    #[test]
    fn backward_is_repeatable_after_reset() {
        let x = t(&[0.3, -0.7, 1.1], &[3]);
        let loss = x.gelu().mul(&x).unwrap().sum();
        loss.backward().unwrap();
        let first = x.grad();
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(first, x.grad());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let x = t(&[0.5, -1.5, 2.0, 0.1], &[2, 2]);
        let before = x.values().to_vec();
        let y = matmul(&x, &x).unwrap().sigmoid().transpose(0, 1).unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.values(), before.as_slice());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = c.slice(1, 2, 1).unwrap();
        assert_eq!(s.values(), b.values());
        s.sum().backward().unwrap();
        assert_eq!(b.grad(), vec![1.0, 1.0]);
        assert_eq!(a.grad(), vec![0.0; 4]);
    }
}
