//! Differentiable operations recorded on a [`Tape`](super::Tape).
//!
//! Elementwise operations broadcast numpy-style and panic on incompatible
//! shapes; matrix products report mismatches as [`Error::Shape`].

use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use super::array::{broadcast_binary, gemm, gemm_at, gemm_bt, sum_to_shape};
use super::tape::{matmul_fault_active, Var};
use super::NDArray;
use crate::error::{Error, Result};

fn bin(a: &NDArray, b: &NDArray, f: impl Fn(f64, f64) -> f64) -> NDArray {
    broadcast_binary(a, b, f).unwrap_or_else(|e| panic!("{e}"))
}

/// Row-major split of `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Compressed sparse rows of a constant matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            offsets[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> NDArray {
        let mut out = NDArray::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for k in self.offsets[r]..self.offsets[r + 1] {
                out.set(&[r, self.indices[k]], self.values[k]);
            }
        }
        out
    }
}

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        self.tape.record(
            y,
            &[self],
            Box::new(move |c| {
                let d = c.inputs[0].zip_map(c.output, |x, y| df(x, y));
                vec![Some(c.grad.zip_map(&d, |g, d| g * d))]
            }),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let y = bin(&self.value(), &other.value(), |a, b| a + b);
        self.tape.record(
            y,
            &[self, other],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| sum_to_shape(c.grad, c.inputs[0].shape())),
                    c.needs[1].then(|| sum_to_shape(c.grad, c.inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let y = bin(&self.value(), &other.value(), |a, b| a - b);
        self.tape.record(
            y,
            &[self, other],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| sum_to_shape(c.grad, c.inputs[0].shape())),
                    c.needs[1].then(|| sum_to_shape(&c.grad.map(|g| -g), c.inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let y = bin(&self.value(), &other.value(), |a, b| a * b);
        self.tape.record(
            y,
            &[self, other],
            Box::new(|c| {
                let (a, b) = (&c.inputs[0], &c.inputs[1]);
                vec![
                    c.needs[0].then(|| sum_to_shape(&bin(c.grad, b, |g, b| g * b), a.shape())),
                    c.needs[1].then(|| sum_to_shape(&bin(c.grad, a, |g, a| g * a), b.shape())),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let y = bin(&self.value(), &other.value(), |a, b| a / b);
        self.tape.record(
            y,
            &[self, other],
            Box::new(|c| {
                let (a, b) = (&c.inputs[0], &c.inputs[1]);
                let ga = c.needs[0].then(|| sum_to_shape(&bin(c.grad, b, |g, b| g / b), a.shape()));
                let gb = c.needs[1].then(|| {
                    let gy = c.grad.zip_map(c.output, |g, y| -g * y);
                    sum_to_shape(&bin(&gy, b, |t, b| t / b), b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    /// Matrix product. `self` may carry leading batch axes: `[.., k] · [k, n] -> [.., n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} by {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = a.len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let y = NDArray::from_parts(shape, gemm(a.data(), b.data(), m, k, n));
        Ok(self.tape.record(
            y,
            &[self, other],
            Box::new(move |c| {
                let sign = if matmul_fault_active() { -1.0 } else { 1.0 };
                let (a, b, g) = (&c.inputs[0], &c.inputs[1], c.grad.data());
                let ga = c.needs[0].then(|| {
                    let d = gemm_bt(g, b.data(), m, n, k);
                    NDArray::from_parts(a.shape().to_vec(), d).map(|v| sign * v)
                });
                let gb = c.needs[1].then(|| {
                    let d = gemm_at(a.data(), g, m, k, n);
                    NDArray::from_parts(vec![k, n], d).map(|v| sign * v)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `self · otherᵀ` with `other` of shape `[n, k]`; `self` may carry leading batch axes.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(Error::Shape(format!("matmul of {sa:?} by transpose of {sb:?}")));
        }
        let (n, k) = (sb[0], sb[1]);
        let m = a.len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let y = NDArray::from_parts(shape, gemm_bt(a.data(), b.data(), m, k, n));
        Ok(self.tape.record(
            y,
            &[self, other],
            Box::new(move |c| {
                let sign = if matmul_fault_active() { -1.0 } else { 1.0 };
                let (a, b, g) = (&c.inputs[0], &c.inputs[1], c.grad.data());
                let ga = c.needs[0].then(|| {
                    NDArray::from_parts(a.shape().to_vec(), gemm(g, b.data(), m, n, k)).map(|v| sign * v)
                });
                let gb = c.needs[1].then(|| {
                    NDArray::from_parts(vec![n, k], gemm_at(g, a.data(), m, n, k)).map(|v| sign * v)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `[g, m, k] · [g, k, n]`, or `[g, m, k] · [g, n, k]ᵀ` when `transpose_rhs`.
    pub fn bmm(self, other: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_rhs { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Shape(format!("batched matmul of {sa:?} by {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs { sb[1] } else { sb[2] };
        let mut out = Vec::with_capacity(g * m * n);
        for i in 0..g {
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            if transpose_rhs {
                out.extend(gemm_bt(ai, bi, m, k, n));
            } else {
                out.extend(gemm(ai, bi, m, k, n));
            }
        }
        let y = NDArray::from_parts(vec![g, m, n], out);
        Ok(self.tape.record(
            y,
            &[self, other],
            Box::new(move |c| {
                let (a, b, gr) = (&c.inputs[0], &c.inputs[1], c.grad.data());
                let mut ga = c.needs[0].then(|| Vec::with_capacity(a.len()));
                let mut gb = c.needs[1].then(|| Vec::with_capacity(b.len()));
                for i in 0..g {
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    let gi = &gr[i * m * n..(i + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        if transpose_rhs {
                            ga.extend(gemm(gi, bi, m, n, k));
                        } else {
                            ga.extend(gemm_bt(gi, bi, m, n, k));
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        if transpose_rhs {
                            gb.extend(gemm_at(gi, ai, m, n, k));
                        } else {
                            gb.extend(gemm_at(ai, gi, m, k, n));
                        }
                    }
                }
                vec![
                    ga.map(|d| NDArray::from_parts(a.shape().to_vec(), d)),
                    gb.map(|d| NDArray::from_parts(b.shape().to_vec(), d)),
                ]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = (*self.value()).clone();
        let y = x.reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.tape.record(
            y,
            &[self],
            Box::new(|c| {
                let g = c.grad.clone().reshape(c.inputs[0].shape()).expect("same size");
                vec![Some(g)]
            }),
        )
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let zeros = NDArray::zeros(shape);
        let y = bin(&zeros, &x, |_, v| v);
        assert_eq!(y.shape(), shape, "cannot broadcast {:?} to {shape:?}", x.shape());
        self.tape.record(
            y,
            &[self],
            Box::new(|c| vec![Some(sum_to_shape(c.grad, c.inputs[0].shape()))]),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let y = NDArray::scalar(self.value().sum());
        self.tape.record(
            y,
            &[self],
            Box::new(|c| vec![Some(NDArray::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.tape.record(
            NDArray::from_parts(shape, out),
            &[self],
            Box::new(move |c| {
                let mut g = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = &c.grad.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        g.extend_from_slice(src);
                    }
                }
                vec![Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        assert!(start <= end && end <= n, "slice {start}..{end} of extent {n}");
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = w;
        self.tape.record(
            NDArray::from_parts(shape, out),
            &[self],
            Box::new(move |c| {
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    g[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&c.grad.data()[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Index `i` along `axis`, removing the axis.
    pub fn select(self, axis: usize, i: usize) -> Var<'t> {
        let mut shape = self.shape();
        shape.remove(axis);
        self.slice(axis, i, i + 1).reshape(&shape)
    }

    /// Reverses element order along `axis`.
    pub fn flip(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let y = NDArray::from_parts(x.shape().to_vec(), flip_data(x.data(), outer, n, inner));
        self.tape.record(
            y,
            &[self],
            Box::new(move |c| {
                let g = flip_data(c.grad.data(), outer, n, inner);
                vec![Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Rows `index[e]` of the leading axis.
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let rows = x.shape()[0];
        let w = x.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            out.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        self.tape.record(
            NDArray::from_parts(shape, out),
            &[self],
            Box::new(move |c| {
                let mut g = vec![0.0; rows * w];
                for (e, &i) in index.iter().enumerate() {
                    for (d, s) in g[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&c.grad.data()[e * w..(e + 1) * w])
                    {
                        *d += s;
                    }
                }
                vec![Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Sums rows of the leading axis into `segments` buckets given by `segment[e]`.
    pub fn segment_sum(self, segment: Rc<Vec<usize>>, segments: usize) -> Var<'t> {
        let x = self.value();
        let rows = x.shape()[0];
        assert_eq!(rows, segment.len(), "segment ids per row");
        let w = x.len() / rows.max(1);
        let mut out = vec![0.0; segments * w];
        for (e, &s) in segment.iter().enumerate() {
            for (d, v) in out[s * w..(s + 1) * w].iter_mut().zip(&x.data()[e * w..(e + 1) * w]) {
                *d += v;
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = segments;
        self.tape.record(
            NDArray::from_parts(shape, out),
            &[self],
            Box::new(move |c| {
                let mut g = Vec::with_capacity(rows * w);
                for &s in segment.iter() {
                    g.extend_from_slice(&c.grad.data()[s * w..(s + 1) * w]);
                }
                vec![Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    /// Softmax over contiguous row groups of a `[rows, cols]` array, independently per column.
    /// Group `i` spans rows `offsets[i]..offsets[i + 1]`.
    pub fn segment_softmax(self, offsets: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "segment_softmax expects [rows, cols]");
        let cols = x.shape()[1];
        let mut y = vec![0.0; x.len()];
        for win in offsets.windows(2) {
            let (lo, hi) = (win[0], win[1]);
            for col in 0..cols {
                let mut m = f64::NEG_INFINITY;
                for r in lo..hi {
                    m = m.max(x.data()[r * cols + col]);
                }
                let mut z = 0.0;
                for r in lo..hi {
                    let e = (x.data()[r * cols + col] - m).exp();
                    y[r * cols + col] = e;
                    z += e;
                }
                for r in lo..hi {
                    y[r * cols + col] /= z;
                }
            }
        }
        self.tape.record(
            NDArray::from_parts(x.shape().to_vec(), y),
            &[self],
            Box::new(move |c| {
                let (y, g) = (c.output.data(), c.grad.data());
                let mut gx = vec![0.0; y.len()];
                for win in offsets.windows(2) {
                    for col in 0..cols {
                        let dot: f64 = (win[0]..win[1])
                            .map(|r| y[r * cols + col] * g[r * cols + col])
                            .sum();
                        for r in win[0]..win[1] {
                            let i = r * cols + col;
                            gx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                vec![Some(NDArray::from_parts(c.output.shape().to_vec(), gx))]
            }),
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("softmax of a scalar");
        let mut y = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            y.extend(softmax_slice(row));
        }
        self.tape.record(
            NDArray::from_parts(x.shape().to_vec(), y),
            &[self],
            Box::new(move |c| {
                let mut gx = Vec::with_capacity(c.output.len());
                for (y, g) in c.output.data().chunks(n).zip(c.grad.data().chunks(n)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(g).map(|(y, g)| y * (g - dot)));
                }
                vec![Some(NDArray::from_parts(c.output.shape().to_vec(), gx))]
            }),
        )
    }

    /// Sparse-constant times dense: `csr[rows, cols] · self[cols, d]`.
    pub fn spmm(self, csr: Rc<Csr>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape()[0], csr.cols, "spmm inner dimension");
        let d = x.len() / csr.cols.max(1);
        let mut out = vec![0.0; csr.rows * d];
        for r in 0..csr.rows {
            for k in csr.offsets[r]..csr.offsets[r + 1] {
                let (j, v) = (csr.indices[k], csr.values[k]);
                for (o, s) in out[r * d..(r + 1) * d].iter_mut().zip(&x.data()[j * d..(j + 1) * d]) {
                    *o += v * s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = csr.rows;
        self.tape.record(
            NDArray::from_parts(shape, out),
            &[self],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut gx = vec![0.0; csr.cols * d];
                for r in 0..csr.rows {
                    for k in csr.offsets[r]..csr.offsets[r + 1] {
                        let (j, v) = (csr.indices[k], csr.values[k]);
                        for (o, s) in gx[j * d..(j + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v * s;
                        }
                    }
                }
                vec![Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Scales each last-axis vector to unit L2 norm; norms below `guard` are clamped to it,
    /// so zero vectors stay zero.
    pub fn l2_normalize(self, guard: f64) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("normalize a scalar");
        let mut y = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(guard);
            y.extend(row.iter().map(|v| v / norm));
        }
        self.tape.record(
            NDArray::from_parts(x.shape().to_vec(), y),
            &[self],
            Box::new(move |c| {
                let mut gx = Vec::with_capacity(c.output.len());
                for ((x, y), g) in c.inputs[0]
                    .data()
                    .chunks(n)
                    .zip(c.output.data().chunks(n))
                    .zip(c.grad.data().chunks(n))
                {
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > guard {
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        gx.extend(y.iter().zip(g).map(|(y, g)| (g - y * dot) / norm));
                    } else {
                        gx.extend(g.iter().map(|g| g / guard));
                    }
                }
                vec![Some(NDArray::from_parts(c.output.shape().to_vec(), gx))]
            }),
        )
    }

    /// Multiplies by a constant mask (e.g. inverted dropout).
    pub fn mask_mul(self, mask: &NDArray) -> Var<'t> {
        let m = self.tape.constant(mask.clone());
        self.mul(m)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!vars.is_empty(), "concat of nothing");
    let tape = vars[0].tape;
    let values: Vec<_> = vars.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    let (outer, _, inner) = split_axis(&base, axis);
    let widths: Vec<usize> = values
        .iter()
        .map(|v| {
            let s = v.shape();
            assert!(
                s.len() == base.len()
                    && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]),
                "concat shape mismatch {:?} vs {:?}",
                s,
                base
            );
            s[axis]
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    tape.record(
        NDArray::from_parts(shape, out),
        vars,
        Box::new(move |c| {
            let g = c.grad.data();
            let mut grads: Vec<Vec<f64>> = widths
                .iter()
                .map(|w| Vec::with_capacity(outer * w * inner))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (dst, &w) in grads.iter_mut().zip(&widths) {
                    dst.extend_from_slice(&g[pos..pos + w * inner]);
                    pos += w * inner;
                }
            }
            grads
                .into_iter()
                .zip(c.inputs)
                .zip(c.needs)
                .map(|((d, x), &need)| need.then(|| NDArray::from_parts(x.shape().to_vec(), d)))
                .collect()
        }),
    )
}

/// Stacks equally shaped variables along a new `axis`.
pub fn stack<'t>(vars: &[Var<'t>], axis: usize) -> Var<'t> {
    let mut shape = vars[0].shape();
    shape.insert(axis, 1);
    let expanded: Vec<Var<'t>> = vars.iter().map(|v| v.reshape(&shape)).collect();
    concat(&expanded, axis)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Max-subtracted softmax of one vector.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn flip_data(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for j in (0..n).rev() {
            out.extend_from_slice(&x[(o * n + j) * inner..(o * n + j + 1) * inner]);
        }
    }
    out
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
