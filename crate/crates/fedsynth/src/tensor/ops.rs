//! Forward ops with hand-derived backward closures.
//!
//! Every op validates shapes, rejects non-finite outputs, and records a
//! graph node only when an input requires grad. Broadcasting is limited to
//! scalar-with-tensor and the explicit row/column variants below.

use super::{mul_counter, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // df(x, y) -> dy/dx, given input x and output y
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let x = self.clone();
        let data: Vec<f64> = self.inner.borrow().data.iter().map(|&v| f(v)).collect();
        let y: Vec<f64> = data.clone();
        Tensor::from_op(
            op,
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let xs = x.inner.borrow().data.clone();
                let gi: Vec<f64> = xs
                    .iter()
                    .zip(y.iter())
                    .zip(g.iter())
                    .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                    .collect();
                x.accumulate_grad(&gi);
            }),
        )
    }

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (da, db) factors given (a, b, y)
        dfa: impl Fn(f64, f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        let data: Vec<f64> = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.data
                .iter()
                .zip(b.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let y = data.clone();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            op,
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ad = a.inner.borrow().data.clone();
                let bd = b.inner.borrow().data.clone();
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| g[i] * dfa(ad[i], bd[i], y[i]))
                    .collect();
                let gb: Vec<f64> = (0..g.len())
                    .map(|i| g[i] * dfb(ad[i], bd[i], y[i]))
                    .collect();
                a.accumulate_grad(&ga);
                b.accumulate_grad(&gb);
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, _| 1.0 / b,
            |_, b, y| -y / b,
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn sin(&self) -> Result<Tensor> {
        self.unary("sin", f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Result<Tensor> {
        self.unary("cos", f64::cos, |x, _| -x.sin())
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary("softplus", stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(&self, alpha: f64) -> Result<Tensor> {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { alpha * x },
            move |x, _| if x > 0.0 { 1.0 } else { alpha },
        )
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary(
            "abs",
            f64::abs,
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.inner.borrow().data.iter().sum();
        let n = self.len();
        let x = self.clone();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                x.accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let n = self.len() as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    /// Row sums of an (N, M) matrix -> shape (N).
    pub fn sum_rows(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("sum_rows", "expects a 2-d tensor"));
        }
        let (n, m) = (shape[0], shape[1]);
        let data = self.inner.borrow();
        let out: Vec<f64> = (0..n)
            .map(|i| data.data[i * m..(i + 1) * m].iter().sum())
            .collect();
        drop(data);
        let x = self.clone();
        Tensor::from_op(
            "sum_rows",
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] = g[i];
                    }
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// (N, K) x (K, M) -> (N, M).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", self, other));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        mul_counter::add((n * k * m) as u64);
        let out = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            mat_mul(&a.data, &b.data, n, k, m)
        };
        let (at, bt) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ad = at.inner.borrow().data.clone();
                let bd = bt.inner.borrow().data.clone();
                // dA = G B^T ; dB = A^T G
                let ga = mat_mul_nt(g, &bd, n, m, k);
                let gb = mat_mul_tn(&ad, g, k, n, m);
                at.accumulate_grad(&ga);
                bt.accumulate_grad(&gb);
            }),
        )
    }

    /// (N, K) x (M, K)^T -> (N, M).
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_t", self, other));
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        mul_counter::add((n * k * m) as u64);
        let out = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            mat_mul_nt(&a.data, &b.data, n, k, m)
        };
        let (at, bt) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul_t",
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ad = at.inner.borrow().data.clone();
                let bd = bt.inner.borrow().data.clone();
                // Y = A B^T: dA = G B ; dB = G^T A
                let ga = mat_mul(g, &bd, n, m, k);
                let gb = mat_mul_tn(g, &ad, m, n, k);
                at.accumulate_grad(&ga);
                bt.accumulate_grad(&gb);
            }),
        )
    }

    /// Add a length-M row vector to every row of an (N, M) matrix.
    pub fn add_rows(&self, row: &Tensor) -> Result<Tensor> {
        let (s, rs) = (self.shape(), row.shape());
        if s.len() != 2 || rs != vec![s[1]] {
            return Err(shape_err("add_rows", self, row));
        }
        let (n, m) = (s[0], s[1]);
        let out = {
            let a = self.inner.borrow();
            let r = row.inner.borrow();
            (0..n * m).map(|i| a.data[i] + r.data[i % m]).collect()
        };
        let (x, r) = (self.clone(), row.clone());
        Tensor::from_op(
            "add_rows",
            vec![n, m],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                x.accumulate_grad(g);
                let mut gr = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        gr[j] += g[i * m + j];
                    }
                }
                r.accumulate_grad(&gr);
            }),
        )
    }

    /// Scale each row of an (N, M) matrix by the matching row-vector entry.
    pub fn mul_rows(&self, row: &Tensor) -> Result<Tensor> {
        let (s, rs) = (self.shape(), row.shape());
        if s.len() != 2 || rs != vec![s[1]] {
            return Err(shape_err("mul_rows", self, row));
        }
        let (n, m) = (s[0], s[1]);
        let out = {
            let a = self.inner.borrow();
            let r = row.inner.borrow();
            (0..n * m).map(|i| a.data[i] * r.data[i % m]).collect()
        };
        let (x, r) = (self.clone(), row.clone());
        Tensor::from_op(
            "mul_rows",
            vec![n, m],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                let xd = x.inner.borrow().data.clone();
                let rd = r.inner.borrow().data.clone();
                let gx: Vec<f64> = (0..n * m).map(|i| g[i] * rd[i % m]).collect();
                let mut gr = vec![0.0; m];
                for i in 0..n * m {
                    gr[i % m] += g[i] * xd[i];
                }
                x.accumulate_grad(&gx);
                r.accumulate_grad(&gr);
            }),
        )
    }

    /// Scale each row i of an (N, M) matrix by col[i].
    pub fn mul_cols(&self, col: &Tensor) -> Result<Tensor> {
        let (s, cs) = (self.shape(), col.shape());
        if s.len() != 2 || cs != vec![s[0]] {
            return Err(shape_err("mul_cols", self, col));
        }
        let (n, m) = (s[0], s[1]);
        let out = {
            let a = self.inner.borrow();
            let c = col.inner.borrow();
            (0..n * m).map(|i| a.data[i] * c.data[i / m]).collect()
        };
        let (x, c) = (self.clone(), col.clone());
        Tensor::from_op(
            "mul_cols",
            vec![n, m],
            out,
            vec![self.clone(), col.clone()],
            Box::new(move |g| {
                let xd = x.inner.borrow().data.clone();
                let cd = c.inner.borrow().data.clone();
                let gx: Vec<f64> = (0..n * m).map(|i| g[i] * cd[i / m]).collect();
                let mut gc = vec![0.0; n];
                for i in 0..n * m {
                    gc[i / m] += g[i] * xd[i];
                }
                x.accumulate_grad(&gx);
                c.accumulate_grad(&gc);
            }),
        )
    }

    /// Tile a length-M vector into an (n, M) matrix.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::invalid("broadcast_rows", "expects a 1-d tensor"));
        }
        let m = s[0];
        let out = {
            let v = self.inner.borrow();
            (0..n * m).map(|i| v.data[i % m]).collect()
        };
        let x = self.clone();
        Tensor::from_op(
            "broadcast_rows",
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gv = vec![0.0; m];
                for (i, gi) in g.iter().enumerate() {
                    gv[i % m] += gi;
                }
                x.accumulate_grad(&gv);
            }),
        )
    }

    /// Concatenate 1-d tensors end to end.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "empty input list"));
        }
        for p in parts {
            if p.shape().len() != 1 {
                return Err(Error::invalid("concat", "expects 1-d tensors"));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let mut data = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            data.extend(p.inner.borrow().data.iter());
        }
        let total = data.len();
        let owned: Vec<Tensor> = parts.to_vec();
        Tensor::from_op(
            "concat",
            vec![total],
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                for p in owned.iter() {
                    let l = p.len();
                    p.accumulate_grad(&g[off..off + l]);
                    off += l;
                }
            }),
        )
    }

    /// Concatenate (N, A) and (N, B) into (N, A + B).
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", self, other));
        }
        let (n, a, b) = (sa[0], sa[1], sb[1]);
        let out = {
            let l = self.inner.borrow();
            let r = other.inner.borrow();
            let mut v = Vec::with_capacity(n * (a + b));
            for i in 0..n {
                v.extend_from_slice(&l.data[i * a..(i + 1) * a]);
                v.extend_from_slice(&r.data[i * b..(i + 1) * b]);
            }
            v
        };
        let (lt, rt) = (self.clone(), other.clone());
        Tensor::from_op(
            "concat_cols",
            vec![n, a + b],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut gl = vec![0.0; n * a];
                let mut gr = vec![0.0; n * b];
                for i in 0..n {
                    gl[i * a..(i + 1) * a].copy_from_slice(&g[i * (a + b)..i * (a + b) + a]);
                    gr[i * b..(i + 1) * b]
                        .copy_from_slice(&g[i * (a + b) + a..(i + 1) * (a + b)]);
                }
                lt.accumulate_grad(&gl);
                rt.accumulate_grad(&gr);
            }),
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        let data = self.inner.borrow().data.clone();
        let x = self.clone();
        Tensor::from_op(
            "reshape",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g| x.accumulate_grad(g)),
        )
    }

    /// Select rows of an (N, M) matrix by index (indices may repeat).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid("gather_rows", "expects a 2-d tensor"));
        }
        let (n, m) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {} out of range for {} rows", bad, n),
            ));
        }
        let out = {
            let a = self.inner.borrow();
            let mut v = Vec::with_capacity(indices.len() * m);
            for &i in indices {
                v.extend_from_slice(&a.data[i * m..(i + 1) * m]);
            }
            v
        };
        let x = self.clone();
        let idx = indices.to_vec();
        Tensor::from_op(
            "gather_rows",
            vec![indices.len(), m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..m {
                        gx[i * m + j] += g[r * m + j];
                    }
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// Sum every `group` consecutive rows of an (N*group, M) matrix -> (N, M).
    pub fn segment_sum_rows(&self, group: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(Error::invalid(
                "segment_sum_rows",
                format!("rows {:?} not divisible by group {}", s, group),
            ));
        }
        let (rows, m) = (s[0], s[1]);
        let n = rows / group;
        let out = {
            let a = self.inner.borrow();
            let mut v = vec![0.0; n * m];
            for i in 0..rows {
                let seg = i / group;
                for j in 0..m {
                    v[seg * m + j] += a.data[i * m + j];
                }
            }
            v
        };
        let x = self.clone();
        Tensor::from_op(
            "segment_sum_rows",
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; rows * m];
                for i in 0..rows {
                    let seg = i / group;
                    gx[i * m..(i + 1) * m].copy_from_slice(&g[seg * m..(seg + 1) * m]);
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// Exclusive prefix sums along each row: y[i,j] = sum_{k<j} x[i,k].
    pub fn cumsum_exclusive_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid("cumsum_exclusive_rows", "expects 2-d"));
        }
        let (n, m) = (s[0], s[1]);
        let out = {
            let a = self.inner.borrow();
            let mut v = vec![0.0; n * m];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..m {
                    v[i * m + j] = acc;
                    acc += a.data[i * m + j];
                }
            }
            v
        };
        let x = self.clone();
        Tensor::from_op(
            "cumsum_exclusive_rows",
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                // dx[i,k] = sum_{j>k} g[i,j]
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in (0..m).rev() {
                        gx[i * m + j] = acc;
                        acc += g[i * m + j];
                    }
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// Ascending sort of a 1-d tensor; gradients route back through the
    /// permutation.
    pub fn sort_1d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::invalid("sort_1d", "expects a 1-d tensor"));
        }
        let n = s[0];
        let data = self.inner.borrow().data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap());
        let out: Vec<f64> = perm.iter().map(|&i| data[i]).collect();
        let x = self.clone();
        Tensor::from_op(
            "sort_1d",
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (i, &p) in perm.iter().enumerate() {
                    gx[p] += g[i];
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// Project each pixel's channel vector of an (H, W, C) map onto `delta`
    /// (a length-C vector), producing an (H, W) map. Equivalent to a 1x1
    /// convolution with a single output channel.
    pub fn project_1x1(&self, delta: &Tensor) -> Result<Tensor> {
        let (s, ds) = (self.shape(), delta.shape());
        if s.len() != 3 || ds.len() != 1 || ds[0] != s[2] {
            return Err(shape_err("project_1x1", self, delta));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        mul_counter::add((h * w * c) as u64);
        let out = {
            let a = self.inner.borrow();
            let d = delta.inner.borrow();
            (0..h * w)
                .map(|p| {
                    (0..c)
                        .map(|k| a.data[p * c + k] * d.data[k])
                        .sum::<f64>()
                })
                .collect()
        };
        let (x, d) = (self.clone(), delta.clone());
        Tensor::from_op(
            "project_1x1",
            vec![h, w],
            out,
            vec![self.clone(), delta.clone()],
            Box::new(move |g| {
                let xd = x.inner.borrow().data.clone();
                let dd = d.inner.borrow().data.clone();
                let mut gx = vec![0.0; h * w * c];
                let mut gd = vec![0.0; c];
                for p in 0..h * w {
                    for k in 0..c {
                        gx[p * c + k] = g[p] * dd[k];
                        gd[k] += g[p] * xd[p * c + k];
                    }
                }
                x.accumulate_grad(&gx);
                d.accumulate_grad(&gd);
            }),
        )
    }

    /// Bilinear 2x upsample of an (H, W, C) map -> (2H, 2W, C).
    pub fn bilinear_upsample_2x(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::invalid("bilinear_upsample_2x", "expects (H, W, C)"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let weights = upsample_weights(h, w);
        let out = {
            let a = self.inner.borrow();
            let mut v = vec![0.0; oh * ow * c];
            for (o, taps) in weights.iter().enumerate() {
                for &(src, wgt) in taps {
                    for k in 0..c {
                        v[o * c + k] += wgt * a.data[src * c + k];
                    }
                }
            }
            v
        };
        let x = self.clone();
        Tensor::from_op(
            "bilinear_upsample_2x",
            vec![oh, ow, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c];
                for (o, taps) in weights.iter().enumerate() {
                    for &(src, wgt) in taps {
                        for k in 0..c {
                            gx[src * c + k] += wgt * g[o * c + k];
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// 2x2 block mean downsample of an (H, W, C) map with even H, W.
    pub fn downsample_2x_mean(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::invalid(
                "downsample_2x_mean",
                format!("expects even (H, W, C), got {:?}", s),
            ));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let out = {
            let a = self.inner.borrow();
            let mut v = vec![0.0; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for k in 0..c {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += a.data[((2 * oy + dy) * w + 2 * ox + dx) * c + k];
                            }
                        }
                        v[(oy * ow + ox) * c + k] = 0.25 * acc;
                    }
                }
            }
            v
        };
        let x = self.clone();
        Tensor::from_op(
            "downsample_2x_mean",
            vec![oh, ow, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for k in 0..c {
                            let gv = 0.25 * g[(oy * ow + ox) * c + k];
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    gx[((2 * oy + dy) * w + 2 * ox + dx) * c + k] += gv;
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// Uniform 3x3 window mean over an (H, W, C) map, valid padding ->
    /// (H-2, W-2, C).
    pub fn window_mean_3x3(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[0] < 3 || s[1] < 3 {
            return Err(Error::invalid(
                "window_mean_3x3",
                format!("expects (H>=3, W>=3, C), got {:?}", s),
            ));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h - 2, w - 2);
        let out = {
            let a = self.inner.borrow();
            let mut v = vec![0.0; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for k in 0..c {
                        let mut acc = 0.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += a.data[((oy + dy) * w + ox + dx) * c + k];
                            }
                        }
                        v[(oy * ow + ox) * c + k] = acc / 9.0;
                    }
                }
            }
            v
        };
        let x = self.clone();
        Tensor::from_op(
            "window_mean_3x3",
            vec![oh, ow, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for k in 0..c {
                            let gv = g[(oy * ow + ox) * c + k] / 9.0;
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    gx[((oy + dy) * w + ox + dx) * c + k] += gv;
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }),
        )
    }

    /// 3x3 valid convolution with a fixed (non-trainable) kernel laid out as
    /// [cout][cin][ky][kx]. Gradient flows to the input only.
    pub fn conv3x3_const(&self, kernel: &[f64], c_in: usize, c_out: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[2] != c_in || s[0] < 3 || s[1] < 3 {
            return Err(Error::invalid(
                "conv3x3_const",
                format!("map {:?} incompatible with c_in {}", s, c_in),
            ));
        }
        if kernel.len() != c_out * c_in * 9 {
            return Err(Error::invalid(
                "conv3x3_const",
                format!("kernel length {} != {}", kernel.len(), c_out * c_in * 9),
            ));
        }
        let (h, w) = (s[0], s[1]);
        let (oh, ow) = (h - 2, w - 2);
        mul_counter::add((oh * ow * c_out * c_in * 9) as u64);
        let kidx = move |co: usize, ci: usize, ky: usize, kx: usize| ((co * c_in + ci) * 3 + ky) * 3 + kx;
        let out = {
            let a = self.inner.borrow();
            let mut v = vec![0.0; oh * ow * c_out];
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..c_out {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += a.data[((oy + ky) * w + ox + kx) * c_in + ci]
                                        * kernel[kidx(co, ci, ky, kx)];
                                }
                            }
                        }
                        v[(oy * ow + ox) * c_out + co] = acc;
                    }
                }
            }
            v
        };
        let x = self.clone();
        let kern = kernel.to_vec();
        Tensor::from_op(
            "conv3x3_const",
            vec![oh, ow, c_out],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; h * w * c_in];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for co in 0..c_out {
                            let gv = g[(oy * ow + ox) * c_out + co];
                            for ci in 0..c_in {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        gx[((oy + ky) * w + ox + kx) * c_in + ci] +=
                                            gv * kern[kidx(co, ci, ky, kx)];
                                    }
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }),
        )
    }
}

fn mat_mul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a (n x k) times b^T where b is (m x k) -> (n x m).
fn mat_mul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[j * k + p];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// a^T (a is n x k) times b (n x m) -> (k x m).
fn mat_mul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            let orow = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// For every output pixel of a 2x bilinear upsample, the (source pixel,
/// weight) taps. align_corners = false convention: constants stay constant.
// Interleave convention: even output indices copy the source pixel, odd ones
// average the two neighbors (clamped at the edge). Source pixels therefore
// survive exactly at even indices, so coarse- and fine-scale renders share
// those rays.
fn axis_taps(o: usize, n: usize) -> [(usize, f64); 2] {
    if o % 2 == 0 {
        [(o / 2, 1.0), (o / 2, 0.0)]
    } else {
        let a = o / 2;
        let b = (a + 1).min(n - 1);
        if a == b {
            [(a, 1.0), (a, 0.0)]
        } else {
            [(a, 0.5), (b, 0.5)]
        }
    }
}

fn upsample_weights(h: usize, w: usize) -> Vec<Vec<(usize, f64)>> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let ty = axis_taps(oy, h);
        for ox in 0..ow {
            let tx = axis_taps(ox, w);
            let mut t = Vec::with_capacity(4);
            for &(sy, wy) in &ty {
                for &(sx, wx) in &tx {
                    let wgt = wy * wx;
                    if wgt > 0.0 {
                        t.push((sy * w + sx, wgt));
                    }
                }
            }
            taps.push(t);
        }
    }
    taps
}
