//! Forward op constructors and the reverse-mode rules for each.
//!
//! Every constructor validates shapes, computes values eagerly, and
//! records the node on the tape. `sign` is deliberately not an op: it
//! is applied to detached gradients only (see [`super::sign`]).

use super::{numel, Graph, Tensor, TensorError};

/// Operation kinds exposed for gradient-check reporting.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Matmul,
    Conv2d,
    AddRowVec,
    AddChanVec,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    SumAll,
    MeanAll,
    RowSum,
    RowDot,
    ScaleRows,
    Clamp,
    ConcatRows,
    SliceRows,
    PermuteRows,
    Reshape,
    MeanHw,
    KlRows,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Matmul(Tensor, Tensor),
    Conv2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    AddRowVec(Tensor, Tensor),
    AddChanVec(Tensor, Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    RowSum(Tensor),
    RowDot(Tensor, Tensor),
    ScaleRows(Tensor, Tensor),
    Clamp {
        x: Tensor,
        lo: f64,
        hi: f64,
    },
    ConcatRows(Tensor, Tensor),
    SliceRows {
        x: Tensor,
        start: usize,
        len: usize,
    },
    PermuteRows {
        x: Tensor,
        perm: Vec<usize>,
    },
    Reshape(Tensor),
    MeanHw(Tensor),
    KlRows {
        logits: Tensor,
        target: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | AddRowVec(a, b)
            | AddChanVec(a, b) | RowDot(a, b) | ScaleRows(a, b) | ConcatRows(a, b) => {
                vec![*a, *b]
            }
            Conv2d { x, w, .. } => vec![*x, *w],
            AddScalar(a) | MulScalar(a, _) | Relu(a) | Sigmoid(a) | Exp(a) | Log(a)
            | Softmax(a) | LogSoftmax(a) | SumAll(a) | MeanAll(a) | RowSum(a) | Reshape(a)
            | MeanHw(a) => vec![*a],
            Clamp { x, .. } | SliceRows { x, .. } | PermuteRows { x, .. }
            | KlRows { logits: x, .. } => vec![*x],
        }
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let rows = if shape.is_empty() { 1 } else { shape[0] };
    let row_len = if rows == 0 { 0 } else { numel(shape) / rows };
    (rows, row_len)
}

fn same_shape(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<(), TensorError> {
    if lhs != rhs {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    Ok(())
}

fn row_softmax(values: &[f64], rows: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        let row = &values[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            out[r * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            out[r * k + j] /= denom;
        }
    }
    out
}

fn row_log_softmax(values: &[f64], rows: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        let row = &values[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        for j in 0..k {
            out[r * k + j] = row[j] - lse;
        }
    }
    out
}

pub(crate) fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

impl Graph {
    fn binary_elemwise(
        &mut self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor, TensorError> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_node(shape, values, op))
    }

    fn unary_elemwise(
        &mut self,
        a: Tensor,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Tensor {
        let values: Vec<f64> = self.values(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_node(shape, values, op)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.binary_elemwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.binary_elemwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.binary_elemwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        self.binary_elemwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary_elemwise(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary_elemwise(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary_elemwise(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary_elemwise(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary_elemwise(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        self.unary_elemwise(a, f64::ln, Op::Log(a))
    }

    /// Clamp to [lo, hi]. Gradient is identity on the closed interval
    /// (boundary counts as inside) and zero outside.
    pub fn clamp(&mut self, x: Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary_elemwise(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_kernel(self.values(a), self.values(b), m, k, n);
        Ok(self.push_node(vec![m, n], values, Op::Matmul(a, b)))
    }

    /// Direct 2-D convolution. x: [n,c,h,w], w: [o,c,kh,kw].
    pub fn conv2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh > 5 || kw > 5 {
            return Err(TensorError::KernelTooLarge(kh.max(kw)));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        let (oh, ow) = conv2d_out_hw(h, wd, kh, kw, stride, pad);
        let mut out = vec![0.0; n * o * oh * ow];
        let xv = self.values(x);
        let wv = self.values(w);
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((bi * c + ic) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                    acc += xv[xi] * wv[wi];
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Ok(self.push_node(vec![n, o, oh, ow], out, Op::Conv2d { x, w, stride, pad }))
    }

    /// [m,n] + [n], broadcast over rows.
    pub fn add_rowvec(&mut self, x: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != vec![sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                lhs: sx,
                rhs: sb,
            });
        }
        let n = sx[1];
        let bv = self.values(b).to_vec();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        Ok(self.push_node(sx, values, Op::AddRowVec(x, b)))
    }

    /// [n,c,h,w] + [c], broadcast per channel.
    pub fn add_chanvec(&mut self, x: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sb != vec![sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_chanvec",
                lhs: sx,
                rhs: sb,
            });
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let bv = self.values(b).to_vec();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / hw) % c])
            .collect();
        Ok(self.push_node(sx, values, Op::AddChanVec(x, b)))
    }

    /// Row-wise softmax of a [m,k] tensor, via logsumexp with max
    /// subtraction.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: "rank-2 [rows, classes]",
                got: s,
            });
        }
        let values = row_softmax(self.values(a), s[0], s[1]);
        Ok(self.push_node(s, values, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "log_softmax",
                expected: "rank-2 [rows, classes]",
                got: s,
            });
        }
        let values = row_log_softmax(self.values(a), s[0], s[1]);
        Ok(self.push_node(s, values, Op::LogSoftmax(a)))
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let v = self.values(a).iter().sum();
        self.push_node(vec![1], vec![v], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.values(a).len().max(1);
        let v = self.values(a).iter().sum::<f64>() / n as f64;
        self.push_node(vec![1], vec![v], Op::MeanAll(a))
    }

    /// Sum over each row (trailing dims flattened) -> [rows].
    pub fn row_sum(&mut self, a: Tensor) -> Tensor {
        let (rows, rl) = rows_of(self.shape(a));
        let av = self.values(a);
        let values: Vec<f64> = (0..rows)
            .map(|r| av[r * rl..(r + 1) * rl].iter().sum())
            .collect();
        self.push_node(vec![rows], values, Op::RowSum(a))
    }

    /// Per-row dot product of two same-shape tensors -> [rows].
    pub fn row_dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        same_shape("row_dot", self.shape(a), self.shape(b))?;
        let (rows, rl) = rows_of(self.shape(a));
        let (av, bv) = (self.values(a), self.values(b));
        let values: Vec<f64> = (0..rows)
            .map(|r| {
                (0..rl)
                    .map(|j| av[r * rl + j] * bv[r * rl + j])
                    .sum()
            })
            .collect();
        Ok(self.push_node(vec![rows], values, Op::RowDot(a, b)))
    }

    /// Scale row r of `x` by `s[r]`; gradient flows to both.
    pub fn scale_rows(&mut self, x: Tensor, s: Tensor) -> Result<Tensor, TensorError> {
        let sx = self.shape(x).to_vec();
        let (rows, rl) = rows_of(&sx);
        if self.shape(s) != [rows] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: sx,
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.values(s).to_vec();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / rl])
            .collect();
        Ok(self.push_node(sx, values, Op::ScaleRows(x, s)))
    }

    /// Concatenate along dim 0; trailing dims must match.
    pub fn concat_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let mut values = self.values(a).to_vec();
        values.extend_from_slice(self.values(b));
        Ok(self.push_node(shape, values, Op::ConcatRows(a, b)))
    }

    /// Rows [start, start+len) of `x`.
    pub fn slice_rows(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let sx = self.shape(x).to_vec();
        let (rows, rl) = rows_of(&sx);
        if start + len > rows {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                expected: "slice range within rows",
                got: sx,
            });
        }
        let mut shape = sx;
        shape[0] = len;
        let values = self.values(x)[start * rl..(start + len) * rl].to_vec();
        Ok(self.push_node(shape, values, Op::SliceRows { x, start, len }))
    }

    /// Reorder rows: out[r] = x[perm[r]]. perm must be a bijection.
    pub fn permute_rows(&mut self, x: Tensor, perm: &[usize]) -> Result<Tensor, TensorError> {
        let sx = self.shape(x).to_vec();
        let (rows, rl) = rows_of(&sx);
        if perm.len() != rows {
            return Err(TensorError::BadShape {
                op: "permute_rows",
                expected: "perm length == rows",
                got: sx,
            });
        }
        let xv = self.values(x);
        let mut values = Vec::with_capacity(xv.len());
        for &p in perm {
            values.extend_from_slice(&xv[p * rl..(p + 1) * rl]);
        }
        Ok(self.push_node(
            sx,
            values,
            Op::PermuteRows {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        if numel(&shape) != self.values(x).len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "same element count",
                got: shape,
            });
        }
        let values = self.values(x).to_vec();
        Ok(self.push_node(shape, values, Op::Reshape(x)))
    }

    /// Spatial mean: [n,c,h,w] -> [n,c].
    pub fn mean_hw(&mut self, x: Tensor) -> Result<Tensor, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::BadShape {
                op: "mean_hw",
                expected: "rank-4 [n,c,h,w]",
                got: sx,
            });
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let xv = self.values(x);
        let values: Vec<f64> = (0..n * c)
            .map(|i| xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push_node(vec![n, c], values, Op::MeanHw(x)))
    }

    /// Per-example KL(target || softmax(logits)) -> [rows].
    ///
    /// Computed as sum_k t*(ln t - log_softmax(l)) with 0*ln(0) := 0.
    /// The target is a constant; gradients flow to logits only, as
    /// softmax(l)*sum(t) - t per row.
    pub fn kl_rows(&mut self, logits: Tensor, target: &[f64]) -> Result<Tensor, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || target.len() != numel(&s) {
            return Err(TensorError::BadShape {
                op: "kl_rows",
                expected: "rank-2 logits with matching target",
                got: s,
            });
        }
        let (rows, k) = (s[0], s[1]);
        let ls = row_log_softmax(self.values(logits), rows, k);
        let values: Vec<f64> = (0..rows)
            .map(|r| {
                (0..k)
                    .map(|j| {
                        let t = target[r * k + j];
                        if t == 0.0 {
                            0.0
                        } else {
                            t * (t.ln() - ls[r * k + j])
                        }
                    })
                    .sum()
            })
            .collect();
        Ok(self.push_node(
            vec![rows],
            values,
            Op::KlRows {
                logits,
                target: target.to_vec(),
            },
        ))
    }

    pub(crate) fn backprop_node(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.values(*b)).map(|(gi, &y)| gi * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.values(*a)).map(|(gi, &x)| gi * x).collect();
                self.accum(*a, &ga);
                self.accum(*b, &gb);
            }
            Op::Div(a, b) => {
                let bv = self.values(*b);
                let av = self.values(*a);
                let ga: Vec<f64> = g.iter().zip(bv).map(|(gi, &y)| gi / y).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(gi, (&x, &y))| -gi * x / (y * y))
                    .collect();
                self.accum(*a, &ga);
                self.accum(*b, &gb);
            }
            Op::AddScalar(a) => self.accum(*a, g),
            Op::MulScalar(a, c) => {
                let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accum(*a, &ga);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                // dA = g . B^T ; dB = A^T . g
                let bv = self.values(*b);
                let av = self.values(*a);
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += g[i * n + l] * bv[j * n + l];
                        }
                        ga[i * k + j] = acc;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for j in 0..k {
                    for l in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += av[i * k + j] * g[i * n + l];
                        }
                        gb[j * n + l] = acc;
                    }
                }
                self.accum(*a, &ga);
                self.accum(*b, &gb);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let (oh, ow) = conv2d_out_hw(h, wd, kh, kw, *stride, *pad);
                let xv = self.values(*x).to_vec();
                let wv = self.values(*w).to_vec();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for bi in 0..n {
                    for oc in 0..o {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[((bi * o + oc) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..c {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iy = (oy * stride + ky) as isize - *pad as isize;
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = ((bi * c + ic) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                            gx[xi] += go * wv[wi];
                                            gw[wi] += go * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(*x, &gx);
                self.accum(*w, &gw);
            }
            Op::AddRowVec(x, b) => {
                self.accum(*x, g);
                let n = self.shape(*b)[0];
                let mut gb = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % n] += gi;
                }
                self.accum(*b, &gb);
            }
            Op::AddChanVec(x, b) => {
                self.accum(*x, g);
                let sx = self.shape(*x).to_vec();
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let mut gb = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    gb[(i / hw) % c] += gi;
                }
                self.accum(*b, &gb);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.values(*a))
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accum(*a, &ga);
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[idx].values.clone();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&out)
                    .map(|(gi, &s)| gi * s * (1.0 - s))
                    .collect();
                self.accum(*a, &ga);
            }
            Op::Exp(a) => {
                let out = self.nodes[idx].values.clone();
                let ga: Vec<f64> = g.iter().zip(&out).map(|(gi, &e)| gi * e).collect();
                self.accum(*a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.values(*a))
                    .map(|(gi, &x)| gi / x)
                    .collect();
                self.accum(*a, &ga);
            }
            Op::Softmax(a) => {
                let s = self.nodes[idx].values.clone();
                let shape = self.shape(*a).to_vec();
                let (rows, k) = (shape[0], shape[1]);
                let mut ga = vec![0.0; s.len()];
                for r in 0..rows {
                    let dot: f64 = (0..k).map(|j| g[r * k + j] * s[r * k + j]).sum();
                    for j in 0..k {
                        ga[r * k + j] = s[r * k + j] * (g[r * k + j] - dot);
                    }
                }
                self.accum(*a, &ga);
            }
            Op::LogSoftmax(a) => {
                let ls = self.nodes[idx].values.clone();
                let shape = self.shape(*a).to_vec();
                let (rows, k) = (shape[0], shape[1]);
                let mut ga = vec![0.0; ls.len()];
                for r in 0..rows {
                    let gsum: f64 = (0..k).map(|j| g[r * k + j]).sum();
                    for j in 0..k {
                        ga[r * k + j] = g[r * k + j] - ls[r * k + j].exp() * gsum;
                    }
                }
                self.accum(*a, &ga);
            }
            Op::SumAll(a) => {
                let ga = vec![g[0]; self.values(*a).len()];
                self.accum(*a, &ga);
            }
            Op::MeanAll(a) => {
                let n = self.values(*a).len().max(1);
                let ga = vec![g[0] / n as f64; self.values(*a).len()];
                self.accum(*a, &ga);
            }
            Op::RowSum(a) => {
                let (rows, rl) = rows_of(self.shape(*a));
                let mut ga = vec![0.0; rows * rl];
                for r in 0..rows {
                    for j in 0..rl {
                        ga[r * rl + j] = g[r];
                    }
                }
                self.accum(*a, &ga);
            }
            Op::RowDot(a, b) => {
                let (rows, rl) = rows_of(self.shape(*a));
                let av = self.values(*a).to_vec();
                let bv = self.values(*b).to_vec();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for r in 0..rows {
                    for j in 0..rl {
                        ga[r * rl + j] = g[r] * bv[r * rl + j];
                        gb[r * rl + j] = g[r] * av[r * rl + j];
                    }
                }
                self.accum(*a, &ga);
                self.accum(*b, &gb);
            }
            Op::ScaleRows(x, s) => {
                let (rows, rl) = rows_of(self.shape(*x));
                let xv = self.values(*x).to_vec();
                let sv = self.values(*s).to_vec();
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; rows];
                for r in 0..rows {
                    for j in 0..rl {
                        gx[r * rl + j] = g[r * rl + j] * sv[r];
                        gs[r] += g[r * rl + j] * xv[r * rl + j];
                    }
                }
                self.accum(*x, &gx);
                self.accum(*s, &gs);
            }
            Op::Clamp { x, lo, hi } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.values(*x))
                    .map(|(gi, &v)| if v >= *lo && v <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accum(*x, &ga);
            }
            Op::ConcatRows(a, b) => {
                let na = self.values(*a).len();
                self.accum(*a, &g[..na]);
                let gb = g[na..].to_vec();
                self.accum(*b, &gb);
            }
            Op::SliceRows { x, start, len } => {
                let (rows, rl) = rows_of(self.shape(*x));
                let mut gx = vec![0.0; rows * rl];
                gx[start * rl..(start + len) * rl].copy_from_slice(g);
                self.accum(*x, &gx);
            }
            Op::PermuteRows { x, perm } => {
                let (_rows, rl) = rows_of(self.shape(*x));
                let mut gx = vec![0.0; self.values(*x).len()];
                for (r, &p) in perm.iter().enumerate() {
                    for j in 0..rl {
                        gx[p * rl + j] += g[r * rl + j];
                    }
                }
                self.accum(*x, &gx);
            }
            Op::Reshape(x) => self.accum(*x, g),
            Op::MeanHw(x) => {
                let sx = self.shape(*x).to_vec();
                let hw = sx[2] * sx[3];
                let mut gx = vec![0.0; self.values(*x).len()];
                for (i, gxi) in gx.iter_mut().enumerate() {
                    *gxi = g[i / hw] / hw as f64;
                }
                self.accum(*x, &gx);
            }
            Op::KlRows { logits, target } => {
                let s = self.shape(*logits).to_vec();
                let (rows, k) = (s[0], s[1]);
                let sm = row_softmax(self.values(*logits), rows, k);
                let mut gl = vec![0.0; rows * k];
                for r in 0..rows {
                    let tsum: f64 = target[r * k..(r + 1) * k].iter().sum();
                    for j in 0..k {
                        gl[r * k + j] = g[r] * (sm[r * k + j] * tsum - target[r * k + j]);
                    }
                }
                self.accum(*logits, &gl);
            }
        }
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == 0.0 {
                continue;
            }
            for l in 0..n {
                out[i * n + l] += aij * b[j * n + l];
            }
        }
    }
    out
}
