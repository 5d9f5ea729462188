use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Node, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside the logarithms of the KL divergence.
pub const KL_FLOOR: f64 = 1e-9;
const NORMALIZATION_TOL: f64 = 1e-5;

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
        rows: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } | Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { p, q, .. } => vec![*p, *q],
        }
    }

    pub(crate) fn backward<E: Element>(
        &self,
        nodes: &[Node<E>],
        out: &Tensor<E>,
        dy: &[f64],
        emit: &mut dyn FnMut(Var, &[f64]),
    ) {
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    // dA[i,p] = sum_j dy[i,j] b[p,j]
                    let mut da = vec![0.0; m * k];
                    let bd = bv.data();
                    for i in 0..m {
                        let row = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += row[j] * brow[j].to_f64();
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    emit(*a, &da);
                }
                if needs(*b) {
                    // dB[p,j] = sum_i a[i,p] dy[i,j]
                    let mut db = vec![0.0; k * n];
                    let ad = av.data();
                    for i in 0..m {
                        let row = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p].to_f64();
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * row[j];
                            }
                        }
                    }
                    emit(*b, &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                emit(*x, &dx);
            }
            Op::Add(a, b) => {
                emit(*a, dy);
                emit(*b, dy);
            }
            Op::Sub(a, b) => {
                emit(*a, dy);
                let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                emit(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let da: Vec<f64> = dy.iter().zip(bv).map(|(g, y)| g * y.to_f64()).collect();
                    emit(*a, &da);
                }
                if needs(*b) {
                    let db: Vec<f64> = dy.iter().zip(av).map(|(g, x)| g * x.to_f64()).collect();
                    emit(*b, &db);
                }
            }
            Op::AddBias(x, b) => {
                emit(*x, dy);
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for (i, g) in dy.iter().enumerate() {
                    db[i % n] += g;
                }
                emit(*b, &db);
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = dy.iter().map(|g| g * s).collect();
                emit(*x, &dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| dy[at(j)] * y[at(j)].to_f64()).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)].to_f64() * (dy[at(j)] - dot);
                        }
                    }
                }
                emit(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = val(*gain).data();
                let d = g.len();
                let rows = xhat.len() / d;
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += dy[r * d + j] * xhat[r * d + j];
                            db[j] += dy[r * d + j];
                        }
                    }
                    emit(*gain, &dg);
                    emit(*bias, &db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = dy[r * d + j] * g[j].to_f64();
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = dy[r * d + j] * g[j].to_f64();
                            dx[r * d + j] =
                                rstd[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                    emit(*x, &dx);
                }
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = val(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(v, g)| g * gelu_grad(v.to_f64()))
                    .collect();
                emit(*x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(t, g)| {
                        let t = t.to_f64();
                        g * (1.0 - t * t)
                    })
                    .collect();
                emit(*x, &dx);
            }
            Op::GatherRows { table, indices } => {
                let tv = val(*table);
                let width = tv.numel() / tv.shape()[0];
                let mut dt = vec![0.0; tv.numel()];
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..width {
                        dt[ix * width + j] += dy[r * width + j];
                    }
                }
                emit(*table, &dt);
            }
            Op::Gather { table, indices } => {
                let mut dt = vec![0.0; val(*table).numel()];
                for (g, &ix) in dy.iter().zip(indices) {
                    dt[ix] += g;
                }
                emit(*table, &dt);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = val(*x).numel();
                    emit(*x, &dy[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(xs) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut col = 0;
                for x in xs {
                    let c = val(*x).shape()[1];
                    let mut dx = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dx.extend_from_slice(&dy[r * total + col..r * total + col + c]);
                    }
                    emit(*x, &dx);
                    col += c;
                }
            }
            Op::Reshape(x) => emit(*x, dy),
            Op::Sum(x) => {
                let dx = vec![dy[0]; val(*x).numel()];
                emit(*x, &dx);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let dx = vec![dy[0] / n as f64; n];
                emit(*x, &dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = dy[0] / b as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] -= scale;
                }
                emit(*logits, &dx);
            }
            Op::KlDiv { p, q, rows } => {
                let (pv, qv) = (val(*p).data(), val(*q).data());
                let scale = dy[0] / *rows as f64;
                if needs(*p) {
                    let dp: Vec<f64> = pv
                        .iter()
                        .zip(qv)
                        .map(|(pi, qi)| {
                            let (pi, qi) = (pi.to_f64(), qi.to_f64());
                            if pi <= 0.0 {
                                return 0.0;
                            }
                            let unit = if pi >= KL_FLOOR { 1.0 } else { 0.0 };
                            scale
                                * (libm::log(pi.max(KL_FLOOR)) - libm::log(qi.max(KL_FLOOR)) + unit)
                        })
                        .collect();
                    emit(*p, &dp);
                }
                if needs(*q) {
                    let dq: Vec<f64> = pv
                        .iter()
                        .zip(qv)
                        .map(|(pi, qi)| {
                            let (pi, qi) = (pi.to_f64(), qi.to_f64());
                            if qi >= KL_FLOOR {
                                -scale * pi / qi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    emit(*q, &dq);
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Numerically stable softmax of one row, in `f64`.
pub fn softmax_values(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax of one row, in `f64`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
    row.iter().map(|&v| v - lse).collect()
}

fn map_values<E: Element>(t: &Tensor<E>, f: impl Fn(f64) -> f64) -> Tensor<E> {
    Tensor::from_parts(
        t.shape().to_vec(),
        t.data().iter().map(|&v| E::from_f64(f(v.to_f64()))).collect(),
    )
}

fn zip_values<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(f64, f64) -> f64) -> Tensor<E> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| E::from_f64(f(x.to_f64(), y.to_f64())))
            .collect(),
    )
}

impl<E: Element> Tape<E> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut acc = vec![0.0f64; n];
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for p in 0..k {
                let aip = ad[i * k + p].to_f64();
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in acc.iter_mut().zip(brow) {
                    *o += aip * bv.to_f64();
                }
            }
            out.extend(acc.iter().map(|&v| E::from_f64(v)));
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", x)?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(d[i * c + j]);
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_values(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_values(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_values(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `[n]` bias along the trailing axis of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let xt = self.value(x);
        let out = Tensor::from_parts(
            xt.shape().to_vec(),
            xt.data()
                .iter()
                .enumerate()
                .map(|(i, v)| E::from_f64(v.to_f64() + b[i % n].to_f64()))
                .collect(),
        );
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = map_values(self.value(x), |v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    /// Softmax along `axis`, stabilised by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![E::default(); d.len()];
        let mut row = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = d[(o * n + j) * inner + i].to_f64();
                }
                for (j, p) in softmax_values(&row).into_iter().enumerate() {
                    out[(o * n + j) * inner + i] = E::from_f64(p);
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, "softmax")
    }

    /// Layer normalisation over the trailing axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.to_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j].to_f64() - mean) * rs;
                xhat[r * d + j] = h;
                out.push(E::from_f64(h * g[j].to_f64() + b[j].to_f64()));
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = map_values(self.value(x), gelu);
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = map_values(self.value(x), libm::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    /// Selects rows of `table` (viewed as `[rows, ...]`); rows may repeat.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let rows = *shape.first().unwrap_or(&1);
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let width = self.value(table).numel() / rows;
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        out_shape[0] = indices.len();
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Element gather from the flattened `table` into a tensor of `shape`.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(table).numel();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather", format!("{} indices for {shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} of {n}")));
        }
        let d = self.value(table).data();
        let out = indices.iter().map(|&i| d[i]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather { table, indices }, "gather")
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat_rows inputs"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            if self.shape(x)[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(x)),
                ));
            }
            rows += self.shape(x)[0];
            out.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::from_parts(shape, out), Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Concatenates matrices along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat_cols inputs"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let (rows, _) = self.rank2("concat_cols", first)?;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.rank2("concat_cols", x)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {rows}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[r * c..(r + 1) * c]);
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(xs.to_vec()),
            "concat_cols",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value.with_requires_grad(false), Op::Reshape(x), "reshape")
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("stack inputs"))?;
        let inner = self.shape(first).to_vec();
        let cat = self.concat_rows(xs)?;
        let mut shape = vec![xs.len()];
        shape.extend(inner);
        self.reshape(cat, &shape)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.to_f64()).sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean negative log-probability of the labelled class per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.rank2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let d = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        let mut row = vec![0.0; c];
        for (i, &y) in labels.iter().enumerate() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = d[i * c + j].to_f64();
            }
            let lp = log_softmax(&row);
            loss -= lp[y];
            probs.extend(lp.iter().map(|&l| libm::exp(l)));
        }
        loss /= b as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Mean over leading axes of `sum p * ln(p / q)` along the last axis.
    ///
    /// Both logarithm arguments are floored at [`KL_FLOOR`]; terms with
    /// `p == 0` contribute zero.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let n = *self.shape(p).last().ok_or_else(|| Error::shape("kl_divergence", "scalar input"))?;
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        let rows = pv.len() / n;
        for (which, data) in [pv, qv].into_iter().enumerate() {
            for r in 0..rows {
                let s: f64 = data[r * n..(r + 1) * n].iter().map(|v| v.to_f64()).sum();
                if (s - 1.0).abs() > NORMALIZATION_TOL || data[r * n..(r + 1) * n].iter().any(|v| v.to_f64() < 0.0) {
                    return Err(Error::NotNormalized {
                        op: if which == 0 { "kl_divergence(p)" } else { "kl_divergence(q)" },
                        row: r,
                        sum: s,
                    });
                }
            }
        }
        let mut total = 0.0;
        for (pi, qi) in pv.iter().zip(qv) {
            let (pi, qi) = (pi.to_f64(), qi.to_f64());
            if pi > 0.0 {
                total += pi * (libm::log(pi.max(KL_FLOOR)) - libm::log(qi.max(KL_FLOOR)));
            }
        }
        self.push(
            Tensor::scalar(total / rows as f64),
            Op::KlDiv { p, q, rows },
            "kl_divergence",
        )
    }
}
