//! Primitive operations: shape rules, forward values and vector-Jacobian products.

use nalgebra::{Matrix3, Vector3};

use super::kernels::{column_moments, column_sums, fast_column_moments, gemm, pairwise_sum, MatRef};
use super::rotation::{quat_backward, quat_forward, so3_exp_backward, so3_exp_forward, svd3, svd3_backward};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest `f64` below one.
const OPEN_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvdPart {
    U,
    S,
    V,
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    /// `x[N,in]·w[in,out] + b[out]`, the same map applied to every row.
    Affine,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Multiply by a scalar node.
    ScaleBy,
    Recip,
    /// `x[N,F] + b[F]` on every row.
    AddRow,
    /// `x[N,F] * s[N]` row-wise.
    ScaleRows,
    Relu,
    Tanh,
    Sigmoid,
    Abs,
    Square,
    /// Per-column standardization over the rows: `(x − mean) / (std + eps)`.
    ContextNorm { eps: f64 },
    /// `[N,F] → [F]`; ties go to the lowest row index.
    MaxPoolRows,
    /// `x[Cin,H,W] ⊛ k[Cout,Cin,kh,kw] + b[Cout]`, valid padding.
    Conv2d { stride: (usize, usize) },
    Concat { axis: usize },
    /// Target dims; at most one `-1` is inferred.
    Reshape(Vec<isize>),
    /// Slice `[start, start+len)` along axis 0.
    Slice { start: usize, len: usize },
    Sum,
    Mean,
    /// Reduce the last axis.
    SumLast,
    /// `s·μ/(μ + s)` applied to squared residual norms `s`.
    GemanMcClure { mu: f64 },
    /// Elementwise `max(o,0) − o·y + ln(1 + e^{−|o|})`.
    BceWithLogits,
    Svd3(SvdPart),
    /// `diag(1, 1, sign det(U Vᵀ))`; carries no gradient.
    DetCorrection,
    So3Exp,
    QuatToRot,
    /// `x · [x ≥ τ]`; the selection itself is not differentiated.
    ThresholdMask { tau: f64 },
    /// Identity on the forward pass; passes no gradient back.
    StopGradient,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Affine => "affine",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::ScaleBy => "scale_by",
            Op::Recip => "recip",
            Op::AddRow => "add_row",
            Op::ScaleRows => "scale_rows",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::ContextNorm { .. } => "context_norm",
            Op::MaxPoolRows => "max_pool_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLast => "sum_last",
            Op::GemanMcClure { .. } => "geman_mcclure",
            Op::BceWithLogits => "bce_with_logits",
            Op::Svd3(_) => "svd3",
            Op::DetCorrection => "det_correction",
            Op::So3Exp => "so3_exp",
            Op::QuatToRot => "quat_to_rot",
            Op::ThresholdMask { .. } => "threshold_mask",
            Op::StopGradient => "stop_gradient",
        }
    }

    fn err(&self, detail: String) -> Error {
        Error::shape(self.name(), detail)
    }

    fn same_dims(&self, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.dims() == b.dims() {
            Ok(())
        } else {
            Err(self.err(format!("{:?} vs {:?}", a.dims(), b.dims())))
        }
    }

    fn matrix(&self, t: &Tensor) -> Result<(usize, usize)> {
        match *t.dims() {
            [r, c] => Ok((r, c)),
            ref d => Err(self.err(format!("expected a matrix, got {d:?}"))),
        }
    }

    fn scalar(&self, t: &Tensor) -> Result<f64> {
        if t.len() == 1 {
            Ok(t.item())
        } else {
            Err(self.err(format!("expected a scalar, got {:?}", t.dims())))
        }
    }

    /// Number of 3×3 blocks in a tensor whose trailing dims are `[3, 3]`.
    fn mat3_batch(&self, t: &Tensor) -> Result<usize> {
        let d = t.dims();
        if d.len() >= 2 && d[d.len() - 1] == 3 && d[d.len() - 2] == 3 {
            Ok(t.len() / 9)
        } else {
            Err(self.err(format!("expected [..., 3, 3], got {d:?}")))
        }
    }

    fn vec_batch(&self, t: &Tensor, k: usize) -> Result<usize> {
        match t.dims().last() {
            Some(&last) if last == k => Ok(t.len() / k),
            _ => Err(self.err(format!("expected [..., {k}], got {:?}", t.dims()))),
        }
    }

    pub(crate) fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let out = match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves are bound, not computed"),
            Op::Affine => {
                let (n, fin) = self.matrix(x[0])?;
                let (win, wout) = self.matrix(x[1])?;
                if fin != win || x[2].dims() != [wout] {
                    return Err(self.err(format!(
                        "x {:?}, w {:?}, b {:?}",
                        x[0].dims(),
                        x[1].dims(),
                        x[2].dims()
                    )));
                }
                let mut out = Vec::with_capacity(n * wout);
                for _ in 0..n {
                    out.extend_from_slice(x[2].data());
                }
                gemm(MatRef::new(x[0].data(), n, fin), MatRef::new(x[1].data(), win, wout), 1.0, &mut out);
                Tensor::from_parts(vec![n, wout], out)
            }
            Op::MatMul => {
                let (m, k) = self.matrix(x[0])?;
                let (k2, n) = self.matrix(x[1])?;
                if k != k2 {
                    return Err(self.err(format!("{:?} × {:?}", x[0].dims(), x[1].dims())));
                }
                let mut out = vec![0.0; m * n];
                gemm(MatRef::new(x[0].data(), m, k), MatRef::new(x[1].data(), k, n), 0.0, &mut out);
                Tensor::from_parts(vec![m, n], out)
            }
            Op::Transpose => {
                let (r, c) = self.matrix(x[0])?;
                Tensor::from_parts(vec![c, r], transpose(x[0].data(), r, c))
            }
            Op::Add | Op::Sub | Op::Mul => {
                self.same_dims(x[0], x[1])?;
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |a, b| a + b,
                    Op::Sub => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| f(a, b)).collect();
                Tensor::from_parts(x[0].dims().to_vec(), data)
            }
            Op::Scale(c) => x[0].map(|v| v * c),
            Op::ScaleBy => {
                let s = self.scalar(x[1])?;
                x[0].map(|v| v * s)
            }
            Op::Recip => x[0].map(|v| 1.0 / v),
            Op::AddRow => {
                let (_, f) = self.matrix(x[0])?;
                if x[1].dims() != [f] {
                    return Err(self.err(format!("{:?} + row {:?}", x[0].dims(), x[1].dims())));
                }
                let mut out = x[0].clone();
                for row in out.data_mut().chunks_exact_mut(f) {
                    row.iter_mut().zip(x[1].data()).for_each(|(a, b)| *a += b);
                }
                out
            }
            Op::ScaleRows => {
                let (n, f) = self.matrix(x[0])?;
                if x[1].dims() != [n] {
                    return Err(self.err(format!("{:?} scaled by {:?}", x[0].dims(), x[1].dims())));
                }
                let mut out = x[0].clone();
                for (row, s) in out.data_mut().chunks_exact_mut(f.max(1)).zip(x[1].data()) {
                    row.iter_mut().for_each(|a| *a *= s);
                }
                out
            }
            Op::Relu => x[0].map(|v| v.max(0.0)),
            Op::StopGradient => x[0].clone(),
            // Rounded tanh hits ±1.0 past |x| ≈ 19; keep the range open.
            Op::Tanh => x[0].map(|v| v.tanh().clamp(-OPEN_ONE, OPEN_ONE)),
            Op::Sigmoid => x[0].map(sigmoid),
            Op::Abs => x[0].map(f64::abs),
            Op::Square => x[0].map(|v| v * v),
            Op::ContextNorm { eps } => {
                let (n, f) = self.matrix(x[0])?;
                if n == 0 {
                    return Err(self.err("empty set".into()));
                }
                let (mean, std) = column_moments(x[0].data(), n, f);
                let inv: Vec<f64> = std.iter().map(|s| 1.0 / (s + eps)).collect();
                let mut out = x[0].clone();
                for row in out.data_mut().chunks_exact_mut(f) {
                    for ((v, m), i) in row.iter_mut().zip(&mean).zip(&inv) {
                        *v = (*v - m) * i;
                    }
                }
                out
            }
            Op::MaxPoolRows => {
                let (n, f) = self.matrix(x[0])?;
                if n == 0 {
                    return Err(self.err("empty set".into()));
                }
                let (vals, _) = argmax_rows(x[0].data(), n, f);
                Tensor::from_parts(vec![f], vals)
            }
            Op::Conv2d { stride } => self.conv_forward(x[0], x[1], x[2], *stride)?,
            Op::Concat { axis } => self.concat_forward(x, *axis)?,
            Op::Reshape(spec) => {
                let dims = resolve_dims(spec, x[0].len()).ok_or_else(|| {
                    self.err(format!("{:?} into {spec:?}", x[0].dims()))
                })?;
                x[0].clone().reshaped(dims)?
            }
            Op::Slice { start, len } => {
                let d = x[0].dims();
                if d.is_empty() || start + len > d[0] {
                    return Err(self.err(format!("[{start}, {}) of {d:?}", start + len)));
                }
                let inner: usize = d[1..].iter().product();
                let mut dims = d.to_vec();
                dims[0] = *len;
                Tensor::from_parts(dims, x[0].data()[start * inner..(start + len) * inner].to_vec())
            }
            Op::Sum => Tensor::scalar(pairwise_sum(x[0].data())),
            Op::Mean => {
                if x[0].is_empty() {
                    return Err(self.err("mean of empty tensor".into()));
                }
                Tensor::scalar(pairwise_sum(x[0].data()) / x[0].len() as f64)
            }
            Op::SumLast => {
                let d = x[0].dims();
                let Some((&k, lead)) = d.split_last() else {
                    return Err(self.err("scalar input".into()));
                };
                let data = x[0].data().chunks_exact(k.max(1)).map(|c| c.iter().sum()).collect();
                Tensor::from_parts(lead.to_vec(), data)
            }
            Op::GemanMcClure { mu } => x[0].map(|s| s * mu / (mu + s)),
            Op::BceWithLogits => {
                self.same_dims(x[0], x[1])?;
                let data = x[0]
                    .data()
                    .iter()
                    .zip(x[1].data())
                    .map(|(&o, &y)| o.max(0.0) - o * y + (-o.abs()).exp().ln_1p())
                    .collect();
                Tensor::from_parts(x[0].dims().to_vec(), data)
            }
            Op::Svd3(part) => {
                let b = self.mat3_batch(x[0])?;
                let lead = &x[0].dims()[..x[0].rank() - 2];
                let mut data = Vec::new();
                for k in 0..b {
                    let d = svd3(&mat3(x[0].data(), k));
                    match part {
                        SvdPart::U => push_mat3(&mut data, &d.u),
                        SvdPart::V => push_mat3(&mut data, &d.v),
                        SvdPart::S => data.extend(d.s.iter()),
                    }
                }
                let mut dims = lead.to_vec();
                match part {
                    SvdPart::S => dims.push(3),
                    _ => dims.extend([3, 3]),
                }
                Tensor::from_parts(dims, data)
            }
            Op::DetCorrection => {
                self.same_dims(x[0], x[1])?;
                let b = self.mat3_batch(x[0])?;
                let mut data = Vec::with_capacity(9 * b);
                for k in 0..b {
                    let det = (mat3(x[0].data(), k) * mat3(x[1].data(), k).transpose()).determinant();
                    let d = if det < 0.0 { -1.0 } else { 1.0 };
                    push_mat3(&mut data, &Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)));
                }
                Tensor::from_parts(x[0].dims().to_vec(), data)
            }
            Op::So3Exp => {
                let b = self.vec_batch(x[0], 3)?;
                let mut data = Vec::with_capacity(9 * b);
                for w in x[0].data().chunks_exact(3) {
                    push_mat3(&mut data, &so3_exp_forward(&Vector3::from_column_slice(w)));
                }
                let mut dims = x[0].dims()[..x[0].rank() - 1].to_vec();
                dims.extend([3, 3]);
                Tensor::from_parts(dims, data)
            }
            Op::QuatToRot => {
                let b = self.vec_batch(x[0], 4)?;
                let mut data = Vec::with_capacity(9 * b);
                for q in x[0].data().chunks_exact(4) {
                    let q = [q[0], q[1], q[2], q[3]];
                    let r = quat_forward(&q).ok_or_else(|| {
                        Error::DegenerateQuaternion(q.iter().map(|v| v * v).sum::<f64>().sqrt())
                    })?;
                    push_mat3(&mut data, &r);
                }
                let mut dims = x[0].dims()[..x[0].rank() - 1].to_vec();
                dims.extend([3, 3]);
                Tensor::from_parts(dims, data)
            }
            Op::ThresholdMask { tau } => x[0].map(|v| if v >= *tau { v } else { 0.0 }),
        };
        Ok(out)
    }

    /// Vector-Jacobian products for every input, `None` where no gradient flows.
    pub(crate) fn backward(&self, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::Affine => {
                let (n, fin) = (x[0].dims()[0], x[0].dims()[1]);
                let fout = x[1].dims()[1];
                let gm = MatRef::new(g.data(), n, fout);
                let mut dx = vec![0.0; n * fin];
                gemm(gm, MatRef::new(x[1].data(), fin, fout).t(), 0.0, &mut dx);
                let mut dw = vec![0.0; fin * fout];
                gemm(MatRef::new(x[0].data(), n, fin).t(), gm, 0.0, &mut dw);
                let db = column_sums(g.data(), fout);
                vec![
                    Some(Tensor::from_parts(vec![n, fin], dx)),
                    Some(Tensor::from_parts(vec![fin, fout], dw)),
                    Some(Tensor::from_parts(vec![fout], db)),
                ]
            }
            Op::MatMul => {
                let (m, k) = (x[0].dims()[0], x[0].dims()[1]);
                let n = x[1].dims()[1];
                let gm = MatRef::new(g.data(), m, n);
                let mut da = vec![0.0; m * k];
                gemm(gm, MatRef::new(x[1].data(), k, n).t(), 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(MatRef::new(x[0].data(), m, k).t(), gm, 0.0, &mut db);
                vec![
                    Some(Tensor::from_parts(vec![m, k], da)),
                    Some(Tensor::from_parts(vec![k, n], db)),
                ]
            }
            Op::Transpose => {
                let (r, c) = (x[0].dims()[0], x[0].dims()[1]);
                vec![Some(Tensor::from_parts(vec![r, c], transpose(g.data(), c, r)))]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![Some(zip(g, x[1], |a, b| a * b)), Some(zip(g, x[0], |a, b| a * b))],
            Op::Scale(c) => vec![Some(g.map(|v| v * c))],
            Op::ScaleBy => {
                let s = x[1].item();
                let ds: f64 = g.data().iter().zip(x[0].data()).map(|(a, b)| a * b).sum();
                vec![Some(g.map(|v| v * s)), Some(Tensor::from_parts(x[1].dims().to_vec(), vec![ds]))]
            }
            Op::Recip => vec![Some(zip(g, out, |a, y| -a * y * y))],
            Op::AddRow => {
                let f = x[0].dims()[1];
                vec![Some(g.clone()), Some(Tensor::from_parts(vec![f], column_sums(g.data(), f)))]
            }
            Op::ScaleRows => {
                let f = x[0].dims()[1].max(1);
                let mut dx = g.clone();
                let mut ds = Vec::with_capacity(x[1].len());
                for ((grow, xrow), s) in dx
                    .data_mut()
                    .chunks_exact_mut(f)
                    .zip(x[0].data().chunks_exact(f))
                    .zip(x[1].data())
                {
                    ds.push(grow.iter().zip(xrow).map(|(a, b)| a * b).sum());
                    grow.iter_mut().for_each(|a| *a *= s);
                }
                vec![Some(dx), Some(Tensor::from_parts(x[1].dims().to_vec(), ds))]
            }
            Op::Relu => vec![Some(zip(g, x[0], |a, v| if v > 0.0 { a } else { 0.0 }))],
            Op::Tanh => vec![Some(zip(g, out, |a, y| a * (1.0 - y * y)))],
            Op::Sigmoid => vec![Some(zip(g, out, |a, y| a * y * (1.0 - y)))],
            Op::Abs => vec![Some(zip(g, x[0], |a, v| {
                if v > 0.0 {
                    a
                } else if v < 0.0 {
                    -a
                } else {
                    0.0
                }
            }))],
            Op::Square => vec![Some(zip(g, x[0], |a, v| 2.0 * a * v))],
            Op::ContextNorm { eps } => {
                // With y = (x − m)/(s + ε):
                // ∂L/∂x = (g − mean g)/(s + ε) − y · Σ(g ⊙ y) / (N s).
                let (n, f) = (x[0].dims()[0], x[0].dims()[1]);
                let (_, std) = fast_column_moments(x[0].data(), n, f);
                let mut gsum = vec![0.0; f];
                let mut gy = vec![0.0; f];
                for (grow, yrow) in g.data().chunks_exact(f).zip(out.data().chunks_exact(f)) {
                    for j in 0..f {
                        gsum[j] += grow[j];
                        gy[j] += grow[j] * yrow[j];
                    }
                }
                let nf = n as f64;
                let gmean: Vec<f64> = gsum.iter().map(|v| v / nf).collect();
                let inv: Vec<f64> = std.iter().map(|s| 1.0 / (s + eps)).collect();
                let coef: Vec<f64> = std
                    .iter()
                    .zip(&gy)
                    .map(|(&s, &a)| if s > 0.0 { a / (nf * s) } else { 0.0 })
                    .collect();
                let mut dx = vec![0.0; n * f];
                for ((drow, grow), yrow) in dx
                    .chunks_exact_mut(f)
                    .zip(g.data().chunks_exact(f))
                    .zip(out.data().chunks_exact(f))
                {
                    for j in 0..f {
                        drow[j] = (grow[j] - gmean[j]) * inv[j] - yrow[j] * coef[j];
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, f], dx))]
            }
            Op::MaxPoolRows => {
                let (n, f) = (x[0].dims()[0], x[0].dims()[1]);
                let (_, arg) = argmax_rows(x[0].data(), n, f);
                let mut dx = vec![0.0; n * f];
                for (j, &i) in arg.iter().enumerate() {
                    dx[i * f + j] = g.data()[j];
                }
                vec![Some(Tensor::from_parts(vec![n, f], dx))]
            }
            Op::Conv2d { stride } => conv_backward(x[0], x[1], g, *stride),
            Op::Concat { axis } => {
                let outer: usize = out.dims()[..*axis].iter().product();
                let inner: usize = out.dims()[axis + 1..].iter().product();
                let total = out.dims()[*axis] * inner;
                let mut offset = 0;
                x.iter()
                    .map(|t| {
                        let width = t.dims()[*axis] * inner;
                        let mut data = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let base = o * total + offset;
                            data.extend_from_slice(&g.data()[base..base + width]);
                        }
                        offset += width;
                        Some(Tensor::from_parts(t.dims().to_vec(), data))
                    })
                    .collect()
            }
            Op::Reshape(_) => vec![Some(Tensor::from_parts(x[0].dims().to_vec(), g.data().to_vec()))],
            Op::Slice { start, len } => {
                let inner: usize = x[0].dims()[1..].iter().product();
                let mut dx = Tensor::zeros(x[0].dims());
                dx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(Tensor::filled(x[0].dims(), g.item()))],
            Op::Mean => vec![Some(Tensor::filled(x[0].dims(), g.item() / x[0].len() as f64))],
            Op::SumLast => {
                let k = *x[0].dims().last().unwrap();
                let mut dx = Vec::with_capacity(x[0].len());
                for &v in g.data() {
                    dx.extend(std::iter::repeat(v).take(k));
                }
                vec![Some(Tensor::from_parts(x[0].dims().to_vec(), dx))]
            }
            Op::GemanMcClure { mu } => {
                vec![Some(zip(g, x[0], |a, s| a * mu * mu / ((mu + s) * (mu + s))))]
            }
            Op::BceWithLogits => vec![
                Some(zip(g, &zip(x[0], x[1], |o, y| sigmoid(o) - y), |a, d| a * d)),
                Some(zip(g, x[0], |a, o| -a * o)),
            ],
            Op::Svd3(part) => {
                let b = x[0].len() / 9;
                let mut dx = Vec::with_capacity(9 * b);
                for k in 0..b {
                    let d = svd3(&mat3(x[0].data(), k));
                    let (mut du, mut ds, mut dv) = (Matrix3::zeros(), Vector3::zeros(), Matrix3::zeros());
                    match part {
                        SvdPart::U => du = mat3(g.data(), k),
                        SvdPart::V => dv = mat3(g.data(), k),
                        SvdPart::S => ds = Vector3::from_column_slice(&g.data()[3 * k..3 * k + 3]),
                    }
                    push_mat3(&mut dx, &svd3_backward(&d, &du, &ds, &dv));
                }
                vec![Some(Tensor::from_parts(x[0].dims().to_vec(), dx))]
            }
            Op::DetCorrection => vec![None, None],
            Op::StopGradient => vec![None],
            Op::So3Exp => {
                let mut dx = Vec::with_capacity(x[0].len());
                for (k, w) in x[0].data().chunks_exact(3).enumerate() {
                    let gw = so3_exp_backward(&Vector3::from_column_slice(w), &mat3(g.data(), k));
                    dx.extend(gw.iter());
                }
                vec![Some(Tensor::from_parts(x[0].dims().to_vec(), dx))]
            }
            Op::QuatToRot => {
                let mut dx = Vec::with_capacity(x[0].len());
                for (k, q) in x[0].data().chunks_exact(4).enumerate() {
                    dx.extend(quat_backward(&[q[0], q[1], q[2], q[3]], &mat3(g.data(), k)));
                }
                vec![Some(Tensor::from_parts(x[0].dims().to_vec(), dx))]
            }
            Op::ThresholdMask { tau } => vec![Some(zip(g, x[0], |a, v| if v >= *tau { a } else { 0.0 }))],
        }
    }

    fn conv_forward(&self, x: &Tensor, k: &Tensor, b: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
        let (&[cin, h, w], &[cout, kcin, kh, kw]) = (x.dims(), k.dims()) else {
            return Err(self.err(format!("x {:?}, kernel {:?}", x.dims(), k.dims())));
        };
        if cin != kcin || b.dims() != [cout] || kh > h || kw > w || stride.0 == 0 || stride.1 == 0 {
            return Err(self.err(format!(
                "x {:?}, kernel {:?}, bias {:?}, stride {stride:?}",
                x.dims(),
                k.dims(),
                b.dims()
            )));
        }
        let (ho, wo) = ((h - kh) / stride.0 + 1, (w - kw) / stride.1 + 1);
        let mut out = vec![0.0; cout * ho * wo];
        let (xd, kd) = (x.data(), k.data());
        for o in 0..cout {
            for r in 0..ho {
                for c in 0..wo {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        for dr in 0..kh {
                            let xrow = (i * h + r * stride.0 + dr) * w + c * stride.1;
                            let krow = ((o * cin + i) * kh + dr) * kw;
                            for dc in 0..kw {
                                acc += xd[xrow + dc] * kd[krow + dc];
                            }
                        }
                    }
                    out[(o * ho + r) * wo + c] = acc;
                }
            }
        }
        Ok(Tensor::from_parts(vec![cout, ho, wo], out))
    }

    fn concat_forward(&self, x: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = x.first().ok_or_else(|| self.err("no inputs".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(self.err(format!("axis {axis} for rank {rank}")));
        }
        for t in x {
            let ok = t.rank() == rank
                && t.dims()[..axis] == first.dims()[..axis]
                && t.dims()[axis + 1..] == first.dims()[axis + 1..];
            if !ok {
                return Err(self.err(format!("{:?} vs {:?} on axis {axis}", t.dims(), first.dims())));
            }
        }
        let outer: usize = first.dims()[..axis].iter().product();
        let inner: usize = first.dims()[axis + 1..].iter().product();
        let mut dims = first.dims().to_vec();
        dims[axis] = x.iter().map(|t| t.dims()[axis]).sum();
        let mut data = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for t in x {
                let width = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data()[o * width..(o + 1) * width]);
            }
        }
        Ok(Tensor::from_parts(dims, data))
    }
}

fn conv_backward(x: &Tensor, k: &Tensor, g: &Tensor, stride: (usize, usize)) -> Vec<Option<Tensor>> {
    let (cin, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (cout, kh, kw) = (k.dims()[0], k.dims()[2], k.dims()[3]);
    let (ho, wo) = (g.dims()[1], g.dims()[2]);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        for r in 0..ho {
            for c in 0..wo {
                let go = gd[(o * ho + r) * wo + c];
                if go == 0.0 {
                    continue;
                }
                db[o] += go;
                for i in 0..cin {
                    for dr in 0..kh {
                        let xrow = (i * h + r * stride.0 + dr) * w + c * stride.1;
                        let krow = ((o * cin + i) * kh + dr) * kw;
                        for dc in 0..kw {
                            dx[xrow + dc] += go * kd[krow + dc];
                            dk[krow + dc] += go * xd[xrow + dc];
                        }
                    }
                }
            }
        }
    }
    vec![
        Some(Tensor::from_parts(x.dims().to_vec(), dx)),
        Some(Tensor::from_parts(k.dims().to_vec(), dk)),
        Some(Tensor::from_parts(vec![cout], db)),
    ]
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.dims().to_vec(), data)
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// Column maxima and the first row attaining each.
fn argmax_rows(x: &[f64], n: usize, f: usize) -> (Vec<f64>, Vec<usize>) {
    let mut vals = x[..f].to_vec();
    let mut arg = vec![0usize; f];
    for i in 1..n {
        let row = &x[i * f..(i + 1) * f];
        for j in 0..f {
            if row[j] > vals[j] {
                vals[j] = row[j];
                arg[j] = i;
            }
        }
    }
    (vals, arg)
}

fn resolve_dims(spec: &[isize], len: usize) -> Option<Vec<usize>> {
    let known: usize = spec.iter().filter(|&&d| d >= 0).map(|&d| d as usize).product();
    let wild = spec.iter().filter(|&&d| d < 0).count();
    match wild {
        0 => (known == len).then(|| spec.iter().map(|&d| d as usize).collect()),
        1 if known > 0 && len % known == 0 => Some(
            spec.iter()
                .map(|&d| if d < 0 { len / known } else { d as usize })
                .collect(),
        ),
        _ => None,
    }
}

fn mat3(data: &[f64], k: usize) -> Matrix3<f64> {
    Matrix3::from_row_slice(&data[9 * k..9 * k + 9])
}

fn push_mat3(out: &mut Vec<f64>, m: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            out.push(m[(i, j)]);
        }
    }
}
