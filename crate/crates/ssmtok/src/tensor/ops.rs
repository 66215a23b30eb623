//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes the forward value, checks finiteness,
//! and (when the tape is recording and an input requires grad) pushes a
//! backward record onto the tape. Backward records capture cheap `Tensor`
//! handles plus whatever forward intermediates the gradient needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gemm, grad_or_zero, op_output, Result, Tape, Tensor, TensorError};
use crate::Real;

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Split a shape into (leading rows, last extent).
fn rows_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last, last)
}

fn track(tape: &Tape, inputs: &[&Tensor]) -> bool {
    tape.is_active() && inputs.iter().any(|t| t.requires_grad())
}

/// Matrix product over the last axis: `a` is (..., k), `b` is (k, n), the
/// result is (..., n). Leading axes of `a` are treated as batched rows.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a_shape = a.shape();
    let b_shape = b.shape();
    if b_shape.len() != 2 {
        return Err(shape_err("matmul", format!("rhs must be 2-d, got {b_shape:?}")));
    }
    let (rows, k) = rows_last(&a_shape);
    let (bk, n) = (b_shape[0], b_shape[1]);
    if k != bk {
        return Err(shape_err(
            "matmul",
            format!("inner extents disagree: {a_shape:?} vs {b_shape:?}"),
        ));
    }
    let mut out = vec![0.0; rows * n];
    gemm::gemm_nn(rows, k, n, &a.data(), &b.data(), &mut out);
    let mut out_shape = a_shape.clone();
    *out_shape.last_mut().unwrap() = n;
    let y = op_output("matmul", out_shape, out, track(tape, &[a, b]))?;
    if track(tape, &[a, b]) {
        let (a, b, y) = (a.clone(), b.clone(), y.clone());
        tape.record("matmul", move || {
            let dy = grad_or_zero(&y);
            let (da, db) = {
                let ad = a.data();
                let bd = b.data();
                let mut da = vec![0.0; rows * k];
                gemm::gemm_nt(rows, n, k, &dy, &bd, &mut da);
                let mut db = vec![0.0; k * n];
                gemm::gemm_tn(k, rows, n, &ad, &dy, &mut db);
                (da, db)
            };
            if a.requires_grad() {
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                b.accumulate_grad(&db);
            }
        });
    }
    Ok(y)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let out: Vec<Real> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let y = op_output("add", a.shape(), out, track(tape, &[a, b]))?;
    if track(tape, &[a, b]) {
        let (a, b, y) = (a.clone(), b.clone(), y.clone());
        tape.record("add", move || {
            let dy = grad_or_zero(&y);
            if a.requires_grad() {
                a.accumulate_grad(&dy);
            }
            if b.requires_grad() {
                b.accumulate_grad(&dy);
            }
        });
    }
    Ok(y)
}

/// Broadcast-add a vector over the last axis: x (..., d) + b (d).
pub fn add_bias(tape: &Tape, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let x_shape = x.shape();
    let (rows, d) = rows_last(&x_shape);
    if bias.shape() != [d] {
        return Err(shape_err(
            "add_bias",
            format!("bias {:?} does not match last extent of {:?}", bias.shape(), x_shape),
        ));
    }
    let bd = bias.to_vec();
    let out: Vec<Real> = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&bd).map(|(v, b)| v + b).collect::<Vec<_>>())
        .collect();
    let y = op_output("add_bias", x_shape, out, track(tape, &[x, bias]))?;
    if track(tape, &[x, bias]) {
        let (x, bias, y) = (x.clone(), bias.clone(), y.clone());
        tape.record("add_bias", move || {
            let dy = grad_or_zero(&y);
            if x.requires_grad() {
                x.accumulate_grad(&dy);
            }
            if bias.requires_grad() {
                let mut db = vec![0.0; d];
                for row in 0..rows {
                    for j in 0..d {
                        db[j] += dy[row * d + j];
                    }
                }
                bias.accumulate_grad(&db);
            }
        });
    }
    Ok(y)
}

/// Elementwise product of two same-shape tensors.
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "mul",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let out: Vec<Real> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let y = op_output("mul", a.shape(), out, track(tape, &[a, b]))?;
    if track(tape, &[a, b]) {
        let (a, b, y) = (a.clone(), b.clone(), y.clone());
        tape.record("mul", move || {
            let dy = grad_or_zero(&y);
            let (da, db) = {
                let ad = a.data();
                let bd = b.data();
                let da: Vec<Real> = dy.iter().zip(bd.iter()).map(|(g, v)| g * v).collect();
                let db: Vec<Real> = dy.iter().zip(ad.iter()).map(|(g, v)| g * v).collect();
                (da, db)
            };
            if a.requires_grad() {
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                b.accumulate_grad(&db);
            }
        });
    }
    Ok(y)
}

/// Broadcast-multiply a vector over the last axis: x (..., d) ⊙ s (d).
pub fn scale_channels(tape: &Tape, x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let x_shape = x.shape();
    let (rows, d) = rows_last(&x_shape);
    if s.shape() != [d] {
        return Err(shape_err(
            "scale_channels",
            format!("scale {:?} does not match last extent of {:?}", s.shape(), x_shape),
        ));
    }
    let sd = s.to_vec();
    let out: Vec<Real> = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&sd).map(|(v, w)| v * w).collect::<Vec<_>>())
        .collect();
    let y = op_output("scale_channels", x_shape, out, track(tape, &[x, s]))?;
    if track(tape, &[x, s]) {
        let (x, s, y) = (x.clone(), s.clone(), y.clone());
        tape.record("scale_channels", move || {
            let dy = grad_or_zero(&y);
            let (dx, ds) = {
                let xd = x.data();
                let sv = s.to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut ds = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dx[r * d + j] = dy[r * d + j] * sv[j];
                        ds[j] += dy[r * d + j] * xd[r * d + j];
                    }
                }
                (dx, ds)
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if s.requires_grad() {
                s.accumulate_grad(&ds);
            }
        });
    }
    Ok(y)
}

/// Multiply by a constant.
pub fn scale(tape: &Tape, x: &Tensor, c: Real) -> Result<Tensor> {
    let out: Vec<Real> = x.data().iter().map(|v| v * c).collect();
    let y = op_output("scale", x.shape(), out, track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record("scale", move || {
            let dy = grad_or_zero(&y);
            let dx: Vec<Real> = dy.iter().map(|g| g * c).collect();
            x.accumulate_grad(&dx);
        });
    }
    Ok(y)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let s: Real = x.data().iter().sum();
    let y = op_output("sum_all", vec![1], vec![s], track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record("sum_all", move || {
            let g = grad_or_zero(&y)[0];
            let dx = vec![g; x.numel()];
            x.accumulate_grad(&dx);
        });
    }
    Ok(y)
}

/// Mean of all elements, as a scalar tensor.
pub fn mean_all(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let n = x.numel() as Real;
    let s = sum_all(tape, x)?;
    scale(tape, &s, 1.0 / n)
}

fn unary(
    tape: &Tape,
    op: &'static str,
    x: &Tensor,
    f: impl Fn(Real) -> Real,
    df: impl Fn(Real) -> Real + 'static,
) -> Result<Tensor> {
    let out: Vec<Real> = x.data().iter().map(|&v| f(v)).collect();
    let y = op_output(op, x.shape(), out, track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record(op, move || {
            let dy = grad_or_zero(&y);
            let dx: Vec<Real> = {
                let xd = x.data();
                dy.iter().zip(xd.iter()).map(|(g, &v)| g * df(v)).collect()
            };
            x.accumulate_grad(&dx);
        });
    }
    Ok(y)
}

pub(crate) fn gelu_scalar(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Gaussian error linear unit, tanh approximation.
pub fn gelu(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "gelu", x, gelu_scalar, |v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
    })
}

#[inline]
pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU (swish): x * sigmoid(x).
pub fn silu(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "silu", x, |v| v * sigmoid(v), |v| {
        let s = sigmoid(v);
        s * (1.0 + v * (1.0 - s))
    })
}

#[inline]
pub(crate) fn softplus_scalar(x: Real) -> Real {
    // Stable: max(x, 0) + ln(1 + exp(-|x|)).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softplus: ln(1 + exp(x)).
pub fn softplus(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "softplus", x, softplus_scalar, sigmoid)
}

/// Row-wise softmax over the last axis, numerically stabilised by max
/// subtraction. `mask`, when given, has the same shape; entries != 0 mark
/// disallowed positions, which receive probability 0. A fully masked row is
/// an error.
pub fn softmax(tape: &Tape, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let shape = x.shape();
    let (rows, d) = rows_last(&shape);
    if let Some(m) = mask {
        if m.shape() != shape {
            return Err(shape_err(
                "softmax",
                format!("mask {:?} vs input {:?}", m.shape(), shape),
            ));
        }
    }
    let mask_data = mask.map(|m| m.to_vec());
    let mut out = vec![0.0; rows * d];
    {
        let xd = x.data();
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let allowed = |j: usize| mask_data.as_ref().map_or(true, |m| m[r * d + j] == 0.0);
            let mut max = Real::NEG_INFINITY;
            for j in 0..d {
                if allowed(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == Real::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow { row: r });
            }
            let mut z = 0.0;
            for j in 0..d {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    out[r * d + j] = e;
                    z += e;
                }
            }
            for j in 0..d {
                out[r * d + j] /= z;
            }
        }
    }
    let y = op_output("softmax", shape, out, track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record("softmax", move || {
            let dy = grad_or_zero(&y);
            let dx: Vec<Real> = {
                let p = y.data();
                let mut dx = vec![0.0; p.len()];
                for r in 0..rows {
                    let pr = &p[r * d..(r + 1) * d];
                    let gr = &dy[r * d..(r + 1) * d];
                    let dot: Real = pr.iter().zip(gr).map(|(pi, gi)| pi * gi).sum();
                    for j in 0..d {
                        dx[r * d + j] = pr[j] * (gr[j] - dot);
                    }
                }
                dx
            };
            x.accumulate_grad(&dx);
        });
    }
    Ok(y)
}

/// Layer normalisation over the last axis followed by a learned affine map.
pub fn layer_norm(
    tape: &Tape,
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: Real,
) -> Result<Tensor> {
    let shape = x.shape();
    let (rows, d) = rows_last(&shape);
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err(
            "layer_norm",
            format!(
                "gain {:?} / bias {:?} do not match last extent of {:?}",
                gain.shape(),
                bias.shape(),
                shape
            ),
        ));
    }
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    {
        let xd = x.data();
        let g = gain.data();
        let b = bias.data();
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean: Real = row.iter().sum::<Real>() / d as Real;
            let var: Real = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
    }
    let y = op_output("layer_norm", shape, out, track(tape, &[x, gain, bias]))?;
    if track(tape, &[x, gain, bias]) {
        let (x, gain, bias, y) = (x.clone(), gain.clone(), bias.clone(), y.clone());
        tape.record("layer_norm", move || {
            let dy = grad_or_zero(&y);
            let (dx, dg, db) = {
                let g = gain.data();
                let mut dx = vec![0.0; rows * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gr = &dy[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * g[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dg[j] += gr[j] * xh[j];
                        db[j] += gr[j];
                    }
                    mean_dxh /= d as Real;
                    mean_dxh_xh /= d as Real;
                    for j in 0..d {
                        let dxh = gr[j] * g[j];
                        dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                (dx, dg, db)
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if gain.requires_grad() {
                gain.accumulate_grad(&dg);
            }
            if bias.requires_grad() {
                bias.accumulate_grad(&db);
            }
        });
    }
    Ok(y)
}

/// RMS normalisation over the last axis with a learned gain (no mean
/// subtraction, no bias): y = x · gain / sqrt(mean(x²) + eps).
pub fn rms_norm(tape: &Tape, x: &Tensor, gain: &Tensor, eps: Real) -> Result<Tensor> {
    let shape = x.shape();
    let (rows, d) = rows_last(&shape);
    if gain.shape() != [d] {
        return Err(shape_err(
            "rms_norm",
            format!("gain {:?} does not match last extent of {:?}", gain.shape(), shape),
        ));
    }
    let mut out = vec![0.0; rows * d];
    let mut inv_rms = vec![0.0; rows];
    {
        let xd = x.data();
        let g = gain.data();
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms: Real = row.iter().map(|v| v * v).sum::<Real>() / d as Real;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = ir;
            for j in 0..d {
                out[r * d + j] = row[j] * ir * g[j];
            }
        }
    }
    let y = op_output("rms_norm", shape, out, track(tape, &[x, gain]))?;
    if track(tape, &[x, gain]) {
        let (x, gain, y) = (x.clone(), gain.clone(), y.clone());
        tape.record("rms_norm", move || {
            let dy = grad_or_zero(&y);
            let (dx, dg) = {
                let xd = x.data();
                let g = gain.data();
                let mut dx = vec![0.0; rows * d];
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let gr = &dy[r * d..(r + 1) * d];
                    let ir = inv_rms[r];
                    let mut dot = 0.0;
                    for j in 0..d {
                        let dyg = gr[j] * g[j];
                        dot += dyg * row[j];
                        dg[j] += gr[j] * row[j] * ir;
                    }
                    // d/dx of x·ir: ir·dyg − x·ir³·mean(dyg⊙x)
                    let scale = ir * ir * ir * dot / d as Real;
                    for j in 0..d {
                        dx[r * d + j] = gr[j] * g[j] * ir - row[j] * scale;
                    }
                }
                (dx, dg)
            };
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if gain.requires_grad() {
                gain.accumulate_grad(&dg);
            }
        });
    }
    Ok(y)
}

/// Row lookup: `table` is (rows, width); the output is `leading ++ [width]`
/// with one table row per id. Ids must be in range.
pub fn embedding(
    tape: &Tape,
    table: &Tensor,
    ids: &[u32],
    leading: &[usize],
) -> Result<Tensor> {
    let t_shape = table.shape();
    if t_shape.len() != 2 {
        return Err(shape_err(
            "embedding",
            format!("table must be 2-d, got {t_shape:?}"),
        ));
    }
    let (rows, width) = (t_shape[0], t_shape[1]);
    if leading.iter().product::<usize>() != ids.len() {
        return Err(shape_err(
            "embedding",
            format!("leading shape {leading:?} does not cover {} ids", ids.len()),
        ));
    }
    let mut out = vec![0.0; ids.len() * width];
    {
        let td = table.data();
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: rows,
                });
            }
            out[i * width..(i + 1) * width].copy_from_slice(&td[id * width..(id + 1) * width]);
        }
    }
    let mut shape = leading.to_vec();
    shape.push(width);
    let y = op_output("embedding", shape, out, track(tape, &[table]))?;
    if track(tape, &[table]) {
        let (table, y) = (table.clone(), y.clone());
        let ids = ids.to_vec();
        tape.record("embedding", move || {
            let dy = grad_or_zero(&y);
            let mut dt = vec![0.0; rows * width];
            for (i, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for j in 0..width {
                    dt[id * width + j] += dy[i * width + j];
                }
            }
            table.accumulate_grad(&dt);
        });
    }
    Ok(y)
}

/// Concatenate (batch, T_i, d) tensors along the middle (time) axis.
pub fn concat_time(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(shape_err("concat_time", "no inputs".into()));
    }
    let first = parts[0].shape();
    if first.len() != 3 {
        return Err(shape_err(
            "concat_time",
            format!("expected 3-d inputs, got {first:?}"),
        ));
    }
    let (batch, d) = (first[0], first[2]);
    let mut times = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != 3 || s[0] != batch || s[2] != d {
            return Err(shape_err(
                "concat_time",
                format!("incompatible part {s:?} vs {first:?}"),
            ));
        }
        times.push(s[1]);
    }
    let total: usize = times.iter().sum();
    let mut out = vec![0.0; batch * total * d];
    for b in 0..batch {
        let mut offset = 0;
        for (p, &t) in parts.iter().zip(&times) {
            let pd = p.data();
            let src = &pd[b * t * d..(b + 1) * t * d];
            out[(b * total + offset) * d..(b * total + offset + t) * d].copy_from_slice(src);
            offset += t;
        }
    }
    let any_grad = tape.is_active() && parts.iter().any(|p| p.requires_grad());
    let y = op_output("concat_time", vec![batch, total, d], out, any_grad)?;
    if any_grad {
        let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let y = y.clone();
        tape.record("concat_time", move || {
            let dy = grad_or_zero(&y);
            let mut offset = 0;
            for (p, &t) in parts.iter().zip(&times) {
                if p.requires_grad() {
                    let mut dp = vec![0.0; batch * t * d];
                    for b in 0..batch {
                        let src = &dy[(b * total + offset) * d..(b * total + offset + t) * d];
                        dp[b * t * d..(b + 1) * t * d].copy_from_slice(src);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += t;
            }
        });
    }
    Ok(y)
}

/// Reinterpret the row-major data under a new shape with the same element
/// count. Gradients pass through unchanged.
pub fn reshape(tape: &Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(shape_err(
            "reshape",
            format!("{:?} does not cover {} elements", shape, x.numel()),
        ));
    }
    let y = op_output("reshape", shape.to_vec(), x.to_vec(), track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record("reshape", move || {
            let dy = grad_or_zero(&y);
            x.accumulate_grad(&dy);
        });
    }
    Ok(y)
}

/// Slice `len` channels starting at `start` along the last axis.
pub fn slice_last(tape: &Tape, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    let (rows, d) = rows_last(&shape);
    if start + len > d || len == 0 {
        return Err(shape_err(
            "slice_last",
            format!("slice {start}..{} out of range for extent {d}", start + len),
        ));
    }
    let mut out = vec![0.0; rows * len];
    {
        let xd = x.data();
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&xd[r * d + start..r * d + start + len]);
        }
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = len;
    let y = op_output("slice_last", out_shape, out, track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record("slice_last", move || {
            let dy = grad_or_zero(&y);
            let mut dx = vec![0.0; rows * d];
            for r in 0..rows {
                dx[r * d + start..r * d + start + len]
                    .copy_from_slice(&dy[r * len..(r + 1) * len]);
            }
            x.accumulate_grad(&dx);
        });
    }
    Ok(y)
}

/// Slice `len` steps starting at `start` along the time axis of (batch, T, d).
pub fn slice_time(tape: &Tape, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("slice_time", format!("expected 3-d input, got {s:?}")));
    }
    let (batch, t, d) = (s[0], s[1], s[2]);
    if start + len > t || len == 0 {
        return Err(shape_err(
            "slice_time",
            format!("slice {start}..{} out of range for T={t}", start + len),
        ));
    }
    let mut out = vec![0.0; batch * len * d];
    {
        let xd = x.data();
        for b in 0..batch {
            let src = &xd[(b * t + start) * d..(b * t + start + len) * d];
            out[b * len * d..(b + 1) * len * d].copy_from_slice(src);
        }
    }
    let y = op_output("slice_time", vec![batch, len, d], out, track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record("slice_time", move || {
            let dy = grad_or_zero(&y);
            let mut dx = vec![0.0; batch * t * d];
            for b in 0..batch {
                dx[(b * t + start) * d..(b * t + start + len) * d]
                    .copy_from_slice(&dy[b * len * d..(b + 1) * len * d]);
            }
            x.accumulate_grad(&dx);
        });
    }
    Ok(y)
}

/// Inverted dropout: keep with probability 1-rate and rescale by 1/(1-rate).
/// Rate 0 is the identity.
pub fn dropout(tape: &Tape, x: &Tensor, rate: Real, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument {
            op: "dropout",
            detail: format!("rate {rate} outside [0, 1)"),
        });
    }
    if rate == 0.0 {
        return scale(tape, x, 1.0);
    }
    let keep = 1.0 - rate;
    let mask: Vec<Real> = (0..x.numel())
        .map(|_| {
            if (rng.gen::<f64>() as Real) < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    let out: Vec<Real> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let y = op_output("dropout", x.shape(), out, track(tape, &[x]))?;
    if track(tape, &[x]) {
        let (x, y) = (x.clone(), y.clone());
        tape.record("dropout", move || {
            let dy = grad_or_zero(&y);
            let dx: Vec<Real> = dy.iter().zip(&mask).map(|(g, m)| g * m).collect();
            x.accumulate_grad(&dx);
        });
    }
    Ok(y)
}

/// Forward scores for scaled dot-product attention, shared by the fused op
/// and by tests that inspect the attention weights directly.
///
/// Returns probabilities shaped (batch, heads, t_q, t_k).
pub fn attention_probs(
    q: &[Real],
    k: &[Real],
    batch: usize,
    t_q: usize,
    t_k: usize,
    n_heads: usize,
    head_dim: usize,
    causal: bool,
) -> Vec<Real> {
    let h = n_heads * head_dim;
    let scale = 1.0 / (head_dim as Real).sqrt();
    let mut probs = vec![0.0; batch * n_heads * t_q * t_k];
    for b in 0..batch {
        for hd in 0..n_heads {
            for i in 0..t_q {
                let limit = if causal { i + 1 } else { t_k };
                let row =
                    &mut probs[((b * n_heads + hd) * t_q + i) * t_k..((b * n_heads + hd) * t_q + i + 1) * t_k];
                let mut max = Real::NEG_INFINITY;
                for j in 0..limit {
                    let mut s = 0.0;
                    for e in 0..head_dim {
                        s += q[(b * t_q + i) * h + hd * head_dim + e]
                            * k[(b * t_k + j) * h + hd * head_dim + e];
                    }
                    row[j] = s * scale;
                    if row[j] > max {
                        max = row[j];
                    }
                }
                let mut z = 0.0;
                for rj in row.iter_mut().take(limit) {
                    *rj = (*rj - max).exp();
                    z += *rj;
                }
                for rj in row.iter_mut().take(limit) {
                    *rj /= z;
                }
                for rj in row.iter_mut().skip(limit) {
                    *rj = 0.0;
                }
            }
        }
    }
    probs
}

/// Fused multi-head scaled dot-product attention.
///
/// q is (batch, t_q, h); k and v are (batch, t_k, h); h = n_heads * head_dim.
/// With `causal` set, position i attends to keys ≤ i (requires t_q == t_k).
/// Dropout, when given, applies to the attention weights.
pub fn attention(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    causal: bool,
    dropout: Option<(Real, &mut ChaCha8Rng)>,
) -> Result<Tensor> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2]
    {
        return Err(shape_err(
            "attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        ));
    }
    let (batch, t_q, h) = (qs[0], qs[1], qs[2]);
    let t_k = ks[1];
    if h % n_heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            detail: format!("hidden {h} not divisible by {n_heads} heads"),
        });
    }
    if causal && t_q != t_k {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            detail: format!("causal attention needs t_q == t_k, got {t_q} vs {t_k}"),
        });
    }
    let head_dim = h / n_heads;
    let probs = attention_probs(&q.data(), &k.data(), batch, t_q, t_k, n_heads, head_dim, causal);
    // Dropout scale per weight: 0 or 1/keep; empty when no dropout.
    let drop_scale: Vec<Real> = match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            probs
                .iter()
                .map(|_| {
                    if (rng.gen::<f64>() as Real) < rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let weight = |idx: usize| {
        if drop_scale.is_empty() {
            probs[idx]
        } else {
            probs[idx] * drop_scale[idx]
        }
    };
    let mut out = vec![0.0; batch * t_q * h];
    {
        let vd = v.data();
        for b in 0..batch {
            for hd in 0..n_heads {
                for i in 0..t_q {
                    for j in 0..t_k {
                        let w = weight(((b * n_heads + hd) * t_q + i) * t_k + j);
                        if w != 0.0 {
                            for e in 0..head_dim {
                                out[(b * t_q + i) * h + hd * head_dim + e] +=
                                    w * vd[(b * t_k + j) * h + hd * head_dim + e];
                            }
                        }
                    }
                }
            }
        }
    }
    let y = op_output("attention", vec![batch, t_q, h], out, track(tape, &[q, k, v]))?;
    if track(tape, &[q, k, v]) {
        let (q, k, v, y) = (q.clone(), k.clone(), v.clone(), y.clone());
        tape.record("attention", move || {
            let dy = grad_or_zero(&y);
            let scale = 1.0 / (head_dim as Real).sqrt();
            let (dq, dk, dv) = {
                let qd = q.data();
                let kd = k.data();
                let vd = v.data();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut d_used = vec![0.0; t_k];
                for b in 0..batch {
                    for hd in 0..n_heads {
                        for i in 0..t_q {
                            let base = ((b * n_heads + hd) * t_q + i) * t_k;
                            // Gradient wrt the (post-dropout) weights, plus dv.
                            for (j, du) in d_used.iter_mut().enumerate() {
                                let mut s = 0.0;
                                let idx = base + j;
                                let w = if drop_scale.is_empty() {
                                    probs[idx]
                                } else {
                                    probs[idx] * drop_scale[idx]
                                };
                                for e in 0..head_dim {
                                    let g = dy[(b * t_q + i) * h + hd * head_dim + e];
                                    s += g * vd[(b * t_k + j) * h + hd * head_dim + e];
                                    dv[(b * t_k + j) * h + hd * head_dim + e] += w * g;
                                }
                                // Back through dropout onto the softmax output.
                                *du = if drop_scale.is_empty() { s } else { s * drop_scale[idx] };
                            }
                            // Softmax backward on this row.
                            let mut dot = 0.0;
                            for j in 0..t_k {
                                dot += d_used[j] * probs[base + j];
                            }
                            for j in 0..t_k {
                                let dscore = probs[base + j] * (d_used[j] - dot) * scale;
                                if dscore != 0.0 {
                                    for e in 0..head_dim {
                                        dq[(b * t_q + i) * h + hd * head_dim + e] +=
                                            dscore * kd[(b * t_k + j) * h + hd * head_dim + e];
                                        dk[(b * t_k + j) * h + hd * head_dim + e] +=
                                            dscore * qd[(b * t_q + i) * h + hd * head_dim + e];
                                    }
                                }
                            }
                        }
                    }
                }
                (dq, dk, dv)
            };
            if q.requires_grad() {
                q.accumulate_grad(&dq);
            }
            if k.requires_grad() {
                k.accumulate_grad(&dk);
            }
            if v.requires_grad() {
                v.accumulate_grad(&dv);
            }
        });
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tensor(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_matrix_unchanged() {
        let tape = Tape::inactive();
        let eye = tensor(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = tensor(&[3, 3], &[2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]);
        let y = matmul(&tape, &eye, &m).unwrap();
        assert_eq!(y.to_vec(), m.to_vec());
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::inactive();
        let a = tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor(&[2, 1], &[1.0, 1.0]);
        let y = matmul(&tape, &a, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 7.0]);
        assert_eq!(y.shape(), vec![2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let tape = Tape::inactive();
        let a = tensor(&[2, 3], &[0.0; 6]);
        let b = tensor(&[2, 2], &[0.0; 4]);
        assert!(matmul(&tape, &a, &b).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        let tape = Tape::inactive();
        let x = tensor(&[3], &[0.0, 1.0, 20.0]);
        let y = gelu(&tape, &x).unwrap();
        let v = y.to_vec();
        assert_eq!(v[0], 0.0);
        // Scalar evaluation of the tanh approximation at x = 1.
        assert!((v[1] - 0.841192).abs() < 1e-4, "gelu(1) = {}", v[1]);
        assert!((v[2] - 20.0).abs() < 1e-9, "gelu asymptote: {}", v[2]);
    }

    #[test]
    fn softmax_uniform_and_log_ratio_rows() {
        let tape = Tape::inactive();
        let x = tensor(&[4], &[0.7; 4]);
        let y = softmax(&tape, &x, None).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x = tensor(&[2], &[0.0, (3.0 as Real).ln()]);
        let y = softmax(&tape, &x, None).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_overflow_safe() {
        let tape = Tape::inactive();
        let x = tensor(&[2], &[1000.0, 0.0]);
        let y = softmax(&tape, &x, None).unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let tape = Tape::inactive();
        let x = tensor(&[1, 2], &[1.0, 2.0]);
        let m = tensor(&[1, 2], &[1.0, 1.0]);
        assert!(matches!(
            softmax(&tape, &x, Some(&m)).unwrap_err(),
            TensorError::FullyMaskedRow { row: 0 }
        ));
    }

    #[test]
    fn softmax_mask_zeroes_disallowed() {
        let tape = Tape::inactive();
        let x = tensor(&[1, 3], &[1.0, 5.0, 1.0]);
        let m = tensor(&[1, 3], &[0.0, 1.0, 0.0]);
        let y = softmax(&tape, &x, Some(&m)).unwrap().to_vec();
        assert_eq!(y[1], 0.0);
        assert!((y[0] - 0.5).abs() < 1e-12);
        assert!((y[0] + y[1] + y[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let tape = Tape::inactive();
        let x = tensor(&[1, 4], &[3.0; 4]);
        let g = tensor(&[4], &[1.0; 4]);
        let b = tensor(&[4], &[0.0; 4]);
        let y = layer_norm(&tape, &x, &g, &b, 1e-5).unwrap().to_vec();
        for v in y {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalised_row() {
        let tape = Tape::inactive();
        let x = tensor(&[1, 2], &[1.0, -1.0]);
        let g = tensor(&[2], &[1.0; 2]);
        let b = tensor(&[2], &[0.0; 2]);
        let y = layer_norm(&tape, &x, &g, &b, 1e-12).unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-6);
        assert!((y[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics() {
        let tape = Tape::inactive();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn_param(&mut rng, &[1, 64], 2.5);
        let g = tensor(&[64], &[1.0; 64]);
        let b = tensor(&[64], &[0.0; 64]);
        let y = layer_norm(&tape, &x, &g, &b, 1e-9).unwrap().to_vec();
        let mean: Real = y.iter().sum::<Real>() / 64.0;
        let var: Real = y.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / 64.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let tape = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = sum_all(&tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let sq = mul(&tape, &x, &x).unwrap();
        let half = scale(&tape, &sq, 0.5).unwrap();
        let loss = sum_all(&tape, &half).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let tape = Tape::inactive();
        let table = tensor(&[4, 2], &[0.0; 8]);
        assert!(embedding(&tape, &table, &[4], &[1]).is_err());
        assert!(embedding(&tape, &table, &[3], &[1]).is_ok());
    }

    #[test]
    fn embedding_backward_scatters() {
        let tape = Tape::new();
        let table = Tensor::param(&[3, 2], vec![0.0; 6]).unwrap();
        let e = embedding(&tape, &table, &[1, 1, 2], &[3]).unwrap();
        let loss = sum_all(&tape, &e).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(table.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let tape = Tape::inactive();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = tensor(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let y = dropout(&tape, &x, 0.0, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn attention_single_position_attends_to_itself() {
        let probs = attention_probs(&[1.0, 2.0], &[1.0, 2.0], 1, 1, 1, 1, 2, true);
        assert_eq!(probs, vec![1.0]);
    }

    #[test]
    fn attention_uniform_queries_give_uniform_prefix_weights() {
        // Identical q and k rows: scores constant, so weights are uniform over
        // the allowed prefix.
        let t = 4;
        let q: Vec<Real> = vec![0.3; t * 2];
        let probs = attention_probs(&q, &q, 1, t, t, 1, 2, true);
        for i in 0..t {
            for j in 0..t {
                let expect = if j <= i { 1.0 / (i + 1) as Real } else { 0.0 };
                assert!((probs[i * t + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape = Tape::inactive();
        let a = tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor(&[1, 1, 2], &[5.0, 6.0]);
        let c = concat_time(&tape, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), vec![1, 3, 2]);
        let back = slice_time(&tape, &c, 2, 1).unwrap();
        assert_eq!(back.to_vec(), vec![5.0, 6.0]);
    }
}
