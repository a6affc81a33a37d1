//! Tape-recorded forward operations and their reverse rules.
//!
//! Each function validates shapes, computes the forward value eagerly, and
//! pushes one node; `backward_op` is the single dispatch point the tape's
//! reverse sweep calls.

use super::kernels::{self, Conv3dGeom, ConvT3dGeom};
use super::tape::{GradBufs, Node, Op, Tape, TensorId};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn record<T: Scalar>(
    tape: &mut Tape<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs: bool,
) -> TensorId {
    debug_assert_eq!(numel(&shape), data.len());
    tape.push(Tensor { shape, data, requires_grad: false, grad: None }, op, needs)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "add shape mismatch: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let data: Vec<T> =
        tape.data(a).iter().zip(tape.data(b).iter()).map(|(&x, &y)| x + y).collect();
    let needs = tape.needs(a) || tape.needs(b);
    let shape = tape.shape(a).to_vec();
    Ok(record(tape, shape, data, Op::Add { a, b }, needs))
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "mul shape mismatch: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let data: Vec<T> =
        tape.data(a).iter().zip(tape.data(b).iter()).map(|(&x, &y)| x * y).collect();
    let needs = tape.needs(a) || tape.needs(b);
    let shape = tape.shape(a).to_vec();
    Ok(record(tape, shape, data, Op::Mul { a, b }, needs))
}

pub fn mul_scalar<T: Scalar>(tape: &mut Tape<T>, x: TensorId, c: T) -> Result<TensorId> {
    let data: Vec<T> = tape.data(x).iter().map(|&v| v * c).collect();
    let needs = tape.needs(x);
    let shape = tape.shape(x).to_vec();
    Ok(record(tape, shape, data, Op::MulScalar { x, c }, needs))
}

/// `x + b` where `b`'s shape is a trailing suffix of `x`'s (bias-style
/// broadcast over the leading axes).
pub fn add_broadcast<T: Scalar>(tape: &mut Tape<T>, x: TensorId, b: TensorId) -> Result<TensorId> {
    let sx = tape.shape(x).to_vec();
    let sb = tape.shape(b).to_vec();
    if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
        return Err(Error::dim(format!(
            "add_broadcast: {sb:?} is not a trailing suffix of {sx:?}"
        )));
    }
    let bn = numel(&sb);
    let mut data = tape.data(x).to_vec();
    let bd = tape.data(b);
    for chunk in data.chunks_exact_mut(bn) {
        for (d, &v) in chunk.iter_mut().zip(bd.iter()) {
            *d += v;
        }
    }
    let needs = tape.needs(x) || tape.needs(b);
    Ok(record(tape, sx, data, Op::AddBroadcast { x, b }, needs))
}

/// `x + c` for an off-tape constant of identical shape.
pub fn add_const<T: Scalar>(tape: &mut Tape<T>, x: TensorId, c: &Tensor<T>) -> Result<TensorId> {
    if tape.shape(x) != c.shape() {
        return Err(Error::dim(format!(
            "add_const shape mismatch: {:?} vs {:?}",
            tape.shape(x),
            c.shape()
        )));
    }
    let data: Vec<T> =
        tape.data(x).iter().zip(c.data().iter()).map(|(&a, &b)| a + b).collect();
    let needs = tape.needs(x);
    let shape = tape.shape(x).to_vec();
    Ok(record(tape, shape, data, Op::AddConst { x }, needs))
}

fn matmul_common<T: Scalar>(
    tape: &mut Tape<T>,
    a: TensorId,
    b: TensorId,
    transpose_b: bool,
) -> Result<TensorId> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::dim(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
    }
    let m = sa[sa.len() - 2];
    let ka = sa[sa.len() - 1];
    let (kb, n) = if transpose_b {
        (sb[sb.len() - 1], sb[sb.len() - 2])
    } else {
        (sb[sb.len() - 2], sb[sb.len() - 1])
    };
    if ka != kb {
        return Err(Error::dim(format!(
            "matmul inner extent mismatch: {sa:?} x {sb:?}{}",
            if transpose_b { " (b transposed)" } else { "" }
        )));
    }
    let b_shared = sb.len() == 2;
    let batch_shape = &sa[..sa.len() - 2];
    if !b_shared && sb[..sb.len() - 2] != *batch_shape {
        return Err(Error::dim(format!(
            "matmul batch prefix mismatch: {sa:?} x {sb:?}"
        )));
    }
    let batch = numel(batch_shape);
    let mut out = vec![T::ZERO; batch * m * n];
    {
        let ad = tape.data(a);
        let bd = tape.data(b);
        for bi in 0..batch {
            let a_sl = &ad[bi * m * ka..(bi + 1) * m * ka];
            let b_sl = if b_shared { bd } else { &bd[bi * ka * n..(bi + 1) * ka * n] };
            let o_sl = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                kernels::mm_nt(a_sl, b_sl, o_sl, m, ka, n);
            } else {
                kernels::mm_nn(a_sl, b_sl, o_sl, m, ka, n);
            }
        }
    }
    let mut shape = batch_shape.to_vec();
    shape.push(m);
    shape.push(n);
    let needs = tape.needs(a) || tape.needs(b);
    Ok(record(
        tape,
        shape,
        out,
        Op::Matmul { a, b, batch, m, k: ka, n, b_shared, transpose_b },
        needs,
    ))
}

/// Batched contraction `a[..,m,k] x b[..,k,n]`; `b` may be rank-2 and shared
/// across the batch.
pub fn matmul<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    matmul_common(tape, a, b, false)
}

/// `a[..,m,k] x b[..,n,k]^T` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    matmul_common(tape, a, b, true)
}

pub fn reshape<T: Scalar>(tape: &mut Tape<T>, x: TensorId, shape: &[usize]) -> Result<TensorId> {
    if numel(shape) != numel(tape.shape(x)) {
        return Err(Error::dim(format!(
            "reshape from {:?} to {shape:?} changes the element count",
            tape.shape(x)
        )));
    }
    let data = tape.data(x).to_vec();
    let needs = tape.needs(x);
    Ok(record(tape, shape.to_vec(), data, Op::Reshape { x }, needs))
}

pub fn permute<T: Scalar>(tape: &mut Tape<T>, x: TensorId, axes: &[usize]) -> Result<TensorId> {
    let sx = tape.shape(x).to_vec();
    let mut seen = vec![false; sx.len()];
    if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim(format!("permute axes {axes:?} invalid for shape {sx:?}")));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
    let mut data = vec![T::ZERO; numel(&sx)];
    kernels::permute_copy(tape.data(x), &sx, axes, &mut data);
    let needs = tape.needs(x);
    Ok(record(tape, out_shape, data, Op::Permute { x, axes: axes.to_vec() }, needs))
}

/// Circular roll of a `[B, D, H, W, C]` volume along its three spatial axes.
/// `direction = 1` applies the negative roll used before shifted-window
/// attention; `direction = -1` undoes it.
pub fn cyclic_shift<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    shift: [usize; 3],
    direction: i8,
) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::dim(format!("cyclic_shift expects [B,D,H,W,C], got {s:?}")));
    }
    if direction != 1 && direction != -1 {
        return Err(Error::Param(format!("cyclic_shift direction must be +1 or -1, got {direction}")));
    }
    let ext = [s[1], s[2], s[3]];
    let mut eff = [0usize; 3];
    for i in 0..3 {
        let raw = shift[i] % ext[i];
        eff[i] = if direction == 1 { raw } else { (ext[i] - raw) % ext[i] };
    }
    let mut data = vec![T::ZERO; numel(&s)];
    kernels::roll3d_copy(tape.data(x), [s[0], s[1], s[2], s[3], s[4]], eff, &mut data);
    let needs = tape.needs(x);
    Ok(record(tape, s, data, Op::Roll { x, shift: eff }, needs))
}

/// `out[i, :] = table[idx[i], :]`; gradients scatter-add back into the table.
pub fn gather_rows<T: Scalar>(tape: &mut Tape<T>, table: TensorId, idx: &[usize]) -> Result<TensorId> {
    let st = tape.shape(table).to_vec();
    if st.len() != 2 {
        return Err(Error::dim(format!("gather_rows expects a rank-2 table, got {st:?}")));
    }
    let (rows, cols) = (st[0], st[1]);
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::Range(format!("gather_rows index {bad} out of range for {rows} rows")));
    }
    let td = tape.data(table);
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(&td[i * cols..(i + 1) * cols]);
    }
    let needs = tape.needs(table);
    Ok(record(
        tape,
        vec![idx.len(), cols],
        data,
        Op::GatherRows { table, idx: idx.to_vec() },
        needs,
    ))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last<T: Scalar>(tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let m = match s.last() {
        Some(&m) => m,
        None => return Err(Error::dim("softmax_last needs rank >= 1")),
    };
    let mut data = tape.data(x).to_vec();
    for row in data.chunks_exact_mut(m) {
        let mut hi = row[0];
        for &v in row.iter() {
            hi = hi.maximum(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - hi).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    let needs = tape.needs(x);
    Ok(record(tape, s, data, Op::Softmax { x }, needs))
}

/// GELU in its exact error-function form: `x * Phi(x)`.
pub fn gelu<T: Scalar>(tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let data: Vec<T> = tape
        .data(x)
        .iter()
        .map(|&v| v * half * (T::ONE + (v * inv_sqrt2).erf()))
        .collect();
    let needs = tape.needs(x);
    let shape = tape.shape(x).to_vec();
    Ok(record(tape, shape, data, Op::Gelu { x }, needs))
}

pub fn leaky_relu<T: Scalar>(tape: &mut Tape<T>, x: TensorId, slope: f64) -> Result<TensorId> {
    let s = T::from_f64(slope);
    let data: Vec<T> =
        tape.data(x).iter().map(|&v| if v > T::ZERO { v } else { v * s }).collect();
    let needs = tape.needs(x);
    let shape = tape.shape(x).to_vec();
    Ok(record(tape, shape, data, Op::LeakyRelu { x, slope: s }, needs))
}

/// Inverted dropout; a no-op (returning `x` itself) when `p == 0` so the
/// generator is not consumed.
pub fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    p: f64,
    rng: &mut SplitMix64,
) -> Result<TensorId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout rate must be in [0, 1), got {p}")));
    }
    if p == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..numel(tape.shape(x)))
        .map(|_| if rng.next_f64() >= p { keep } else { T::ZERO })
        .collect();
    let data: Vec<T> =
        tape.data(x).iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
    let needs = tape.needs(x);
    let shape = tape.shape(x).to_vec();
    Ok(record(tape, shape, data, Op::Dropout { x, mask }, needs))
}

fn norm_slices<T: Scalar>(
    xd: &[T],
    slice_len: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let slices = xd.len() / slice_len;
    let mut mean = Vec::with_capacity(slices);
    let mut rstd = Vec::with_capacity(slices);
    let inv_n = T::ONE / T::from_usize(slice_len);
    for row in xd.chunks_exact(slice_len) {
        let mut mu = T::ZERO;
        for &v in row {
            mu += v;
        }
        mu = mu * inv_n;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mu;
            var += d * d;
        }
        var = var * inv_n;
        mean.push(mu);
        rstd.push(T::ONE / (var + eps).sqrt());
    }
    (mean, rstd)
}

/// Layer normalization over the last axis followed by the `gamma`/`beta`
/// affine map; `gamma` and `beta` span the normalized axis.
pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    eps: f64,
) -> Result<TensorId> {
    if eps <= 0.0 {
        return Err(Error::Param(format!("layer_norm eps must be positive, got {eps}")));
    }
    let s = tape.shape(x).to_vec();
    let c = match s.last() {
        Some(&c) => c,
        None => return Err(Error::dim("layer_norm needs rank >= 1")),
    };
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::dim(format!(
            "layer_norm affine shapes {:?}/{:?} must be [{c}]",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    let (mean, rstd) = norm_slices(tape.data(x), c, T::from_f64(eps));
    let gd = tape.data(gamma);
    let bd = tape.data(beta);
    let mut data = tape.data(x).to_vec();
    for (row_i, row) in data.chunks_exact_mut(c).enumerate() {
        let (mu, rs) = (mean[row_i], rstd[row_i]);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) * rs * gd[j] + bd[j];
        }
    }
    let needs = tape.needs(x) || tape.needs(gamma) || tape.needs(beta);
    Ok(record(tape, s, data, Op::LayerNorm { x, gamma, beta, mean, rstd }, needs))
}

/// Instance normalization of `[B, C, ...spatial]`: each (sample, channel)
/// slice is normalized over its spatial extent, then scaled per channel.
pub fn instance_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    eps: f64,
) -> Result<TensorId> {
    if eps <= 0.0 {
        return Err(Error::Param(format!("instance_norm eps must be positive, got {eps}")));
    }
    let s = tape.shape(x).to_vec();
    if s.len() < 3 {
        return Err(Error::dim(format!("instance_norm expects [B,C,spatial..], got {s:?}")));
    }
    let c = s[1];
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::dim(format!(
            "instance_norm affine shapes {:?}/{:?} must be [{c}]",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    let m: usize = s[2..].iter().product();
    let (mean, rstd) = norm_slices(tape.data(x), m, T::from_f64(eps));
    let gd = tape.data(gamma);
    let bd = tape.data(beta);
    let mut data = tape.data(x).to_vec();
    for (sl, row) in data.chunks_exact_mut(m).enumerate() {
        let (mu, rs) = (mean[sl], rstd[sl]);
        let (gc, bc) = (gd[sl % c], bd[sl % c]);
        for v in row.iter_mut() {
            *v = (*v - mu) * rs * gc + bc;
        }
    }
    let needs = tape.needs(x) || tape.needs(gamma) || tape.needs(beta);
    Ok(record(tape, s, data, Op::InstanceNorm { x, gamma, beta, mean, rstd }, needs))
}

/// Strided 3-d cross-correlation with per-channel bias.
pub fn conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    bias: TensorId,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<TensorId> {
    let geom = Conv3dGeom::infer(tape.shape(x), tape.shape(w), stride, pad)?;
    if tape.shape(bias) != [geom.out_channels] {
        return Err(Error::dim(format!(
            "conv3d bias shape {:?} must be [{}]",
            tape.shape(bias),
            geom.out_channels
        )));
    }
    let data = kernels::conv3d_forward(tape.data(x), tape.data(w), tape.data(bias), &geom);
    let shape = geom.out_shape();
    let needs = tape.needs(x) || tape.needs(w) || tape.needs(bias);
    Ok(record(tape, shape, data, Op::Conv3d { x, w, bias, geom }, needs))
}

/// Transposed 3-d convolution restricted to kernel == stride, zero padding —
/// the exact adjoint of `conv3d` with the same geometry.
pub fn conv3d_transpose<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    stride: [usize; 3],
) -> Result<TensorId> {
    let geom = ConvT3dGeom::infer(tape.shape(x), tape.shape(w), stride)?;
    let data = kernels::convt3d_forward(tape.data(x), tape.data(w), &geom);
    let shape = geom.out_shape();
    let needs = tape.needs(x) || tape.needs(w);
    Ok(record(tape, shape, data, Op::ConvT3d { x, w, geom }, needs))
}

/// Concatenate along axis 1 (channels); all other extents must match.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() != sb.len() || sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::dim(format!(
            "concat_channels shape mismatch: {sa:?} vs {sb:?}"
        )));
    }
    let rest: usize = sa[2..].iter().product();
    let (ca, cb) = (sa[1], sb[1]);
    let mut data = Vec::with_capacity(sa[0] * (ca + cb) * rest);
    {
        let ad = tape.data(a);
        let bd = tape.data(b);
        for bi in 0..sa[0] {
            data.extend_from_slice(&ad[bi * ca * rest..(bi + 1) * ca * rest]);
            data.extend_from_slice(&bd[bi * cb * rest..(bi + 1) * cb * rest]);
        }
    }
    let mut shape = sa.clone();
    shape[1] = ca + cb;
    let needs = tape.needs(a) || tape.needs(b);
    Ok(record(tape, shape, data, Op::ConcatChannels { a, b, a_channels: ca }, needs))
}

/// Mean per-pixel negative log-likelihood over non-ignored pixels.
/// `logits` is `[B, K, H, W]`; `labels` is the flattened `[B, H, W]` class
/// map with `ignore` marking pixels that do not score.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    labels: &[u8],
    ignore: u8,
) -> Result<TensorId> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("cross_entropy expects [B,K,H,W] logits, got {s:?}")));
    }
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != b * hw {
        return Err(Error::dim(format!(
            "cross_entropy labels length {} does not match {} pixels",
            labels.len(),
            b * hw
        )));
    }
    if k > u8::MAX as usize {
        return Err(Error::Range(format!("cross_entropy supports at most 255 classes, got {k}")));
    }
    if let Some((p, &bad)) =
        labels.iter().enumerate().find(|&(_, &l)| l != ignore && (l as usize) >= k)
    {
        return Err(Error::Range(format!(
            "label {bad} at pixel {p} out of range for {k} classes"
        )));
    }
    let count = labels.iter().filter(|&&l| l != ignore).count();
    if count == 0 {
        return Err(Error::Degenerate("cross_entropy: every pixel is ignored".into()));
    }
    let xd = tape.data(logits);
    let mut lse = vec![T::ZERO; b * hw];
    let mut loss = T::ZERO;
    for bi in 0..b {
        for p in 0..hw {
            let l = labels[bi * hw + p];
            let mut hi = xd[(bi * k) * hw + p];
            for ki in 1..k {
                hi = hi.maximum(xd[(bi * k + ki) * hw + p]);
            }
            let mut sum = T::ZERO;
            for ki in 0..k {
                sum += (xd[(bi * k + ki) * hw + p] - hi).exp();
            }
            let v = hi + sum.ln();
            lse[bi * hw + p] = v;
            if l != ignore {
                loss += v - xd[(bi * k + l as usize) * hw + p];
            }
        }
    }
    loss = loss / T::from_usize(count);
    let needs = tape.needs(logits);
    Ok(record(
        tape,
        vec![],
        vec![loss],
        Op::CrossEntropy { logits, labels: labels.to_vec(), ignore, count, lse },
        needs,
    ))
}

/// Sum of all elements (scalar output).
pub fn sum_all<T: Scalar>(tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
    let mut s = T::ZERO;
    for &v in tape.data(x) {
        s += v;
    }
    let needs = tape.needs(x);
    Ok(record(tape, vec![], vec![s], Op::SumAll { x }, needs))
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Reverse rule dispatch: accumulate `g` (the out-gradient of `out`) into the
/// gradient buffers of every input that needs one.
pub(crate) fn backward_op<T: Scalar>(
    op: Op<T>,
    out: TensorId,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut GradBufs<T>,
) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if nodes[a].needs {
                grads.add_slice(a, g);
            }
            if nodes[b].needs {
                grads.add_slice(b, g);
            }
        }
        Op::Mul { a, b } => {
            if nodes[a].needs {
                let bd = nodes[b].tensor.data();
                let ga = grads.acc(a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
            }
            if nodes[b].needs {
                let ad = nodes[a].tensor.data();
                let gb = grads.acc(b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
        }
        Op::MulScalar { x, c } => {
            if nodes[x].needs {
                let gx = grads.acc(x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * c;
                }
            }
        }
        Op::AddBroadcast { x, b } => {
            if nodes[x].needs {
                grads.add_slice(x, g);
            }
            if nodes[b].needs {
                let bn = nodes[b].tensor.numel();
                let gb = grads.acc(b, bn);
                for chunk in g.chunks_exact(bn) {
                    for (d, &s) in gb.iter_mut().zip(chunk.iter()) {
                        *d += s;
                    }
                }
            }
        }
        Op::AddConst { x } => {
            if nodes[x].needs {
                grads.add_slice(x, g);
            }
        }
        Op::Matmul { a, b, batch, m, k, n, b_shared, transpose_b } => {
            let ad = nodes[a].tensor.data();
            let bd = nodes[b].tensor.data();
            if nodes[a].needs {
                let ga = grads.acc(a, batch * m * k);
                for bi in 0..batch {
                    let go = &g[bi * m * n..(bi + 1) * m * n];
                    let b_sl = if b_shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                    let ga_sl = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if transpose_b {
                        // b stored [n,k]: dA = dC x B
                        kernels::mm_nn(go, b_sl, ga_sl, m, n, k);
                    } else {
                        // dA = dC x B^T
                        kernels::mm_nt(go, b_sl, ga_sl, m, n, k);
                    }
                }
            }
            if nodes[b].needs {
                let blen = if b_shared { k * n } else { batch * k * n };
                let gb = grads.acc(b, blen);
                for bi in 0..batch {
                    let go = &g[bi * m * n..(bi + 1) * m * n];
                    let a_sl = &ad[bi * m * k..(bi + 1) * m * k];
                    let gb_sl: &mut [T] = if b_shared {
                        &mut gb[..]
                    } else {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    };
                    if transpose_b {
                        // dB[n,k] = dC^T x A
                        kernels::mm_tn(go, a_sl, gb_sl, m, n, k);
                    } else {
                        // dB = A^T x dC
                        kernels::mm_tn(a_sl, go, gb_sl, m, k, n);
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if nodes[x].needs {
                grads.add_slice(x, g);
            }
        }
        Op::Permute { x, axes } => {
            if nodes[x].needs {
                let out_shape = nodes[out].tensor.shape();
                let inv = inverse_axes(&axes);
                let mut buf = vec![T::ZERO; g.len()];
                kernels::permute_copy(g, out_shape, &inv, &mut buf);
                grads.add_slice(x, &buf);
            }
        }
        Op::Roll { x, shift } => {
            if nodes[x].needs {
                let s = nodes[x].tensor.shape();
                let dims = [s[0], s[1], s[2], s[3], s[4]];
                let inv = [
                    (dims[1] - shift[0]) % dims[1],
                    (dims[2] - shift[1]) % dims[2],
                    (dims[3] - shift[2]) % dims[3],
                ];
                let mut buf = vec![T::ZERO; g.len()];
                kernels::roll3d_copy(g, dims, inv, &mut buf);
                grads.add_slice(x, &buf);
            }
        }
        Op::GatherRows { table, idx } => {
            if nodes[table].needs {
                let cols = nodes[table].tensor.shape()[1];
                let len = nodes[table].tensor.numel();
                let gt = grads.acc(table, len);
                for (i, &r) in idx.iter().enumerate() {
                    let src = &g[i * cols..(i + 1) * cols];
                    let dst = &mut gt[r * cols..(r + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += s;
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if nodes[x].needs {
                let y = nodes[out].tensor.data();
                let m = *nodes[out].tensor.shape().last().expect("softmax rank >= 1");
                let gx = grads.acc(x, g.len());
                for r in 0..g.len() / m {
                    let (ys, gs) = (&y[r * m..(r + 1) * m], &g[r * m..(r + 1) * m]);
                    let mut dot = T::ZERO;
                    for i in 0..m {
                        dot += ys[i] * gs[i];
                    }
                    let dst = &mut gx[r * m..(r + 1) * m];
                    for i in 0..m {
                        dst[i] += ys[i] * (gs[i] - dot);
                    }
                }
            }
        }
        Op::Gelu { x } => {
            if nodes[x].needs {
                let xd = nodes[x].tensor.data();
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(INV_SQRT_2PI);
                let gx = grads.acc(x, g.len());
                for i in 0..g.len() {
                    let v = xd[i];
                    let phi_cdf = half * (T::ONE + (v * inv_sqrt2).erf());
                    let phi_pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                    gx[i] += g[i] * (phi_cdf + v * phi_pdf);
                }
            }
        }
        Op::LeakyRelu { x, slope } => {
            if nodes[x].needs {
                let xd = nodes[x].tensor.data();
                let gx = grads.acc(x, g.len());
                for i in 0..g.len() {
                    gx[i] += if xd[i] > T::ZERO { g[i] } else { g[i] * slope };
                }
            }
        }
        Op::Dropout { x, mask } => {
            if nodes[x].needs {
                let gx = grads.acc(x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let c = *nodes[x].tensor.shape().last().expect("rank >= 1");
            norm_backward(x, gamma, beta, &mean, &rstd, c, g, nodes, grads, false);
        }
        Op::InstanceNorm { x, gamma, beta, mean, rstd } => {
            let m: usize = nodes[x].tensor.shape()[2..].iter().product();
            norm_backward(x, gamma, beta, &mean, &rstd, m, g, nodes, grads, true);
        }
        Op::Conv3d { x, w, bias, geom } => {
            let (gx, gw, gb) = kernels::conv3d_backward(
                nodes[x].tensor.data(),
                nodes[w].tensor.data(),
                g,
                &geom,
                nodes[x].needs,
            );
            if nodes[x].needs {
                grads.add_slice(x, &gx);
            }
            if nodes[w].needs {
                grads.add_slice(w, &gw);
            }
            if nodes[bias].needs {
                grads.add_slice(bias, &gb);
            }
        }
        Op::ConvT3d { x, w, geom } => {
            let (gx, gw) = kernels::convt3d_backward(
                nodes[x].tensor.data(),
                nodes[w].tensor.data(),
                g,
                &geom,
                nodes[x].needs,
            );
            if nodes[x].needs {
                grads.add_slice(x, &gx);
            }
            if nodes[w].needs {
                grads.add_slice(w, &gw);
            }
        }
        Op::ConcatChannels { a, b, a_channels } => {
            let sa = nodes[a].tensor.shape();
            let batch = sa[0];
            let rest: usize = sa[2..].iter().product();
            let cb = nodes[b].tensor.shape()[1];
            let (la, lb) = (a_channels * rest, cb * rest);
            if nodes[a].needs {
                let ga = grads.acc(a, batch * la);
                for bi in 0..batch {
                    let src = &g[bi * (la + lb)..bi * (la + lb) + la];
                    for (d, &s) in ga[bi * la..(bi + 1) * la].iter_mut().zip(src.iter()) {
                        *d += s;
                    }
                }
            }
            if nodes[b].needs {
                let gb = grads.acc(b, batch * lb);
                for bi in 0..batch {
                    let src = &g[bi * (la + lb) + la..(bi + 1) * (la + lb)];
                    for (d, &s) in gb[bi * lb..(bi + 1) * lb].iter_mut().zip(src.iter()) {
                        *d += s;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, ignore, count, lse } => {
            if nodes[logits].needs {
                let xd = nodes[logits].tensor.data();
                let s = nodes[logits].tensor.shape();
                let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = g[0] / T::from_usize(count);
                let gx = grads.acc(logits, xd.len());
                for bi in 0..b {
                    for p in 0..hw {
                        let l = labels[bi * hw + p];
                        if l == ignore {
                            continue;
                        }
                        let z = lse[bi * hw + p];
                        for ki in 0..k {
                            let idx = (bi * k + ki) * hw + p;
                            let soft = (xd[idx] - z).exp();
                            let delta = if ki == l as usize { T::ONE } else { T::ZERO };
                            gx[idx] += (soft - delta) * scale;
                        }
                    }
                }
            }
        }
        Op::SumAll { x } => {
            if nodes[x].needs {
                let len = nodes[x].tensor.numel();
                let gx = grads.acc(x, len);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
    }
}

/// Shared backward for layer/instance norm. `per_channel` selects the
/// instance-norm convention where gamma indexes `slice % C`.
#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Scalar>(
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    mean: &[T],
    rstd: &[T],
    slice_len: usize,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut GradBufs<T>,
    per_channel: bool,
) {
    let xd = nodes[x].tensor.data();
    let gd = nodes[gamma].tensor.data();
    let c = nodes[gamma].tensor.numel();
    let inv_n = T::ONE / T::from_usize(slice_len);
    let slices = xd.len() / slice_len;

    if nodes[gamma].needs || nodes[beta].needs {
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        for sl in 0..slices {
            let (mu, rs) = (mean[sl], rstd[sl]);
            let xr = &xd[sl * slice_len..(sl + 1) * slice_len];
            let gr = &g[sl * slice_len..(sl + 1) * slice_len];
            if per_channel {
                let ch = sl % c;
                let mut sg = T::ZERO;
                let mut sgx = T::ZERO;
                for i in 0..slice_len {
                    sg += gr[i];
                    sgx += gr[i] * (xr[i] - mu) * rs;
                }
                dbeta[ch] += sg;
                dgamma[ch] += sgx;
            } else {
                for i in 0..slice_len {
                    dbeta[i] += gr[i];
                    dgamma[i] += gr[i] * (xr[i] - mu) * rs;
                }
            }
        }
        if nodes[gamma].needs {
            grads.add_slice(gamma, &dgamma);
        }
        if nodes[beta].needs {
            grads.add_slice(beta, &dbeta);
        }
    }

    if nodes[x].needs {
        let gx = grads.acc(x, xd.len());
        for sl in 0..slices {
            let (mu, rs) = (mean[sl], rstd[sl]);
            let xr = &xd[sl * slice_len..(sl + 1) * slice_len];
            let gr = &g[sl * slice_len..(sl + 1) * slice_len];
            let mut mg = T::ZERO;
            let mut mgx = T::ZERO;
            for i in 0..slice_len {
                let gamma_i = if per_channel { gd[sl % c] } else { gd[i] };
                let gi = gr[i] * gamma_i;
                mg += gi;
                mgx += gi * (xr[i] - mu) * rs;
            }
            mg = mg * inv_n;
            mgx = mgx * inv_n;
            let dst = &mut gx[sl * slice_len..(sl + 1) * slice_len];
            for i in 0..slice_len {
                let gamma_i = if per_channel { gd[sl % c] } else { gd[i] };
                let gi = gr[i] * gamma_i;
                let xh = (xr[i] - mu) * rs;
                dst[i] += rs * (gi - mg - xh * mgx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor1d(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(
            Tensor::new(vec![3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap(),
        );
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| {
            if i / 3 == i % 3 { 1.0 } else { 0.0 }
        }));
        let zero = tape.constant(Tensor::zeros(&[3, 3]));
        let ai = matmul(&mut tape, a, eye).unwrap();
        assert_eq!(tape.data(ai), tape.data(a));
        let az = matmul(&mut tape, a, zero).unwrap();
        assert!(tape.data(az).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = matmul(&mut tape, a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_reports_both_shapes_on_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = matmul(&mut tape, a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let mut rng = SplitMix64::new(9);
        let a = Tensor::<f64>::rand_uniform(&[2, 3, 4, 5], &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[2, 3, 5, 2], &mut rng);
        let mut tape = Tape::new();
        let ai = tape.constant(a.clone());
        let bi = tape.constant(b.clone());
        let c = matmul(&mut tape, ai, bi).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 4, 2]);
        for batch in 0..6 {
            for i in 0..4 {
                for j in 0..2 {
                    let mut s = 0.0;
                    for p in 0..5 {
                        s += a.data()[batch * 20 + i * 5 + p] * b.data()[batch * 10 + p * 2 + j];
                    }
                    let got = tape.data(c)[batch * 8 + i * 2 + j];
                    assert!(close(got, s, 1e-12));
                }
            }
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = SplitMix64::new(4);
        let a = Tensor::<f64>::rand_uniform(&[3, 4], &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[5, 4], &mut rng);
        let mut bt_data = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                bt_data[j * 5 + i] = b.data()[i * 4 + j];
            }
        }
        let bt = Tensor::new(vec![4, 5], bt_data).unwrap();
        let mut tape = Tape::new();
        let (ai, bi, bti) = (tape.constant(a), tape.constant(b), tape.constant(bt));
        let via_nt = matmul_nt(&mut tape, ai, bi).unwrap();
        let via_nn = matmul(&mut tape, ai, bti).unwrap();
        assert_eq!(tape.data(via_nt), tape.data(via_nn));
    }

    #[test]
    fn softmax_constant_slice_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4], 2.5f64));
        let y = softmax_last(&mut tape, x).unwrap();
        for &v in tape.data(y) {
            assert!(close(v, 0.25, 1e-12));
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor1d(&[0.3, -1.2, 2.0, 0.7]));
        let c = Tensor::full(&[4], 17.5f64);
        let xs = add_const(&mut tape, x, &c).unwrap();
        let y = softmax_last(&mut tape, x).unwrap();
        let ys = softmax_last(&mut tape, xs).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(ys).iter()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn softmax_forced_values() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor1d(&[0.0, 2.0f64.ln()]));
        let y = softmax_last(&mut tape, x).unwrap();
        assert!(close(tape.data(y)[0], 1.0 / 3.0, 1e-12));
        assert!(close(tape.data(y)[1], 2.0 / 3.0, 1e-12));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.0f64));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = layer_norm(&mut tape, x, g, b, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert!(close(v, 0.0, 1e-9));
        }
    }

    #[test]
    fn layer_norm_identity_on_normalized_input() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor1d(&[1.0, -1.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = layer_norm(&mut tape, x, g, b, 1e-12).unwrap();
        assert!(close(tape.data(y)[0], 1.0, 1e-6));
        assert!(close(tape.data(y)[1], -1.0, 1e-6));
    }

    #[test]
    fn layer_norm_gamma_zero_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor1d(&[0.4, -2.0, 1.1]));
        let g = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(tensor1d(&[7.0, 8.0, 9.0]));
        let y = layer_norm(&mut tape, x, g, b, 1e-5).unwrap();
        assert_eq!(tape.data(y), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor1d(&[1.0, 2.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(layer_norm(&mut tape, x, g, b, 0.0), Err(Error::Param(_))));
        assert!(matches!(layer_norm(&mut tape, x, g, b, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn layer_norm_statistics_property() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..10 {
            let x = Tensor::<f64>::rand_uniform(&[4, 8], &mut rng);
            let mut tape = Tape::new();
            let xi = tape.constant(x);
            let g = tape.constant(Tensor::full(&[8], 1.0));
            let b = tape.constant(Tensor::zeros(&[8]));
            let y = layer_norm(&mut tape, xi, g, b, 1e-10).unwrap();
            for row in tape.data(y).chunks_exact(8) {
                let mean: f64 = row.iter().sum::<f64>() / 8.0;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn gelu_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor1d(&[0.0, 10.0, 1.0]));
        let y = gelu(&mut tape, x).unwrap();
        let d = tape.data(y);
        assert_eq!(d[0], 0.0);
        assert!(close(d[1], 10.0, 1e-6));
        assert!(close(d[2], 0.8413447460685429, 1e-9));
    }

    #[test]
    fn conv3d_pointwise_identity() {
        let mut rng = SplitMix64::new(3);
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv3d(&mut tape, xi, w, b, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn conv3d_counting_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4, 4], 1.0f64));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv3d(&mut tape, x, w, b, [2, 2, 2], [0, 0, 0]).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2, 2]);
        for &v in tape.data(y) {
            assert_eq!(v, 8.0);
        }
    }

    #[test]
    fn conv3d_shape_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 1, 32, 48, 48]));
        let w = tape.constant(Tensor::zeros(&[6, 1, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = conv3d(&mut tape, x, w, b, [2, 2, 2], [0, 0, 0]).unwrap();
        assert_eq!(tape.shape(y), &[1, 6, 16, 24, 24]);
    }

    #[test]
    fn conv3d_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            conv3d(&mut tape, x, w, b, [1, 1, 1], [0, 0, 0]),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn conv3d_transpose_shape_and_scatter() {
        let mut tape = Tape::new();
        let mut x = Tensor::<f64>::zeros(&[1, 1, 2, 3, 3]);
        x.data_mut()[4] = 1.0; // voxel (d=0, h=1, w=1)
        let xi = tape.constant(x);
        let w = tape.constant(Tensor::full(&[1, 2, 2, 2, 2], 1.0));
        let y = conv3d_transpose(&mut tape, xi, w, [2, 2, 2]).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4, 6, 6]);
        // the single unit voxel becomes a 2x2x2 block of ones in each output channel
        let d = tape.data(y);
        let vol = 4 * 6 * 6;
        let mut ones = 0;
        for f in 0..2 {
            for z in 0..4 {
                for h in 0..6 {
                    for wx in 0..6 {
                        let v = d[f * vol + (z * 6 + h) * 6 + wx];
                        if (0..2).contains(&z) && (2..4).contains(&h) && (2..4).contains(&wx) {
                            assert_eq!(v, 1.0);
                            ones += 1;
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
        assert_eq!(ones, 16);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv3d(x), y> == <x, conv3d_transpose(y)> with shared weights
        let mut rng = SplitMix64::new(17);
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 4, 6, 6], &mut rng);
        let y = Tensor::<f64>::rand_uniform(&[2, 2, 2, 3, 3], &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[2, 3, 2, 2, 2], &mut rng); // [F, C, k, k, k]
        // viewed as the transpose weight, axis 0 is the transpose's input
        // channels (F) and axis 1 its output channels (C): same buffer.
        let wt = Tensor::new(vec![2, 3, 2, 2, 2], w.data().to_vec()).unwrap();
        let mut tape = Tape::new();
        let (xi, yi) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let wi = tape.constant(w);
        let wti = tape.constant(wt);
        let bias = tape.constant(Tensor::zeros(&[2]));
        let cx = conv3d(&mut tape, xi, wi, bias, [2, 2, 2], [0, 0, 0]).unwrap();
        let cty = conv3d_transpose(&mut tape, yi, wti, [2, 2, 2]).unwrap();
        let lhs: f64 = tape.data(cx).iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.data(cty)).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() / (lhs.abs() + 1e-8) < 1e-5,
            "adjointness violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let k = 18;
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[1, k, 2, 2]));
        let labels = vec![3u8, 0, 17, 5];
        let loss = cross_entropy(&mut tape, logits, &labels, 255).unwrap();
        assert!(close(tape.scalar_value(loss), (k as f64).ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_confident_correct_logit() {
        let mut tape = Tape::new();
        let mut t = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        t.data_mut()[1] = 100.0;
        let logits = tape.constant(t);
        let loss = cross_entropy(&mut tape, logits, &[1], 255).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![1, 2, 1, 1], vec![0.0, 3.0f64.ln()]).unwrap();
        let logits = tape.constant(t);
        let loss = cross_entropy(&mut tape, logits, &[1], 255).unwrap();
        assert!(close(tape.scalar_value(loss), -(0.75f64.ln()), 1e-12));
    }

    #[test]
    fn cross_entropy_ignores_and_degenerates() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[1, 3, 1, 2]));
        assert!(matches!(
            cross_entropy(&mut tape, logits, &[255, 255], 255),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            cross_entropy(&mut tape, logits, &[3, 0], 255),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn backward_of_sum_of_squares_is_2w() {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor1d(&[1.5, -2.0, 0.25]).with_grad());
        let sq = mul(&mut tape, w, w).unwrap();
        let loss = sum_all(&mut tape, sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_of_unused_leaf_is_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor1d(&[1.0, 2.0]).with_grad());
        let x = tape.constant(tensor1d(&[5.0]));
        let loss = sum_all(&mut tape, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_and_reruns() {
        let mut tape = Tape::new();
        let w = tape.leaf(tensor1d(&[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Dim(_))));
        let mut tape = Tape::new();
        let w = tape.leaf(tensor1d(&[1.0, 2.0]).with_grad());
        let sq = mul(&mut tape, w, w).unwrap();
        let loss = sum_all(&mut tape, sq).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn concat_and_gather_roundtrips() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1, 3], vec![7.0, 8.0, 9.0]).unwrap());
        let c = concat_channels(&mut tape, a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 3]);
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);

        let table = tape.constant(Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let got = gather_rows(&mut tape, table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(got), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(matches!(gather_rows(&mut tape, table, &[3]), Err(Error::Range(_))));
    }

    #[test]
    fn cyclic_shift_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        // spec example: [0,1,2,3] rolled by 1 -> [3,0,1,2]; that is the undo direction
        let rolled = cyclic_shift(&mut tape, x, [0, 0, 1], -1).unwrap();
        assert_eq!(tape.data(rolled), &[3.0, 0.0, 1.0, 2.0]);
        let back = cyclic_shift(&mut tape, rolled, [0, 0, 1], 1).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
        let same = cyclic_shift(&mut tape, x, [0, 0, 0], 1).unwrap();
        assert_eq!(tape.data(same), tape.data(x));
    }

    #[test]
    fn instance_norm_normalizes_each_channel_slice() {
        let mut rng = SplitMix64::new(8);
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 2, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = instance_norm(&mut tape, xi, g, b, 1e-10).unwrap();
        for slice in tape.data(y).chunks_exact(8) {
            let mean: f64 = slice.iter().sum::<f64>() / 8.0;
            let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor1d(&[1.0, 2.0]));
        let mut rng = SplitMix64::new(1);
        let y = dropout(&mut tape, x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y); // same node: the generator was not consumed
        // nonzero rate masks some entries and rescales the rest
        let big = tape.constant(Tensor::full(&[1000], 1.0f64));
        let z = dropout(&mut tape, big, 0.5, &mut rng).unwrap();
        let kept = tape.data(z).iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 350 && kept < 650);
        assert!(tape.data(z).iter().all(|&v| v == 0.0 || close(v, 2.0, 1e-12)));
    }
}
