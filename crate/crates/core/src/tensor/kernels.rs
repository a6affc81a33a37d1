//! Raw numeric kernels shared by the forward ops and their backward passes.
//!
//! All matrix kernels accumulate into `out` (callers zero the buffer when a
//! plain product is wanted), which lets backward passes add contributions
//! from several consumers without temporaries. Reductions use a fixed
//! summation order so results are reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src.iter()) {
        *o += a * v;
    }
}

// Column tile that keeps a few output rows plus one b-row inside L1.
const MM_TILE: usize = 1024;

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m <= 16 && n >= 64 {
        // few output rows: tile columns so b streams exactly once
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + MM_TILE).min(n);
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j1];
                for i in 0..m {
                    axpy(&mut out[i * n + j0..i * n + j1], a[i * k + p], brow);
                }
            }
            j0 = j1;
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(orow, aip, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (rows of `b` are dotted against rows of `a`)
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if m <= 16 && n >= 64 {
        // few source rows: tile columns so `out` streams exactly once
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + MM_TILE).min(n);
            for p in 0..k {
                // split borrows: out row p, b rows 0..m
                let orow = &mut out[p * n + j0..p * n + j1];
                for i in 0..m {
                    let aip = a[i * k + p];
                    let brow = &b[i * n + j0..i * n + j1];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += aip * bv;
                    }
                }
            }
            j0 = j1;
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(&mut out[p * n..(p + 1) * n], aip, brow);
        }
    }
}

/// Dot product with eight independent accumulators (fixed combine order).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let whole = a.len() / 8 * 8;
    let (ah, at) = a.split_at(whole);
    let (bh, bt) = b.split_at(whole);
    for (ac, bc) in ah.chunks_exact(8).zip(bh.chunks_exact(8)) {
        for lane in 0..8 {
            acc[lane] += ac[lane] * bc[lane];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in at.iter().zip(bt.iter()) {
        s += x * y;
    }
    s
}

/// Copy `src` (row-major `shape`) into `dst` laid out with axes reordered so
/// that output axis `i` is input axis `axes[i]`.
pub fn permute_copy<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize], dst: &mut [T]) {
    let rank = shape.len();
    debug_assert_eq!(axes.len(), rank);
    debug_assert_eq!(src.len(), dst.len());
    if rank == 0 {
        dst.copy_from_slice(src);
        return;
    }
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut coords = vec![0usize; rank];
    let mut src_off = 0usize;
    for slot in dst.iter_mut() {
        *slot = src[src_off];
        // odometer over the output coordinates, last axis fastest
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            src_off += step[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            coords[axis] = 0;
            src_off -= step[axis] * out_shape[axis];
        }
    }
}

/// Circular roll of a `[B, D, H, W, C]` volume: output voxel (d,h,w) reads
/// input ((d+s0)%D, (h+s1)%H, (w+s2)%W). Channel rows move as blocks.
pub fn roll3d_copy<T: Scalar>(src: &[T], dims: [usize; 5], shift: [usize; 3], dst: &mut [T]) {
    let [b_, d_, h_, w_, c_] = dims;
    debug_assert_eq!(src.len(), b_ * d_ * h_ * w_ * c_);
    debug_assert_eq!(src.len(), dst.len());
    let row = c_;
    for b in 0..b_ {
        for d in 0..d_ {
            let sd = (d + shift[0]) % d_;
            for h in 0..h_ {
                let sh = (h + shift[1]) % h_;
                for w in 0..w_ {
                    let sw = (w + shift[2]) % w_;
                    let src_off = (((b * d_ + sd) * h_ + sh) * w_ + sw) * row;
                    let dst_off = (((b * d_ + d) * h_ + h) * w_ + w) * row;
                    dst[dst_off..dst_off + row].copy_from_slice(&src[src_off..src_off + row]);
                }
            }
        }
    }
}

/// Geometry of a strided 3-d cross-correlation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

impl Conv3dGeom {
    pub fn infer(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::dim(format!(
                "conv3d expects rank-5 input and weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::dim(format!(
                "conv3d channel mismatch: input {x_shape:?} vs weight {w_shape:?}"
            )));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Param(format!("conv3d stride must be positive, got {stride:?}")));
        }
        let in_dims = [x_shape[2], x_shape[3], x_shape[4]];
        let kernel = [w_shape[2], w_shape[3], w_shape[4]];
        let mut out_dims = [0usize; 3];
        for i in 0..3 {
            let padded = in_dims[i] + 2 * pad[i];
            if kernel[i] == 0 || kernel[i] > padded {
                return Err(Error::dim(format!(
                    "conv3d kernel {kernel:?} does not fit padded input {in_dims:?} (pad {pad:?})"
                )));
            }
            out_dims[i] = (padded - kernel[i]) / stride[i] + 1;
        }
        Ok(Conv3dGeom {
            batch: x_shape[0],
            in_channels: x_shape[1],
            out_channels: w_shape[0],
            in_dims,
            kernel,
            stride,
            pad,
            out_dims,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    fn k_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    /// Column-chunk width keeping the gather buffer around 8 MiB.
    fn chunk(&self) -> usize {
        let bytes = 8usize << 20;
        let per_col = self.k_rows() * std::mem::size_of::<f64>();
        (bytes / per_col.max(1)).max(64).min(self.out_positions().max(1))
    }
}

fn im2col_chunk<T: Scalar>(x: &[T], g: &Conv3dGeom, b: usize, n0: usize, n1: usize, col: &mut [T]) {
    let [dd, hh, ww] = g.in_dims;
    let [_od, oh_, ow_] = g.out_dims;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let nc = n1 - n0;
    let x_b = &x[b * g.in_channels * g.in_volume()..][..g.in_channels * g.in_volume()];
    let unit_stride = g.stride == [1, 1, 1];
    let mut row = 0usize;
    for c in 0..g.in_channels {
        let x_c = &x_b[c * g.in_volume()..][..g.in_volume()];
        for kz in 0..g.kernel[0] {
            for ky in 0..g.kernel[1] {
                for kx in 0..g.kernel[2] {
                    let dst = &mut col[row * nc..(row + 1) * nc];
                    if unit_stride {
                        // walk whole output rows; the w axis maps to one
                        // contiguous input run with zero edges from padding
                        let mut n = n0;
                        let mut filled = 0usize;
                        while n < n1 {
                            let od = n / (oh_ * ow_);
                            let rem = n % (oh_ * ow_);
                            let oh = rem / ow_;
                            let ow0 = rem % ow_;
                            let run = (ow_ - ow0).min(n1 - n);
                            let seg = &mut dst[filled..filled + run];
                            let iz = (od + kz) as isize - pd as isize;
                            let iy = (oh + ky) as isize - ph as isize;
                            if iz < 0 || iz as usize >= dd || iy < 0 || iy as usize >= hh {
                                seg.fill(T::ZERO);
                            } else {
                                let src =
                                    &x_c[(iz as usize * hh + iy as usize) * ww..][..ww];
                                // valid ow range: pw-kx <= ow < ww+pw-kx
                                let lo = (pw as isize - kx as isize).max(ow0 as isize) as usize;
                                let hi_excl = ((ww + pw) as isize - kx as isize)
                                    .clamp(0, (ow0 + run) as isize)
                                    as usize;
                                let lo = lo.min(ow0 + run);
                                let hi = hi_excl.max(lo);
                                seg[..lo - ow0].fill(T::ZERO);
                                seg[hi - ow0..].fill(T::ZERO);
                                if hi > lo {
                                    let src_lo = (lo as isize + kx as isize - pw as isize) as usize;
                                    seg[lo - ow0..hi - ow0]
                                        .copy_from_slice(&src[src_lo..src_lo + (hi - lo)]);
                                }
                            }
                            filled += run;
                            n += run;
                        }
                    } else {
                        let (mut od, mut oh, mut ow) =
                            (n0 / (oh_ * ow_), (n0 / ow_) % oh_, n0 % ow_);
                        for slot in dst.iter_mut() {
                            let iz = (od * sd + kz) as isize - pd as isize;
                            let iy = (oh * sh + ky) as isize - ph as isize;
                            let ix = (ow * sw + kx) as isize - pw as isize;
                            *slot = if iz >= 0
                                && (iz as usize) < dd
                                && iy >= 0
                                && (iy as usize) < hh
                                && ix >= 0
                                && (ix as usize) < ww
                            {
                                x_c[(iz as usize * hh + iy as usize) * ww + ix as usize]
                            } else {
                                T::ZERO
                            };
                            ow += 1;
                            if ow == ow_ {
                                ow = 0;
                                oh += 1;
                                if oh == oh_ {
                                    oh = 0;
                                    od += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im_add_chunk<T: Scalar>(
    col: &[T],
    g: &Conv3dGeom,
    b: usize,
    n0: usize,
    n1: usize,
    gx: &mut [T],
) {
    let [dd, hh, ww] = g.in_dims;
    let [_od, oh_, ow_] = g.out_dims;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let nc = n1 - n0;
    let gx_b = &mut gx[b * g.in_channels * g.in_volume()..][..g.in_channels * g.in_volume()];
    let unit_stride = g.stride == [1, 1, 1];
    let mut row = 0usize;
    for c in 0..g.in_channels {
        let vol = g.in_volume();
        let gx_c = &mut gx_b[c * vol..(c + 1) * vol];
        for kz in 0..g.kernel[0] {
            for ky in 0..g.kernel[1] {
                for kx in 0..g.kernel[2] {
                    let src = &col[row * nc..(row + 1) * nc];
                    if unit_stride {
                        let mut n = n0;
                        let mut consumed = 0usize;
                        while n < n1 {
                            let od = n / (oh_ * ow_);
                            let rem = n % (oh_ * ow_);
                            let oh = rem / ow_;
                            let ow0 = rem % ow_;
                            let run = (ow_ - ow0).min(n1 - n);
                            let seg = &src[consumed..consumed + run];
                            let iz = (od + kz) as isize - pd as isize;
                            let iy = (oh + ky) as isize - ph as isize;
                            if iz >= 0 && (iz as usize) < dd && iy >= 0 && (iy as usize) < hh {
                                let dst =
                                    &mut gx_c[(iz as usize * hh + iy as usize) * ww..][..ww];
                                let lo = (pw as isize - kx as isize).max(ow0 as isize) as usize;
                                let hi_excl = ((ww + pw) as isize - kx as isize)
                                    .clamp(0, (ow0 + run) as isize)
                                    as usize;
                                let lo = lo.min(ow0 + run);
                                let hi = hi_excl.max(lo);
                                if hi > lo {
                                    let dst_lo = (lo as isize + kx as isize - pw as isize) as usize;
                                    for (d, &s) in dst[dst_lo..dst_lo + (hi - lo)]
                                        .iter_mut()
                                        .zip(seg[lo - ow0..hi - ow0].iter())
                                    {
                                        *d += s;
                                    }
                                }
                            }
                            consumed += run;
                            n += run;
                        }
                    } else {
                        let (mut od, mut oh, mut ow) =
                            (n0 / (oh_ * ow_), (n0 / ow_) % oh_, n0 % ow_);
                        for &v in src.iter() {
                            let iz = (od * sd + kz) as isize - pd as isize;
                            let iy = (oh * sh + ky) as isize - ph as isize;
                            let ix = (ow * sw + kx) as isize - pw as isize;
                            if iz >= 0
                                && (iz as usize) < dd
                                && iy >= 0
                                && (iy as usize) < hh
                                && ix >= 0
                                && (ix as usize) < ww
                            {
                                gx_c[(iz as usize * hh + iy as usize) * ww + ix as usize] += v;
                            }
                            ow += 1;
                            if ow == ow_ {
                                ow = 0;
                                oh += 1;
                                if oh == oh_ {
                                    oh = 0;
                                    od += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Conv3dGeom {
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Chunked im2col + matmul cross-correlation. `bias` has one entry per
/// output channel. Pointwise (1x1x1) convolutions skip the gather and run
/// as one matmul per sample.
pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &Conv3dGeom) -> Vec<T> {
    let n = g.out_positions();
    let k = g.k_rows();
    let f = g.out_channels;
    let mut out = vec![T::ZERO; g.batch * f * n];
    if g.is_pointwise() {
        let c = g.in_channels;
        for b in 0..g.batch {
            let x_b = &x[b * c * n..(b + 1) * c * n];
            let o_b = &mut out[b * f * n..(b + 1) * f * n];
            mm_nn(w, x_b, o_b, f, c, n);
            for fi in 0..f {
                let bv = bias[fi];
                for o in o_b[fi * n..(fi + 1) * n].iter_mut() {
                    *o += bv;
                }
            }
        }
        return out;
    }
    let chunk = g.chunk();
    let mut col = vec![T::ZERO; k * chunk];
    let mut out_chunk = vec![T::ZERO; f * chunk];
    for b in 0..g.batch {
        let mut n0 = 0usize;
        while n0 < n {
            let n1 = (n0 + chunk).min(n);
            let nc = n1 - n0;
            im2col_chunk(x, g, b, n0, n1, &mut col[..k * nc]);
            out_chunk[..f * nc].fill(T::ZERO);
            mm_nn(w, &col[..k * nc], &mut out_chunk[..f * nc], f, k, nc);
            for fi in 0..f {
                let dst = &mut out[(b * f + fi) * n + n0..(b * f + fi) * n + n1];
                dst.copy_from_slice(&out_chunk[fi * nc..(fi + 1) * nc]);
            }
            n0 = n1;
        }
        for fi in 0..f {
            let bv = bias[fi];
            for o in out[(b * f + fi) * n..(b * f + fi + 1) * n].iter_mut() {
                *o += bv;
            }
        }
    }
    out
}

/// Gradients of [`conv3d_forward`] with respect to input, weight, and bias.
/// `gx` is skipped (left empty of work) when `need_gx` is false.
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &Conv3dGeom,
    need_gx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = g.out_positions();
    let k = g.k_rows();
    let f = g.out_channels;
    let mut gx = vec![T::ZERO; if need_gx { x.len() } else { 0 }];
    let mut gw = vec![T::ZERO; w.len()];
    let mut gb = vec![T::ZERO; f];
    if g.is_pointwise() {
        let c = g.in_channels;
        for b in 0..g.batch {
            let x_b = &x[b * c * n..(b + 1) * c * n];
            let gy_b = &gy[b * f * n..(b + 1) * f * n];
            for fi in 0..f {
                let mut s = T::ZERO;
                for &v in &gy_b[fi * n..(fi + 1) * n] {
                    s += v;
                }
                gb[fi] += s;
            }
            mm_nt(gy_b, x_b, &mut gw, f, n, c);
            if need_gx {
                let gx_b = &mut gx[b * c * n..(b + 1) * c * n];
                mm_tn(w, gy_b, gx_b, f, c, n);
            }
        }
        return (gx, gw, gb);
    }
    let chunk = g.chunk();
    let mut col = vec![T::ZERO; k * chunk];
    let mut gy_chunk = vec![T::ZERO; f * chunk];
    let mut gcol = vec![T::ZERO; k * chunk];
    for b in 0..g.batch {
        for fi in 0..f {
            let row = &gy[(b * f + fi) * n..(b * f + fi + 1) * n];
            let mut s = T::ZERO;
            for &v in row {
                s += v;
            }
            gb[fi] += s;
        }
        let mut n0 = 0usize;
        while n0 < n {
            let n1 = (n0 + chunk).min(n);
            let nc = n1 - n0;
            im2col_chunk(x, g, b, n0, n1, &mut col[..k * nc]);
            for fi in 0..f {
                gy_chunk[fi * nc..(fi + 1) * nc]
                    .copy_from_slice(&gy[(b * f + fi) * n + n0..(b * f + fi) * n + n1]);
            }
            mm_nt(&gy_chunk[..f * nc], &col[..k * nc], &mut gw, f, nc, k);
            if need_gx {
                gcol[..k * nc].fill(T::ZERO);
                mm_tn(w, &gy_chunk[..f * nc], &mut gcol[..k * nc], f, k, nc);
                col2im_add_chunk(&gcol[..k * nc], g, b, n0, n1, &mut gx);
            }
            n0 = n1;
        }
    }
    (gx, gw, gb)
}

/// Geometry of the kernel==stride, zero-pad transposed convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvT3dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
}

impl ConvT3dGeom {
    pub fn infer(x_shape: &[usize], w_shape: &[usize], stride: [usize; 3]) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::dim(format!(
                "conv3d_transpose expects rank-5 input and weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[1] != w_shape[0] {
            return Err(Error::dim(format!(
                "conv3d_transpose channel mismatch: input {x_shape:?} vs weight {w_shape:?}"
            )));
        }
        let kernel = [w_shape[2], w_shape[3], w_shape[4]];
        if kernel != stride {
            return Err(Error::Unsupported(format!(
                "conv3d_transpose only supports kernel == stride, got kernel {kernel:?} stride {stride:?}"
            )));
        }
        Ok(ConvT3dGeom {
            batch: x_shape[0],
            in_channels: x_shape[1],
            out_channels: w_shape[1],
            in_dims: [x_shape[2], x_shape[3], x_shape[4]],
            kernel,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.in_dims[0] * self.kernel[0],
            self.in_dims[1] * self.kernel[1],
            self.in_dims[2] * self.kernel[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn k3(&self) -> usize {
        self.kernel.iter().product()
    }
}

// With kernel == stride the output blocks never overlap, so the transposed
// convolution is one matmul per sample followed by a pure scatter.
fn convt_place<T: Scalar>(colb: &[T], out: &mut [T], g: &ConvT3dGeom, b: usize) {
    let [d_, h_, w_] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let m = g.in_volume();
    let (od_h, od_w) = (h_ * kh, w_ * kw);
    let f = g.out_channels;
    let out_vol = d_ * kd * od_h * od_w;
    let out_b = &mut out[b * f * out_vol..(b + 1) * f * out_vol];
    let mut row = 0usize;
    for fi in 0..f {
        let out_f = &mut out_b[fi * out_vol..(fi + 1) * out_vol];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &colb[row * m..(row + 1) * m];
                    let mut idx = 0usize;
                    for d in 0..d_ {
                        let oz = d * kd + kz;
                        for h in 0..h_ {
                            let oy = h * kh + ky;
                            let base = (oz * od_h + oy) * od_w + kx;
                            for w in 0..w_ {
                                out_f[base + w * kw] = src[idx];
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn convt_gather<T: Scalar>(gy: &[T], colb: &mut [T], g: &ConvT3dGeom, b: usize) {
    let [d_, h_, w_] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let m = g.in_volume();
    let (od_h, od_w) = (h_ * kh, w_ * kw);
    let f = g.out_channels;
    let out_vol = d_ * kd * od_h * od_w;
    let gy_b = &gy[b * f * out_vol..(b + 1) * f * out_vol];
    let mut row = 0usize;
    for fi in 0..f {
        let gy_f = &gy_b[fi * out_vol..(fi + 1) * out_vol];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut colb[row * m..(row + 1) * m];
                    let mut idx = 0usize;
                    for d in 0..d_ {
                        let oz = d * kd + kz;
                        for h in 0..h_ {
                            let oy = h * kh + ky;
                            let base = (oz * od_h + oy) * od_w + kx;
                            for w in 0..w_ {
                                dst[idx] = gy_f[base + w * kw];
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Transposed convolution forward (`w` laid out `[C, F, kd, kh, kw]`).
pub fn convt3d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvT3dGeom) -> Vec<T> {
    let m = g.in_volume();
    let fk = g.out_channels * g.k3();
    let c = g.in_channels;
    let out_len: usize = g.out_shape().iter().product();
    let mut out = vec![T::ZERO; out_len];
    let mut colb = vec![T::ZERO; fk * m];
    for b in 0..g.batch {
        let x_b = &x[b * c * m..(b + 1) * c * m];
        colb.fill(T::ZERO);
        mm_tn(w, x_b, &mut colb, c, fk, m);
        convt_place(&colb, &mut out, g, b);
    }
    out
}

/// Gradients of [`convt3d_forward`] with respect to input and weight.
/// `gx` is skipped when `need_gx` is false.
pub fn convt3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvT3dGeom,
    need_gx: bool,
) -> (Vec<T>, Vec<T>) {
    let m = g.in_volume();
    let fk = g.out_channels * g.k3();
    let c = g.in_channels;
    let mut gx = vec![T::ZERO; if need_gx { x.len() } else { 0 }];
    let mut gw = vec![T::ZERO; w.len()];
    let mut gcol = vec![T::ZERO; fk * m];
    for b in 0..g.batch {
        convt_gather(gy, &mut gcol, g, b);
        let x_b = &x[b * c * m..(b + 1) * c * m];
        if need_gx {
            let gx_b = &mut gx[b * c * m..(b + 1) * c * m];
            mm_nn(w, &gcol, gx_b, c, fk, m);
        }
        mm_nt(x_b, &gcol, &mut gw, c, m, fk);
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_small() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        mm_nn(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mm_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut nn = vec![0.0; m * n];
        mm_nn(&a, &b, &mut nn, m, k, n);
        // b transposed -> same product through mm_nt
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut nt = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut nt, m, k, n);
        assert_eq!(nn, nt);
        // a transposed -> same product through mm_tn
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut tn = vec![0.0; m * n];
        mm_tn(&at, &b, &mut tn, k, m, n);
        assert_eq!(nn, tn);
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2usize, 3, 4];
        let src: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mut mid = vec![0.0; 24];
        permute_copy(&src, &shape, &[2, 0, 1], &mut mid);
        let mut back = vec![0.0; 24];
        // inverse of [2,0,1] is [1,2,0]
        permute_copy(&mid, &[4, 2, 3], &[1, 2, 0], &mut back);
        assert_eq!(src, back);
    }

    #[test]
    fn roll_matches_modular_index() {
        let dims = [1usize, 1, 1, 4, 1];
        let src = [0.0f64, 1.0, 2.0, 3.0];
        let mut dst = [0.0f64; 4];
        // shift 1 along W: y[w] = x[(w + 1) % 4]
        roll3d_copy(&src, dims, [0, 0, 1], &mut dst);
        assert_eq!(dst, [1.0, 2.0, 3.0, 0.0]);
        // the inverse shift restores the original
        let mut back = [0.0f64; 4];
        roll3d_copy(&dst, dims, [0, 0, 3], &mut back);
        assert_eq!(back, src);
    }

    #[test]
    fn conv_geom_shapes() {
        let g = Conv3dGeom::infer(&[1, 1, 32, 48, 48], &[4, 1, 2, 2, 2], [2, 2, 2], [0, 0, 0])
            .unwrap();
        assert_eq!(g.out_dims, [16, 24, 24]);
        let too_big =
            Conv3dGeom::infer(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], [1, 1, 1], [0, 0, 0]);
        assert!(too_big.is_err());
    }

    #[test]
    fn convt_rejects_kernel_not_stride() {
        let err = ConvT3dGeom::infer(&[1, 2, 2, 2, 2], &[2, 3, 2, 2, 2], [1, 1, 1]);
        assert!(matches!(err, Err(crate::error::Error::Unsupported(_))));
    }
}
