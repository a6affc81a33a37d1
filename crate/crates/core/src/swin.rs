//! Spatiotemporal shifted-window transformer encoder.
//!
//! Three stages of paired W-MSA / SW-MSA blocks over a `[B, D, H, W, C]`
//! token volume (D is the patch-embedded time axis), with 2x2x2 patch
//! merging between stages. Six transformer blocks run in total and the
//! bottleneck sits at 1/16 of every input extent.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Staged};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{ops, Tape, Tensor, TensorId};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Additive suppression for cross-region attention; large but finite so
/// gradients stay well defined.
pub const MASK_SUPPRESS: f64 = -1e9;

/// Whether a forward pass may consume randomness (dropout).
pub enum Mode<'a> {
    Eval,
    Train { dropout_rng: &'a mut SplitMix64 },
}

fn maybe_drop<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    p: f64,
    mode: &mut Mode,
) -> Result<TensorId> {
    match mode {
        Mode::Train { dropout_rng } if p > 0.0 => ops::dropout(tape, x, p, dropout_rng),
        _ => Ok(x),
    }
}

/// Architectural hyperparameters; every shape constraint of the model lives
/// in [`ModelConfig::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub time_steps: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: [usize; 3],
    pub embed_dim: usize,
    pub depths: [usize; 3],
    pub num_heads: [usize; 3],
    pub window: [usize; 3],
    pub mlp_ratio: usize,
    pub attn_dropout: f64,
    pub proj_dropout: f64,
}

impl ModelConfig {
    /// Full-scale preset: 13 bands, 18 classes, 32 acquisitions of 48x48.
    pub fn munich_like() -> Self {
        ModelConfig {
            in_channels: 13,
            num_classes: 18,
            time_steps: 32,
            height: 48,
            width: 48,
            patch_size: [2, 2, 2],
            embed_dim: 48,
            depths: [2, 2, 2],
            num_heads: [3, 6, 12],
            window: [2, 3, 3],
            mlp_ratio: 4,
            attn_dropout: 0.0,
            proj_dropout: 0.0,
        }
    }

    /// Seven-band, seven-class variant of the full-scale preset.
    pub fn lombardia_like() -> Self {
        ModelConfig { in_channels: 7, num_classes: 7, ..Self::munich_like() }
    }

    /// Desk-scale preset used by the verification runs.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 4,
            num_classes: 5,
            time_steps: 16,
            embed_dim: 12,
            num_heads: [2, 2, 4],
            ..Self::munich_like()
        }
    }

    /// Channel width at stage `s` (0-based): embed_dim * 2^s.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Token extents at stage `s`: input extents / 2^(s+1).
    pub fn stage_extents(&self, s: usize) -> [usize; 3] {
        [self.time_steps >> (s + 1), self.height >> (s + 1), self.width >> (s + 1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in [2, 255], got {}",
                self.num_classes
            )));
        }
        if self.time_steps == 0 || self.time_steps % 16 != 0 {
            return Err(Error::Config(format!(
                "time_steps must be a positive multiple of 16, got {}",
                self.time_steps
            )));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 16 != 0 {
                return Err(Error::Config(format!(
                    "{name} must be a positive multiple of 16, got {v}"
                )));
            }
        }
        if self.patch_size != [2, 2, 2] {
            return Err(Error::Unsupported(format!(
                "patch_size {:?}: only (2,2,2) is supported",
                self.patch_size
            )));
        }
        if self.depths != [2, 2, 2] {
            return Err(Error::Config(format!(
                "depths {:?}: three stages of two blocks (six transformers) are required",
                self.depths
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be positive and even, got {}",
                self.embed_dim
            )));
        }
        for s in 0..3 {
            let heads = self.num_heads[s];
            let dim = self.stage_dim(s);
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "num_heads[{s}] = {heads} must divide the stage width {dim}"
                )));
            }
            let ext = self.stage_extents(s);
            for axis in 0..3 {
                if self.window[axis] == 0 || ext[axis] % self.window[axis] != 0 {
                    return Err(Error::Config(format!(
                        "window {:?} must divide stage-{} extents {:?}",
                        self.window,
                        s + 1,
                        ext
                    )));
                }
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        for (name, p) in
            [("attn_dropout", self.attn_dropout), ("proj_dropout", self.proj_dropout)]
        {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// Window geometry; the shift is always half the window, floored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: [usize; 3],
}

impl WindowSpec {
    pub fn new(window: [usize; 3]) -> Self {
        WindowSpec { window }
    }

    pub fn shift(&self) -> [usize; 3] {
        [self.window[0] / 2, self.window[1] / 2, self.window[2] / 2]
    }

    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }

    fn divides(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|i| dims[i] % self.window[i] == 0)
    }

    fn counts(&self, dims: [usize; 3]) -> [usize; 3] {
        [dims[0] / self.window[0], dims[1] / self.window[1], dims[2] / self.window[2]]
    }

    pub fn num_windows(&self, dims: [usize; 3]) -> usize {
        self.counts(dims).iter().product()
    }
}

/// Split `[B, D, H, W, C]` into non-overlapping windows
/// `[B*nW, wd, wh, ww, C]` in d-major, then h, then w raster order.
pub fn window_partition<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: &WindowSpec,
) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::dim(format!("window_partition expects [B,D,H,W,C], got {s:?}")));
    }
    let dims = [s[1], s[2], s[3]];
    if !w.divides(dims) {
        return Err(Error::dim(format!(
            "window {:?} does not divide volume extents {dims:?}",
            w.window
        )));
    }
    let [nd, nh, nw] = w.counts(dims);
    let [wd, wh, ww] = w.window;
    let (b, c) = (s[0], s[4]);
    let split = ops::reshape(tape, x, &[b, nd, wd, nh, wh, nw, ww, c])?;
    let grouped = ops::permute(tape, split, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    ops::reshape(tape, grouped, &[b * nd * nh * nw, wd, wh, ww, c])
}

/// Exact inverse of [`window_partition`] for the given `[B, D, H, W]`.
pub fn window_reverse<T: Scalar>(
    tape: &mut Tape<T>,
    wins: TensorId,
    w: &WindowSpec,
    dims: [usize; 4],
) -> Result<TensorId> {
    let s = tape.shape(wins).to_vec();
    if s.len() != 5 || [s[1], s[2], s[3]] != w.window {
        return Err(Error::dim(format!(
            "window_reverse expects [nW, {:?}, C] windows, got {s:?}",
            w.window
        )));
    }
    let [b, d, h, ww_] = dims;
    let vol = [d, h, ww_];
    if !w.divides(vol) {
        return Err(Error::dim(format!(
            "window {:?} does not divide volume extents {vol:?}",
            w.window
        )));
    }
    let [nd, nh, nw] = w.counts(vol);
    if s[0] != b * nd * nh * nw {
        return Err(Error::dim(format!(
            "window count {} inconsistent with dims {dims:?} (expected {})",
            s[0],
            b * nd * nh * nw
        )));
    }
    let [wd, wh, wwin] = w.window;
    let c = s[4];
    let split = ops::reshape(tape, wins, &[b, nd, nh, nw, wd, wh, wwin, c])?;
    let grouped = ops::permute(tape, split, &[0, 1, 4, 2, 5, 3, 6, 7])?;
    ops::reshape(tape, grouped, &[b, d, h, ww_, c])
}

fn axis_region(coord: usize, extent: usize, window: usize, shift: usize) -> usize {
    // regions split at extent-window and extent-shift
    if coord < extent - window {
        0
    } else if coord < extent - shift {
        1
    } else {
        2
    }
}

/// Region labels of every voxel in the shifted configuration, in volume
/// raster order (d-major, then h, then w).
pub fn region_labels(dims: [usize; 3], w: &WindowSpec) -> Vec<usize> {
    let shift = w.shift();
    let [d_, h_, w_] = dims;
    let mut labels = Vec::with_capacity(d_ * h_ * w_);
    for d in 0..d_ {
        let rd = axis_region(d, d_, w.window[0], shift[0]);
        for h in 0..h_ {
            let rh = axis_region(h, h_, w.window[1], shift[1]);
            for x in 0..w_ {
                let rw = axis_region(x, w_, w.window[2], shift[2]);
                labels.push((rd * 3 + rh) * 3 + rw);
            }
        }
    }
    labels
}

/// Attention mask for the shifted configuration: `[nW, t, t]`, zero where
/// two tokens of a window share a region id and [`MASK_SUPPRESS`] otherwise.
/// A zero shift yields an all-zero mask.
pub fn attention_mask<T: Scalar>(dims: [usize; 3], w: &WindowSpec) -> Result<Tensor<T>> {
    if !w.divides(dims) {
        return Err(Error::dim(format!(
            "window {:?} does not divide volume extents {dims:?}",
            w.window
        )));
    }
    let t = w.tokens();
    let n_windows = w.num_windows(dims);
    if w.shift() == [0, 0, 0] {
        return Ok(Tensor::zeros(&[n_windows, t, t]));
    }
    let labels = region_labels(dims, w);
    let [_, nh, nw] = w.counts(dims);
    let [wd, wh, ww] = w.window;
    let [_, h_, w_] = dims;
    // group labels of each window in token order
    let mut win_labels = vec![0usize; n_windows * t];
    for wi in 0..n_windows {
        let (wz, rest) = (wi / (nh * nw), wi % (nh * nw));
        let (wy, wx) = (rest / nw, rest % nw);
        for td in 0..wd {
            for th in 0..wh {
                for tw in 0..ww {
                    let (d, h, x) = (wz * wd + td, wy * wh + th, wx * ww + tw);
                    let tok = (td * wh + th) * ww + tw;
                    win_labels[wi * t + tok] = labels[(d * h_ + h) * w_ + x];
                }
            }
        }
    }
    let suppress = T::from_f64(MASK_SUPPRESS);
    let mut mask = Tensor::zeros(&[n_windows, t, t]);
    {
        let data = mask.data_mut();
        for wi in 0..n_windows {
            let lab = &win_labels[wi * t..(wi + 1) * t];
            for i in 0..t {
                for j in 0..t {
                    if lab[i] != lab[j] {
                        data[(wi * t + i) * t + j] = suppress;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Pairwise displacement encoding inside a window. Returns the flattened
/// `[t, t]` index map into a bias table of the returned length.
pub fn relative_position_index(w: &WindowSpec) -> (Vec<usize>, usize) {
    let [wd, wh, ww] = w.window;
    let t = w.tokens();
    let (sd, sh, sw) = (2 * wd - 1, 2 * wh - 1, 2 * ww - 1);
    let mut coords = Vec::with_capacity(t);
    for d in 0..wd {
        for h in 0..wh {
            for x in 0..ww {
                coords.push([d as isize, h as isize, x as isize]);
            }
        }
    }
    let mut idx = Vec::with_capacity(t * t);
    for a in &coords {
        for b in &coords {
            let dd = (a[0] - b[0] + wd as isize - 1) as usize;
            let dh = (a[1] - b[1] + wh as isize - 1) as usize;
            let dw = (a[2] - b[2] + ww as isize - 1) as usize;
            idx.push((dd * sh + dh) * sw + dw);
        }
    }
    (idx, sd * sh * sw)
}

/// Per-window multi-head self-attention with a learned relative position
/// bias: `softmax(QK^T / sqrt(d) + bias + mask) V` then an output projection.
#[derive(Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: WindowSpec,
    attn_dropout: f64,
    proj_dropout: f64,
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    pub(crate) bias_table: ParamId,
    rel_idx: Vec<usize>,
}

impl WindowAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: WindowSpec,
        attn_dropout: f64,
        proj_dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {heads} must divide channel width {dim}"
            )));
        }
        let (rel_idx, table_len) = relative_position_index(&window);
        Ok(WindowAttention {
            dim,
            heads,
            window,
            attn_dropout,
            proj_dropout,
            q_w: store.add_trunc_normal(format!("{prefix}.q.weight"), &[dim, dim], INIT_STD, rng),
            q_b: store.add_zeros(format!("{prefix}.q.bias"), &[dim]),
            k_w: store.add_trunc_normal(format!("{prefix}.k.weight"), &[dim, dim], INIT_STD, rng),
            k_b: store.add_zeros(format!("{prefix}.k.bias"), &[dim]),
            v_w: store.add_trunc_normal(format!("{prefix}.v.weight"), &[dim, dim], INIT_STD, rng),
            v_b: store.add_zeros(format!("{prefix}.v.bias"), &[dim]),
            proj_w: store
                .add_trunc_normal(format!("{prefix}.proj.weight"), &[dim, dim], INIT_STD, rng),
            proj_b: store.add_zeros(format!("{prefix}.proj.bias"), &[dim]),
            bias_table: store.add_trunc_normal(
                format!("{prefix}.bias_table"),
                &[table_len, heads],
                INIT_STD,
                rng,
            ),
            rel_idx,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn project<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        tokens: TensorId,
        w: ParamId,
        b: ParamId,
        nw: usize,
        t: usize,
        head_dim: usize,
    ) -> Result<TensorId> {
        let flat = ops::reshape(tape, tokens, &[nw * t, self.dim])?;
        let proj = ops::matmul(tape, flat, staged.id(w))?;
        let proj = ops::add_broadcast(tape, proj, staged.id(b))?;
        let split = ops::reshape(tape, proj, &[nw, t, self.heads, head_dim])?;
        ops::permute(tape, split, &[0, 2, 1, 3])
    }

    /// `tokens` is `[nW, t, C]`; `mask`, when present, is the `[nW_per, t, t]`
    /// additive mask repeated over batch and heads.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        tokens: TensorId,
        mask: Option<&Tensor<T>>,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim(format!(
                "window_attention expects [nW, t, {}], got {s:?}",
                self.dim
            )));
        }
        let (nw, t) = (s[0], s[1]);
        if t != self.window.tokens() {
            return Err(Error::dim(format!(
                "token count {t} does not match window {:?}",
                self.window.window
            )));
        }
        let head_dim = self.dim / self.heads;
        let q = self.project(tape, staged, tokens, self.q_w, self.q_b, nw, t, head_dim)?;
        let k = self.project(tape, staged, tokens, self.k_w, self.k_b, nw, t, head_dim)?;
        let v = self.project(tape, staged, tokens, self.v_w, self.v_b, nw, t, head_dim)?;

        let scores = ops::matmul_nt(tape, q, k)?;
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        let scores = ops::mul_scalar(tape, scores, scale)?;

        // learned bias indexed by token displacement: [t*t, heads] -> [heads, t, t]
        let bias = ops::gather_rows(tape, staged.id(self.bias_table), &self.rel_idx)?;
        let bias = ops::reshape(tape, bias, &[t, t, self.heads])?;
        let bias = ops::permute(tape, bias, &[2, 0, 1])?;
        let scores = ops::add_broadcast(tape, scores, bias)?;

        let scores = match mask {
            Some(m) => {
                let ms = m.shape();
                if ms.len() != 3 || ms[1] != t || ms[2] != t || nw % ms[0] != 0 {
                    return Err(Error::dim(format!(
                        "attention mask shape {ms:?} inconsistent with {nw} windows of {t} tokens"
                    )));
                }
                let per = ms[0];
                let mut full = Tensor::zeros(&[nw, self.heads, t, t]);
                {
                    let dst = full.data_mut();
                    let src = m.data();
                    for wi in 0..nw {
                        let block = &src[(wi % per) * t * t..(wi % per + 1) * t * t];
                        for h in 0..self.heads {
                            let off = (wi * self.heads + h) * t * t;
                            dst[off..off + t * t].copy_from_slice(block);
                        }
                    }
                }
                ops::add_const(tape, scores, &full)?
            }
            None => scores,
        };

        let attn = ops::softmax_last(tape, scores)?;
        let attn = maybe_drop(tape, attn, self.attn_dropout, mode)?;
        let ctx = ops::matmul(tape, attn, v)?;
        let merged = ops::permute(tape, ctx, &[0, 2, 1, 3])?;
        let merged = ops::reshape(tape, merged, &[nw * t, self.dim])?;
        let out = ops::matmul(tape, merged, staged.id(self.proj_w))?;
        let out = ops::add_broadcast(tape, out, staged.id(self.proj_b))?;
        let out = maybe_drop(tape, out, self.proj_dropout, mode)?;
        ops::reshape(tape, out, &[nw, t, self.dim])
    }
}

/// One transformer block: `x + (S)W-MSA(LN(x))` then `x + MLP(LN(x))`.
#[derive(Debug)]
pub struct SwinBlock {
    pub shifted: bool,
    dim: usize,
    window: WindowSpec,
    proj_dropout: f64,
    norm1_g: ParamId,
    norm1_b: ParamId,
    pub attn: WindowAttention,
    norm2_g: ParamId,
    norm2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: WindowSpec,
        mlp_ratio: usize,
        shifted: bool,
        attn_dropout: f64,
        proj_dropout: f64,
    ) -> Result<Self> {
        let mlp_hidden = dim * mlp_ratio;
        Ok(SwinBlock {
            shifted,
            dim,
            window,
            proj_dropout,
            norm1_g: store.add_ones(format!("{prefix}.norm1.gamma"), &[dim]),
            norm1_b: store.add_zeros(format!("{prefix}.norm1.beta"), &[dim]),
            attn: WindowAttention::new(
                store,
                rng,
                &format!("{prefix}.attn"),
                dim,
                heads,
                window,
                attn_dropout,
                proj_dropout,
            )?,
            norm2_g: store.add_ones(format!("{prefix}.norm2.gamma"), &[dim]),
            norm2_b: store.add_zeros(format!("{prefix}.norm2.beta"), &[dim]),
            fc1_w: store.add_trunc_normal(
                format!("{prefix}.mlp.fc1.weight"),
                &[dim, mlp_hidden],
                INIT_STD,
                rng,
            ),
            fc1_b: store.add_zeros(format!("{prefix}.mlp.fc1.bias"), &[mlp_hidden]),
            fc2_w: store.add_trunc_normal(
                format!("{prefix}.mlp.fc2.weight"),
                &[mlp_hidden, dim],
                INIT_STD,
                rng,
            ),
            fc2_b: store.add_zeros(format!("{prefix}.mlp.fc2.bias"), &[dim]),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        x: TensorId,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[4] != self.dim {
            return Err(Error::dim(format!(
                "swin block expects [B,D,H,W,{}], got {s:?}",
                self.dim
            )));
        }
        let (b, dims) = (s[0], [s[1], s[2], s[3]]);
        let shift = self.window.shift();

        let shortcut = x;
        let mut y =
            ops::layer_norm(tape, x, staged.id(self.norm1_g), staged.id(self.norm1_b), LN_EPS)?;
        if self.shifted {
            y = ops::cyclic_shift(tape, y, shift, 1)?;
        }
        let wins = window_partition(tape, y, &self.window)?;
        let t = self.window.tokens();
        let nw_total = tape.shape(wins)[0];
        let tokens = ops::reshape(tape, wins, &[nw_total, t, self.dim])?;
        let mask =
            if self.shifted { Some(attention_mask::<T>(dims, &self.window)?) } else { None };
        let att = self.attn.forward(tape, staged, tokens, mask.as_ref(), mode)?;
        let [wd, wh, ww] = self.window.window;
        let att = ops::reshape(tape, att, &[nw_total, wd, wh, ww, self.dim])?;
        let mut vol = window_reverse(tape, att, &self.window, [b, dims[0], dims[1], dims[2]])?;
        if self.shifted {
            vol = ops::cyclic_shift(tape, vol, shift, -1)?;
        }
        let x = ops::add(tape, shortcut, vol)?;

        let y = ops::layer_norm(tape, x, staged.id(self.norm2_g), staged.id(self.norm2_b), LN_EPS)?;
        let n = b * dims[0] * dims[1] * dims[2];
        let flat = ops::reshape(tape, y, &[n, self.dim])?;
        let h = ops::matmul(tape, flat, staged.id(self.fc1_w))?;
        let h = ops::add_broadcast(tape, h, staged.id(self.fc1_b))?;
        let h = ops::gelu(tape, h)?;
        let h = ops::matmul(tape, h, staged.id(self.fc2_w))?;
        let h = ops::add_broadcast(tape, h, staged.id(self.fc2_b))?;
        let h = maybe_drop(tape, h, self.proj_dropout, mode)?;
        let mlp = ops::reshape(tape, h, &[b, dims[0], dims[1], dims[2], self.dim])?;
        ops::add(tape, x, mlp)
    }
}

/// Downsampling between stages: concatenate each 2x2x2 token cell (8C
/// channels), layer-normalize, linear-project to 2C.
#[derive(Debug)]
pub struct PatchMerging {
    dim: usize,
    norm_g: ParamId,
    norm_b: ParamId,
    red_w: ParamId,
}

impl PatchMerging {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        prefix: &str,
        dim: usize,
    ) -> Self {
        PatchMerging {
            dim,
            norm_g: store.add_ones(format!("{prefix}.norm.gamma"), &[8 * dim]),
            norm_b: store.add_zeros(format!("{prefix}.norm.beta"), &[8 * dim]),
            red_w: store.add_trunc_normal(
                format!("{prefix}.reduction.weight"),
                &[8 * dim, 2 * dim],
                INIT_STD,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        x: TensorId,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[4] != self.dim {
            return Err(Error::dim(format!(
                "patch_merging expects [B,D,H,W,{}], got {s:?}",
                self.dim
            )));
        }
        if s[1] % 2 != 0 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim(format!("patch_merging needs even extents, got {s:?}")));
        }
        let (b, d2, h2, w2) = (s[0], s[1] / 2, s[2] / 2, s[3] / 2);
        let c = self.dim;
        let split = ops::reshape(tape, x, &[b, d2, 2, h2, 2, w2, 2, c])?;
        let cells = ops::permute(tape, split, &[0, 1, 3, 5, 2, 4, 6, 7])?;
        let merged = ops::reshape(tape, cells, &[b, d2, h2, w2, 8 * c])?;
        let normed =
            ops::layer_norm(tape, merged, staged.id(self.norm_g), staged.id(self.norm_b), LN_EPS)?;
        let flat = ops::reshape(tape, normed, &[b * d2 * h2 * w2, 8 * c])?;
        let red = ops::matmul(tape, flat, staged.id(self.red_w))?;
        ops::reshape(tape, red, &[b, d2, h2, w2, 2 * c])
    }
}

/// Strided linear projection of non-overlapping 2x2x2 patches.
#[derive(Debug)]
pub struct PatchEmbed {
    patch: [usize; 3],
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        prefix: &str,
        in_channels: usize,
        embed_dim: usize,
        patch: [usize; 3],
    ) -> Self {
        PatchEmbed {
            patch,
            w: store.add_trunc_normal(
                format!("{prefix}.weight"),
                &[embed_dim, in_channels, patch[0], patch[1], patch[2]],
                INIT_STD,
                rng,
            ),
            b: store.add_zeros(format!("{prefix}.bias"), &[embed_dim]),
        }
    }

    /// `[B, C, T, H, W]` -> `[B, E, T/2, H/2, W/2]` (channels first).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        x: TensorId,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::dim(format!("patch_embed expects [B,C,T,H,W], got {s:?}")));
        }
        for axis in 0..3 {
            if s[axis + 2] % self.patch[axis] != 0 {
                return Err(Error::dim(format!(
                    "patch {:?} does not divide input extents {:?}",
                    self.patch,
                    &s[2..]
                )));
            }
        }
        ops::conv3d(tape, x, staged.id(self.w), staged.id(self.b), self.patch, [0, 0, 0])
    }
}

struct EncoderStage {
    blocks: Vec<SwinBlock>,
    merge: PatchMerging,
}

/// Skip features and the bottleneck produced by one encoder pass.
pub struct EncoderOutput {
    /// `[B, T/2, H/2, W/2, E]` tokens after stage 1.
    pub skip2: TensorId,
    /// `[B, T/4, H/4, W/4, 2E]` tokens after stage 2.
    pub skip4: TensorId,
    /// `[B, T/8, H/8, W/8, 4E]` tokens after stage 3.
    pub skip8: TensorId,
    /// `[B, T/16, H/16, W/16, 8E]` tokens after the final merge.
    pub bottleneck: TensorId,
    /// Number of transformer blocks the pass executed (always six).
    pub blocks_executed: usize,
}

/// Three-stage encoder: embed, then per stage two blocks (W-MSA, SW-MSA)
/// followed by patch merging.
pub struct Encoder {
    pub cfg: ModelConfig,
    embed: PatchEmbed,
    stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(
            store,
            rng,
            "encoder.patch_embed",
            cfg.in_channels,
            cfg.embed_dim,
            cfg.patch_size,
        );
        let window = WindowSpec::new(cfg.window);
        let mut stages = Vec::new();
        for s in 0..3 {
            let dim = cfg.stage_dim(s);
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[s] {
                blocks.push(SwinBlock::new(
                    store,
                    rng,
                    &format!("encoder.stage{s}.block{b}"),
                    dim,
                    cfg.num_heads[s],
                    window,
                    cfg.mlp_ratio,
                    b % 2 == 1, // strict W-MSA, SW-MSA alternation
                    cfg.attn_dropout,
                    cfg.proj_dropout,
                )?);
            }
            let merge = PatchMerging::new(store, rng, &format!("encoder.stage{s}.merge"), dim);
            stages.push(EncoderStage { blocks, merge });
        }
        Ok(Encoder { cfg: cfg.clone(), embed, stages })
    }

    /// `x` is `[B, C, T, H, W]` matching the config extents.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        x: TensorId,
        mode: &mut Mode,
    ) -> Result<EncoderOutput> {
        let s = tape.shape(x).to_vec();
        let want = [self.cfg.in_channels, self.cfg.time_steps, self.cfg.height, self.cfg.width];
        if s.len() != 5 || s[1..] != want {
            return Err(Error::dim(format!(
                "encoder expects [B, {}, {}, {}, {}], got {s:?}",
                want[0], want[1], want[2], want[3]
            )));
        }
        let embedded = self.embed.forward(tape, staged, x)?;
        // channels-last token volume for the transformer stages
        let mut tokens = ops::permute(tape, embedded, &[0, 2, 3, 4, 1])?;
        let mut blocks_executed = 0;
        let mut skips = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in &stage.blocks {
                tokens = block.forward(tape, staged, tokens, mode)?;
                blocks_executed += 1;
            }
            skips.push(tokens);
            tokens = stage.merge.forward(tape, staged, tokens)?;
        }
        Ok(EncoderOutput {
            skip2: skips[0],
            skip4: skips[1],
            skip8: skips[2],
            bottleneck: tokens,
            blocks_executed,
        })
    }
}
