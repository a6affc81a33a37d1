//! UNETR-style convolutional decoder and the full segmentation model.
//!
//! Residual conv blocks process the raw input and every encoder skip;
//! transposed convolutions (kernel == stride == 2) walk back up the
//! resolution pyramid with channel-concatenated skips; a temporal-collapse
//! head folds the time axis into channels and projects to class logits.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Staged};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::swin::{Encoder, Mode, ModelConfig};
use crate::tensor::{ops, Tape, Tensor, TensorId};

pub const IN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;
const INIT_STD: f64 = 0.02;

/// Two conv3x3x3 -> instance-norm -> leaky-ReLU layers plus a 1x1x1-projected
/// residual, spatial extents preserved.
#[derive(Debug)]
pub struct ResidualBlock {
    in_channels: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    norm1_g: ParamId,
    norm1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    norm2_g: ParamId,
    norm2_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    norm3_g: ParamId,
    norm3_b: ParamId,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let k = [out_channels, in_channels, 3, 3, 3];
        let k2 = [out_channels, out_channels, 3, 3, 3];
        let p = [out_channels, in_channels, 1, 1, 1];
        ResidualBlock {
            in_channels,
            conv1_w: store.add_trunc_normal(format!("{prefix}.conv1.weight"), &k, INIT_STD, rng),
            conv1_b: store.add_zeros(format!("{prefix}.conv1.bias"), &[out_channels]),
            norm1_g: store.add_ones(format!("{prefix}.norm1.gamma"), &[out_channels]),
            norm1_b: store.add_zeros(format!("{prefix}.norm1.beta"), &[out_channels]),
            conv2_w: store.add_trunc_normal(format!("{prefix}.conv2.weight"), &k2, INIT_STD, rng),
            conv2_b: store.add_zeros(format!("{prefix}.conv2.bias"), &[out_channels]),
            norm2_g: store.add_ones(format!("{prefix}.norm2.gamma"), &[out_channels]),
            norm2_b: store.add_zeros(format!("{prefix}.norm2.beta"), &[out_channels]),
            proj_w: store.add_trunc_normal(format!("{prefix}.proj.weight"), &p, INIT_STD, rng),
            proj_b: store.add_zeros(format!("{prefix}.proj.bias"), &[out_channels]),
            norm3_g: store.add_ones(format!("{prefix}.norm3.gamma"), &[out_channels]),
            norm3_b: store.add_zeros(format!("{prefix}.norm3.beta"), &[out_channels]),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        x: TensorId,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::dim(format!(
                "residual block expects [B,{},D,H,W], got {s:?}",
                self.in_channels
            )));
        }
        let h = ops::conv3d(tape, x, staged.id(self.conv1_w), staged.id(self.conv1_b), [1, 1, 1], [1, 1, 1])?;
        let h = ops::instance_norm(tape, h, staged.id(self.norm1_g), staged.id(self.norm1_b), IN_EPS)?;
        let h = ops::leaky_relu(tape, h, LEAKY_SLOPE)?;
        let h = ops::conv3d(tape, h, staged.id(self.conv2_w), staged.id(self.conv2_b), [1, 1, 1], [1, 1, 1])?;
        let h = ops::instance_norm(tape, h, staged.id(self.norm2_g), staged.id(self.norm2_b), IN_EPS)?;
        let r = ops::conv3d(tape, x, staged.id(self.proj_w), staged.id(self.proj_b), [1, 1, 1], [0, 0, 0])?;
        let r = ops::instance_norm(tape, r, staged.id(self.norm3_g), staged.id(self.norm3_b), IN_EPS)?;
        let sum = ops::add(tape, h, r)?;
        ops::leaky_relu(tape, sum, LEAKY_SLOPE)
    }
}

/// Transposed-conv upsampling (k == s == 2) followed by skip concatenation
/// and a residual block back down to `out_channels`.
#[derive(Debug)]
pub struct UpBlock {
    in_channels: usize,
    up_w: ParamId,
    block: ResidualBlock,
}

impl UpBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        prefix: &str,
        in_channels: usize,
        skip_channels: usize,
        out_channels: usize,
    ) -> Self {
        UpBlock {
            in_channels,
            up_w: store.add_trunc_normal(
                format!("{prefix}.up.weight"),
                &[in_channels, out_channels, 2, 2, 2],
                INIT_STD,
                rng,
            ),
            block: ResidualBlock::new(
                store,
                rng,
                &format!("{prefix}.block"),
                out_channels + skip_channels,
                out_channels,
            ),
        }
    }

    /// `low` is `[B, C_in, d, h, w]`; `skip` must sit at exactly twice the
    /// spatial extents.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        low: TensorId,
        skip: TensorId,
    ) -> Result<TensorId> {
        let sl = tape.shape(low).to_vec();
        let ss = tape.shape(skip).to_vec();
        if sl.len() != 5 || ss.len() != 5 || sl[1] != self.in_channels {
            return Err(Error::dim(format!(
                "up_concat expects rank-5 inputs with {} low channels, got {sl:?} and {ss:?}",
                self.in_channels
            )));
        }
        for axis in 2..5 {
            if sl[axis] * 2 != ss[axis] {
                return Err(Error::dim(format!(
                    "skip extents {ss:?} must be exactly twice the low extents {sl:?}"
                )));
            }
        }
        let up = ops::conv3d_transpose(tape, low, staged.id(self.up_w), [2, 2, 2])?;
        let cat = ops::concat_channels(tape, up, skip)?;
        self.block.forward(tape, staged, cat)
    }
}

/// Fold the time axis into channels and project every pixel to `K` logits.
#[derive(Debug)]
pub struct TemporalCollapseHead {
    features: usize,
    time_steps: usize,
    classes: usize,
    w: ParamId,
    b: ParamId,
}

impl TemporalCollapseHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        prefix: &str,
        features: usize,
        time_steps: usize,
        classes: usize,
    ) -> Self {
        TemporalCollapseHead {
            features,
            time_steps,
            classes,
            w: store.add_trunc_normal(
                format!("{prefix}.weight"),
                &[features * time_steps, classes],
                INIT_STD,
                rng,
            ),
            b: store.add_zeros(format!("{prefix}.bias"), &[classes]),
        }
    }

    /// `[B, F, T, H, W]` -> `[B, K, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        x: TensorId,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.features || s[2] != self.time_steps {
            return Err(Error::dim(format!(
                "temporal head expects [B,{},{},H,W], got {s:?}",
                self.features, self.time_steps
            )));
        }
        let (b, h, w) = (s[0], s[3], s[4]);
        let ft = self.features * self.time_steps;
        let folded = ops::reshape(tape, x, &[b, ft, h, w])?;
        let pixels = ops::permute(tape, folded, &[0, 2, 3, 1])?;
        let flat = ops::reshape(tape, pixels, &[b * h * w, ft])?;
        let logits = ops::matmul(tape, flat, staged.id(self.w))?;
        let logits = ops::add_broadcast(tape, logits, staged.id(self.b))?;
        let spatial = ops::reshape(tape, logits, &[b, h, w, self.classes])?;
        ops::permute(tape, spatial, &[0, 3, 1, 2])
    }
}

/// Encoder plus decoder with parameters in one store; forward maps
/// `[B, C, T, H, W]` reflectances to `[B, K, H, W]` class logits.
pub struct SegmentationModel<T: Scalar> {
    pub cfg: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    raw_block: ResidualBlock,
    skip2_block: ResidualBlock,
    skip4_block: ResidualBlock,
    skip8_block: ResidualBlock,
    up8: UpBlock,
    up4: UpBlock,
    up2: UpBlock,
    up0: UpBlock,
    head: TemporalCollapseHead,
}

impl<T: Scalar> SegmentationModel<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let e = cfg.embed_dim;
        let encoder = Encoder::new(&mut store, &mut rng, cfg)?;
        let raw_block =
            ResidualBlock::new(&mut store, &mut rng, "decoder.raw", cfg.in_channels, e / 2);
        let skip2_block = ResidualBlock::new(&mut store, &mut rng, "decoder.skip2", e, e);
        let skip4_block = ResidualBlock::new(&mut store, &mut rng, "decoder.skip4", 2 * e, 2 * e);
        let skip8_block = ResidualBlock::new(&mut store, &mut rng, "decoder.skip8", 4 * e, 4 * e);
        let up8 = UpBlock::new(&mut store, &mut rng, "decoder.up8", 8 * e, 4 * e, 4 * e);
        let up4 = UpBlock::new(&mut store, &mut rng, "decoder.up4", 4 * e, 2 * e, 2 * e);
        let up2 = UpBlock::new(&mut store, &mut rng, "decoder.up2", 2 * e, e, e);
        let up0 = UpBlock::new(&mut store, &mut rng, "decoder.up0", e, e / 2, e / 2);
        let head = TemporalCollapseHead::new(
            &mut store,
            &mut rng,
            "decoder.head",
            e / 2,
            cfg.time_steps,
            cfg.num_classes,
        );
        Ok(SegmentationModel {
            cfg: cfg.clone(),
            store,
            encoder,
            raw_block,
            skip2_block,
            skip4_block,
            skip8_block,
            up8,
            up4,
            up2,
            up0,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// Stage all parameters onto a fresh tape; pair with [`Self::forward`].
    pub fn stage(&self, tape: &mut Tape<T>, trainable: bool) -> Staged {
        self.store.stage(tape, trainable)
    }

    /// Full forward pass to per-pixel class logits `[B, K, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        staged: &Staged,
        x: TensorId,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let enc = self.encoder.forward(tape, staged, x, mode)?;
        // channels-first views of the token volumes
        let to_cf = |tape: &mut Tape<T>, t: TensorId| ops::permute(tape, t, &[0, 4, 1, 2, 3]);
        let bneck = to_cf(tape, enc.bottleneck)?;
        let s8 = to_cf(tape, enc.skip8)?;
        let s4 = to_cf(tape, enc.skip4)?;
        let s2 = to_cf(tape, enc.skip2)?;

        let raw = self.raw_block.forward(tape, staged, x)?;
        let s8 = self.skip8_block.forward(tape, staged, s8)?;
        let s4 = self.skip4_block.forward(tape, staged, s4)?;
        let s2 = self.skip2_block.forward(tape, staged, s2)?;

        let d8 = self.up8.forward(tape, staged, bneck, s8)?;
        let d4 = self.up4.forward(tape, staged, d8, s4)?;
        let d2 = self.up2.forward(tape, staged, d4, s2)?;
        let d0 = self.up0.forward(tape, staged, d2, raw)?;
        self.head.forward(tape, staged, d0)
    }

    /// Inference convenience: run one input through a private tape without
    /// gradients and return the logits tensor.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let xi = tape.constant(x.clone());
        let logits = self.forward(&mut tape, &staged, xi, &mut Mode::Eval)?;
        Ok(tape.value(logits))
    }

    /// Replace all weights from `(name, tensor)` pairs (checkpoint restore).
    pub fn load_weights(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        self.store.load_named(named)
    }
}

/// Per-pixel argmax over class logits `[B, K, H, W]` -> `[B*H*W]` class ids.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("argmax expects [B,K,H,W], got {s:?}")));
    }
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    if k > u8::MAX as usize {
        return Err(Error::Range(format!("at most 255 classes supported, got {k}")));
    }
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = d[(bi * k) * hw + p];
            for ki in 1..k {
                let v = d[(bi * k + ki) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = ki;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::rand_uniform(shape, &mut rng)
    }

    #[test]
    fn residual_block_preserves_extents() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(1);
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 3, 5);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let x = tape.constant(Tensor::rand_uniform(&[2, 3, 4, 5, 6], &mut rng));
        let y = block.forward(&mut tape, &staged, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 4, 5, 6]);
    }

    #[test]
    fn residual_block_zero_convs_still_finite() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(2);
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 2, 4);
        for name in ["rb.conv1.weight", "rb.conv2.weight"] {
            let id = store.lookup(name).unwrap();
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let x = tape.constant(Tensor::rand_uniform(&[1, 2, 3, 4, 4], &mut rng));
        let y = block.forward(&mut tape, &staged, x).unwrap();
        let out = tape.value(y);
        assert!(out.is_all_finite());
        // with both main convs zeroed, the output is the activated, normed
        // projected residual alone
        let r = ops::conv3d(
            &mut tape,
            x,
            staged.id(block.proj_w),
            staged.id(block.proj_b),
            [1, 1, 1],
            [0, 0, 0],
        )
        .unwrap();
        let r = ops::instance_norm(
            &mut tape,
            r,
            staged.id(block.norm3_g),
            staged.id(block.norm3_b),
            IN_EPS,
        )
        .unwrap();
        let want = ops::leaky_relu(&mut tape, r, LEAKY_SLOPE).unwrap();
        for (a, b) in out.data().iter().zip(tape.data(want).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn up_block_shape_plan() {
        // bottleneck (384, 2, 3, 3) + skip8 (192, 4, 6, 6) -> (192, 4, 6, 6)
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(3);
        let up = UpBlock::new(&mut store, &mut rng, "up", 384, 192, 192);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let low = tape.constant(rand_input(&[1, 384, 2, 3, 3], 4));
        let skip = tape.constant(rand_input(&[1, 192, 4, 6, 6], 5));
        let y = up.forward(&mut tape, &staged, low, skip).unwrap();
        assert_eq!(tape.shape(y), &[1, 192, 4, 6, 6]);
    }

    #[test]
    fn up_block_zero_skip_depends_on_upsampled_path_only() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(6);
        let up = UpBlock::new(&mut store, &mut rng, "up", 4, 2, 2);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let low = tape.constant(Tensor::rand_uniform(&[1, 4, 2, 2, 2], &mut rng));
        let zero_skip = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let y1 = up.forward(&mut tape, &staged, low, zero_skip).unwrap();
        let zero_skip2 = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let y2 = up.forward(&mut tape, &staged, low, zero_skip2).unwrap();
        assert_eq!(tape.data(y1), tape.data(y2));
        // extent mismatch is rejected
        let bad_skip = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 6]));
        assert!(up.forward(&mut tape, &staged, low, bad_skip).is_err());
    }

    #[test]
    fn head_shapes_and_zero_weights() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(7);
        let head = TemporalCollapseHead::new(&mut store, &mut rng, "h", 24, 32, 18);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let x = tape.constant(rand_input(&[1, 24, 32, 48, 48], 8));
        let y = head.forward(&mut tape, &staged, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 18, 48, 48]);

        // zero weights -> logits equal the bias everywhere
        let mut store = ParamStore::<f32>::new();
        let head = TemporalCollapseHead::new(&mut store, &mut rng, "h", 2, 16, 3);
        let wid = store.lookup("h.weight").unwrap();
        store.value_mut(wid).data_mut().fill(0.0);
        let bid = store.lookup("h.bias").unwrap();
        store.value_mut(bid).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let x = tape.constant(rand_input(&[1, 2, 16, 16, 16], 9));
        let y = head.forward(&mut tape, &staged, x).unwrap();
        let d = tape.data(y);
        let hw = 16 * 16;
        for k in 0..3 {
            for p in 0..hw {
                assert_eq!(d[k * hw + p], (k + 1) as f32);
            }
        }
    }

    #[test]
    fn lombardia_head_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(10);
        let head = TemporalCollapseHead::new(&mut store, &mut rng, "h", 24, 32, 7);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let x = tape.constant(rand_input(&[1, 24, 32, 48, 48], 11));
        let y = head.forward(&mut tape, &staged, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 7, 48, 48]);
    }

    #[test]
    fn model_forward_output_contract() {
        // property over (T, K, bands) at 16x16 tiles with a dividing window
        for (t, k, c) in [(16usize, 2usize, 3usize), (16, 7, 7), (32, 18, 13), (16, 5, 4)] {
            let cfg = ModelConfig {
                in_channels: c,
                num_classes: k,
                time_steps: t,
                height: 16,
                width: 16,
                embed_dim: 4,
                num_heads: [2, 2, 2],
                window: [2, 2, 2],
                ..ModelConfig::munich_like()
            };
            let model = SegmentationModel::<f32>::new(&cfg, 12).unwrap();
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, false);
            let x = tape.constant(rand_input(&[1, c, t, 16, 16], 13));
            let y = model.forward(&mut tape, &staged, x, &mut Mode::Eval).unwrap();
            assert_eq!(tape.shape(y), &[1, k, 16, 16], "cfg ({t},{k},{c})");
            assert!(tape.value(y).is_all_finite());
        }
    }

    #[test]
    fn model_forward_is_deterministic() {
        let cfg = ModelConfig {
            height: 16,
            width: 16,
            embed_dim: 4,
            num_heads: [2, 2, 2],
            window: [2, 2, 2],
            in_channels: 2,
            num_classes: 3,
            time_steps: 16,
            ..ModelConfig::munich_like()
        };
        let model = SegmentationModel::<f32>::new(&cfg, 14).unwrap();
        let x = rand_input(&[2, 2, 16, 16, 16], 15);
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn param_count_is_config_function() {
        let cfg = ModelConfig::tiny();
        let m1 = SegmentationModel::<f32>::new(&cfg, 1).unwrap();
        let m2 = SegmentationModel::<f32>::new(&cfg, 999).unwrap();
        assert_eq!(m1.param_count(), m2.param_count());
        assert!(m1.param_count() > 0);
    }

    #[test]
    fn argmax_picks_largest_logit() {
        let t = Tensor::new(
            vec![1, 3, 1, 2],
            vec![
                0.1f32, 5.0, // class 0 logits for the two pixels
                0.2, 1.0, // class 1
                3.0, -2.0, // class 2
            ],
        )
        .unwrap();
        assert_eq!(argmax_classes(&t).unwrap(), vec![2, 0]);
    }
}
