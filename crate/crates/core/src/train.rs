//! Deterministic training harness: SGD with momentum under a cosine
//! annealing schedule, a seeded epoch loop with flip augmentation, and
//! bit-exact checkpoint serialization (parameters plus optimizer velocity).
//!
//! Checkpoint layout (little-endian): magic `SWCK`, u32 version, u32 config
//! length + UTF-8 config text (the run config plus a `global_step` line),
//! u32 tensor count, then per tensor u16 name length, name bytes, u8 rank,
//! u32 dims, f32 payload.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{temporal_resample, SitsTile};
use crate::decoder::{argmax_classes, SegmentationModel};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::swin::Mode;
use crate::tensor::{ops, Tape, Tensor};

const CKPT_MAGIC: &[u8; 4] = b"SWCK";
const CKPT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity:";
// Distinct derived streams per epoch so shuffling, augmentation, and dropout
// draws never interleave.
const AUG_STREAM: u64 = 0x5155_4741;
const DROP_STREAM: u64 = 0x5244_4f50;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ignore_id: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            epochs: 200,
            batch_size: 2,
            seed: 0,
            ignore_id: 255,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "lr_min {} must not exceed lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if !self.lr_max.is_finite() || !self.lr_min.is_finite() || self.lr_min < 0.0 {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Param("total_steps must be at least 1".into()));
    }
    if step > total_steps {
        return Err(Error::Param(format!("step {step} outside [0, {total_steps}]")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `v <- momentum * v + g; w <- w - lr * v`, elementwise.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim(format!(
            "sgd step sizes disagree: {} params, {} grads, {} velocities",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for i in 0..param.len() {
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] = param[i] - lr * velocity[i];
    }
    Ok(())
}

/// One training-step record; rendered as
/// `epoch=<e> step=<s> lr=<v> loss=<v>`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Validation overall accuracy after each epoch, when a val split exists.
    pub val_history: Vec<(usize, f64)>,
    pub best_val: Option<(usize, f64)>,
}

impl TrainLog {
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!("epoch={} step={} lr={} loss={}\n", s.epoch, s.step, s.lr, s.loss));
        }
        out
    }
}

/// Serialized model + optimizer state with the run config embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub global_step: u64,
    /// Parameters under their store names, then velocities under
    /// `velocity:<name>`; order matches the parameter store.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let config_text = format!("{}global_step = {}\n", self.config.to_text(), self.global_step);
        buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(config_text.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*off..*off + n)
                .ok_or_else(|| Error::format(*off as u64, "truncated checkpoint"))?;
            *off += n;
            Ok(s)
        };
        let magic = take(&mut off, 4)?;
        if magic != CKPT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SWCK\"")));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let config_len =
            u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize;
        let config_off = off;
        let config_bytes = take(&mut off, config_len)?;
        let config_text = std::str::from_utf8(config_bytes)
            .map_err(|_| Error::format(config_off as u64, "config blob is not UTF-8"))?;
        // the global_step line rides along inside the config blob
        let mut global_step = None;
        let mut config_only = String::new();
        for line in config_text.lines() {
            if let Some(v) = line.strip_prefix("global_step =") {
                global_step = Some(v.trim().parse::<u64>().map_err(|_| {
                    Error::format(config_off as u64, format!("bad global_step `{}`", v.trim()))
                })?);
            } else {
                config_only.push_str(line);
                config_only.push('\n');
            }
        }
        let global_step = global_step
            .ok_or_else(|| Error::format(config_off as u64, "config blob lacks global_step"))?;
        let config = RunConfig::parse(&config_only)?;
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut off, 2)?.try_into().expect("2 bytes")) as usize;
            let name_off = off;
            let name = std::str::from_utf8(take(&mut off, name_len)?)
                .map_err(|_| Error::format(name_off as u64, "tensor name is not UTF-8"))?
                .to_string();
            let rank = take(&mut off, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize,
                );
            }
            let numel: usize = shape.iter().product();
            let payload_off = off;
            let payload = take(&mut off, numel * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::format(payload_off as u64, format!("tensor `{name}`: {e}")))?;
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(Error::format(
                    name_off as u64,
                    format!("duplicate tensor name `{name}`"),
                ));
            }
            tensors.push((name, tensor));
        }
        if off != bytes.len() {
            return Err(Error::format(off as u64, "trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { version, config, global_step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Parameter entries only (velocities stripped).
    pub fn params(&self) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(VELOCITY_PREFIX))
            .cloned()
            .collect()
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn restore_model(&self) -> Result<SegmentationModel<f32>> {
        let mut model = SegmentationModel::new(&self.config.model, self.config.train.seed)?;
        model.load_weights(&self.params())?;
        Ok(model)
    }
}

/// Model plus optimizer state advancing through the configured epochs.
pub struct Trainer {
    pub model: SegmentationModel<f32>,
    pub tcfg: TrainConfig,
    velocity: Vec<Vec<f32>>,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(model: SegmentationModel<f32>, tcfg: TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let velocity = model
            .params()
            .iter()
            .map(|(_, t)| vec![0.0f32; t.numel()])
            .collect();
        Ok(Trainer { model, tcfg, velocity, global_step: 0 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::with_capacity(self.model.params().len() * 2);
        for (name, tensor) in self.model.params().iter() {
            let mut t = tensor.clone();
            t.requires_grad = false;
            t.grad = None;
            tensors.push((name.to_string(), t));
        }
        for ((name, tensor), vel) in self.model.params().iter().zip(self.velocity.iter()) {
            let t = Tensor::new(tensor.shape().to_vec(), vel.clone()).expect("velocity shape");
            tensors.push((format!("{VELOCITY_PREFIX}{name}"), t));
        }
        Checkpoint {
            version: CKPT_VERSION,
            config: RunConfig { model: self.model.cfg.clone(), train: self.tcfg.clone() },
            global_step: self.global_step,
            tensors,
        }
    }

    /// Restore model weights, optimizer velocity, and step counter; training
    /// resumes at the epoch boundary the checkpoint was written on.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.restore_model()?;
        let mut trainer = Trainer::new(model, ckpt.config.train.clone())?;
        for (i, (name, tensor)) in trainer.model.params().iter().enumerate() {
            let vname = format!("{VELOCITY_PREFIX}{name}");
            let (_, v) = ckpt
                .tensors
                .iter()
                .find(|(n, _)| *n == vname)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks velocity for `{name}`")))?;
            if v.shape() != tensor.shape() {
                return Err(Error::dim(format!(
                    "velocity `{vname}` has shape {:?} but the parameter is {:?}",
                    v.shape(),
                    tensor.shape()
                )));
            }
            trainer.velocity[i] = v.data().to_vec();
        }
        trainer.global_step = ckpt.global_step;
        Ok(trainer)
    }

    /// Run the epoch loop over `train_tiles` up to `tcfg.epochs`, evaluating
    /// on `val_tiles` after each epoch when non-empty. With `out_dir` set,
    /// writes `best.ckpt` on validation improvements, plus `final.ckpt` and
    /// `train.log` at the end.
    pub fn fit(
        &mut self,
        train_tiles: &[SitsTile],
        val_tiles: &[SitsTile],
        out_dir: Option<&Path>,
    ) -> Result<TrainLog> {
        self.fit_partial(train_tiles, val_tiles, out_dir, self.tcfg.epochs)
    }

    /// Like [`Self::fit`] but stopping after at most `max_epochs` epochs in
    /// this call; the learning-rate schedule still spans the configured
    /// total, so checkpointing here and resuming later replays an
    /// uninterrupted run exactly.
    pub fn fit_partial(
        &mut self,
        train_tiles: &[SitsTile],
        val_tiles: &[SitsTile],
        out_dir: Option<&Path>,
        max_epochs: usize,
    ) -> Result<TrainLog> {
        if train_tiles.is_empty() {
            return Err(Error::Config("training requires at least one train tile".into()));
        }
        let tiles: Vec<SitsTile> = train_tiles
            .iter()
            .map(|t| temporal_resample(t, self.model.cfg.time_steps))
            .collect::<Result<_>>()?;
        let n = tiles.len();
        let batch = self.tcfg.batch_size;
        let steps_per_epoch = n.div_ceil(batch);
        let total_steps = (self.tcfg.epochs * steps_per_epoch) as u64;
        if self.global_step % steps_per_epoch as u64 != 0 {
            return Err(Error::Unsupported(format!(
                "resume only at epoch boundaries: step {} with {} steps per epoch",
                self.global_step, steps_per_epoch
            )));
        }
        let start_epoch = (self.global_step / steps_per_epoch as u64) as usize;
        let end_epoch = self.tcfg.epochs.min(start_epoch.saturating_add(max_epochs));
        let mut log = TrainLog::default();
        for epoch in start_epoch..end_epoch {
            let mut order: Vec<usize> = (0..n).collect();
            // per-epoch seed = seed + epoch
            SplitMix64::new(self.tcfg.seed.wrapping_add(epoch as u64)).shuffle(&mut order);
            let mut aug_rng =
                SplitMix64::new(self.tcfg.seed.wrapping_add(epoch as u64) ^ AUG_STREAM);
            let mut drop_rng =
                SplitMix64::new(self.tcfg.seed.wrapping_add(epoch as u64) ^ DROP_STREAM);
            for chunk in order.chunks(batch) {
                let lr = cosine_lr(self.global_step, total_steps, self.tcfg.lr_max, self.tcfg.lr_min)?;
                let loss = self.step(&tiles, chunk, lr, &mut aug_rng, &mut drop_rng)?;
                log.steps.push(StepRecord { epoch, step: self.global_step, lr, loss });
                self.global_step += 1;
            }
            if !val_tiles.is_empty() {
                let cm = evaluate(&self.model, val_tiles, self.tcfg.ignore_id, 1)?;
                let oa = cm.overall_accuracy()?;
                log.val_history.push((epoch, oa));
                let improved = log.best_val.map_or(true, |(_, best)| oa > best);
                if improved {
                    log.best_val = Some((epoch, oa));
                    if let Some(dir) = out_dir {
                        self.to_checkpoint().save(&dir.join("best.ckpt"))?;
                    }
                }
            }
        }
        if let Some(dir) = out_dir {
            self.to_checkpoint().save(&dir.join("final.ckpt"))?;
            fs::write(dir.join("train.log"), log.lines())?;
        }
        Ok(log)
    }

    fn step(
        &mut self,
        tiles: &[SitsTile],
        chunk: &[usize],
        lr: f64,
        aug_rng: &mut SplitMix64,
        drop_rng: &mut SplitMix64,
    ) -> Result<f64> {
        let cfg = &self.model.cfg;
        let (b, c, t_, h, w) =
            (chunk.len(), cfg.in_channels, cfg.time_steps, cfg.height, cfg.width);
        let mut x = Tensor::<f32>::zeros(&[b, c, t_, h, w]);
        let mut labels = vec![0u8; b * h * w];
        for (bi, &idx) in chunk.iter().enumerate() {
            let tile = augment_checked(&tiles[idx], cfg, aug_rng)?;
            pack_sample(&tile, bi, x.data_mut(), c, t_, h, w);
            labels[bi * h * w..(bi + 1) * h * w].copy_from_slice(&tile.labels);
        }
        let mut tape = Tape::new();
        let staged = self.model.stage(&mut tape, true);
        let xi = tape.constant(x);
        let logits = self.model.forward(
            &mut tape,
            &staged,
            xi,
            &mut Mode::Train { dropout_rng: drop_rng },
        )?;
        let loss_id = ops::cross_entropy(&mut tape, logits, &labels, self.tcfg.ignore_id)?;
        let loss = tape.scalar_value(loss_id) as f64;
        if !loss.is_finite() {
            return Err(Error::Degenerate(format!(
                "non-finite loss {loss} at step {}",
                self.global_step
            )));
        }
        tape.backward(loss_id)?;
        for (i, &leaf) in staged.ids().iter().enumerate() {
            let grad =
                tape.grad(leaf).expect("trainable leaves carry a gradient after backward");
            let store = self.model.params_mut();
            let param = store.value_mut(crate::params::ParamId(i)).data_mut();
            sgd_momentum_step(
                param,
                grad,
                &mut self.velocity[i],
                lr as f32,
                self.tcfg.momentum as f32,
            )?;
        }
        Ok(loss)
    }
}

fn augment_checked(
    tile: &SitsTile,
    cfg: &crate::swin::ModelConfig,
    rng: &mut SplitMix64,
) -> Result<SitsTile> {
    if tile.bands != cfg.in_channels || tile.height != cfg.height || tile.width != cfg.width {
        return Err(Error::dim(format!(
            "tile ({} bands, {}x{}) does not match the model config ({} bands, {}x{})",
            tile.bands, tile.height, tile.width, cfg.in_channels, cfg.height, cfg.width
        )));
    }
    Ok(crate::data::augment_flip(tile, rng))
}

/// Copy one `T x C x H x W` tile into sample `bi` of a `[B, C, T, H, W]` buffer.
fn pack_sample(tile: &SitsTile, bi: usize, dst: &mut [f32], c: usize, t_: usize, h: usize, w: usize) {
    let hw = h * w;
    for t in 0..t_ {
        for ch in 0..c {
            let src = &tile.values[(t * c + ch) * hw..(t * c + ch + 1) * hw];
            let off = (((bi * c + ch) * t_) + t) * hw;
            dst[off..off + hw].copy_from_slice(src);
        }
    }
}

/// Predicted class map of one tile (after temporal resampling to the model's
/// configured length).
pub fn predict_tile(model: &SegmentationModel<f32>, tile: &SitsTile) -> Result<Vec<u8>> {
    let cfg = &model.cfg;
    if tile.bands != cfg.in_channels {
        return Err(Error::dim(format!(
            "tile has {} bands but the checkpoint expects {}",
            tile.bands, cfg.in_channels
        )));
    }
    if tile.height != cfg.height || tile.width != cfg.width {
        return Err(Error::dim(format!(
            "tile is {}x{} but the checkpoint expects {}x{}",
            tile.height, tile.width, cfg.height, cfg.width
        )));
    }
    let tile = temporal_resample(tile, cfg.time_steps)?;
    let mut x = Tensor::<f32>::zeros(&[1, cfg.in_channels, cfg.time_steps, cfg.height, cfg.width]);
    pack_sample(&tile, 0, x.data_mut(), cfg.in_channels, cfg.time_steps, cfg.height, cfg.width);
    let logits = model.infer(&x)?;
    argmax_classes(&logits)
}

/// Pooled confusion matrix over `tiles`; `threads > 1` splits tiles across
/// worker threads and merges the partial matrices in chunk order.
pub fn evaluate(
    model: &SegmentationModel<f32>,
    tiles: &[SitsTile],
    ignore: u8,
    threads: usize,
) -> Result<ConfusionMatrix> {
    let k = model.cfg.num_classes;
    if tiles.is_empty() {
        return Err(Error::Degenerate("evaluation over zero tiles".into()));
    }
    let threads = threads.clamp(1, tiles.len());
    if threads == 1 {
        let mut cm = ConfusionMatrix::new(k);
        for tile in tiles {
            let pred = predict_tile(model, tile)?;
            cm.accumulate(&pred, &tile.labels, ignore)?;
        }
        return Ok(cm);
    }
    let chunk = tiles.len().div_ceil(threads);
    let partials: Vec<Result<ConfusionMatrix>> = std::thread::scope(|scope| {
        let handles: Vec<_> = tiles
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut cm = ConfusionMatrix::new(k);
                    for tile in part {
                        let pred = predict_tile(model, tile)?;
                        cm.accumulate(&pred, &tile.labels, ignore)?;
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut cm = ConfusionMatrix::new(k);
    for partial in partials {
        cm.merge(&partial?)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_tile, SynthSpec};
    use crate::swin::ModelConfig;

    fn tiny16_config() -> (ModelConfig, TrainConfig) {
        // 16x16 tiles keep unit tests fast; the tiny preset covers 48x48
        let model = ModelConfig {
            in_channels: 3,
            num_classes: 4,
            time_steps: 16,
            height: 16,
            width: 16,
            embed_dim: 4,
            num_heads: [2, 2, 2],
            window: [2, 2, 2],
            ..ModelConfig::munich_like()
        };
        let train = TrainConfig { epochs: 2, batch_size: 2, lr_max: 0.05, seed: 11, ..TrainConfig::default() };
        (model, train)
    }

    fn synth_tiles(n: usize, model: &ModelConfig, seed: u64) -> Vec<SitsTile> {
        let spec = SynthSpec {
            num_tiles: n,
            num_classes: model.num_classes,
            time_steps: model.time_steps,
            bands: model.in_channels,
            height: model.height,
            width: model.width,
            seed,
            split_counts: None,
        };
        let mut rng = SplitMix64::new(seed);
        (0..n).map(|_| synth_tile(&spec, &mut rng)).collect()
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert!((cosine_lr(0, 100, 0.01, 0.001).unwrap() - 0.01).abs() < 1e-15);
        assert!((cosine_lr(100, 100, 0.01, 0.001).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.01, 0.001).unwrap() - 0.0055).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.01, 0.0).is_err());
        assert!(cosine_lr(0, 0, 0.01, 0.0).is_err());
    }

    #[test]
    fn lr_sequence_is_nonincreasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=500 {
            let lr = cosine_lr(s, 500, 0.02, 0.001).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn sgd_step_examples() {
        // zero gradient and zero velocity leave parameters alone
        let mut w = [1.0f64, 2.0];
        let mut v = [0.0, 0.0];
        sgd_momentum_step(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(w, [1.0, 2.0]);

        // no momentum, unit lr: plain gradient descent
        let mut w = [1.0f64];
        let mut v = [0.0];
        sgd_momentum_step(&mut w, &[0.25], &mut v, 1.0, 0.0).unwrap();
        assert_eq!(w, [0.75]);

        // hand-evaluated two-step trace
        let mut w = [1.0f64];
        let mut v = [0.0];
        sgd_momentum_step(&mut w, &[0.5], &mut v, 0.1, 0.9).unwrap();
        assert!((w[0] - 0.95).abs() < 1e-15);
        assert!((v[0] - 0.5).abs() < 1e-15);
        sgd_momentum_step(&mut w, &[0.5], &mut v, 0.1, 0.9).unwrap();
        assert!((v[0] - 0.95).abs() < 1e-15);
        assert!((w[0] - 0.855).abs() < 1e-15);

        let mut w = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        assert!(sgd_momentum_step(&mut w, &[0.0], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn zero_epochs_is_a_config_error() {
        let (model, mut train) = tiny16_config();
        train.epochs = 0;
        let m = SegmentationModel::new(&model, 1).unwrap();
        assert!(matches!(Trainer::new(m, train), Err(Error::Config(_))));
    }

    #[test]
    fn empty_train_split_is_a_config_error() {
        let (model, train) = tiny16_config();
        let m = SegmentationModel::new(&model, 1).unwrap();
        let mut trainer = Trainer::new(m, train).unwrap();
        assert!(matches!(trainer.fit(&[], &[], None), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_seed_replays_loss_sequence() {
        let (model, train) = tiny16_config();
        let tiles = synth_tiles(4, &model, 21);
        let mut run = || {
            let m = SegmentationModel::new(&model, 7).unwrap();
            let mut trainer = Trainer::new(m, train.clone()).unwrap();
            let log = trainer.fit(&tiles, &[], None).unwrap();
            (log.steps.iter().map(|s| s.loss).collect::<Vec<_>>(), trainer.to_checkpoint().encode())
        };
        let (l1, c1) = run();
        let (l2, c2) = run();
        assert_eq!(l1, l2);
        assert_eq!(c1, c2);
        assert!(l1.len() >= 4);
    }

    #[test]
    fn loss_decreases_from_ln_k_when_overfitting() {
        let (model, mut train) = tiny16_config();
        train.epochs = 8;
        let tiles = synth_tiles(2, &model, 33);
        let m = SegmentationModel::new(&model, 5).unwrap();
        let mut trainer = Trainer::new(m, train).unwrap();
        let log = trainer.fit(&tiles, &[], None).unwrap();
        let first = log.steps.first().unwrap().loss;
        let last = log.steps.last().unwrap().loss;
        let ln_k = (model.num_classes as f64).ln();
        assert!((first - ln_k).abs() < 0.35, "first loss {first} far from ln K {ln_k}");
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let (model, train) = tiny16_config();
        let m = SegmentationModel::new(&model, 3).unwrap();
        let trainer = Trainer::new(m, train).unwrap();
        let ckpt = trainer.to_checkpoint();
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(bytes, back.encode());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let (model, train) = tiny16_config();
        let m = SegmentationModel::new(&model, 3).unwrap();
        let bytes = Trainer::new(m, train).unwrap().to_checkpoint().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn loading_into_mismatched_config_names_the_tensor() {
        let (model, train) = tiny16_config();
        let m = SegmentationModel::new(&model, 3).unwrap();
        let ckpt = Trainer::new(m, train).unwrap().to_checkpoint();
        let bigger = ModelConfig { embed_dim: 8, ..model };
        let mut target = SegmentationModel::<f32>::new(&bigger, 4).unwrap();
        let err = target.load_weights(&ckpt.params()).unwrap_err();
        assert!(err.to_string().contains("encoder.patch_embed.weight"), "{err}");
    }

    #[test]
    fn resume_reproduces_next_step_loss() {
        let (model, train) = tiny16_config();
        let tiles = synth_tiles(4, &model, 55);

        // uninterrupted two-epoch run
        let m = SegmentationModel::new(&model, 9).unwrap();
        let mut full = Trainer::new(m, train.clone()).unwrap();
        let full_log = full.fit(&tiles, &[], None).unwrap();

        // one epoch, checkpoint, resume
        let m = SegmentationModel::new(&model, 9).unwrap();
        let mut half = Trainer::new(m, TrainConfig { epochs: 1, ..train.clone() }).unwrap();
        half.fit(&tiles, &[], None).unwrap();
        let mut ckpt = half.to_checkpoint();
        ckpt.config.train.epochs = train.epochs;
        let ckpt = Checkpoint::decode(&ckpt.encode()).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        let resumed_log = resumed.fit(&tiles, &[], None).unwrap();

        let steps_per_epoch = full_log.steps.len() / train.epochs;
        assert_eq!(resumed_log.steps.len(), steps_per_epoch);
        for (a, b) in full_log.steps[steps_per_epoch..].iter().zip(resumed_log.steps.iter()) {
            assert_eq!(a.loss, b.loss, "step {} diverged after resume", b.step);
            assert_eq!(a.lr, b.lr);
        }
        // final states match bit for bit
        assert_eq!(full.to_checkpoint().encode(), resumed.to_checkpoint().encode());
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        // all-ignored labels cannot occur (cross entropy rejects them), so
        // drive the optimizer directly with zero gradients
        let mut w = vec![0.5f32; 8];
        let before = w.clone();
        let mut v = vec![0.0f32; 8];
        for _ in 0..5 {
            sgd_momentum_step(&mut w, &vec![0.0f32; 8], &mut v, 0.1, 0.9).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn evaluate_merges_threads_deterministically() {
        let (model, _) = tiny16_config();
        let m = SegmentationModel::new(&model, 13).unwrap();
        let tiles = synth_tiles(6, &model, 77);
        let a = evaluate(&m, &tiles, 255, 1).unwrap();
        let b = evaluate(&m, &tiles, 255, 3).unwrap();
        assert_eq!(a, b);
    }
}
