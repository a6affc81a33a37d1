//! Line-based `key = value` run configuration covering the model and
//! training hyperparameters. Unknown keys are rejected with line numbers;
//! `preset` seeds the defaults before any override applies.

use crate::error::{Error, Result};
use crate::swin::ModelConfig;
use crate::train::TrainConfig;

/// Parsed union of [`ModelConfig`] and [`TrainConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::munich_like(), train: TrainConfig::default() }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = match name {
            "munich-like" => ModelConfig::munich_like(),
            "lombardia-like" => ModelConfig::lombardia_like(),
            "tiny" => ModelConfig::tiny(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected munich-like, lombardia-like, or tiny)"
                )))
            }
        };
        Ok(RunConfig { model, train: TrainConfig::default() })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Parse config text; every model and train invariant is re-checked and
    /// diagnostics carry the offending line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut preset: Option<(String, usize)> = None;
        let mut pairs: Vec<(String, String, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if value.is_empty() {
                return Err(Error::Config(format!("line {lineno}: key `{key}` has no value")));
            }
            if key == "preset" {
                if preset.is_some() {
                    return Err(Error::Config(format!("line {lineno}: duplicate key `preset`")));
                }
                preset = Some((value, lineno));
                continue;
            }
            if pairs.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
            pairs.push((key, value, lineno));
        }
        let mut cfg = match preset {
            Some((name, lineno)) => RunConfig::preset(&name)
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?,
            None => RunConfig::default(),
        };
        for (key, value, lineno) in pairs {
            cfg.apply(&key, &value, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        fn bad(lineno: usize, key: &str, value: &str, want: &str) -> Error {
            Error::Config(format!("line {lineno}: key `{key}` expects {want}, got `{value}`"))
        }
        let as_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| bad(lineno, key, v, "an unsigned integer"))
        };
        let as_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad(lineno, key, v, "a number"));
        let as_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad(lineno, key, v, "an unsigned integer"));
        let as_u8 = |v: &str| v.parse::<u8>().map_err(|_| bad(lineno, key, v, "a byte value"));
        let as_triple = |v: &str| -> Result<[usize; 3]> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(bad(lineno, key, v, "three comma-separated integers"));
            }
            let mut out = [0usize; 3];
            for (i, p) in parts.iter().enumerate() {
                out[i] =
                    p.parse::<usize>().map_err(|_| bad(lineno, key, v, "three comma-separated integers"))?;
            }
            Ok(out)
        };
        match key {
            "in_channels" => self.model.in_channels = as_usize(value)?,
            "num_classes" => self.model.num_classes = as_usize(value)?,
            "time_steps" => self.model.time_steps = as_usize(value)?,
            "height" => self.model.height = as_usize(value)?,
            "width" => self.model.width = as_usize(value)?,
            "embed_dim" => self.model.embed_dim = as_usize(value)?,
            "mlp_ratio" => self.model.mlp_ratio = as_usize(value)?,
            "patch_size" => self.model.patch_size = as_triple(value)?,
            "depths" => self.model.depths = as_triple(value)?,
            "num_heads" => self.model.num_heads = as_triple(value)?,
            "window" => self.model.window = as_triple(value)?,
            "attn_dropout" => self.model.attn_dropout = as_f64(value)?,
            "proj_dropout" => self.model.proj_dropout = as_f64(value)?,
            "lr_max" => self.train.lr_max = as_f64(value)?,
            "lr_min" => self.train.lr_min = as_f64(value)?,
            "momentum" => self.train.momentum = as_f64(value)?,
            "epochs" => self.train.epochs = as_usize(value)?,
            "batch_size" => self.train.batch_size = as_usize(value)?,
            "seed" => self.train.seed = as_u64(value)?,
            "ignore_id" => self.train.ignore_id = as_u8(value)?,
            other => {
                return Err(Error::Config(format!("line {lineno}: unknown key `{other}`")));
            }
        }
        Ok(())
    }

    /// Serialize every key in a fixed order; `parse` round-trips the result.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let triple = |v: [usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!(
            "in_channels = {}\nnum_classes = {}\ntime_steps = {}\nheight = {}\nwidth = {}\n\
             patch_size = {}\nembed_dim = {}\ndepths = {}\nnum_heads = {}\nwindow = {}\n\
             mlp_ratio = {}\nattn_dropout = {}\nproj_dropout = {}\n\
             lr_max = {}\nlr_min = {}\nmomentum = {}\nepochs = {}\nbatch_size = {}\nseed = {}\nignore_id = {}\n",
            m.in_channels,
            m.num_classes,
            m.time_steps,
            m.height,
            m.width,
            triple(m.patch_size),
            m.embed_dim,
            triple(m.depths),
            triple(m.num_heads),
            triple(m.window),
            m.mlp_ratio,
            m.attn_dropout,
            m.proj_dropout,
            t.lr_max,
            t.lr_min,
            t.momentum,
            t.epochs,
            t.batch_size,
            t.seed,
            t.ignore_id,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_paper_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.model.num_classes, 18);
        assert_eq!(cfg.model.time_steps, 32);
    }

    #[test]
    fn preset_then_overrides() {
        let cfg = RunConfig::parse("preset = tiny\nepochs = 5\nseed = 9\n").unwrap();
        assert_eq!(cfg.model.embed_dim, 12);
        assert_eq!(cfg.model.num_classes, 5);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# full line comment\n\nepochs = 7 # trailing\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("epochs = 2\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(RunConfig::parse("epochs = 2\nepochs = 3\n").is_err());
        assert!(RunConfig::parse("epochs\n").is_err());
        assert!(RunConfig::parse("epochs = \n").is_err());
        assert!(RunConfig::parse("epochs = two\n").is_err());
    }

    #[test]
    fn invariants_rechecked_at_parse_time() {
        // multiple-of-16 rule surfaces as a config error
        assert!(RunConfig::parse("time_steps = 17\n").is_err());
        assert!(RunConfig::parse("preset = tiny\nwindow = 2,5,5\n").is_err());
        assert!(RunConfig::parse("momentum = 1.5\n").is_err());
    }

    #[test]
    fn text_roundtrip() {
        for name in ["munich-like", "lombardia-like", "tiny"] {
            let cfg = RunConfig::preset(name).unwrap();
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(cfg, back);
        }
    }
}
