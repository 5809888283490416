//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::{PositionMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{AttnGenConfig, MaskSource};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Everything a command needs: data location, architecture, training and
/// analysis settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub train_fraction: f64,
    pub model: AttnGenConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    /// Cap on sequences used by occlusion and saliency analysis.
    pub eval_count: usize,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            train_fraction: 0.9,
            model: AttnGenConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            eval_count: 3000,
            eval_batch_size: 256,
        }
    }
}

/// Splits text into `(line, key, value)` triples. Blank lines and `#`
/// comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(u64, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i as u64 + 1,
                message: format!("expected `key = value`, got {line:?}"),
            });
        };
        out.push((i as u64 + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))
}

fn num<X: FromStr>(key: &str, value: &str) -> Result<X> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for `{key}`"))),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| num(key, s.trim())).collect()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train_fraction" => self.train_fraction = num(key, value)?,
            "seq_len" => m.seq_len = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "kernel" => m.kernel = num(key, value)?,
            "channels" => m.channels = list(key, value)?,
            "pool_width" => m.pool_width = num(key, value)?,
            "pool_stride" => m.pool_stride = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "fc_hidden" => m.fc_hidden = num(key, value)?,
            "bn_momentum" => m.bn_momentum = num(key, value)?,
            "bn_eps" => m.bn_eps = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "alpha" => t.alpha = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "mask_source" => {
                t.mask_source = match value {
                    "attention" => MaskSource::Attention,
                    "random" => MaskSource::Random,
                    _ => return Err(Error::Config(format!("invalid mask_source {value:?}"))),
                }
            }
            "log_wall_time" => t.log_wall_time = boolean(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid precision {value:?}"))),
                }
            }
            "eval_count" => self.eval_count = num(key, value)?,
            "eval_batch_size" => self.eval_batch_size = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = parse_override(o.as_ref())?;
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if self.eval_count == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("eval_count and eval_batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key with its final value, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let channels: Vec<String> = m.channels.iter().map(|c| c.to_string()).collect();
        let mut s = String::new();
        let data = self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data", data);
        put("train_fraction", self.train_fraction.to_string());
        put("seq_len", m.seq_len.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("kernel", m.kernel.to_string());
        put("channels", channels.join(","));
        put("pool_width", m.pool_width.to_string());
        put("pool_stride", m.pool_stride.to_string());
        put("dropout", m.dropout.to_string());
        put("fc_hidden", m.fc_hidden.to_string());
        put("bn_momentum", m.bn_momentum.to_string());
        put("bn_eps", m.bn_eps.to_string());
        put("lr", t.lr.to_string());
        put("batch_size", t.batch_size.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("lambda", t.lambda.to_string());
        put("alpha", t.alpha.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        put("clip_norm", t.clip_norm.to_string());
        put("seed", t.seed.to_string());
        put(
            "mask_source",
            match t.mask_source {
                MaskSource::Attention => "attention",
                MaskSource::Random => "random",
            }
            .into(),
        );
        put("log_wall_time", t.log_wall_time.to_string());
        put(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        put("eval_count", self.eval_count.to_string());
        put("eval_batch_size", self.eval_batch_size.to_string());
        s
    }
}

/// Reads a synthetic-corpus spec: `count`, `length`, `motif_class0`,
/// `motif_class1`, `plant_probability`, `position` (`uniform` or an offset)
/// and `seed`.
pub fn parse_synthetic_spec(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for (line, k, v) in parse_pairs(text)? {
        let ctx = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("line {line}: {m}")),
            other => other,
        };
        match k.as_str() {
            "count" => spec.count = num(&k, &v).map_err(ctx)?,
            "length" => spec.length = num(&k, &v).map_err(ctx)?,
            "motif_class0" => spec.motif_class0 = v,
            "motif_class1" => spec.motif_class1 = v,
            "plant_probability" => spec.plant_probability = num(&k, &v).map_err(ctx)?,
            "position" => {
                spec.position_mode = if v == "uniform" {
                    PositionMode::Uniform
                } else {
                    PositionMode::Fixed(num(&k, &v).map_err(ctx)?)
                }
            }
            "seed" => spec.seed = num(&k, &v).map_err(ctx)?,
            _ => return Err(ctx(Error::Config(format!("unknown key `{k}`")))),
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["alpha=0.25", "channels = 8,4,2", "precision=f64", "data=x.csv"])
            .unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model.channels, vec![8, 4, 2]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("lr = 0.1\n# note\nlearning_rate = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(matches!(RunConfig::from_text("lr 0.1"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::from_text("lr = fast").is_err());
        assert!(RunConfig::default().apply_overrides(&["alpha"]).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut cfg = RunConfig::from_text("alpha = 0.5\nseed = 3\n").unwrap();
        cfg.apply_overrides(&["alpha=0.1"]).unwrap();
        assert_eq!(cfg.train.alpha, 0.1);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn synthetic_spec_parsing() {
        let s = parse_synthetic_spec("count = 1000\nposition = 17\nseed=9").unwrap();
        assert_eq!(s.count, 1000);
        assert_eq!(s.position_mode, PositionMode::Fixed(17));
        assert_eq!(s.seed, 9);
        assert!(parse_synthetic_spec("colour = red").is_err());
    }
}
