//! Plain-text `key = value` configuration files with `#` comments.

use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSceneSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Types that can be read from and written to a `key = value` file.
pub trait KeyValueConfig: Sized + Default {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    /// Every setting, in file order.
    fn pairs(&self) -> Vec<(&'static str, String)>;

    fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_pairs(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    fn read(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Splits a config file into `(key, value)` pairs; repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Accepts `inf` for an infinite value.
fn parse_f64(key: &str, value: &str) -> Result<f64> {
    match value {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => parse(key, value),
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key {key:?}"))
}

impl KeyValueConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "group_len" => self.group_len = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "state_dim" => self.state_dim = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("alpha", self.alpha.to_string()),
            ("patch", self.patch.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("group_len", self.group_len.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
        ]
    }
}

impl KeyValueConfig for SyntheticSceneSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "bands" => self.bands = parse(key, value)?,
            "endmembers" => self.endmembers = parse(key, value)?,
            "snr_db" => self.snr_db = parse_f64(key, value)?,
            "abundance_lo" => self.abundance_lo = parse(key, value)?,
            "abundance_hi" => self.abundance_hi = parse(key, value)?,
            "target_pixels" => self.target_pixels = parse(key, value)?,
            "target_blob" => self.target_blob = parse(key, value)?,
            "smoothness" => self.smoothness = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("bands", self.bands.to_string()),
            ("endmembers", self.endmembers.to_string()),
            ("snr_db", self.snr_db.to_string()),
            ("abundance_lo", self.abundance_lo.to_string()),
            ("abundance_hi", self.abundance_hi.to_string()),
            ("target_pixels", self.target_pixels.to_string()),
            ("target_blob", self.target_blob.to_string()),
            ("smoothness", self.smoothness.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}
