//! Flat `key=value` run configuration shared by the command-line tools.
//!
//! One key per line, `#` starts a comment. Keys belong to the model spec,
//! the training config, the evaluation protocol or the data options; an
//! unknown key is an error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::nn::{parse_num, ModelSpec};
use crate::train::TrainConfig;

/// Optional stratified subsampling applied after loading a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataOptions {
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub subset_seed: u64,
}

impl DataOptions {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let opt = |v: &str| -> Result<Option<usize>> {
            match v {
                "" | "all" => Ok(None),
                n => parse_num(key, n).map(Some),
            }
        };
        match key {
            "subset" => self.subset = opt(value)?,
            "test_subset" => self.test_subset = opt(value)?,
            "subset_seed" => self.subset_seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("all".to_string(), |n| n.to_string());
        format!(
            "subset={}\ntest_subset={}\nsubset_seed={}\n",
            opt(self.subset),
            opt(self.test_subset),
            self.subset_seed
        )
    }

    pub fn apply(&self, dataset: Dataset) -> Result<Dataset> {
        let mut ds = dataset;
        if let Some(n) = self.subset {
            ds = ds.stratified_subset(n, self.subset_seed)?;
        }
        if let Some(n) = self.test_subset {
            ds = ds.stratified_test_subset(n, self.subset_seed)?;
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub data: DataOptions,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        if self.model.set(key, value)?
            || self.train.set(key, value)?
            || self.eval.set(key, value)?
            || self.data.set(key, value)?
        {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key '{key}'")))
        }
    }

    /// Applies `key=value` assignments in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies `key=value` overrides, typically from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Canonical text; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (title, body) in [
            ("model", self.model.to_text()),
            ("train", self.train.to_text()),
            ("eval", self.eval.to_text()),
            ("data", self.data.to_text()),
        ] {
            let _ = write!(s, "# {title}\n{body}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Precision;

    #[test]
    fn text_round_trip_and_overrides() {
        let mut cfg = RunConfig::from_text(
            "# comment\nwidths=8,16\nvariant=ssql\nepochs=3 # inline\nbits=fp,4w4a\nsubset=100\n\nprobe_lr=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.model.widths, vec![8, 16]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.eval.bits, vec![Precision::Fp, "4w4a".parse().unwrap()]);
        assert_eq!(cfg.data.subset, Some(100));
        cfg.apply_overrides(&["epochs=7", "subset=all"]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.data.subset, None);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        assert!(matches!(
            RunConfig::from_text("nope=1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_text("epochs"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_text("epochs=x").is_err());
    }
}
