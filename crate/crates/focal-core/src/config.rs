//! Plain-text `key=value` configuration files: one pair per line, `#`
//! comments, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key {key:?}")));
        }
    }
    Ok(out)
}

/// One config file drives the whole pipeline: synthesis, loss, training,
/// and clustering knobs, all seeded from a single root seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    // Synthesis.
    pub image_size: usize,
    pub patch: usize,
    pub count: usize,
    pub fraction_lo: f32,
    pub fraction_hi: f32,
    pub fingerprint_amplitude: f32,
    pub conflict_pair: bool,
    // Training.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub dim: usize,
    // Loss.
    pub tau: f64,
    pub query_subsample: usize, // 0 = every positive row serves as query
    // Clustering.
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            patch: 4,
            count: 200,
            fraction_lo: 0.05,
            fraction_hi: 0.4,
            fingerprint_amplitude: 0.06,
            conflict_pair: false,
            steps: 800,
            batch_size: 4,
            lr: 1e-4,
            hidden: 64,
            dim: 32,
            tau: 0.07,
            query_subsample: 256,
            // Desk-scale grids are 16x16; the library defaults target larger
            // feature maps, so the pipeline config ships smaller values.
            min_cluster_size: 8,
            min_samples: 4,
            stride: 1,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = Self::default();
        for (key, value) in &kv {
            match key.as_str() {
                "seed" => cfg.seed = parse_num(key, value)?,
                "image_size" => cfg.image_size = parse_num(key, value)?,
                "patch" => cfg.patch = parse_num(key, value)?,
                "count" => cfg.count = parse_num(key, value)?,
                "fraction_lo" => cfg.fraction_lo = parse_num(key, value)?,
                "fraction_hi" => cfg.fraction_hi = parse_num(key, value)?,
                "fingerprint_amplitude" => cfg.fingerprint_amplitude = parse_num(key, value)?,
                "conflict_pair" => cfg.conflict_pair = parse_bool(key, value)?,
                "steps" => cfg.steps = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "lr" => cfg.lr = parse_num(key, value)?,
                "hidden" => cfg.hidden = parse_num(key, value)?,
                "dim" => cfg.dim = parse_num(key, value)?,
                "tau" => cfg.tau = parse_num(key, value)?,
                "query_subsample" => cfg.query_subsample = parse_num(key, value)?,
                "min_cluster_size" => cfg.min_cluster_size = parse_num(key, value)?,
                "min_samples" => cfg.min_samples = parse_num(key, value)?,
                "stride" => cfg.stride = parse_num(key, value)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if !(self.fraction_lo > 0.0 && self.fraction_hi < 1.0 && self.fraction_lo <= self.fraction_hi)
        {
            return Err(Error::Config(format!(
                "fraction range ({}, {}) must satisfy 0 < lo <= hi < 1",
                self.fraction_lo, self.fraction_hi
            )));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.hidden == 0 || self.dim == 0 {
            return Err(Error::Config("hidden and dim must be >= 1".into()));
        }
        if self.min_cluster_size < 2 {
            return Err(Error::Config("min_cluster_size must be >= 2".into()));
        }
        if self.min_samples == 0 || self.stride == 0 {
            return Err(Error::Config("min_samples and stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Echoes the effective configuration in parseable form.
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nimage_size={}\npatch={}\ncount={}\nfraction_lo={}\nfraction_hi={}\n\
             fingerprint_amplitude={}\nconflict_pair={}\nsteps={}\nbatch_size={}\nlr={}\n\
             hidden={}\ndim={}\ntau={}\nquery_subsample={}\nmin_cluster_size={}\n\
             min_samples={}\nstride={}\n",
            self.seed,
            self.image_size,
            self.patch,
            self.count,
            self.fraction_lo,
            self.fraction_hi,
            self.fingerprint_amplitude,
            self.conflict_pair,
            self.steps,
            self.batch_size,
            self.lr,
            self.hidden,
            self.dim,
            self.tau,
            self.query_subsample,
            self.min_cluster_size,
            self.min_samples,
            self.stride,
        )
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "key {key:?}: expected true/false, got {value:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = PipelineConfig::parse("# comment\nseed=7\nsteps=10\n\nconflict_pair=true\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.steps, 10);
        assert!(cfg.conflict_pair);
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            PipelineConfig::parse("bogus=1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse_kv("a=1\na=2\n").is_err());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(PipelineConfig::parse("steps=notanumber\n").is_err());
        assert!(PipelineConfig::parse("image_size=65\n").is_err());
        assert!(PipelineConfig::parse("fraction_lo=0.9\nfraction_hi=0.1\n").is_err());
        assert!(PipelineConfig::parse("tau=0\n").is_err());
        assert!(PipelineConfig::parse("min_cluster_size=1\n").is_err());
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 99;
        cfg.conflict_pair = true;
        cfg.lr = 5e-4;
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }
}
