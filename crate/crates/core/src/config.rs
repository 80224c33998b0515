//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment. Every key must appear in
//! [`SCHEMA`]; values are validated on insertion. Later insertions win, so
//! applying the file and then the command-line flags gives the precedence
//! flag > file > default.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{LaplaceTarget, RecNorm};
use crate::mesh::RegionSelector;
use crate::mesh::VertexWeightMask;
use crate::parammap::MapFitConfig;
use crate::trainer::{NumericMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    /// Non-negative integer not below the bound.
    Int(u64),
    /// Finite float, strictly positive when the flag is set.
    Float {
        positive: bool,
    },
    /// Float in `[0, 1)`.
    Unit,
    Choice(&'static [&'static str]),
    /// `uniform`, `lips` or a comma-separated vertex list.
    Mask,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn spec(key: &'static str, kind: Kind, help: &'static str) -> KeySpec {
    KeySpec { key, kind, help }
}

const POS: Kind = Kind::Float { positive: true };
const NONNEG: Kind = Kind::Float { positive: false };

pub const SCHEMA: &[KeySpec] = &[
    spec("seed", Kind::Int(0), "root seed, fanned out per role"),
    spec(
        "preset",
        Kind::Choice(&["desk", "full"]),
        "architecture defaults",
    ),
    spec("nv", Kind::Int(36), "synthetic template vertex count"),
    spec("k", Kind::Int(1), "blendshapes per domain"),
    spec("eps", NONNEG, "synthetic cross-domain weight scale"),
    spec("samples", Kind::Int(1), "synthetic samples per domain"),
    spec("learning_rate", POS, "Adam step size"),
    spec("batch_size", Kind::Int(1), "samples per step"),
    spec("epochs", Kind::Int(1), "training epochs"),
    spec("beta1", Kind::Unit, "Adam first-moment decay"),
    spec("beta2", Kind::Unit, "Adam second-moment decay"),
    spec("adam_eps", POS, "Adam denominator offset"),
    spec("lambda_rec", NONNEG, "reconstruction weight"),
    spec("lambda_sparsity", NONNEG, "cross-half L1 weight"),
    spec("lambda_laplace", NONNEG, "Laplacian smoothing weight"),
    spec("lambda_reg", NONNEG, "basis magnitude weight"),
    spec(
        "rec_norm",
        Kind::Choice(&["norm", "squared"]),
        "per-vertex residual form",
    ),
    spec(
        "laplace_target",
        Kind::Choice(&["positions", "displacement"]),
        "field the Laplacian smooths",
    ),
    spec(
        "numeric",
        Kind::Choice(&["f32", "f64"]),
        "training precision",
    ),
    spec("grid", Kind::Int(4), "geometry image side"),
    spec("channels_base", Kind::Int(1), "first encoder block width"),
    spec("channels_cap", Kind::Int(1), "encoder width cap"),
    spec("input_scale", POS, "encoder input multiplier"),
    spec("mask", Kind::Mask, "vertex weight region"),
    spec("mask_boost", NONNEG, "weight of masked vertices"),
    spec("lambda_fit", POS, "mapping fit weight"),
    spec("map_lambda_reg", NONNEG, "mapping magnitude weight"),
    spec(
        "map_tolerance",
        Kind::Unit,
        "relative singular-value cut for rank checks",
    ),
    spec("frames", Kind::Int(1), "benchmark frame count"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSpec {
    Uniform,
    Lips,
    Vertices(Vec<usize>),
}

fn parse_mask(v: &str) -> std::result::Result<MaskSpec, String> {
    match v {
        "uniform" => Ok(MaskSpec::Uniform),
        "lips" => Ok(MaskSpec::Lips),
        list => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("vertex index {s:?}: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(MaskSpec::Vertices),
    }
}

fn check(spec: &KeySpec, v: &str) -> std::result::Result<(), String> {
    match spec.kind {
        Kind::Int(min) => {
            let x: u64 = v.parse().map_err(|e| format!("expected an integer: {e}"))?;
            if x < min {
                return Err(format!("must be >= {min}"));
            }
        }
        Kind::Float { positive } => {
            let x: f64 = v.parse().map_err(|e| format!("expected a number: {e}"))?;
            if !x.is_finite() || x < 0.0 || (positive && x == 0.0) {
                return Err(if positive {
                    "must be > 0".into()
                } else {
                    "must be >= 0".into()
                });
            }
        }
        Kind::Unit => {
            let x: f64 = v.parse().map_err(|e| format!("expected a number: {e}"))?;
            if !(0.0..1.0).contains(&x) {
                return Err("must lie in [0, 1)".into());
            }
        }
        Kind::Choice(options) => {
            if !options.contains(&v) {
                return Err(format!("expected one of {}", options.join(", ")));
            }
        }
        Kind::Mask => {
            parse_mask(v)?;
        }
    }
    Ok(())
}

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Validated key/value settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let value = value.trim();
        check(spec, value).map_err(|m| Error::Config(format!("{key}: {m}")))?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Sets `key` when `value` is present.
    pub fn set_opt<V: ToString>(&mut self, key: &str, value: Option<V>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.merge_text(text, origin)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            self.set(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        // values were checked on insertion
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn u64_or(&self, key: &str, default: u64) -> u64 {
        self.typed(key).unwrap_or(default)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> usize {
        self.typed(key).unwrap_or(default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> f64 {
        self.typed(key).unwrap_or(default)
    }

    pub fn mask(&self) -> MaskSpec {
        self.get("mask")
            .and_then(|v| parse_mask(v).ok())
            .unwrap_or(MaskSpec::Uniform)
    }

    /// Training configuration: the preset, then every training key present.
    /// `lips` resolves the `lips` mask.
    pub fn train_config(&self, seed: u64, lips: Option<&[usize]>) -> Result<TrainConfig> {
        let mut c = match self.get("preset") {
            Some("full") => TrainConfig::default(),
            _ => TrainConfig::desk(),
        };
        c.seed = seed;
        c.learning_rate = self.f64_or("learning_rate", c.learning_rate);
        c.batch_size = self.usize_or("batch_size", c.batch_size);
        c.epochs = self.usize_or("epochs", c.epochs);
        c.beta1 = self.f64_or("beta1", c.beta1);
        c.beta2 = self.f64_or("beta2", c.beta2);
        c.adam_eps = self.f64_or("adam_eps", c.adam_eps);
        c.weights.rec = self.f64_or("lambda_rec", c.weights.rec);
        c.weights.sparsity = self.f64_or("lambda_sparsity", c.weights.sparsity);
        c.weights.laplace = self.f64_or("lambda_laplace", c.weights.laplace);
        c.weights.reg = self.f64_or("lambda_reg", c.weights.reg);
        match self.get("rec_norm") {
            Some("squared") => c.rec_norm = RecNorm::Squared,
            Some("norm") => c.rec_norm = RecNorm::Norm,
            _ => {}
        }
        match self.get("laplace_target") {
            Some("displacement") => c.laplace_target = LaplaceTarget::Displacement,
            Some("positions") => c.laplace_target = LaplaceTarget::Positions,
            _ => {}
        }
        match self.get("numeric") {
            Some("f64") => c.numeric = NumericMode::F64,
            Some("f32") => c.numeric = NumericMode::F32,
            _ => {}
        }
        c.k = self.usize_or("k", c.k);
        c.grid = self.usize_or("grid", c.grid);
        c.channels_base = self.usize_or("channels_base", c.channels_base);
        c.channels_cap = self.usize_or("channels_cap", c.channels_cap);
        c.input_scale = self.f64_or("input_scale", c.input_scale as f64) as f32;
        c.mask_boost = self.f64_or("mask_boost", c.mask_boost as f64) as f32;
        c.mask = match self.mask() {
            MaskSpec::Uniform => RegionSelector::Uniform,
            MaskSpec::Vertices(v) => RegionSelector::Vertices(v),
            MaskSpec::Lips => RegionSelector::Vertices(
                lips.ok_or_else(|| Error::Config("mask = lips needs a world file".into()))?
                    .to_vec(),
            ),
        };
        c.validate()?;
        Ok(c)
    }

    /// Mapping fit settings over `n_vertices`, weights from the mask keys.
    pub fn map_fit_config(
        &self,
        n_vertices: usize,
        lips: Option<&[usize]>,
    ) -> Result<MapFitConfig> {
        let boost = self.f64_or("mask_boost", 5.0) as f32;
        let mut weights = vec![1.0f32; n_vertices];
        let selected: Vec<usize> = match self.mask() {
            MaskSpec::Uniform => Vec::new(),
            MaskSpec::Vertices(v) => v,
            MaskSpec::Lips => lips
                .ok_or_else(|| Error::Config("mask = lips needs a world file".into()))?
                .to_vec(),
        };
        for i in selected {
            if i >= n_vertices {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: n_vertices,
                });
            }
            weights[i] = boost;
        }
        let defaults = MapFitConfig::uniform(n_vertices);
        let cfg = MapFitConfig {
            lambda_fit: self.f64_or("lambda_fit", defaults.lambda_fit),
            lambda_reg: self.f64_or("map_lambda_reg", defaults.lambda_reg),
            mask: VertexWeightMask::new(weights)?,
            tolerance: self.f64_or("map_tolerance", defaults.tolerance),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let c = RunConfig::parse(
            "# header\n\nk = 4\nlearning_rate=1e-3 # inline\n",
            Path::new("a.cfg"),
        )
        .unwrap();
        assert_eq!(c.get("k"), Some("4"));
        assert_eq!(c.f64_or("learning_rate", 0.0), 1e-3);
    }

    #[test]
    fn rejects_unknown_keys_with_line() {
        let err = RunConfig::parse("k = 4\nlearnin_rate = 1\n", Path::new("a.cfg")).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("a.cfg:2") && msg.contains("unknown key"),
            "{msg}"
        );
    }

    #[test]
    fn rejects_bad_values() {
        for line in [
            "eps = -1",
            "k = 0",
            "beta1 = 1",
            "numeric = f16",
            "mask = 1,x",
            "epochs = 2.5",
            "learning_rate = nan",
            "oops",
        ] {
            assert!(RunConfig::parse(line, Path::new("c")).is_err(), "{line}");
        }
    }

    #[test]
    fn later_values_override() {
        let mut c =
            RunConfig::parse("epochs = 10\nlambda_sparsity = 0.5\n", Path::new("c")).unwrap();
        c.set_opt("epochs", Some(3)).unwrap();
        c.set_opt::<f64>("lambda_sparsity", None).unwrap();
        let t = c.train_config(1, None).unwrap();
        assert_eq!(t.epochs, 3);
        assert_eq!(t.weights.sparsity, 0.5);
        assert_eq!(t.learning_rate, TrainConfig::desk().learning_rate);
    }

    #[test]
    fn presets_and_masks() {
        let mut c = RunConfig::new();
        assert_eq!(c.train_config(0, None).unwrap().k, TrainConfig::desk().k);
        c.set("preset", "full").unwrap();
        assert_eq!(c.train_config(0, None).unwrap().k, TrainConfig::default().k);
        c.set("mask", "lips").unwrap();
        assert!(c.train_config(0, None).is_err());
        let t = c.train_config(0, Some(&[3, 4])).unwrap();
        assert_eq!(t.mask, RegionSelector::Vertices(vec![3, 4]));
        c.set("mask", "1, 2").unwrap();
        let m = c.map_fit_config(3, None).unwrap();
        assert_eq!(m.mask.weights(), &[1.0, 5.0, 5.0]);
        c.set("mask", "7").unwrap();
        assert!(c.map_fit_config(3, None).is_err());
    }

    #[test]
    fn every_schema_key_accepts_a_valid_value() {
        for s in SCHEMA {
            let v = match s.kind {
                Kind::Int(min) => min.max(1).to_string(),
                Kind::Float { .. } => "0.5".into(),
                Kind::Unit => "0.5".into(),
                Kind::Choice(o) => o[0].into(),
                Kind::Mask => "uniform".into(),
            };
            RunConfig::new().set(s.key, &v).unwrap();
        }
    }
}
