//! Run configuration: built-in profiles, flat `key=value` files, overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::RoutingMode;
use crate::model::ModelDims;
use crate::optim::LrSchedule;
use crate::tensor::Precision;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected paper or desk)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub dims: ModelDims,
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub decay: f64,
    pub period: usize,
    pub seed: u64,
    pub routing: RoutingMode,
    pub precision: Precision,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

const KEYS: &[&str] = &[
    "profile",
    "k",
    "d_v",
    "d_w",
    "d_q",
    "d_f",
    "n_w",
    "n_c",
    "h_cq",
    "h_ap",
    "epochs",
    "batch",
    "lr0",
    "decay",
    "period",
    "seed",
    "routing",
    "precision",
    "train_manifest",
    "val_manifest",
    "checkpoint",
    "report",
    "log",
];

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (dims, epochs, batch, lr0, period) = match profile {
            Profile::Paper => (
                ModelDims {
                    k: 36,
                    d_v: 2048,
                    d_w: 300,
                    d_q: 1024,
                    d_f: 1024,
                    n_w: 14,
                    n_c: 12,
                    h_cq: 1024,
                    h_ap: 1024,
                },
                17,
                512,
                0.002,
                5,
            ),
            Profile::Desk => (
                ModelDims {
                    k: 4,
                    d_v: 16,
                    d_w: 8,
                    d_q: 32,
                    d_f: 32,
                    n_w: 6,
                    n_c: 4,
                    h_cq: 32,
                    h_ap: 32,
                },
                DESK_EPOCHS,
                DESK_BATCH,
                DESK_LR0,
                DESK_PERIOD,
            ),
        };
        RunConfig {
            profile,
            dims,
            epochs,
            batch,
            lr0,
            decay: 0.1,
            period,
            seed: 7,
            routing: RoutingMode::TeacherForced,
            precision: Precision::F32,
            train_manifest: None,
            val_manifest: None,
            checkpoint: None,
            report: None,
            log: None,
        }
    }

    /// Resolves a configuration: profile defaults, then `file`, then `flags`.
    ///
    /// A `profile` key in either layer picks the base (flags win). Relative
    /// paths in the file resolve against the file's directory.
    pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let file_pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        let pick = |pairs: &[(String, String)]| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == "profile")
                .map(|(_, v)| v.parse::<Profile>())
                .transpose()
        };
        let profile = pick(flags)?
            .or(pick(&file_pairs)?)
            .unwrap_or(Profile::Paper);
        let mut cfg = Self::profile(profile);
        let base = file.and_then(Path::parent).unwrap_or(Path::new(""));
        for (k, v) in &file_pairs {
            cfg.set(k, v, Some(base))?;
        }
        for (k, v) in flags {
            cfg.set(k, v, None)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Paths are joined onto `base` when given and relative.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        fn num<N: FromStr>(key: &str, value: &str) -> Result<N> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            Some(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };
        let d = &mut self.dims;
        match key {
            "profile" => self.profile = value.parse()?,
            "k" => d.k = num(key, value)?,
            "d_v" => d.d_v = num(key, value)?,
            "d_w" => d.d_w = num(key, value)?,
            "d_q" => d.d_q = num(key, value)?,
            "d_f" => d.d_f = num(key, value)?,
            "n_w" => d.n_w = num(key, value)?,
            "n_c" => d.n_c = num(key, value)?,
            "h_cq" => d.h_cq = num(key, value)?,
            "h_ap" => d.h_ap = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "period" => self.period = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "routing" => self.routing = value.parse()?,
            "precision" => self.precision = value.parse()?,
            "train_manifest" => self.train_manifest = path(value),
            "val_manifest" => self.val_manifest = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "report" => self.report = path(value),
            "log" => self.log = path(value),
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dims
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.decay.is_finite() && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr0,
            decay: self.decay,
            period: self.period,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            schedule: self.schedule(),
            seed: self.seed,
            routing: self.routing,
        }
    }

    /// Every key with its resolved value, in file order. Unset paths are omitted.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.dims;
        let mut out = vec![
            ("profile", self.profile.to_string()),
            ("k", d.k.to_string()),
            ("d_v", d.d_v.to_string()),
            ("d_w", d.d_w.to_string()),
            ("d_q", d.d_q.to_string()),
            ("d_f", d.d_f.to_string()),
            ("n_w", d.n_w.to_string()),
            ("n_c", d.n_c.to_string()),
            ("h_cq", d.h_cq.to_string()),
            ("h_ap", d.h_ap.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr0", self.lr0.to_string()),
            ("decay", self.decay.to_string()),
            ("period", self.period.to_string()),
            ("seed", self.seed.to_string()),
            ("routing", self.routing.to_string()),
            ("precision", self.precision.to_string()),
        ];
        for (key, p) in [
            ("train_manifest", &self.train_manifest),
            ("val_manifest", &self.val_manifest),
            ("checkpoint", &self.checkpoint),
            ("report", &self.report),
            ("log", &self.log),
        ] {
            if let Some(p) = p {
                out.push((key, p.display().to_string()));
            }
        }
        out
    }

    /// The configuration as a flat `key=value` file that [`RunConfig::resolve`] reads back.
    pub fn to_file_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

// Desk runs have few samples per epoch, so the rate starts higher and decays later.
const DESK_EPOCHS: usize = 30;
const DESK_BATCH: usize = 32;
const DESK_LR0: f64 = 0.01;
const DESK_PERIOD: usize = 20;

/// Parses `key=value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
