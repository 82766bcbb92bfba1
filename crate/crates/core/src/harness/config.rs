//! Experiment configuration.
//!
//! Files are flat `key = value` lines with `#` comments and dotted keys,
//! which is a subset of TOML:
//!
//! ```text
//! seed = 7
//! method = "aurora"
//! objective.lambda = 0.1
//! encoder.hidden = [64, 64]
//! ```
//!
//! Every key is optional except `seed`. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::encoder::{AuxHead, EncoderConfig};
use crate::error::{Error, Result};
use crate::numcore::OptimizerKind;
use crate::objectives::{AuroraLossConfig, OrthMode};
use crate::synthcohort::{CohortConfig, Outcome, ShiftSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Aurora,
    Mae,
    Contrastive,
    Distill,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Aurora, Method::Mae, Method::Contrastive, Method::Distill];

    pub fn name(self) -> &'static str {
        match self {
            Method::Aurora => "aurora",
            Method::Mae => "mae",
            Method::Contrastive => "contrastive",
            Method::Distill => "distill",
        }
    }

    pub fn aux_head(self, objective: &ObjectiveConfig) -> AuxHead {
        match self {
            Method::Aurora => AuxHead::None,
            Method::Mae => AuxHead::Decoder,
            Method::Contrastive => AuxHead::Projection,
            Method::Distill => AuxHead::Prototypes(objective.prototypes),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub aurora: AuroraLossConfig,
    /// Neighbours kept per anchor in each relation graph.
    pub neighbors: usize,
    pub temperature: f64,
    pub mask_fraction: f64,
    pub prototypes: usize,
    pub ema_rate: f64,
    pub center_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            aurora: AuroraLossConfig::default(),
            neighbors: 10,
            temperature: 0.2,
            mask_fraction: 0.25,
            prototypes: 32,
            ema_rate: 0.99,
            center_momentum: 0.9,
            student_temp: 0.1,
            teacher_temp: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 100,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub probe_targets: Vec<Outcome>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            probe_targets: Outcome::ALL.to_vec(),
        }
    }
}

/// Shift used for the grid's shifted cohort when none is configured.
pub fn default_shift(sites: usize) -> ShiftSpec {
    ShiftSpec {
        int_policy_delta: -0.5,
        obs_scale: 2.0,
        site_remap: (0..sites).map(|s| (s + 1) % sites).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub cohort: CohortConfig,
    pub shift: ShiftSpec,
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub grid_methods: Vec<Method>,
}

impl ExperimentConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        let cohort = CohortConfig { seed, ..CohortConfig::default() };
        Self {
            seed,
            method: Method::Aurora,
            shift: default_shift(cohort.sites),
            encoder: EncoderConfig { input_dim: cohort.p, ..EncoderConfig::default() },
            cohort,
            objective: ObjectiveConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            grid_methods: Method::ALL.to_vec(),
        }
    }

    /// Same experiment under another seed; cohort and initialization follow.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        out.cohort.seed = seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.shift.validate(self.cohort.sites)?;
        self.encoder.validate()?;
        if self.encoder.input_dim != self.cohort.p {
            return Err(Error::config(format!(
                "encoder input dim {} differs from cohort p {}",
                self.encoder.input_dim, self.cohort.p
            )));
        }
        let o = &self.objective;
        o.aurora.validate(self.encoder.subspaces)?;
        if o.neighbors == 0 {
            return Err(Error::config("objective.neighbors must be positive"));
        }
        for (name, v) in [
            ("objective.temperature", o.temperature),
            ("objective.student_temp", o.student_temp),
            ("objective.teacher_temp", o.teacher_temp),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(o.mask_fraction > 0.0 && o.mask_fraction < 1.0) {
            return Err(Error::config("objective.mask_fraction must lie in (0, 1)"));
        }
        for (name, v) in [("objective.ema_rate", o.ema_rate), ("objective.center_momentum", o.center_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if o.prototypes < 2 {
            return Err(Error::config("objective.prototypes must be at least 2"));
        }
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::config("optim.lr must be non-negative"));
        }
        if self.optim.batch_size < 2 {
            return Err(Error::config("optim.batch_size must be at least 2"));
        }
        if self.eval.k == 0 {
            return Err(Error::config("eval.k must be positive"));
        }
        if self.eval.probe_targets.is_empty() || self.grid_methods.is_empty() {
            return Err(Error::config("probe targets and grid methods must be non-empty"));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

struct Fields(BTreeMap<String, toml::Value>);

impl Fields {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.0.remove(key)
    }

    fn float(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::Float(v)) => {
                *slot = v;
                Ok(())
            }
            Some(toml::Value::Integer(v)) => {
                *slot = v as f64;
                Ok(())
            }
            Some(_) => Err(Error::config(format!("`{key}` must be a number"))),
        }
    }

    fn uint<T: TryFrom<i64>>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::Integer(v)) => {
                *slot = T::try_from(v)
                    .map_err(|_| Error::config(format!("`{key}` is out of range: {v}")))?;
                Ok(())
            }
            Some(_) => Err(Error::config(format!("`{key}` must be a non-negative integer"))),
        }
    }

    fn parsed<T: FromStr<Err = Error>>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::String(s)) => {
                *slot = s.parse()?;
                Ok(())
            }
            Some(_) => Err(Error::config(format!("`{key}` must be a string"))),
        }
    }

    fn list<T>(&mut self, key: &str, slot: &mut Vec<T>, item: impl Fn(&toml::Value) -> Option<Result<T>>) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(toml::Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for v in &a {
                    out.push(item(v).ok_or_else(|| Error::config(format!("bad entry in `{key}`")))??);
                }
                *slot = out;
                Ok(())
            }
            Some(_) => Err(Error::config(format!("`{key}` must be a list"))),
        }
    }
}

fn as_usize(v: &toml::Value) -> Option<Result<usize>> {
    v.as_integer().map(|i| usize::try_from(i).map_err(|_| Error::config(format!("negative size {i}"))))
}

fn as_f64(v: &toml::Value) -> Option<Result<f64>> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).map(Ok)
}

fn as_parsed<T: FromStr<Err = Error>>(v: &toml::Value) -> Option<Result<T>> {
    v.as_str().map(str::parse)
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config syntax: {}", e.message())))?;
        let mut flat = BTreeMap::new();
        flatten("", table, &mut flat);
        let mut f = Fields(flat);

        let mut seed: Option<u64> = None;
        match f.take("seed") {
            Some(toml::Value::Integer(v)) if v >= 0 => seed = Some(v as u64),
            Some(_) => return Err(Error::config("`seed` must be a non-negative integer")),
            None => {}
        }
        let seed = seed.ok_or_else(|| Error::config("`seed` is required"))?;
        let mut c = ExperimentConfig::with_seed(seed);

        f.parsed("method", &mut c.method)?;
        f.list("grid.methods", &mut c.grid_methods, as_parsed)?;

        f.uint("cohort.n", &mut c.cohort.n)?;
        f.uint("cohort.p", &mut c.cohort.p)?;
        let sites_before = c.cohort.sites;
        f.uint("cohort.sites", &mut c.cohort.sites)?;
        f.float("cohort.rho", &mut c.cohort.rho)?;
        f.float("cohort.noise", &mut c.cohort.noise)?;
        if c.cohort.sites != sites_before {
            c.shift = default_shift(c.cohort.sites);
        }
        f.float("shift.int_policy_delta", &mut c.shift.int_policy_delta)?;
        f.float("shift.obs_scale", &mut c.shift.obs_scale)?;
        f.list("shift.site_remap", &mut c.shift.site_remap, as_usize)?;

        c.encoder.input_dim = c.cohort.p;
        f.list("encoder.hidden", &mut c.encoder.hidden, as_usize)?;
        f.uint("encoder.latent_dim", &mut c.encoder.latent_dim)?;
        f.uint("encoder.subspaces", &mut c.encoder.subspaces)?;
        c.objective.aurora.align_weights = vec![1.0; c.encoder.subspaces];

        let o = &mut c.objective;
        f.float("objective.lambda", &mut o.aurora.lambda)?;
        f.float("objective.mu", &mut o.aurora.mu)?;
        f.parsed::<OrthMode>("objective.orth_mode", &mut o.aurora.orth_mode)?;
        f.list("objective.align_weights", &mut o.aurora.align_weights, as_f64)?;
        f.uint("objective.neighbors", &mut o.neighbors)?;
        f.float("objective.temperature", &mut o.temperature)?;
        f.float("objective.mask_fraction", &mut o.mask_fraction)?;
        f.uint("objective.prototypes", &mut o.prototypes)?;
        f.float("objective.ema_rate", &mut o.ema_rate)?;
        f.float("objective.center_momentum", &mut o.center_momentum)?;
        f.float("objective.student_temp", &mut o.student_temp)?;
        f.float("objective.teacher_temp", &mut o.teacher_temp)?;

        f.parsed("optim.kind", &mut c.optim.kind)?;
        f.float("optim.lr", &mut c.optim.lr)?;
        f.uint("optim.epochs", &mut c.optim.epochs)?;
        f.uint("optim.batch_size", &mut c.optim.batch_size)?;

        f.uint("eval.k", &mut c.eval.k)?;
        f.list("eval.probe_targets", &mut c.eval.probe_targets, as_parsed)?;

        if let Some(key) = f.0.keys().next() {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        c.validate()?;
        Ok(c)
    }
}
