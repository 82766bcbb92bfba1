//! Synthetic cohorts with known, controllably entangled ground-truth factors.
//!
//! Each record carries four hidden factors (physiologic severity,
//! intervention intensity, observation density, site) and an observed feature
//! vector built from them through fixed loading vectors:
//!
//! ```text
//! phys ~ N(0,1)
//! int  = (rho + delta)·phys + sqrt(1 − rho²)·N(0,1)
//! obs  = (0.5·phys + 0.5·N(0,1)) · obs_scale
//! ctx  ~ Uniform{0..S−1}
//! x    = a_phys·phys + a_int·int + a_obs·obs + a_ctx[remap(ctx)] + noise·N(0, I_p)
//! ```
//!
//! `delta`, `obs_scale` and `remap` come from an optional [`ShiftSpec`] and
//! are `0`, `1` and the identity otherwise. Every loading vector has a
//! dominant block of `p/4` coordinates (block `k` for factor `k`) drawn from
//! N(0,1) and 10% leakage (`0.1·N(0,1)`) everywhere else. Labels are Bernoulli
//! draws through fixed logistic maps of the factors.
//!
//! Record `id` draws everything from its own RNG stream `(seed, id + 1)`;
//! loadings use stream 0. Output therefore does not depend on generation
//! order, and a shifted cohort with the same seed re-uses the same base draws.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

pub const FACTOR_COUNT: usize = 4;
const LEAKAGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Phys,
    Int,
    Obs,
    Ctx,
}

impl Factor {
    pub const ALL: [Factor; FACTOR_COUNT] = [Factor::Phys, Factor::Int, Factor::Obs, Factor::Ctx];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown factor index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Factor::Phys => "phys",
            Factor::Int => "int",
            Factor::Obs => "obs",
            Factor::Ctx => "ctx",
        }
    }
}

impl std::str::FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown factor `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorVector {
    pub phys: f64,
    pub int: f64,
    pub obs: f64,
    pub ctx: usize,
}

impl FactorVector {
    /// Continuous value of a factor; `ctx` is returned as its category number.
    pub fn value(&self, f: Factor) -> f64 {
        match f {
            Factor::Phys => self.phys,
            Factor::Int => self.int,
            Factor::Obs => self.obs,
            Factor::Ctx => self.ctx as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortRecord {
    pub id: u64,
    pub features: Vec<f64>,
    pub factors: FactorVector,
    pub mortality: bool,
    pub sepsis: bool,
    pub readmission: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Mortality,
    Sepsis,
    Readmission,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Mortality, Outcome::Sepsis, Outcome::Readmission];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Mortality => "mortality",
            Outcome::Sepsis => "sepsis",
            Outcome::Readmission => "readmission",
        }
    }
}

impl std::str::FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::config(format!("unknown outcome `{s}`")))
    }
}

impl CohortRecord {
    pub fn label(&self, outcome: Outcome) -> bool {
        match outcome {
            Outcome::Mortality => self.mortality,
            Outcome::Sepsis => self.sepsis,
            Outcome::Readmission => self.readmission,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    /// Added to `rho` as the slope of `int` on `phys`.
    pub int_policy_delta: f64,
    /// Multiplier on the observation-density factor.
    pub obs_scale: f64,
    /// Site `s` uses loading vector `site_remap[s]`.
    pub site_remap: Vec<usize>,
}

impl ShiftSpec {
    pub fn identity(sites: usize) -> Self {
        Self {
            int_policy_delta: 0.0,
            obs_scale: 1.0,
            site_remap: (0..sites).collect(),
        }
    }

    pub fn validate(&self, sites: usize) -> Result<()> {
        if !(self.obs_scale > 0.0 && self.obs_scale.is_finite()) {
            return Err(Error::config(format!("obs_scale must be positive, got {}", self.obs_scale)));
        }
        if !self.int_policy_delta.is_finite() {
            return Err(Error::config("int_policy_delta must be finite"));
        }
        let mut seen = vec![false; sites];
        if self.site_remap.len() != sites {
            return Err(Error::config(format!(
                "site_remap has {} entries for {sites} sites",
                self.site_remap.len()
            )));
        }
        for &s in &self.site_remap {
            if s >= sites || std::mem::replace(&mut seen[s], true) {
                return Err(Error::config(format!(
                    "site_remap {:?} is not a permutation of 0..{sites}",
                    self.site_remap
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortConfig {
    pub n: usize,
    pub p: usize,
    pub sites: usize,
    pub rho: f64,
    pub noise: f64,
    pub seed: u64,
    pub shift: Option<ShiftSpec>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            p: 32,
            sites: 4,
            rho: 0.6,
            noise: 0.5,
            seed: 0,
            shift: None,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::config("cohort n must be at least 1"));
        }
        if self.p < 8 {
            return Err(Error::config(format!("cohort p must be at least 8, got {}", self.p)));
        }
        if self.sites < 1 {
            return Err(Error::config("cohort needs at least one site"));
        }
        if !(-0.95..=0.95).contains(&self.rho) {
            return Err(Error::config(format!("rho must lie in [-0.95, 0.95], got {}", self.rho)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if let Some(shift) = &self.shift {
            shift.validate(self.sites)?;
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.p / FACTOR_COUNT
    }
}

/// Returns `cfg` with `spec` as its shift. Only the shift is replaced; the
/// seed, and therefore every base draw and the phys marginal, is unchanged.
pub fn apply_shift(cfg: &CohortConfig, spec: ShiftSpec) -> Result<CohortConfig> {
    spec.validate(cfg.sites)?;
    let mut out = cfg.clone();
    out.shift = Some(spec);
    out.validate()?;
    Ok(out)
}

/// Fixed loading vectors drawn once per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Loadings {
    pub phys: Vec<f64>,
    pub int: Vec<f64>,
    pub obs: Vec<f64>,
    pub ctx: Vec<Vec<f64>>,
}

impl Loadings {
    fn draw(cfg: &CohortConfig) -> Self {
        let mut rng = Rng::stream(cfg.seed, 0);
        let block = cfg.block_len();
        let mut vector = |b: usize| -> Vec<f64> {
            (0..cfg.p)
                .map(|j| {
                    let z = rng.normal();
                    if j / block == b && j < block * FACTOR_COUNT {
                        z
                    } else {
                        LEAKAGE * z
                    }
                })
                .collect()
        };
        let phys = vector(0);
        let int = vector(1);
        let obs = vector(2);
        let ctx = (0..cfg.sites).map(|_| vector(3)).collect();
        Self { phys, int, obs, ctx }
    }

    /// Noise-free feature vector for a factor vector under `shift`.
    pub fn mean_features(&self, f: &FactorVector, shift: Option<&ShiftSpec>) -> Vec<f64> {
        let site = shift.map_or(f.ctx, |s| s.site_remap[f.ctx]);
        let site_loading = &self.ctx[site];
        (0..self.phys.len())
            .map(|j| {
                self.phys[j] * f.phys + self.int[j] * f.int + self.obs[j] * f.obs + site_loading[j]
            })
            .collect()
    }
}

/// Generated cohort plus the generator state needed to redraw feature noise.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub config: CohortConfig,
    pub loadings: Loadings,
    pub records: Vec<CohortRecord>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Probability of each outcome given the factors.
pub fn label_probability(outcome: Outcome, f: &FactorVector) -> f64 {
    match outcome {
        Outcome::Mortality => sigmoid(2.0 * f.phys - 1.5),
        Outcome::Sepsis => sigmoid(1.5 * f.phys + 0.5 * f.obs - 1.5),
        Outcome::Readmission => sigmoid(0.8 * f.phys + 0.8 * f.int - 1.0),
    }
}

fn draw_record(cfg: &CohortConfig, loadings: &Loadings, id: u64) -> CohortRecord {
    let mut rng = Rng::stream(cfg.seed, id + 1);
    let shift = cfg.shift.as_ref();
    let (delta, obs_scale) = shift.map_or((0.0, 1.0), |s| (s.int_policy_delta, s.obs_scale));

    let phys = rng.normal();
    let int = (cfg.rho + delta) * phys + (1.0 - cfg.rho * cfg.rho).sqrt() * rng.normal();
    let obs = (0.5 * phys + 0.5 * rng.normal()) * obs_scale;
    let ctx = rng.below(cfg.sites);
    let factors = FactorVector { phys, int, obs, ctx };

    let mut features = loadings.mean_features(&factors, shift);
    for x in &mut features {
        *x += cfg.noise * rng.normal();
    }
    let mortality = rng.bernoulli(label_probability(Outcome::Mortality, &factors));
    let sepsis = rng.bernoulli(label_probability(Outcome::Sepsis, &factors));
    let readmission = rng.bernoulli(label_probability(Outcome::Readmission, &factors));
    CohortRecord {
        id,
        features,
        factors,
        mortality,
        sepsis,
        readmission,
    }
}

pub fn generate(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    let loadings = Loadings::draw(cfg);
    let records = (0..cfg.n as u64).map(|id| draw_record(cfg, &loadings, id)).collect();
    Ok(Cohort {
        config: cfg.clone(),
        loadings,
        records,
    })
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Features of `record` with freshly drawn noise: same factors, new noise.
    pub fn noise_view(&self, record: &CohortRecord, rng: &mut Rng) -> Vec<f64> {
        let mut x = self.loadings.mean_features(&record.factors, self.config.shift.as_ref());
        for v in &mut x {
            *v += self.config.noise * rng.normal();
        }
        x
    }

    pub fn feature_matrix(&self, idx: &[usize]) -> Result<Tensor> {
        feature_matrix(&self.records, idx)
    }
}

/// Rows `idx` of the records' features as a `[len×p]` matrix.
pub fn feature_matrix(records: &[CohortRecord], idx: &[usize]) -> Result<Tensor> {
    let p = records
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| Error::contract("empty record list"))?;
    let mut data = Vec::with_capacity(idx.len() * p);
    for &i in idx {
        data.extend_from_slice(&records[i].features);
    }
    Tensor::matrix(idx.len(), p, data)
}

/// Observable proxy for `factor`: the features over that factor's dominant
/// loading block. Never the hidden factor itself.
pub fn context_features(record: &CohortRecord, factor: Factor) -> Result<Tensor> {
    let p = record.features.len();
    let block = p / FACTOR_COUNT;
    if block == 0 {
        return Err(Error::contract(format!("feature dimension {p} too small for proxies")));
    }
    let start = factor.index() * block;
    Tensor::vector(record.features[start..start + block].to_vec())
}

// ── cohort file ──────────────────────────────────────────────────────────

/// Formats like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Records read back from a cohort file (no generator state).
#[derive(Clone, Debug, PartialEq)]
pub struct CohortTable {
    pub p: usize,
    pub sites: usize,
    pub records: Vec<CohortRecord>,
}

impl From<&Cohort> for CohortTable {
    fn from(c: &Cohort) -> Self {
        Self {
            p: c.config.p,
            sites: c.config.sites,
            records: c.records.clone(),
        }
    }
}

pub fn write_cohort(
    out: &mut impl Write,
    p: usize,
    sites: usize,
    records: &[CohortRecord],
) -> Result<()> {
    writeln!(out, "AURC v1 n={} p={} S={}", records.len(), p, sites)?;
    let mut line = String::new();
    for r in records {
        line.clear();
        write!(line, "{}", r.id).unwrap();
        for v in &r.features {
            write!(line, ",{}", format_sig9(*v)).unwrap();
        }
        let f = &r.factors;
        write!(
            line,
            ",{},{},{},{},{},{},{}",
            format_sig9(f.phys),
            format_sig9(f.int),
            format_sig9(f.obs),
            f.ctx,
            r.mortality as u8,
            r.sepsis as u8,
            r.readmission as u8
        )
        .unwrap();
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn header_field(tok: Option<&str>, key: &str) -> Result<usize> {
    tok.and_then(|t| t.strip_prefix(key))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(format!("cohort header: missing `{key}<int>`")))
}

pub fn read_cohort(input: impl BufRead) -> Result<CohortTable> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty cohort file"))??;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("AURC") || toks.next() != Some("v1") {
        return Err(Error::format("cohort header must start with `AURC v1`"));
    }
    let n = header_field(toks.next(), "n=")?;
    let p = header_field(toks.next(), "p=")?;
    let sites = header_field(toks.next(), "S=")?;

    let bad = |line_no: usize, what: &str| Error::format(format!("cohort line {line_no}: {what}"));
    let mut records = Vec::with_capacity(n);
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = k + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != p + 8 {
            return Err(bad(line_no, &format!("expected {} columns, got {}", p + 8, cols.len())));
        }
        let real = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| bad(line_no, &format!("bad real `{s}`")))
        };
        let bit = |s: &str| -> Result<bool> {
            match s.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(bad(line_no, &format!("bad label `{other}`"))),
            }
        };
        let id = cols[0].trim().parse().map_err(|_| bad(line_no, "bad id"))?;
        let features = cols[1..=p].iter().map(|s| real(s)).collect::<Result<Vec<_>>>()?;
        let ctx: usize = cols[p + 4].trim().parse().map_err(|_| bad(line_no, "bad ctx"))?;
        if ctx >= sites {
            return Err(bad(line_no, "ctx out of range"));
        }
        records.push(CohortRecord {
            id,
            features,
            factors: FactorVector {
                phys: real(cols[p + 1])?,
                int: real(cols[p + 2])?,
                obs: real(cols[p + 3])?,
                ctx,
            },
            mortality: bit(cols[p + 5])?,
            sepsis: bit(cols[p + 6])?,
            readmission: bit(cols[p + 7])?,
        });
    }
    if records.len() != n {
        return Err(Error::format(format!("header says n={n}, found {} rows", records.len())));
    }
    Ok(CohortTable { p, sites, records })
}
