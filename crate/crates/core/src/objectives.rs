//! Training objectives, all built from differentiable [`Graph`] ops.
//!
//! The main objective combines per-factor relational alignment, a
//! cross-subspace orthogonality penalty and a variance guard:
//!
//! ```text
//! total = Σ_k w_k·align_k + λ·orth + μ·guard
//! align_k = mean over sampled pairs (i, j) of  R_k(i, j)·‖z_i^(k) − z_j^(k)‖²
//! orth    = (1/B)·Σ_{k≠l} Σ_i (z_i^(k) · z_i^(l))²            (per_sample)
//!         = (1/B²)·Σ_{k≠l} ‖(Z^(k))ᵀ Z^(l)‖_F²                (batch_gram)
//! guard   = Σ_k Σ_j max(0, 1 − std(Z^(k)[:, j]))²
//! ```
//!
//! Alignment alone is minimized by a constant embedding; the guard is what
//! rules that out. `μ = 0` gives the unguarded objective.
//!
//! Baselines: masked reconstruction, InfoNCE over noise-redraw views, and
//! EMA self-distillation with centering.

use crate::encoder::ModelBundle;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};
use crate::relational::{Pair, PairBatch};

/// Norm below which an InfoNCE row is rejected.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrthMode {
    PerSample,
    BatchGram,
}

impl std::str::FromStr for OrthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(Self::PerSample),
            "batch_gram" => Ok(Self::BatchGram),
            other => Err(Error::config(format!("unknown orth_mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for OrthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerSample => "per_sample",
            Self::BatchGram => "batch_gram",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuroraLossConfig {
    pub lambda: f64,
    pub mu: f64,
    pub align_weights: Vec<f64>,
    pub orth_mode: OrthMode,
}

impl Default for AuroraLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            mu: 1.0,
            align_weights: vec![1.0; 4],
            orth_mode: OrthMode::PerSample,
        }
    }
}

impl AuroraLossConfig {
    /// `lambda = 0` is accepted as the no-orthogonality ablation.
    pub fn validate(&self, subspaces: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if self.align_weights.len() != subspaces {
            return Err(Error::config(format!(
                "{} alignment weights for {subspaces} subspaces",
                self.align_weights.len()
            )));
        }
        if self.align_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("alignment weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveReport {
    pub align: Vec<f64>,
    pub orth: f64,
    pub guard: f64,
    pub total: f64,
    /// Factors whose alignment term had no pairs in this batch.
    pub empty_align: Vec<bool>,
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    g.scalar_value(v)
}

/// Weighted mean of squared distances over `pairs`, which index rows of `zk`.
/// Returns a constant 0 when `pairs` is empty.
pub fn align_loss<'a>(
    g: &mut Graph,
    zk: Var,
    pairs: impl IntoIterator<Item = &'a Pair>,
) -> Result<Var> {
    let pairs: Vec<&Pair> = pairs.into_iter().collect();
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let rows = g.value(zk).rows();
    if let Some(p) = pairs.iter().find(|p| p.i >= rows || p.j >= rows) {
        return Err(Error::contract(format!(
            "pair ({}, {}) out of range for {rows} rows",
            p.i, p.j
        )));
    }
    let ii: Vec<usize> = pairs.iter().map(|p| p.i).collect();
    let jj: Vec<usize> = pairs.iter().map(|p| p.j).collect();
    let w = Tensor::vector(pairs.iter().map(|p| p.weight).collect())?;
    let zi = g.gather_rows(zk, &ii)?;
    let zj = g.gather_rows(zk, &jj)?;
    let diff = g.sub(zi, zj)?;
    let sq = g.square(diff)?;
    let d2 = g.row_sum(sq)?;
    let wv = g.constant(w);
    let weighted = g.mul(d2, wv)?;
    let s = g.sum(weighted)?;
    g.scale(s, 1.0 / pairs.len() as f64)
}

fn check_same_shapes(g: &Graph, components: &[Var], op: &'static str) -> Result<()> {
    let first = g.value(components[0]).shape().to_vec();
    for &c in &components[1..] {
        if g.value(c).shape() != first.as_slice() {
            return Err(Error::Dimension {
                op,
                left: first,
                right: g.value(c).shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub fn orth_loss(g: &mut Graph, components: &[Var], mode: OrthMode) -> Result<Var> {
    if components.is_empty() {
        return Err(Error::contract("orth_loss needs at least one component"));
    }
    check_same_shapes(g, components, "orth_loss")?;
    let b = g.value(components[0]).rows() as f64;
    let mut acc = g.constant(Tensor::scalar(0.0));
    for k in 0..components.len() {
        for l in k + 1..components.len() {
            let term = match mode {
                OrthMode::PerSample => {
                    let d = g.row_dot(components[k], components[l])?;
                    let sq = g.square(d)?;
                    g.sum(sq)?
                }
                OrthMode::BatchGram => {
                    let t = g.transpose(components[k])?;
                    let m = g.matmul(t, components[l])?;
                    let sq = g.square(m)?;
                    g.sum(sq)?
                }
            };
            acc = g.add(acc, term)?;
        }
    }
    // unordered pairs counted twice for the ordered sum over k ≠ l
    let norm = match mode {
        OrthMode::PerSample => 2.0 / b,
        OrthMode::BatchGram => 2.0 / (b * b),
    };
    g.scale(acc, norm)
}

/// Unbiased per-column standard deviation of `[B×d]` as a length-`d` var.
fn column_std(g: &mut Graph, c: Var) -> Result<Var> {
    let b = g.value(c).rows() as f64;
    let mean = g.col_mean(c)?;
    let centered = g.sub_row(c, mean)?;
    let sq = g.square(centered)?;
    let var = g.col_mean(sq)?;
    let var = g.scale(var, b / (b - 1.0))?;
    g.sqrt(var)
}

pub fn variance_guard(g: &mut Graph, components: &[Var]) -> Result<Var> {
    if components.is_empty() {
        return Err(Error::contract("variance_guard needs at least one component"));
    }
    let b = g.value(components[0]).rows();
    if b < 2 {
        return Err(Error::contract(format!("variance_guard needs B >= 2, got {b}")));
    }
    check_same_shapes(g, components, "variance_guard")?;
    let mut acc = g.constant(Tensor::scalar(0.0));
    for &c in components {
        let sd = column_std(g, c)?;
        let neg = g.scale(sd, -1.0)?;
        let gap = g.add_scalar(neg, 1.0)?;
        let hinge = g.relu(gap)?;
        let sq = g.square(hinge)?;
        let s = g.sum(sq)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Unbiased per-column standard deviations of a `[B×d]` matrix.
pub fn per_dimension_std(t: &Tensor) -> Result<Vec<f64>> {
    let (b, d) = t.require_matrix("per_dimension_std")?;
    if b < 2 {
        return Err(Error::contract("per_dimension_std needs at least two rows"));
    }
    let mut mean = vec![0.0; d];
    for r in t.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / b as f64;
        }
    }
    let mut var = vec![0.0; d];
    for r in t.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(var.into_iter().map(|s| (s / (b as f64 - 1.0)).sqrt()).collect())
}

pub struct AuroraTerms {
    pub total: Var,
    pub report: ObjectiveReport,
}

/// The full objective over batch components (`[B×d]` each, factor order) and
/// the batch's sampled pairs.
pub fn aurora_loss(
    g: &mut Graph,
    cfg: &AuroraLossConfig,
    components: &[Var],
    pairs: &PairBatch,
) -> Result<AuroraTerms> {
    cfg.validate(components.len())?;
    let mut align = Vec::with_capacity(components.len());
    let mut empty_align = Vec::with_capacity(components.len());
    let mut total = g.constant(Tensor::scalar(0.0));
    for (k, &c) in components.iter().enumerate() {
        let mut it = pairs.for_factor(k).peekable();
        empty_align.push(it.peek().is_none());
        let a = align_loss(g, c, it)?;
        align.push(scalar(g, a)?);
        let wa = g.scale(a, cfg.align_weights[k])?;
        total = g.add(total, wa)?;
    }
    let orth = orth_loss(g, components, cfg.orth_mode)?;
    let guard = variance_guard(g, components)?;
    let lo = g.scale(orth, cfg.lambda)?;
    let mg = g.scale(guard, cfg.mu)?;
    total = g.add(total, lo)?;
    total = g.add(total, mg)?;
    let report = ObjectiveReport {
        align,
        orth: scalar(g, orth)?,
        guard: scalar(g, guard)?,
        total: scalar(g, total)?,
        empty_align,
    };
    Ok(AuroraTerms { total, report })
}

// ── masked reconstruction ────────────────────────────────────────────────

/// Bernoulli(`fraction`) mask over a `[B×p]` shape, redrawn until at least one
/// coordinate is masked. 1 marks a masked coordinate.
pub fn draw_mask(rows: usize, cols: usize, fraction: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("mask fraction must lie in (0, 1), got {fraction}")));
    }
    loop {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.bernoulli(fraction) { 1.0 } else { 0.0 })
            .collect();
        if data.iter().any(|&m| m == 1.0) {
            return Tensor::matrix(rows, cols, data);
        }
    }
}

/// Mean squared error over the coordinates where `mask` is 1.
pub fn masked_mse(g: &mut Graph, recon: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let count = mask.data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::contract("masked_mse needs at least one masked coordinate"));
    }
    let t = g.constant(target.clone());
    let m = g.constant(mask.clone());
    let diff = g.sub(recon, t)?;
    let masked = g.mul(diff, m)?;
    let sq = g.square(masked)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / count as f64)
}

/// Zero out a random subset of input coordinates, encode, decode with the
/// bundle's decoder, and score reconstruction on the masked coordinates.
pub fn mae_loss(
    g: &mut Graph,
    bundle: &ModelBundle,
    vars: &[Var],
    x: &Tensor,
    mask_fraction: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let (b, p) = x.require_matrix("mae_loss")?;
    let mask = draw_mask(b, p, mask_fraction, rng)?;
    let visible = x.zip_with("mae_loss", &mask, |v, m| v * (1.0 - m))?;
    let xv = g.constant(visible);
    let emb = bundle.forward(g, vars, xv)?;
    let recon = bundle.aux_forward(g, vars, emb.z)?;
    masked_mse(g, recon, x, &mask)
}

// ── contrastive ──────────────────────────────────────────────────────────

/// InfoNCE with cosine similarity: row `i` of `positives` is the positive for
/// row `i` of `anchors`, every other row a negative.
pub fn infonce_loss(g: &mut Graph, anchors: Var, positives: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    let (b, _) = g.value(anchors).require_matrix("infonce_loss")?;
    if g.value(anchors).shape() != g.value(positives).shape() {
        return Err(Error::Dimension {
            op: "infonce_loss",
            left: g.value(anchors).shape().to_vec(),
            right: g.value(positives).shape().to_vec(),
        });
    }
    if b < 2 {
        return Err(Error::contract("infonce_loss needs B >= 2"));
    }
    for &v in &[anchors, positives] {
        let t = g.value(v);
        for i in 0..b {
            let n: f64 = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < NORM_FLOOR {
                return Err(Error::numeric(format!("zero-norm embedding row {i} in infonce_loss")));
            }
        }
    }
    let a = g.row_normalize(anchors, NORM_FLOOR)?;
    let p = g.row_normalize(positives, NORM_FLOOR)?;
    let pt = g.transpose(p)?;
    let sim = g.matmul(a, pt)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let ls = g.log_softmax_rows(logits)?;
    let eye = g.constant(Tensor::identity(b));
    let diag = g.mul(ls, eye)?;
    let s = g.sum(diag)?;
    g.scale(s, -1.0 / b as f64)
}

// ── self-distillation ────────────────────────────────────────────────────

fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (m, n) = t.require_matrix("softmax_rows")?;
    let mut data = t.data().to_vec();
    for r in data.chunks_mut(n) {
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        r.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(m, n, data)
}

/// Cross-entropy from the centered, sharpened teacher distribution to the
/// student's. The teacher's value is read but never differentiated.
pub fn distill_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: Var,
    student_temp: f64,
    teacher_temp: f64,
    center: &Tensor,
) -> Result<Var> {
    if !(student_temp > 0.0 && teacher_temp > 0.0) {
        return Err(Error::contract("distillation temperatures must be positive"));
    }
    let teacher = g.value(teacher_logits);
    let (b, c) = teacher.require_matrix("distill_loss")?;
    if g.value(student_logits).shape() != teacher.shape() || center.len() != c {
        return Err(Error::Dimension {
            op: "distill_loss",
            left: g.value(student_logits).shape().to_vec(),
            right: teacher.shape().to_vec(),
        });
    }
    let mut shifted = teacher.data().to_vec();
    for r in shifted.chunks_mut(c) {
        for (v, m) in r.iter_mut().zip(center.data()) {
            *v = (*v - m) / teacher_temp;
        }
    }
    let targets = softmax_rows(&Tensor::matrix(b, c, shifted)?)?;
    let t = g.constant(targets);
    let s = g.scale(student_logits, 1.0 / student_temp)?;
    let ls = g.log_softmax_rows(s)?;
    let prod = g.mul(ls, t)?;
    let sum = g.sum(prod)?;
    g.scale(sum, -1.0 / b as f64)
}

/// `center ← momentum·center + (1 − momentum)·mean over rows of teacher logits`.
pub fn update_center(center: &mut Tensor, teacher_logits: &Tensor, momentum: f64) -> Result<()> {
    let (b, c) = teacher_logits.require_matrix("update_center")?;
    if center.len() != c {
        return Err(Error::Dimension {
            op: "update_center",
            left: center.shape().to_vec(),
            right: teacher_logits.shape().to_vec(),
        });
    }
    let mut mean = vec![0.0; c];
    for r in teacher_logits.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / b as f64;
        }
    }
    for (cv, m) in center.data_mut().iter_mut().zip(mean) {
        *cv = momentum * *cv + (1.0 - momentum) * m;
    }
    Ok(())
}
