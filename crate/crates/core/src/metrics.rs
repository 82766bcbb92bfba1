//! Evaluation metrics on frozen embeddings.
//!
//! Every neighbour query is an exact Euclidean search that excludes the query
//! itself and breaks distance ties by ascending row index. Callers keep rows
//! sorted by record id, so index order is id order.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::synthcohort::{Factor, FactorVector, FACTOR_COUNT};

/// Frozen embeddings for a set of records. Rows align across `z`, every
/// component and `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<u64>,
    pub z: Tensor,
    pub components: Vec<Tensor>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, z: Tensor, components: Vec<Tensor>) -> Result<Self> {
        let (n, d) = z.require_matrix("EmbeddingSet")?;
        if ids.len() != n {
            return Err(Error::contract(format!("{} ids for {n} embedding rows", ids.len())));
        }
        for c in &components {
            if c.shape() != [n, d] {
                return Err(Error::Dimension {
                    op: "EmbeddingSet",
                    left: vec![n, d],
                    right: c.shape().to_vec(),
                });
            }
        }
        Ok(Self { ids, z, components })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            z: self.z.select_rows(idx)?,
            components: self
                .components
                .iter()
                .map(|c| c.select_rows(idx))
                .collect::<Result<_>>()?,
        })
    }
}

// ── AUROC ────────────────────────────────────────────────────────────────

/// Mann–Whitney AUROC with ties counted ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN score in auroc"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann–Whitney statistic, kept integral
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let gp = group.iter().filter(|&&i| labels[i]).count() as u128;
        let gn = group.len() as u128 - gp;
        doubled += gp * (2 * neg_below + gn);
        neg_below += gn;
        start = end;
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

// ── linear probe ─────────────────────────────────────────────────────────

pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 5000;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub auroc: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Column means and standard deviations; near-constant columns get scale 0 so
/// they drop out of the fit.
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv = var
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 { 1.0 / sd } else { 0.0 }
        })
        .collect();
    (mean, inv)
}

fn standardized(x: &Tensor, mean: &[f64], inv: &[f64]) -> Vec<f64> {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in x.data().chunks(d) {
        out.extend(r.iter().zip(mean).zip(inv).map(|((v, m), s)| (v - m) * s));
    }
    out
}

/// Largest eigenvalue of `AᵀA / n` for row-major `a`, by power iteration.
fn gram_top_eigenvalue(a: &[f64], n: usize, d: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; d];
        for r in a.chunks(d) {
            let t: f64 = r.iter().zip(&v).map(|(x, y)| x * y).sum();
            for (wi, x) in w.iter_mut().zip(r) {
                *wi += t * x / n as f64;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let prev = lambda;
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if (lambda - prev).abs() <= 1e-9 * lambda {
            break;
        }
    }
    lambda
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedProbe {
    mean: Vec<f64>,
    inv_sd: Vec<f64>,
    /// Feature weights followed by the bias.
    weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl FittedProbe {
    /// Linear scores for the rows of `x`.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (_, d) = x.require_matrix("probe scores")?;
        if d != self.mean.len() {
            return Err(Error::Dimension {
                op: "probe scores",
                left: x.shape().to_vec(),
                right: vec![self.mean.len()],
            });
        }
        let xs = standardized(x, &self.mean, &self.inv_sd);
        Ok((0..x.rows())
            .map(|i| {
                let r = &xs[i * d..(i + 1) * d];
                r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.weights[d]
            })
            .collect())
    }

    pub fn auroc(&self, x: &Tensor, y: &[bool]) -> Result<f64> {
        auroc(&self.scores(x)?, y)
    }
}

/// L2-regularized logistic regression fit by full-batch gradient descent with
/// step `1/L`, stopping when the gradient norm drops below [`PROBE_TOL`] or
/// after [`PROBE_MAX_ITERS`] steps.
pub fn fit_probe(x: &Tensor, y: &[bool]) -> Result<FittedProbe> {
    let (n, d) = x.require_matrix("fit_probe")?;
    if y.len() != n {
        return Err(Error::contract("probe labels do not match embedding rows"));
    }
    if n == 0 {
        return Err(Error::contract("probe needs training rows"));
    }
    let (mean, inv_sd) = standardizer(x);
    let xs = standardized(x, &mean, &inv_sd);
    // features plus a constant column for the bias
    let mut aug = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        aug.extend_from_slice(&xs[i * d..(i + 1) * d]);
        aug.push(1.0);
    }
    let lip = gram_top_eigenvalue(&aug, n, d + 1) / 4.0 + PROBE_L2;
    let step = 1.0 / lip;
    let yf: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut w = vec![0.0; d + 1];
    let mut grad = vec![0.0; d + 1];
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (r, yi) in aug.chunks(d + 1).zip(&yf) {
            let t: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
            let e = (sigmoid(t) - yi) / n as f64;
            for (g, a) in grad.iter_mut().zip(r) {
                *g += e * a;
            }
        }
        for (g, wi) in grad[..d].iter_mut().zip(&w[..d]) {
            *g += PROBE_L2 * wi;
        }
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < PROBE_TOL || iterations == PROBE_MAX_ITERS {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= step * g;
        }
        iterations += 1;
    }
    Ok(FittedProbe {
        mean,
        inv_sd,
        weights: w,
        converged: grad_norm < PROBE_TOL,
        iterations,
        grad_norm,
    })
}

/// Fits a probe on the train split and returns its test-set AUROC.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[bool],
    test_x: &Tensor,
    test_y: &[bool],
) -> Result<ProbeResult> {
    let probe = fit_probe(train_x, train_y)?;
    Ok(ProbeResult {
        auroc: probe.auroc(test_x, test_y)?,
        converged: probe.converged,
        iterations: probe.iterations,
        grad_norm: probe.grad_norm,
    })
}

// ── neighbours ───────────────────────────────────────────────────────────

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest rows of `points` to each row, self excluded, ordered by
/// (distance, index).
pub fn knn_lists(points: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n, _) = points.require_matrix("knn_lists")?;
    if k == 0 || k >= n {
        return Err(Error::config(format!("k = {k} needs 0 < k < {n}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for q in 0..n {
        cand.clear();
        let qr = points.row(q);
        cand.extend((0..n).filter(|&j| j != q).map(|j| (dist2(qr, points.row(j)), j)));
        let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by);
        out.push(cand.iter().map(|c| c.1).collect());
    }
    Ok(out)
}

/// Equal-frequency bin of each value: rank (ties by index) times `bins / n`.
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    out
}

/// Quartile bins for continuous factors, native categories for ctx.
pub fn factor_bins(factors: &[FactorVector], factor: Factor) -> Vec<usize> {
    match factor {
        Factor::Ctx => factors.iter().map(|f| f.ctx).collect(),
        f => equal_frequency_bins(&factors.iter().map(|v| v.value(f)).collect::<Vec<_>>(), 4),
    }
}

/// Fraction of queries with at least one relevant item among their `k`
/// nearest gallery rows. With `same_set`, queries and gallery are the same
/// rows and the query itself is excluded. Queries with no relevant item in
/// the gallery are skipped; if none remain this is a contract error.
pub fn recall_at_k(
    queries: &Tensor,
    gallery: &Tensor,
    relevant: impl Fn(usize, usize) -> bool,
    k: usize,
    same_set: bool,
) -> Result<f64> {
    let (nq, d) = queries.require_matrix("recall_at_k")?;
    let (ng, dg) = gallery.require_matrix("recall_at_k")?;
    if d != dg {
        return Err(Error::Dimension {
            op: "recall_at_k",
            left: queries.shape().to_vec(),
            right: gallery.shape().to_vec(),
        });
    }
    let available = if same_set { ng.saturating_sub(1) } else { ng };
    if k == 0 || k >= ng {
        return Err(Error::config(format!("k = {k} needs 0 < k < gallery size {ng}")));
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(ng);
    for q in 0..nq {
        let eligible = |j: usize| !(same_set && j == q);
        if !(0..ng).any(|j| eligible(j) && relevant(q, j)) {
            continue;
        }
        counted += 1;
        cand.clear();
        cand.extend((0..ng).filter(|&j| eligible(j)).map(|j| (dist2(queries.row(q), gallery.row(j)), j)));
        let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let kk = k.min(available);
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk - 1, by);
            cand.truncate(kk);
        }
        if cand.iter().any(|c| relevant(q, c.1)) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::contract("no query has a relevant gallery item"));
    }
    Ok(hits as f64 / counted as f64)
}

/// Default relevance key: outcome label and phys quartile.
pub fn relevance_keys(labels: &[bool], factors: &[FactorVector]) -> Vec<usize> {
    factor_bins(factors, Factor::Phys)
        .into_iter()
        .zip(labels)
        .map(|(q, &l)| q * 2 + l as usize)
        .collect()
}

// ── mutual information overlap ───────────────────────────────────────────

pub const MI_BINS: usize = 8;
pub const MI_MIN_RECORDS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct MiOverlap {
    pub value: f64,
    /// Subspaces whose first principal component had zero variance.
    pub degenerate: Vec<usize>,
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information of two discrete labelings over `min(H)`.
pub fn normalized_mi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; na * nb];
    let mut ca = vec![0usize; na];
    let mut cb = vec![0usize; nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    let h = ha.min(hb);
    if h <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let c = joint[x * nb + y];
            if c > 0 {
                let pxy = c as f64 / n as f64;
                mi += pxy * (pxy * n as f64 * n as f64 / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    (mi / h).clamp(0.0, 1.0)
}

/// Leading principal directions of the rows of `x`, largest variance first.
/// Each direction's sign makes its largest-magnitude entry positive.
fn principal_axes(x: &Tensor, count: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    let (n, d) = x.require_matrix("principal_axes")?;
    if n < 2 {
        return Err(Error::contract("principal axes need at least two rows"));
    }
    let mut mean = vec![0.0; d];
    for r in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in x.data().chunks(d) {
        for a in 0..d {
            let ca = r[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += ca * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::new();
    let mut vars = Vec::new();
    for &i in order.iter().take(count) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
        vars.push(eig.eigenvalues[i].max(0.0));
    }
    Ok((mean, axes, vars))
}

fn project(x: &Tensor, mean: &[f64], axis: &[f64]) -> Vec<f64> {
    x.data()
        .chunks(x.cols())
        .map(|r| r.iter().zip(mean).zip(axis).map(|((v, m), a)| (v - m) * a).sum())
        .collect()
}

/// Variance below which a component counts as constant.
const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Mean normalized MI between each subspace's first principal component and
/// every factor other than the one it is meant to hold.
pub fn mi_overlap(components: &[Tensor], factors: &[FactorVector]) -> Result<MiOverlap> {
    if components.len() != FACTOR_COUNT {
        return Err(Error::contract(format!(
            "mi_overlap needs {FACTOR_COUNT} components, got {}",
            components.len()
        )));
    }
    let n = factors.len();
    if n < MI_MIN_RECORDS {
        return Err(Error::contract(format!("mi_overlap needs n >= {MI_MIN_RECORDS}, got {n}")));
    }
    let factor_labels: Vec<Vec<usize>> = Factor::ALL
        .iter()
        .map(|&f| match f {
            Factor::Ctx => factors.iter().map(|v| v.ctx).collect(),
            f => equal_frequency_bins(&factors.iter().map(|v| v.value(f)).collect::<Vec<_>>(), MI_BINS),
        })
        .collect();
    let mut total = 0.0;
    let mut terms = 0usize;
    let mut degenerate = Vec::new();
    for (k, c) in components.iter().enumerate() {
        if c.rows() != n {
            return Err(Error::contract("component rows do not match factors"));
        }
        let (mean, axes, vars) = principal_axes(c, 1)?;
        let flat = vars[0] <= DEGENERATE_VARIANCE;
        if flat {
            degenerate.push(k);
        }
        let bins = if flat { Vec::new() } else { equal_frequency_bins(&project(c, &mean, &axes[0]), MI_BINS) };
        for f in 0..FACTOR_COUNT {
            if f == k {
                continue;
            }
            terms += 1;
            if !flat {
                total += normalized_mi(&bins, &factor_labels[f]);
            }
        }
    }
    Ok(MiOverlap { value: total / terms as f64, degenerate })
}

// ── orthogonality and neighbourhood structure ────────────────────────────

/// One minus the mean absolute per-sample cosine between distinct components.
pub fn orthogonality_score(components: &[Tensor]) -> Result<f64> {
    if components.len() < 2 {
        return Err(Error::contract("orthogonality_score needs two or more components"));
    }
    let (n, d) = components[0].require_matrix("orthogonality_score")?;
    if components.iter().any(|c| c.shape() != [n, d]) {
        return Err(Error::contract("components differ in shape"));
    }
    if n == 0 {
        return Err(Error::contract("orthogonality_score needs rows"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let norms: Vec<f64> = components
            .iter()
            .map(|c| c.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for k in 0..components.len() {
            for l in k + 1..components.len() {
                count += 1;
                if norms[k] == 0.0 || norms[l] == 0.0 {
                    continue;
                }
                let dot: f64 = components[k].row(i).iter().zip(components[l].row(i)).map(|(a, b)| a * b).sum();
                sum += (dot / (norms[k] * norms[l])).abs().min(1.0);
            }
        }
    }
    Ok(1.0 - sum / count as f64)
}

fn same_bin_fraction(lists: &[Vec<usize>], bins: &[usize]) -> f64 {
    let mut total = 0.0;
    for (q, nn) in lists.iter().enumerate() {
        total += nn.iter().filter(|&&j| bins[j] == bins[q]).count() as f64 / nn.len() as f64;
    }
    total / lists.len() as f64
}

/// Mean over subspaces of the same-target-bin fraction among each record's
/// `k` nearest neighbours within that subspace.
pub fn context_retrieval(components: &[Tensor], factors: &[FactorVector], k: usize) -> Result<f64> {
    if components.len() != FACTOR_COUNT {
        return Err(Error::contract(format!(
            "context_retrieval needs {FACTOR_COUNT} components, got {}",
            components.len()
        )));
    }
    let mut total = 0.0;
    for (c, &f) in components.iter().zip(&Factor::ALL) {
        if c.rows() != factors.len() {
            return Err(Error::contract("component rows do not match factors"));
        }
        let lists = knn_lists(c, k)?;
        total += same_bin_fraction(&lists, &factor_bins(factors, f));
    }
    Ok(total / FACTOR_COUNT as f64)
}

pub fn purity_from_neighbors(lists: &[Vec<usize>], labels: &[usize]) -> f64 {
    same_bin_fraction(lists, labels)
}

pub fn entropy_from_neighbors(lists: &[Vec<usize>], labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    let mut counts = vec![0usize; classes];
    for nn in lists {
        counts.iter_mut().for_each(|c| *c = 0);
        for &j in nn {
            counts[labels[j]] += 1;
        }
        total += entropy(&counts, nn.len());
    }
    total / lists.len() as f64
}

/// Same-phys-quartile fraction among the `k` nearest neighbours in `z`.
pub fn neighborhood_purity(z: &Tensor, factors: &[FactorVector], k: usize) -> Result<f64> {
    if z.rows() != factors.len() {
        return Err(Error::contract("embedding rows do not match factors"));
    }
    Ok(purity_from_neighbors(&knn_lists(z, k)?, &factor_bins(factors, Factor::Phys)))
}

/// Mean entropy (nats) of the phys-quartile histogram among the `k` nearest
/// neighbours in `z`.
pub fn context_entropy(z: &Tensor, factors: &[FactorVector], k: usize) -> Result<f64> {
    if z.rows() != factors.len() {
        return Err(Error::contract("embedding rows do not match factors"));
    }
    Ok(entropy_from_neighbors(&knn_lists(z, k)?, &factor_bins(factors, Factor::Phys)))
}

/// Rows of `z` projected onto their two leading principal axes.
pub fn pca_2d(z: &Tensor) -> Result<Tensor> {
    let (n, d) = z.require_matrix("pca_2d")?;
    let (mean, mut axes, _) = principal_axes(z, 2)?;
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    let a = project(z, &mean, &axes[0]);
    let b = project(z, &mean, &axes[1]);
    Tensor::matrix(n, 2, a.into_iter().zip(b).flat_map(|(x, y)| [x, y]).collect())
}

// ── tables ───────────────────────────────────────────────────────────────

/// Metric names a table may hold.
pub const METRIC_NAMES: &[&str] = &[
    "auroc_mortality",
    "auroc_sepsis",
    "auroc_readmission",
    "recall_at_k",
    "mi_overlap",
    "orthogonality_score",
    "context_retrieval",
    "neighborhood_purity",
    "context_entropy",
    "shift_gap",
    "bayes_ceiling",
    "min_subspace_std",
    "param_count",
    "budget_spread",
];

pub const SPLIT_IN_DOMAIN: &str = "in_domain";
pub const SPLIT_SHIFTED: &str = "shifted";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub method: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    rows: Vec<MetricRow>,
}

fn check_name(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains([',', '\n', '|']) {
        return Err(Error::contract(format!("bad {kind} name `{s}`")));
    }
    Ok(())
}

impl MetricsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn push(&mut self, metric: &str, split: &str, method: &str, value: f64) -> Result<()> {
        if !METRIC_NAMES.contains(&metric) {
            return Err(Error::contract(format!("unknown metric `{metric}`")));
        }
        check_name("split", split)?;
        check_name("method", method)?;
        if !value.is_finite() {
            return Err(Error::numeric(format!("{metric} for {method} is not finite")));
        }
        self.rows.push(MetricRow {
            metric: metric.into(),
            split: split.into(),
            method: method.into(),
            value,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, metric: &str, split: &str, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.split == split && r.method == method)
            .map(|r| r.value)
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,split,method,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6}", r.metric, r.split, r.method, r.value);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("metric,split,method,value") {
            return Err(Error::format("metrics CSV header missing"));
        }
        let mut t = Self::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format(format!("metrics CSV line {}: expected 4 fields", i + 2)));
            }
            let v: f64 = f[3]
                .parse()
                .map_err(|_| Error::format(format!("metrics CSV line {}: bad value", i + 2)))?;
            t.push(f[0], f[1], f[2], v)?;
        }
        Ok(t)
    }
}

/// In-domain minus shifted mortality AUROC for each method of `in_domain`.
pub fn shift_gap(in_domain: &MetricsTable, shifted: &MetricsTable) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for m in in_domain.methods() {
        let a = in_domain.get("auroc_mortality", SPLIT_IN_DOMAIN, &m);
        let b = shifted.get("auroc_mortality", SPLIT_SHIFTED, &m);
        match (a, b) {
            (Some(a), Some(b)) => out.push((m, a - b)),
            _ => return Err(Error::contract(format!("method `{m}` lacks mortality AUROC on both splits"))),
        }
    }
    Ok(out)
}

fn cell(tables: &[MetricsTable], metric: &str, split: &str, method: &str) -> String {
    let vals: Vec<f64> = tables.iter().filter_map(|t| t.get(metric, split, method)).collect();
    match vals.len() {
        0 => "n/a".into(),
        1 => format!("{:.3}", vals[0]),
        n => {
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            format!("{mean:.3} ± {:.3}", var.sqrt())
        }
    }
}

fn table(
    out: &mut String,
    title: &str,
    tables: &[MetricsTable],
    methods: &[String],
    cols: &[(&str, &str, &str)],
) {
    let _ = writeln!(out, "## {title}\n");
    let _ = write!(out, "| Method |");
    for (head, _, _) in cols {
        let _ = write!(out, " {head} |");
    }
    let _ = write!(out, "\n|---|");
    for _ in cols {
        let _ = write!(out, "---:|");
    }
    out.push('\n');
    for m in methods {
        let has_any = cols
            .iter()
            .any(|(_, metric, split)| tables.iter().any(|t| t.get(metric, split, m).is_some()));
        if !has_any {
            continue;
        }
        let _ = write!(out, "| {m} |");
        for (_, metric, split) in cols {
            let _ = write!(out, " {} |", cell(tables, metric, split, m));
        }
        out.push('\n');
    }
    out.push('\n');
}

/// Markdown tables for outcome prediction, disentanglement, shift and
/// geometry. Several tables (one per seed) render as mean ± std.
pub fn markdown_tables(tables: &[MetricsTable]) -> String {
    let mut methods: Vec<String> = Vec::new();
    for t in tables {
        for m in t.methods() {
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
    }
    let ind = SPLIT_IN_DOMAIN;
    let mut out = String::new();
    table(&mut out, "Outcome prediction and retrieval", tables, &methods, &[
        ("Mortality AUROC", "auroc_mortality", ind),
        ("Sepsis AUROC", "auroc_sepsis", ind),
        ("Readmission AUROC", "auroc_readmission", ind),
        ("Recall@k", "recall_at_k", ind),
    ]);
    table(&mut out, "Subspace disentanglement", tables, &methods, &[
        ("MI overlap", "mi_overlap", ind),
        ("Orthogonality", "orthogonality_score", ind),
        ("Context retrieval", "context_retrieval", ind),
    ]);
    table(&mut out, "Distribution shift", tables, &methods, &[
        ("In-domain AUROC", "auroc_mortality", ind),
        ("Shifted AUROC", "auroc_mortality", SPLIT_SHIFTED),
        ("Gap", "shift_gap", SPLIT_SHIFTED),
    ]);
    table(&mut out, "Latent geometry", tables, &methods, &[
        ("Neighborhood purity", "neighborhood_purity", ind),
        ("Context entropy", "context_entropy", ind),
    ]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use proptest::prelude::*;

    fn fv(phys: f64, int: f64, obs: f64, ctx: usize) -> FactorVector {
        FactorVector { phys, int, obs, ctx }
    }

    fn random_factors(n: usize, rng: &mut Rng) -> Vec<FactorVector> {
        (0..n)
            .map(|_| fv(rng.normal(), rng.normal(), rng.normal(), rng.below(4) as usize))
            .collect()
    }

    fn random_matrix(n: usize, d: usize, rng: &mut Rng) -> Tensor {
        Tensor::matrix(n, d, rng.normals(n * d)).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::Contract(_))));
        let mut rng = Rng::new(3);
        let s: Vec<f64> = (0..10000).map(|_| rng.normal()).collect();
        let l: Vec<bool> = (0..10000).map(|_| rng.bernoulli(0.3)).collect();
        assert!((auroc(&s, &l).unwrap() - 0.5).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn auroc_monotone_invariant(
            raw in proptest::collection::vec((-5i32..5, any::<bool>()), 2..60),
            a in 0.1f64..5.0,
            b in -3.0f64..3.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
        }
    }

    #[test]
    fn probe_separable_and_independent() {
        let mut rng = Rng::new(4);
        let x = random_matrix(2000, 1, &mut rng);
        let y: Vec<bool> = x.data().iter().map(|&v| v > 0.3).collect();
        let r = linear_probe(&x, &y, &x, &y).unwrap();
        assert_eq!(r.auroc, 1.0);

        let xtr = random_matrix(5000, 8, &mut rng);
        let xte = random_matrix(5000, 8, &mut rng);
        let ytr: Vec<bool> = (0..5000).map(|_| rng.bernoulli(0.3)).collect();
        let yte: Vec<bool> = (0..5000).map(|_| rng.bernoulli(0.3)).collect();
        let r = linear_probe(&xtr, &ytr, &xte, &yte).unwrap();
        assert!((r.auroc - 0.5).abs() < 0.03, "{}", r.auroc);
    }

    #[test]
    fn probe_on_constant_embeddings_is_chance() {
        let x = Tensor::zeros(&[50, 3]);
        let y: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let r = linear_probe(&x, &y, &x, &y).unwrap();
        assert_eq!(r.auroc, 0.5);
    }

    #[test]
    fn knn_breaks_ties_by_index() {
        let pts = Tensor::matrix(4, 1, vec![0.0, 1.0, -1.0, 1.0]).unwrap();
        let lists = knn_lists(&pts, 2).unwrap();
        assert_eq!(lists[0], vec![1, 2]);
        assert_eq!(lists[1], vec![3, 0]);
        assert!(matches!(knn_lists(&pts, 4), Err(Error::Config(_))));
    }

    #[test]
    fn recall_examples() {
        // one-hot bins, exact retrieval
        let bins: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut data = vec![0.0; 40 * 4];
        for (i, b) in bins.iter().enumerate() {
            data[i * 4 + b] = 1.0;
        }
        let z = Tensor::matrix(40, 4, data).unwrap();
        let r = recall_at_k(&z, &z, |q, g| bins[q] == bins[g], 1, true).unwrap();
        assert_eq!(r, 1.0);
        assert!(recall_at_k(&z, &z, |_, _| true, 40, true).is_err());

        // random embeddings, relevance fraction r
        let mut rng = Rng::new(9);
        let n = 2000;
        let z = random_matrix(n, 8, &mut rng);
        let groups: Vec<usize> = (0..n).map(|_| rng.below(8) as usize).collect();
        let rel = |q: usize, g: usize| groups[q] == groups[g];
        let r10 = recall_at_k(&z, &z, rel, 10, true).unwrap();
        let want = 1.0 - (1.0 - 0.125f64).powi(10);
        assert!((r10 - want).abs() < 0.03, "{r10} vs {want}");
        let r20 = recall_at_k(&z, &z, rel, 20, true).unwrap();
        assert!(r20 >= r10);
    }

    #[test]
    fn recall_and_retrieval_rigid_invariance() {
        let mut rng = Rng::new(10);
        let n = 120;
        let z = random_matrix(n, 3, &mut rng);
        let factors = random_factors(n, &mut rng);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let rot = Tensor::from_rows(&[vec![c, -s, 0.0], vec![s, c, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let moved = z.matmul(&rot).unwrap().map(|v| v + 2.5);
        let keys = relevance_keys(&factors.iter().map(|f| f.ctx == 0).collect::<Vec<_>>(), &factors);
        let rel = |q: usize, g: usize| keys[q] == keys[g];
        assert_eq!(
            recall_at_k(&z, &z, rel, 10, true).unwrap(),
            recall_at_k(&moved, &moved, rel, 10, true).unwrap()
        );
        let comps = vec![z.clone(), moved.clone(), z.clone(), moved.clone()];
        let comps2: Vec<Tensor> = comps.iter().map(|t| t.matmul(&rot).unwrap()).collect();
        assert_eq!(
            context_retrieval(&comps, &factors, 5).unwrap(),
            context_retrieval(&comps2, &factors, 5).unwrap()
        );
    }

    #[test]
    fn mi_self_information_is_one() {
        let mut rng = Rng::new(11);
        let v: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        let bins = equal_frequency_bins(&v, MI_BINS);
        assert!((normalized_mi(&bins, &bins) - 1.0).abs() < 1e-9);
        let mut counts = [0usize; MI_BINS];
        bins.iter().for_each(|&b| counts[b] += 1);
        assert!(counts.iter().all(|&c| c == 250));
    }

    #[test]
    fn mi_overlap_examples() {
        let mut rng = Rng::new(12);
        let n = 10000;
        let factors = random_factors(n, &mut rng);
        let independent: Vec<Tensor> = (0..4).map(|_| random_matrix(n, 4, &mut rng)).collect();
        let r = mi_overlap(&independent, &factors).unwrap();
        assert!(r.value <= 0.05, "{}", r.value);
        assert!(r.degenerate.is_empty());

        // subspace 0 holds the int factor, a non-target for it
        let mut comps = independent.clone();
        comps[0] = Tensor::matrix(n, 1, factors.iter().map(|f| f.int).collect()).unwrap();
        let mi01 = normalized_mi(
            &equal_frequency_bins(&factors.iter().map(|f| f.int).collect::<Vec<_>>(), MI_BINS),
            &equal_frequency_bins(&comps[0].data().to_vec(), MI_BINS),
        );
        assert!((mi01 - 1.0).abs() < 1e-9);
        let r2 = mi_overlap(&comps, &factors).unwrap();
        // one of the twelve (subspace, factor) pairs becomes 1
        assert!(r2.value > r.value + 1.0 / 12.0 - 0.01, "{} vs {}", r2.value, r.value);

        let mut flat = independent;
        flat[2] = Tensor::full(&[n, 4], 3.0);
        let r3 = mi_overlap(&flat, &factors).unwrap();
        assert_eq!(r3.degenerate, vec![2]);
        assert!((0.0..=1.0).contains(&r3.value));
        assert!(mi_overlap(&flat, &factors[..999]).is_err());
    }

    #[test]
    fn orthogonality_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 3.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(orthogonality_score(&[a.clone(), b]).unwrap(), 1.0);
        assert_eq!(orthogonality_score(&[a.clone(), a]).unwrap(), 0.0);
        let p = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.5, 3f64.sqrt() / 2.0]]).unwrap();
        assert!((orthogonality_score(&[p.clone(), q]).unwrap() - 0.5).abs() < 1e-12);
        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(orthogonality_score(&[p, zero]).unwrap(), 1.0);
    }

    #[test]
    fn context_retrieval_examples() {
        let mut rng = Rng::new(13);
        let n = 4000;
        let factors = random_factors(n, &mut rng);
        let line = |f: Factor| {
            let bins = factor_bins(&factors, f);
            Tensor::matrix(n, 1, bins.iter().zip(&factors).map(|(&b, v)| 10.0 * b as f64 + 0.01 * v.value(f)).collect()).unwrap()
        };
        let comps: Vec<Tensor> = Factor::ALL.iter().map(|&f| line(f)).collect();
        assert!(context_retrieval(&comps, &factors, 10).unwrap() >= 0.9);
        let random: Vec<Tensor> = (0..4).map(|_| random_matrix(n, 4, &mut rng)).collect();
        let r = context_retrieval(&random, &factors, 10).unwrap();
        assert!((r - 0.25).abs() < 0.03, "{r}");

        // four records, one per bin on every factor
        let f4: Vec<FactorVector> = (0..4).map(|i| fv(i as f64, i as f64, i as f64, i)).collect();
        let z = Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let c4 = vec![z.clone(), z.clone(), z.clone(), z];
        assert_eq!(context_retrieval(&c4, &f4, 1).unwrap(), 0.0);
    }

    #[test]
    fn purity_and_entropy_examples() {
        let mut rng = Rng::new(14);
        let n = 400;
        let factors = random_factors(n, &mut rng);
        let bins = factor_bins(&factors, Factor::Phys);
        let mut onehot = vec![0.0; n * 4];
        for (i, &b) in bins.iter().enumerate() {
            onehot[i * 4 + b] = 1.0;
        }
        let z = Tensor::matrix(n, 4, onehot).unwrap();
        assert_eq!(neighborhood_purity(&z, &factors, 10).unwrap(), 1.0);
        assert_eq!(context_entropy(&z, &factors, 10).unwrap(), 0.0);

        let n = 5000;
        let factors = random_factors(n, &mut rng);
        let z = random_matrix(n, 4, &mut rng);
        let p = neighborhood_purity(&z, &factors, 10).unwrap();
        assert!((p - 0.25).abs() < 0.03, "{p}");

        let labels = [0, 1, 2, 3, 0, 1, 2, 3, 0, 0, 1];
        let uniform = vec![(1..9).collect::<Vec<usize>>()];
        assert!((entropy_from_neighbors(&uniform, &labels) - 4f64.ln()).abs() < 1e-12);
        let half = vec![vec![0, 4, 8, 9, 0, 1, 5, 10, 1, 5]];
        assert!((entropy_from_neighbors(&half, &labels) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn purity_unchanged_by_duplication() {
        let mut rng = Rng::new(15);
        let n = 20;
        let factors = random_factors(n, &mut rng);
        let z = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.below(5) as f64).collect()).unwrap();
        let base = neighborhood_purity(&z, &factors, 3).unwrap();
        let idx: Vec<usize> = (0..n).flat_map(|i| [i, i]).collect();
        let dup_factors: Vec<FactorVector> = idx.iter().map(|&i| factors[i]).collect();
        let dup_z = z.select_rows(&idx).unwrap();
        // each copy's first neighbour is its twin, followed by both copies of
        // the original neighbours in the original order
        let dup = neighborhood_purity(&dup_z, &dup_factors, 7).unwrap();
        assert!((dup - (1.0 + 6.0 * base) / 7.0).abs() < 1e-12, "{dup} vs {base}");
    }

    #[test]
    fn shift_gap_examples() {
        let mut a = MetricsTable::new();
        a.push("auroc_mortality", SPLIT_IN_DOMAIN, "mae", 0.861).unwrap();
        a.push("auroc_mortality", SPLIT_IN_DOMAIN, "aurora", 0.904).unwrap();
        let mut b = MetricsTable::new();
        b.push("auroc_mortality", SPLIT_SHIFTED, "mae", 0.781).unwrap();
        b.push("auroc_mortality", SPLIT_SHIFTED, "aurora", 0.879).unwrap();
        let gaps = shift_gap(&a, &b).unwrap();
        assert!((gaps[0].1 - 0.080).abs() < 1e-12);
        assert!((gaps[1].1 - 0.025).abs() < 1e-12);
        let mut same = MetricsTable::new();
        same.push("auroc_mortality", SPLIT_IN_DOMAIN, "x", 0.7).unwrap();
        same.push("auroc_mortality", SPLIT_SHIFTED, "x", 0.7).unwrap();
        assert_eq!(shift_gap(&same, &same).unwrap()[0].1, 0.0);
        let empty = MetricsTable::new();
        assert!(matches!(shift_gap(&a, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn table_csv_and_markdown() {
        let mut t = MetricsTable::new();
        t.push("mi_overlap", SPLIT_IN_DOMAIN, "aurora", 0.1234567).unwrap();
        assert!(t.push("made_up", SPLIT_IN_DOMAIN, "aurora", 1.0).is_err());
        assert!(t.push("mi_overlap", SPLIT_IN_DOMAIN, "aurora", f64::NAN).is_err());
        let csv = t.to_csv();
        assert_eq!(csv, "metric,split,method,value\nmi_overlap,in_domain,aurora,0.123457\n");
        assert_eq!(MetricsTable::from_csv(&csv).unwrap().to_csv(), csv);
        let md = markdown_tables(&[t.clone(), t]);
        assert!(md.contains("| aurora |"));
        assert!(md.contains("0.123 ± 0.000"));
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = Rng::new(16);
        let n = 500;
        let data: Vec<f64> = (0..n).flat_map(|_| {
            let t = 5.0 * rng.normal();
            [t, 0.1 * rng.normal(), t]
        }).collect();
        let z = Tensor::matrix(n, 3, data).unwrap();
        let p = pca_2d(&z).unwrap();
        assert_eq!(p.shape(), [n, 2]);
        let var0: f64 = (0..n).map(|i| p.get(i, 0).powi(2)).sum::<f64>() / n as f64;
        assert!(var0 > 40.0);
    }
}
