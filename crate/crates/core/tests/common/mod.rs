//! Exhaustive reference implementations of the kNN-based metrics and AUROC.

#![allow(dead_code)]

use aurora_core::metrics;
use aurora_core::numcore::{Rng, Tensor};
use aurora_core::synthcohort::FactorVector;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Full sort of every other row by (distance, index), first `k` kept.
pub fn brute_knn(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows();
    let mut out = Vec::new();
    for q in 0..n {
        let mut all: Vec<(f64, usize)> = Vec::new();
        for j in 0..n {
            if j != q {
                all.push((sq_dist(x.row(q), x.row(j)), j));
            }
        }
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(all[..k].iter().map(|p| p.1).collect());
    }
    out
}

/// Bin = rank * bins / n, rank counted pairwise with index tie-breaks.
pub fn brute_bins(v: &[f64], bins: usize) -> Vec<usize> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let rank = (0..n).filter(|&j| v[j] < v[i] || (v[j] == v[i] && j < i)).count();
            rank * bins / n
        })
        .collect()
}

pub fn brute_factor_bins(f: &[FactorVector], which: usize) -> Vec<usize> {
    match which {
        0 => brute_bins(&f.iter().map(|v| v.phys).collect::<Vec<_>>(), 4),
        1 => brute_bins(&f.iter().map(|v| v.int).collect::<Vec<_>>(), 4),
        2 => brute_bins(&f.iter().map(|v| v.obs).collect::<Vec<_>>(), 4),
        _ => f.iter().map(|v| v.ctx).collect(),
    }
}

pub fn brute_purity(lists: &[Vec<usize>], bins: &[usize]) -> f64 {
    let mut total = 0.0;
    for (q, nn) in lists.iter().enumerate() {
        let same = nn.iter().filter(|&&j| bins[j] == bins[q]).count();
        total += same as f64 / nn.len() as f64;
    }
    total / lists.len() as f64
}

pub fn brute_entropy(lists: &[Vec<usize>], bins: &[usize]) -> f64 {
    let classes = *bins.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for nn in lists {
        let mut h = 0.0;
        for c in 0..classes {
            let cnt = nn.iter().filter(|&&j| bins[j] == c).count();
            if cnt > 0 {
                let p = cnt as f64 / nn.len() as f64;
                h += -p * p.ln();
            }
        }
        total += h;
    }
    total / lists.len() as f64
}

pub fn brute_recall(x: &Tensor, keys: &[usize], k: usize) -> f64 {
    let lists = brute_knn(x, k);
    let mut hits = 0;
    let mut counted = 0;
    for q in 0..x.rows() {
        if !(0..x.rows()).any(|j| j != q && keys[j] == keys[q]) {
            continue;
        }
        counted += 1;
        if lists[q].iter().any(|&j| keys[j] == keys[q]) {
            hits += 1;
        }
    }
    hits as f64 / counted as f64
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counted half.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Small integer coordinates so distance ties are common.
fn grid_points(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.below(4) as f64).collect()).unwrap()
}

fn random_factors(n: usize, rng: &mut Rng) -> Vec<FactorVector> {
    (0..n)
        .map(|_| FactorVector {
            phys: rng.below(6) as f64,
            int: rng.normal(),
            obs: rng.normal(),
            ctx: rng.below(3),
        })
        .collect()
}

/// Number of kNN instances that disagree with the brute-force versions.
pub fn knn_oracle_mismatches(instances: usize, seed: u64) -> (usize, Vec<String>) {
    let mut rng = Rng::new(seed);
    let mut bad = Vec::new();
    for t in 0..instances {
        let n = 12 + rng.below(19);
        let d = 1 + rng.below(4);
        let k = 1 + rng.below(6);
        let z = grid_points(n, d, &mut rng);
        let comps: Vec<Tensor> = (0..4).map(|_| grid_points(n, 2, &mut rng)).collect();
        let f = random_factors(n, &mut rng);
        let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();

        let lists = metrics::knn_lists(&z, k).unwrap();
        let want = brute_knn(&z, k);
        let phys = brute_factor_bins(&f, 0);
        let mut checks: Vec<(&str, f64, f64)> = vec![
            ("neighborhood_purity", metrics::neighborhood_purity(&z, &f, k).unwrap(), brute_purity(&want, &phys)),
            ("context_entropy", metrics::context_entropy(&z, &f, k).unwrap(), brute_entropy(&want, &phys)),
        ];
        let cr_want = (0..4).map(|c| brute_purity(&brute_knn(&comps[c], k), &brute_factor_bins(&f, c))).sum::<f64>() / 4.0;
        checks.push(("context_retrieval", metrics::context_retrieval(&comps, &f, k).unwrap(), cr_want));
        let keys = metrics::relevance_keys(&labels, &f);
        let want_keys: Vec<usize> = phys.iter().zip(&labels).map(|(q, &l)| q * 2 + l as usize).collect();
        if keys != want_keys {
            bad.push(format!("instance {t}: relevance keys differ"));
        }
        if (0..n).any(|q| (0..n).any(|j| j != q && want_keys[j] == want_keys[q])) {
            let got = metrics::recall_at_k(&z, &z, |a, b| keys[a] == keys[b], k, true).unwrap();
            checks.push(("recall_at_k", got, brute_recall(&z, &want_keys, k)));
        }
        if lists != want {
            bad.push(format!("instance {t}: neighbour lists differ"));
        }
        for (name, got, want) in checks {
            if got != want {
                bad.push(format!("instance {t}: {name} {got} vs {want}"));
            }
        }
    }
    (instances, bad)
}

pub fn auroc_oracle_mismatches(instances: usize, seed: u64) -> (usize, Vec<String>) {
    let mut rng = Rng::new(seed);
    let mut bad = Vec::new();
    for t in 0..instances {
        let n = 2 + rng.below(49);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.below(8) as f64 * 0.25).collect();
        let got = metrics::auroc(&scores, &labels).unwrap();
        let want = brute_auroc(&scores, &labels);
        if got != want {
            bad.push(format!("instance {t}: auroc {got} vs {want}"));
        }
    }
    (instances, bad)
}
