//! Per-factor relation graphs.
//!
//! For factor `k`, records are related through their observable proxy
//! features (the factor's dominant feature block, z-scored over the training
//! split). Each anchor keeps its exact `m` nearest neighbors under Euclidean
//! distance, weighted by a Gaussian kernel whose bandwidth is the median of
//! all retained squared distances.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::synthcohort::{context_features, CohortRecord, Factor};

/// Bandwidth used when the median retained squared distance is zero.
pub const BANDWIDTH_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub neighbor: usize,
    pub weight: f64,
    pub dist2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph {
    pub factor: Factor,
    pub m: usize,
    /// Kernel bandwidth σ².
    pub bandwidth: f64,
    edges: Vec<Vec<Edge>>,
}

impl RelationGraph {
    pub fn anchors(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self, anchor: usize) -> &[Edge] {
        &self.edges[anchor]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges
            .iter()
            .enumerate()
            .flat_map(|(i, es)| es.iter().map(move |e| (i, e)))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

/// `exp(−dist2 / sigma2)`.
pub fn kernel_weight(dist2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::contract(format!("kernel bandwidth must be positive, got {sigma2}")));
    }
    if !(dist2 >= 0.0) {
        return Err(Error::contract(format!("squared distance must be non-negative, got {dist2}")));
    }
    Ok((-dist2 / sigma2).exp())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Builds the m-nearest-neighbor graph over the rows of `proxies` (`[n×q]`).
/// Ties in distance go to the lower index.
pub fn build_graph(proxies: &Tensor, factor: Factor, m: usize) -> Result<RelationGraph> {
    let (n, q) = proxies.require_matrix("build_graph")?;
    if m == 0 || m >= n {
        return Err(Error::config(format!("neighbor count m={m} must satisfy 0 < m < n={n}")));
    }
    let data = proxies.data();
    let mut lists: Vec<Vec<(f64, usize)>> = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let xi = &data[i * q..(i + 1) * q];
        cand.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &data[j * q..(j + 1) * q];
            let d: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d, j));
        }
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(m - 1, by_dist);
        let mut nearest = cand[..m].to_vec();
        nearest.sort_by(by_dist);
        lists.push(nearest);
    }

    let mut retained: Vec<f64> = lists.iter().flatten().map(|&(d, _)| d).collect();
    let mut bandwidth = median(&mut retained);
    if bandwidth <= 0.0 {
        bandwidth = BANDWIDTH_FLOOR;
    }
    let edges = lists
        .into_iter()
        .map(|l| {
            l.into_iter()
                .map(|(dist2, neighbor)| {
                    Ok(Edge {
                        neighbor,
                        weight: kernel_weight(dist2, bandwidth)?,
                        dist2,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelationGraph {
        factor,
        m,
        bandwidth,
        edges,
    })
}

/// Z-scores every column; zero-variance columns are only centered.
pub fn standardize_columns(t: &Tensor) -> Result<Tensor> {
    let (n, q) = t.require_matrix("standardize_columns")?;
    let mut mean = vec![0.0; q];
    for row in t.data().chunks(q) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; q];
    for row in t.data().chunks(q) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let sd: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(q) {
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&sd) {
            *v = (*v - m) / s;
        }
    }
    Tensor::matrix(n, q, out)
}

/// Standardized proxy matrix of `factor` over `records`.
pub fn proxy_matrix(records: &[CohortRecord], factor: Factor) -> Result<Tensor> {
    let rows = records
        .iter()
        .map(|r| context_features(r, factor).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    standardize_columns(&Tensor::from_rows(&rows)?)
}

/// One graph per factor, in factor order.
pub fn build_graphs(records: &[CohortRecord], m: usize) -> Result<Vec<RelationGraph>> {
    Factor::ALL
        .iter()
        .map(|&f| build_graph(&proxy_matrix(records, f)?, f, m))
        .collect()
}

// ── pair sampling ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub factor: usize,
    /// Graph-level anchor and neighbor indices.
    pub anchor: usize,
    pub neighbor: usize,
    /// Positions of anchor and neighbor within the batch.
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn for_factor(&self, k: usize) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.factor == k)
    }
}

/// Edges of every graph whose anchor and neighbor both lie in `batch`
/// (graph-level indices). Anchors without an in-batch neighbor contribute
/// nothing for that factor.
pub fn sample_pairs(graphs: &[RelationGraph], batch: &[usize]) -> Result<PairBatch> {
    let mut pairs = Vec::new();
    for (k, g) in graphs.iter().enumerate() {
        let mut position = vec![usize::MAX; g.anchors()];
        for (pos, &idx) in batch.iter().enumerate() {
            if idx >= g.anchors() {
                return Err(Error::contract(format!(
                    "batch index {idx} outside graph of {} anchors",
                    g.anchors()
                )));
            }
            position[idx] = pos;
        }
        for (i, &anchor) in batch.iter().enumerate() {
            for e in g.edges(anchor) {
                let j = position[e.neighbor];
                if j != usize::MAX {
                    pairs.push(Pair {
                        factor: k,
                        anchor,
                        neighbor: e.neighbor,
                        i,
                        j,
                        weight: e.weight,
                    });
                }
            }
        }
    }
    Ok(PairBatch { pairs })
}

/// Debug dump: `factor,anchor,neighbor,weight`.
pub fn write_graph_csv(out: &mut impl Write, graphs: &[RelationGraph]) -> Result<()> {
    writeln!(out, "factor,anchor,neighbor,weight")?;
    for g in graphs {
        for (a, e) in g.iter() {
            writeln!(out, "{},{},{},{:.9}", g.factor.name(), a, e.neighbor, e.weight)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use proptest::prelude::*;

    fn line(points: &[f64]) -> Tensor {
        Tensor::matrix(points.len(), 1, points.to_vec()).unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_weight(0.0, 3.0).unwrap(), 1.0);
        assert!((kernel_weight(2.5, 2.5).unwrap() - 0.367879441).abs() < 1e-9);
        assert!((kernel_weight(2.0, 1.0).unwrap() - 0.135335283).abs() < 1e-9);
        assert!(kernel_weight(1.0, 0.0).is_err());
        assert!(kernel_weight(1.0, -1.0).is_err());
    }

    #[test]
    fn three_points_on_a_line() {
        let g = build_graph(&line(&[0.0, 1.0, 10.0]), Factor::Phys, 1).unwrap();
        let nbrs: Vec<usize> = (0..3).map(|i| g.edges(i)[0].neighbor).collect();
        assert_eq!(nbrs, vec![1, 0, 1]);
    }

    #[test]
    fn identical_points_use_floor() {
        let g = build_graph(&line(&[2.0; 5]), Factor::Obs, 2).unwrap();
        assert_eq!(g.bandwidth, BANDWIDTH_FLOOR);
        assert!(g.iter().all(|(_, e)| e.weight == 1.0));
        // ties go to the lowest index
        assert_eq!(g.edges(0).iter().map(|e| e.neighbor).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(g.edges(3).iter().map(|e| e.neighbor).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn four_point_median_bandwidth() {
        // points 0, 1, 3, 7; nearest two by hand as index (squared distance):
        // 0 -> 1 (1), 2 (9); 1 -> 0 (1), 2 (4); 2 -> 1 (4), 0 (9); 3 -> 2 (16), 1 (36)
        let g = build_graph(&line(&[0.0, 1.0, 3.0, 7.0]), Factor::Int, 2).unwrap();
        // sorted: 1 1 4 4 9 9 16 36 -> median (4 + 9) / 2
        assert_eq!(g.bandwidth, 6.5);
        let n3: Vec<usize> = g.edges(3).iter().map(|e| e.neighbor).collect();
        assert_eq!(n3, vec![2, 1]);
    }

    #[test]
    fn m_must_be_below_n() {
        assert!(matches!(build_graph(&line(&[0.0, 1.0]), Factor::Phys, 2), Err(Error::Config(_))));
    }

    fn chain() -> Vec<RelationGraph> {
        vec![build_graph(&line(&[0.0, 1.0, 10.0]), Factor::Phys, 1).unwrap()]
    }

    #[test]
    fn chain_pairs_filtered_to_batch() {
        let pb = sample_pairs(&chain(), &[0, 1]).unwrap();
        let got: Vec<(usize, usize)> = pb.pairs.iter().map(|p| (p.anchor, p.neighbor)).collect();
        assert_eq!(got, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn singleton_batch_has_no_pairs() {
        assert!(sample_pairs(&chain(), &[2]).unwrap().is_empty());
    }

    #[test]
    fn full_batch_gives_every_edge() {
        let mut rng = Rng::new(4);
        let pts = Tensor::matrix(40, 3, rng.normals(120)).unwrap();
        let g = vec![build_graph(&pts, Factor::Phys, 5).unwrap()];
        let batch: Vec<usize> = (0..40).collect();
        let pb = sample_pairs(&g, &batch).unwrap();
        assert_eq!(pb.len(), g[0].edge_count());
    }

    fn random_graph(seed: u64, n: usize) -> RelationGraph {
        let mut rng = Rng::new(seed);
        let pts = Tensor::matrix(n, 2, rng.normals(2 * n)).unwrap();
        build_graph(&pts, Factor::Phys, 4).unwrap()
    }

    #[test]
    fn weights_match_kernel_and_median_split() {
        let g = random_graph(8, 60);
        let s = (-1.0f64).exp();
        let (mut hi, mut lo) = (0, 0);
        for (_, e) in g.iter() {
            assert!((e.weight - (-e.dist2 / g.bandwidth).exp()).abs() < 1e-12);
            assert!(e.weight > 0.0 && e.weight <= 1.0);
            hi += (e.weight >= s - 1e-9) as usize;
            lo += (e.weight <= s + 1e-9) as usize;
        }
        let half = g.edge_count() / 2;
        assert!(hi >= half, "{hi}");
        assert!(lo <= g.edge_count() - half, "{lo}");
        assert!(g.iter().all(|(a, e)| a != e.neighbor));
        assert!((0..60).all(|a| g.edges(a).len() == 4));
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(random_graph(3, 50), random_graph(3, 50));
    }

    proptest! {
        #[test]
        fn pair_multiset_ignores_batch_order(seed in 0u64..1000, take in 2usize..30) {
            let g = vec![random_graph(seed, 30)];
            let mut rng = Rng::new(seed);
            let mut batch: Vec<usize> = (0..30).collect();
            rng.shuffle(&mut batch);
            batch.truncate(take);
            let key = |pb: PairBatch| {
                let mut v: Vec<(usize, usize, u64)> =
                    pb.pairs.iter().map(|p| (p.anchor, p.neighbor, p.weight.to_bits())).collect();
                v.sort();
                v
            };
            let a = key(sample_pairs(&g, &batch).unwrap());
            rng.shuffle(&mut batch);
            let b = key(sample_pairs(&g, &batch).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
