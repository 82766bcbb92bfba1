//! Held-out evaluation of an embedding store against its cohort.

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::train::split_point;
use crate::metrics::{
    auroc, context_retrieval, entropy_from_neighbors, factor_bins, fit_probe, knn_lists,
    mi_overlap, orthogonality_score, purity_from_neighbors, recall_at_k, relevance_keys,
    EmbeddingSet, FittedProbe, MetricsTable, MI_MIN_RECORDS, SPLIT_IN_DOMAIN, SPLIT_SHIFTED,
};
use crate::objectives::per_dimension_std;
use crate::synthcohort::{CohortRecord, Factor, FactorVector, Outcome};

/// Smallest test split `evaluate` accepts.
pub const MIN_TEST_RECORDS: usize = 500;

pub struct Evaluation {
    pub table: MetricsTable,
    pub probes: Vec<(Outcome, FittedProbe)>,
    pub notes: Vec<String>,
}

/// Records ordered to match `set`'s rows; errors unless the id sets agree.
fn aligned<'a>(set: &EmbeddingSet, records: &'a [CohortRecord]) -> Result<Vec<&'a CohortRecord>> {
    let mut sorted: Vec<&CohortRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.id);
    if sorted.len() != set.len() || sorted.iter().zip(&set.ids).any(|(r, &id)| r.id != id) {
        return Err(Error::contract("store ids do not match the cohort"));
    }
    Ok(sorted)
}

fn labels(records: &[&CohortRecord], o: Outcome) -> Vec<bool> {
    records.iter().map(|r| r.label(o)).collect()
}

fn metric_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Mortality => "auroc_mortality",
        Outcome::Sepsis => "auroc_sepsis",
        Outcome::Readmission => "auroc_readmission",
    }
}

/// Oracle AUROC on `records`: mortality scored by the true phys factor, the
/// only factor its label model uses.
pub fn bayes_ceiling(records: &[&CohortRecord]) -> Result<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.factors.phys).collect();
    auroc(&scores, &labels(records, Outcome::Mortality))
}

/// Full metric vocabulary on the held-out split (last 20% of ids). Probes
/// are fit on the first 80%.
pub fn evaluate(
    set: &EmbeddingSet,
    records: &[CohortRecord],
    cfg: &ExperimentConfig,
    method: &str,
) -> Result<Evaluation> {
    let recs = aligned(set, records)?;
    let n = recs.len();
    let cut = split_point(n);
    if n - cut < MIN_TEST_RECORDS {
        return Err(Error::config(format!(
            "test split has {} records, need at least {MIN_TEST_RECORDS}",
            n - cut
        )));
    }
    let train_idx: Vec<usize> = (0..cut).collect();
    let test_idx: Vec<usize> = (cut..n).collect();
    let train = set.select(&train_idx)?;
    let test = set.select(&test_idx)?;
    let train_recs = &recs[..cut];
    let test_recs = &recs[cut..];
    let test_factors: Vec<FactorVector> = test_recs.iter().map(|r| r.factors).collect();
    let split = SPLIT_IN_DOMAIN;
    let mut table = MetricsTable::new();
    let mut notes = Vec::new();
    let mut probes = Vec::new();

    for &o in &cfg.eval.probe_targets {
        let probe = fit_probe(&train.z, &labels(train_recs, o))?;
        if !probe.converged {
            notes.push(format!(
                "{method}: {} probe stopped after {} iterations (gradient norm {:.2e})",
                o.name(),
                probe.iterations,
                probe.grad_norm
            ));
        }
        table.push(metric_name(o), split, method, probe.auroc(&test.z, &labels(test_recs, o))?)?;
        probes.push((o, probe));
    }
    table.push("bayes_ceiling", split, method, bayes_ceiling(test_recs)?)?;

    let k = cfg.eval.k;
    let keys = relevance_keys(&labels(test_recs, Outcome::Mortality), &test_factors);
    table.push("recall_at_k", split, method, recall_at_k(&test.z, &test.z, |q, g| keys[q] == keys[g], k, true)?)?;

    // plug-in MI needs more records than a small test split may hold
    let mi = if test.len() >= MI_MIN_RECORDS {
        mi_overlap(&test.components, &test_factors)?
    } else {
        notes.push(format!("{method}: test split below {MI_MIN_RECORDS} records, MI overlap uses all records"));
        let all: Vec<FactorVector> = recs.iter().map(|r| r.factors).collect();
        mi_overlap(&set.components, &all)?
    };
    if !mi.degenerate.is_empty() {
        notes.push(format!("{method}: constant subspaces {:?} contribute 0 to MI overlap", mi.degenerate));
    }
    table.push("mi_overlap", split, method, mi.value)?;
    table.push("orthogonality_score", split, method, orthogonality_score(&test.components)?)?;
    table.push("context_retrieval", split, method, context_retrieval(&test.components, &test_factors, k)?)?;

    let lists = knn_lists(&test.z, k)?;
    let phys_bins = factor_bins(&test_factors, Factor::Phys);
    table.push("neighborhood_purity", split, method, purity_from_neighbors(&lists, &phys_bins))?;
    table.push("context_entropy", split, method, entropy_from_neighbors(&lists, &phys_bins))?;

    let min_std = test
        .components
        .iter()
        .map(|c| per_dimension_std(c).map(|s| s.iter().sum::<f64>() / s.len() as f64))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    table.push("min_subspace_std", split, method, min_std)?;
    Ok(Evaluation { table, probes, notes })
}

/// Scores in-domain probes on the held-out split of a shifted cohort.
pub fn evaluate_shifted(
    probes: &[(Outcome, FittedProbe)],
    set: &EmbeddingSet,
    records: &[CohortRecord],
    method: &str,
) -> Result<MetricsTable> {
    let recs = aligned(set, records)?;
    let cut = split_point(recs.len());
    let test_idx: Vec<usize> = (cut..recs.len()).collect();
    let test = set.select(&test_idx)?;
    let mut table = MetricsTable::new();
    for (o, probe) in probes {
        table.push(metric_name(*o), SPLIT_SHIFTED, method, probe.auroc(&test.z, &labels(&recs[cut..], *o))?)?;
    }
    table.push("bayes_ceiling", SPLIT_SHIFTED, method, bayes_ceiling(&recs[cut..])?)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AuxHead, EncoderConfig, ModelBundle};
    use crate::harness::store::embed;
    use crate::numcore::Tensor;
    use crate::synthcohort::{generate, CohortConfig};

    fn cohort(n: usize) -> Vec<CohortRecord> {
        generate(&CohortConfig { n, seed: 21, ..CohortConfig::default() }).unwrap().records
    }

    /// Embeddings holding the true factors, one column each, in every subspace.
    fn factor_store(records: &[CohortRecord]) -> EmbeddingSet {
        let n = records.len();
        let data: Vec<f64> = records
            .iter()
            .flat_map(|r| [r.factors.phys, r.factors.int, r.factors.obs, r.factors.ctx as f64])
            .collect();
        let z = Tensor::matrix(n, 4, data).unwrap();
        EmbeddingSet::new(records.iter().map(|r| r.id).collect(), z.clone(), vec![z.clone(), z.clone(), z.clone(), z]).unwrap()
    }

    #[test]
    fn zero_checkpoint_probes_at_chance() {
        let records = cohort(5000);
        let zero = ModelBundle::zeros(&EncoderConfig::default(), AuxHead::None).unwrap();
        let set = embed(&zero, &records).unwrap();
        let cfg = ExperimentConfig::with_seed(0);
        let ev = evaluate(&set, &records, &cfg, "zero").unwrap();
        let a = ev.table.get("auroc_mortality", SPLIT_IN_DOMAIN, "zero").unwrap();
        assert!((a - 0.5).abs() <= 0.03, "{a}");
    }

    #[test]
    fn factor_embeddings_reach_the_ceiling() {
        let records = cohort(5000);
        let set = factor_store(&records);
        let cfg = ExperimentConfig::with_seed(0);
        let ev = evaluate(&set, &records, &cfg, "oracle").unwrap();
        let a = ev.table.get("auroc_mortality", SPLIT_IN_DOMAIN, "oracle").unwrap();
        let ceiling = ev.table.get("bayes_ceiling", SPLIT_IN_DOMAIN, "oracle").unwrap();
        assert!((a - ceiling).abs() < 0.01, "{a} vs {ceiling}");
        // population value from numerical integration of the label model
        assert!((ceiling - 0.8666).abs() < 0.03, "{ceiling}");
        let again = evaluate(&set, &records, &cfg, "oracle").unwrap();
        assert_eq!(again.table.to_csv(), ev.table.to_csv());
    }

    #[test]
    fn small_or_mismatched_inputs_rejected() {
        let records = cohort(2000);
        let set = factor_store(&records);
        let cfg = ExperimentConfig::with_seed(0);
        assert!(matches!(evaluate(&set, &records, &cfg, "x"), Err(Error::Config(_))));
        let records = cohort(2600);
        assert!(matches!(evaluate(&set, &records, &cfg, "x"), Err(Error::Contract(_))));
    }
}
