//! Method grid: train each method, evaluate in-domain and under shift, and
//! assemble the report.

use std::fmt::Write as _;

use crate::encoder::{budget_spread, ModelBundle};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::eval::{evaluate, evaluate_shifted};
use crate::harness::store::embed;
use crate::harness::train::{train_on, LogRow};
use crate::metrics::{markdown_tables, shift_gap, MetricsTable, SPLIT_IN_DOMAIN, SPLIT_SHIFTED};
use crate::synthcohort::{apply_shift, generate, Cohort};

/// Largest parameter-count spread tolerated across methods.
pub const BUDGET_LIMIT: f64 = 0.10;

pub struct CellResult {
    pub method: Method,
    pub table: MetricsTable,
    pub log: Vec<LogRow>,
    pub notes: Vec<String>,
}

pub struct GridResult {
    /// One table per seed, in seed order.
    pub tables: Vec<MetricsTable>,
    pub cells: Vec<Vec<CellResult>>,
    pub report: String,
}

/// Student parameter count of every method under `cfg`'s encoder.
pub fn parameter_counts(cfg: &ExperimentConfig) -> Result<Vec<(Method, usize)>> {
    Method::ALL
        .iter()
        .map(|&m| Ok((m, ModelBundle::zeros(&cfg.encoder, m.aux_head(&cfg.objective))?.param_count())))
        .collect()
}

fn run_cell(cfg: &ExperimentConfig, method: Method, cohort: &Cohort, shifted: &Cohort) -> Result<CellResult> {
    let mut cell_cfg = cfg.clone();
    cell_cfg.method = method;
    let out = train_on(&cell_cfg, cohort)?;
    if let Some(e) = out.diverged {
        return Err(e);
    }
    let name = method.name();
    let set = embed(&out.bundle, &cohort.records)?;
    let ev = evaluate(&set, &cohort.records, &cell_cfg, name)?;
    let shifted_set = embed(&out.bundle, &shifted.records)?;
    let mut table = ev.table;
    table.extend(evaluate_shifted(&ev.probes, &shifted_set, &shifted.records, name)?);
    table.push("param_count", SPLIT_IN_DOMAIN, name, out.bundle.param_count() as f64)?;
    Ok(CellResult { method, table, log: out.log, notes: ev.notes })
}

/// Runs `jobs` on up to `threads` scoped workers and returns results in job order.
fn run_ordered<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>, threads: usize) -> Vec<T> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let mut out = Vec::with_capacity(jobs.len());
    let mut jobs = jobs.into_iter();
    loop {
        let wave: Vec<_> = jobs.by_ref().take(threads).collect();
        if wave.is_empty() {
            break;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = wave.into_iter().map(|j| s.spawn(j)).collect();
            for h in handles {
                out.push(h.join().expect("grid worker panicked"));
            }
        });
    }
    out
}

/// One grid per seed (`seeds` consecutive seeds from `cfg.seed`). `flush` is
/// called with each finished seed's table, so partial results survive a
/// later failure.
pub fn run_grid(
    cfg: &ExperimentConfig,
    seeds: usize,
    threads: usize,
    flush: &mut dyn FnMut(u64, &MetricsTable) -> Result<()>,
) -> Result<GridResult> {
    cfg.validate()?;
    if seeds == 0 {
        return Err(Error::config("need at least one seed"));
    }
    let counts = parameter_counts(cfg)?;
    let spread = budget_spread(&counts.iter().map(|c| c.1).collect::<Vec<_>>());
    let mut tables = Vec::with_capacity(seeds);
    let mut all_cells = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        let seed_cfg = cfg.reseeded(cfg.seed + s);
        let cohort = generate(&seed_cfg.cohort)?;
        let shifted = generate(&apply_shift(&seed_cfg.cohort, seed_cfg.shift.clone())?)?;
        let jobs: Vec<Box<dyn FnOnce() -> Result<CellResult> + Send + '_>> = seed_cfg
            .grid_methods
            .iter()
            .map(|&m| {
                let (c, a, b) = (&seed_cfg, &cohort, &shifted);
                Box::new(move || run_cell(c, m, a, b)) as Box<dyn FnOnce() -> Result<CellResult> + Send>
            })
            .collect();
        let mut cells = Vec::new();
        let mut table = MetricsTable::new();
        let mut failure = None;
        for r in run_ordered(jobs, threads) {
            match r {
                Ok(cell) => {
                    table.extend(cell.table.clone());
                    cells.push(cell);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if failure.is_none() {
            let gaps = shift_gap(&table, &table)?;
            for (m, gap) in gaps {
                table.push("shift_gap", SPLIT_SHIFTED, &m, gap)?;
            }
            table.push("budget_spread", SPLIT_IN_DOMAIN, "all", spread)?;
        }
        flush(seed_cfg.seed, &table)?;
        if let Some(e) = failure {
            return Err(e);
        }
        tables.push(table);
        all_cells.push(cells);
    }
    let report = render_report(cfg, seeds, &counts, spread, &tables, &all_cells);
    Ok(GridResult { tables, cells: all_cells, report })
}

fn render_report(
    cfg: &ExperimentConfig,
    seeds: usize,
    counts: &[(Method, usize)],
    spread: f64,
    tables: &[MetricsTable],
    cells: &[Vec<CellResult>],
) -> String {
    let mut s = String::from("# Experiment report\n\n");
    let seed_list: Vec<String> = (0..seeds as u64).map(|i| (cfg.seed + i).to_string()).collect();
    let c = &cfg.cohort;
    let _ = writeln!(s, "- seeds: {}", seed_list.join(", "));
    let _ = writeln!(s, "- cohort: n={} p={} sites={} rho={} noise={}", c.n, c.p, c.sites, c.rho, c.noise);
    let sh = &cfg.shift;
    let _ = writeln!(
        s,
        "- shift: int_policy_delta={} obs_scale={} site_remap={:?}",
        sh.int_policy_delta, sh.obs_scale, sh.site_remap
    );
    let e = &cfg.encoder;
    let _ = writeln!(s, "- encoder: hidden={:?} d={} K={}", e.hidden, e.latent_dim, e.subspaces);
    let o = &cfg.objective;
    let _ = writeln!(
        s,
        "- objective: lambda={} mu={} orth_mode={} neighbors={}",
        o.aurora.lambda, o.aurora.mu, o.aurora.orth_mode, o.neighbors
    );
    let _ = writeln!(
        s,
        "- optimizer: {} lr={} epochs={} batch={}",
        cfg.optim.kind, cfg.optim.lr, cfg.optim.epochs, cfg.optim.batch_size
    );
    let _ = writeln!(s, "- neighbours per query: k={}\n", cfg.eval.k);

    s.push_str("## Parameter budgets\n\n| Method | Parameters |\n|---|---:|\n");
    for (m, n) in counts {
        let _ = writeln!(s, "| {m} | {n} |");
    }
    let verdict = if spread <= BUDGET_LIMIT { "within" } else { "OUTSIDE" };
    let _ = writeln!(s, "\nSpread max/min − 1 = {spread:.4}, {verdict} the {BUDGET_LIMIT:.2} limit.\n");

    s.push_str(&markdown_tables(tables));

    s.push_str("## Training\n\n| Seed | Method | Initial loss | Final loss |\n|---|---|---:|---:|\n");
    for (i, seed_cells) in cells.iter().enumerate() {
        for cell in seed_cells {
            let first = cell.log.first().map_or(f64::NAN, |r| r.total);
            let last = cell.log.last().map_or(f64::NAN, |r| r.total);
            let _ = writeln!(s, "| {} | {} | {first:.4} | {last:.4} |", cfg.seed + i as u64, cell.method);
        }
    }
    let notes: Vec<&String> = cells.iter().flatten().flat_map(|c| &c.notes).collect();
    if !notes.is_empty() {
        s.push_str("\n## Notes\n\n");
        for n in notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{CohortConfig, ShiftSpec};

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_seed(3);
        cfg.cohort = CohortConfig { n: 2500, seed: 3, ..CohortConfig::default() };
        cfg.encoder.hidden = vec![16];
        cfg.encoder.latent_dim = 8;
        cfg.optim.epochs = 1;
        cfg.eval.probe_targets = vec![crate::synthcohort::Outcome::Mortality];
        cfg
    }

    #[test]
    fn single_method_grid_has_only_its_rows() {
        let mut cfg = small();
        cfg.grid_methods = vec![Method::Mae];
        let r = run_grid(&cfg, 1, 1, &mut |_, _| Ok(())).unwrap();
        let methods = r.tables[0].methods();
        assert_eq!(methods, vec!["mae".to_string(), "all".to_string()]);
        assert!(r.report.contains("| mae |"));
        assert!(!r.report.contains("| aurora | n/a"));
    }

    #[test]
    fn grid_is_deterministic_across_threads() {
        let mut cfg = small();
        cfg.grid_methods = vec![Method::Aurora, Method::Contrastive];
        let a = run_grid(&cfg, 1, 1, &mut |_, _| Ok(())).unwrap();
        let b = run_grid(&cfg, 1, 2, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.tables[0].to_csv(), b.tables[0].to_csv());
    }

    #[test]
    fn identity_shift_gap_is_small() {
        let mut cfg = ExperimentConfig::with_seed(4);
        cfg.cohort.seed = 4;
        cfg.shift = ShiftSpec::identity(cfg.cohort.sites);
        cfg.encoder.hidden = vec![16];
        cfg.optim.epochs = 1;
        cfg.eval.probe_targets = vec![crate::synthcohort::Outcome::Mortality];
        cfg.grid_methods = vec![Method::Aurora];
        let r = run_grid(&cfg, 1, 1, &mut |_, _| Ok(())).unwrap();
        let gap = r.tables[0].get("shift_gap", SPLIT_SHIFTED, "aurora").unwrap();
        assert!(gap.abs() < 0.02, "{gap}");
    }

    #[test]
    fn default_budgets_within_limit() {
        let cfg = ExperimentConfig::with_seed(0);
        let counts = parameter_counts(&cfg).unwrap();
        assert!(budget_spread(&counts.iter().map(|c| c.1).collect::<Vec<_>>()) <= BUDGET_LIMIT);
    }
}
