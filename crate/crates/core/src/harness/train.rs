//! Training loop for all four objectives.

use std::fmt::Write as _;
use std::time::Instant;

use crate::encoder::{ema_update, encode_batch, ModelBundle};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::numcore::{Graph, OptimizerState, Rng, Tensor, Var};
use crate::objectives::{
    aurora_loss, distill_loss, infonce_loss, mae_loss, per_dimension_std, update_center,
};
use crate::relational::{build_graphs, sample_pairs, RelationGraph};
use crate::synthcohort::{feature_matrix, generate, Cohort, CohortRecord};

// RNG streams, clear of the per-record streams the cohort generator uses.
const STREAM_INIT: u64 = 1 << 48;
const STREAM_SHUFFLE: u64 = (1 << 48) + 1;
const STREAM_STEP: u64 = (1 << 48) + 2;
const STREAM_INITIAL_PASS: u64 = (1 << 48) + 3;

/// Record indices `[0, train)` and `[train, n)` for a cohort of `n` records
/// sorted by id: first 80% train, last 20% test.
pub fn split_point(n: usize) -> usize {
    n * 4 / 5
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub total: f64,
    /// Per-factor alignment terms; empty for the baselines.
    pub align: Vec<f64>,
    pub orth: f64,
    pub guard: f64,
    /// Smallest mean per-dimension std across subspaces on a fixed batch.
    pub min_subspace_std: f64,
    pub wall_ms: u128,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub bundle: ModelBundle,
    pub log: Vec<LogRow>,
    pub diverged: Option<Error>,
}

pub fn write_log_csv(log: &[LogRow], subspaces: usize) -> String {
    let mut s = String::from("epoch,total");
    for k in 0..subspaces {
        let _ = write!(s, ",align_{k}");
    }
    s.push_str(",orth,guard,min_subspace_std,wall_ms\n");
    for r in log {
        let _ = write!(s, "{},{:.9}", r.epoch, r.total);
        for k in 0..subspaces {
            let _ = write!(s, ",{:.9}", r.align.get(k).copied().unwrap_or(0.0));
        }
        let _ = writeln!(s, ",{:.9},{:.9},{:.9},{}", r.orth, r.guard, r.min_subspace_std, r.wall_ms);
    }
    s
}

/// Mean per-dimension std of each subspace component over the rows of `x`.
pub fn subspace_stds(bundle: &ModelBundle, x: &Tensor) -> Result<Vec<f64>> {
    let emb = encode_batch(bundle, x)?;
    emb.components
        .iter()
        .map(|c| {
            let sd = per_dimension_std(c)?;
            Ok(sd.iter().sum::<f64>() / sd.len() as f64)
        })
        .collect()
}

pub fn initial_bundle(cfg: &ExperimentConfig) -> Result<ModelBundle> {
    let mut rng = Rng::stream(cfg.seed, STREAM_INIT);
    let bundle = ModelBundle::init(&cfg.encoder, cfg.method.aux_head(&cfg.objective), &mut rng)?;
    if cfg.method == Method::Distill {
        bundle.with_teacher(cfg.objective.ema_rate)
    } else {
        Ok(bundle)
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    cohort: &'a Cohort,
    train: &'a [CohortRecord],
    graphs: Vec<RelationGraph>,
}

#[derive(Default)]
struct StepStats {
    total: f64,
    align: Vec<f64>,
    orth: f64,
    guard: f64,
}

struct StepGraph {
    g: Graph,
    vars: Vec<Var>,
    loss: Var,
    stats: StepStats,
    teacher_logits: Option<Tensor>,
}

fn noisy_batch(ctx: &Context, batch: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let p = ctx.cfg.cohort.p;
    let mut data = Vec::with_capacity(batch.len() * p);
    for &i in batch {
        data.extend(ctx.cohort.noise_view(&ctx.train[i], rng));
    }
    Tensor::matrix(batch.len(), p, data)
}

fn build_step(ctx: &Context, bundle: &ModelBundle, batch: &[usize], rng: &mut Rng) -> Result<StepGraph> {
    let cfg = ctx.cfg;
    let o = &cfg.objective;
    let x = feature_matrix(ctx.train, batch)?;
    let mut g = Graph::new();
    let vars = bundle.params.bind(&mut g, true);
    let mut stats = StepStats::default();
    let mut teacher_logits = None;
    let loss = match cfg.method {
        Method::Aurora => {
            let xv = g.constant(x);
            let emb = bundle.forward(&mut g, &vars, xv)?;
            let pairs = sample_pairs(&ctx.graphs, batch)?;
            let terms = aurora_loss(&mut g, &o.aurora, &emb.components, &pairs)?;
            stats.align = terms.report.align;
            stats.orth = terms.report.orth;
            stats.guard = terms.report.guard;
            terms.total
        }
        Method::Mae => mae_loss(&mut g, bundle, &vars, &x, o.mask_fraction, rng)?,
        Method::Contrastive => {
            let view = noisy_batch(ctx, batch, rng)?;
            let xv = g.constant(x);
            let a = bundle.forward(&mut g, &vars, xv)?;
            let ha = bundle.aux_forward(&mut g, &vars, a.z)?;
            let vv = g.constant(view);
            let b = bundle.forward(&mut g, &vars, vv)?;
            let hb = bundle.aux_forward(&mut g, &vars, b.z)?;
            infonce_loss(&mut g, ha, hb, o.temperature)?
        }
        Method::Distill => {
            let teacher = bundle
                .teacher
                .as_ref()
                .ok_or_else(|| Error::contract("distillation needs a teacher"))?;
            let view = noisy_batch(ctx, batch, rng)?;
            let xv = g.constant(x);
            let s = bundle.forward(&mut g, &vars, xv)?;
            let sl = bundle.aux_forward(&mut g, &vars, s.z)?;
            let tvars = teacher.params.bind(&mut g, false);
            let vv = g.constant(view);
            let t = bundle.forward(&mut g, &tvars, vv)?;
            let tl = bundle.aux_forward(&mut g, &tvars, t.z)?;
            teacher_logits = Some(g.value(tl).clone());
            distill_loss(&mut g, sl, tl, o.student_temp, o.teacher_temp, &teacher.center)?
        }
    };
    stats.total = g.scalar_value(loss)?;
    Ok(StepGraph { g, vars, loss, stats, teacher_logits })
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    // a trailing batch of one record cannot be normalized, so it is dropped
    order.chunks(size).filter(|b| b.len() >= 2)
}

#[derive(Default)]
struct EpochMeans {
    n: usize,
    total: f64,
    align: Vec<f64>,
    orth: f64,
    guard: f64,
}

impl EpochMeans {
    fn add(&mut self, s: &StepStats) {
        self.n += 1;
        self.total += s.total;
        self.orth += s.orth;
        self.guard += s.guard;
        if self.align.len() < s.align.len() {
            self.align.resize(s.align.len(), 0.0);
        }
        for (a, b) in self.align.iter_mut().zip(&s.align) {
            *a += b;
        }
    }

    fn row(&self, epoch: usize, min_std: f64, start: &Instant) -> LogRow {
        let n = self.n.max(1) as f64;
        LogRow {
            epoch,
            total: self.total / n,
            align: self.align.iter().map(|a| a / n).collect(),
            orth: self.orth / n,
            guard: self.guard / n,
            min_subspace_std: min_std,
            wall_ms: start.elapsed().as_millis(),
        }
    }
}

/// Generates the configured cohort and trains on its train split.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cohort = generate(&cfg.cohort)?;
    train_on(cfg, &cohort)
}

/// Trains `cfg.method` on the first 80% of `cohort`'s records. Bitwise
/// deterministic given `cfg` and the cohort.
pub fn train_on(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = &cohort.records[..split_point(cohort.len())];
    if train.len() < 2 {
        return Err(Error::config("training split needs at least two records"));
    }
    let graphs = if cfg.method == Method::Aurora {
        build_graphs(train, cfg.objective.neighbors)?
    } else {
        Vec::new()
    };
    let ctx = Context { cfg, cohort, train, graphs };
    let start = Instant::now();
    let mut bundle = initial_bundle(cfg)?;
    let mut optimizer = OptimizerState::new(cfg.optim.kind, cfg.optim.lr);
    let probe_rows: Vec<usize> = (0..train.len().min(cfg.optim.batch_size)).collect();
    let probe_x = feature_matrix(train, &probe_rows)?;
    let min_std = |b: &ModelBundle| -> Result<f64> {
        Ok(subspace_stds(b, &probe_x)?.into_iter().fold(f64::INFINITY, f64::min))
    };

    // epoch 0: the objective at initialization, over every batch in id order
    let order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Rng::stream(cfg.seed, STREAM_INITIAL_PASS);
    let mut means = EpochMeans::default();
    for batch in batches(&order, cfg.optim.batch_size) {
        match build_step(&ctx, &bundle, batch, &mut rng) {
            Ok(s) => means.add(&s.stats),
            Err(e @ Error::Numeric(_)) => {
                return Ok(TrainOutcome { bundle, log: Vec::new(), diverged: Some(e) });
            }
            Err(e) => return Err(e),
        }
    }
    let mut log = vec![means.row(0, min_std(&bundle)?, &start)];

    let mut shuffle = Rng::stream(cfg.seed, STREAM_SHUFFLE);
    let mut step_rng = Rng::stream(cfg.seed, STREAM_STEP);
    let mut order = order;
    for epoch in 1..=cfg.optim.epochs {
        shuffle.shuffle(&mut order);
        let mut means = EpochMeans::default();
        for batch in batches(&order, cfg.optim.batch_size) {
            let attempt = (|| -> Result<(StepStats, ModelBundle)> {
                let step = build_step(&ctx, &bundle, batch, &mut step_rng)?;
                let grads = step.g.backward(step.loss)?;
                let grads: Vec<Tensor> = step
                    .vars
                    .iter()
                    .map(|&v| grads.get(v).cloned().ok_or_else(|| Error::contract("missing gradient")))
                    .collect::<Result<_>>()?;
                let mut next = bundle.clone();
                let names = next.params.names().to_vec();
                optimizer.apply(next.params.tensors_mut(), &grads, &names)?;
                if let (Some(teacher), Some(tl)) = (next.teacher.as_mut(), step.teacher_logits.as_ref()) {
                    update_center(&mut teacher.center, tl, cfg.objective.center_momentum)?;
                    ema_update(&mut teacher.params, &next.params, teacher.ema_rate)?;
                }
                if next.params.tensors().iter().any(|t| !t.is_finite()) {
                    return Err(Error::numeric("parameters became non-finite"));
                }
                Ok((step.stats, next))
            })();
            match attempt {
                Ok((stats, next)) => {
                    means.add(&stats);
                    bundle = next;
                }
                Err(e @ Error::Numeric(_)) => {
                    return Ok(TrainOutcome {
                        bundle,
                        log,
                        diverged: Some(Error::numeric(format!("epoch {epoch}: {e}"))),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        log.push(means.row(epoch, min_std(&bundle)?, &start));
    }
    Ok(TrainOutcome { bundle, log, diverged: None })
}
