//! Training loop and multi-seed ablation sweeps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{batches, load_dataset, mix_seed, synth_gen, GcdDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, MetricsRecord};
use crate::losses::{batch_objective, AblationRow, BatchInputs, LossBreakdown};
use crate::model::{ModelNodes, ModelState};
use crate::optim::{sgd_step, OptimizerState};
use crate::params::collect_grads;

const BACKBONE_STREAM: u64 = 0xbac0;
const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5f1e;

/// Generates or loads the dataset a config refers to.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<GcdDataset> {
    match &cfg.dataset {
        Some(p) => load_dataset(p),
        None => synth_gen(&cfg.data),
    }
}

/// Fresh model for `cfg` and data of the given shape.
pub fn init_model(cfg: &RunConfig, ds: &GcdDataset) -> Result<ModelState> {
    let mc = cfg.model_config(ds.d_in(), ds.k_all(), ds.k_base());
    let s = cfg.train.seed;
    ModelState::init(mc, mix_seed(s, BACKBONE_STREAM), mix_seed(s, INIT_STREAM))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub history: Vec<MetricsRecord>,
    pub final_report: EvalReport,
    /// Degenerate-batch warnings and how often each fired.
    pub warnings: BTreeMap<String, usize>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> &MetricsRecord {
        self.history.last().expect("at least one epoch")
    }
}

/// Trains on `ds`, calling `on_epoch` after every epoch's evaluation.
pub fn train_with<F>(cfg: &RunConfig, ds: &GcdDataset, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord),
{
    cfg.validate()?;
    let mut model = init_model(cfg, ds)?;
    let t = &cfg.train;
    let steps_per_epoch = ds.len().div_ceil(t.batch_size);
    let mut opt = OptimizerState::new(&model.params, t.lr0, t.lr_min, t.momentum, t.epochs * steps_per_epoch)?
        .with_weight_decay(t.weight_decay);
    let mut history = Vec::with_capacity(t.epochs);
    let mut warnings = BTreeMap::new();
    let mut last_report = None;

    for epoch in 0..t.epochs {
        let tau_t = cfg.loss.tau_t.at(epoch);
        let epoch_seed = mix_seed(mix_seed(t.seed, SHUFFLE_STREAM), epoch as u64);
        let mut sum = LossBreakdown::default();
        for (bi, b) in batches(ds, t.batch_size, epoch_seed, cfg.data.aug_sigma)?.iter().enumerate() {
            let ctx = |e: Error| Error::Training {
                epoch,
                batch: bi,
                source: Box::new(e),
            };
            let mut g = Graph::new();
            let bind = model.params.bind(&mut g);
            let nodes = ModelNodes::new(&bind)?;
            let input = BatchInputs {
                view1: &b.view1,
                view2: &b.view2,
                labels: &b.labels,
                labeled: &b.labeled,
            };
            let obj = batch_objective(&mut g, &nodes, &model.config, &cfg.loss, input, tau_t, None).map_err(ctx)?;
            for w in &obj.warnings {
                *warnings.entry(w.to_string()).or_insert(0) += 1;
            }
            let grads = g.backward(obj.loss).map_err(ctx)?;
            let grads = collect_grads(&model.params, &bind, &grads);
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
                return Err(ctx(Error::NumericOverflow {
                    op: "backward",
                    node: model.params.iter().position(|(n, _)| n == name).unwrap_or(0),
                }));
            }
            sgd_step(&mut opt, &mut model.params, &grads).map_err(ctx)?;
            sum.accumulate(&obj.breakdown.scaled(b.indices.len() as f64 / ds.len() as f64));
        }
        let report = evaluate(&model, ds, cfg.loss.tau_s)?;
        let rec = MetricsRecord::new(epoch, &report, sum);
        on_epoch(&rec);
        history.push(rec);
        last_report = Some(report);
    }
    Ok(TrainOutcome {
        model,
        history,
        final_report: last_report.expect("epochs >= 1"),
        warnings,
    })
}

pub fn train(cfg: &RunConfig, ds: &GcdDataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

/// `cfg` with an ablation row's toggles and both seeds set to `seed`.
pub fn ablation_config(base: &RunConfig, row: AblationRow, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.loss = row.apply(&base.loss);
    c.train.seed = seed;
    c.data.seed = seed;
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub row: AblationRow,
    pub seed: u64,
    pub metrics: MetricsRecord,
}

/// Per-row means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRowSummary {
    pub row: AblationRow,
    pub acc_all: f64,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub ob: f64,
    pub predicted_novel: f64,
    pub sup_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRowSummary>,
}

/// One expected improvement between two ablation rows, tallied per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub from: AblationRow,
    pub to: AblationRow,
    pub metric: String,
    pub mean_from: f64,
    pub mean_to: f64,
    /// Seeds where `to` beats `from` strictly.
    pub wins: usize,
    pub seeds: usize,
    /// The mean improves and at least 4 of every 5 seeds agree.
    pub holds: bool,
}

impl std::fmt::Display for DirectionCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}) -> ({}) {:<15} mean {:.4} -> {:.4}, better in {}/{} seeds: {}",
            self.from.label(),
            self.to.label(),
            self.metric,
            self.mean_from,
            self.mean_to,
            self.wins,
            self.seeds,
            if self.holds { "holds" } else { "does not hold" }
        )
    }
}

type Metric = fn(&MetricsRecord) -> f64;

/// The row pairs whose direction of change the method predicts.
pub const EXPECTED_DIRECTIONS: [(AblationRow, AblationRow, &str, Metric); 4] = [
    (AblationRow::A, AblationRow::F, "acc_all", |m| m.acc_all),
    (AblationRow::C, AblationRow::D, "ob", |m| m.ob),
    (AblationRow::D, AblationRow::E, "acc_novel", |m| m.acc_novel),
    (AblationRow::D, AblationRow::E, "predicted_novel", |m| m.predicted_novel as f64),
];

impl AblationReport {
    /// Per-seed tallies for every expected direction whose rows were run.
    pub fn directions(&self) -> Vec<DirectionCheck> {
        EXPECTED_DIRECTIONS
            .iter()
            .filter_map(|&(from, to, metric, get)| {
                let pairs: Vec<(f64, f64)> = self
                    .seeds
                    .iter()
                    .map(|&s| Some((get(self.run(from, s)?), get(self.run(to, s)?))))
                    .collect::<Option<_>>()?;
                let n = pairs.len() as f64;
                let mean_from = pairs.iter().map(|p| p.0).sum::<f64>() / n;
                let mean_to = pairs.iter().map(|p| p.1).sum::<f64>() / n;
                let wins = pairs.iter().filter(|p| p.1 > p.0).count();
                Some(DirectionCheck {
                    from,
                    to,
                    metric: metric.to_string(),
                    mean_from,
                    mean_to,
                    wins,
                    seeds: pairs.len(),
                    holds: mean_to > mean_from && 5 * wins >= 4 * pairs.len(),
                })
            })
            .collect()
    }

    pub fn run(&self, row: AblationRow, seed: u64) -> Option<&MetricsRecord> {
        self.runs
            .iter()
            .find(|r| r.row == row && r.seed == seed)
            .map(|r| &r.metrics)
    }

    /// Aligned text table of the per-row means.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<4} {:>8} {:>8} {:>8} {:>8} {:>10} {:>8}\n",
            "row", "All", "Base", "Novel", "OB", "pred_nov", "SupCE"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "({}) {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.1} {:>8.4}\n",
                r.row.label(),
                r.acc_all,
                r.acc_base,
                r.acc_novel,
                r.ob,
                r.predicted_novel,
                r.sup_ce
            ));
        }
        s
    }
}

/// Trains every `(row, seed)` pair in parallel; each job owns its data and model.
pub fn run_ablation(base: &RunConfig, rows: &[AblationRow], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() || rows.is_empty() {
        return Err(Error::config("ablation needs at least one row and one seed"));
    }
    let jobs: Vec<(AblationRow, u64)> = rows
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(row, seed)| {
            let cfg = ablation_config(base, row, seed);
            let ds = prepare_dataset(&cfg)?;
            let out = train(&cfg, &ds)?;
            Ok(AblationRun {
                row,
                seed,
                metrics: out.final_metrics().clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summaries = rows
        .iter()
        .map(|&row| {
            let ms: Vec<&MetricsRecord> = runs.iter().filter(|r| r.row == row).map(|r| &r.metrics).collect();
            let mean = |f: &dyn Fn(&MetricsRecord) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / ms.len() as f64;
            AblationRowSummary {
                row,
                acc_all: mean(&|m| m.acc_all),
                acc_base: mean(&|m| m.acc_base),
                acc_novel: mean(&|m| m.acc_novel),
                ob: mean(&|m| m.ob),
                predicted_novel: mean(&|m| m.predicted_novel as f64),
                sup_ce: mean(&|m| m.sup_ce),
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        rows: summaries,
    })
}
