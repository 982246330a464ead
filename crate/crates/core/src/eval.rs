//! Evaluation protocol: Hungarian-matched clustering accuracy, oracle base
//! accuracy and class-wise prediction distributions.

use serde::{Deserialize, Serialize};

use crate::data::GcdDataset;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{names, prototype_probs_value, ModelState};
use crate::tensor::Tensor;

/// Rows evaluated per forward pass.
const EVAL_CHUNK: usize = 512;

/// A perfect matching of rows (clusters) to columns (classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `mapping[row] = col`, over the zero-padded square size.
    pub mapping: Vec<usize>,
    pub cost: f64,
}

fn square(cost: &Tensor) -> Result<(usize, Vec<f64>)> {
    if cost.ndim() != 2 {
        return Err(Error::contract(format!("cost must be a matrix, got {:?}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::contract("cost matrix has a non-finite entry"));
    }
    let (r, c) = (cost.shape()[0], cost.shape()[1]);
    let n = r.max(c);
    let mut a = vec![0.0; n * n];
    for i in 0..r {
        a[i * n..i * n + c].copy_from_slice(cost.row(i));
    }
    Ok((n, a))
}

/// Minimum-cost assignment of a dense `n × n` matrix by shortest augmenting
/// paths with potentials. Returns `mapping[row] = col`.
fn solve(n: usize, a: &[f64]) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root.
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; n];
    for j in 1..=n {
        mapping[p[j] - 1] = j - 1;
    }
    mapping
}

fn assignment_cost(n: usize, a: &[f64], mapping: &[usize]) -> f64 {
    mapping.iter().enumerate().map(|(i, &j)| a[i * n + j]).sum()
}

/// Optimal cost of the sub-matrix on `rows × cols`, with its mapping into `cols`.
fn sub_optimum(n: usize, a: &[f64], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let m = rows.len();
    let mut sub = Vec::with_capacity(m * m);
    for &r in rows {
        sub.extend(cols.iter().map(|&c| a[r * n + c]));
    }
    let map = solve(m, &sub);
    let cost = assignment_cost(m, &sub, &map);
    (cost, map.into_iter().map(|j| cols[j]).collect())
}

/// Minimum-cost perfect matching. Rectangular inputs are zero-padded to
/// square; among optimal matchings the lexicographically smallest mapping
/// is returned.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (n, a) = square(cost)?;
    let mut current = solve(n, &a);
    let best = assignment_cost(n, &a, &current);
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * n.max(1) as f64;

    let mut fixed = 0.0;
    let mut free: Vec<usize> = (0..n).collect();
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        for &c in free.iter().filter(|&&c| c < current[r]) {
            let cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let (sub, map) = sub_optimum(n, &a, &rest, &cols);
            if fixed + a[r * n + c] + sub <= best + tol {
                current[r] = c;
                current[r + 1..].copy_from_slice(&map);
                break;
            }
        }
        fixed += a[r * n + current[r]];
        free.retain(|&x| x != current[r]);
    }
    Ok(Assignment {
        cost: assignment_cost(n, &a, &current),
        mapping: current,
    })
}

/// Hungarian-matched accuracies under one global cluster-to-class map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAcc {
    pub all: f64,
    pub base: f64,
    pub novel: f64,
    /// `mapping[cluster] = class`.
    pub mapping: Vec<usize>,
    pub n_base: usize,
    pub n_novel: usize,
}

/// Accuracy of `pred` clusters against `gt` on the rows selected by `mask`.
///
/// Classes `[0, k_base)` are base. Subsets with no rows report 0.
pub fn cluster_acc(gt: &[usize], pred: &[usize], mask: &[bool], k_base: usize, k: usize) -> Result<ClusterAcc> {
    if gt.len() != pred.len() || gt.len() != mask.len() {
        return Err(Error::contract("cluster_acc: gt, pred and mask lengths differ"));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::contract("cluster_acc: empty evaluation set"));
    }
    let d = idx
        .iter()
        .map(|&i| gt[i].max(pred[i]) + 1)
        .max()
        .unwrap_or(0)
        .max(k);
    let mut counts = vec![0.0; d * d];
    for &i in &idx {
        counts[pred[i] * d + gt[i]] -= 1.0;
    }
    let assign = hungarian(&Tensor::new(vec![d, d], counts)?)?;
    let map = &assign.mapping;

    let (mut hit, mut hit_b, mut hit_n, mut nb, mut nn) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for &i in &idx {
        let ok = map[pred[i]] == gt[i];
        hit += ok as usize;
        if gt[i] < k_base {
            nb += 1;
            hit_b += ok as usize;
        } else {
            nn += 1;
            hit_n += ok as usize;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ClusterAcc {
        all: frac(hit, idx.len()),
        base: frac(hit_b, nb),
        novel: frac(hit_n, nn),
        mapping: assign.mapping,
        n_base: nb,
        n_novel: nn,
    })
}

/// Accuracy of the base-only prototype classifier on the rows in `mask`.
///
/// No matching: base prototype `k` is trained against label `k`.
pub fn oracle_base_acc(gt: &[usize], features: &Tensor, base_prototypes: &Tensor, mask: &[bool], tau: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::contract("oracle_base_acc: empty mask"));
    }
    if features.outer_len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::contract("oracle_base_acc: length mismatch"));
    }
    let probs = prototype_probs_value(&features.select_rows(&idx), base_prototypes, tau)?;
    let hits = probs
        .argmax_rows()
        .into_iter()
        .zip(&idx)
        .filter(|&(p, &i)| p == gt[i])
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Per-class predicted and ground-truth counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpdHistogram {
    pub predicted: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdReport {
    pub histogram: CpdHistogram,
    pub rmse_base: f64,
    pub rmse_novel: f64,
    pub predicted_novel: usize,
}

/// `sqrt(mean_k (a_k − b_k)²)`; zero for an empty class set.
pub fn count_rmse(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

/// Class-wise prediction distribution of already-mapped predictions.
pub fn cpd_rmse(mapped_pred: &[usize], gt: &[usize], k_base: usize, k_all: usize) -> Result<CpdReport> {
    if mapped_pred.len() != gt.len() {
        return Err(Error::contract("cpd_rmse: length mismatch"));
    }
    let mut predicted = vec![0; k_all];
    let mut ground_truth = vec![0; k_all];
    for (&p, &y) in mapped_pred.iter().zip(gt) {
        if p >= k_all || y >= k_all {
            return Err(Error::contract(format!("cpd_rmse: class index outside {k_all} classes")));
        }
        predicted[p] += 1;
        ground_truth[y] += 1;
    }
    let kb = k_base.min(k_all);
    Ok(CpdReport {
        rmse_base: count_rmse(&predicted[..kb], &ground_truth[..kb]),
        rmse_novel: count_rmse(&predicted[kb..], &ground_truth[kb..]),
        predicted_novel: predicted[kb..].iter().sum(),
        histogram: CpdHistogram {
            predicted,
            ground_truth,
        },
    })
}

/// One evaluation of a model on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: ClusterAcc,
    pub ob: f64,
    pub cpd: CpdReport,
    /// Supervised cross-entropy of the main head on clean labeled rows.
    pub sup_ce: f64,
}

/// Per-epoch metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub acc_all: f64,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub ob: f64,
    pub cpd_rmse_base: f64,
    pub cpd_rmse_novel: f64,
    pub predicted_novel: usize,
    pub sup_ce: f64,
    /// Training-loss components averaged over the epoch's batches.
    pub losses: LossBreakdown,
}

impl MetricsRecord {
    pub fn new(epoch: usize, report: &EvalReport, losses: LossBreakdown) -> Self {
        MetricsRecord {
            epoch,
            acc_all: report.acc.all,
            acc_base: report.acc.base,
            acc_novel: report.acc.novel,
            ob: report.ob,
            cpd_rmse_base: report.cpd.rmse_base,
            cpd_rmse_novel: report.cpd.rmse_novel,
            predicted_novel: report.cpd.predicted_novel,
            sup_ce: report.sup_ce,
            losses,
        }
    }
}

/// Checks that a model can be evaluated on a dataset.
pub fn check_compatible(model: &ModelState, ds: &GcdDataset) -> Result<()> {
    let c = &model.config;
    if c.d_in != ds.d_in() || c.k_all != ds.k_all() || c.k_base != ds.k_base() {
        return Err(Error::Compatibility(format!(
            "model (d_in {}, K {}, K_base {}) vs dataset (d_in {}, K {}, K_base {})",
            c.d_in,
            c.k_all,
            c.k_base,
            ds.d_in(),
            ds.k_all(),
            ds.k_base()
        )));
    }
    Ok(())
}

/// Main-branch CLS features for every row, computed in fixed-size chunks.
pub fn cls_features(model: &ModelState, x: &Tensor) -> Result<Tensor> {
    let n = x.outer_len();
    let mut data = Vec::with_capacity(n * model.config.d_model);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let out = model.forward(&x.select_rows(chunk))?;
        data.extend_from_slice(out.cls_feature.data());
    }
    Tensor::new(vec![n, model.config.d_model], data)
}

/// The transductive protocol: clustering metrics on the unlabeled training
/// rows, supervised CE on the labeled rows.
pub fn evaluate(model: &ModelState, ds: &GcdDataset, tau_s: f64) -> Result<EvalReport> {
    check_compatible(model, ds)?;
    let feats = cls_features(model, ds.features())?;
    let protos = model.params.tensor(names::PROTOTYPES)?;
    let probs = prototype_probs_value(&feats, protos, tau_s)?;
    let pred = probs.argmax_rows();
    let unlabeled: Vec<bool> = ds.labeled().iter().map(|&l| !l).collect();
    let k_base = ds.k_base();
    let acc = cluster_acc(ds.labels(), &pred, &unlabeled, k_base, ds.k_all())?;

    let base_mask: Vec<bool> = (0..ds.len()).map(|i| unlabeled[i] && ds.labels()[i] < k_base).collect();
    let base_protos = protos.select_rows(&(0..k_base).collect::<Vec<_>>());
    let ob = if base_mask.iter().any(|&m| m) {
        oracle_base_acc(ds.labels(), &feats, &base_protos, &base_mask, tau_s)?
    } else {
        0.0
    };

    let rows = ds.unlabeled_indices();
    let mapped: Vec<usize> = rows.iter().map(|&i| acc.mapping[pred[i]]).collect();
    let gt: Vec<usize> = rows.iter().map(|&i| ds.labels()[i]).collect();
    let cpd = cpd_rmse(&mapped, &gt, k_base, acc.mapping.len().max(ds.k_all()))?;

    let labeled: Vec<usize> = (0..ds.len()).filter(|&i| ds.labeled()[i]).collect();
    let sup_ce = if labeled.is_empty() {
        0.0
    } else {
        labeled
            .iter()
            .map(|&i| -probs.at2(i, ds.labels()[i]).max(crate::autodiff::LOG_FLOOR).ln())
            .sum::<f64>()
            / labeled.len() as f64
    };
    Ok(EvalReport { acc, ob, cpd, sup_ce })
}
