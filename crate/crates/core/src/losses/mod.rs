//! Training objectives.
//!
//! Every function here builds nodes on a [`Graph`], so each loss is
//! differentiable end to end. Probabilities are row-major `batch × classes`.

mod objective;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::TauSchedule;
use crate::tensor::Tensor;

pub use objective::{
    batch_objective, cluster_loss, total_loss, BatchInputs, BatchViewProbs, ClusterLoss, LossBreakdown,
    Objective, Pinned, PinnedView,
};

/// Weight of each pseudo-base sample in the cross-branch distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    Zero,
    One,
    /// Largest main-branch base probability.
    MaxMain,
    /// Largest auxiliary base probability.
    MaxAux,
    /// Cosine to the closest main-branch base prototype.
    CosMain,
    /// Cosine to the closest auxiliary prototype.
    CosAux,
}

/// Which samples take part in distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillScope {
    PseudoBase,
    AllUnlabeled,
}

/// Which branches carry the class-wise distribution regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdrScope {
    None,
    MainOnly,
    Both,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($name:literal => $var:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($var),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $(v if *v == $var => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(s)
            }
        }
    };
}

str_enum!(UncertaintyMode, "uncertainty mode", {
    "zero" => UncertaintyMode::Zero,
    "one" => UncertaintyMode::One,
    "max_main" => UncertaintyMode::MaxMain,
    "max_aux" => UncertaintyMode::MaxAux,
    "cos_main" => UncertaintyMode::CosMain,
    "cos_aux" => UncertaintyMode::CosAux,
});

str_enum!(DistillScope, "distillation scope", {
    "pseudo_base" => DistillScope::PseudoBase,
    "all_unlabeled" => DistillScope::AllUnlabeled,
});

str_enum!(CdrScope, "cdr scope", {
    "none" => CdrScope::None,
    "main_only" => CdrScope::MainOnly,
    "both" => CdrScope::Both,
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Supervised/unsupervised balance in the clustering loss.
    pub lambda: f64,
    /// Mean-entropy regularizer weight.
    pub epsilon: f64,
    /// Distillation weight.
    pub alpha: f64,
    /// Distribution-regularizer weight.
    pub beta: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_t: TauSchedule,
    pub uncertainty: UncertaintyMode,
    pub distill_scope: DistillScope,
    pub cdr_scope: CdrScope,
    pub use_aux: bool,
    pub use_distill: bool,
    /// Permits distillation without the auxiliary loss (ablation row h).
    pub allow_distill_without_aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.35,
            epsilon: 1.0,
            alpha: 0.5,
            beta: 0.5,
            tau_c: 0.1,
            tau_s: 0.07,
            tau_t: TauSchedule::default(),
            uncertainty: UncertaintyMode::MaxAux,
            distill_scope: DistillScope::PseudoBase,
            cdr_scope: CdrScope::Both,
            use_aux: true,
            use_distill: true,
            allow_distill_without_aux: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name} must be a non-negative number, got {v}")));
            }
        }
        if self.lambda > 1.0 {
            return Err(Error::config(format!("loss.lambda must be <= 1, got {}", self.lambda)));
        }
        for (name, v) in [
            ("tau_c", self.tau_c),
            ("tau_s", self.tau_s),
            ("tau_t_start", self.tau_t.start),
            ("tau_t_end", self.tau_t.end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name} must be positive, got {v}")));
            }
        }
        if self.use_distill && !self.use_aux && !self.allow_distill_without_aux {
            return Err(Error::config(
                "loss.use_distill requires loss.use_aux (set loss.allow_distill_without_aux = true to override)",
            ));
        }
        Ok(())
    }
}

/// Ablation-grid loss configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
}

impl AblationRow {
    pub const ALL: [AblationRow; 8] = [
        AblationRow::A,
        AblationRow::B,
        AblationRow::C,
        AblationRow::D,
        AblationRow::E,
        AblationRow::F,
        AblationRow::G,
        AblationRow::H,
    ];

    pub fn label(self) -> char {
        (b'a' + self as u8) as char
    }

    /// (use_aux, use_distill, cdr_scope)
    pub fn toggles(self) -> (bool, bool, CdrScope) {
        use AblationRow::*;
        match self {
            A => (false, false, CdrScope::None),
            B => (false, false, CdrScope::MainOnly),
            C => (true, false, CdrScope::None),
            D => (true, true, CdrScope::None),
            E => (true, true, CdrScope::MainOnly),
            F => (true, true, CdrScope::Both),
            G => (true, false, CdrScope::Both),
            H => (false, true, CdrScope::MainOnly),
        }
    }

    pub fn apply(self, cfg: &LossConfig) -> LossConfig {
        let (use_aux, use_distill, cdr_scope) = self.toggles();
        LossConfig {
            use_aux,
            use_distill,
            cdr_scope,
            allow_distill_without_aux: self == AblationRow::H,
            ..cfg.clone()
        }
    }
}

impl FromStr for AblationRow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let c = s.trim().to_ascii_lowercase();
        AblationRow::ALL
            .into_iter()
            .find(|r| c.len() == 1 && c.starts_with(r.label()))
            .ok_or_else(|| Error::config(format!("unknown ablation row `{s}` (expected a..h)")))
    }
}

// ----- primitive objectives -------------------------------------------

fn same_shape(g: &Graph, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::contract(format!(
            "{what}: shape {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Per-row `−Σ_k target_k log pred_k`; 1-D inputs give a scalar.
pub fn soft_ce_rows(g: &mut Graph, target: NodeId, pred: NodeId) -> Result<NodeId> {
    same_shape(g, target, pred, "soft_ce")?;
    let lp = g.log(pred);
    let prod = g.mul(target, lp)?;
    let last = g.shape(prod).len().saturating_sub(1);
    let s = g.sum_axis(prod, last)?;
    Ok(g.neg(s))
}

/// Soft cross-entropy averaged over rows.
pub fn soft_ce(g: &mut Graph, target: NodeId, pred: NodeId) -> Result<NodeId> {
    let rows = soft_ce_rows(g, target, pred)?;
    Ok(g.mean(rows))
}

/// `½ CE(q', p) + ½ CE(q, p')`, averaged over the batch.
pub fn self_consistency_loss(g: &mut Graph, q: NodeId, q2: NodeId, p: NodeId, p2: NodeId) -> Result<NodeId> {
    same_shape(g, q, p, "self_consistency")?;
    same_shape(g, q2, p2, "self_consistency")?;
    same_shape(g, p, p2, "self_consistency")?;
    let a = soft_ce(g, q2, p)?;
    let b = soft_ce(g, q, p2)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Supervised contrastive loss result.
#[derive(Clone, Copy, Debug)]
pub struct SupConLoss {
    pub loss: NodeId,
    /// True when no labeled anchor had a same-label partner (loss is zero).
    pub no_positive_anchors: bool,
}

/// Supervised contrastive loss with anchors in `view1` and contrasts in `view2`.
///
/// Only labeled rows participate. For anchor `i`, positives are the other
/// labeled rows sharing its label, and the denominator runs over all labeled
/// rows except `i`. Anchors without positives contribute nothing.
pub fn supcon_loss(
    g: &mut Graph,
    view1: NodeId,
    view2: NodeId,
    labels: &[usize],
    labeled: &[bool],
    tau_c: f64,
) -> Result<SupConLoss> {
    same_shape(g, view1, view2, "supcon")?;
    let n = g.shape(view1)[0];
    if labels.len() != n || labeled.len() != n {
        return Err(Error::contract(format!(
            "supcon: {} labels / {} flags for batch of {n}",
            labels.len(),
            labeled.len()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| labeled[i]).collect();
    if idx.is_empty() {
        return Err(Error::contract("supcon needs at least one labeled sample"));
    }
    let m = idx.len();
    let mut weights = vec![0.0; m * m];
    let mut anchors = 0usize;
    for (a, &i) in idx.iter().enumerate() {
        let pos: Vec<usize> = (0..m).filter(|&b| b != a && labels[idx[b]] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        for b in &pos {
            weights[a * m + b] = 1.0 / pos.len() as f64;
        }
    }
    if anchors == 0 {
        let zero = g.scalar(0.0);
        return Ok(SupConLoss {
            loss: zero,
            no_positive_anchors: true,
        });
    }

    let f1 = g.select_rows(view1, &idx)?;
    let f2 = g.select_rows(view2, &idx)?;
    let f1 = g.l2_normalize(f1);
    let f2 = g.l2_normalize(f2);
    let f2t = g.transpose(f2)?;
    let sim = g.matmul(f1, f2t)?;
    let logits = g.scale(sim, 1.0 / tau_c);
    // Excludes n == i from every denominator.
    let mut diag = vec![0.0; m * m];
    for a in 0..m {
        diag[a * m + a] = -1e9;
    }
    let diag = g.constant(Tensor::new(vec![m, m], diag)?);
    let masked = g.add(logits, diag)?;
    let prob = g.softmax(masked);
    let logp = g.log(prob);
    let w = g.constant(Tensor::new(vec![m, m], weights)?);
    let weighted = g.mul(w, logp)?;
    let total = g.sum(weighted);
    let loss = g.scale(total, -1.0 / anchors as f64);
    Ok(SupConLoss {
        loss,
        no_positive_anchors: false,
    })
}

/// Entropy of the mean prediction over all rows of all inputs.
pub fn mean_entropy(g: &mut Graph, probs: &[NodeId]) -> Result<NodeId> {
    if probs.is_empty() {
        return Err(Error::contract("mean_entropy of an empty batch"));
    }
    let all = if probs.len() == 1 { probs[0] } else { g.concat(probs, 0)? };
    let shape = g.shape(all).to_vec();
    if shape.len() != 2 {
        return Err(Error::contract(format!("mean_entropy expects a matrix, got {shape:?}")));
    }
    let col = g.sum_axis(all, 0)?;
    let pbar = g.scale(col, 1.0 / shape[0] as f64);
    let lp = g.log(pbar);
    let plp = g.mul(pbar, lp)?;
    let s = g.sum(plp);
    Ok(g.neg(s))
}

/// True where the row's argmax falls in the base classes `[0, k_base)`.
pub fn pseudo_base_mask(p: &Tensor, k_base: usize) -> Vec<bool> {
    p.argmax_rows().into_iter().map(|k| k < k_base).collect()
}

/// Inputs from which [`uncertainty_weights`] are computed (values, not nodes).
pub struct UncertaintyInputs<'a> {
    pub p_aux: &'a Tensor,
    pub p_main: &'a Tensor,
    pub cos_main: &'a Tensor,
    pub cos_aux: &'a Tensor,
}

/// Per-row distillation weights; cosine modes are clamped at zero.
pub fn uncertainty_weights(mode: UncertaintyMode, inp: &UncertaintyInputs<'_>) -> Vec<f64> {
    let row_max = |t: &Tensor| -> Vec<f64> {
        t.rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    };
    let n = inp.p_aux.outer_len();
    match mode {
        UncertaintyMode::Zero => vec![0.0; n],
        UncertaintyMode::One => vec![1.0; n],
        UncertaintyMode::MaxMain => row_max(inp.p_main),
        UncertaintyMode::MaxAux => row_max(inp.p_aux),
        UncertaintyMode::CosMain => row_max(inp.cos_main).into_iter().map(|v| v.max(0.0)).collect(),
        UncertaintyMode::CosAux => row_max(inp.cos_aux).into_iter().map(|v| v.max(0.0)).collect(),
    }
}

/// `mean_{i ∈ mask} w_i · KL(p_aux_i ‖ p_main_i)` with `p_aux` detached.
///
/// Returns a zero constant when the mask selects nothing.
pub fn distill_loss(
    g: &mut Graph,
    p_aux: NodeId,
    p_main: NodeId,
    mask: &[bool],
    weights: &[f64],
) -> Result<NodeId> {
    same_shape(g, p_aux, p_main, "distill")?;
    let n = g.shape(p_aux)[0];
    if mask.len() != n || weights.len() != n {
        return Err(Error::contract(format!(
            "distill: mask {} / weights {} for batch of {n}",
            mask.len(),
            weights.len()
        )));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let teacher = g.stop_gradient(p_aux);
    let t = g.select_rows(teacher, &idx)?;
    let s = g.select_rows(p_main, &idx)?;
    let lt = g.log(t);
    let ls = g.log(s);
    let diff = g.sub(lt, ls)?;
    let prod = g.mul(t, diff)?;
    let kl = g.sum_axis(prod, 1)?;
    let w = g.constant(Tensor::vector(idx.iter().map(|&i| weights[i]).collect()));
    let wkl = g.mul(kl, w)?;
    Ok(g.mean(wkl))
}

/// Class-wise expected distributions `m` (`K × K`) with per-row definedness.
#[derive(Clone, Debug)]
pub struct ClassExpectation {
    pub m: NodeId,
    /// `false` where the class column carried zero mass; such rows are zero.
    pub defined: Vec<bool>,
}

/// `m_k = Σ_i p_i^(k) p_i / Σ_i p_i^(k)`.
pub fn class_expectation(g: &mut Graph, p: NodeId) -> Result<ClassExpectation> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 {
        return Err(Error::contract(format!("class_expectation expects a matrix, got {shape:?}")));
    }
    let k = shape[1];
    let pt = g.transpose(p)?;
    let num = g.matmul(pt, p)?;
    let mass = g.sum_axis(p, 0)?;
    let defined: Vec<bool> = g.value(mass).data().iter().map(|&v| v > 0.0).collect();
    let pad = g.constant(Tensor::new(
        vec![k],
        defined.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect(),
    )?);
    let denom = g.add(mass, pad)?;
    let denom = g.reshape(denom, &[k, 1])?;
    let m = g.div(num, denom)?;
    Ok(ClassExpectation { m, defined })
}

#[derive(Clone, Copy, Debug)]
pub struct CdrLoss {
    pub loss: NodeId,
    /// True when no class row was defined in both views (loss is zero).
    pub no_defined_rows: bool,
}

/// Mean over jointly defined classes of `1 − ⟨m_k, m'_k⟩`.
pub fn cdr_loss(g: &mut Graph, m1: &ClassExpectation, m2: &ClassExpectation) -> Result<CdrLoss> {
    same_shape(g, m1.m, m2.m, "cdr")?;
    let idx: Vec<usize> = (0..m1.defined.len())
        .filter(|&k| m1.defined[k] && m2.defined[k])
        .collect();
    if idx.is_empty() {
        return Ok(CdrLoss {
            loss: g.scalar(0.0),
            no_defined_rows: true,
        });
    }
    let prod = g.mul(m1.m, m2.m)?;
    let dots = g.sum_axis(prod, 1)?;
    let dots = g.select_rows(dots, &idx)?;
    let mean_dot = g.mean(dots);
    let one = g.scalar(1.0);
    Ok(CdrLoss {
        loss: g.sub(one, mean_dot)?,
        no_defined_rows: false,
    })
}

/// One-hot rows for `labels` over `k` classes.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!("label {y} outside {k} classes")));
        }
        data[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

#[cfg(test)]
mod tests;
