//! The complete two-view, two-branch training objective.

use serde::{Deserialize, Serialize};

use super::{
    class_expectation, cdr_loss, distill_loss, mean_entropy, one_hot, pseudo_base_mask, self_consistency_loss,
    soft_ce, supcon_loss, uncertainty_weights, CdrScope, DistillScope, LossConfig, UncertaintyInputs,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{assemble_tokens, base_slice, cosine_matrix, forward_block, ModelConfig, ModelNodes};
use crate::tensor::Tensor;

/// One mini-batch: two augmented views sharing row order, labels and flags.
#[derive(Clone, Copy, Debug)]
pub struct BatchInputs<'a> {
    pub view1: &'a Tensor,
    pub view2: &'a Tensor,
    /// Ground-truth labels; only rows flagged in `labeled` are read.
    pub labels: &'a [usize],
    pub labeled: &'a [bool],
}

/// Quantities the objective treats as constants, for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PinnedView {
    pub pseudo_base: Vec<bool>,
    /// Auxiliary base-class probabilities (the distillation teacher).
    pub p_aux: Tensor,
    pub weights: Vec<f64>,
}

/// Non-differentiable inputs of the objective, fixed across re-evaluations.
///
/// Training derives these from the current forward pass. Gradient checks
/// pin them at the unperturbed parameters so finite differences see the
/// same piecewise-constant routing as the analytic gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Pinned {
    pub views: [PinnedView; 2],
}

/// Probability nodes for both views and both branches.
#[derive(Clone, Debug)]
pub struct BatchViewProbs {
    /// Main all-class probabilities at `τ_s`.
    pub p: [NodeId; 2],
    /// Main all-class probabilities at `τ_t`.
    pub q: [NodeId; 2],
    /// Auxiliary base-class probabilities at `τ_s` / `τ_t` (when the branch is active).
    pub p_aux: Option<[NodeId; 2]>,
    pub q_aux: Option<[NodeId; 2]>,
    /// Main-branch base distribution (softmax over the base prototype slice).
    pub p_base_main: Option<[NodeId; 2]>,
    pub labels: Vec<usize>,
    pub labeled: Vec<bool>,
    pub pseudo_base: [Vec<bool>; 2],
}

/// Every component of the objective, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub sup: f64,
    pub sup_ce: f64,
    pub supcon: f64,
    pub self_consistency: f64,
    pub entropy: f64,
    pub distill: f64,
    pub aux: f64,
    pub aux_sup: f64,
    pub aux_self: f64,
    pub cdr_main: f64,
    pub cdr_aux: f64,
    /// Fraction of rows (over both views) routed to the auxiliary branch.
    pub pseudo_base_frac: f64,
}

impl LossBreakdown {
    pub fn scaled(&self, c: f64) -> Self {
        LossBreakdown {
            total: self.total * c,
            cls: self.cls * c,
            sup: self.sup * c,
            sup_ce: self.sup_ce * c,
            supcon: self.supcon * c,
            self_consistency: self.self_consistency * c,
            entropy: self.entropy * c,
            distill: self.distill * c,
            aux: self.aux * c,
            aux_sup: self.aux_sup * c,
            aux_self: self.aux_self * c,
            cdr_main: self.cdr_main * c,
            cdr_aux: self.cdr_aux * c,
            pseudo_base_frac: self.pseudo_base_frac * c,
        }
    }

    pub fn accumulate(&mut self, o: &Self) {
        self.total += o.total;
        self.cls += o.cls;
        self.sup += o.sup;
        self.sup_ce += o.sup_ce;
        self.supcon += o.supcon;
        self.self_consistency += o.self_consistency;
        self.entropy += o.entropy;
        self.distill += o.distill;
        self.aux += o.aux;
        self.aux_sup += o.aux_sup;
        self.aux_self += o.aux_self;
        self.cdr_main += o.cdr_main;
        self.cdr_aux += o.cdr_aux;
        self.pseudo_base_frac += o.pseudo_base_frac;
    }
}

/// Components of the parametric clustering loss.
#[derive(Clone, Debug)]
pub struct ClusterLoss {
    pub total: NodeId,
    pub sup: NodeId,
    pub sup_ce: NodeId,
    pub supcon: NodeId,
    pub self_consistency: NodeId,
    pub entropy: NodeId,
    pub warnings: Vec<&'static str>,
}

/// Supervised part: labeled cross-entropy over both views plus symmetric SupCon.
fn supervised(
    g: &mut Graph,
    p: [NodeId; 2],
    feats: [NodeId; 2],
    labels: &[usize],
    labeled: &[bool],
    k: usize,
    tau_c: f64,
    warn: &mut Vec<&'static str>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let idx: Vec<usize> = (0..labeled.len()).filter(|&i| labeled[i]).collect();
    if idx.is_empty() {
        let z = g.scalar(0.0);
        return Ok((z, z, z));
    }
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let target = g.constant(one_hot(&y, k)?);
    let mut ce = Vec::with_capacity(2);
    for pv in p {
        let rows = g.select_rows(pv, &idx)?;
        ce.push(soft_ce(g, target, rows)?);
    }
    let ce_sum = g.add(ce[0], ce[1])?;
    let ce = g.scale(ce_sum, 0.5);

    let a = supcon_loss(g, feats[0], feats[1], labels, labeled, tau_c)?;
    let b = supcon_loss(g, feats[1], feats[0], labels, labeled, tau_c)?;
    if a.no_positive_anchors {
        warn.push("supcon: no labeled anchor has a positive");
    }
    let con_sum = g.add(a.loss, b.loss)?;
    let con = g.scale(con_sum, 0.5);
    let sup = g.add(ce, con)?;
    Ok((sup, ce, con))
}

/// `λ L_sup + (1 − λ)(L_self − ε H(p̄))` on the main branch.
pub fn cluster_loss(
    g: &mut Graph,
    probs: &BatchViewProbs,
    cls_features: [NodeId; 2],
    cfg: &LossConfig,
) -> Result<ClusterLoss> {
    let mut warn = Vec::new();
    let k = g.shape(probs.p[0])[1];
    let (sup, sup_ce, supcon) = supervised(
        g,
        probs.p,
        cls_features,
        &probs.labels,
        &probs.labeled,
        k,
        cfg.tau_c,
        &mut warn,
    )?;
    let self_consistency = self_consistency_loss(g, probs.q[0], probs.q[1], probs.p[0], probs.p[1])?;
    let entropy = mean_entropy(g, &probs.p)?;
    let ent = g.scale(entropy, cfg.epsilon);
    let unsup = g.sub(self_consistency, ent)?;
    let a = g.scale(sup, cfg.lambda);
    let b = g.scale(unsup, 1.0 - cfg.lambda);
    let total = g.add(a, b)?;
    Ok(ClusterLoss {
        total,
        sup,
        sup_ce,
        supcon,
        self_consistency,
        entropy,
        warnings: warn,
    })
}

/// Aux-branch self-consistency: each half of the symmetric loss is restricted
/// to the rows that are pseudo-base in the view providing `p`.
fn masked_self_consistency(
    g: &mut Graph,
    p: [NodeId; 2],
    q: [NodeId; 2],
    masks: &[Vec<bool>; 2],
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(2);
    for v in 0..2 {
        let idx: Vec<usize> = (0..masks[v].len()).filter(|&i| masks[v][i]).collect();
        if idx.is_empty() {
            continue;
        }
        let pv = g.select_rows(p[v], &idx)?;
        let qo = g.select_rows(q[1 - v], &idx)?;
        terms.push(soft_ce(g, qo, pv)?);
    }
    let sum = match terms.as_slice() {
        [] => return Ok(g.scalar(0.0)),
        [a] => *a,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!(),
    };
    Ok(g.scale(sum, 0.5))
}

/// Output of [`total_loss`].
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
    /// The constants the objective was evaluated with.
    pub pinned: Pinned,
    pub warnings: Vec<&'static str>,
}

struct BranchFeatures {
    cls: [NodeId; 2],
    aux: [NodeId; 2],
}

/// Assembles the full objective from branch features.
///
/// `L = L_cls + α L_dis + L_aux + β (CDR_main + CDR_aux)`, each term gated by `cfg`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    nodes: &ModelNodes,
    model: &ModelConfig,
    cfg: &LossConfig,
    cls: [NodeId; 2],
    aux: [NodeId; 2],
    labels: &[usize],
    labeled: &[bool],
    tau_t: f64,
    pinned: Option<&Pinned>,
) -> Result<Objective> {
    cfg.validate()?;
    let feats = BranchFeatures { cls, aux };
    let n = g.shape(cls[0])[0];
    if labels.len() != n || labeled.len() != n {
        return Err(Error::contract(format!(
            "{} labels / {} flags for a batch of {n}",
            labels.len(),
            labeled.len()
        )));
    }
    if labels.iter().zip(labeled).any(|(&y, &l)| l && y >= model.k_base) {
        return Err(Error::contract("labeled sample outside the base classes"));
    }
    let mut warnings = Vec::new();

    // main branch
    let mut p = [cls[0]; 2];
    let mut q = [cls[0]; 2];
    let mut cos_main = [cls[0]; 2];
    for v in 0..2 {
        let cos = cosine_matrix(g, feats.cls[v], nodes.prototypes)?;
        let lp = g.scale(cos, 1.0 / cfg.tau_s);
        let lq = g.scale(cos, 1.0 / tau_t);
        p[v] = g.softmax(lp);
        q[v] = g.softmax(lq);
        cos_main[v] = cos;
    }

    let need_aux = cfg.use_aux || cfg.use_distill || cfg.cdr_scope == CdrScope::Both;
    let mut aux_nodes = None;
    let mut p_base_main = None;
    let mut computed: Vec<PinnedView> = Vec::with_capacity(2);
    if need_aux {
        let base = base_slice(g, nodes.prototypes, model.k_base)?;
        let mut pa = [cls[0]; 2];
        let mut qa = [cls[0]; 2];
        let mut pbm = [cls[0]; 2];
        for v in 0..2 {
            let cos_a = cosine_matrix(g, feats.aux[v], nodes.aux_prototypes)?;
            let la = g.scale(cos_a, 1.0 / cfg.tau_s);
            let lqa = g.scale(cos_a, 1.0 / tau_t);
            pa[v] = g.softmax(la);
            qa[v] = g.softmax(lqa);
            let cos_b = cosine_matrix(g, feats.cls[v], base)?;
            let lb = g.scale(cos_b, 1.0 / cfg.tau_s);
            pbm[v] = g.softmax(lb);
            let weights = uncertainty_weights(
                cfg.uncertainty,
                &UncertaintyInputs {
                    p_aux: g.value(pa[v]),
                    p_main: g.value(pbm[v]),
                    cos_main: g.value(cos_b),
                    cos_aux: g.value(cos_a),
                },
            );
            computed.push(PinnedView {
                pseudo_base: pseudo_base_mask(g.value(p[v]), model.k_base),
                p_aux: g.value(pa[v]).clone(),
                weights,
            });
        }
        aux_nodes = Some((pa, qa));
        p_base_main = Some(pbm);
    } else {
        for &pv in &p {
            let rows = g.shape(pv)[0];
            computed.push(PinnedView {
                pseudo_base: pseudo_base_mask(g.value(pv), model.k_base),
                p_aux: Tensor::zeros(&[rows, model.k_base]),
                weights: vec![0.0; rows],
            });
        }
    }
    let computed = Pinned {
        views: [computed.remove(0), computed.remove(0)],
    };
    let pin = pinned.unwrap_or(&computed);
    for v in &pin.views {
        if v.pseudo_base.len() != n || v.weights.len() != n || v.p_aux.shape() != [n, model.k_base] {
            return Err(Error::contract("pinned values do not match the batch"));
        }
    }

    let probs = BatchViewProbs {
        p,
        q,
        p_aux: aux_nodes.map(|(a, _)| a),
        q_aux: aux_nodes.map(|(_, b)| b),
        p_base_main,
        labels: labels.to_vec(),
        labeled: labeled.to_vec(),
        pseudo_base: [pin.views[0].pseudo_base.clone(), pin.views[1].pseudo_base.clone()],
    };

    let cl = cluster_loss(g, &probs, feats.cls, cfg)?;
    warnings.extend(&cl.warnings);
    let mut b = LossBreakdown {
        cls: g.value(cl.total).item(),
        sup: g.value(cl.sup).item(),
        sup_ce: g.value(cl.sup_ce).item(),
        supcon: g.value(cl.supcon).item(),
        self_consistency: g.value(cl.self_consistency).item(),
        entropy: g.value(cl.entropy).item(),
        pseudo_base_frac: probs.pseudo_base.iter().flatten().filter(|&&m| m).count() as f64 / (2 * n) as f64,
        ..Default::default()
    };
    let mut total = cl.total;

    if cfg.use_distill {
        let pbm = probs.p_base_main.expect("aux branch active");
        let mut parts = Vec::with_capacity(2);
        for v in 0..2 {
            let mask: Vec<bool> = match cfg.distill_scope {
                DistillScope::PseudoBase => probs.pseudo_base[v].clone(),
                DistillScope::AllUnlabeled => labeled.iter().map(|&l| !l).collect(),
            };
            let teacher = match pinned {
                Some(pv) => g.constant(pv.views[v].p_aux.clone()),
                None => probs.p_aux.expect("aux branch active")[v],
            };
            parts.push(distill_loss(g, teacher, pbm[v], &mask, &pin.views[v].weights)?);
        }
        let s = g.add(parts[0], parts[1])?;
        let dis = g.scale(s, 0.5);
        b.distill = g.value(dis).item();
        let w = g.scale(dis, cfg.alpha);
        total = g.add(total, w)?;
    }

    if cfg.use_aux {
        let pa = probs.p_aux.expect("aux branch active");
        let qa = probs.q_aux.expect("aux branch active");
        let (aux_sup, _, _) = supervised(
            g,
            pa,
            feats.aux,
            labels,
            labeled,
            model.k_base,
            cfg.tau_c,
            &mut warnings,
        )?;
        let aux_self = masked_self_consistency(g, pa, qa, &probs.pseudo_base)?;
        let aux = g.add(aux_sup, aux_self)?;
        b.aux_sup = g.value(aux_sup).item();
        b.aux_self = g.value(aux_self).item();
        b.aux = g.value(aux).item();
        total = g.add(total, aux)?;
    }

    if cfg.cdr_scope != CdrScope::None {
        let m1 = class_expectation(g, probs.p[0])?;
        let m2 = class_expectation(g, probs.p[1])?;
        let main = cdr_loss(g, &m1, &m2)?;
        if main.no_defined_rows {
            warnings.push("cdr(main): no defined class rows");
        }
        b.cdr_main = g.value(main.loss).item();
        let mut cdr = main.loss;
        if cfg.cdr_scope == CdrScope::Both {
            let pa = probs.p_aux.expect("aux branch active");
            let idx: [Vec<usize>; 2] = std::array::from_fn(|v| {
                (0..n).filter(|&i| probs.pseudo_base[v][i]).collect()
            });
            if idx.iter().any(|i| i.is_empty()) {
                warnings.push("cdr(aux): empty pseudo-base subset");
            } else {
                let s1 = g.select_rows(pa[0], &idx[0])?;
                let s2 = g.select_rows(pa[1], &idx[1])?;
                let a1 = class_expectation(g, s1)?;
                let a2 = class_expectation(g, s2)?;
                let aux = cdr_loss(g, &a1, &a2)?;
                if aux.no_defined_rows {
                    warnings.push("cdr(aux): no defined class rows");
                }
                b.cdr_aux = g.value(aux.loss).item();
                cdr = g.add(cdr, aux.loss)?;
            }
        }
        let w = g.scale(cdr, cfg.beta);
        total = g.add(total, w)?;
    }

    g.check_finite(total)?;
    b.total = g.value(total).item();
    Ok(Objective {
        loss: total,
        breakdown: b,
        pinned: computed,
        warnings,
    })
}

/// Forward both views through the model and build the full objective.
pub fn batch_objective(
    g: &mut Graph,
    nodes: &ModelNodes,
    model: &ModelConfig,
    cfg: &LossConfig,
    batch: BatchInputs<'_>,
    tau_t: f64,
    pinned: Option<&Pinned>,
) -> Result<Objective> {
    if batch.view1.shape() != batch.view2.shape() {
        return Err(Error::contract("views differ in shape"));
    }
    let mut cls = Vec::with_capacity(2);
    let mut aux = Vec::with_capacity(2);
    for view in [batch.view1, batch.view2] {
        let x = g.constant(view.clone());
        let tokens = assemble_tokens(g, nodes, model, x)?;
        let out = forward_block(g, nodes, model, tokens)?;
        cls.push(out.cls);
        aux.push(out.aux);
    }
    total_loss(
        g,
        nodes,
        model,
        cfg,
        [cls[0], cls[1]],
        [aux[0], aux[1]],
        batch.labels,
        batch.labeled,
        tau_t,
        pinned,
    )
}
