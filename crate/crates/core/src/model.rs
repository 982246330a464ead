//! Two-branch model: a frozen linear backbone producing feature tokens, one
//! trainable pre-norm transformer block shared by the CLS and AUX positions,
//! and cosine-prototype heads for all classes (CLS) and base classes (AUX).
//!
//! Token order inside every sequence is `[CLS, AUX, feat_1 .. feat_T]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamSet};
use crate::tensor::Tensor;

pub const CLS_POS: usize = 0;
pub const AUX_POS: usize = 1;
/// Standard deviation of the AUX and CLS token initializations.
pub const TOKEN_INIT_STD: f64 = 0.02;
pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    /// Feature tokens emitted by the backbone per sample.
    pub tokens: usize,
    pub heads: usize,
    pub k_all: usize,
    pub k_base: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.d_in == 0 || self.d_model == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.tokens == 0 {
            return bad("model.tokens must be >= 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.k_base == 0 || self.k_base >= self.k_all {
            return bad(format!(
                "need 0 < k_base < k_all, got k_base={} k_all={}",
                self.k_base, self.k_all
            ));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.tokens + 2
    }
}

/// Parameter names, in checkpoint order.
pub mod names {
    pub const BACKBONE_PROJ: &str = "backbone.proj";
    pub const BACKBONE_CLS: &str = "backbone.cls";
    pub const AUX_TOKEN: &str = "aux_token";
    pub const LN1_GAIN: &str = "block.ln1.gain";
    pub const LN1_BIAS: &str = "block.ln1.bias";
    pub const Q_W: &str = "block.attn.q.weight";
    pub const Q_B: &str = "block.attn.q.bias";
    pub const K_W: &str = "block.attn.k.weight";
    pub const V_W: &str = "block.attn.v.weight";
    pub const V_B: &str = "block.attn.v.bias";
    pub const O_W: &str = "block.attn.o.weight";
    pub const O_B: &str = "block.attn.o.bias";
    pub const LN2_GAIN: &str = "block.ln2.gain";
    pub const LN2_BIAS: &str = "block.ln2.bias";
    pub const UP_W: &str = "block.ffn.up.weight";
    pub const UP_B: &str = "block.ffn.up.bias";
    pub const DOWN_W: &str = "block.ffn.down.weight";
    pub const DOWN_B: &str = "block.ffn.down.bias";
    pub const PROTOTYPES: &str = "head.prototypes";
    pub const AUX_PROTOTYPES: &str = "aux_head.prototypes";

    pub const FROZEN: [&str; 2] = [BACKBONE_PROJ, BACKBONE_CLS];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    loop {
        let t = gaussian(rng, &[rows, cols], 1.0);
        let mut data = Vec::with_capacity(rows * cols);
        let mut ok = true;
        for r in t.rows() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            ok &= n > 1e-6;
            data.extend(r.iter().map(|v| v / n));
        }
        if ok {
            return Tensor::from_parts(vec![rows, cols], data);
        }
    }
}

impl ModelState {
    /// Seeds the frozen backbone from `backbone_seed` and every trainable
    /// parameter from `init_seed`.
    pub fn init(config: ModelConfig, backbone_seed: u64, init_seed: u64) -> Result<Self> {
        use names::*;
        config.validate()?;
        let d = config.d_model;
        let hidden = FFN_EXPANSION * d;
        let mut bb = ChaCha8Rng::seed_from_u64(backbone_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0x9e37_79b9_7f4a_7c15);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let mut p = ParamSet::new();
        p.insert(
            BACKBONE_PROJ,
            gaussian(&mut bb, &[config.d_in, config.tokens * d], fan(config.d_in)),
            false,
        )?;
        p.insert(BACKBONE_CLS, gaussian(&mut bb, &[d], TOKEN_INIT_STD), false)?;
        p.insert(AUX_TOKEN, gaussian(&mut rng, &[d], TOKEN_INIT_STD), true)?;
        p.insert(LN1_GAIN, Tensor::full(&[d], 1.0), true)?;
        p.insert(LN1_BIAS, Tensor::zeros(&[d]), true)?;
        // No key bias: it shifts every score of a query equally, so it never gets a gradient.
        for (w, b) in [(Q_W, Some(Q_B)), (K_W, None), (V_W, Some(V_B)), (O_W, Some(O_B))] {
            p.insert(w, gaussian(&mut rng, &[d, d], fan(d)), true)?;
            if let Some(b) = b {
                p.insert(b, Tensor::zeros(&[d]), true)?;
            }
        }
        p.insert(LN2_GAIN, Tensor::full(&[d], 1.0), true)?;
        p.insert(LN2_BIAS, Tensor::zeros(&[d]), true)?;
        p.insert(UP_W, gaussian(&mut rng, &[d, hidden], fan(d)), true)?;
        p.insert(UP_B, Tensor::zeros(&[hidden]), true)?;
        p.insert(DOWN_W, gaussian(&mut rng, &[hidden, d], fan(hidden)), true)?;
        p.insert(DOWN_B, Tensor::zeros(&[d]), true)?;
        p.insert(PROTOTYPES, unit_rows(&mut rng, config.k_all, d), true)?;
        p.insert(AUX_PROTOTYPES, unit_rows(&mut rng, config.k_base, d), true)?;
        Ok(ModelState { config, params: p })
    }

    /// Checks that `params` holds exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = ModelState::init(config, 0, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, r) in reference.params.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("missing parameter `{name}`")))?;
            if p.value.shape() != r.value.shape() || p.trainable != r.trainable {
                return Err(Error::Compatibility(format!(
                    "parameter `{name}`: shape {:?}/trainable {} expected {:?}/{}",
                    p.value.shape(),
                    p.trainable,
                    r.value.shape(),
                    r.trainable
                )));
            }
        }
        Ok(ModelState { config, params })
    }

    /// Value-only forward pass: both branch features for a batch of inputs.
    pub fn forward(&self, x: &Tensor) -> Result<BranchOutputs> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let nodes = ModelNodes::new(&b)?;
        let xi = g.constant(x.clone());
        let tokens = assemble_tokens(&mut g, &nodes, &self.config, xi)?;
        let out = forward_block(&mut g, &nodes, &self.config, tokens)?;
        Ok(BranchOutputs {
            cls_feature: g.value(out.cls).clone(),
            aux_feature: g.value(out.aux).clone(),
        })
    }

    /// Main-branch all-class probabilities at temperature `tau`.
    pub fn predict(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        let feats = self.forward(x)?;
        let proto = self.params.tensor(names::PROTOTYPES)?;
        prototype_probs_value(&feats.cls_feature, proto, tau)
    }
}

/// Branch features as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    pub cls_feature: Tensor,
    pub aux_feature: Tensor,
}

/// Branch features as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct BranchNodes {
    pub cls: NodeId,
    pub aux: NodeId,
}

/// Typed handles for every bound model parameter.
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    pub backbone_proj: NodeId,
    pub backbone_cls: NodeId,
    pub aux_token: NodeId,
    ln1: (NodeId, NodeId),
    q: (NodeId, NodeId),
    k: NodeId,
    v: (NodeId, NodeId),
    o: (NodeId, NodeId),
    ln2: (NodeId, NodeId),
    up: (NodeId, NodeId),
    down: (NodeId, NodeId),
    pub prototypes: NodeId,
    pub aux_prototypes: NodeId,
}

impl ModelNodes {
    pub fn new(b: &Bindings) -> Result<Self> {
        use names::*;
        let pair = |w: &str, bias: &str| -> Result<(NodeId, NodeId)> { Ok((b.get(w)?, b.get(bias)?)) };
        Ok(ModelNodes {
            backbone_proj: b.get(BACKBONE_PROJ)?,
            backbone_cls: b.get(BACKBONE_CLS)?,
            aux_token: b.get(AUX_TOKEN)?,
            ln1: pair(LN1_GAIN, LN1_BIAS)?,
            q: pair(Q_W, Q_B)?,
            k: b.get(K_W)?,
            v: pair(V_W, V_B)?,
            o: pair(O_W, O_B)?,
            ln2: pair(LN2_GAIN, LN2_BIAS)?,
            up: pair(UP_W, UP_B)?,
            down: pair(DOWN_W, DOWN_B)?,
            prototypes: b.get(PROTOTYPES)?,
            aux_prototypes: b.get(AUX_PROTOTYPES)?,
        })
    }
}

/// Builds `[CLS, AUX, feat_1 .. feat_T]` per sample: a `batch × (T+2) × d_model` node.
pub fn assemble_tokens(g: &mut Graph, m: &ModelNodes, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_in {
        return Err(Error::contract(format!(
            "input must be batch x {}, got {shape:?}",
            cfg.d_in
        )));
    }
    let batch = shape[0];
    let d = cfg.d_model;
    let flat = g.matmul(x, m.backbone_proj)?;
    let feats = g.reshape(flat, &[batch, cfg.tokens, d])?;
    let zeros = g.constant(Tensor::zeros(&[batch, 1, d]));
    let cls = g.add(zeros, m.backbone_cls)?;
    let aux = g.add(zeros, m.aux_token)?;
    g.concat(&[cls, aux, feats], 1)
}

fn affine(g: &mut Graph, x: NodeId, (w, b): (NodeId, NodeId)) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn norm(g: &mut Graph, x: NodeId, (gain, bias): (NodeId, NodeId)) -> Result<NodeId> {
    let n = g.layer_norm(x);
    let s = g.mul(n, gain)?;
    g.add(s, bias)
}

/// One pre-norm transformer block over the full sequence; returns the CLS and AUX outputs.
pub fn forward_block(g: &mut Graph, m: &ModelNodes, cfg: &ModelConfig, tokens: NodeId) -> Result<BranchNodes> {
    let shape = g.shape(tokens).to_vec();
    let (d, s) = (cfg.d_model, cfg.seq_len());
    if shape.len() != 3 || shape[1] != s || shape[2] != d {
        return Err(Error::contract(format!(
            "tokens must be batch x {s} x {d}, got {shape:?}"
        )));
    }
    let batch = shape[0];
    let dh = d / cfg.heads;
    let x = g.reshape(tokens, &[batch * s, d])?;

    let h = norm(g, x, m.ln1)?;
    let q = affine(g, h, m.q)?;
    let k = g.matmul(h, m.k)?;
    let v = affine(g, h, m.v)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for hi in 0..cfg.heads {
        let split = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
            let c = g.slice(t, 1, hi * dh, (hi + 1) * dh)?;
            g.reshape(c, &[batch, s, dh])
        };
        let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, vh)?;
        heads.push(g.reshape(ctx, &[batch * s, dh])?);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let attn_out = affine(g, ctx, m.o)?;
    let x1 = g.add(x, attn_out)?;

    let h2 = norm(g, x1, m.ln2)?;
    let up = affine(g, h2, m.up)?;
    let act = g.gelu(up);
    let down = affine(g, act, m.down)?;
    let x2 = g.add(x1, down)?;

    let seq = g.reshape(x2, &[batch, s, d])?;
    let pick = |g: &mut Graph, pos: usize| -> Result<NodeId> {
        let t = g.slice(seq, 1, pos, pos + 1)?;
        g.reshape(t, &[batch, d])
    };
    Ok(BranchNodes {
        cls: pick(g, CLS_POS)?,
        aux: pick(g, AUX_POS)?,
    })
}

fn check_nonzero_rows(t: &Tensor, what: &str) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::contract(format!("{what} must be a matrix, got {:?}", t.shape())));
    }
    for (i, r) in t.rows().enumerate() {
        if r.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Cosine similarity between every feature row and every prototype row.
pub fn cosine_matrix(g: &mut Graph, features: NodeId, prototypes: NodeId) -> Result<NodeId> {
    check_nonzero_rows(g.value(features), "feature")?;
    check_nonzero_rows(g.value(prototypes), "prototype")?;
    if g.shape(features)[1] != g.shape(prototypes)[1] {
        return Err(Error::contract(format!(
            "feature width {} vs prototype width {}",
            g.shape(features)[1],
            g.shape(prototypes)[1]
        )));
    }
    let f = g.l2_normalize(features);
    let c = g.l2_normalize(prototypes);
    let ct = g.transpose(c)?;
    g.matmul(f, ct)
}

/// `softmax(cos(f, c_k) / τ)` over the prototypes.
pub fn prototype_probs(g: &mut Graph, features: NodeId, prototypes: NodeId, tau: f64) -> Result<NodeId> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let cos = cosine_matrix(g, features, prototypes)?;
    let logits = g.scale(cos, 1.0 / tau);
    Ok(g.softmax(logits))
}

/// Prototype probabilities at the sharpening temperature `τ_t`.
pub fn sharpened_probs(g: &mut Graph, features: NodeId, prototypes: NodeId, tau_t: f64) -> Result<NodeId> {
    prototype_probs(g, features, prototypes, tau_t)
}

/// Softmax over the base prototypes only.
pub fn base_probs(g: &mut Graph, features: NodeId, base_prototypes: NodeId, tau: f64) -> Result<NodeId> {
    prototype_probs(g, features, base_prototypes, tau)
}

/// The first `k_base` rows of the all-class prototype matrix.
pub fn base_slice(g: &mut Graph, prototypes: NodeId, k_base: usize) -> Result<NodeId> {
    g.slice(prototypes, 0, 0, k_base)
}

pub fn prototype_probs_value(features: &Tensor, prototypes: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let c = g.constant(prototypes.clone());
    let p = prototype_probs(&mut g, f, c, tau)?;
    Ok(g.value(p).clone())
}

/// Linear ramp of the sharpening temperature, constant after `epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            start: 0.07,
            end: 0.04,
            epochs: 30,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 || epoch >= self.epochs {
            return self.end;
        }
        let frac = epoch as f64 / self.epochs as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// `τ_t` under the default 0.07 → 0.04 over 30 epochs ramp.
pub fn tau_t_schedule(epoch: usize) -> f64 {
    TauSchedule::default().at(epoch)
}

/// Random inputs for tests and benchmarks.
pub fn random_inputs(batch: usize, d_in: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_parts(vec![batch, d_in], data)
}
