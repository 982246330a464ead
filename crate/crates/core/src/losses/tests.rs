use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients, FD_STEP, GRAD_TOLERANCE};
use crate::model::{ModelConfig, ModelNodes, ModelState};
use crate::params::ParamSet;

const LN2: f64 = std::f64::consts::LN_2;
/// Tolerance for values quoted to five decimals.
const DP5: f64 = 1e-5;

/// Plain-slice reference implementations, written without the graph.
mod oracle {
    pub fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    pub fn probs(f: &[Vec<f64>], protos: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
        f.iter()
            .map(|x| softmax(&protos.iter().map(|c| cos(x, c) / tau).collect::<Vec<_>>()))
            .collect()
    }

    pub fn ce(q: &[f64], p: &[f64]) -> f64 {
        -q.iter().zip(p).map(|(a, b)| a * b.max(1e-12).ln()).sum::<f64>()
    }

    pub fn mean_ce(q: &[Vec<f64>], p: &[Vec<f64>]) -> f64 {
        q.iter().zip(p).map(|(a, b)| ce(a, b)).sum::<f64>() / q.len() as f64
    }

    pub fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(a, b)| a * (a.max(1e-12).ln() - b.max(1e-12).ln()))
            .sum()
    }

    pub fn supcon(f1: &[Vec<f64>], f2: &[Vec<f64>], labels: &[usize], labeled: &[bool], tau: f64) -> f64 {
        let idx: Vec<usize> = (0..f1.len()).filter(|&i| labeled[i]).collect();
        let mut total = 0.0;
        let mut anchors = 0;
        for &i in &idx {
            let pos: Vec<usize> = idx.iter().copied().filter(|&q| q != i && labels[q] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = idx
                .iter()
                .filter(|&&n| n != i)
                .map(|&n| (cos(&f1[i], &f2[n]) / tau).exp())
                .sum();
            let s: f64 = pos
                .iter()
                .map(|&q| ((cos(&f1[i], &f2[q]) / tau).exp() / denom).ln())
                .sum();
            total += -s / pos.len() as f64;
        }
        if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        }
    }

    pub fn entropy_of_mean(rows: &[Vec<f64>]) -> f64 {
        let k = rows[0].len();
        let mut m = vec![0.0; k];
        for r in rows {
            for j in 0..k {
                m[j] += r[j] / rows.len() as f64;
            }
        }
        -m.iter().map(|v| v * v.max(1e-12).ln()).sum::<f64>()
    }

    /// `(m, defined)` computed row by row.
    pub fn class_expectation(p: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<bool>) {
        let k = p[0].len();
        let mut m = vec![vec![0.0; k]; k];
        let mut defined = vec![false; k];
        for c in 0..k {
            let mass: f64 = p.iter().map(|r| r[c]).sum();
            defined[c] = mass > 0.0;
            if mass > 0.0 {
                for j in 0..k {
                    m[c][j] = p.iter().map(|r| r[c] * r[j]).sum::<f64>() / mass;
                }
            }
        }
        (m, defined)
    }

    pub fn cdr(p1: &[Vec<f64>], p2: &[Vec<f64>]) -> f64 {
        let (m1, d1) = class_expectation(p1);
        let (m2, d2) = class_expectation(p2);
        let terms: Vec<f64> = (0..m1.len())
            .filter(|&k| d1[k] && d2[k])
            .map(|k| 1.0 - dot(&m1[k], &m2[k]))
            .collect();
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        }
    }

    pub fn argmax(r: &[f64]) -> usize {
        let mut best = 0;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        best
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(|r| r.to_vec()).collect()
}

fn cmat(g: &mut Graph, r: &[&[f64]]) -> NodeId {
    let v: Vec<Vec<f64>> = r.iter().map(|x| x.to_vec()).collect();
    g.constant(Tensor::from_rows(&v).unwrap())
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Vec<Vec<f64>> {
    random_matrix(rng, n, k)
        .into_iter()
        .map(|z| oracle::softmax(&z.iter().map(|v| v * scale).collect::<Vec<_>>()))
        .collect()
}

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

// ----- soft_ce / self-consistency --------------------------------------

#[test]
fn soft_ce_examples() {
    let mut g = Graph::new();
    let q = cmat(&mut g, &[&[1.0, 0.0]]);
    let p = cmat(&mut g, &[&[0.5, 0.5]]);
    let l = soft_ce(&mut g, q, p).unwrap();
    close(g.value(l).item(), 0.69315, DP5);

    let oh = cmat(&mut g, &[&[0.0, 1.0, 0.0]]);
    let l = soft_ce(&mut g, oh, oh).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let u = cmat(&mut g, &[&[0.5, 0.5]]);
    let l = soft_ce(&mut g, u, u).unwrap();
    close(g.value(l).item(), LN2, 1e-15);
}

#[test]
fn soft_ce_width_mismatch() {
    let mut g = Graph::new();
    let a = cmat(&mut g, &[&[1.0, 0.0]]);
    let b = cmat(&mut g, &[&[0.2, 0.3, 0.5]]);
    assert!(matches!(soft_ce(&mut g, a, b), Err(Error::Contract(_))));
}

#[test]
fn self_consistency_examples() {
    let mut g = Graph::new();
    let oh = cmat(&mut g, &[&[1.0, 0.0]]);
    let l = self_consistency_loss(&mut g, oh, oh, oh, oh).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let u = cmat(&mut g, &[&[0.5, 0.5]]);
    let l = self_consistency_loss(&mut g, oh, oh, u, u).unwrap();
    close(g.value(l).item(), 0.69315, DP5);
}

#[test]
fn self_consistency_view_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t: Vec<Vec<Vec<f64>>> = (0..4).map(|_| random_probs(&mut rng, 5, 4, 2.0)).collect();
    let mut g = Graph::new();
    let n: Vec<NodeId> = t.iter().map(|m| g.constant(Tensor::from_rows(m).unwrap())).collect();
    let a = self_consistency_loss(&mut g, n[0], n[1], n[2], n[3]).unwrap();
    let b = self_consistency_loss(&mut g, n[1], n[0], n[3], n[2]).unwrap();
    close(g.value(a).item(), g.value(b).item(), 1e-15);
    let want = 0.5 * oracle::mean_ce(&t[1], &t[2]) + 0.5 * oracle::mean_ce(&t[0], &t[3]);
    close(g.value(a).item(), want, 1e-12);
}

// ----- supcon ---------------------------------------------------------

#[test]
fn supcon_pair_is_zero() {
    let mut g = Graph::new();
    let f1 = cmat(&mut g, &[&[1.0, 0.2], &[0.3, -0.7]]);
    let f2 = cmat(&mut g, &[&[0.9, 0.1], &[-0.4, 0.5]]);
    let s = supcon_loss(&mut g, f1, f2, &[1, 1], &[true, true], 0.1).unwrap();
    assert!(!s.no_positive_anchors);
    close(g.value(s.loss).item(), 0.0, 1e-12);
}

#[test]
fn supcon_no_positives_flags_and_returns_zero() {
    let mut g = Graph::new();
    let f = cmat(&mut g, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
    let s = supcon_loss(&mut g, f, f, &[0, 1, 2], &[true, true, false], 0.1).unwrap();
    assert!(s.no_positive_anchors);
    assert_eq!(g.value(s.loss).item(), 0.0);
}

#[test]
fn supcon_needs_a_labeled_sample() {
    let mut g = Graph::new();
    let f = cmat(&mut g, &[&[1.0, 0.0]]);
    assert!(supcon_loss(&mut g, f, f, &[0], &[false], 0.1).is_err());
}

#[test]
fn supcon_lone_anchor_contributes_nothing() {
    // Anchor 2 (label 1) has no partner; only anchors 0 and 1 count.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f1 = random_matrix(&mut rng, 3, 4);
    let f2 = random_matrix(&mut rng, 3, 4);
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&f1).unwrap());
    let b = g.constant(Tensor::from_rows(&f2).unwrap());
    let s = supcon_loss(&mut g, a, b, &[0, 0, 1], &[true; 3], 0.1).unwrap();

    let term = |i: usize, q: usize| {
        let e = |n: usize| (oracle::cos(&f1[i], &f2[n]) / 0.1).exp();
        let denom: f64 = (0..3).filter(|&n| n != i).map(e).sum();
        -(e(q) / denom).ln()
    };
    close(g.value(s.loss).item(), 0.5 * (term(0, 1) + term(1, 0)), 1e-10);
}

#[test]
fn supcon_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        random_matrix(rng, 3, 6)
            .into_iter()
            .map(|r| {
                let n = oracle::dot(&r, &r).sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let (f1, f2) = (unit(&mut rng), unit(&mut rng));
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&f1).unwrap());
    let b = g.constant(Tensor::from_rows(&f2).unwrap());
    let s = supcon_loss(&mut g, a, b, &[0, 0, 1], &[true; 3], 0.1).unwrap();
    let want = oracle::supcon(&f1, &f2, &[0, 0, 1], &[true; 3], 0.1);
    close(g.value(s.loss).item(), want, 1e-10);
}

// ----- entropy --------------------------------------------------------

#[test]
fn mean_entropy_examples() {
    let mut g = Graph::new();
    let u = cmat(&mut g, &[&[0.25; 4], &[0.25; 4]]);
    let h = mean_entropy(&mut g, &[u]).unwrap();
    close(g.value(h).item(), 4f64.ln(), 1e-15);

    let oh = cmat(&mut g, &[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]);
    let h = mean_entropy(&mut g, &[oh, oh]).unwrap();
    assert_eq!(g.value(h).item(), 0.0);

    let a = cmat(&mut g, &[&[1.0, 0.0], &[0.5, 0.5]]);
    let h = mean_entropy(&mut g, &[a]).unwrap();
    close(g.value(h).item(), 0.56233, DP5);

    assert!(mean_entropy(&mut g, &[]).is_err());
}

// ----- pseudo-base mask -----------------------------------------------

#[test]
fn pseudo_base_mask_examples() {
    let p = Tensor::from_rows(&[
        vec![0.1, 0.6, 0.2, 0.1],
        vec![0.1, 0.2, 0.6, 0.1],
        vec![0.5, 0.0, 0.5, 0.0],
    ])
    .unwrap();
    assert_eq!(pseudo_base_mask(&p, 2), vec![true, false, true]);
}

// ----- distillation ---------------------------------------------------

fn distill_value(aux: &[&[f64]], main: &[&[f64]], mode: UncertaintyMode) -> f64 {
    let mut g = Graph::new();
    let a = cmat(&mut g, aux);
    let m = cmat(&mut g, main);
    let w = uncertainty_weights(
        mode,
        &UncertaintyInputs {
            p_aux: g.value(a),
            p_main: g.value(m),
            cos_main: g.value(m),
            cos_aux: g.value(a),
        },
    );
    let l = distill_loss(&mut g, a, m, &vec![true; aux.len()], &w).unwrap();
    g.value(l).item()
}

#[test]
fn distill_examples() {
    let same = distill_value(&[&[0.3, 0.7]], &[&[0.3, 0.7]], UncertaintyMode::MaxAux);
    assert_eq!(same, 0.0);
    close(distill_value(&[&[1.0, 0.0]], &[&[0.5, 0.5]], UncertaintyMode::MaxAux), 0.69315, DP5);
    close(distill_value(&[&[0.5, 0.5]], &[&[0.25, 0.75]], UncertaintyMode::MaxAux), 0.07192, DP5);
}

#[test]
fn distill_empty_mask_is_zero() {
    let mut g = Graph::new();
    let a = cmat(&mut g, &[&[1.0, 0.0]]);
    let m = cmat(&mut g, &[&[0.5, 0.5]]);
    let l = distill_loss(&mut g, a, m, &[false], &[1.0]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn uncertainty_modes() {
    let pa = Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap();
    let pm = Tensor::from_rows(&[vec![0.6, 0.4]]).unwrap();
    let cm = Tensor::from_rows(&[vec![-0.5, -0.2]]).unwrap();
    let ca = Tensor::from_rows(&[vec![0.3, 0.9]]).unwrap();
    let inp = UncertaintyInputs {
        p_aux: &pa,
        p_main: &pm,
        cos_main: &cm,
        cos_aux: &ca,
    };
    let w = |m| uncertainty_weights(m, &inp)[0];
    assert_eq!(w(UncertaintyMode::Zero), 0.0);
    assert_eq!(w(UncertaintyMode::One), 1.0);
    assert_eq!(w(UncertaintyMode::MaxMain), 0.6);
    assert_eq!(w(UncertaintyMode::MaxAux), 0.8);
    assert_eq!(w(UncertaintyMode::CosMain), 0.0);
    assert_eq!(w(UncertaintyMode::CosAux), 0.9);
    assert!(matches!("max".parse::<UncertaintyMode>(), Err(Error::Config(_))));
    assert_eq!("cos_aux".parse::<UncertaintyMode>().unwrap(), UncertaintyMode::CosAux);
}

#[test]
fn distill_teacher_gets_no_gradient() {
    let mut g = Graph::new();
    let za = g.param(Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.1]]).unwrap());
    let zm = g.param(Tensor::from_rows(&[vec![-0.5, 0.4], vec![0.2, 0.2]]).unwrap());
    let pa = g.softmax(za);
    let pm = g.softmax(zm);
    let l = distill_loss(&mut g, pa, pm, &[true, true], &[0.7, 0.9]).unwrap();
    let grads = g.backward(l).unwrap();
    let ga = grads.get_or_zeros(za, &[2, 2]);
    assert!(ga.data().iter().all(|v| v.to_bits() == 0));
    assert!(grads.get(zm).unwrap().max_abs() > 0.0);
}

// ----- class expectation / CDR ----------------------------------------

fn m_rows(p: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut g = Graph::new();
    let pn = cmat(&mut g, p);
    let ce = class_expectation(&mut g, pn).unwrap();
    (rows(g.value(ce.m)), ce.defined)
}

#[test]
fn class_expectation_examples() {
    let (m, _) = m_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert_eq!(m, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (m, _) = m_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
    assert_eq!(m, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    let (m, d) = m_rows(&[&[0.8, 0.2], &[0.3, 0.7]]);
    assert_eq!(d, vec![true, true]);
    for (got, want) in m.iter().flatten().zip([0.66364, 0.33636, 0.41111, 0.58889]) {
        close(*got, want, DP5);
    }
}

#[test]
fn class_expectation_flags_empty_columns() {
    let (m, d) = m_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
    assert_eq!(d, vec![true, true, false]);
    assert_eq!(m[2], vec![0.0; 3]);
}

fn cdr_value(a: &[&[f64]], b: &[&[f64]]) -> (f64, bool) {
    let mut g = Graph::new();
    let pa = cmat(&mut g, a);
    let pb = cmat(&mut g, b);
    let m1 = class_expectation(&mut g, pa).unwrap();
    let m2 = class_expectation(&mut g, pb).unwrap();
    let c = cdr_loss(&mut g, &m1, &m2).unwrap();
    (g.value(c.loss).item(), c.no_defined_rows)
}

#[test]
fn cdr_examples() {
    let oh: &[&[f64]] = &[&[1.0, 0.0], &[0.0, 1.0]];
    assert_eq!(cdr_value(oh, oh), (0.0, false));

    // Classes 0/1 each defined in both views, with orthogonal one-hot m rows.
    let mut g = Graph::new();
    let m1 = ClassExpectation {
        m: cmat(&mut g, &[&[1.0, 0.0]]),
        defined: vec![true],
    };
    let m2 = ClassExpectation {
        m: cmat(&mut g, &[&[0.0, 1.0]]),
        defined: vec![true],
    };
    let c = cdr_loss(&mut g, &m1, &m2).unwrap();
    assert_eq!(g.value(c.loss).item(), 1.0);

    let mk: &[f64] = &[0.66364, 0.33636];
    let m1 = ClassExpectation {
        m: cmat(&mut g, &[mk]),
        defined: vec![true],
    };
    let c = cdr_loss(&mut g, &m1, &m1).unwrap();
    close(g.value(c.loss).item(), 0.44644, DP5);
}

#[test]
fn cdr_without_defined_rows_warns() {
    let mut g = Graph::new();
    let m = ClassExpectation {
        m: cmat(&mut g, &[&[0.0, 0.0]]),
        defined: vec![false],
    };
    let c = cdr_loss(&mut g, &m, &m).unwrap();
    assert!(c.no_defined_rows);
    assert_eq!(g.value(c.loss).item(), 0.0);
}

#[test]
fn cdr_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random_probs(&mut rng, 7, 4, 3.0);
    let b = random_probs(&mut rng, 7, 4, 3.0);
    let ar: Vec<&[f64]> = a.iter().map(|r| r.as_slice()).collect();
    let br: Vec<&[f64]> = b.iter().map(|r| r.as_slice()).collect();
    close(cdr_value(&ar, &br).0, oracle::cdr(&a, &b), 1e-12);
}

// ----- configuration ----------------------------------------------------

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    let bad = |f: fn(&mut LossConfig)| {
        let mut c = LossConfig::default();
        f(&mut c);
        matches!(c.validate(), Err(Error::Config(_)))
    };
    assert!(bad(|c| c.lambda = 1.5));
    assert!(bad(|c| c.alpha = -0.1));
    assert!(bad(|c| c.tau_s = 0.0));
    assert!(bad(|c| {
        c.use_aux = false;
        c.use_distill = true;
    }));
    for row in AblationRow::ALL {
        assert!(row.apply(&LossConfig::default()).validate().is_ok(), "{row:?}");
        assert_eq!(row.label().to_string().parse::<AblationRow>().unwrap(), row);
    }
    assert!("z".parse::<AblationRow>().is_err());
}

// ----- composed objectives ---------------------------------------------

struct Fixture {
    state: ModelState,
    cls: [Vec<Vec<f64>>; 2],
    aux: [Vec<Vec<f64>>; 2],
    labels: Vec<usize>,
    labeled: Vec<bool>,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let cfg = ModelConfig {
        d_in: 4,
        d_model: 8,
        tokens: 2,
        heads: 2,
        k_all: 4,
        k_base: 2,
    };
    let state = ModelState::init(cfg, seed, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cls = [random_matrix(&mut rng, n, 8), random_matrix(&mut rng, n, 8)];
    let aux = [random_matrix(&mut rng, n, 8), random_matrix(&mut rng, n, 8)];
    let labels: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { i % 4 / 2 } else { 2 + i % 2 }).collect();
    let labeled: Vec<bool> = (0..n).map(|i| i % 2 == 0 && i < n - 2).collect();
    Fixture {
        state,
        cls,
        aux,
        labels,
        labeled,
    }
}

fn run_total(fx: &Fixture, cfg: &LossConfig, tau_t: f64) -> Objective {
    let mut g = Graph::new();
    let b = fx.state.params.bind(&mut g);
    let nodes = ModelNodes::new(&b).unwrap();
    let mk = |g: &mut Graph, m: &Vec<Vec<f64>>| g.constant(Tensor::from_rows(m).unwrap());
    let cls = [mk(&mut g, &fx.cls[0]), mk(&mut g, &fx.cls[1])];
    let aux = [mk(&mut g, &fx.aux[0]), mk(&mut g, &fx.aux[1])];
    total_loss(
        &mut g,
        &nodes,
        &fx.state.config,
        cfg,
        cls,
        aux,
        &fx.labels,
        &fx.labeled,
        tau_t,
        None,
    )
    .unwrap()
}

fn protos(fx: &Fixture) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let p = rows(fx.state.params.tensor(crate::model::names::PROTOTYPES).unwrap());
    let a = rows(fx.state.params.tensor(crate::model::names::AUX_PROTOTYPES).unwrap());
    (p, a)
}

/// Independent evaluation of the main-branch clustering loss.
fn oracle_cluster(fx: &Fixture, cfg: &LossConfig, tau_t: f64) -> f64 {
    let (pr, _) = protos(fx);
    let p: Vec<_> = fx.cls.iter().map(|f| oracle::probs(f, &pr, cfg.tau_s)).collect();
    let q: Vec<_> = fx.cls.iter().map(|f| oracle::probs(f, &pr, tau_t)).collect();
    oracle_sup(&p, &fx.cls, fx, cfg.tau_c) * cfg.lambda
        + (1.0 - cfg.lambda)
            * (0.5 * oracle::mean_ce(&q[1], &p[0]) + 0.5 * oracle::mean_ce(&q[0], &p[1])
                - cfg.epsilon * oracle::entropy_of_mean(&[p[0].clone(), p[1].clone()].concat()))
}

fn oracle_sup(p: &[Vec<Vec<f64>>], feats: &[Vec<Vec<f64>>; 2], fx: &Fixture, tau_c: f64) -> f64 {
    let idx: Vec<usize> = (0..fx.labels.len()).filter(|&i| fx.labeled[i]).collect();
    let ce = |pv: &Vec<Vec<f64>>| {
        idx.iter().map(|&i| -pv[i][fx.labels[i]].ln()).sum::<f64>() / idx.len() as f64
    };
    let con = 0.5
        * (oracle::supcon(&feats[0], &feats[1], &fx.labels, &fx.labeled, tau_c)
            + oracle::supcon(&feats[1], &feats[0], &fx.labels, &fx.labeled, tau_c));
    0.5 * (ce(&p[0]) + ce(&p[1])) + con
}

#[test]
fn row_a_is_cluster_loss() {
    let fx = fixture(8, 1);
    let cfg = AblationRow::A.apply(&LossConfig::default());
    let o = run_total(&fx, &cfg, 0.05);
    assert_eq!(o.breakdown.total, o.breakdown.cls);
    close(o.breakdown.cls, oracle_cluster(&fx, &cfg, 0.05), 1e-10);
}

#[test]
fn cluster_loss_weight_endpoints() {
    let fx = fixture(8, 2);
    let mut cfg = AblationRow::A.apply(&LossConfig::default());
    cfg.lambda = 1.0;
    let o = run_total(&fx, &cfg, 0.05);
    assert_eq!(o.breakdown.cls, o.breakdown.sup);
    cfg.lambda = 0.0;
    cfg.epsilon = 0.0;
    let o = run_total(&fx, &cfg, 0.05);
    assert_eq!(o.breakdown.cls, o.breakdown.self_consistency);
}

#[test]
fn zero_weights_leave_cls_plus_aux() {
    let fx = fixture(8, 3);
    let mut cfg = AblationRow::F.apply(&LossConfig::default());
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    let o = run_total(&fx, &cfg, 0.05);
    assert_eq!(o.breakdown.total, o.breakdown.cls + o.breakdown.aux);
}

#[test]
fn full_objective_matches_compositional_oracle() {
    let mut seed = 4;
    let (fx, cfg) = loop {
        let fx = fixture(8, seed);
        let cfg = AblationRow::F.apply(&LossConfig::default());
        let o = run_total(&fx, &cfg, 0.05);
        let counts: Vec<usize> = o
            .pinned
            .views
            .iter()
            .map(|v| v.pseudo_base.iter().filter(|&&m| m).count())
            .collect();
        if counts.iter().all(|&c| c >= 2 && c <= 6) {
            break (fx, cfg);
        }
        seed += 1;
    };
    let tau_t = 0.05;
    let o = run_total(&fx, &cfg, tau_t);
    let (pr, ar) = protos(&fx);
    let kb = fx.state.config.k_base;

    let p: Vec<_> = fx.cls.iter().map(|f| oracle::probs(f, &pr, cfg.tau_s)).collect();
    let pa: Vec<_> = fx.aux.iter().map(|f| oracle::probs(f, &ar, cfg.tau_s)).collect();
    let qa: Vec<_> = fx.aux.iter().map(|f| oracle::probs(f, &ar, tau_t)).collect();
    let pbm: Vec<_> = fx.cls.iter().map(|f| oracle::probs(f, &pr[..kb], cfg.tau_s)).collect();
    let masks: Vec<Vec<bool>> = p.iter().map(|pv| pv.iter().map(|r| oracle::argmax(r) < kb).collect()).collect();
    for v in 0..2 {
        assert_eq!(o.pinned.views[v].pseudo_base, masks[v], "filter soundness, view {v}");
    }

    let cls = oracle_cluster(&fx, &cfg, tau_t);
    let dis: f64 = (0..2)
        .map(|v| {
            let idx: Vec<usize> = (0..8).filter(|&i| masks[v][i]).collect();
            idx.iter()
                .map(|&i| {
                    let w = pa[v][i].iter().copied().fold(0.0, f64::max);
                    w * oracle::kl(&pa[v][i], &pbm[v][i])
                })
                .sum::<f64>()
                / idx.len() as f64
        })
        .sum::<f64>()
        / 2.0;
    let aux_sup = oracle_sup(&pa, &fx.aux, &fx, cfg.tau_c);
    let sel = |m: &Vec<Vec<f64>>, v: usize| -> Vec<Vec<f64>> {
        (0..8).filter(|&i| masks[v][i]).map(|i| m[i].clone()).collect()
    };
    let aux_self = 0.5 * (oracle::mean_ce(&sel(&qa[1], 0), &sel(&pa[0], 0)) + oracle::mean_ce(&sel(&qa[0], 1), &sel(&pa[1], 1)));
    let cdr_main = oracle::cdr(&p[0], &p[1]);
    let cdr_aux = oracle::cdr(&sel(&pa[0], 0), &sel(&pa[1], 1));
    let total = cls + cfg.alpha * dis + aux_sup + aux_self + cfg.beta * (cdr_main + cdr_aux);

    let b = &o.breakdown;
    close(b.cls, cls, 1e-10);
    close(b.distill, dis, 1e-10);
    close(b.aux_sup, aux_sup, 1e-10);
    close(b.aux_self, aux_self, 1e-10);
    close(b.cdr_main, cdr_main, 1e-10);
    close(b.cdr_aux, cdr_aux, 1e-10);
    close(b.total, total, 1e-10);
}

#[test]
fn labeled_novel_sample_is_rejected() {
    let mut fx = fixture(8, 1);
    fx.labels[0] = 3;
    let mut g = Graph::new();
    let b = fx.state.params.bind(&mut g);
    let nodes = ModelNodes::new(&b).unwrap();
    let c = g.constant(Tensor::from_rows(&fx.cls[0]).unwrap());
    let r = total_loss(
        &mut g,
        &nodes,
        &fx.state.config,
        &LossConfig::default(),
        [c, c],
        [c, c],
        &fx.labels,
        &fx.labeled,
        0.05,
        None,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn distillation_leaves_aux_prototypes_untouched() {
    // Row (h): distillation is the only consumer of the aux head.
    let fx = fixture(8, 6);
    let cfg = AblationRow::H.apply(&LossConfig::default());
    let mut g = Graph::new();
    let b = fx.state.params.bind(&mut g);
    let nodes = ModelNodes::new(&b).unwrap();
    let cls = [
        g.param(Tensor::from_rows(&fx.cls[0]).unwrap()),
        g.param(Tensor::from_rows(&fx.cls[1]).unwrap()),
    ];
    let aux = [
        g.param(Tensor::from_rows(&fx.aux[0]).unwrap()),
        g.param(Tensor::from_rows(&fx.aux[1]).unwrap()),
    ];
    let o = total_loss(&mut g, &nodes, &fx.state.config, &cfg, cls, aux, &fx.labels, &fx.labeled, 0.05, None).unwrap();
    assert!(o.breakdown.distill > 0.0);
    let grads = g.backward(o.loss).unwrap();
    let shape = g.shape(nodes.aux_prototypes).to_vec();
    for id in [nodes.aux_prototypes, aux[0], aux[1]] {
        let s = g.shape(id).to_vec();
        let gr = grads.get_or_zeros(id, &s);
        assert!(gr.data().iter().all(|v| v.to_bits() == 0), "node {id:?}");
    }
    assert_eq!(shape, vec![2, 8]);
    assert!(grads.get(nodes.prototypes).unwrap().max_abs() > 0.0);
}

// ----- gradient fidelity of each primitive --------------------------------

fn logits_param(rng: &mut ChaCha8Rng, names: &[&str], n: usize, k: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for name in names {
        p.insert(*name, Tensor::from_rows(&random_matrix(rng, n, k)).unwrap(), true).unwrap();
    }
    p
}

fn assert_grads<F>(params: &ParamSet, f: F)
where
    F: Fn(&mut Graph, &crate::params::Bindings) -> Result<NodeId>,
{
    let r = check_gradients(params, FD_STEP, f).unwrap();
    assert!(r.passes(GRAD_TOLERANCE), "max relative error {}", r.max_rel_error());
}

#[test]
fn primitive_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..3 {
        let p = logits_param(&mut rng, &["a", "b", "c", "d"], 5, 3);
        let teacher = Tensor::from_rows(&random_probs(&mut rng, 5, 3, 2.0)).unwrap();
        assert_grads(&p, |g, b| {
            let q = g.softmax(b.get("a")?);
            let pp = g.softmax(b.get("b")?);
            soft_ce(g, q, pp)
        });
        assert_grads(&p, |g, b| {
            let n: Vec<NodeId> = ["a", "b", "c", "d"].iter().map(|s| b.get(s).unwrap()).collect();
            let s: Vec<NodeId> = n.iter().map(|&x| g.softmax(x)).collect();
            self_consistency_loss(g, s[0], s[1], s[2], s[3])
        });
        assert_grads(&p, |g, b| {
            supcon_loss(g, b.get("a")?, b.get("b")?, &[0, 1, 0, 1, 2], &[true, true, true, true, false], 0.1)
                .map(|s| s.loss)
        });
        assert_grads(&p, |g, b| {
            let x = g.softmax(b.get("c")?);
            let y = g.softmax(b.get("d")?);
            mean_entropy(g, &[x, y])
        });
        assert_grads(&p, |g, b| {
            let t = g.constant(teacher.clone());
            let s = g.softmax(b.get("b")?);
            distill_loss(g, t, s, &[true, false, true, true, false], &[0.9, 0.1, 0.5, 1.0, 0.3])
        });
        assert_grads(&p, |g, b| {
            let x = g.softmax(b.get("c")?);
            let y = g.softmax(b.get("d")?);
            let m1 = class_expectation(g, x)?;
            let m2 = class_expectation(g, y)?;
            cdr_loss(g, &m1, &m2).map(|c| c.loss)
        });
    }
}

// ----- properties ---------------------------------------------------------

fn prob_batch(max_n: usize, max_k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n, 2..=max_k).prop_flat_map(|(n, k)| {
        prop::collection::vec(prop::collection::vec(-6.0..6.0f64, k), n)
            .prop_map(|z| z.iter().map(|r| oracle::softmax(r)).collect())
    })
}

fn graph_m(p: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut g = Graph::new();
    let pn = g.constant(Tensor::from_rows(p).unwrap());
    let ce = class_expectation(&mut g, pn).unwrap();
    (rows(g.value(ce.m)), ce.defined)
}

fn graph_cdr(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let pa = g.constant(Tensor::from_rows(a).unwrap());
    let pb = g.constant(Tensor::from_rows(b).unwrap());
    let m1 = class_expectation(&mut g, pa).unwrap();
    let m2 = class_expectation(&mut g, pb).unwrap();
    let c = cdr_loss(&mut g, &m1, &m2).unwrap();
    g.value(c.loss).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn class_expectation_rows_sum_to_one(p in prob_batch(16, 8)) {
        let (m, defined) = graph_m(&p);
        for (row, d) in m.iter().zip(defined) {
            if d {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn one_hot_batches_have_zero_cdr(labels in prop::collection::vec(0usize..6, 1..16)) {
        let p: Vec<Vec<f64>> = labels.iter().map(|&y| (0..6).map(|k| f64::from(u8::from(k == y))).collect()).collect();
        prop_assert!(graph_cdr(&p, &p) < 1e-12);
    }

    #[test]
    fn soft_rows_give_positive_cdr(p in prob_batch(16, 8), pick in any::<prop::sample::Index>()) {
        let i = pick.index(p.len());
        prop_assume!(p[i].iter().copied().fold(0.0, f64::max) < 1.0 - 1e-6);
        prop_assert!(graph_cdr(&p, &p) > 0.0);
    }

    #[test]
    fn cdr_terms_in_unit_interval(a in prob_batch(12, 6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_probs(&mut rng, a.len(), a[0].len(), 4.0);
        let (m1, d1) = graph_m(&a);
        let (m2, d2) = graph_m(&b);
        for k in 0..m1.len() {
            if d1[k] && d2[k] {
                let t = 1.0 - oracle::dot(&m1[k], &m2[k]);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&t), "term {t}");
            }
        }
    }

    #[test]
    fn distillation_is_non_negative(a in prob_batch(10, 5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_probs(&mut rng, a.len(), a[0].len(), 4.0);
        let mut g = Graph::new();
        let pa = g.constant(Tensor::from_rows(&a).unwrap());
        let pb = g.constant(Tensor::from_rows(&b).unwrap());
        let pself = g.constant(Tensor::from_rows(&a).unwrap());
        let w = vec![1.0; a.len()];
        let mask = vec![true; a.len()];
        let l = distill_loss(&mut g, pa, pb, &mask, &w).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
        let l0 = distill_loss(&mut g, pa, pself, &mask, &w).unwrap();
        prop_assert!(g.value(l0).item().abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_by_log_k(p in prob_batch(16, 8)) {
        let k = p[0].len();
        let mut g = Graph::new();
        let pn = g.constant(Tensor::from_rows(&p).unwrap());
        let h = mean_entropy(&mut g, &[pn]).unwrap();
        prop_assert!(g.value(h).item() <= (k as f64).ln() + 1e-12);
    }
}
