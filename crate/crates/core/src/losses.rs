//! Loss terms of the composite prototype objective.
//!
//! * cross-entropy over the prototype softmax,
//! * DPP: cross-entropy plus a `λ_DPP/2 · ‖f − c_y‖²` pull towards the true prototype,
//! * DNP: `−(1/M) Σ_j Σ_i sqrt|c_j,i − c_neg(j),i|`, repelling each prototype from its nearest rival,
//! * DFA: `KL(p(x) ‖ p(x̃))` between clean and adversarial predictions,
//!
//! combined per batch as
//! `λ_DNP·DNP + mean_i [DPP(x_i) + DPP(x̃_i) + λ_DFA·DFA(x_i, x̃_i)] / 2`.
//!
//! The free functions evaluate the terms directly on numbers. [`LossGraph`]
//! builds the same objective on the autodiff graph for training and attacks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    class_probabilities, extract_features, logits_node, ArchitectureConfig, ModelParams, PrototypeBank, PROTOTYPES,
};
use crate::tensor::{Evaluation, Graph, NodeId, Tensor, SQRT_ABS_EPS};

pub const X_CLEAN: &str = "x_clean";
pub const X_ADV: &str = "x_adv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dpp: f64,
    pub dnp: f64,
    pub dfa: f64,
    /// Prototype sphere radius; also the inverse softmax temperature.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dpp: 0.1, dnp: 0.1, dfa: 2.0, alpha: 40.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dpp", self.dpp), ("dnp", self.dnp), ("dfa", self.dfa)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha = {} must be positive", self.alpha)));
        }
        Ok(())
    }
}

/// Batch-mean loss parts. `pull_*` is the unweighted `mean ½‖f − c_y‖²`,
/// `dnp` and `dfa` are unweighted as well; [`Objective::total`] applies the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_clean: f64,
    pub ce_adv: f64,
    pub pull_clean: f64,
    pub pull_adv: f64,
    pub dnp: f64,
    pub dfa: f64,
    pub total: f64,
}

/// Weights of the composite objective together with the per-branch scale.
///
/// `total = λ_DNP·dnp + w_clean·(ce_clean + λ_DPP·pull_clean)
///        + w_adv·(ce_adv + λ_DPP·pull_adv) + (λ_DFA/2)·dfa`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub clean_weight: f64,
    pub adv_weight: f64,
}

impl Objective {
    pub fn adv_dpnp(weights: LossWeights) -> Self {
        Self { weights, clean_weight: 0.5, adv_weight: 0.5 }
    }

    /// Plain adversarial training: cross-entropy on adversarial inputs only.
    pub fn at_baseline(alpha: f64) -> Self {
        Self { weights: LossWeights { dpp: 0.0, dnp: 0.0, dfa: 0.0, alpha }, clean_weight: 0.0, adv_weight: 1.0 }
    }

    /// Clean and adversarial cross-entropy plus the KL consistency term.
    pub fn trades_like(weights: LossWeights) -> Self {
        Self::adv_dpnp(LossWeights { dpp: 0.0, dnp: 0.0, ..weights })
    }

    pub fn total(&self, b: &LossBreakdown) -> f64 {
        let w = &self.weights;
        w.dnp * b.dnp
            + self.clean_weight * (b.ce_clean + w.dpp * b.pull_clean)
            + self.adv_weight * (b.ce_adv + w.dpp * b.pull_adv)
            + 0.5 * w.dfa * b.dfa
    }
}

/// `−log p_label`.
pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs
        .get(label)
        .ok_or_else(|| Error::Config(format!("label {label} out of range for {} classes", probs.len())))?;
    if !(p > 0.0) {
        return Err(Error::NonFinite(format!("probability of label {label} is {p}")));
    }
    Ok(-p.ln())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cross-entropy plus `λ_DPP/2 · ‖f − c_label‖²` for a single feature row.
pub fn dpp_loss(features: &[f64], label: usize, bank: &PrototypeBank, lambda_dpp: f64) -> Result<f64> {
    if label >= bank.num_classes() {
        return Err(Error::Config(format!("label {label} out of range")));
    }
    let f = Tensor::new(vec![1, features.len()], features.to_vec())?;
    let p = class_probabilities(&f, bank)?;
    Ok(ce_loss(p.row(0), label)? + 0.5 * lambda_dpp * sq_dist(features, bank.prototype(label)))
}

/// For every class, the index of the closest other prototype (ℓ2); ties go to the smaller index.
pub fn nearest_negatives(bank: &PrototypeBank) -> Vec<usize> {
    let m = bank.num_classes();
    (0..m)
        .map(|j| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for k in (0..m).filter(|&k| k != j) {
                let d = sq_dist(bank.prototype(j), bank.prototype(k));
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// `−(1/M) Σ_j Σ_i sqrt(|c_j,i − c_neg(j),i| + ε)`.
pub fn dnp_loss(bank: &PrototypeBank) -> f64 {
    let neg = nearest_negatives(bank);
    let m = bank.num_classes();
    let s: f64 = (0..m)
        .map(|j| {
            bank.prototype(j)
                .iter()
                .zip(bank.prototype(neg[j]))
                .map(|(a, b)| ((a - b).abs() + SQRT_ABS_EPS).sqrt())
                .sum::<f64>()
        })
        .sum();
    -s / m as f64
}

/// `KL(p_clean ‖ p_adv)`.
pub fn dfa_loss(p_clean: &[f64], p_adv: &[f64]) -> Result<f64> {
    if p_clean.len() != p_adv.len() {
        return Err(Error::Config("probability rows differ in length".into()));
    }
    let mut kl = 0.0;
    for (j, (&p, &q)) in p_clean.iter().zip(p_adv).enumerate() {
        if !(q > 0.0) {
            return Err(Error::NonFinite(format!("adversarial probability {j} is {q}")));
        }
        if p > 0.0 {
            kl += p * (p / q).ln();
        }
    }
    Ok(kl)
}

/// Composite loss of a clean/adversarial batch pair, evaluated directly.
pub fn composite_loss(
    clean: &Tensor,
    adv: &Tensor,
    labels: &[usize],
    params: &ModelParams,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    breakdown_direct(clean, adv, labels, params, &Objective::adv_dpnp(*weights))
}

/// [`composite_loss`] for an arbitrary branch weighting.
pub fn breakdown_direct(
    clean: &Tensor,
    adv: &Tensor,
    labels: &[usize],
    params: &ModelParams,
    objective: &Objective,
) -> Result<LossBreakdown> {
    objective.weights.validate()?;
    if clean.shape() != adv.shape() || clean.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Config(format!(
            "clean {:?}, adversarial {:?} and {} labels are not aligned",
            clean.shape(),
            adv.shape(),
            labels.len()
        )));
    }
    let bank = params.bank();
    let n = labels.len() as f64;
    let (fc, fa) = (extract_features(params, clean)?, extract_features(params, adv)?);
    let (pc, pa) = (class_probabilities(&fc, bank)?, class_probabilities(&fa, bank)?);
    let mut b = LossBreakdown { dnp: dnp_loss(bank), ..Default::default() };
    for (i, &y) in labels.iter().enumerate() {
        b.ce_clean += ce_loss(pc.row(i), y)? / n;
        b.ce_adv += ce_loss(pa.row(i), y)? / n;
        b.pull_clean += 0.5 * sq_dist(fc.row(i), bank.prototype(y)) / n;
        b.pull_adv += 0.5 * sq_dist(fa.row(i), bank.prototype(y)) / n;
        b.dfa += dfa_loss(pc.row(i), pa.row(i))? / n;
    }
    b.total = objective.total(&b);
    Ok(b)
}

/// How gradients reach the prototypes from the adversarial branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrototypeFlow {
    /// Adversarial-branch logits see the prototypes through a gradient barrier.
    pub lock_adversarial: bool,
    /// Let the DFA term reach the prototypes through `p(x̃)` even when locked.
    pub dfa_through_adversarial: bool,
    /// Every clean-branch use of the prototypes (DNP included) goes through a barrier.
    pub lock_clean: bool,
}

impl PrototypeFlow {
    pub const LOCKED: Self = Self { lock_adversarial: true, dfa_through_adversarial: false, lock_clean: false };
    pub const OPEN: Self = Self { lock_adversarial: false, dfa_through_adversarial: false, lock_clean: false };
}

/// The composite objective as a differentiable graph over one batch.
///
/// Graph inputs: every extractor tensor, [`PROTOTYPES`], [`X_CLEAN`], [`X_ADV`].
pub struct LossGraph {
    pub graph: Graph,
    pub total: NodeId,
    /// `[B]` adversarial-side objective per sample (what an adaptive attack maximises).
    pub per_sample_adv: NodeId,
    pub probs_clean: NodeId,
    pub probs_adv: NodeId,
    parts: [NodeId; 6],
}

impl LossGraph {
    /// `labels` fixes the batch; `negatives` is the nearest-rival assignment
    /// (see [`nearest_negatives`]) held constant for this batch.
    pub fn build(
        arch: &ArchitectureConfig,
        labels: &[usize],
        negatives: &[usize],
        objective: &Objective,
        flow: PrototypeFlow,
    ) -> Self {
        let w = objective.weights;
        let batch = labels.len();
        let inv_b = 1.0 / batch as f64;
        let mut g = Graph::new();
        let raw_protos = g.input(PROTOTYPES);
        let protos = if flow.lock_clean { g.detach(raw_protos) } else { raw_protos };
        let adv_protos = if flow.lock_adversarial { g.detach(raw_protos) } else { raw_protos };

        let xc = g.input(X_CLEAN);
        let xa = g.input(X_ADV);
        let fc = arch.build_features(&mut g, xc, batch);
        let fa = arch.build_features(&mut g, xa, batch);

        let lc = logits_node(&mut g, fc, protos, w.alpha);
        let la = logits_node(&mut g, fa, adv_protos, w.alpha);
        let lsc = g.log_softmax(lc);
        let lsa = g.log_softmax(la);
        let probs_clean = g.exp(lsc);
        let probs_adv = g.exp(lsa);

        // per-sample cross-entropy and ½‖f − c_y‖²
        let branch = |g: &mut Graph, ls: NodeId, f: NodeId, p: NodeId| {
            let pick = g.pick(ls, labels.to_vec());
            let ce = g.scale(pick, -1.0);
            let cy = g.gather_rows(p, labels.to_vec());
            let diff = g.sub(f, cy);
            let sq = g.square(diff);
            let rs = g.row_sum(sq);
            let pull = g.scale(rs, 0.5);
            (ce, pull)
        };
        let (ce_c, pull_c) = branch(&mut g, lsc, fc, protos);
        let (ce_a, pull_a) = branch(&mut g, lsa, fa, adv_protos);

        let lsa_dfa = if flow.lock_adversarial && flow.dfa_through_adversarial {
            let la_open = logits_node(&mut g, fa, raw_protos, w.alpha);
            g.log_softmax(la_open)
        } else {
            lsa
        };
        let gap = g.sub(lsc, lsa_dfa);
        let weighted = g.mul(probs_clean, gap);
        let kl = g.row_sum(weighted);

        let pneg = g.gather_rows(protos, negatives.to_vec());
        let pdiff = g.sub(protos, pneg);
        let roots = g.sqrt_abs(pdiff);
        let root_sum = g.sum(roots);
        let dnp = g.scale(root_sum, -1.0 / negatives.len() as f64);

        let mean = |g: &mut Graph, v: NodeId, label: &str| {
            let s = g.sum(v);
            let m = g.scale(s, inv_b);
            g.set_label(m, label);
            m
        };
        let parts = [
            mean(&mut g, ce_c, "ce_clean"),
            mean(&mut g, ce_a, "ce_adv"),
            mean(&mut g, pull_c, "pull_clean"),
            mean(&mut g, pull_a, "pull_adv"),
            dnp,
            mean(&mut g, kl, "dfa"),
        ];
        g.set_label(dnp, "dnp");

        // adversarial side per sample: w_adv·(ce + λ_DPP·pull) + (λ_DFA/2)·kl
        let pa_scaled = g.scale(pull_a, w.dpp);
        let dpp_a = g.add(ce_a, pa_scaled);
        let dpp_a = g.scale(dpp_a, objective.adv_weight);
        let kl_scaled = g.scale(kl, 0.5 * w.dfa);
        let per_sample_adv = g.add(dpp_a, kl_scaled);

        let pc_scaled = g.scale(pull_c, w.dpp);
        let dpp_c = g.add(ce_c, pc_scaled);
        let dpp_c = g.scale(dpp_c, objective.clean_weight);
        let per_sample = g.add(dpp_c, per_sample_adv);
        let sample_total = g.sum(per_sample);
        let sample_mean = g.scale(sample_total, inv_b);
        let dnp_w = g.scale(dnp, w.dnp);
        let total = g.add(sample_mean, dnp_w);
        g.set_label(total, "total");

        Self { graph: g, total, per_sample_adv, probs_clean, probs_adv, parts }
    }

    pub fn breakdown(&self, eval: &Evaluation) -> LossBreakdown {
        let v = |i: usize| eval.value(self.parts[i]).item();
        LossBreakdown {
            ce_clean: v(0),
            ce_adv: v(1),
            pull_clean: v(2),
            pull_adv: v(3),
            dnp: v(4),
            dfa: v(5),
            total: eval.value(self.total).item(),
        }
    }
}

/// Per-sample cross-entropy of the prototype head on inputs bound at [`X_ADV`].
pub struct CeGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub per_sample: NodeId,
    pub probs: NodeId,
}

impl CeGraph {
    pub fn build(arch: &ArchitectureConfig, labels: &[usize], alpha: f64) -> Self {
        let mut g = Graph::new();
        let protos = g.input(PROTOTYPES);
        let x = g.input(X_ADV);
        let f = arch.build_features(&mut g, x, labels.len());
        let l = logits_node(&mut g, f, protos, alpha);
        let ls = g.log_softmax(l);
        let probs = g.exp(ls);
        let pick = g.pick(ls, labels.to_vec());
        let per_sample = g.scale(pick, -1.0);
        let total = g.sum(per_sample);
        Self { graph: g, total, per_sample, probs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ArchitectureConfig};
    use crate::tensor::{forward, Bindings};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank2() -> PrototypeBank {
        PrototypeBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap()
    }

    #[test]
    fn ce_examples() {
        assert!((ce_loss(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(ce_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((ce_loss(&[0.7311, 0.2689], 0).unwrap() - 0.3133).abs() < 1e-4);
        assert!(ce_loss(&[0.0, 1.0], 0).is_err());
        assert!(ce_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn dpp_examples() {
        let b = bank2();
        let e = std::f64::consts::E;
        let ce = -(e / (e + 1.0)).ln();
        assert!((dpp_loss(&[1.0, 0.0], 0, &b, 0.1).unwrap() - ce).abs() < 1e-15);
        assert!((dpp_loss(&[1.0, 0.0], 0, &b, 0.1).unwrap() - 0.3133).abs() < 1e-4);
        let at_origin = dpp_loss(&[0.0, 0.0], 0, &b, 0.1).unwrap();
        assert!((at_origin - (2f64.ln() + 0.05)).abs() < 1e-15);
        assert!((at_origin - 0.7431).abs() < 1e-4);
        assert_eq!(dpp_loss(&[0.3, -0.2], 1, &b, 0.0).unwrap(), dpp_loss(&[0.3, -0.2], 1, &b, 0.0).unwrap());
        let p = class_probabilities(&Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap(), &b).unwrap();
        assert_eq!(dpp_loss(&[0.3, -0.2], 1, &b, 0.0).unwrap(), ce_loss(p.row(0), 1).unwrap());
    }

    #[test]
    fn nearest_negative_examples() {
        let b = PrototypeBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 1.0).unwrap();
        assert_eq!(nearest_negatives(&b), vec![1, 0, 1]);
    }

    #[test]
    fn nearest_negatives_match_pairwise_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = rng.random_range(2..=8);
            let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let b = PrototypeBank::from_rows(&rows, 1.0).unwrap();
            let neg = nearest_negatives(&b);
            for j in 0..m {
                let dist = |k: usize| -> f64 {
                    rows[j].iter().zip(&rows[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                };
                let mut all: Vec<(f64, usize)> = (0..m).filter(|&k| k != j).map(|k| (dist(k), k)).collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(neg[j], all[0].1);
            }
        }
    }

    #[test]
    fn dnp_examples() {
        let expected = -2.0 * (1.0 + SQRT_ABS_EPS).sqrt();
        assert!((dnp_loss(&bank2()) - expected).abs() < 1e-15);
        assert!((dnp_loss(&bank2()) + 2.0).abs() < 1e-5);
        let same = PrototypeBank::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]], 1.0).unwrap();
        assert!((dnp_loss(&same) + 2.0 * SQRT_ABS_EPS.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dnp_matches_scalar_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let m = rng.random_range(2..=6);
            let d = rng.random_range(2..=5);
            let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let b = PrototypeBank::from_rows(&rows, 1.0).unwrap();
            let mut total = 0.0;
            for j in 0..m {
                let mut best = (f64::INFINITY, 0);
                for k in 0..m {
                    if k == j {
                        continue;
                    }
                    let dd: f64 = (0..d).map(|i| (rows[j][i] - rows[k][i]).powi(2)).sum();
                    if dd < best.0 {
                        best = (dd, k);
                    }
                }
                for i in 0..d {
                    total += ((rows[j][i] - rows[best.1][i]).abs() + 1e-12).sqrt();
                }
            }
            assert!((dnp_loss(&b) + total / m as f64).abs() <= 1e-9);
        }
    }

    #[test]
    fn dfa_examples() {
        assert_eq!(dfa_loss(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let kl = dfa_loss(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((kl - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((kl - 0.1438).abs() < 1e-4);
        assert!(dfa_loss(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    fn toy_params(seed: u64, alpha: f64) -> ModelParams {
        init_model(&ArchitectureConfig::mlp(3, vec![5], 2), 3, alpha, seed).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn all_regularisers_off_gives_mean_ce() {
        let p = toy_params(3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_batch(&mut rng, 4, 3);
        let y = [0, 1, 2, 1];
        let w = LossWeights { dpp: 0.0, dnp: 0.0, dfa: 0.0, alpha: 2.0 };
        let b = composite_loss(&x, &x, &y, &p, &w).unwrap();
        assert!((b.total - b.ce_clean).abs() < 1e-15);
        let with = composite_loss(&x, &x, &y, &p, &LossWeights { alpha: 2.0, ..Default::default() }).unwrap();
        assert_eq!(with.dfa, 0.0);
        assert_eq!(with.ce_clean, with.ce_adv);
        assert_eq!(with.pull_clean, with.pull_adv);
    }

    /// Hand-built 2-sample, 2-class case evaluated straight from the definitions.
    #[test]
    fn composite_matches_spreadsheet_recomputation() {
        let arch = ArchitectureConfig::mlp(2, vec![], 2);
        let ext = vec![
            ("fc0.weight".to_string(), Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.25, 2.0]).unwrap()),
            ("fc0.bias".to_string(), Tensor::new(vec![2], vec![0.1, -0.2]).unwrap()),
        ];
        let bank = PrototypeBank::from_rows(&[vec![0.6, 0.8], vec![-1.0, 0.0]], 1.0).unwrap();
        let p = ModelParams::from_parts(arch, ext, bank).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.4], vec![0.9, 0.1]]).unwrap();
        let xa = Tensor::from_rows(&[vec![0.3, 0.3], vec![0.8, 0.2]]).unwrap();
        let y = [0usize, 1];
        let w = LossWeights { dpp: 0.3, dnp: 0.7, dfa: 1.5, alpha: 1.0 };

        let feat = |v: [f64; 2]| [v[0] + 0.5 * v[1] + 0.1, -0.25 * v[0] + 2.0 * v[1] - 0.2];
        let c = [[0.6, 0.8], [-1.0, 0.0]];
        let probs = |f: [f64; 2]| {
            let l0 = c[0][0] * f[0] + c[0][1] * f[1];
            let l1 = c[1][0] * f[0] + c[1][1] * f[1];
            let z = l0.exp() + l1.exp();
            [l0.exp() / z, l1.exp() / z]
        };
        let mut total = 0.0;
        for i in 0..2 {
            let fc = feat([x.row(i)[0], x.row(i)[1]]);
            let fa = feat([xa.row(i)[0], xa.row(i)[1]]);
            let (pc, pa) = (probs(fc), probs(fa));
            let dpp = |f: [f64; 2], p: [f64; 2]| {
                -p[y[i]].ln() + 0.15 * ((f[0] - c[y[i]][0]).powi(2) + (f[1] - c[y[i]][1]).powi(2))
            };
            let kl = pc[0] * (pc[0] / pa[0]).ln() + pc[1] * (pc[1] / pa[1]).ln();
            total += (dpp(fc, pc) + dpp(fa, pa) + 1.5 * kl) / 4.0;
        }
        // both prototypes are each other's rival: diff (1.6, 0.8)
        let dnp = -(2.0 * ((1.6f64 + 1e-12).sqrt() + (0.8f64 + 1e-12).sqrt())) / 2.0;
        total += 0.7 * dnp;

        let b = composite_loss(&x, &xa, &y, &p, &w).unwrap();
        assert!((b.total - total).abs() <= 1e-10, "{} vs {total}", b.total);
        assert!((Objective::adv_dpnp(w).total(&b) - b.total).abs() <= 1e-12);
    }

    #[test]
    fn graph_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..5 {
            let p = toy_params(seed, 3.0);
            let x = random_batch(&mut rng, 6, 3);
            let xa = random_batch(&mut rng, 6, 3);
            let y: Vec<usize> = (0..6).map(|i| i % 3).collect();
            let w = LossWeights { dpp: 0.2, dnp: 0.4, dfa: 1.3, alpha: 3.0 };
            for obj in [Objective::adv_dpnp(w), Objective::at_baseline(3.0), Objective::trades_like(w)] {
                let direct = breakdown_direct(&x, &xa, &y, &p, &obj).unwrap();
                let lg = LossGraph::build(p.arch(), &y, &nearest_negatives(p.bank()), &obj, PrototypeFlow::LOCKED);
                let mut bind = Bindings::new();
                p.bind(&mut bind);
                bind.bind(X_CLEAN, x.clone()).bind(X_ADV, xa.clone());
                let ev = forward(&lg.graph, &bind).unwrap();
                let gb = lg.breakdown(&ev);
                assert!((gb.total - direct.total).abs() <= 1e-12);
                assert!((gb.dfa - direct.dfa).abs() <= 1e-12);
                assert!((gb.dnp - direct.dnp).abs() <= 1e-12);
                assert!((obj.total(&gb) - gb.total).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn trades_like_reduces_to_ce_plus_kl() {
        let p = toy_params(5, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_batch(&mut rng, 5, 3);
        let xa = random_batch(&mut rng, 5, 3);
        let y = [2, 0, 1, 1, 0];
        let w = LossWeights { dpp: 0.5, dnp: 0.5, dfa: 2.0, alpha: 4.0 };
        let b = breakdown_direct(&x, &xa, &y, &p, &Objective::trades_like(w)).unwrap();
        let pc = class_probabilities(&extract_features(&p, &x).unwrap(), p.bank()).unwrap();
        let pa = class_probabilities(&extract_features(&p, &xa).unwrap(), p.bank()).unwrap();
        let mut direct = 0.0;
        for i in 0..5 {
            let kl: f64 = (0..3).map(|j| pc.row(i)[j] * (pc.row(i)[j] / pa.row(i)[j]).ln()).sum();
            direct += ((-pc.row(i)[y[i]].ln() - pa.row(i)[y[i]].ln()) / 2.0 + 1.0 * kl) / 5.0;
        }
        assert!((b.total - direct).abs() <= 1e-10);
    }

    fn loss_point<'a>(p: &'a ModelParams, x: Tensor, xa: Tensor) -> Bindings<'a> {
        let mut b = Bindings::new();
        p.bind(&mut b);
        b.bind(X_CLEAN, x).bind(X_ADV, xa);
        b
    }

    #[test]
    fn loss_graph_gradients_match_finite_differences() {
        let p = init_model(&ArchitectureConfig::mlp(3, vec![4], 3), 3, 2.0, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (x, xa) = (random_batch(&mut rng, 4, 3), random_batch(&mut rng, 4, 3));
        let y = [0, 2, 1, 2];
        let w = LossWeights { dpp: 0.3, dnp: 0.5, dfa: 1.7, alpha: 2.0 };
        let lg =
            LossGraph::build(p.arch(), &y, &nearest_negatives(p.bank()), &Objective::adv_dpnp(w), PrototypeFlow::OPEN);
        let err = crate::tensor::grad_check(&lg.graph, lg.total, &loss_point(&p, x, xa), 1e-6).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn locked_adversarial_branch_sends_nothing_to_prototypes() {
        let p = toy_params(23, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (x, xa) = (random_batch(&mut rng, 5, 3), random_batch(&mut rng, 5, 3));
        let y = [0, 1, 2, 0, 1];
        let adv_only = Objective {
            weights: LossWeights { dpp: 0.4, dnp: 0.0, dfa: 0.0, alpha: 2.0 },
            clean_weight: 0.0,
            adv_weight: 0.5,
        };
        let neg = nearest_negatives(p.bank());
        let point = loss_point(&p, x, xa);
        let grads = |flow| {
            let lg = LossGraph::build(p.arch(), &y, &neg, &adv_only, flow);
            let ev = forward(&lg.graph, &point).unwrap();
            lg.graph.backward_wrt(&ev, lg.total, &[PROTOTYPES, "fc1.weight"]).unwrap()
        };
        let locked = grads(PrototypeFlow::LOCKED);
        assert!(locked.get(PROTOTYPES).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(locked.get("fc1.weight").unwrap().data().iter().any(|&v| v != 0.0));
        let open = grads(PrototypeFlow::OPEN);
        assert!(open.get(PROTOTYPES).unwrap().data().iter().any(|&v| v != 0.0));
        assert_eq!(locked.get("fc1.weight"), open.get("fc1.weight"));
    }

    #[test]
    fn fully_locked_flow_freezes_prototypes_but_not_features() {
        let p = toy_params(25, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (x, xa) = (random_batch(&mut rng, 5, 3), random_batch(&mut rng, 5, 3));
        let y = [0, 1, 2, 0, 1];
        let obj = Objective::adv_dpnp(LossWeights { alpha: 2.0, ..LossWeights::default() });
        let flow = PrototypeFlow { lock_clean: true, ..PrototypeFlow::LOCKED };
        let lg = LossGraph::build(p.arch(), &y, &nearest_negatives(p.bank()), &obj, flow);
        let ev = forward(&lg.graph, &loss_point(&p, x, xa)).unwrap();
        let g = lg.graph.backward_wrt(&ev, lg.total, &[PROTOTYPES, "fc1.weight"]).unwrap();
        assert!(g.get(PROTOTYPES).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get("fc1.weight").unwrap().data().iter().any(|&v| v != 0.0));
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_identity(
            a in prop::collection::vec(0.01f64..1.0, 2..6),
            b in prop::collection::vec(0.01f64..1.0, 6),
        ) {
            let sa: f64 = a.iter().sum();
            let p: Vec<f64> = a.iter().map(|v| v / sa).collect();
            let sb: f64 = b[..p.len()].iter().sum();
            let q: Vec<f64> = b[..p.len()].iter().map(|v| v / sb).collect();
            prop_assert!(dfa_loss(&p, &q).unwrap() >= -1e-15);
            prop_assert_eq!(dfa_loss(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn total_is_affine_in_each_weight(
            dpp in 0.0f64..2.0, dnp in 0.0f64..2.0, dfa in 0.0f64..3.0, t in 0.0f64..1.0,
        ) {
            let b = LossBreakdown { ce_clean: 0.7, ce_adv: 1.3, pull_clean: 2.1, pull_adv: 3.4, dnp: -1.9, dfa: 0.2, total: 0.0 };
            let w0 = LossWeights { dpp, dnp, dfa, alpha: 1.0 };
            let w1 = LossWeights { dpp: dpp + 1.0, ..w0 };
            let wt = LossWeights { dpp: dpp + t, ..w0 };
            let (o0, o1, ot) = (Objective::adv_dpnp(w0), Objective::adv_dpnp(w1), Objective::adv_dpnp(wt));
            let interp = (1.0 - t) * o0.total(&b) + t * o1.total(&b);
            prop_assert!((ot.total(&b) - interp).abs() <= 1e-12);
        }

        #[test]
        fn pull_vanishes_only_at_the_prototype(fx in -3.0f64..3.0, fy in -3.0f64..3.0) {
            let b = bank2();
            let ce_only = dpp_loss(&[fx, fy], 0, &b, 0.0).unwrap();
            let with_pull = dpp_loss(&[fx, fy], 0, &b, 1.0).unwrap();
            let at_proto = (fx - 1.0).abs() < 1e-300 && fy.abs() < 1e-300;
            prop_assert_eq!(with_pull == ce_only, at_proto);
        }

        #[test]
        fn separating_the_closest_pair_lowers_dnp(shift in 0.01f64..1.0) {
            // pairings stay fixed: (0,1) are mutual rivals, 2 is far away
            let rows = vec![vec![0.0, 0.0], vec![0.3, 0.2], vec![10.0, 10.0]];
            let base = dnp_loss(&PrototypeBank::from_rows(&rows, 1.0).unwrap());
            let mut moved = rows.clone();
            moved[0] = vec![-shift, -shift];
            prop_assert!(dnp_loss(&PrototypeBank::from_rows(&moved, 1.0).unwrap()) < base);
        }
    }
}
