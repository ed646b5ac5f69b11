//! Adversarial example generation: FGSM and multi-restart PGD under the ℓ∞, ℓ2 or ℓ1 norm.
//!
//! Inputs are flat `[B, D]` rows. Projection and ascent steps act per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{nearest_negatives, CeGraph, LossGraph, LossWeights, Objective, PrototypeFlow, X_ADV, X_CLEAN};
use crate::model::{classify, ModelParams};
use crate::tensor::{forward, Bindings, Tensor};

/// Samples per attack graph when sweeping a whole dataset.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
    L1,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackObjective {
    #[default]
    CrossEntropy,
    /// The full training objective with the clean input as DFA reference.
    Composite,
}

fn unit_box() -> [f64; 2] {
    [0.0, 1.0]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub step: f64,
    pub iterations: usize,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default)]
    pub objective: AttackObjective,
    #[serde(default = "unit_box")]
    pub input_box: [f64; 2],
    /// Start the first restart from a random point instead of `δ = 0`.
    #[serde(default)]
    pub random_init: bool,
    /// Weights of the composite objective; `α` always comes from the model.
    #[serde(default)]
    pub composite_weights: Option<LossWeights>,
}

impl AttackConfig {
    pub fn linf(epsilon: f64, step: f64, iterations: usize) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
            step,
            iterations,
            restarts: 1,
            objective: AttackObjective::CrossEntropy,
            input_box: unit_box(),
            random_init: false,
            composite_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("attack epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.iterations > 0 && !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::Config(format!("attack step {} must be positive", self.step)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("attack restarts must be >= 1".into()));
        }
        if !(self.input_box[0] < self.input_box[1]) {
            return Err(Error::Config("attack input box is empty".into()));
        }
        if let Some(w) = &self.composite_weights {
            w.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Attack {
    Fgsm {
        epsilon: f64,
        #[serde(default = "unit_box")]
        input_box: [f64; 2],
    },
    Pgd(AttackConfig),
}

impl Attack {
    pub fn validate(&self) -> Result<()> {
        match self {
            Attack::Fgsm { epsilon, input_box } => {
                if !(epsilon.is_finite() && *epsilon >= 0.0) || !(input_box[0] < input_box[1]) {
                    return Err(Error::Config(format!("invalid FGSM epsilon {epsilon} or box {input_box:?}")));
                }
                Ok(())
            }
            Attack::Pgd(config) => config.validate(),
        }
    }

    pub fn apply(&self, params: &ModelParams, x: &Tensor, y: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
        match self {
            Attack::Fgsm { epsilon, input_box } => fgsm(params, x, y, *epsilon, *input_box),
            Attack::Pgd(config) => pgd(params, x, y, config, rng),
        }
    }
}

/// Euclidean projection of `delta` onto the `ε`-ball of `norm`, in place.
pub fn project(delta: &mut [f64], norm: Norm, epsilon: f64) {
    match norm {
        Norm::Linf => delta.iter_mut().for_each(|v| *v = v.clamp(-epsilon, epsilon)),
        Norm::L2 => {
            let n = Norm::L2.of(delta);
            if n > epsilon {
                let s = if n > 0.0 { epsilon / n } else { 0.0 };
                delta.iter_mut().for_each(|v| *v *= s);
            }
        }
        Norm::L1 => {
            if Norm::L1.of(delta) <= epsilon {
                return;
            }
            if epsilon == 0.0 {
                delta.fill(0.0);
                return;
            }
            // sort-based projection onto the simplex of radius ε, applied to |δ|
            let mut u: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
            u.sort_by(|a, b| b.total_cmp(a));
            let (mut cum, mut theta) = (0.0, 0.0);
            for (j, &uj) in u.iter().enumerate() {
                cum += uj;
                let t = (cum - epsilon) / (j + 1) as f64;
                if uj > t {
                    theta = t;
                }
            }
            delta.iter_mut().for_each(|v| *v = v.signum() * (v.abs() - theta).max(0.0));
        }
    }
}

/// Steepest-ascent step of length `step` for `grad` under `norm`.
pub fn ascent_step(grad: &[f64], norm: Norm, step: f64) -> Vec<f64> {
    let sign = |g: f64| {
        if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    match norm {
        Norm::Linf => grad.iter().map(|&g| step * sign(g)).collect(),
        Norm::L2 => {
            let n = Norm::L2.of(grad);
            if n == 0.0 {
                vec![0.0; grad.len()]
            } else {
                grad.iter().map(|g| step * g / n).collect()
            }
        }
        Norm::L1 => {
            let mut out = vec![0.0; grad.len()];
            let mut best = 0;
            for (i, g) in grad.iter().enumerate() {
                if g.abs() > grad[best].abs() {
                    best = i;
                }
            }
            if let Some(&g) = grad.get(best) {
                out[best] = step * sign(g);
            }
            out
        }
    }
}

/// Uniform sample from the `ε`-ball of `norm` in `dim` dimensions.
pub fn random_in_ball(norm: Norm, epsilon: f64, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    if epsilon == 0.0 {
        return vec![0.0; dim];
    }
    match norm {
        Norm::Linf => (0..dim).map(|_| rng.random_range(-epsilon..=epsilon)).collect(),
        Norm::L2 | Norm::L1 => {
            let mut dir: Vec<f64> = match norm {
                Norm::L2 => (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                _ => (0..dim)
                    .map(|_| {
                        let e: f64 = rng.sample(Exp1);
                        if rng.random::<bool>() {
                            e
                        } else {
                            -e
                        }
                    })
                    .collect(),
            };
            let n = norm.of(&dir);
            let r = epsilon * rng.random::<f64>().powf(1.0 / dim as f64) / n.max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v *= r);
            dir
        }
    }
}

/// Something PGD can climb: per-sample values and the input gradient of their sum.
pub trait AscentObjective {
    fn values(&self, x_adv: &Tensor) -> Result<Vec<f64>>;
    fn value_and_grad(&self, x_adv: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// Per-sample cross-entropy of the prototype classifier.
pub struct CeObjective<'a> {
    params: &'a ModelParams,
    graph: CeGraph,
}

impl<'a> CeObjective<'a> {
    pub fn new(params: &'a ModelParams, labels: &[usize]) -> Self {
        Self { params, graph: CeGraph::build(params.arch(), labels, params.bank().alpha()) }
    }

    fn run(&self, x: &Tensor, grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
        let mut b = Bindings::new();
        self.params.bind(&mut b);
        b.bind(X_ADV, self.params.shape_batch(x)?);
        let ev = forward(&self.graph.graph, &b)?;
        let vals = ev.value(self.graph.per_sample).data().to_vec();
        let g = if grad {
            let mut gs = self.graph.graph.backward_wrt(&ev, self.graph.total, &[X_ADV])?;
            Some(gs.take(X_ADV).expect("input gradient").reshape(x.shape().to_vec())?)
        } else {
            None
        };
        Ok((vals, g))
    }
}

impl AscentObjective for CeObjective<'_> {
    fn values(&self, x_adv: &Tensor) -> Result<Vec<f64>> {
        Ok(self.run(x_adv, false)?.0)
    }

    fn value_and_grad(&self, x_adv: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (v, g) = self.run(x_adv, true)?;
        Ok((v, g.unwrap()))
    }
}

/// Adversarial-side composite objective `[DPP(x̃) + λ_DFA·KL(p(x) ‖ p(x̃))]/2` per sample.
pub struct CompositeObjective<'a> {
    params: &'a ModelParams,
    clean: Tensor,
    graph: LossGraph,
}

impl<'a> CompositeObjective<'a> {
    pub fn new(params: &'a ModelParams, clean: &Tensor, labels: &[usize], weights: LossWeights) -> Result<Self> {
        let weights = LossWeights { alpha: params.bank().alpha(), ..weights };
        let graph = LossGraph::build(
            params.arch(),
            labels,
            &nearest_negatives(params.bank()),
            &Objective::adv_dpnp(weights),
            PrototypeFlow::OPEN,
        );
        Ok(Self { params, clean: params.shape_batch(clean)?, graph })
    }

    fn run(&self, x: &Tensor, grad: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
        let mut b = Bindings::new();
        self.params.bind(&mut b);
        b.bind_ref(X_CLEAN, &self.clean);
        b.bind(X_ADV, self.params.shape_batch(x)?);
        let ev = forward(&self.graph.graph, &b)?;
        let vals = ev.value(self.graph.per_sample_adv).data().to_vec();
        let g = if grad {
            let mut gs = self.graph.graph.backward_wrt(&ev, self.graph.total, &[X_ADV])?;
            Some(gs.take(X_ADV).expect("input gradient").reshape(x.shape().to_vec())?)
        } else {
            None
        };
        Ok((vals, g))
    }
}

impl AscentObjective for CompositeObjective<'_> {
    fn values(&self, x_adv: &Tensor) -> Result<Vec<f64>> {
        Ok(self.run(x_adv, false)?.0)
    }

    fn value_and_grad(&self, x_adv: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (v, g) = self.run(x_adv, true)?;
        Ok((v, g.unwrap()))
    }
}

/// `clamp(x + ε·sign(∇ₓ CE), box)`.
pub fn fgsm(params: &ModelParams, x: &Tensor, y: &[usize], epsilon: f64, input_box: [f64; 2]) -> Result<Tensor> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (_, grad) = CeObjective::new(params, y).value_and_grad(x)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("FGSM input gradient".into()));
    }
    let mut out = x.clone();
    for (o, g) in out.data_mut().iter_mut().zip(grad.data()) {
        let s = if *g > 0.0 {
            1.0
        } else if *g < 0.0 {
            -1.0
        } else {
            0.0
        };
        *o = (*o + epsilon * s).clamp(input_box[0], input_box[1]);
    }
    Ok(out)
}

/// Result of [`pgd_with`]: the adversarial batch and each sample's final objective value.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub x_adv: Tensor,
    pub values: Vec<f64>,
}

/// Projected gradient ascent on `objective` around `x`; the best restart is kept per sample.
pub fn pgd_with(
    objective: &impl AscentObjective,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    let [lo, hi] = cfg.input_box;
    let (n, d) = (x.rows(), x.row_len());
    let mut best: Option<PgdOutcome> = None;
    for restart in 0..cfg.restarts {
        let mut xa = x.clone();
        if restart > 0 || cfg.random_init {
            for r in 0..n {
                let delta = random_in_ball(cfg.norm, cfg.epsilon, d, rng);
                for ((a, &x0), dv) in xa.row_mut(r).iter_mut().zip(x.row(r)).zip(delta) {
                    *a = (x0 + dv).clamp(lo, hi);
                }
            }
        }
        for it in 0..cfg.iterations {
            let (vals, grad) = objective.value_and_grad(&xa)?;
            if vals.iter().any(|v| !v.is_finite()) || !grad.is_finite() {
                return Err(Error::NonFinite(format!("PGD objective at restart {restart}, iteration {it}")));
            }
            let mut delta = vec![0.0; d];
            for r in 0..n {
                let step = ascent_step(grad.row(r), cfg.norm, cfg.step);
                for k in 0..d {
                    delta[k] = xa.row(r)[k] + step[k] - x.row(r)[k];
                }
                project(&mut delta, cfg.norm, cfg.epsilon);
                for ((a, &x0), dv) in xa.row_mut(r).iter_mut().zip(x.row(r)).zip(&delta) {
                    *a = (x0 + dv).clamp(lo, hi);
                }
            }
        }
        let values = objective.values(&xa)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("PGD objective after restart {restart}")));
        }
        best = Some(match best {
            None => PgdOutcome { x_adv: xa, values },
            Some(mut b) => {
                for r in 0..n {
                    if values[r] > b.values[r] {
                        b.values[r] = values[r];
                        b.x_adv.row_mut(r).copy_from_slice(xa.row(r));
                    }
                }
                b
            }
        });
    }
    Ok(best.expect("at least one restart"))
}

/// PGD against the model with the objective selected in `cfg`.
pub fn pgd(params: &ModelParams, x: &Tensor, y: &[usize], cfg: &AttackConfig, rng: &mut impl Rng) -> Result<Tensor> {
    Ok(pgd_outcome(params, x, y, cfg, rng)?.x_adv)
}

pub fn pgd_outcome(
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<PgdOutcome> {
    match cfg.objective {
        AttackObjective::CrossEntropy => pgd_with(&CeObjective::new(params, y), x, cfg, rng),
        AttackObjective::Composite => {
            let w = cfg.composite_weights.unwrap_or_default();
            pgd_with(&CompositeObjective::new(params, x, y, w)?, x, cfg, rng)
        }
    }
}

/// Adversarial copy of the whole dataset, attacked in chunks of [`CHUNK`].
/// Each chunk draws from its own stream of `seed`.
pub fn attack_dataset(params: &ModelParams, ds: &Dataset, attack: &Attack, seed: u64) -> Result<Tensor> {
    attack.validate()?;
    let mut out = ds.inputs().clone();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (c, chunk) in idx.chunks(CHUNK).enumerate() {
        let (x, y) = ds.gather(chunk);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let xa = attack.apply(params, &x, &y, &mut rng)?;
        for (k, &i) in chunk.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xa.row(k));
        }
    }
    Ok(out)
}

/// Per-sample correctness of the model on `inputs` (chunked).
pub fn correct_mask(params: &ModelParams, inputs: &Tensor, labels: &[usize]) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(labels.len());
    let idx: Vec<usize> = (0..labels.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let pred = classify(params, &inputs.select_rows(chunk))?;
        out.extend(chunk.iter().zip(pred).map(|(&i, p)| p == labels[i]));
    }
    Ok(out)
}

pub fn accuracy(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&c| c).count() as f64 / mask.len().max(1) as f64
}

/// Fraction of samples classified correctly under every attack (each applied to the clean input).
pub fn ensemble_accuracy(params: &ModelParams, ds: &Dataset, attacks: &[Attack], seed: u64) -> Result<f64> {
    if attacks.is_empty() {
        return Err(Error::Config("ensemble needs at least one attack".into()));
    }
    let mut alive = vec![true; ds.len()];
    for (a, attack) in attacks.iter().enumerate() {
        let xa = attack_dataset(params, ds, attack, seed.wrapping_add(a as u64))?;
        for (s, ok) in alive.iter_mut().zip(correct_mask(params, &xa, ds.labels())?) {
            *s &= ok;
        }
    }
    Ok(accuracy(&alive))
}
