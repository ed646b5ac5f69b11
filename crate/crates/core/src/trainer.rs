//! Dual-branch adversarial training loop.
//!
//! Every step attacks the current model, evaluates the composite loss with the
//! adversarial branch reading the prototypes through a gradient barrier, and
//! applies SGD with momentum to the extractor and the prototypes. Prototypes are
//! put back on the `α`-sphere at the start of each epoch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig};
use crate::data::{augment, batches, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    nearest_negatives, LossBreakdown, LossGraph, LossWeights, Objective, PrototypeFlow, X_ADV, X_CLEAN,
};
use crate::model::{init_model, predict, renormalize_prototypes, ArchitectureConfig, ModelParams, PROTOTYPES};
use crate::tensor::{forward, Bindings, Tensor};

/// Piecewise-constant learning rate: `initial` until the first milestone epoch,
/// then the rate of the latest milestone reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub milestones: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 0.1, milestones: vec![(100, 0.01), (105, 0.001)] }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, milestones: Vec::new() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones.iter().filter(|(e, _)| *e <= epoch).max_by_key(|(e, _)| *e).map_or(self.initial, |m| m.1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite())
            || self.milestones.iter().any(|m| !(m.1 > 0.0 && m.1.is_finite()))
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// `buffer ← μ·buffer + grad + wd·param`, then `param ← param − η·buffer`.
pub fn sgd_update(
    param: &mut Tensor,
    grad: &Tensor,
    buffer: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != buffer.shape() {
        return Err(Error::Config(format!(
            "sgd shapes differ: param {:?}, grad {:?}, buffer {:?}",
            param.shape(),
            grad.shape(),
            buffer.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient passed to sgd_update".into()));
    }
    for ((p, g), b) in param.data_mut().iter_mut().zip(grad.data()).zip(buffer.data_mut()) {
        *b = momentum * *b + g + weight_decay * *p;
        *p -= lr * *b;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    AdvDpnp,
    /// Cross-entropy on adversarial inputs only, prototypes unlocked.
    AtBaseline,
    /// Composite loss with `λ_DPP = λ_DNP = 0`.
    TradesLike,
}

fn default_attack() -> AttackConfig {
    AttackConfig { random_init: true, ..AttackConfig::linf(8.0 / 255.0, 2.0 / 255.0, 10) }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_batch() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_attack")]
    pub attack: AttackConfig,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub seed: u64,
    /// Drop the clean-branch CE/DPP terms and keep DNP and the clean side of DFA
    /// away from the prototypes.
    #[serde(default)]
    pub mask_clean_branch: bool,
    /// Let DFA reach the prototypes through the adversarial prediction as well.
    #[serde(default)]
    pub dfa_prototype_grad: bool,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            schedule: LrSchedule::default(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            weights: LossWeights::default(),
            attack: default_attack(),
            mode: TrainMode::AdvDpnp,
            seed: 0,
            mask_clean_branch: false,
            dfa_prototype_grad: false,
            augment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be >= 0".into()));
        }
        self.weights.validate()?;
        self.attack.validate()
    }

    pub fn objective(&self) -> Objective {
        let mut obj = match self.mode {
            TrainMode::AdvDpnp => Objective::adv_dpnp(self.weights),
            TrainMode::AtBaseline => Objective::at_baseline(self.weights.alpha),
            TrainMode::TradesLike => Objective::trades_like(self.weights),
        };
        if self.mask_clean_branch && self.mode != TrainMode::AtBaseline {
            obj.clean_weight = 0.0;
        }
        obj
    }

    pub fn flow(&self) -> PrototypeFlow {
        match self.mode {
            TrainMode::AtBaseline => PrototypeFlow::OPEN,
            _ => PrototypeFlow {
                lock_adversarial: true,
                dfa_through_adversarial: self.dfa_prototype_grad,
                lock_clean: self.mask_clean_branch,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Running accuracy on the clean batches seen this epoch.
    pub clean_acc: f64,
    /// Running accuracy on this epoch's training adversarial examples.
    pub adv_acc: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,ce_clean,ce_adv,pull_clean,pull_adv,dnp,dfa,total,clean_acc,adv_acc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            l.ce_clean,
            l.ce_adv,
            l.pull_clean,
            l.pull_adv,
            l.dnp,
            l.dfa,
            l.total,
            r.clean_acc,
            r.adv_acc
        ));
    }
    s
}

/// Per-step diagnostics from [`TrainState::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub clean_correct: usize,
    pub adv_correct: usize,
}

pub struct TrainState {
    pub params: ModelParams,
    /// Extractor buffers in parameter order, then the prototype buffer.
    pub momentum: Vec<Tensor>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    batch_rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl TrainState {
    /// Fresh model from `config.seed`; prototypes on the sphere of radius `config.weights.alpha`.
    pub fn new(config: &TrainConfig, arch: &ArchitectureConfig, num_classes: usize) -> Result<Self> {
        Self::from_params(config, init_model(arch, num_classes, config.weights.alpha, config.seed)?)
    }

    pub fn from_params(config: &TrainConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if params.bank().alpha() != config.weights.alpha {
            return Err(Error::Config(format!(
                "model radius {} differs from loss radius {}",
                params.bank().alpha(),
                config.weights.alpha
            )));
        }
        let mut momentum: Vec<Tensor> = params.extractor().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        momentum.push(Tensor::zeros(params.bank().tensor().shape()));
        Ok(Self {
            params,
            momentum,
            epoch: 0,
            history: Vec::new(),
            batch_rng: stream(config.seed, 1),
            attack_rng: stream(config.seed, 2),
            augment_rng: stream(config.seed, 3),
        })
    }

    /// One optimisation step on a clean batch (flat `[B, D]` rows).
    pub fn step(&mut self, config: &TrainConfig, x: &Tensor, labels: &[usize]) -> Result<StepReport> {
        if labels.is_empty() || x.rows() != labels.len() {
            return Err(Error::Config("training batch is empty or misaligned".into()));
        }
        let x_adv = pgd(&self.params, x, labels, &config.attack, &mut self.attack_rng)?;
        let lg = LossGraph::build(
            self.params.arch(),
            labels,
            &nearest_negatives(self.params.bank()),
            &config.objective(),
            config.flow(),
        );
        let names: Vec<String> = self.params.extractor().iter().map(|(n, _)| n.clone()).collect();
        let (report, mut grads) = {
            let mut b = Bindings::new();
            self.params.bind(&mut b);
            b.bind(X_CLEAN, self.params.shape_batch(x)?);
            b.bind(X_ADV, self.params.shape_batch(&x_adv)?);
            let ev = forward(&lg.graph, &b)?;
            let mut wrt: Vec<&str> = names.iter().map(String::as_str).collect();
            wrt.push(PROTOTYPES);
            let grads = lg.graph.backward_wrt(&ev, lg.total, &wrt)?;
            let hits = |id| predict(ev.value(id)).iter().zip(labels).filter(|(p, y)| p == y).count();
            let report = StepReport {
                loss: lg.breakdown(&ev),
                clean_correct: hits(lg.probs_clean),
                adv_correct: hits(lg.probs_adv),
            };
            (report, grads)
        };

        let lr = config.schedule.lr_at(self.epoch);
        let k = names.len();
        for (i, (name, param)) in self.params.extractor_mut().iter_mut().enumerate() {
            let g = grads.take(name).expect("gradient for every extractor tensor");
            sgd_update(param, &g, &mut self.momentum[i], lr, config.momentum, config.weight_decay)?;
        }
        let g = grads.take(PROTOTYPES).expect("prototype gradient");
        let mut protos = self.params.bank().tensor().clone();
        sgd_update(&mut protos, &g, &mut self.momentum[k], lr, config.momentum, 0.0)?;
        self.params.bank_mut().replace(protos)?;
        Ok(report)
    }

    fn renormalize(&mut self) -> Result<()> {
        let bank = renormalize_prototypes(self.params.bank())
            .map_err(|e| Error::Degenerate(format!("epoch {}: {e}", self.epoch)))?;
        *self.params.bank_mut() = bank;
        Ok(())
    }

    /// Renormalise, one pass over `data` in a fresh random order, renormalise again
    /// so the state between epochs (and any checkpoint of it) sits on the sphere.
    pub fn run_epoch(&mut self, config: &TrainConfig, data: &Dataset) -> Result<EpochRecord> {
        self.renormalize()?;
        let lr = config.schedule.lr_at(self.epoch);
        let mut sum = LossBreakdown::default();
        let (mut clean, mut adv) = (0, 0);
        for idx in batches(data.len(), config.batch_size, &mut self.batch_rng) {
            let (mut x, y) = data.gather(&idx);
            if let Some(aug) = config.augment {
                if data.sample_shape().len() == 3 {
                    x = augment(&x, data, aug, &mut self.augment_rng)?;
                }
            }
            let r = self.step(config, &x, &y)?;
            let w = y.len() as f64;
            let l = &r.loss;
            sum.ce_clean += w * l.ce_clean;
            sum.ce_adv += w * l.ce_adv;
            sum.pull_clean += w * l.pull_clean;
            sum.pull_adv += w * l.pull_adv;
            sum.dfa += w * l.dfa;
            sum.dnp += w * l.dnp;
            sum.total += w * l.total;
            clean += r.clean_correct;
            adv += r.adv_correct;
        }
        self.renormalize()?;
        let n = data.len() as f64;
        let loss = LossBreakdown {
            ce_clean: sum.ce_clean / n,
            ce_adv: sum.ce_adv / n,
            pull_clean: sum.pull_clean / n,
            pull_adv: sum.pull_adv / n,
            dnp: sum.dnp / n,
            dfa: sum.dfa / n,
            total: sum.total / n,
        };
        let record = EpochRecord { epoch: self.epoch, lr, loss, clean_acc: clean as f64 / n, adv_acc: adv as f64 / n };
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }
}

/// Trains from scratch for `config.epochs` epochs. `on_epoch` runs after each epoch.
pub fn train_with(
    config: &TrainConfig,
    arch: &ArchitectureConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let mut state = TrainState::new(config, arch, data.num_classes())?;
    for _ in 0..config.epochs {
        let rec = state.run_epoch(config, data)?;
        on_epoch(&state, &rec)?;
    }
    Ok((state.params, state.history))
}

pub fn train(
    config: &TrainConfig,
    arch: &ArchitectureConfig,
    data: &Dataset,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    train_with(config, arch, data, |_, _| Ok(()))
}
