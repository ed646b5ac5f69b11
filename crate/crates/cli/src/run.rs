//! The four commands. Each one validates first, takes the output-directory lock,
//! and only writes complete artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use advdpnp_core::attacks::{accuracy, attack_dataset, correct_mask, Attack, AttackConfig, AttackObjective, CHUNK};
use advdpnp_core::checkpoint::{read_checkpoint, write_checkpoint};
use advdpnp_core::data::{Dataset, Split};
use advdpnp_core::gradcheck::{check_components, ComponentCheck};
use advdpnp_core::metrics::{evaluate, feature_csv, MetricsReport};
use advdpnp_core::model::{extract_features, ModelParams};
use advdpnp_core::tensor::Tensor;
use advdpnp_core::trainer::{history_csv, train_with};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::io::{atomic_write, OutputLock};
use crate::CliError;

pub const VERSION: &str = env!("ADVDPNP_VERSION");
pub const CHECKPOINT_FILE: &str = "checkpoint.advp";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "kind,value,accuracy,mean_loss";

/// Written next to the checkpoint; `config` alone reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub command: String,
    pub config: ExperimentConfig,
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Config(format!("serialising: {e}")))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    Ok(bytes)
}

/// Trains on the training split. Artifacts are written only once training has
/// finished; returns the output directory.
pub fn run_train(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let out = cfg.output_dir()?.to_path_buf();
    let data = cfg.load_split(Split::Train)?;
    let _lock = OutputLock::acquire(&out)?;
    let every = cfg.checkpoint_every;
    let (params, history) = train_with(&cfg.train, &cfg.architecture, &data, |state, rec| {
        if let Some(k) = every {
            if (rec.epoch + 1) % k == 0 {
                let p = out.join(format!("checkpoint_epoch{}.advp", rec.epoch + 1));
                let bytes = checkpoint_bytes(&state.params).map_err(|e| advdpnp_core::Error::Config(e.to_string()))?;
                atomic_write(&p, &bytes).map_err(|e| advdpnp_core::Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    })?;
    atomic_write(&out.join(CHECKPOINT_FILE), &checkpoint_bytes(&params)?)?;
    atomic_write(&out.join(HISTORY_FILE), history_csv(&history).as_bytes())?;
    let manifest =
        RunManifest { version: VERSION.to_string(), seed: cfg.seed, command: command.to_string(), config: cfg.clone() };
    atomic_write(&out.join(MANIFEST_FILE), &to_json(&manifest)?)?;
    Ok(out)
}

/// Loads a checkpoint and checks it against the configured architecture and dataset.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: &Path, data: &Dataset) -> Result<ModelParams, CliError> {
    let bytes = std::fs::read(checkpoint).map_err(|e| CliError::io(format!("reading {}", checkpoint.display()), e))?;
    let params = read_checkpoint(bytes.as_slice())?;
    if params.arch() != &cfg.architecture {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained with a different architecture",
            checkpoint.display()
        )));
    }
    if params.num_classes() != data.num_classes() {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            params.num_classes(),
            data.num_classes()
        )));
    }
    Ok(params)
}

fn eval_setup(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(PathBuf, Dataset, ModelParams), CliError> {
    cfg.validate()?;
    let out = cfg.output_dir()?.to_path_buf();
    let data = cfg.load_split(Split::Test)?;
    let params = load_model(cfg, checkpoint, &data)?;
    Ok((out, data, params))
}

/// Evaluates every configured attack plus the geometry metrics on the test split.
/// Writes `report.json`, and `features.csv` when the feature space is 2-D.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsReport, CliError> {
    let (out, data, params) = eval_setup(cfg, checkpoint)?;
    let _lock = OutputLock::acquire(&out)?;
    let attacks: Vec<(String, Attack)> = cfg.eval.attacks.iter().map(|a| (a.name.clone(), a.attack.clone())).collect();
    let ev = evaluate(&params, &data, &attacks, &cfg.eval.geometry_attack, cfg.seed)?;
    let mut report = ev.report;
    report.timestamp = Some(SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
    if params.arch().feature_dim == 2 {
        let csv = feature_csv(data.labels(), &[("test_clean", &ev.clean_features), ("test_adv", &ev.adv_features)]);
        atomic_write(&out.join(FEATURES_FILE), csv.as_bytes())?;
    }
    atomic_write(&out.join(REPORT_FILE), &to_json(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub value: f64,
    pub accuracy: f64,
    /// Mean cross-entropy of the model on the attacked inputs.
    pub mean_loss: f64,
}

/// Accuracy and mean cross-entropy on `inputs`.
pub fn score(params: &ModelParams, inputs: &Tensor, labels: &[usize]) -> Result<(f64, f64), CliError> {
    let acc = accuracy(&correct_mask(params, inputs, labels)?);
    let bank = params.bank();
    let mut total = 0.0;
    let idx: Vec<usize> = (0..labels.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let f = extract_features(params, &inputs.select_rows(chunk))?;
        for (k, &i) in chunk.iter().enumerate() {
            let logits: Vec<f64> = (0..bank.num_classes())
                .map(|j| bank.prototype(j).iter().zip(f.row(k)).map(|(c, x)| c * x).sum::<f64>() / bank.alpha())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - logits[labels[i]];
        }
    }
    if !total.is_finite() {
        return Err(CliError::Numeric("sweep loss is not finite".into()));
    }
    Ok((acc, total / labels.len().max(1) as f64))
}

/// Step size for a PGD point of an ε sweep: 2.5ε spread over the iterations.
fn sweep_pgd(base: &AttackConfig, epsilon: f64) -> AttackConfig {
    let mut c = base.clone();
    c.epsilon = epsilon;
    if epsilon == 0.0 {
        c.iterations = 0;
    } else {
        c.step = 2.5 * epsilon / base.iterations.max(1) as f64;
    }
    c
}

/// The obfuscation checks on the test split: ε sweeps (FGSM and PGD), iteration and
/// restart sweeps, and PGD with the cross-entropy vs the composite objective.
/// Every attack uses the run seed.
pub fn run_sweep(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<SweepRow>, CliError> {
    let Some(sweep) = cfg.sweep.clone() else {
        return Err(CliError::Config("config has no sweep section".into()));
    };
    let (out, data, params) = eval_setup(cfg, checkpoint)?;
    let _lock = OutputLock::acquire(&out)?;
    let base = sweep.base;
    let mut jobs: Vec<(&str, f64, Attack)> = Vec::new();
    for &e in &sweep.epsilon_grid {
        jobs.push(("fgsm_eps", e, Attack::Fgsm { epsilon: e, input_box: base.input_box }));
        jobs.push(("pgd_eps", e, Attack::Pgd(sweep_pgd(&base, e))));
    }
    for &k in &sweep.iteration_grid {
        jobs.push(("pgd_iters", k as f64, Attack::Pgd(AttackConfig { iterations: k, ..base.clone() })));
    }
    for &r in &sweep.restart_grid {
        jobs.push(("pgd_restarts", r as f64, Attack::Pgd(AttackConfig { restarts: r, ..base.clone() })));
    }
    if sweep.adaptive {
        let ce = AttackConfig { objective: AttackObjective::CrossEntropy, ..base.clone() };
        let comp = AttackConfig {
            objective: AttackObjective::Composite,
            composite_weights: base.composite_weights.or(Some(cfg.train.weights)),
            ..base.clone()
        };
        jobs.push(("adaptive_ce", base.epsilon, Attack::Pgd(ce)));
        jobs.push(("adaptive_composite", base.epsilon, Attack::Pgd(comp)));
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for (kind, value, attack) in jobs {
        let xa = attack_dataset(&params, &data, &attack, cfg.seed)?;
        let (accuracy, mean_loss) = score(&params, &xa, data.labels())?;
        rows.push(SweepRow { kind: kind.to_string(), value, accuracy, mean_loss });
    }
    atomic_write(&out.join(SWEEP_FILE), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.kind, r.value, r.accuracy, r.mean_loss);
    }
    s
}

/// Worst relative error per component over seeds `seed..seed + trials`.
pub fn run_gradcheck(seed: u64, trials: usize, corrupt: Option<&str>) -> Result<Vec<ComponentCheck>, CliError> {
    if trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }
    let mut worst: Vec<ComponentCheck> = Vec::new();
    for t in 0..trials as u64 {
        for (k, c) in check_components(seed.wrapping_add(t), corrupt)?.into_iter().enumerate() {
            match worst.get_mut(k) {
                None => worst.push(c),
                Some(w) => {
                    w.passed &= c.passed;
                    // a NaN error is a failure and must survive the max
                    if !(c.max_rel_error <= w.max_rel_error) {
                        w.max_rel_error = c.max_rel_error;
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// `Err` naming every failed component.
pub fn gradcheck_verdict(checks: &[ComponentCheck]) -> Result<(), CliError> {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.component.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epsilon_pgd_has_no_iterations() {
        let base = AttackConfig::linf(0.1, 0.01, 20);
        assert_eq!(sweep_pgd(&base, 0.0).iterations, 0);
        let c = sweep_pgd(&base, 0.2);
        assert!((c.step - 0.025).abs() < 1e-15);
        assert_eq!(c.iterations, 20);
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow { kind: "pgd_eps".into(), value: 0.5, accuracy: 0.25, mean_loss: 1.5 }];
        assert_eq!(sweep_csv(&rows), "kind,value,accuracy,mean_loss\npgd_eps,0.5,0.25,1.5\n");
    }

    #[test]
    fn gradcheck_aggregates_and_names_failures() {
        let ok = run_gradcheck(0, 3, None).unwrap();
        assert_eq!(ok.len(), 5);
        gradcheck_verdict(&ok).unwrap();
        let bad = run_gradcheck(0, 2, Some("dfa")).unwrap();
        match gradcheck_verdict(&bad) {
            Err(CliError::GradCheck(names)) => assert_eq!(names, vec!["dfa".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
