//! Feature-space geometry metrics and the evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{accuracy, attack_dataset, correct_mask, Attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{extract_features, ModelParams};
use crate::tensor::Tensor;

/// Features with labels and one center per class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Tensor,
    labels: Vec<usize>,
    centers: Tensor,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Angle between two non-zero vectors in degrees, with the cosine clamped to [−1, 1].
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

impl FeatureSet {
    pub fn new(features: Tensor, labels: Vec<usize>, centers: Tensor) -> Result<Self> {
        let (&[n, d], &[m, dc]) = (features.shape(), centers.shape()) else {
            return Err(Error::Config("features and centers must be matrices".into()));
        };
        if n != labels.len() || d != dc || d < 2 || m < 2 {
            return Err(Error::Config(format!(
                "features [{n}, {d}], {} labels and centers [{m}, {dc}] are inconsistent",
                labels.len()
            )));
        }
        let mut counts = vec![0usize; m];
        for &y in &labels {
            *counts.get_mut(y).ok_or_else(|| Error::Config(format!("label {y} has no center")))? += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Degenerate(format!("class {j} has no samples")));
        }
        Ok(Self { features, labels, centers })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    fn members(&self, j: usize) -> impl Iterator<Item = &[f64]> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &y)| y == j).map(|(i, _)| self.features.row(i))
    }

    /// Per-class means and the global mean.
    fn means(&self) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
        let (m, d) = (self.num_classes(), self.features.row_len());
        let mut mu = vec![vec![0.0; d]; m];
        let mut n = vec![0usize; m];
        let mut all = vec![0.0; d];
        for (i, &y) in self.labels.iter().enumerate() {
            for (k, v) in self.features.row(i).iter().enumerate() {
                mu[y][k] += v;
                all[k] += v;
            }
            n[y] += 1;
        }
        for (row, &c) in mu.iter_mut().zip(&n) {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
        all.iter_mut().for_each(|v| *v /= self.labels.len() as f64);
        (mu, n, all)
    }

    /// `Σ_j tr(S_w^j) / tr(S_b^j)`; lower means tighter, better separated classes.
    pub fn fdr(&self) -> Result<f64> {
        let (mu, n, all) = self.means();
        let mut total = 0.0;
        for j in 0..self.num_classes() {
            let within: f64 = self.members(j).map(|f| dist(f, &mu[j]).powi(2)).sum();
            let between = n[j] as f64 * dist(&mu[j], &all).powi(2);
            if !(between > 0.0) {
                return Err(Error::Degenerate(format!("class {j} mean coincides with the global mean")));
            }
            total += within / between;
        }
        Ok(total)
    }

    /// Angular within-class over angular between-class scatter, anchored at class means.
    pub fn afs(&self) -> Result<f64> {
        let (mu, n, all) = self.means();
        let nonzero = |v: &[f64], what: &str| {
            if dot(v, v) > 0.0 {
                Ok(())
            } else {
                Err(Error::Degenerate(format!("{what} has zero norm")))
            }
        };
        nonzero(&all, "global mean")?;
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..self.num_classes() {
            nonzero(&mu[j], &format!("mean of class {j}"))?;
            for (i, f) in self.members(j).enumerate() {
                nonzero(f, &format!("feature {i} of class {j}"))?;
                num += 1.0 - cosine(f, &mu[j]);
            }
            den += n[j] as f64 * (1.0 - cosine(&mu[j], &all));
        }
        if !(den > 0.0) {
            return Err(Error::Degenerate("angular between-class scatter is zero".into()));
        }
        Ok(num / den)
    }

    /// Mean over classes of nearest-rival center distance over mean distance to the own center.
    pub fn scr(&self) -> Result<f64> {
        let m = self.num_classes();
        let mut total = 0.0;
        for j in 0..m {
            let cj = self.centers.row(j);
            let rival = (0..m).filter(|&k| k != j).map(|k| dist(self.centers.row(k), cj)).fold(f64::INFINITY, f64::min);
            let (mut s, mut cnt) = (0.0, 0usize);
            for f in self.members(j) {
                s += dist(f, cj);
                cnt += 1;
            }
            let spread = s / cnt as f64;
            if !(spread > 0.0) {
                return Err(Error::Degenerate(format!("class {j} sits exactly on its center")));
            }
            total += rival / spread;
        }
        Ok(total / m as f64)
    }
}

/// `(MeanSep, MinSep)` in degrees: the mean over centers of the angle to the nearest
/// other center, and the smallest pairwise angle.
pub fn angular_separation(centers: &Tensor) -> Result<(f64, f64)> {
    let m = centers.rows();
    if m < 2 {
        return Err(Error::Config("need at least two centers".into()));
    }
    for j in 0..m {
        if !(dot(centers.row(j), centers.row(j)) > 0.0) {
            return Err(Error::Degenerate(format!("center {j} has zero norm")));
        }
    }
    let mut nearest = vec![f64::INFINITY; m];
    for j in 0..m {
        for k in j + 1..m {
            let a = angle_deg(centers.row(j), centers.row(k));
            nearest[j] = nearest[j].min(a);
            nearest[k] = nearest[k].min(a);
        }
    }
    let min = nearest.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((nearest.iter().sum::<f64>() / m as f64, min))
}

/// Flat evaluation summary. Per-attack accuracies serialise as `robust_acc_<name>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clean_acc: f64,
    pub ensemble_acc: Option<f64>,
    pub fdr_clean: f64,
    pub fdr_adv: f64,
    pub afs_clean: f64,
    pub afs_adv: f64,
    pub scr_clean: f64,
    pub scr_adv: f64,
    pub mean_sep_deg: f64,
    pub min_sep_deg: f64,
    /// Accuracy of the model on the geometry attack's inputs.
    pub geometry_adv_acc: f64,
    #[serde(flatten)]
    pub robust_acc: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl MetricsReport {
    pub fn robust(&self, name: &str) -> Option<f64> {
        self.robust_acc.get(&format!("robust_acc_{name}")).copied()
    }
}

/// Clean and adversarial feature sets plus everything needed for the report.
pub struct Evaluation {
    pub report: MetricsReport,
    pub clean_features: Tensor,
    pub adv_features: Tensor,
}

fn features_chunked(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.rows();
    let d = params.arch().feature_dim;
    let mut out = Tensor::zeros(&[n, d]);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(crate::attacks::CHUNK) {
        let f = extract_features(params, &inputs.select_rows(chunk))?;
        for (k, &i) in chunk.iter().enumerate() {
            out.row_mut(i).copy_from_slice(f.row(k));
        }
    }
    Ok(out)
}

/// Per-attack and ensemble accuracy, plus geometry metrics on clean features and on
/// features of `geometry`-attacked inputs.
/// Class centers are the prototypes.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    attacks: &[(String, Attack)],
    geometry: &AttackConfig,
    seed: u64,
) -> Result<Evaluation> {
    let clean_mask = correct_mask(params, data.inputs(), data.labels())?;
    let mut robust_acc = BTreeMap::new();
    let mut alive = vec![true; data.len()];
    for (a, (name, attack)) in attacks.iter().enumerate() {
        let xa = attack_dataset(params, data, attack, seed.wrapping_add(a as u64))?;
        let mask = correct_mask(params, &xa, data.labels())?;
        for (s, ok) in alive.iter_mut().zip(&mask) {
            *s &= ok;
        }
        if robust_acc.insert(format!("robust_acc_{name}"), accuracy(&mask)).is_some() {
            return Err(Error::Config(format!("duplicate attack name `{name}`")));
        }
    }
    let geo_inputs =
        attack_dataset(params, data, &Attack::Pgd(geometry.clone()), seed.wrapping_add(attacks.len() as u64))?;
    let clean_features = features_chunked(params, data.inputs())?;
    let adv_features = features_chunked(params, &geo_inputs)?;
    let centers = params.bank().tensor().clone();
    let clean = FeatureSet::new(clean_features.clone(), data.labels().to_vec(), centers.clone())?;
    let adv = FeatureSet::new(adv_features.clone(), data.labels().to_vec(), centers.clone())?;
    let (mean_sep_deg, min_sep_deg) = angular_separation(&centers)?;
    let report = MetricsReport {
        clean_acc: accuracy(&clean_mask),
        ensemble_acc: (!attacks.is_empty()).then(|| accuracy(&alive)),
        fdr_clean: clean.fdr()?,
        fdr_adv: adv.fdr()?,
        afs_clean: clean.afs()?,
        afs_adv: adv.afs()?,
        scr_clean: clean.scr()?,
        scr_adv: adv.scr()?,
        mean_sep_deg,
        min_sep_deg,
        geometry_adv_acc: accuracy(&correct_mask(params, &geo_inputs, data.labels())?),
        robust_acc,
        timestamp: None,
    };
    Ok(Evaluation { report, clean_features, adv_features })
}

pub const FEATURE_HEADER_PREFIX: &str = "index,label,split";

/// CSV `index,label,split,f0..f{d-1}` with one block per `(split tag, features)` pair.
pub fn feature_csv(labels: &[usize], blocks: &[(&str, &Tensor)]) -> String {
    let d = blocks.first().map_or(0, |(_, t)| t.row_len());
    let mut s = String::from(FEATURE_HEADER_PREFIX);
    for k in 0..d {
        s.push_str(&format!(",f{k}"));
    }
    s.push('\n');
    for (tag, feats) in blocks {
        for (i, y) in labels.iter().enumerate() {
            s.push_str(&format!("{i},{y},{tag}"));
            for v in feats.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
    }
    s
}
