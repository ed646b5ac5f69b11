//! Feature extractor `f(x; θ)` and the prototype head.
//!
//! Each class owns one prototype vector that is at the same time the weight
//! row of the classifier: logits are `c_jᵀ f / α` and probabilities are their
//! softmax. Prototypes live on a sphere of radius `α`; features do not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{forward, Bindings, Graph, NodeId, Tensor};

/// Graph input name under which the prototype matrix `[M, d]` is bound.
pub const PROTOTYPES: &str = "prototypes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorFamily {
    Mlp,
    /// Two conv/relu/2×2-maxpool stages followed by the dense layers.
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub family: ExtractorFamily,
    /// `[D]` for the MLP, `[C, H, W]` for the CNN.
    pub input_shape: Vec<usize>,
    /// Widths of the hidden dense layers (relu after each).
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_conv_channels() -> Vec<usize> {
    vec![8, 16]
}

fn default_kernel() -> usize {
    5
}

/// Shape and fan-in of one named extractor tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ArchitectureConfig {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            family: ExtractorFamily::Mlp,
            input_shape: vec![input_dim],
            hidden,
            feature_dim,
            conv_channels: default_conv_channels(),
            kernel: default_kernel(),
        }
    }

    pub fn small_cnn(
        input_shape: [usize; 3],
        conv_channels: Vec<usize>,
        hidden: Vec<usize>,
        feature_dim: usize,
    ) -> Self {
        Self {
            family: ExtractorFamily::SmallCnn,
            input_shape: input_shape.to_vec(),
            hidden,
            feature_dim,
            conv_channels,
            kernel: default_kernel(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config(format!("feature dimension {} < 2", self.feature_dim)));
        }
        if self.input_shape.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::Config("zero extent in architecture".into()));
        }
        match self.family {
            ExtractorFamily::Mlp if self.input_shape.len() != 1 => {
                Err(Error::Config(format!("mlp expects a flat input shape, got {:?}", self.input_shape)))
            }
            ExtractorFamily::SmallCnn => {
                if self.input_shape.len() != 3 {
                    return Err(Error::Config(format!("small-cnn expects [C,H,W], got {:?}", self.input_shape)));
                }
                if self.conv_channels.is_empty() || self.conv_channels.contains(&0) || self.kernel.is_multiple_of(2) {
                    return Err(Error::Config("small-cnn needs non-zero channels and an odd kernel".into()));
                }
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for _ in &self.conv_channels {
                    if h < 2 || w < 2 {
                        return Err(Error::Config("input too small for the pooling stages".into()));
                    }
                    h /= 2;
                    w /= 2;
                }
                Ok(())
            }
            ExtractorFamily::Mlp => Ok(()),
        }
    }

    /// Extractor tensors in checkpoint order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut width = self.input_len();
        if self.family == ExtractorFamily::SmallCnn {
            let (mut c, mut h, mut w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
            for (i, &out) in self.conv_channels.iter().enumerate() {
                let k = self.kernel;
                specs.push(ParamSpec { name: format!("conv{i}.weight"), shape: vec![out, c, k, k], fan_in: c * k * k });
                specs.push(ParamSpec { name: format!("conv{i}.bias"), shape: vec![out], fan_in: c * k * k });
                c = out;
                h /= 2;
                w /= 2;
            }
            width = c * h * w;
        }
        let widths = self.hidden.iter().copied().chain(std::iter::once(self.feature_dim));
        for (i, out) in widths.enumerate() {
            specs.push(ParamSpec { name: format!("fc{i}.weight"), shape: vec![out, width], fan_in: width });
            specs.push(ParamSpec { name: format!("fc{i}.bias"), shape: vec![out], fan_in: width });
            width = out;
        }
        specs
    }

    /// Appends the extractor to `g` for a batch of `batch` samples bound at `x`
    /// (shape `[batch, ..input_shape]`). Parameters are graph inputs named as in
    /// [`Self::param_specs`]. Returns the `[batch, d]` feature node.
    pub fn build_features(&self, g: &mut Graph, x: NodeId, batch: usize) -> NodeId {
        let mut h = x;
        if self.family == ExtractorFamily::SmallCnn {
            let mut shape = self.input_shape.clone();
            for i in 0..self.conv_channels.len() {
                let w = g.input(&format!("conv{i}.weight"));
                let b = g.input(&format!("conv{i}.bias"));
                h = g.conv2d(h, w, b, self.kernel / 2);
                h = g.relu(h);
                h = g.max_pool2d(h);
                shape = vec![self.conv_channels[i], shape[1] / 2, shape[2] / 2];
            }
            h = g.reshape(h, vec![batch, shape.iter().product()]);
        } else {
            h = g.reshape(h, vec![batch, self.input_len()]);
        }
        let layers = self.hidden.len() + 1;
        for i in 0..layers {
            let w = g.input(&format!("fc{i}.weight"));
            let b = g.input(&format!("fc{i}.bias"));
            h = g.affine(h, w, b);
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Class prototypes `[M, d]` together with the sphere radius `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Tensor,
    alpha: f64,
}

impl PrototypeBank {
    pub fn new(prototypes: Tensor, alpha: f64) -> Result<Self> {
        let &[m, d] = prototypes.shape() else {
            return Err(Error::Config(format!("prototypes must be [M, d], got {:?}", prototypes.shape())));
        };
        if m < 2 || d < 2 {
            return Err(Error::Config(format!("need M >= 2 and d >= 2, got M={m}, d={d}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("radius must be positive, got {alpha}")));
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite("prototype bank".into()));
        }
        Ok(Self { prototypes, alpha })
    }

    pub fn from_rows(rows: &[Vec<f64>], alpha: f64) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, alpha)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        self.prototypes.row(j)
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.num_classes()).map(|j| l2(self.prototype(j))).collect()
    }

    pub(crate) fn replace(&mut self, prototypes: Tensor) -> Result<()> {
        if prototypes.shape() != self.prototypes.shape() {
            return Err(Error::Config("prototype shape changed".into()));
        }
        self.prototypes = prototypes;
        Ok(())
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales every prototype onto the sphere of radius `α`.
pub fn renormalize_prototypes(bank: &PrototypeBank) -> Result<PrototypeBank> {
    let mut out = bank.prototypes.clone();
    for j in 0..bank.num_classes() {
        let norm = l2(bank.prototype(j));
        if !(norm > 0.0) {
            return Err(Error::Degenerate(format!("prototype {j} has collapsed to zero norm")));
        }
        let s = bank.alpha / norm;
        out.row_mut(j).iter_mut().for_each(|v| *v *= s);
    }
    Ok(PrototypeBank { prototypes: out, alpha: bank.alpha })
}

/// Extractor tensors plus the prototype head, tied to their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchitectureConfig,
    extractor: Vec<(String, Tensor)>,
    bank: PrototypeBank,
}

impl ModelParams {
    /// Assembles parameters, checking every tensor against the architecture.
    pub fn from_parts(arch: ArchitectureConfig, extractor: Vec<(String, Tensor)>, bank: PrototypeBank) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != extractor.len() {
            return Err(Error::Config(format!("expected {} extractor tensors, got {}", specs.len(), extractor.len())));
        }
        for (spec, (name, t)) in specs.iter().zip(&extractor) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        if bank.dim() != arch.feature_dim {
            return Err(Error::Config(format!(
                "prototype dimension {} differs from feature dimension {}",
                bank.dim(),
                arch.feature_dim
            )));
        }
        Ok(Self { arch, extractor, bank })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut PrototypeBank {
        &mut self.bank
    }

    pub fn extractor(&self) -> &[(String, Tensor)] {
        &self.extractor
    }

    pub(crate) fn extractor_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.extractor
    }

    pub fn num_classes(&self) -> usize {
        self.bank.num_classes()
    }

    /// Binds every extractor tensor and the prototypes by reference.
    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        for (name, t) in &self.extractor {
            b.bind_ref(name, t);
        }
        b.bind_ref(PROTOTYPES, self.bank.tensor());
    }

    /// `[B, ..input_shape]` view of a flat `[B, D]` or already-shaped batch.
    pub fn shape_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let b = batch.rows();
        if batch.row_len() != self.arch.input_len() || batch.shape().is_empty() {
            return Err(Error::Config(format!(
                "batch {:?} does not match input shape {:?}",
                batch.shape(),
                self.arch.input_shape
            )));
        }
        let mut shape = vec![b];
        shape.extend(&self.arch.input_shape);
        Ok(batch.clone().reshape(shape)?)
    }
}

/// Fresh parameters: fan-in scaled uniform weights, zero biases, and
/// isotropic Gaussian prototype directions scaled to radius `α`.
pub fn init_model(cfg: &ArchitectureConfig, num_classes: usize, alpha: f64, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = Vec::new();
    for spec in cfg.param_specs() {
        let n: usize = spec.shape.iter().product();
        let data = if spec.name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        extractor.push((spec.name, Tensor::new(spec.shape, data)?));
    }
    let d = cfg.feature_dim;
    let mut rows = Vec::with_capacity(num_classes);
    while rows.len() < num_classes {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2(&v);
        if norm > 1e-12 {
            rows.push(v.iter().map(|x| x * alpha / norm).collect());
        }
    }
    let bank = PrototypeBank::from_rows(&rows, alpha)?;
    ModelParams::from_parts(cfg.clone(), extractor, bank)
}

/// `f(x; θ)` for every row of `batch`.
pub fn extract_features(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let x = params.shape_batch(batch)?;
    let mut g = Graph::new();
    let xn = g.input("x");
    let f = params.arch.build_features(&mut g, xn, x.rows());
    let mut b = Bindings::new();
    params.bind(&mut b);
    b.bind("x", x);
    Ok(forward(&g, &b)?.value(f).clone())
}

/// Appends the `[B, M]` logits `c_jᵀ f / α` to `g`.
pub fn logits_node(g: &mut Graph, features: NodeId, prototypes: NodeId, alpha: f64) -> NodeId {
    let pt = g.transpose(prototypes);
    let raw = g.matmul(features, pt);
    g.scale(raw, 1.0 / alpha)
}

/// Softmax over `c_jᵀ f / α` for every feature row.
pub fn class_probabilities(features: &Tensor, bank: &PrototypeBank) -> Result<Tensor> {
    if features.shape().len() != 2 || features.shape()[1] != bank.dim() {
        return Err(Error::Config(format!(
            "features {:?} do not match prototype dimension {}",
            features.shape(),
            bank.dim()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("features".into()));
    }
    let m = bank.num_classes();
    let mut out = Tensor::zeros(&[features.rows(), m]);
    for r in 0..features.rows() {
        let f = features.row(r);
        let logits: Vec<f64> =
            (0..m).map(|j| bank.prototype(j).iter().zip(f).map(|(c, x)| c * x).sum::<f64>() / bank.alpha).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
            *o = e / z;
        }
    }
    Ok(out)
}

/// Row-wise argmax; ties resolve to the smallest class index.
pub fn predict(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted labels for a batch of raw inputs.
pub fn classify(params: &ModelParams, batch: &Tensor) -> Result<Vec<usize>> {
    let f = extract_features(params, batch)?;
    Ok(predict(&class_probabilities(&f, params.bank())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(rows: &[[f64; 2]], alpha: f64) -> PrototypeBank {
        PrototypeBank::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), alpha).unwrap()
    }

    #[test]
    fn init_puts_prototypes_on_sphere_and_is_deterministic() {
        let cfg = ArchitectureConfig::mlp(3, vec![8], 4);
        for seed in 0..20 {
            let p = init_model(&cfg, 5, 40.0, seed).unwrap();
            for n in p.bank().norms() {
                assert!((n - 40.0).abs() <= 1e-9);
            }
            assert_eq!(p, init_model(&cfg, 5, 40.0, seed).unwrap());
        }
        assert!(init_model(&ArchitectureConfig::mlp(3, vec![], 1), 3, 1.0, 0).is_err());
        assert!(init_model(&cfg, 1, 1.0, 0).is_err());
    }

    #[test]
    fn prototype_directions_are_isotropic() {
        let cfg = ArchitectureConfig::mlp(2, vec![], 2);
        let mut sum = [0.0; 2];
        let mut count = 0.0;
        for seed in 0..10_000 {
            let p = init_model(&cfg, 10, 3.0, seed).unwrap();
            for j in 0..10 {
                sum[0] += p.bank().prototype(j)[0];
                sum[1] += p.bank().prototype(j)[1];
                count += 1.0;
            }
        }
        let mean_norm = (sum[0] * sum[0] + sum[1] * sum[1]).sqrt() / count;
        assert!(mean_norm <= 0.1 * 3.0, "mean direction norm {mean_norm}");
    }

    #[test]
    fn identity_mlp_passes_inputs_through() {
        let cfg = ArchitectureConfig::mlp(3, vec![3], 3);
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let ext = vec![
            ("fc0.weight".to_string(), eye.clone()),
            ("fc0.bias".to_string(), Tensor::zeros(&[3])),
            ("fc1.weight".to_string(), eye),
            ("fc1.bias".to_string(), Tensor::zeros(&[3])),
        ];
        let b = PrototypeBank::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 1.0).unwrap();
        let p = ModelParams::from_parts(cfg, ext, b).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, 2.0, 0.0], vec![1.0, 0.25, 3.0]]).unwrap();
        assert_eq!(extract_features(&p, &x).unwrap(), x);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let p = init_model(&ArchitectureConfig::mlp(4, vec![6, 5], 2), 3, 1.0, 1).unwrap();
        let f = extract_features(&p, &Tensor::zeros(&[3, 4])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(extract_features(&p, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn cnn_features_have_feature_dim() {
        let cfg = ArchitectureConfig::small_cnn([1, 8, 8], vec![2, 3], vec![5], 2);
        let p = init_model(&cfg, 3, 1.0, 4).unwrap();
        let f = extract_features(&p, &Tensor::full(&[2, 64], 0.5)).unwrap();
        assert_eq!(f.shape(), &[2, 2]);
    }

    #[test]
    fn orthogonal_features_give_uniform_probabilities() {
        let b = bank(&[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]], 1.0);
        let f = Tensor::from_rows(&[vec![0.0, 3.0]]).unwrap();
        let p = class_probabilities(&f, &b).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_hand_softmax() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let p = class_probabilities(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &b).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn scaling_prototypes_and_radius_together_is_invariant() {
        let b = bank(&[[0.6, 0.8], [-1.0, 0.0], [0.0, -1.0]], 1.0);
        let k = 40.0;
        let scaled = PrototypeBank::new(b.tensor().map(|v| v * k), k).unwrap();
        let f = Tensor::from_rows(&[vec![0.3, -2.0], vec![5.0, 1.0]]).unwrap();
        let p1 = class_probabilities(&f, &b).unwrap();
        let p2 = class_probabilities(&f, &scaled).unwrap();
        assert!(p1.max_abs_diff(&p2) <= 1e-12);
    }

    #[test]
    fn predict_argmax_and_ties() {
        let p = Tensor::from_rows(&[vec![0.1, 0.7, 0.2], vec![0.5, 0.5, 0.0], vec![0.2, 0.2, 0.6]]).unwrap();
        assert_eq!(predict(&p), vec![1, 0, 2]);
    }

    #[test]
    fn renormalize_examples() {
        let b = bank(&[[3.0, 4.0], [0.0, -2.0]], 40.0);
        let r = renormalize_prototypes(&b).unwrap();
        assert_eq!(r.prototype(0), &[24.0, 32.0]);
        let again = renormalize_prototypes(&r).unwrap();
        assert!(again.tensor().max_abs_diff(r.tensor()) <= 1e-12);
        let zero = bank(&[[0.0, 0.0], [1.0, 0.0]], 1.0);
        assert!(matches!(renormalize_prototypes(&zero), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn probability_rows_are_stochastic(
            protos in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4),
            feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
            alpha in 0.5f64..50.0,
        ) {
            prop_assume!(protos.iter().all(|p| l2(p) > 1e-3));
            let b = renormalize_prototypes(&PrototypeBank::from_rows(&protos, alpha).unwrap()).unwrap();
            for n in b.norms() {
                prop_assert!((n - alpha).abs() <= 1e-9);
            }
            let f = Tensor::from_rows(&feats).unwrap();
            let p = class_probabilities(&f, &b).unwrap();
            let pred = predict(&p);
            for r in 0..p.rows() {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(p.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
                let raw: Vec<f64> = (0..4).map(|j| b.prototype(j).iter().zip(f.row(r)).map(|(a, c)| a * c).sum()).collect();
                let best = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(raw[pred[r]] >= best - 1e-9);
            }
        }

        #[test]
        fn larger_radius_flattens_probabilities(
            protos in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3),
            feat in prop::collection::vec(-5.0f64..5.0, 2),
            alpha in 0.5f64..20.0,
        ) {
            prop_assume!(protos.iter().all(|p| l2(p) > 1e-3));
            let b = renormalize_prototypes(&PrototypeBank::from_rows(&protos, alpha).unwrap()).unwrap();
            // prototypes fixed, α doubled: every logit halves
            let flat = PrototypeBank::new(b.tensor().clone(), 2.0 * alpha).unwrap();
            let f = Tensor::from_rows(&[feat]).unwrap();
            let p1 = class_probabilities(&f, &b).unwrap();
            let p2 = class_probabilities(&f, &flat).unwrap();
            let m1 = p1.data().iter().copied().fold(0.0, f64::max);
            let m2 = p2.data().iter().copied().fold(0.0, f64::max);
            prop_assert!(m2 <= m1 + 1e-15);
        }
    }
}
