//! Central-difference checks of every loss component at random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{nearest_negatives, LossGraph, LossWeights, Objective, PrototypeFlow, X_ADV, X_CLEAN};
use crate::model::{init_model, logits_node, ArchitectureConfig, PrototypeBank, PROTOTYPES};
use crate::tensor::{grad_check, Bindings, Graph, NodeId, Tensor};

pub const COMPONENTS: [&str; 5] = ["ce", "dpp", "dnp", "dfa", "composite"];
pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
/// Smallest coordinate gap between paired prototypes at DNP check points.
pub const DNP_MIN_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive shape")
}

/// Graph and output, plus one node whose barrier flag breaks the gradient on purpose.
struct Case {
    graph: Graph,
    output: NodeId,
    weak_point: NodeId,
    point: Bindings<'static>,
}

fn ce_case(rng: &mut ChaCha8Rng) -> Case {
    let (b, m) = (5, 4);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let mut g = Graph::new();
    let z = g.input("logits");
    let ls = g.log_softmax(z);
    let pk = g.pick(ls, labels);
    let s = g.mean(pk);
    let out = g.scale(s, -1.0);
    let mut point = Bindings::new();
    point.bind("logits", random(rng, &[b, m], -3.0, 3.0));
    Case { graph: g, output: out, weak_point: ls, point }
}

fn dpp_case(rng: &mut ChaCha8Rng) -> Case {
    let (b, m, d, alpha, lambda) = (4, 3, 3, 2.5, 0.1);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let mut g = Graph::new();
    let f = g.input("features");
    let c = g.input(PROTOTYPES);
    let l = logits_node(&mut g, f, c, alpha);
    let ls = g.log_softmax(l);
    let pk = g.pick(ls, labels.clone());
    let ce = g.scale(pk, -1.0);
    let cy = g.gather_rows(c, labels);
    let diff = g.sub(f, cy);
    let sq = g.square(diff);
    let rs = g.row_sum(sq);
    let pull = g.scale(rs, 0.5 * lambda);
    let per = g.add(ce, pull);
    let out = g.mean(per);
    let mut point = Bindings::new();
    point.bind("features", random(rng, &[b, d], -2.0, 2.0)).bind(PROTOTYPES, random(rng, &[m, d], -2.0, 2.0));
    Case { graph: g, output: out, weak_point: cy, point }
}

fn dnp_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, d) = (4, 3);
    // resample until every paired coordinate gap clears the kink
    let (protos, neg) = loop {
        let p = random(rng, &[m, d], -2.0, 2.0);
        let rows: Vec<Vec<f64>> = (0..m).map(|j| p.row(j).to_vec()).collect();
        let neg = nearest_negatives(&PrototypeBank::from_rows(&rows, 1.0).expect("valid bank"));
        let clear = (0..m).all(|j| (0..d).all(|i| (rows[j][i] - rows[neg[j]][i]).abs() >= DNP_MIN_GAP));
        if clear {
            break (p, neg);
        }
    };
    let mut g = Graph::new();
    let c = g.input(PROTOTYPES);
    let cn = g.gather_rows(c, neg);
    let diff = g.sub(c, cn);
    let r = g.sqrt_abs(diff);
    let s = g.sum(r);
    let out = g.scale(s, -1.0 / m as f64);
    let mut point = Bindings::new();
    point.bind(PROTOTYPES, protos);
    Case { graph: g, output: out, weak_point: cn, point }
}

fn dfa_case(rng: &mut ChaCha8Rng) -> Case {
    let (b, m) = (5, 3);
    let mut g = Graph::new();
    let zc = g.input("logits_clean");
    let za = g.input("logits_adv");
    let lc = g.log_softmax(zc);
    let la = g.log_softmax(za);
    let pc = g.exp(lc);
    let gap = g.sub(lc, la);
    let w = g.mul(pc, gap);
    let kl = g.row_sum(w);
    let out = g.mean(kl);
    let mut point = Bindings::new();
    point.bind("logits_clean", random(rng, &[b, m], -2.0, 2.0)).bind("logits_adv", random(rng, &[b, m], -2.0, 2.0));
    Case { graph: g, output: out, weak_point: la, point }
}

fn composite_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<Case> {
    let arch = ArchitectureConfig::mlp(3, vec![6], 2);
    let params = init_model(&arch, 3, 2.0, seed)?;
    let b = 4;
    let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let w = LossWeights { dpp: 0.1, dnp: 0.1, dfa: 2.0, alpha: 2.0 };
    let lg = LossGraph::build(
        &arch,
        &labels,
        &nearest_negatives(params.bank()),
        &Objective::adv_dpnp(w),
        PrototypeFlow::OPEN,
    );
    let mut point = Bindings::new();
    for (n, t) in params.extractor() {
        point.bind(n, t.clone());
    }
    point
        .bind(PROTOTYPES, params.bank().tensor().clone())
        .bind(X_CLEAN, random(rng, &[b, 3], 0.0, 1.0))
        .bind(X_ADV, random(rng, &[b, 3], 0.0, 1.0));
    let weak_point = lg.probs_clean;
    Ok(Case { graph: lg.graph, output: lg.total, weak_point, point })
}

/// Maximum relative gradient error of each component at a point drawn from `seed`.
/// `corrupt` names a component whose graph gets a stray gradient barrier.
pub fn check_components(seed: u64, corrupt: Option<&str>) -> Result<Vec<ComponentCheck>> {
    if let Some(c) = corrupt {
        if !COMPONENTS.contains(&c) {
            return Err(Error::Config(format!("unknown component `{c}`")));
        }
    }
    let mut out = Vec::new();
    for (k, name) in COMPONENTS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut case = match *name {
            "ce" => ce_case(&mut rng),
            "dpp" => dpp_case(&mut rng),
            "dnp" => dnp_case(&mut rng),
            "dfa" => dfa_case(&mut rng),
            _ => composite_case(&mut rng, seed)?,
        };
        if corrupt == Some(*name) {
            case.graph.set_barrier(case.weak_point, true);
        }
        let err = grad_check(&case.graph, case.output, &case.point, STEP)?;
        out.push(ComponentCheck { component: name.to_string(), max_rel_error: err, passed: err <= TOLERANCE });
    }
    Ok(out)
}
