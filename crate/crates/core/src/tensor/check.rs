use super::graph::{forward, Bindings, Graph, NodeId};
use super::{Tensor, TensorError};

/// Central-difference gradient of the scalar `output` with respect to the input `name`.
pub fn central_difference(
    graph: &Graph,
    output: NodeId,
    point: &Bindings,
    name: &str,
    step: f64,
) -> Result<Tensor, TensorError> {
    let base = point.get(name).ok_or_else(|| TensorError::Unbound(name.to_string()))?.clone();
    let mut grad = Tensor::zeros(base.shape());
    let mut probe = point.clone();
    for k in 0..base.len() {
        let mut eval_at = |delta: f64| -> Result<f64, TensorError> {
            let mut t = base.clone();
            t.data_mut()[k] += delta;
            probe.bind(name, t);
            Ok(forward(graph, &probe)?.value(output).item())
        };
        let hi = eval_at(step)?;
        let lo = eval_at(-step)?;
        grad.data_mut()[k] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every coordinate of
/// every bound graph input.
pub fn grad_check(graph: &Graph, output: NodeId, point: &Bindings, step: f64) -> Result<f64, TensorError> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(TensorError::GradCheck(format!("step {step} outside (0, 1e-2]")));
    }
    let names: Vec<&str> = graph.input_names().collect();
    let eval = forward(graph, point)?;
    let analytic = graph.backward_wrt(&eval, output, &names)?;
    let mut worst: f64 = 0.0;
    for name in names {
        let a = analytic.get(name).expect("gradient for every input");
        let num = central_difference(graph, output, point, name, step)?;
        for (k, (&x, &y)) in a.data().iter().zip(num.data()).enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(TensorError::GradCheck(format!("non-finite gradient for `{name}`[{k}]")));
            }
            worst = worst.max((x - y).abs() / x.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.square(x);
        let y = g.sum(s);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Bindings::new();
        p.bind("x", random(&mut rng, &[4, 3]));
        assert!(grad_check(&g, y, &p, 1e-5).unwrap() <= 1e-9);
    }

    #[test]
    fn rejects_bad_step() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.sum(x);
        let mut p = Bindings::new();
        p.bind("x", Tensor::scalar(1.0));
        assert!(grad_check(&g, y, &p, 0.0).is_err());
        assert!(grad_check(&g, y, &p, 0.1).is_err());
    }

    /// Independent straight-line evaluator for a 3-layer relu MLP.
    fn mlp_reference(x: &Tensor, layers: &[(Tensor, Tensor)]) -> Vec<f64> {
        let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for (li, (w, b)) in layers.iter().enumerate() {
            rows = rows
                .iter()
                .map(|h| {
                    (0..w.rows())
                        .map(|o| {
                            let mut s = b.data()[o];
                            for (i, hv) in h.iter().enumerate() {
                                s += w.row(o)[i] * hv;
                            }
                            if li + 1 < layers.len() {
                                s.max(0.0)
                            } else {
                                s
                            }
                        })
                        .collect()
                })
                .collect();
        }
        rows.concat()
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [5, 7, 6, 3];
        let mut g = Graph::new();
        let mut h = g.input("x");
        let mut layers = Vec::new();
        let mut p = Bindings::new();
        for l in 0..3 {
            let w = g.input(&format!("w{l}"));
            let b = g.input(&format!("b{l}"));
            h = g.affine(h, w, b);
            if l < 2 {
                h = g.relu(h);
            }
            let (wt, bt) = (random(&mut rng, &[dims[l + 1], dims[l]]), random(&mut rng, &[dims[l + 1]]));
            p.bind(&format!("w{l}"), wt.clone()).bind(&format!("b{l}"), bt.clone());
            layers.push((wt, bt));
        }
        let x = random(&mut rng, &[4, 5]);
        p.bind("x", x.clone());
        let ev = forward(&g, &p).unwrap();
        let reference = mlp_reference(&x, &layers);
        for (a, b) in ev.value(h).data().iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input("x");
        let (w0, b0, w1, b1) = (g.input("w0"), g.input("b0"), g.input("w1"), g.input("b1"));
        let h = g.affine(x, w0, b0);
        let h = g.relu(h);
        let o = g.affine(h, w1, b1);
        let ls = g.log_softmax(o);
        let pk = g.pick(ls, vec![0, 2, 1]);
        let loss = g.mean(pk);
        let mut p = Bindings::new();
        p.bind("x", random(&mut rng, &[3, 4]))
            .bind("w0", random(&mut rng, &[6, 4]))
            .bind("b0", random(&mut rng, &[6]))
            .bind("w1", random(&mut rng, &[3, 6]))
            .bind("b1", random(&mut rng, &[3]));
        let eval = forward(&g, &p).unwrap();
        let grads = backward(&g, &eval, loss).unwrap();
        for name in ["w0", "b0", "w1", "b1", "x"] {
            let num = central_difference(&g, loss, &p, name, 1e-5).unwrap();
            let ana = grads.get(name).unwrap();
            for (a, n) in ana.data().iter().zip(num.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel <= 1e-4 || (a - n).abs() < 1e-9, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn conv_and_pool_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input("x");
        let (w, b) = (g.input("w"), g.input("b"));
        let c = g.conv2d(x, w, b, 1);
        let c = g.square(c);
        let pl = g.max_pool2d(c);
        let r = g.reshape(pl, vec![2, 8]);
        let n = g.l2_norm(r);
        let loss = g.sum(n);
        let mut p = Bindings::new();
        p.bind("x", random(&mut rng, &[2, 2, 4, 4]))
            .bind("w", random(&mut rng, &[2, 2, 3, 3]))
            .bind("b", random(&mut rng, &[2]));
        assert!(grad_check(&g, loss, &p, 1e-6).unwrap() <= 1e-4);
    }

    #[test]
    fn remaining_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let bias = g.input("bias");
        let m = g.max(a, b);
        let bt = g.transpose(b);
        let mm = g.matmul(a, bt);
        let sm = g.softmax(mm);
        let sm = g.add(sm, bias);
        let rs = g.row_sum(sm);
        let ip = g.inner_product(m, a);
        let e = g.exp(ip);
        let sq = g.sqrt_abs(a);
        let gr = g.gather_rows(sq, vec![1, 1, 0]);
        let s1 = g.mean(gr);
        let l = g.mul(rs, e);
        let s2 = g.sum(l);
        let s3 = g.scale(s1, 0.7);
        let id = g.identity(s3);
        let tot = g.add(s2, id);
        let sq2 = g.square(tot);
        let one = g.constant(Tensor::scalar(1.0));
        let pos = g.add(sq2, one);
        let lg = g.log(pos);
        let mut p = Bindings::new();
        p.bind("a", random(&mut rng, &[3, 4]))
            .bind("b", random(&mut rng, &[3, 4]))
            .bind("bias", random(&mut rng, &[3]));
        assert!(grad_check(&g, lg, &p, 1e-6).unwrap() <= 1e-6);
    }
}
