use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares the analytic gradient of a scalar function against central
/// differences and returns `max |analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must rebuild its computation from the supplied leaf on every call.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
    )
}

/// Multi-input variant of [`finite_diff_check`]; the error is the maximum over
/// every element of every input.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("f evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(TensorError::NonFinite("f at the base point".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (ti, t) in xs.iter().enumerate() {
        for e in 0..t.len() {
            let base = t.data()[e];
            probe[ti].data_mut()[e] = base + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[e] = base - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[ti][e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = finite_diff_check(|g, v| g.sum(v), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = finite_diff_check(
            |g, v| {
                let c = g.constant(Tensor::from_vec(vec![f64::INFINITY]));
                let y = g.mul(v, c)?;
                g.sum(y)
            },
            &x,
            1e-4,
        );
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }

    type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

    fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let n = g.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| 0.5 + 0.25 * (i % 5) as f64).collect();
        let w = g.constant(Tensor::new(g.value(y).shape().to_vec(), w)?);
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    /// Each differentiable op on `[3, 4]` inputs (a `[4, 2]` right factor for
    /// matmul), reduced to a scalar by a fixed weighted sum.
    const OPS: [(&str, usize, OpFn); 14] = [
        ("add", 2, |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("sub", 2, |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("mul", 2, |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("mul_broadcast", 2, |g, v| {
            let r = g.gather_rows(v[1], &[2])?;
            let r = g.reshape(r, &[4])?;
            let y = g.mul(v[0], r)?;
            weighted_sum(g, y)
        }),
        ("scale", 1, |g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y)
        }),
        ("matmul", 3, |g, v| {
            let y = g.matmul(v[0], v[2])?;
            weighted_sum(g, y)
        }),
        ("tanh", 1, |g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y)
        }),
        ("relu", 1, |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y)
        }),
        ("sigmoid", 1, |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y)
        }),
        ("sum", 1, |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }),
        ("mean", 1, |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        ("mse", 2, |g, v| g.mse(v[0], v[1])),
        ("concat", 2, |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            weighted_sum(g, y)
        }),
        ("gather_rows", 1, |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2])?;
            weighted_sum(g, y)
        }),
    ];

    fn inputs(seed: u64) -> Vec<Tensor<f64>> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed);
        let mut draw = |r: usize, c: usize| {
            let data = (0..r * c)
                .map(|_| {
                    // Keep clear of the relu kink.
                    let x: f64 = rng.gen_range(-2.0..2.0);
                    if x.abs() < 1e-3 {
                        x + 1e-2
                    } else {
                        x
                    }
                })
                .collect();
            Tensor::matrix(r, c, data).unwrap()
        };
        vec![draw(3, 4), draw(3, 4), draw(4, 2)]
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_matches_central_differences(seed in proptest::prelude::any::<u64>()) {
            let xs = inputs(seed);
            for (name, arity, op) in OPS {
                let used: Vec<Tensor<f64>> = match arity {
                    3 => vec![xs[0].clone(), xs[1].clone(), xs[2].clone()],
                    n => xs[..n].to_vec(),
                };
                let err = finite_diff_check_many(op, &used, 1e-6).unwrap();
                proptest::prop_assert!(err < 1e-5, "{} {}", name, err);
            }
        }

        #[test]
        fn backward_is_linear(seed in proptest::prelude::any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let xs = inputs(seed);
            let grad_of = |f: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>| {
                let mut g = Graph::new();
                let x = g.param(xs[0].clone());
                let l = f(&mut g, x).unwrap();
                g.backward(l).unwrap();
                g.grad(x).unwrap().to_vec()
            };
            let l1 = |g: &mut Graph<f64>, x: Var| {
                let t = g.tanh(x);
                weighted_sum(g, t)
            };
            let l2 = |g: &mut Graph<f64>, x: Var| {
                let s = g.sigmoid(x);
                let m = g.mul(s, x)?;
                g.mean(m)
            };
            let both = grad_of(&|g, x| {
                let u = l1(g, x)?;
                let v = l2(g, x)?;
                let u = g.scale(u, a);
                let v = g.scale(v, b);
                g.add(u, v)
            });
            let (g1, g2) = (grad_of(&l1), grad_of(&l2));
            for k in 0..both.len() {
                proptest::prop_assert!((both[k] - (a * g1[k] + b * g2[k])).abs() < 1e-6);
            }
        }

        #[test]
        fn stop_gradient_blocks_one_path(seed in proptest::prelude::any::<u64>()) {
            let x0 = inputs(seed).swap_remove(0);
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let s = g.stop_gradient(x);
            let y = g.add(x, s).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap();
            proptest::prop_assert!(g.grad(x).unwrap().iter().all(|&d| d == 1.0));
        }

        #[test]
        fn bounded_inputs_stay_finite(data in proptest::collection::vec(-10.0f64..10.0, 12)) {
            let x0 = Tensor::matrix(3, 4, data).unwrap();
            let mut g = Graph::new();
            let x = g.param(x0);
            let w = g.param(Tensor::filled(&[4, 4], 10.0));
            let h = g.matmul(x, w).unwrap();
            let parts = [g.tanh(h), g.sigmoid(h), g.relu(h)];
            let c = g.concat(&parts).unwrap();
            let sq = g.mul(c, c).unwrap();
            let l = g.mse(sq, c).unwrap();
            g.backward(l).unwrap();
            proptest::prop_assert!(g.value(l).all_finite());
            proptest::prop_assert!(g.grad(x).unwrap().iter().all(|d| d.is_finite()));
        }
    }
}
