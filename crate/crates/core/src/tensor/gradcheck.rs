use super::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Finite-difference gradient checker.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
/// where `a` is the backward gradient and `n` the central difference. The
/// floor keeps coordinates whose true gradient is (near) zero from turning
/// round-off into huge relative errors.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-3 }
    }
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self { eps, ..Self::default() }
    }

    fn check_eps(&self) -> Result<()> {
        if (1e-6..=1e-3).contains(&self.eps) {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "grad_check",
                msg: format!("eps {} outside [1e-6, 1e-3]", self.eps),
            })
        }
    }

    /// Maximum relative error between `analytic` and central differences of
    /// `eval`, which returns `f` with coordinate `i` shifted by `delta`.
    fn compare<E>(&self, analytic: &[f64], mut eval: E) -> Result<f64>
    where
        E: FnMut(usize, f64) -> Result<f64>,
    {
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let numeric = (eval(i, self.eps)? - eval(i, -self.eps)?) / (2.0 * self.eps);
            let denom = a.abs().max(numeric.abs()).max(self.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        Ok(worst)
    }

    /// Returns the maximum relative error over all coordinates of `point`.
    pub fn run<F>(&self, f: F, point: &Tensor) -> Result<f64>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        self.check_eps()?;
        let mut g = Graph::new();
        let x = g.input(point.clone());
        let y = f(&mut g, x)?;
        scalar(&g, y)?;
        let analytic = g.backward(y)?.get(&g, x);
        self.compare(analytic.data(), |i, delta| {
            let mut p = point.clone();
            p.data_mut()[i] += delta;
            let mut g = Graph::no_grad();
            let x = g.constant(p);
            let y = f(&mut g, x)?;
            finite(g.item(y))
        })
    }

    /// Like [`GradCheck::run`], but differentiates with respect to the stored
    /// parameter `id`, which must not be frozen.
    pub fn run_param<F>(&self, f: F, store: &ParamStore, id: ParamId) -> Result<f64>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        self.check_eps()?;
        if store.get(id).frozen {
            return Err(TensorError::Invalid {
                op: "grad_check",
                msg: format!("parameter {} is frozen", store.get(id).name),
            });
        }
        let mut g = Graph::new();
        let y = f(&mut g, store)?;
        scalar(&g, y)?;
        let var = g.param(store, id);
        let analytic = g.backward(y)?.get(&g, var);
        let mut shifted = store.clone();
        self.compare(analytic.data(), |i, delta| {
            let orig = store.get(id).value.data()[i];
            shifted.get_mut(id).value.data_mut()[i] = orig + delta;
            let mut g = Graph::no_grad();
            let y = f(&mut g, &shifted)?;
            let v = g.item(y);
            shifted.get_mut(id).value.data_mut()[i] = orig;
            finite(v)
        })
    }
}

fn scalar(g: &Graph, y: Var) -> Result<()> {
    if g.value(y).len() == 1 {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op: "grad_check",
            msg: "function must be scalar-valued".into(),
        })
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite(format!("f = {v}")))
    }
}

/// [`GradCheck::run`] with the default floor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    GradCheck::new(eps).run(f, point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_row(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::row((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn polynomial_is_exact() {
        let e = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &Tensor::row(vec![1.0, 2.0, 3.0]),
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn softmax_cross_entropy() {
        for seed in 0..5 {
            let e = grad_check(|g, x| g.cross_entropy(x, &[2]), &random_row(4, seed), 1e-5).unwrap();
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn cosine_similarity_loss() {
        for seed in 0..5 {
            let p = random_row(6, 10 + seed);
            let e = grad_check(
                |g, x| {
                    let a = g.slice_cols(x, 0, 3)?;
                    let b = g.slice_cols(x, 3, 6)?;
                    let c = g.cosine_rows(a, b)?;
                    let s = g.sum(c);
                    Ok(g.scale(s, -1.0))
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn parameter_gradient_of_linear_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = store.add_glorot("w", 3, 2, &mut rng);
        let x = random_row(3, 8);
        let e = GradCheck::default()
            .run_param(
                |g, s| {
                    let xv = g.constant(x.clone());
                    let wv = g.param(s, w);
                    let y = g.matmul(xv, wv)?;
                    let t = g.tanh(y);
                    Ok(g.sum(t))
                },
                &store,
                w,
            )
            .unwrap();
        assert!(e < 1e-6, "{e}");
        store.get_mut(w).frozen = true;
        assert!(GradCheck::default()
            .run_param(|g, s| Ok(g.param(s, w)), &store, w)
            .is_err());
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(grad_check(|g, x| Ok(g.sum(x)), &Tensor::row(vec![1.0]), 0.1).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let r = grad_check(|g, x| Ok(g.log(x)).map(|l| g.sum(l)), &Tensor::row(vec![-1.0]), 1e-5);
        assert!(r.is_err());
    }
}
