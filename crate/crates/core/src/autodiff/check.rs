//! Gradient verification: reverse-mode vs central finite differences,
//! always in f64 so the oracle stays tight.

use super::tape::{Tape, Var};

/// Central differences (f(x+eps) - f(x-eps)) / (2 eps), per coordinate.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "eps must be positive");
    let mut p = point.to_vec();
    let mut g = vec![0.0; point.len()];
    for i in 0..point.len() {
        let x0 = p[i];
        p[i] = x0 + eps;
        let fp = f(&p);
        p[i] = x0 - eps;
        let fm = f(&p);
        p[i] = x0;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// max_i |a_i − b_i| / max(|a_i|, |b_i|, 1e-8)
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Max relative error between the tape's gradients and finite
/// differences. `build` must create its leaf tensors from `point`
/// (consuming all of it, in order) and return (leaves, scalar loss);
/// it is re-invoked on a fresh tape for every perturbed evaluation.
pub fn grad_check<F>(build: F, point: &[f64], eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[f64]) -> (Vec<Var>, Var),
{
    let mut tape = Tape::new();
    let (leaves, loss) = build(&mut tape, point);
    let lens: Vec<usize> = leaves.iter().map(|&v| tape.value(v).len()).collect();
    assert_eq!(
        lens.iter().sum::<usize>(),
        point.len(),
        "leaves must cover the point exactly"
    );
    let grads = tape.backward(loss).expect("backward on scalar loss");
    let mut analytic = Vec::with_capacity(point.len());
    for (k, &v) in leaves.iter().enumerate() {
        match grads.data(v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(lens[k])),
        }
    }

    let mut f = |p: &[f64]| -> f64 {
        let mut t = Tape::new();
        let (_, l) = build(&mut t, p);
        t.value(l).item()
    };
    let fd = finite_diff_grad(&mut f, point, eps);
    max_rel_err(&analytic, &fd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let err = grad_check(
            |tape, p| {
                let x = tape.leaf(Tensor::from_f64(vec![p.len()], p));
                let s = tape.scale(x, 3.0);
                (vec![x], tape.reduce_sum(s))
            },
            &[0.3, -1.2, 2.5],
            1e-4,
        );
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn sigmoid_chain_within_1e4_at_eps_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let err = grad_check(
            |tape, p| {
                let x = tape.leaf(Tensor::from_f64(vec![p.len()], p));
                let a = tape.sigmoid(x);
                let b = tape.sigmoid(a);
                (vec![x], tape.reduce_mean(b))
            },
            &point,
            1e-4,
        );
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn deliberately_wrong_gradient_is_detected() {
        // Analytic gradient of mean(sigmoid(x)) against finite differences
        // of a 5%-rescaled function: the checker must flag it loudly.
        let point = [0.4, -0.9, 1.3];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(vec![3], &point));
        let s = tape.sigmoid(x);
        let loss = tape.reduce_mean(s);
        let _ = loss;
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.data(x).unwrap().to_vec();

        let mut wrong = |p: &[f64]| -> f64 {
            let mut t = Tape::new();
            let scaled: Vec<f64> = p.iter().map(|v| v * 1.05).collect();
            let x = t.leaf(Tensor::from_f64(vec![3], &scaled));
            let s = t.sigmoid(x);
            let l = t.reduce_mean(s);
            t.value(l).item()
        };
        let fd = finite_diff_grad(&mut wrong, &point, 1e-4);
        assert!(max_rel_err(&analytic, &fd) > 1e-2);
    }
}
