//! Central-finite-difference checks for every tape operator and every
//! loss graph, at randomized points (64-bit). Sample points keep a margin
//! from the kinks (leaky-relu origin, clamp edges, the p = 0.5 threshold
//! inside the label-flip loss) so the difference quotient is valid.

use hetseg_core::autodiff::{grad_check, Tape, Tensor, Var};
use hetseg_core::losses::{
    base_graph, label_flip_graph, masked_mean_graph, predictive_variance_graph, BaseLoss,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xD1FF)
}

/// Random point with |x_i| in [margin, hi], sign random.
fn sample(rng: &mut ChaCha8Rng, n: usize, margin: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(margin..hi) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Run grad_check over TRIALS random points. `build` receives the tape
/// and the flat point; it must create leaves covering the point in order
/// and return them plus a scalar loss node.
fn check<F>(name: &str, n: usize, margin: f64, hi: f64, build: F)
where
    F: Fn(&mut Tape<f64>, &[f64]) -> (Vec<Var>, Var),
{
    let mut r = rng();
    for trial in 0..TRIALS {
        let point = sample(&mut r, n, margin, hi);
        let err = grad_check(&build, &point, EPS);
        assert!(err < TOL, "{name} trial {trial}: rel err {err}");
    }
}

fn leaf(tape: &mut Tape<f64>, xs: &[f64]) -> Var {
    tape.leaf(Tensor::new(vec![xs.len()], xs.to_vec()))
}

#[test]
fn elementwise_arithmetic_ops() {
    check("add", 8, 0.1, 2.0, |t, p| {
        let a = leaf(t, &p[..4]);
        let b = leaf(t, &p[4..]);
        let s = t.add(a, b);
        let m = t.reduce_mean(s);
        (vec![a, b], m)
    });
    check("sub", 8, 0.1, 2.0, |t, p| {
        let a = leaf(t, &p[..4]);
        let b = leaf(t, &p[4..]);
        let s = t.sub(a, b);
        let sq = t.mul(s, s);
        let m = t.reduce_mean(sq);
        (vec![a, b], m)
    });
    check("mul", 8, 0.1, 2.0, |t, p| {
        let a = leaf(t, &p[..4]);
        let b = leaf(t, &p[4..]);
        let s = t.mul(a, b);
        let m = t.reduce_sum(s);
        (vec![a, b], m)
    });
    check("neg_scale_add_scalar", 5, 0.1, 2.0, |t, p| {
        let a = leaf(t, p);
        let n = t.neg(a);
        let sc = t.scale(n, 1.7);
        let sh = t.add_scalar(sc, 0.3);
        let sq = t.mul(sh, sh);
        let m = t.reduce_mean(sq);
        (vec![a], m)
    });
}

#[test]
fn elementwise_nonlinear_ops() {
    check("sigmoid", 6, 0.05, 6.0, |t, p| {
        let a = leaf(t, p);
        let s = t.sigmoid(a);
        let m = t.reduce_sum(s);
        (vec![a], m)
    });
    check("softplus", 6, 0.05, 6.0, |t, p| {
        let a = leaf(t, p);
        let s = t.softplus(a);
        let m = t.reduce_sum(s);
        (vec![a], m)
    });
    check("exp", 6, 0.05, 2.0, |t, p| {
        let a = leaf(t, p);
        let s = t.exp(a);
        let m = t.reduce_mean(s);
        (vec![a], m)
    });
    // ln needs positive inputs: square first.
    check("ln_of_square", 6, 0.2, 2.0, |t, p| {
        let a = leaf(t, p);
        let sq = t.mul(a, a);
        let s = t.ln(sq);
        let m = t.reduce_sum(s);
        (vec![a], m)
    });
    // powf needs a positive base: sigmoid first.
    check("powf", 6, 0.05, 4.0, |t, p| {
        let a = leaf(t, p);
        let s = t.sigmoid(a);
        let pw = t.powf(s, 2.5);
        let m = t.reduce_sum(pw);
        (vec![a], m)
    });
    check("powf_zero_exponent", 6, 0.05, 4.0, |t, p| {
        let a = leaf(t, p);
        let s = t.sigmoid(a);
        let pw = t.powf(s, 0.0);
        let sp = t.softplus(a);
        let both = t.mul(pw, sp);
        let m = t.reduce_sum(both);
        (vec![a], m)
    });
    check("leaky_relu", 6, 0.1, 3.0, |t, p| {
        let a = leaf(t, p);
        let s = t.leaky_relu(a, 0.1);
        let sq = t.mul(s, s);
        let m = t.reduce_sum(sq);
        (vec![a], m)
    });
    // Clamp to [-1.5, 1.5]; points stay 0.1 away from the edges.
    check("clamp", 6, 0.1, 3.0, |t, p| {
        let shifted: Vec<f64> =
            p.iter().map(|&v| if v.abs() > 1.4 && v.abs() < 1.6 { v + 0.25 } else { v }).collect();
        let a = t.leaf(Tensor::new(vec![shifted.len()], shifted));
        let c = t.clamp(a, -1.5, 1.5);
        let sq = t.mul(c, c);
        let m = t.reduce_mean(sq);
        (vec![a], m)
    });
}

#[test]
fn reduction_and_shape_ops() {
    check("reduce_sum", 7, 0.1, 2.0, |t, p| {
        let a = leaf(t, p);
        let sq = t.mul(a, a);
        let s = t.reduce_sum(sq);
        (vec![a], s)
    });
    check("reduce_mean", 7, 0.1, 2.0, |t, p| {
        let a = leaf(t, p);
        let sq = t.mul(a, a);
        let s = t.reduce_mean(sq);
        (vec![a], s)
    });
    check("downsample", 16, 0.1, 2.0, |t, p| {
        let a = t.leaf(Tensor::new(vec![1, 1, 4, 4], p.to_vec()));
        let d = t.downsample(a, 2);
        let sq = t.mul(d, d);
        let m = t.reduce_sum(sq);
        (vec![a], m)
    });
    check("upsample_nearest", 4, 0.1, 2.0, |t, p| {
        let a = t.leaf(Tensor::new(vec![1, 1, 2, 2], p.to_vec()));
        let u = t.upsample_nearest(a, 3);
        let sq = t.mul(u, u);
        let m = t.reduce_mean(sq);
        (vec![a], m)
    });
    check("concat_narrow", 8, 0.1, 2.0, |t, p| {
        let a = t.leaf(Tensor::new(vec![1, 1, 2, 2], p[..4].to_vec()));
        let b = t.leaf(Tensor::new(vec![1, 1, 2, 2], p[4..].to_vec()));
        let c = t.concat(a, b);
        let first = t.narrow(c, 0, 1);
        let second = t.narrow(c, 1, 1);
        let prod = t.mul(first, second);
        let m = t.reduce_sum(prod);
        (vec![a, b], m)
    });
}

#[test]
fn convolution_geometries() {
    let mut r = rng();
    // (input shape, weight shape, stride, dilation, padding) covering the
    // flipped-weight fast path, the scatter fallback (stride 2), dilation
    // with padding, and 1x1 kernels.
    let cases: Vec<(Vec<usize>, Vec<usize>, usize, usize, usize)> = vec![
        (vec![1, 2, 5, 5], vec![3, 2, 3, 3], 1, 1, 1),
        (vec![2, 1, 6, 6], vec![2, 1, 3, 3], 1, 2, 2),
        (vec![1, 2, 7, 7], vec![1, 2, 3, 3], 2, 1, 1),
        (vec![1, 3, 4, 4], vec![2, 3, 1, 1], 1, 1, 0),
        (vec![1, 1, 6, 5], vec![2, 1, 2, 3], 1, 1, 2),
    ];
    for (ishape, wshape, stride, dilation, padding) in cases {
        let ni: usize = ishape.iter().product();
        let nw: usize = wshape.iter().product();
        let nb = wshape[0];
        let name = format!("conv {ishape:?} w{wshape:?} s{stride} d{dilation} p{padding}");
        for trial in 0..TRIALS / 4 {
            let point = sample(&mut r, ni + nw + nb, 0.05, 1.5);
            let err = grad_check(
                |t, p| {
                    let x = t.leaf(Tensor::new(ishape.clone(), p[..ni].to_vec()));
                    let w = t.leaf(Tensor::new(wshape.clone(), p[ni..ni + nw].to_vec()));
                    let b = t.leaf(Tensor::new(vec![nb], p[ni + nw..].to_vec()));
                    let y = t.conv2d(x, w, b, stride, dilation, padding).unwrap();
                    let sq = t.mul(y, y);
                    let m = t.reduce_mean(sq);
                    (vec![x, w, b], m)
                },
                &point,
                EPS,
            );
            assert!(err < TOL, "{name} trial {trial}: rel err {err}");
        }
    }
}

#[test]
fn base_loss_gradients() {
    for base in [BaseLoss::Bce, BaseLoss::Focal { gamma: 2.0 }, BaseLoss::Focal { gamma: 0.0 }] {
        let name = format!("{base:?}");
        // Point: 5 logits + 5 raw targets (squashed into [0,1] via sigmoid
        // so the target leaf also gets a gradient path).
        check(&name, 10, 0.05, 6.0, move |t, p| {
            let l = leaf(t, &p[..5]);
            let traw = leaf(t, &p[5..]);
            let target = t.sigmoid(traw);
            let per = base_graph(t, base, l, target);
            let m = t.reduce_mean(per);
            (vec![l, traw], m)
        });
    }
}

#[test]
fn label_flip_gradients() {
    for base in [BaseLoss::Bce, BaseLoss::Focal { gamma: 2.0 }] {
        let name = format!("label_flip {base:?}");
        let labels = Tensor::new(vec![6], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        check(&name, 12, 0.1, 6.0, move |t, p| {
            let l = leaf(t, &p[..6]);
            let raw = leaf(t, &p[6..]);
            let per = label_flip_graph(t, l, raw, &labels, base);
            let m = t.reduce_mean(per);
            (vec![l, raw], m)
        });
    }
}

#[test]
fn predictive_variance_gradients() {
    let mut r = rng();
    let labels = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 1.0]);
    let draws: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::new(vec![4], (0..4).map(|_| r.gen_range(-2.0..2.0)).collect()))
        .collect();
    for base in [BaseLoss::Bce, BaseLoss::Focal { gamma: 2.0 }] {
        let name = format!("predictive_variance {base:?}");
        let labels = labels.clone();
        let draws = draws.clone();
        // log-variance entries stay inside the clamp's interior (-20, 5).
        check(&name, 8, 0.1, 3.0, move |t, p| {
            let l = leaf(t, &p[..4]);
            let s = leaf(t, &p[4..]);
            let per = predictive_variance_graph(t, l, s, &labels, &draws, base);
            let m = t.reduce_mean(per);
            (vec![l, s], m)
        });
    }
}

#[test]
fn masked_mean_gradients() {
    let mask = Tensor::new(vec![6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    check("masked_mean", 6, 0.1, 4.0, move |t, p| {
        let l = leaf(t, p);
        let s = t.sigmoid(l);
        let m = masked_mean_graph(t, s, &mask);
        (vec![l], m)
    });
}
