use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn arr(shape: Shape, data: &[f64]) -> Array {
    Array::new(shape, data.to_vec()).unwrap()
}

fn random(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_, _, _| rng.gen_range(lo..hi)).unwrap()
}

/// Builds a graph from parameter leaves and returns its (possibly
/// non-scalar) output.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Compares reverse-mode gradients of `sum(seed * f(inputs))` against
/// central differences with step `h`; returns the worst relative error.
fn grad_check(inputs: &[Array], build: &Build, h: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let seed = random(tape.value(out).shape(), rng, -1.0, 1.0);
    let grads = tape.backward_with_seed(out, seed.clone());

    let eval = |perturbed: &[Array]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|a| t.param(a.clone())).collect();
        let o = build(&mut t, &vs);
        t.value(o).data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn add_values() {
    let mut t = Tape::new();
    let a = t.constant(arr(Shape::plane(1, 2), &[1.0, 2.0]));
    let b = t.constant(arr(Shape::plane(1, 2), &[3.0, 4.0]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.param(Array::filled(Shape::plane(3, 3), -0.0).unwrap());
    let y = t.abs(x).unwrap();
    let g = t.backward_with_seed(y, Array::filled(Shape::plane(3, 3), 1.0).unwrap());
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn product_rule() {
    let mut t = Tape::new();
    let a = t.param(Array::scalar(2.0).unwrap());
    let b = t.param(Array::scalar(5.0).unwrap());
    let y = t.mul(a, b).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(a).unwrap().item(), 5.0);
    assert_eq!(g.get(b).unwrap().item(), 2.0);
}

#[test]
fn elementwise_rejections() {
    let mut t = Tape::new();
    let a = t.constant(Array::zeros(Shape::plane(2, 2)));
    let b = t.constant(Array::zeros(Shape::plane(2, 3)));
    assert!(matches!(t.add(a, b), Err(crate::Error::Shape { .. })));
    let one = t.constant(Array::filled(Shape::plane(2, 2), 1.0).unwrap());
    let tiny = t.constant(Array::filled(Shape::plane(2, 2), 1e-13).unwrap());
    assert!(t.div(one, tiny).is_err());
    assert!(t.div_scalar(one, 0.0).is_err());
    let big = t_const(&mut t, 1000.0);
    assert!(t.exp(big).is_err());
}

fn t_const(t: &mut Tape, v: f64) -> Var {
    t.constant(Array::scalar(v).unwrap())
}

#[test]
fn clamp_gradient_only_strictly_inside() {
    let mut t = Tape::new();
    let x = t.param(arr(Shape::plane(1, 4), &[-2.0, 0.0, 0.5, 1.0]));
    let y = t.clamp(x, 0.0, 1.0).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.5, 1.0]);
    let g = t.backward_with_seed(y, Array::filled(Shape::plane(1, 4), 1.0).unwrap());
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn scalar_broadcast() {
    let mut t = Tape::new();
    let x = t.param(arr(Shape::plane(1, 3), &[1.0, 2.0, 3.0]));
    let s = t.param(Array::scalar(2.0).unwrap());
    let y = t.div(x, s).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 1.0, 1.5]);
    let m = t.reduce_mean(y, None).unwrap();
    let g = t.backward(m).unwrap();
    // d/ds mean(x / s) = -mean(x) / s^2 = -0.5
    assert!((g.get(s).unwrap().item() + 0.5).abs() < 1e-15);
}

#[test]
fn reduce_mean_values_and_gradient() {
    let mut t = Tape::new();
    let x = t.param(arr(Shape::plane(1, 3), &[1.0, 2.0, 3.0]));
    let m = t.reduce_mean(x, None).unwrap();
    assert_eq!(t.value(m).item(), 2.0);
    let mask = arr(Shape::plane(1, 3), &[1.0, 0.0, 1.0]);
    let mm = t.reduce_mean(x, Some(&mask)).unwrap();
    assert_eq!(t.value(mm).item(), 2.0);
    let g = t.backward(mm).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.0, 0.5]);

    let mut t = Tape::new();
    let x = t.param(arr(Shape::plane(2, 2), &[1.0, 2.0, 3.0, 4.0]));
    let m = t.reduce_mean(x, None).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

    // all-zero mask divides by max(count, 1)
    let mut t = Tape::new();
    let x = t.param(arr(Shape::plane(1, 2), &[5.0, 7.0]));
    let zero = Array::zeros(Shape::plane(1, 2));
    let m = t.reduce_mean(x, Some(&zero)).unwrap();
    assert_eq!(t.value(m).item(), 0.0);

    let bad = arr(Shape::plane(1, 2), &[0.5, 1.0]);
    assert!(t.reduce_mean(x, Some(&bad)).is_err());
    let empty = t.constant(Array::new(Shape::plane(0, 0), vec![]).unwrap());
    assert!(t.reduce_mean(empty, None).is_err());
}

#[test]
fn avg_pool3_constant_and_delta() {
    let mut t = Tape::new();
    let c = t.constant(Array::filled(Shape::plane(4, 5), 0.3).unwrap());
    let p = t.avg_pool3(c).unwrap();
    assert!(t.value(p).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

    let delta = Array::from_fn(Shape::plane(5, 5), |_, y, x| if y == 2 && x == 2 { 1.0 } else { 0.0 }).unwrap();
    let d = t.constant(delta);
    let p = t.avg_pool3(d).unwrap();
    let v = t.value(p);
    for y in 0..5 {
        for x in 0..5 {
            let expect = if (1..=3).contains(&y) && (1..=3).contains(&x) {
                1.0 / 9.0
            } else {
                0.0
            };
            assert!((v.get(0, y, x) - expect).abs() < 1e-15, "({y},{x})");
        }
    }
    let small = t.constant(Array::zeros(Shape::plane(2, 5)));
    assert!(t.avg_pool3(small).is_err());
}

#[test]
fn avg_pool3_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(Shape::new(2, 5, 6), &mut rng, 0.0, 1.0);
    let err = grad_check(&[x], &|t, v| t.avg_pool3(v[0]).unwrap(), 1e-5, &mut rng);
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn hsample_identity_and_half_shift() {
    let mut t = Tape::new();
    let src = t.constant(Array::from_fn(Shape::new(2, 2, 4), |c, y, x| (c * 10 + y * 4 + x) as f64).unwrap());
    let ident = t.constant(Array::from_fn(Shape::plane(2, 4), |_, _, x| x as f64).unwrap());
    let (out, valid) = t.hsample(src, ident).unwrap();
    assert_eq!(t.value(out), t.value(src));
    assert!(valid.data().iter().all(|&v| v == 1.0));

    let row = t.constant(arr(Shape::plane(1, 4), &[0.0, 1.0, 2.0, 3.0]));
    let half = t.constant(Array::from_fn(Shape::plane(1, 4), |_, _, x| x as f64 + 0.5).unwrap());
    let (out, valid) = t.hsample(row, half).unwrap();
    assert_eq!(t.value(out).data(), &[0.5, 1.5, 2.5, 0.0]);
    assert_eq!(valid.data(), &[1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn hsample_slope_on_ramp() {
    // d out / d u at u = 1.3 on the ramp [0, 2, 4, ...] is the ramp slope 2
    let ramp = Array::from_fn(Shape::plane(1, 6), |_, _, x| 2.0 * x as f64).unwrap();
    let mut t = Tape::new();
    let src = t.constant(ramp.clone());
    let u = t.param(Array::filled(Shape::plane(1, 6), 1.3).unwrap());
    let (out, _) = t.hsample(src, u).unwrap();
    let seed = arr(Shape::plane(1, 6), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let g = t.backward_with_seed(out, seed);
    let analytic = g.get(u).unwrap().data()[0];

    let sample = |uu: f64| {
        let mut t = Tape::new();
        let s = t.constant(ramp.clone());
        let c = t.constant(Array::filled(Shape::plane(1, 6), uu).unwrap());
        let (o, _) = t.hsample(s, c).unwrap();
        t.value(o).data()[0]
    };
    let h = 1e-5;
    let numeric = (sample(1.3 + h) - sample(1.3 - h)) / (2.0 * h);
    assert!((analytic - 2.0).abs() < 1e-12);
    assert!((numeric - 2.0).abs() < 1e-8);
}

#[test]
fn hsample_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = random(Shape::new(2, 3, 7), &mut rng, 0.0, 1.0);
    // keep coordinates away from integers and from the border
    let coords = Array::from_fn(Shape::plane(3, 7), |_, _, _| {
        rng.gen_range(0..5) as f64 + rng.gen_range(0.1..0.9)
    })
    .unwrap();
    let err = grad_check(&[src, coords], &|t, v| t.hsample(v[0], v[1]).unwrap().0, 1e-6, &mut rng);
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.param(arr(Shape::plane(1, 3), &[1.0, -2.0, 3.0]));
    let d = t.detach(x);
    assert_eq!(t.value(d), t.value(x));
    assert!(!t.requires_grad(d));
    let l = t.reduce_mean(d, None).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(x).is_none());

    // y = x * detach(x): dy/dx = value(x)
    let y = t.mul(x, d).unwrap();
    let g = t.backward_with_seed(y, Array::filled(Shape::plane(1, 3), 1.0).unwrap());
    assert_eq!(g.get(x).unwrap().data(), t.value(x).data());
}

#[test]
fn conv2d_identity_and_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random(Shape::plane(5, 6), &mut rng, 0.0, 1.0);
    let mut t = Tape::new();
    let x = t.constant(img.clone());
    let k = t.constant(Array::from_fn(Shape::plane(3, 3), |_, y, x| if y == 1 && x == 1 { 1.0 } else { 0.0 }).unwrap());
    let y = t.conv2d(x, k, 1, 1, 1, 1).unwrap();
    assert_eq!(t.value(y), &img);

    let c = t.constant(Array::filled(Shape::plane(5, 6), 0.25).unwrap());
    let ones = t.constant(Array::filled(Shape::plane(3, 3), 1.0).unwrap());
    let y = t.conv2d(c, ones, 1, 1, 1, 1).unwrap();
    let v = t.value(y);
    for yy in 1..4 {
        for xx in 1..5 {
            assert!((v.get(0, yy, xx) - 2.25).abs() < 1e-15);
        }
    }
    // corner sees only 4 taps under zero padding
    assert!((v.get(0, 0, 0) - 1.0).abs() < 1e-15);

    let even = t.constant(Array::zeros(Shape::plane(2, 2)));
    assert!(t.conv2d(c, even, 1, 1, 0, 1).is_err());
    let wrong = t.constant(Array::zeros(Shape::new(3, 3, 3)));
    assert!(t.conv2d(c, wrong, 2, 1, 1, 1).is_err());
}

#[test]
fn conv2d_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(Shape::new(2, 6, 6), &mut rng, -1.0, 1.0);
    let k = random(Shape::new(3 * 2, 3, 3), &mut rng, -1.0, 1.0);
    let err = grad_check(
        &[x.clone(), k.clone()],
        &|t, v| t.conv2d(v[0], v[1], 3, 1, 1, 1).unwrap(),
        1e-5,
        &mut rng,
    );
    assert!(err < 1e-5, "stride 1: rel err {err}");
    let err = grad_check(
        &[x.clone(), k],
        &|t, v| t.conv2d(v[0], v[1], 3, 2, 0, 1).unwrap(),
        1e-5,
        &mut rng,
    );
    assert!(err < 1e-5, "stride 2: rel err {err}");
    // shared kernel across 2 groups of 1 channel
    let k = random(Shape::new(2, 3, 3), &mut rng, -1.0, 1.0);
    let err = grad_check(
        &[x, k],
        &|t, v| t.conv2d(v[0], v[1], 2, 1, 1, 2).unwrap(),
        1e-5,
        &mut rng,
    );
    assert!(err < 1e-5, "grouped: rel err {err}");
}

#[test]
fn every_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = Shape::new(2, 4, 5);
    let a = random(s, &mut rng, 0.2, 1.0);
    let b = random(s, &mut rng, 0.2, 1.0);
    let signed = random(s, &mut rng, -1.0, 1.0);
    let h = 1e-5;
    let cases: Vec<(&str, Vec<Array>, Box<Build>)> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "div",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.div(v[0], v[1]).unwrap()),
        ),
        ("abs", vec![signed.clone()], Box::new(|t, v| t.abs(v[0]).unwrap())),
        ("exp", vec![signed.clone()], Box::new(|t, v| t.exp(v[0]).unwrap())),
        ("neg", vec![signed.clone()], Box::new(|t, v| t.neg(v[0]).unwrap())),
        (
            "clamp",
            vec![signed.clone()],
            Box::new(|t, v| t.clamp(v[0], -0.5, 0.5).unwrap()),
        ),
        (
            "sigmoid",
            vec![signed.clone()],
            Box::new(|t, v| t.sigmoid(v[0]).unwrap()),
        ),
        (
            "leaky_relu",
            vec![signed.clone()],
            Box::new(|t, v| t.leaky_relu(v[0], 0.1).unwrap()),
        ),
        (
            "scalars",
            vec![a.clone()],
            Box::new(|t, v| {
                let x = t.mul_scalar(v[0], 3.0).unwrap();
                let x = t.add_scalar(x, 1.0).unwrap();
                t.rsub_scalar(2.0, x).unwrap()
            }),
        ),
        (
            "broadcast",
            vec![a.clone(), Array::scalar(0.7).unwrap()],
            Box::new(|t, v| {
                let m = t.mul(v[0], v[1]).unwrap();
                t.div(m, v[1]).unwrap()
            }),
        ),
        (
            "reduce_mean",
            vec![a.clone()],
            Box::new(|t, v| t.reduce_mean(v[0], None).unwrap()),
        ),
        (
            "channel_mean",
            vec![a.clone()],
            Box::new(|t, v| t.channel_mean(v[0]).unwrap()),
        ),
        ("hflip", vec![a.clone()], Box::new(|t, v| t.hflip(v[0]).unwrap())),
        (
            "crop",
            vec![a.clone()],
            Box::new(|t, v| t.crop(v[0], 1, 1, 3, 2).unwrap()),
        ),
        ("diff_x", vec![a.clone()], Box::new(|t, v| t.diff_x(v[0]).unwrap())),
        ("diff_y", vec![a.clone()], Box::new(|t, v| t.diff_y(v[0]).unwrap())),
        (
            "bias_add",
            vec![a.clone(), random(Shape::new(2, 1, 1), &mut rng, -1.0, 1.0)],
            Box::new(|t, v| t.bias_add(v[0], v[1]).unwrap()),
        ),
        (
            "correlation",
            vec![signed.clone(), b.clone()],
            Box::new(|t, v| t.correlation(v[0], v[1], 3).unwrap()),
        ),
        (
            "soft_argmin",
            vec![signed.clone()],
            Box::new(|t, v| t.soft_argmin(v[0], 0.7).unwrap()),
        ),
    ];
    for (name, inputs, build) in cases {
        let err = grad_check(&inputs, build.as_ref(), h, &mut rng);
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
    let mask = Array::from_fn(Shape::plane(4, 5), |_, y, x| ((x + y) % 2) as f64).unwrap();
    let err = grad_check(&[a], &|t, v| t.reduce_mean(v[0], Some(&mask)).unwrap(), h, &mut rng);
    assert!(err < 1e-4, "masked mean: rel err {err}");
}

#[test]
fn shared_subexpressions_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = random(Shape::plane(4, 4), &mut rng, 0.1, 1.0);
    let f = |t: &mut Tape, x: Var| {
        let e = t.exp(x).unwrap();
        let p = t.avg_pool3(e).unwrap();
        t.mul(p, x).unwrap()
    };
    let mut t1 = Tape::new();
    let x1 = t1.param(x0.clone());
    let a = f(&mut t1, x1);
    let b = f(&mut t1, x1);
    let y1 = t1.add(a, b).unwrap();
    let y1 = t1.reduce_mean(y1, None).unwrap();
    let g1 = t1.backward(y1).unwrap();

    let mut t2 = Tape::new();
    let x2 = t2.param(x0);
    let a = f(&mut t2, x2);
    let y2 = t2.mul_scalar(a, 2.0).unwrap();
    let y2 = t2.reduce_mean(y2, None).unwrap();
    let g2 = t2.backward(y2).unwrap();
    for (p, q) in g1.get(x1).unwrap().data().iter().zip(g2.get(x2).unwrap().data()) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn same_node_as_both_operands() {
    let mut t = Tape::new();
    let x = t.param(arr(Shape::plane(1, 2), &[3.0, -1.0]));
    let sq = t.mul(x, x).unwrap();
    let g = t.backward_with_seed(sq, Array::filled(Shape::plane(1, 2), 1.0).unwrap());
    assert_eq!(g.get(x).unwrap().data(), &[6.0, -2.0]);

    let c = t.correlation(x, x, 0).unwrap();
    let g = t.backward_with_seed(c, Array::filled(Shape::plane(1, 2), 1.0).unwrap());
    assert_eq!(g.get(x).unwrap().data(), &[6.0, -2.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(Shape::new(2, 6, 6), &mut rng, -1.0, 1.0);
        let k = random(Shape::new(4, 3, 3), &mut rng, -1.0, 1.0);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let kv = t.constant(k);
        let y = t.conv2d(xv, kv, 2, 1, 1, 1).unwrap();
        let p = t.avg_pool3(y).unwrap();
        let s = t.soft_argmin(p, 1.0).unwrap();
        t.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn soft_argmin_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let vol = random(Shape::new(9, 4, 4), &mut rng, -50.0, 50.0);
    let mut t = Tape::new();
    let v = t.constant(vol);
    let d = t.soft_argmin(v, 1.0).unwrap();
    assert!(t.value(d).data().iter().all(|&x| (0.0..=8.0).contains(&x)));
}
