mod common;

use common::{gradient_errors, objective_gradient_errors, random_probs, random_tensor};
use corrmix::losses::one_hot_from_probs;
use corrmix::tensor::DiceReduction;
use corrmix::{Rng, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Contracts `out` with fixed random weights so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> corrmix::Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = random_tensor(&shape, &mut Rng::new(seed), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn assert_close(op: &str, errs: &[f64]) {
    for (k, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{op}: input {k} relative error {e:e}");
    }
}

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, &mut Rng::new(seed), -1.0, 1.0)
}

#[test]
fn elementwise_ops() {
    for shape in [vec![5], vec![3, 4], vec![2, 3, 4], vec![2, 2, 3, 8]] {
        let ps = [rt(&shape, 1), rt(&shape, 2)];
        assert_close("add", &gradient_errors(&ps, H, |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o, 9)
        }));
        assert_close("sub", &gradient_errors(&ps, H, |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o, 9)
        }));
        assert_close("mul", &gradient_errors(&ps, H, |t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o, 9)
        }));
        assert_close("scale", &gradient_errors(&ps[..1], H, |t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o, 9)
        }));
        assert_close("linear_combination", &gradient_errors(&ps, H, |t, v| {
            let o = t.linear_combination(&[(0.3, v[0]), (-2.0, v[1]), (0.5, v[0])])?;
            project(t, o, 9)
        }));
        assert_close("leaky_relu", &gradient_errors(&ps[..1], H, |t, v| {
            let o = t.leaky_relu(v[0], 0.01);
            project(t, o, 9)
        }));
        assert_close("sum", &gradient_errors(&ps[..1], H, |t, v| {
            let o = t.sum(v[0]);
            let o2 = t.mul(o, o)?;
            Ok(t.sum(o2))
        }));
    }
}

#[test]
fn matmul_and_reshape() {
    let ps = [rt(&[3, 5], 3), rt(&[5, 4], 4)];
    assert_close("matmul", &gradient_errors(&ps, H, |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, 5)
    }));
    assert_close("reshape", &gradient_errors(&ps[..1], H, |t, v| {
        let r = t.reshape(v[0], &[5, 3])?;
        let o = t.mul(r, r)?;
        project(t, o, 6)
    }));
}

#[test]
fn convolution_and_bias() {
    for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let ps = [rt(&[2, 8, 8], 7), rt(&[3, 2, 3, 3], 8)];
        assert_close("conv2d", &gradient_errors(&ps, H, |t, v| {
            let o = t.conv2d(v[0], v[1], stride, padding)?;
            project(t, o, 10)
        }));
    }
    let ps = [rt(&[3, 4, 4], 11), rt(&[3], 12)];
    assert_close("channel_bias", &gradient_errors(&ps, H, |t, v| {
        let o = t.channel_bias(v[0], v[1])?;
        let o = t.mul(o, o)?;
        project(t, o, 13)
    }));
    let ps = [rt(&[2, 6, 6], 14), rt(&[3, 2, 1, 1], 15)];
    assert_close("pointwise conv2d", &gradient_errors(&ps, H, |t, v| {
        let o = t.conv2d(v[0], v[1], 1, 0)?;
        project(t, o, 16)
    }));
}

#[test]
fn pooling_resize_concat() {
    let ps = [rt(&[2, 6, 8], 17)];
    assert_close("maxpool2", &gradient_errors(&ps, H, |t, v| {
        let o = t.maxpool2(v[0])?;
        project(t, o, 18)
    }));
    for (oh, ow) in [(3, 4), (12, 16), (5, 7), (6, 8)] {
        assert_close("resize_bilinear", &gradient_errors(&ps, H, |t, v| {
            let o = t.resize_bilinear(v[0], oh, ow)?;
            project(t, o, 19)
        }));
    }
    let ps = [rt(&[2, 3, 4], 20), rt(&[1, 3, 4], 21)];
    assert_close("concat", &gradient_errors(&ps, H, |t, v| {
        let o = t.concat(&[v[0], v[1], v[0]])?;
        project(t, o, 22)
    }));
}

#[test]
fn softmax_and_normalize() {
    let ps = [random_tensor(&[3, 4, 5], &mut Rng::new(23), -4.0, 4.0)];
    for axis in 0..3 {
        assert_close("softmax", &gradient_errors(&ps, H, |t, v| {
            let o = t.softmax(v[0], axis)?;
            project(t, o, 24)
        }));
        assert_close("l2_normalize", &gradient_errors(&ps, H, |t, v| {
            let o = t.l2_normalize(v[0], axis)?;
            project(t, o, 25)
        }));
    }
}

#[test]
fn segmentation_losses() {
    let mut rng = Rng::new(26);
    let logits = random_tensor(&[3, 4, 4], &mut rng, -2.0, 2.0);
    let target = one_hot_from_probs(&random_probs(3, 4, 4, &mut rng)).unwrap();
    let mask = Tensor::from_fn([4, 4], |i| f64::from(u8::from(i % 3 != 0)));
    let ps = [logits];
    assert_close("masked_ce", &gradient_errors(&ps, H, |t, v| {
        let p = t.softmax(v[0], 0)?;
        t.masked_ce(p, &target, &mask)
    }));
    for red in [DiceReduction::Joint, DiceReduction::PerClass] {
        assert_close("masked_dice", &gradient_errors(&ps, H, |t, v| {
            let p = t.softmax(v[0], 0)?;
            t.masked_dice(p, &target, &mask, red)
        }));
    }
}

#[test]
fn full_objective() {
    for (name, e) in objective_gradient_errors(H) {
        assert!(e < TOL, "{name}: relative error {e:e}");
    }
}
