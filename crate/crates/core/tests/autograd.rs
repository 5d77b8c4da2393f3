use std::sync::Arc;

use imim_core::gradcheck::{finite_difference, within_tolerance};
use imim_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 24;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

/// Checks every input's gradient of `⟨R, op(inputs)⟩` for a random cotangent
/// `R` against central differences.
fn check_op(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = op(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, _, out) = eval(&inputs);
    let cot = Arc::new(rand_t(rng, tape.shape(out)));

    let (mut tape, vars, out) = eval(&inputs);
    let loss = tape.weighted_sum(out, cot.clone()).unwrap();
    tape.backward(loss).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let fd = finite_difference(x, 1e-5, |probe| {
            let mut xs = inputs.clone();
            xs[i] = probe.clone();
            let (mut t, _, o) = eval(&xs);
            let l = t.weighted_sum(o, cot.clone()).unwrap();
            Ok(t.value(l).item().unwrap())
        })
        .unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            assert!(within_tolerance(*a, *f), "input {i}: analytic {a} vs fd {f}");
        }
    }
}

#[test]
fn matmul_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..TRIALS {
        let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let ins = vec![rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[k, n])];
        check_op(&mut rng, ins, |t, v| t.matmul(v[0], v[1]).unwrap());
    }
}

#[test]
fn elementwise_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..TRIALS {
        let s = [dim(&mut rng), dim(&mut rng)];
        let ins = vec![rand_t(&mut rng, &s), rand_t(&mut rng, &s)];
        check_op(&mut rng, ins.clone(), |t, v| t.add(v[0], v[1]).unwrap());
        check_op(&mut rng, ins.clone(), |t, v| t.sub(v[0], v[1]).unwrap());
        check_op(&mut rng, ins.clone(), |t, v| t.mul(v[0], v[1]).unwrap());
        check_op(&mut rng, ins[..1].to_vec(), |t, v| t.scale(v[0], -1.7));
        check_op(&mut rng, ins[..1].to_vec(), |t, v| t.gelu(v[0]));
    }
}

#[test]
fn bias_and_shape_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..TRIALS {
        let (r, c) = (dim(&mut rng), dim(&mut rng));
        let ins = vec![rand_t(&mut rng, &[r, c]), rand_t(&mut rng, &[c])];
        check_op(&mut rng, ins.clone(), |t, v| t.add_bias(v[0], v[1]).unwrap());
        check_op(&mut rng, ins[..1].to_vec(), |t, v| t.transpose(v[0]).unwrap());
        check_op(&mut rng, ins[..1].to_vec(), move |t, v| t.reshape(v[0], vec![c, r]).unwrap());
        check_op(&mut rng, ins[..1].to_vec(), |t, v| t.sum(v[0]));
    }
}

#[test]
fn softmax_grad_on_every_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..TRIALS {
        let s = [dim(&mut rng), dim(&mut rng), dim(&mut rng)];
        let axis = trial % 3;
        let x = rand_t(&mut rng, &s);
        check_op(&mut rng, vec![x], move |t, v| t.softmax(v[0], axis).unwrap());
    }
}

#[test]
fn layernorm_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..TRIALS {
        let (r, d) = (dim(&mut rng), rng.gen_range(2..=8));
        let ins = vec![rand_t(&mut rng, &[r, d]), rand_t(&mut rng, &[d]), rand_t(&mut rng, &[d])];
        check_op(&mut rng, ins, |t, v| t.layernorm(v[0], v[1], v[2]).unwrap());
    }
}

#[test]
fn index_and_column_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..TRIALS {
        let (r, c) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let x = rand_t(&mut rng, &[r, c]);
        let idx: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..r)).collect();
        check_op(&mut rng, vec![x.clone()], move |t, v| t.gather_rows(v[0], &idx).unwrap());

        let start = rng.gen_range(0..c);
        let width = rng.gen_range(1..=c - start);
        check_op(&mut rng, vec![x.clone()], move |t, v| t.slice_cols(v[0], start, width).unwrap());

        let extra = dim(&mut rng);
        let y = rand_t(&mut rng, &[r, extra]);
        check_op(&mut rng, vec![x.clone(), y], |t, v| t.concat_cols(v).unwrap());

        let split = rng.gen_range(1..r);
        let (top, bottom) = (rand_t(&mut rng, &[split, c]), rand_t(&mut rng, &[r - split, c]));
        let mut order: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        check_op(&mut rng, vec![top, bottom], move |t, v| {
            t.scatter_rows(r, &[(v[0], &order[..split]), (v[1], &order[split..])]).unwrap()
        });
    }
}

#[test]
fn loss_op_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..TRIALS {
        let (r, c) = (dim(&mut rng), dim(&mut rng));
        let target = Arc::new(rand_t(&mut rng, &[r, c]));
        let weights: Vec<f64> = (0..r).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let x = rand_t(&mut rng, &[r, c]);
        let tg = target.clone();
        check_op(&mut rng, vec![x.clone()], move |t, v| t.sq_err(v[0], tg.clone(), None, 3.0).unwrap());
        check_op(&mut rng, vec![x], move |t, v| t.sq_err(v[0], target.clone(), Some(weights.clone()), 2.0).unwrap());
    }
}

#[test]
fn softmax_row_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x = rand_t(&mut rng, &[6]);
        let w = Arc::new(rand_t(&mut rng, &[6]));
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let s = tape.softmax(v, 0).unwrap();
        let l = tape.weighted_sum(s, w.clone()).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_difference(&x, 1e-5, |p| {
            let mut t = Tape::new();
            let v = t.constant(p.clone());
            let s = t.softmax(v, 0).unwrap();
            let l = t.weighted_sum(s, w.clone()).unwrap();
            Ok(t.value(l).item().unwrap())
        })
        .unwrap();
        assert!(tape.grad(v).unwrap().max_abs_diff(&fd).unwrap() <= 1e-6);
        let sv = tape.value(s);
        assert!(sv.data().iter().all(|&p| p >= 0.0));
        assert!((sv.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn softmax_backward_is_the_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&mut rng, &[5]);
    for k in 0..5 {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let s = tape.softmax(v, 0).unwrap();
        let mut e = vec![0.0; 5];
        e[k] = 1.0;
        let l = tape.weighted_sum(s, Tensor::new([5], e).unwrap()).unwrap();
        tape.backward(l).unwrap();
        let sv = tape.value(s).data().to_vec();
        let g = tape.grad(v).unwrap();
        for j in 0..5 {
            let jac = if j == k { sv[k] * (1.0 - sv[k]) } else { -sv[k] * sv[j] };
            assert!((g.data()[j] - jac).abs() < 1e-15);
        }
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut shapes = vec![(4, 3, 5)];
    for _ in 0..40 {
        shapes.push((rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16)));
    }
    for (m, k, n) in shapes {
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                assert!((c.data()[i * n + j] - s).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn layernorm_normalizes_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let d = rng.gen_range(4..=64);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new([1, d], x).unwrap());
        let g = tape.constant(Tensor::full(vec![d], 1.0));
        let b = tape.constant(Tensor::zeros(vec![d]));
        let y = tape.layernorm(v, g, b).unwrap();
        let y = tape.value(y).data();
        let mean = y.iter().sum::<f64>() / d as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn shared_subexpression_doubles_the_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let y = tape.mul(x, x).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}
