use mvcr_core::rng::{CounterRng, Purpose};
use mvcr_core::tensor::{check_gradients, Tape, Tensor, Var};
use mvcr_core::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;
const POINTS: u64 = 20;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = CounterRng::new(seed).stream(Purpose::Data, 17);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(out), seed ^ 0xabcdef);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn check_op<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Tape<f64>, Var, u64) -> Result<Var>,
{
    for seed in 0..POINTS {
        let point = randn(shape, 1000 + seed);
        let report = check_gradients(
            |tape, x| {
                let out = f(tape, x, seed)?;
                project(tape, out, seed)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(report.passes(TOL), "{name}: seed {seed} rel error {} at {}", report.max_rel_error, report.worst_index);
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]).unwrap());
    let y = tape.softmax(x);
    let v = tape.value(y).data();
    for &p in v {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn mse_of_identical_inputs_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn(&[4, 5], 3));
    let y = tape.mse(x, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn(&[2, 3], 42);
    let b = randn(&[3, 4], 43);
    let mut expected = [0.0f64; 8];
    for i in 0..2 {
        for j in 0..4 {
            for k in 0..3 {
                expected[i * 4 + j] += a.data()[i * 3 + k] * b.data()[k * 4 + j];
            }
        }
    }
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(a);
    let bv = tape.constant(b);
    let c = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.shape(c), &[2, 4]);
    for (x, y) in tape.value(c).data().iter().zip(expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    let msg = tape.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add"), "{msg}");
    // Only trailing-axis bias broadcasting is supported.
    let bias = tape.constant(Tensor::zeros(vec![2]));
    assert!(tape.add_bias(a, bias).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(randn(&[4], 1));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0; 4]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(randn(&[4], 1));
    let y = tape.tanh(x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn unused_leaves_get_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(randn(&[3], 1));
    let unused = tape.param(randn(&[2, 2], 2));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0; 4]);
}

#[test]
fn mse_bias_gradient_matches_closed_form() {
    // loss = mse(U x + b, t); d loss / d b = 2 (U x + b - t) / n
    let u = randn(&[3, 4], 10);
    let x = randn(&[1, 4], 11);
    let b = randn(&[3], 12);
    let t = randn(&[1, 3], 13);
    let mut tape = Tape::<f64>::new();
    let uv = tape.constant(u.clone());
    let xv = tape.constant(x.clone());
    let bv = tape.param(b.clone());
    let tv = tape.constant(t.clone());
    let y = tape.affine(xv, uv, Some(bv)).unwrap();
    let loss = tape.mse(y, tv).unwrap();
    let g = tape.backward(loss).unwrap().wrt(bv);
    for o in 0..3 {
        let ux: f64 = (0..4).map(|i| u.data()[o * 4 + i] * x.data()[i]).sum();
        let expected = 2.0 * (ux + b.data()[o] - t.data()[o]) / 3.0;
        assert!((g.data()[o] - expected).abs() < 1e-12);
    }
}

#[test]
fn composite_layernorm_affine_softmax_cross_entropy() {
    let gamma = randn(&[6], 20);
    let beta = randn(&[6], 21);
    let w = randn(&[4, 6], 22);
    for seed in 0..POINTS {
        let point = randn(&[5, 6], 300 + seed);
        let report = check_gradients(
            |tape, x| {
                let g = tape.constant(gamma.clone());
                let b = tape.constant(beta.clone());
                let wv = tape.constant(w.clone());
                let h = tape.layer_norm(x, g, b)?;
                let logits = tape.affine(h, wv, None)?;
                let p = tape.softmax(logits);
                let logits2 = tape.scale(p, 3.0);
                tape.cross_entropy(logits2, &[Some(0), Some(3), None, Some(1), Some(2)])
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(report.passes(TOL), "rel error {}", report.max_rel_error);
    }
}

#[test]
fn gradcheck_mse_to_zero() {
    let point = randn(&[8], 5);
    let report = check_gradients(
        |tape, x| {
            let z = tape.constant(Tensor::zeros(vec![8]));
            tape.mse(x, z)
        },
        &point,
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn gradcheck_constant_function_is_exactly_zero() {
    let point = randn(&[5], 6);
    let report = check_gradients(|tape, _x| Ok(tape.constant(Tensor::scalar(3.5))), &point, STEP).unwrap();
    assert!(report.analytic.iter().all(|&g| g == 0.0));
    assert!(report.numeric.iter().all(|&g| g == 0.0));
}

#[test]
fn gradcheck_reports_non_finite_values() {
    let point = Tensor::<f64>::from_f64(vec![2], &[800.0, 1.0]).unwrap();
    let err = check_gradients(
        |tape, x| {
            let e = tape.exp(x);
            Ok(tape.sum(e))
        },
        &point,
        STEP,
    )
    .unwrap_err();
    assert!(matches!(err, mvcr_core::Error::NonFinite(_)));
}

#[test]
fn layernorm_rows_are_standardized() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn(&[7, 16], 9));
    let g = tape.constant(Tensor::full(vec![16], 1.0));
    let b = tape.constant(Tensor::zeros(vec![16]));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        // eps = 1e-5 shrinks the variance by var / (var + eps)
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(randn(&[6, 8], 31));
        let w = tape.param(randn(&[5, 8], 32));
        let h = tape.affine(x, w, None).unwrap();
        let h = tape.gelu(h);
        let p = tape.softmax(h);
        let l = tape.cross_entropy(p, &[Some(1), Some(0), Some(4), None, Some(2), Some(3)]).unwrap();
        let g = tape.backward(l).unwrap();
        (g.wrt(x).into_data(), g.wrt(w).into_data())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.1, b.1);
}

// ---- per-op central-difference checks ---------------------------------

#[test]
fn grad_matmul() {
    check_op("matmul lhs", &[3, 4], |t, x, s| {
        let b = t.constant(randn(&[4, 2], s + 1));
        t.matmul(x, b)
    });
    check_op("matmul rhs", &[4, 2], |t, x, s| {
        let a = t.constant(randn(&[3, 4], s + 1));
        t.matmul(a, x)
    });
}

#[test]
fn grad_batch_matmul() {
    for trans in [false, true] {
        let other = if trans { [2, 5, 4] } else { [2, 4, 5] };
        check_op("bmm lhs", &[2, 3, 4], |t, x, s| {
            let b = t.constant(randn(&other, s + 1));
            t.batch_matmul(x, b, trans)
        });
        check_op("bmm rhs", &other, |t, x, s| {
            let a = t.constant(randn(&[2, 3, 4], s + 1));
            t.batch_matmul(a, x, trans)
        });
    }
}

#[test]
fn grad_affine() {
    check_op("affine x", &[2, 3, 4], |t, x, s| {
        let w = t.constant(randn(&[5, 4], s + 1));
        let b = t.constant(randn(&[5], s + 2));
        t.affine(x, w, Some(b))
    });
    check_op("affine w", &[5, 4], |t, w, s| {
        let x = t.constant(randn(&[3, 4], s + 1));
        let b = t.constant(randn(&[5], s + 2));
        t.affine(x, w, Some(b))
    });
    check_op("affine b", &[5], |t, b, s| {
        let x = t.constant(randn(&[3, 4], s + 1));
        let w = t.constant(randn(&[5, 4], s + 2));
        t.affine(x, w, Some(b))
    });
}

#[test]
fn grad_elementwise_binary() {
    check_op("add", &[3, 4], |t, x, s| {
        let o = t.constant(randn(&[3, 4], s + 1));
        t.add(x, o)
    });
    check_op("sub rhs", &[3, 4], |t, x, s| {
        let o = t.constant(randn(&[3, 4], s + 1));
        t.sub(o, x)
    });
    check_op("multiply", &[3, 4], |t, x, s| {
        let o = t.constant(randn(&[3, 4], s + 1));
        t.mul(x, o)
    });
    check_op("multiply self", &[3, 4], |t, x, _| t.mul(x, x));
    check_op("add_bias input", &[2, 3, 4], |t, x, s| {
        let b = t.constant(randn(&[4], s + 1));
        t.add_bias(x, b)
    });
    check_op("add_bias bias", &[4], |t, b, s| {
        let x = t.constant(randn(&[2, 3, 4], s + 1));
        t.add_bias(x, b)
    });
    check_op("mul_const", &[6], |t, x, s| t.mul_const(x, randn(&[6], s).into_data()));
    check_op("add_const", &[6], |t, x, s| t.add_const(x, randn(&[6], s).data()));
    check_op("scale", &[6], |t, x, _| Ok(t.scale(x, -1.75)));
}

#[test]
fn grad_activations() {
    check_op("relu", &[4, 5], |t, x, _| Ok(t.relu(x)));
    check_op("gelu", &[4, 5], |t, x, _| Ok(t.gelu(x)));
    check_op("tanh", &[4, 5], |t, x, _| Ok(t.tanh(x)));
    check_op("exp", &[4, 5], |t, x, _| Ok(t.exp(x)));
    check_op("softmax", &[4, 5], |t, x, _| Ok(t.softmax(x)));
}

#[test]
fn grad_layernorm() {
    check_op("layernorm x", &[3, 8], |t, x, s| {
        let g = t.constant(randn(&[8], s + 1));
        let b = t.constant(randn(&[8], s + 2));
        t.layer_norm(x, g, b)
    });
    check_op("layernorm gamma", &[8], |t, g, s| {
        let x = t.constant(randn(&[3, 8], s + 1));
        let b = t.constant(randn(&[8], s + 2));
        t.layer_norm(x, g, b)
    });
    check_op("layernorm beta", &[8], |t, b, s| {
        let x = t.constant(randn(&[3, 8], s + 1));
        let g = t.constant(randn(&[8], s + 2));
        t.layer_norm(x, g, b)
    });
}

#[test]
fn grad_reductions_and_losses() {
    check_op("mean", &[3, 5], |t, x, _| Ok(t.mean(x)));
    check_op("sum", &[3, 5], |t, x, _| Ok(t.sum(x)));
    check_op("mse lhs", &[3, 5], |t, x, s| {
        let o = t.constant(randn(&[3, 5], s + 1));
        t.mse(x, o)
    });
    check_op("mse rhs", &[3, 5], |t, x, s| {
        let o = t.constant(randn(&[3, 5], s + 1));
        t.mse(o, x)
    });
    check_op("cross_entropy", &[4, 3], |t, x, s| {
        let mut rng = CounterRng::new(s).stream(Purpose::Data, 3);
        let targets: Vec<Option<usize>> = (0..4).map(|i| (i != 2).then(|| rng.random_range(0..3))).collect();
        t.cross_entropy(x, &targets)
    });
}

#[test]
fn grad_shape_ops() {
    check_op("concat", &[2, 3], |t, x, s| {
        let o = t.constant(randn(&[2, 4], s + 1));
        t.concat(&[o, x, o], 1)
    });
    check_op("concat axis0", &[2, 3], |t, x, s| {
        let o = t.constant(randn(&[1, 3], s + 1));
        t.concat(&[x, o], 0)
    });
    check_op("slice", &[3, 6], |t, x, _| t.slice(x, 1, 2, 3));
    check_op("embedding", &[5, 3], |t, x, _| t.embedding(x, &[4, 0, 4, 2]));
    check_op("reshape", &[2, 6], |t, x, _| t.reshape(x, &[3, 4]));
    check_op("permute", &[2, 3, 4], |t, x, _| t.permute(x, &[2, 0, 1]));
    check_op("gather_rows", &[5, 3], |t, x, _| t.gather_rows(x, &[4, 1, 1]));
    check_op("merge_rows base", &[4, 3], |t, x, s| {
        let p = t.constant(randn(&[2, 3], s + 1));
        t.merge_rows(x, vec![(p, vec![3, 0])])
    });
    check_op("merge_rows part", &[2, 3], |t, x, s| {
        let base = t.constant(randn(&[4, 3], s + 1));
        t.merge_rows(base, vec![(x, vec![1, 2])])
    });
}

#[test]
fn f32_and_f64_agree_on_forward() {
    let a = randn(&[3, 5], 70);
    let w = randn(&[2, 5], 71);
    let mut t64 = Tape::<f64>::new();
    let (a64, w64) = (t64.constant(a.clone()), t64.constant(w.clone()));
    let y64 = t64.affine(a64, w64, None).unwrap();
    let y64 = t64.softmax(y64);
    let mut t32 = Tape::<f32>::new();
    let (a32, w32) = (t32.constant(a.cast()), t32.constant(w.cast()));
    let y32 = t32.affine(a32, w32, None).unwrap();
    let y32 = t32.softmax(y32);
    for (x, y) in t64.value(y64).data().iter().zip(t32.value(y32).data()) {
        assert!((x - *y as f64).abs() < 1e-5);
    }
}
