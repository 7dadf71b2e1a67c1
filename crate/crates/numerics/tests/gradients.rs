use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdomain_numerics::gradcheck::{max_relative_error, numeric_gradients, DEFAULT_STEP};
use xdomain_numerics::{ParamSet, Result, Tape, Tensor, Var};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Two dense layers with GELU and a normalized log-softmax readout:
/// w1 4x6 + b1 6 + w2 6x4 + b2 4 + layernorm 3 + 3 = 64 parameters.
fn two_layer(params: &ParamSet, x: &Tensor, tape: &mut Tape) -> Result<Var> {
    let p = params.bind(tape)?;
    let xv = tape.constant(x.clone())?;
    let h = tape.matmul(xv, p["w1"])?;
    let h = tape.add_bias(h, p["b1"])?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, p["w2"])?;
    let o = tape.add_bias(o, p["b2"])?;
    let o = tape.slice_cols(o, 0, 3)?;
    let o = tape.layernorm(o, p["ln.g"], p["ln.b"])?;
    let s = tape.softmax(o)?;
    let l = tape.log(s)?;
    let l = tape.select_cols(l, &[1])?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

fn two_layer_params(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("w1", random_tensor(&mut rng, &[4, 6], 0.8));
    p.insert("b1", random_tensor(&mut rng, &[6], 0.3));
    p.insert("w2", random_tensor(&mut rng, &[6, 4], 0.8));
    p.insert("b2", random_tensor(&mut rng, &[4], 0.3));
    p.insert("ln.g", random_tensor(&mut rng, &[3], 1.0));
    p.insert("ln.b", random_tensor(&mut rng, &[3], 0.5));
    p
}

fn analytic(params: &ParamSet, f: impl Fn(&ParamSet, &mut Tape) -> Result<Var>) -> BTreeMap<String, Tensor> {
    let mut tape = Tape::new();
    let loss = f(params, &mut tape).unwrap();
    tape.backward(loss).unwrap().by_name()
}

fn value(params: &ParamSet, f: &impl Fn(&ParamSet, &mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    Ok(tape.value(loss).item())
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let params = two_layer_params(11);
    assert_eq!(params.numel(), 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[5, 4], 1.0);
    let f = |p: &ParamSet, t: &mut Tape| two_layer(p, &x, t);
    let ana = analytic(&params, f);
    let num = numeric_gradients(&params, DEFAULT_STEP, |p| value(p, &f)).unwrap();
    let err = max_relative_error(&ana, &num, 1e-6);
    assert!(err < 1e-6, "max relative error {err:e}");
}

/// Exercises every differentiable op at least once.
fn every_op(params: &ParamSet, tape: &mut Tape) -> Result<Var> {
    let p = params.bind(tape)?;
    let x = tape.embedding(p["emb"], &[2, 0, 2, 1])?; // 4x3
    let xt = tape.transpose(x)?; // 3x4
    let gram = tape.matmul(x, xt)?; // 4x4
    let gram = tape.scale(gram, 0.5)?;
    let attn = tape.softmax(gram)?;
    let mixed = tape.matmul(attn, x)?; // 4x3
    let res = tape.add(mixed, x)?;
    let res = tape.sub(res, x)?;
    let res = tape.add(res, mixed)?;
    let normed = tape.layernorm(res, p["g"], p["b"])?;
    let act = tape.gelu(normed)?;
    let prod = tape.mul(act, x)?;
    let top = tape.slice_rows(prod, 0, 2)?;
    let bottom = tape.select_rows(prod, &[3, 3])?;
    let stacked = tape.concat_rows(&[top, bottom])?;
    let left = tape.slice_cols(stacked, 0, 1)?;
    let right = tape.select_cols(stacked, &[2, 1])?;
    let wide = tape.concat_cols(&[left, right])?;
    let biased = tape.add_bias(wide, p["bias"])?;
    let probs = tape.softmax(biased)?;
    let logs = tape.log(probs)?;
    let s = tape.sum(logs)?;
    let m = tape.mean(act)?;
    tape.add_all(&[s, m])
}

#[test]
fn composition_of_all_ops_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    params.insert("emb", random_tensor(&mut rng, &[3, 3], 1.0));
    params.insert("g", random_tensor(&mut rng, &[3], 1.0));
    params.insert("b", random_tensor(&mut rng, &[3], 1.0));
    params.insert("bias", random_tensor(&mut rng, &[3], 1.0));
    let ana = analytic(&params, every_op);
    let num = numeric_gradients(&params, DEFAULT_STEP, |p| value(p, &every_op)).unwrap();
    let err = max_relative_error(&ana, &num, 1e-6);
    assert!(err <= 1e-4, "max relative error {err:e}");
}

#[test]
fn detach_equals_literal_substitution() {
    let params = two_layer_params(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, &[3, 4], 1.0);

    // loss = sum(f(w) * stopgrad(f(w)))
    let mut tape = Tape::new();
    let p = params.bind(&mut tape).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let h = tape.matmul(xv, p["w1"]).unwrap();
    let teacher = tape.detach(h).unwrap();
    let teacher_value = tape.value(teacher).clone();
    let prod = tape.mul(h, teacher).unwrap();
    let loss = tape.sum(prod).unwrap();
    let detached = tape.backward(loss).unwrap().by_name();

    let mut tape = Tape::new();
    let p = params.bind(&mut tape).unwrap();
    let xv = tape.constant(x).unwrap();
    let h = tape.matmul(xv, p["w1"]).unwrap();
    let literal = tape.constant(teacher_value).unwrap();
    let prod = tape.mul(h, literal).unwrap();
    let loss = tape.sum(prod).unwrap();
    let substituted = tape.backward(loss).unwrap().by_name();

    assert_eq!(detached, substituted);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let params = two_layer_params(21);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[6, 4], 1.0);
    let run = || {
        let mut tape = Tape::new();
        let l = two_layer(&params, &x, &mut tape).unwrap();
        (tape.value(l).item().to_bits(), tape.backward(l).unwrap().by_name())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_normalized(
        rows in 1usize..4,
        logits in prop::collection::vec(-30.0f64..30.0, 12),
    ) {
        let cols = 12 / rows.max(1);
        let data = logits[..rows * cols].to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, cols, data).unwrap()).unwrap();
        let y = tape.softmax(x).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_small_compositions_pass_gradcheck(seed in 0u64..1000) {
        let params = two_layer_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = random_tensor(&mut rng, &[3, 4], 1.5);
        let f = |p: &ParamSet, t: &mut Tape| two_layer(p, &x, t);
        let ana = analytic(&params, f);
        let num = numeric_gradients(&params, DEFAULT_STEP, |p| value(p, &f)).unwrap();
        let err = max_relative_error(&ana, &num, 1e-6);
        prop_assert!(err <= 1e-4, "max relative error {:e}", err);
    }
}
