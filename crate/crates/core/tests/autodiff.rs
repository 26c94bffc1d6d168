//! Reverse-mode gradients of every tape operation against central
//! differences.

use ltkd::math::{Matrix, NodeId, Tape};
use ltkd::model::Mlp;
use ltkd::rng::{stream, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const H: f64 = 1e-6;
const FLOOR: f64 = 1e-8;
const TOL: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..=hi))
}

/// Largest entrywise relative error with the denominator floored.
fn max_rel(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, f)| (a - f).abs() / f.abs().max(FLOOR))
        .fold(0.0, f64::max)
}

/// Differences the op output entrywise and only then contracts with `w`, so
/// entries untouched by the perturbation cancel exactly and the quotient's
/// rounding error scales with the affected outputs alone.
fn contracted_difference(out: impl Fn(&Matrix) -> Matrix, x: &Matrix, w: &Matrix) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + H;
        let plus = out(&probe);
        probe.as_mut_slice()[i] = orig - H;
        let minus = out(&probe);
        probe.as_mut_slice()[i] = orig;
        let d: f64 = plus
            .as_slice()
            .iter()
            .zip(minus.as_slice())
            .zip(w.as_slice())
            .map(|((p, m), w)| w * (p - m))
            .sum();
        grad.as_mut_slice()[i] = d / (2.0 * H);
    }
    grad
}

/// Compares the tape gradient of `Σ W ⊙ op(inputs)`, for a fixed random
/// weighting `W`, with central differences for every input. Returns the worst
/// relative error over all seeds.
fn check_op(
    name: &str,
    shapes: &[(usize, usize)],
    range: (f64, f64),
    op: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> f64 {
    let forward = |inputs: &[Matrix]| -> Matrix {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = op(&mut tape, &ids);
        tape.value(out).clone()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = stream(seed, Stream::Check);
        let inputs: Vec<Matrix> = shapes
            .iter()
            .map(|&(r, c)| uniform(&mut rng, r, c, range.0, range.1))
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = op(&mut tape, &ids);
        let (r, c) = tape.value(out).shape();
        let w = uniform(&mut rng, r, c, -1.0, 1.0);
        let wn = tape.constant(w.clone());
        let prod = tape.mul(out, wn).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();

        for (k, id) in ids.iter().enumerate() {
            let analytic = grads.get_or_zeros(&tape, *id);
            let out_k = |x: &Matrix| {
                let mut v = inputs.clone();
                v[k] = x.clone();
                forward(&v)
            };
            let numeric = contracted_difference(out_k, &inputs[k], &w);
            let err = max_rel(&analytic, &numeric);
            assert!(err < TOL, "{name}: input {k}, seed {seed}, rel err {err:e}");
            worst = worst.max(err);
        }
    }
    eprintln!("{name}: worst relative error {worst:e}");
    worst
}

const SYM: (f64, f64) = (-3.0, 3.0);

#[test]
fn matmul_gradient() {
    check_op("matmul", &[(3, 4), (4, 2)], SYM, |t, x| t.matmul(x[0], x[1]).unwrap());
}

#[test]
fn add_bias_gradient() {
    check_op("add_bias", &[(3, 4), (1, 4)], SYM, |t, x| t.add_bias(x[0], x[1]).unwrap());
}

#[test]
fn add_sub_mul_gradients() {
    check_op("add", &[(3, 4), (3, 4)], SYM, |t, x| t.add(x[0], x[1]).unwrap());
    check_op("sub", &[(3, 4), (3, 4)], SYM, |t, x| t.sub(x[0], x[1]).unwrap());
    check_op("mul", &[(3, 4), (3, 4)], SYM, |t, x| t.mul(x[0], x[1]).unwrap());
}

#[test]
fn scale_gradient() {
    check_op("scale", &[(3, 4)], SYM, |t, x| t.scale(x[0], -0.7));
}

#[test]
fn relu_gradient() {
    check_op("relu", &[(3, 4)], SYM, |t, x| t.relu(x[0]));
}

#[test]
fn exp_gradient() {
    check_op("exp", &[(3, 4)], SYM, |t, x| t.exp(x[0]));
}

#[test]
fn log_gradient() {
    // log needs a positive domain
    check_op("log", &[(3, 4)], (0.1, 3.0), |t, x| t.log(x[0]).unwrap());
}

#[test]
fn logsumexp_rows_gradient() {
    check_op("logsumexp_rows", &[(3, 5)], SYM, |t, x| t.logsumexp_rows(x[0]));
}

#[test]
fn broadcast_cols_gradient() {
    check_op("broadcast_cols", &[(3, 1)], SYM, |t, x| t.broadcast_cols(x[0], 4).unwrap());
}

#[test]
fn select_cols_gradient() {
    check_op("select_cols", &[(3, 6)], SYM, |t, x| t.select_cols(x[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn reductions_gradient() {
    check_op("row_sum", &[(3, 5)], SYM, |t, x| t.row_sum(x[0]));
    check_op("sum", &[(3, 5)], SYM, |t, x| t.sum(x[0]));
}

#[test]
fn composite_log_softmax_gradient() {
    check_op("log_softmax", &[(4, 6)], SYM, |t, x| {
        let lse = t.logsumexp_rows(x[0]);
        let b = t.broadcast_cols(lse, 6).unwrap();
        t.sub(x[0], b).unwrap()
    });
}

#[test]
fn two_layer_mlp_loss_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = stream(seed, Stream::Check);
        let model = Mlp::new(&[5, 7, 3], &mut rng).unwrap();
        let x = uniform(&mut rng, 6, 5, -3.0, 3.0);
        let w = uniform(&mut rng, 6, 3, -1.0, 1.0);
        let m = model.clone();
        let (_, grads) = m
            .loss_and_grads(&x, |logits| {
                let loss = logits.hadamard(&w)?.sum();
                Ok((loss, w.clone()))
            })
            .unwrap();
        for (k, p) in model.params().iter().enumerate() {
            let logits = |v: &Matrix| {
                let mut params = model.params().to_vec();
                params[k] = v.clone();
                let probe = Mlp::from_params(model.dims(), params).unwrap();
                probe.forward(&x).unwrap()
            };
            let numeric = contracted_difference(logits, p, &w);
            let err = max_rel(&grads[k], &numeric);
            assert!(err < TOL, "seed {seed}, param {k}: {err:e}");
        }
    }
}
