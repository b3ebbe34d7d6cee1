//! Central finite-difference checks of the tape against analytic gradients.

mod common;

use common::{jittered, random_tensor, tiny_config};
use fedadapt::autodiff::{Activation, Tape, Var};
use fedadapt::model::{AdapterSpec, AdapterVariant};
use fedadapt::tensor::Tensor;
use fedadapt::tree::FreezePolicy;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Denominator floor: smaller gradients are compared to an absolute 1e-10,
/// the round-off resolution of the central difference.
const FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks every element of every input. `build` records a scalar loss.
fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).unwrap().clone();
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let e = rel_err(g.data()[k], numeric);
            assert!(e < REL_TOL, "input {i} elem {k}: analytic {} numeric {numeric} rel {e}", g.data()[k]);
        }
    }
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(random_tensor(&shape, seed));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_gradients() {
    check_op(vec![random_tensor(&[3, 4], 1), random_tensor(&[4, 5], 2)], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        probe(t, y, 3)
    });
}

#[test]
fn activation_gradients() {
    for act in [Activation::Swish, Activation::Sigmoid, Activation::Relu] {
        check_op(vec![random_tensor(&[4, 6], 4)], |t, v| {
            let y = t.activate(v[0], act);
            probe(t, y, 5)
        });
    }
}

#[test]
fn layernorm_gradients() {
    check_op(
        vec![random_tensor(&[3, 8], 6), random_tensor(&[8], 7), random_tensor(&[8], 8)],
        |t, v| {
            let y = t.layernorm(v[0], v[1], v[2], 1e-5).unwrap();
            probe(t, y, 9)
        },
    );
}

#[test]
fn softmax_xent_gradients() {
    let labels = [0, 3, 2, 4];
    let mask = [true, false, true, true];
    check_op(vec![random_tensor(&[4, 5], 10).scaled(3.0)], |t, v| {
        t.softmax_xent(v[0], &labels, &mask).unwrap()
    });
}

#[test]
fn softmax_rows_and_transpose_gradients() {
    check_op(vec![random_tensor(&[3, 5], 11)], |t, v| {
        let s = t.softmax_rows(v[0]);
        let tr = t.transpose(s).unwrap();
        probe(t, tr, 12)
    });
}

#[test]
fn depthwise_conv_gradients() {
    check_op(vec![random_tensor(&[6, 4], 13), random_tensor(&[3, 4], 14)], |t, v| {
        let y = t.depthwise_conv1d(v[0], v[1]).unwrap();
        probe(t, y, 15)
    });
}

#[test]
fn bias_scale_gradients() {
    check_op(vec![random_tensor(&[3, 4], 16), random_tensor(&[4], 17)], |t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        let y = t.scale(y, -1.7);
        probe(t, y, 18)
    });
}

fn check_full_model(variant: AdapterVariant) {
    let (model, mut tree) = jittered(tiny_config(), Some(AdapterSpec::new(variant, 4)), 21);
    tree.set_freeze(FreezePolicy::AllTrainable).unwrap();
    let features = random_tensor(&[5, model.config.input_dim], 22);
    let labels = [12, 3, 3, 12, 7];
    let mask = [true; 5];
    let loss_of = |tree: &fedadapt::tree::ParameterTree| {
        let mut tape = Tape::new();
        let bound = tree.bind(&mut tape);
        let x = tape.constant(features.clone());
        let logits = model.logits(&mut tape, &bound, x).unwrap();
        let l = tape.softmax_xent(logits, &labels, &mask).unwrap();
        (tape, bound, l)
    };
    let (mut tape, bound, loss) = loss_of(&tree);
    tape.backward(loss).unwrap();
    let grads = bound.trainable_grads(&tape, &tree);
    assert_eq!(grads.len(), tree.len());
    let mut checked = 0;
    for (path, g) in &grads {
        for k in 0..g.numel() {
            let orig = tree.tensor(path).unwrap().data()[k];
            tree.tensor_mut(path).unwrap().data_mut()[k] = orig + STEP;
            let (t, _, l) = loss_of(&tree);
            let up = t.value(l).item();
            tree.tensor_mut(path).unwrap().data_mut()[k] = orig - STEP;
            let (t, _, l) = loss_of(&tree);
            let down = t.value(l).item();
            tree.tensor_mut(path).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(g.data()[k], numeric);
            assert!(e < REL_TOL, "{variant} {path}[{k}]: analytic {} numeric {numeric} rel {e}", g.data()[k]);
            checked += 1;
        }
    }
    assert_eq!(checked, tree.total_count());
}

#[test]
fn full_model_gradients_separate() {
    check_full_model(AdapterVariant::Separate);
}

#[test]
fn full_model_gradients_seq_end() {
    check_full_model(AdapterVariant::SeqEnd);
}

#[test]
fn full_model_gradients_seq_both() {
    check_full_model(AdapterVariant::SeqBoth);
}

#[test]
fn full_model_gradients_parallel_end() {
    check_full_model(AdapterVariant::ParallelEnd);
}

#[test]
fn full_model_gradients_parallel_both() {
    check_full_model(AdapterVariant::ParallelBoth);
}
