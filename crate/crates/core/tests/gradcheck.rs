//! Central finite-difference gradient checks for every tape operation.
//!
//! The oracle never touches the backward pass: it evaluates the forward map
//! twice per input element (h = 1e-6, 64-bit) and compares against the
//! analytic gradient from `Tape::backward`.

use speechstate::rng::SplitMix64;
use speechstate::tensor::{ActKind, BnState, Mode, NodeId, PoolKind, Tape, Tensor};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Builds the graph under test from leaf ids; returns the output node.
type Build = dyn Fn(&mut Tape, &[NodeId]) -> NodeId;

/// Forward-only evaluation of sum(r ⊙ f(inputs)); the finite-difference side.
fn weighted_output(inputs: &[Tensor], r: &[f64], build: &Build) -> f64 {
    let mut tape = Tape::no_grad();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    tape.value(out).data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Max relative error between analytic and central-difference gradients over
/// every element of every checked input. Relative error uses a small floor in
/// the denominator so exactly-zero gradients compare absolutely.
fn gradcheck(inputs: &[Tensor], check: &[usize], rng: &mut SplitMix64, build: &Build) -> f64 {
    // Random projection weights make the scalar loss sensitive to every
    // output element.
    let out_len = {
        let mut tape = Tape::no_grad();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.value(out).len()
    };
    let r: Vec<f64> = (0..out_len).map(|_| rng.uniform(-1.0, 1.0)).collect();

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &ids);
    let shape = tape.value(out).shape().to_vec();
    let r_leaf = tape.leaf(Tensor::new(shape, r.clone()).unwrap());
    let prod = tape.mul(out, r_leaf).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut max_err: f64 = 0.0;
    for &which in check {
        let analytic = grads.get(ids[which]).expect("gradient for checked input");
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= H;
            let numeric =
                (weighted_output(&plus, &r, build) - weighted_output(&minus, &r, build)) / (2.0 * H);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            max_err = max_err.max(err);
        }
    }
    max_err
}

fn rand_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Keep inputs away from activation kinks so the central
            // difference does not straddle them.
            let mut v = rng.uniform(-1.0, 1.0);
            if v.abs() < 1e-4 {
                v += 0.3_f64.copysign(v + 1e-12);
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv2d_gradients() {
    let mut rng = SplitMix64::new(41);
    for inst in 0..20 {
        let groups = if inst % 2 == 0 { 1 } else { 2 };
        let cin = groups * (1 + rng.next_index(2));
        let cout = groups * (1 + rng.next_index(2));
        let h = 1 + rng.next_index(3);
        let w = 2 + rng.next_index(4);
        let ph = rng.next_index(2);
        let pw = rng.next_index(2);
        let kh = 1 + rng.next_index(h + 2 * ph);
        let kw = 1 + rng.next_index(w + 2 * pw);
        let n = 1 + rng.next_index(2);
        let with_bias = inst % 3 != 0;

        let x = rand_tensor(&[n, cin, h, w], &mut rng);
        let k = rand_tensor(&[cout, cin / groups, kh, kw], &mut rng);
        let b = rand_tensor(&[cout], &mut rng);
        let mut inputs = vec![x, k];
        if with_bias {
            inputs.push(b);
        }
        let check: Vec<usize> = (0..inputs.len()).collect();
        let err = gradcheck(&inputs, &check, &mut rng, &move |tape, ids| {
            let bias = if with_bias { Some(ids[2]) } else { None };
            tape.conv2d(ids[0], ids[1], bias, groups, (ph, pw)).unwrap()
        });
        assert!(err < TOL, "conv2d instance {inst}: max rel err {err}");
    }
}

#[test]
fn dense_gradients() {
    let mut rng = SplitMix64::new(42);
    for inst in 0..20 {
        let n = 1 + rng.next_index(4);
        let f = 1 + rng.next_index(6);
        let k = 1 + rng.next_index(4);
        let inputs = vec![
            rand_tensor(&[n, f], &mut rng),
            rand_tensor(&[f, k], &mut rng),
            rand_tensor(&[k], &mut rng),
        ];
        let err = gradcheck(&inputs, &[0, 1, 2], &mut rng, &|tape, ids| {
            tape.dense(ids[0], ids[1], ids[2]).unwrap()
        });
        assert!(err < TOL, "dense instance {inst}: max rel err {err}");
    }
}

#[test]
fn batchnorm_gradients_train_and_eval() {
    let mut rng = SplitMix64::new(43);
    for inst in 0..20 {
        let n = 2 + rng.next_index(3);
        let c = 1 + rng.next_index(3);
        let h = 1 + rng.next_index(3);
        let w = 1 + rng.next_index(3);
        let mode = if inst % 2 == 0 { Mode::Train } else { Mode::Eval };
        let inputs = vec![
            rand_tensor(&[n, c, h, w], &mut rng),
            rand_tensor(&[c], &mut rng),
            rand_tensor(&[c], &mut rng),
        ];
        // Non-trivial running stats so eval mode is exercised for real.
        let rm: Vec<f64> = (0..c).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let rv: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
        let err = gradcheck(&inputs, &[0, 1, 2], &mut rng, &move |tape, ids| {
            let mut state = BnState {
                running_mean: rm.clone(),
                running_var: rv.clone(),
            };
            tape.batchnorm(ids[0], ids[1], ids[2], &mut state, mode, 0.1, 1e-5)
                .unwrap()
        });
        assert!(err < TOL, "batchnorm {mode:?} instance {inst}: max rel err {err}");
    }
}

#[test]
fn pool_gradients() {
    let mut rng = SplitMix64::new(44);
    for inst in 0..20 {
        let kind = if inst % 2 == 0 { PoolKind::Avg } else { PoolKind::Max };
        let n = 1 + rng.next_index(2);
        let c = 1 + rng.next_index(2);
        let h = 2 + rng.next_index(4);
        let w = 2 + rng.next_index(4);
        let kh = 1 + rng.next_index(h);
        let kw = 1 + rng.next_index(w);
        let sh = 1 + rng.next_index(2);
        let sw = 1 + rng.next_index(2);
        let inputs = vec![rand_tensor(&[n, c, h, w], &mut rng)];
        let err = gradcheck(&inputs, &[0], &mut rng, &move |tape, ids| {
            tape.pool2d(ids[0], kind, (kh, kw), (sh, sw)).unwrap()
        });
        assert!(err < TOL, "pool {kind:?} instance {inst}: max rel err {err}");
    }
}

#[test]
fn activation_gradients() {
    let kinds = [
        ActKind::Elu,
        ActKind::Relu,
        ActKind::Square,
        ActKind::Sigmoid,
        ActKind::Softmax,
    ];
    let mut rng = SplitMix64::new(45);
    for &kind in &kinds {
        for inst in 0..20 {
            let rows = 1 + rng.next_index(4);
            let cols = 2 + rng.next_index(4);
            let inputs = vec![rand_tensor(&[rows, cols], &mut rng)];
            let err = gradcheck(&inputs, &[0], &mut rng, &move |tape, ids| {
                tape.activate(ids[0], kind).unwrap()
            });
            assert!(err < TOL, "{kind:?} instance {inst}: max rel err {err}");
        }
    }
}

#[test]
fn safelog_gradients() {
    // Mix of values above the clamp floor and safely below it.
    let mut rng = SplitMix64::new(46);
    for inst in 0..20 {
        let n = 4 + rng.next_index(8);
        let data: Vec<f64> = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    rng.uniform(-1.0, -0.01) // clamped region, gradient 0
                } else {
                    rng.uniform(0.01, 1.0)
                }
            })
            .collect();
        let inputs = vec![Tensor::from_vec(data)];
        let err = gradcheck(&inputs, &[0], &mut rng, &|tape, ids| {
            tape.activate(ids[0], ActKind::SafeLog).unwrap()
        });
        assert!(err < TOL, "safelog instance {inst}: max rel err {err}");
    }
}

#[test]
fn dropout_gradients() {
    // The mask is a function of the seed alone, so a fixed seed makes the
    // perturbed forwards see the same mask.
    let mut rng = SplitMix64::new(47);
    for inst in 0..20 {
        let n = 6 + rng.next_index(20);
        let seed = rng.next_u64();
        let inputs = vec![rand_tensor(&[n], &mut rng)];
        let err = gradcheck(&inputs, &[0], &mut rng, &move |tape, ids| {
            let mut drop_rng = SplitMix64::new(seed);
            tape.dropout(ids[0], 0.3, Mode::Train, &mut drop_rng).unwrap()
        });
        assert!(err < TOL, "dropout instance {inst}: max rel err {err}");
    }
}

#[test]
fn weighted_cross_entropy_gradients() {
    let mut rng = SplitMix64::new(48);
    for inst in 0..20 {
        let n = 1 + rng.next_index(8);
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_f64() > 0.5) as u8).collect();
        let weights = (rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0));
        let inputs = vec![rand_tensor(&[n, 2], &mut rng)];
        let err = gradcheck(&inputs, &[0], &mut rng, &move |tape, ids| {
            tape.weighted_cross_entropy(ids[0], &labels, weights).unwrap()
        });
        assert!(err < TOL, "wce instance {inst}: max rel err {err}");
    }
}

#[test]
fn plumbing_gradients() {
    let mut rng = SplitMix64::new(49);
    for inst in 0..20 {
        let n = 2 + rng.next_index(6);
        let inputs = vec![rand_tensor(&[n], &mut rng), rand_tensor(&[n], &mut rng)];
        let err = gradcheck(&inputs, &[0, 1], &mut rng, &|tape, ids| {
            let s = tape.add(ids[0], ids[1]).unwrap();
            let m = tape.mul(s, ids[0]).unwrap();
            let sc = tape.scale(m, -1.7).unwrap();
            tape.reshape(sc, &[sc_len(tape, sc), 1]).unwrap()
        });
        assert!(err < TOL, "plumbing instance {inst}: max rel err {err}");
    }
}

fn sc_len(tape: &Tape, id: NodeId) -> usize {
    tape.value(id).len()
}
