mod common;

use common::{close, fd_max_rel_error, max_diff, probe, random};
use proptest::prelude::*;
use ssa_core::data::SplitMix64;
use ssa_core::tensor::io::{tensor_from_bytes, tensor_to_bytes};
use ssa_core::{Error, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 7.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[5.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = SplitMix64::new(seed);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let err = fd_max_rel_error(&[a, b], 1e-5, |tp, v| {
            let c = tp.matmul(v[0], v[1]).unwrap();
            probe(tp, c, seed)
        });
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.softmax(x, 0).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    let oracle: Vec<f64> = e.iter().map(|v| v / z).collect();
    assert!(max_diff(tape.value(s).data(), &oracle) < 1e-12);

    let x = tape.constant(t(&[3], &[1000.0, 1000.0, -1000.0]));
    let s = tape.softmax(x, 0).unwrap();
    assert!(tape.value(s).all_finite());
    assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn log_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let l = tape.log_softmax(x, 0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!(close(tape.value(l).data(), &[-ln2, -ln2], 1e-15));
}

#[test]
fn concat_then_slice_recovers_inputs() {
    let mut rng = SplitMix64::new(3);
    let (a, b) = (random(&[3, 2], &mut rng), random(&[3, 2], &mut rng));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.concat_channel(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[3, 4]);
    for r in 0..3 {
        assert_eq!(&tape.value(c).data()[r * 4..r * 4 + 2], &a.data()[r * 2..r * 2 + 2]);
    }
    let left = tape.slice_channel(c, 0, 2).unwrap();
    let right = tape.slice_channel(c, 2, 2).unwrap();
    assert_eq!(tape.value(left), &a);
    assert_eq!(tape.value(right), &b);

    let bad = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.concat_channel(va, bad).is_err());
}

#[test]
fn linear_1x1_examples() {
    let mut rng = SplitMix64::new(4);
    let x = random(&[2, 3, 4], &mut rng);
    let bias = random(&[4], &mut rng);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let w = tape.constant(Tensor::identity(4));
    let zero = tape.constant(Tensor::zeros(&[4]));
    let y = tape.linear_1x1(vx, w, zero).unwrap();
    assert_eq!(tape.value(y), &x);

    let z = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let w = tape.constant(random(&[4, 4], &mut rng));
    let b = tape.constant(bias.clone());
    let y = tape.linear_1x1(z, w, b).unwrap();
    for px in tape.value(y).data().chunks(4) {
        assert_eq!(px, bias.data());
    }
}

/// Direct zero-padded 3×3 correlation.
fn dwconv_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Vec<f64> {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..d {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        acc += k.at(&[dy, dx, c]) * x.at(&[sy as usize, sx as usize, c]);
                    }
                }
                out[(y * w + xx) * d + c] = acc;
            }
        }
    }
    out
}

#[test]
fn depthwise_conv_examples() {
    let mut rng = SplitMix64::new(5);
    let x = random(&[4, 4, 2], &mut rng);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let centre = Tensor::from_fn(&[3, 3, 2], |i| if i / 2 == 4 { 1.0 } else { 0.0 });
    let k = tape.constant(centre);
    let y = tape.depthwise_conv3x3(vx, k).unwrap();
    assert_eq!(tape.value(y), &x);

    let c = tape.constant(Tensor::full(&[4, 4, 1], 2.5));
    let k = tape.constant(Tensor::full(&[3, 3, 1], 1.0 / 9.0));
    let y = tape.depthwise_conv3x3(c, k).unwrap();
    for yy in 1..3 {
        for xx in 1..3 {
            assert!((tape.value(y).at(&[yy, xx, 0]) - 2.5).abs() < 1e-15);
        }
    }

    let x1 = random(&[4, 4, 1], &mut rng);
    let k1 = random(&[3, 3, 1], &mut rng);
    let (vx, vk) = (tape.constant(x1.clone()), tape.constant(k1.clone()));
    let y = tape.depthwise_conv3x3(vx, vk).unwrap();
    assert_eq!(tape.value(y).data(), dwconv_oracle(&x1, &k1).as_slice());

    let bad = tape.constant(Tensor::zeros(&[3, 3, 2]));
    assert!(tape.depthwise_conv3x3(vx, bad).is_err());
}

#[test]
fn reductions_and_backward_contract() {
    let mut tape = Tape::new();
    let ones = tape.param(Tensor::ones(&[2, 3]));
    let s = tape.sum_all(ones).unwrap();
    assert_eq!(tape.value(s).item(), 6.0);
    let m = tape.mean_all(ones).unwrap();
    let g = tape.backward(m).unwrap();
    assert!(g.get(ones).unwrap().data().iter().all(|v: &f64| (*v - 1.0 / 6.0).abs() < 1e-15));
    assert!(matches!(tape.backward(ones), Err(Error::Contract(_))));
}

#[test]
fn detach_blocks_gradient() {
    let mut rng = SplitMix64::new(6);
    let mut tape = Tape::new();
    let x = tape.param(random(&[3], &mut rng));
    let d = tape.detach(x);
    assert_eq!(tape.value(d), tape.value(x));
    let e = tape.exp(d);
    let sq = tape.mul(e, d).unwrap();
    let l = tape.sum_all(sq).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(d).is_none());
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn three_op_chain_matches_finite_differences() {
    let mut rng = SplitMix64::new(7);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 3], &mut rng);
    let err = fd_max_rel_error(&[a, b], 1e-5, |tp, v| {
        let m = tp.matmul(v[0], v[1]).unwrap();
        let s = tp.softmax(m, 1).unwrap();
        let l = tp.log(s);
        probe(tp, l, 1)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn tensor_file_round_trip() {
    let mut rng = SplitMix64::new(8);
    let x = random(&[2, 3, 4], &mut rng);
    let back: Tensor<f64> = tensor_from_bytes(&tensor_to_bytes(&x)).unwrap();
    assert_eq!(back, x);
}

/// Every differentiable op against central differences on random shapes.
#[test]
fn op_gradients_over_twenty_seeds() {
    type Op = fn(&mut Tape<f64>, &[ssa_core::Var]) -> ssa_core::Var;
    let cases: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("softmax", vec![vec![3, 4]], |tp, v| tp.softmax(v[0], 1).unwrap()),
        ("softmax0", vec![vec![3, 4]], |tp, v| tp.softmax(v[0], 0).unwrap()),
        ("log_softmax", vec![vec![2, 5]], |tp, v| tp.log_softmax(v[0], 1).unwrap()),
        ("transpose", vec![vec![2, 3]], |tp, v| tp.transpose(v[0]).unwrap()),
        ("concat", vec![vec![2, 2], vec![2, 3]], |tp, v| tp.concat_channel(v[0], v[1]).unwrap()),
        ("slice", vec![vec![2, 5]], |tp, v| tp.slice_channel(v[0], 1, 3).unwrap()),
        ("linear_1x1", vec![vec![2, 2, 3], vec![3, 2], vec![2]], |tp, v| {
            tp.linear_1x1(v[0], v[1], v[2]).unwrap()
        }),
        ("dwconv", vec![vec![3, 4, 2], vec![3, 3, 2]], |tp, v| tp.depthwise_conv3x3(v[0], v[1]).unwrap()),
        ("conv3x3", vec![vec![3, 3, 2], vec![3, 3, 2, 2], vec![2]], |tp, v| {
            tp.conv3x3(v[0], v[1], v[2]).unwrap()
        }),
        ("sum", vec![vec![2, 3, 2]], |tp, v| tp.sum(v[0], &[0, 2]).unwrap()),
        ("mean", vec![vec![2, 3]], |tp, v| tp.mean(v[0], &[1]).unwrap()),
        ("max", vec![vec![3, 4]], |tp, v| tp.max(v[0], 1).unwrap()),
        ("add", vec![vec![2, 2], vec![2, 2]], |tp, v| tp.add(v[0], v[1]).unwrap()),
        ("sub", vec![vec![2, 2], vec![2, 2]], |tp, v| tp.sub(v[0], v[1]).unwrap()),
        ("mul", vec![vec![2, 2], vec![2, 2]], |tp, v| tp.mul(v[0], v[1]).unwrap()),
        ("div", vec![vec![2, 2], vec![2, 2]], |tp, v| {
            let e = tp.exp(v[1]);
            tp.div(v[0], e).unwrap()
        }),
        ("scale_rows", vec![vec![3, 2], vec![3]], |tp, v| tp.scale_rows(v[0], v[1]).unwrap()),
        ("relu", vec![vec![4]], |tp, v| tp.relu(v[0])),
        ("exp", vec![vec![4]], |tp, v| tp.exp(v[0])),
        ("log", vec![vec![4]], |tp, v| {
            let e = tp.exp(v[0]);
            tp.log(e)
        }),
        ("recip", vec![vec![4]], |tp, v| {
            let e = tp.exp(v[0]);
            tp.recip(e)
        }),
        ("scale_neg_add", vec![vec![3]], |tp, v| {
            let s = tp.scale(v[0], 2.5);
            let n = tp.neg(s);
            tp.add_scalar(n, 0.3)
        }),
    ];
    for (name, shapes, op) in cases {
        for seed in 0..20u64 {
            let mut rng = SplitMix64::derive(seed, 1);
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    // keep relu/max away from their kinks
                    Tensor::from_fn(s, |_| {
                        let v = rng.normal();
                        if v.abs() < 0.05 { v + 0.1 } else { v }
                    })
                })
                .collect();
            let err = fd_max_rel_error(&inputs, 1e-5, |tp, v| {
                let y = op(tp, v);
                probe(tp, y, seed + 100)
            });
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        c in -100.0f64..100.0,
    ) {
        let x = Tensor::from_f64(&[3, 4], &vals).unwrap();
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let s = tape.softmax(vx, 1).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
        let shifted = tape.constant(x.map(|v| v + c));
        let s2 = tape.softmax(shifted, 1).unwrap();
        prop_assert!(max_diff(tape.value(s).data(), tape.value(s2).data()) < 1e-12);
        let ls = tape.log_softmax(vx, 1).unwrap();
        let composed: Vec<f64> = tape.value(s).data().iter().map(|p| p.ln()).collect();
        prop_assert!(max_diff(tape.value(ls).data(), &composed) < 1e-9);
    }
}
