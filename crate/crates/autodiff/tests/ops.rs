use proptest::prelude::*;
use sega_autodiff::checkpoint::{decode, encode, Record};
use sega_autodiff::{grad_check, op_gradient_suite, GradCheckOptions, ParamStore, Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        for (op, err) in op_gradient_suite(seed, 16).unwrap() {
            prop_assert!(err < 1e-4, "{op}: relative error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in proptest::collection::vec(
            (proptest::collection::vec(1usize..4, 0..3), any::<u32>()),
            0..5,
        )
    ) {
        let records: Vec<Record> = tensors
            .iter()
            .enumerate()
            .map(|(i, (shape, bits))| {
                let n: usize = shape.iter().product();
                Record {
                    name: format!("param.{i}"),
                    shape: shape.clone(),
                    data: (0..n as u32).map(|j| f32::from_bits(bits.wrapping_add(j) & 0x7f7f_ffff)).collect(),
                }
            })
            .collect();
        let bytes = encode(&records).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            let abits: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(abits, bbits);
        }
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}

fn linear_store() -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_f64(vec![4, 3], &[0.3, -0.2, 0.5, 0.1, 0.7, -0.4, -0.6, 0.2, 0.9, 0.05, -0.3, 0.25]).unwrap())
        .unwrap();
    s.add("b", Tensor::from_f64(vec![3], &[0.1, -0.1, 0.2]).unwrap()).unwrap();
    s.add("x", Tensor::from_f64(vec![2, 4], &[1.0, -0.5, 0.25, 2.0, -1.0, 0.3, 0.8, -0.2]).unwrap())
        .unwrap();
    s
}

#[test]
fn linear_layer_gradients_match_finite_differences() {
    let store = linear_store();
    let report = grad_check(
        &store,
        |s| {
            let mut t = Tape::eval();
            let x = t.param(s, s.id("x").unwrap())?;
            let w = t.param(s, s.id("w").unwrap())?;
            let b = t.param(s, s.id("b").unwrap())?;
            let y = t.affine(x, w, b)?;
            let y2 = t.mul(y, y)?;
            let loss = t.sum(y2)?;
            Ok((t, loss))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let store = linear_store().cast::<f32>();
        let mut t = Tape::train(42);
        let x = t.param(&store, store.id("x").unwrap()).unwrap();
        let w = t.param(&store, store.id("w").unwrap()).unwrap();
        let b = t.param(&store, store.id("b").unwrap()).unwrap();
        let y = t.affine(x, w, b).unwrap();
        let y = t.dropout(y, 0.3).unwrap();
        let y = t.row_softmax(y).unwrap();
        let l = t.log(y).unwrap();
        let loss = t.sum(l).unwrap();
        let grads = t.backward(loss).unwrap();
        grads
            .param_grads(&store)
            .into_iter()
            .flat_map(|g| g.into_data())
            .map(f32::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_preserves_expectation() {
    let n = 100_000;
    let mut t = Tape::<f64>::train(7);
    let x = t.constant(Tensor::full(&[1, n], 2.0)).unwrap();
    let y = t.dropout(x, 0.3).unwrap();
    let mean = t.value(y).data().iter().sum::<f64>() / n as f64;
    assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    let zeros = t.value(y).data().iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
    assert!((zeros - 0.3).abs() < 0.01, "drop fraction {zeros}");
}
