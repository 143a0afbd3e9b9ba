mod common;

use common::*;
use specvit::model::backbone::drop_path;
use specvit::model::frontend::band_dropout;
use specvit::model::params::{ParamStore, Session};
use specvit::numerics::{Graph, Mode, Tensor};

fn run<F>(x: &Tensor<f32>, mode: Mode, seed: u64, f: F) -> Tensor<f32>
where
    F: Fn(&mut Session<f32>, specvit::numerics::Var) -> specvit::Result<specvit::numerics::Var>,
{
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let v = g.constant(x.clone());
    let mut s = Session::new(&mut g, &mut store, mode, &mut r);
    let y = f(&mut s, v).unwrap();
    g.value(y).clone()
}

#[test]
fn band_dropout_is_identity_in_eval() {
    let x = randn::<f32>(&[2, 8, 3, 4, 4], &mut rng(1));
    for seed in 0..5 {
        let y = run(&x, Mode::Eval, seed, |s, v| band_dropout(s, v, 0.1));
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn band_dropout_preserves_expectation() {
    let c = 8;
    let x = Tensor::<f32>::ones(&[1, c, 1, 1, 1]);
    let mut r = rng(2);
    let mut sums = vec![0f64; c];
    let masks = 100_000;
    for _ in 0..masks {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let v = g.constant(x.clone());
        let mut s = Session::new(&mut g, &mut store, Mode::Train, &mut r);
        let y = band_dropout(&mut s, v, 0.1).unwrap();
        for (acc, &v) in sums.iter_mut().zip(g.value(y).data()) {
            *acc += v as f64;
        }
    }
    for (ch, s) in sums.iter().enumerate() {
        let mean = s / masks as f64;
        assert!((mean - 1.0).abs() < 0.01, "channel {ch}: mean {mean}");
    }
}

#[test]
fn band_dropout_mask_is_shared_by_the_batch_and_whole_channels() {
    let x = Tensor::<f32>::ones(&[3, 16, 2, 3, 3]);
    let y = run(&x, Mode::Train, 7, |s, v| band_dropout(s, v, 0.5));
    let per_sample = 16 * 18;
    let first = &y.data()[..per_sample];
    assert!(first.iter().any(|&v| v == 0.0) && first.iter().any(|&v| v == 2.0));
    for b in 1..3 {
        assert_eq!(&y.data()[b * per_sample..(b + 1) * per_sample], first);
    }
    for ch in first.chunks(18) {
        assert!(ch.iter().all(|&v| v == ch[0]));
    }
}

#[test]
fn drop_path_is_deterministic_identity_in_eval() {
    let x = randn::<f32>(&[4, 5, 5, 8], &mut rng(3));
    let a = run(&x, Mode::Eval, 1, |s, v| drop_path(s, v, 0.2));
    let b = run(&x, Mode::Eval, 2, |s, v| drop_path(s, v, 0.2));
    assert_eq!(a.data(), x.data());
    assert_eq!(a.data(), b.data());
}

#[test]
fn drop_path_drops_whole_samples_in_train() {
    let x = Tensor::<f32>::ones(&[64, 2, 2, 4]);
    let y = run(&x, Mode::Train, 5, |s, v| drop_path(s, v, 0.25));
    let mut dropped = 0;
    for sample in y.data().chunks(16) {
        assert!(sample.iter().all(|&v| v == sample[0]));
        if sample[0] == 0.0 {
            dropped += 1;
        } else {
            assert!((sample[0] - 1.0 / 0.75).abs() < 1e-6);
        }
    }
    assert!(dropped > 0 && dropped < 64);
}

#[test]
fn out_of_range_probability_rejected() {
    let x = Tensor::<f32>::ones(&[2, 2]);
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let v = g.constant(x);
    let mut s = Session::new(&mut g, &mut store, Mode::Train, &mut r);
    assert!(s.dropout(v, 1.0).is_err());
    assert!(s.dropout(v, -0.1).is_err());
}
