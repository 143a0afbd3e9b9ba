mod common;

use common::*;
use specvit::numerics::Mode;

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        for seed in 0..SEEDS {
            let rep = check_op(&case, seed).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", case.name));
            assert!(
                rep.max_rel_err < GRAD_TOL,
                "{} seed {seed}: rel err {:.3e} at {:?} (analytic {}, numeric {})",
                case.name,
                rep.max_rel_err,
                rep.worst,
                rep.analytic,
                rep.numeric
            );
            assert!(rep.coordinates > 0);
        }
    }
}

#[test]
fn transformer_block_matches_finite_differences() {
    for seed in 0..SEEDS {
        let rep = check_block(seed).unwrap();
        assert!(rep.max_rel_err < GRAD_TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn reduction_matches_finite_differences() {
    let model = block_model(3);
    // Single-stage models carry no reduction; build a two-stage one.
    let mut cfg = model.config.clone();
    cfg.depths = vec![1, 1];
    cfg.heads = vec![2, 2];
    let model = specvit::model::Model::<f64>::new(cfg, 3).unwrap();
    let reduce = model.net.stages[0].reduce.clone().unwrap();
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("stages.0.reduce.") && p.trainable)
        .filter(|(_, p)| !p.name.contains("running"))
        .map(|(_, p)| p.name.clone())
        .collect();
    for seed in 0..3 {
        let input = randn(&[2, 5, 5, 16], &mut rng(seed));
        let rep = check_module(&model.store, &names, input, Mode::Train, seed, |s, x| reduce.forward(s, x)).unwrap();
        assert!(rep.max_rel_err < GRAD_TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn frontend_probe_matches_finite_differences() {
    let model = block_model(5);
    let front = model.net.frontend.clone();
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("frontend.") && (p.name.contains("att") || p.name.contains("pos")))
        .map(|(_, p)| p.name.clone())
        .collect();
    assert!(!names.is_empty());
    let input = randn(&[1, 15, 9, 9], &mut rng(5));
    let rep = check_module(&model.store, &names, input, Mode::Eval, 5, |s, x| front.forward(s, x)).unwrap();
    assert!(rep.max_rel_err < GRAD_TOL, "{rep:?}");
}
