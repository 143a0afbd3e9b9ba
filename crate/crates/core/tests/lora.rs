mod common;

use common::*;
use specvit::model::Model;
use specvit::numerics::Mode;
use specvit::peft::{merge_lora, param_report, set_trainable, TrainMode};
use specvit::Error;

#[test]
fn zero_initialized_adapters_match_adapter_free_model() {
    let dev = zero_init_deviation();
    assert!(dev <= 1e-6, "{dev}");
}

#[test]
fn merging_preserves_outputs() {
    let worst = merge_deviation::<f64>();
    assert!(worst <= 1e-5, "worst relative deviation {worst}");
    // Single precision adds rounding of the folded weights.
    let worst = merge_deviation::<f32>();
    assert!(worst <= 1e-4, "f32 worst relative deviation {worst}");
}

#[test]
fn merge_contract_violations() {
    let mut m = adapted_model::<f32>(3);
    m.set_mode(Mode::Train);
    assert!(matches!(merge_lora(&mut m), Err(Error::Contract(_))));
    m.set_mode(Mode::Eval);
    merge_lora(&mut m).unwrap();
    assert!(matches!(merge_lora(&mut m), Err(Error::Contract(_))));
}

#[test]
fn lora_only_mode_trains_exactly_the_adapters() {
    let mut m = Model::<f32>::new(tiny_model_config(6), 4).unwrap();
    set_trainable(&mut m, TrainMode::Peft);
    for (_, p) in m.store.iter() {
        assert_eq!(p.trainable, p.name.contains(".lora_"), "{}", p.name);
    }
    let rep = param_report(&m);
    assert_eq!(rep.trainable, rep.lora_params);
    set_trainable(&mut m, TrainMode::Full);
    assert_eq!(param_report(&m).trainable, m.store.weight_count());
}
