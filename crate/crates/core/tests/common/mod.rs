#![allow(dead_code)]

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use specvit::cli::RunConfig;
use specvit::hsi_io::{synth_scene, SynthSpec};
use specvit::model::layers::LoraSpec;
use specvit::model::params::{ParamStore, Session};
use specvit::model::{Model, ModelConfig};
use specvit::peft::merge_lora;
use specvit::numerics::{grad_check, ConvSpec, GradCheckReport, Graph, Mode, Real, ReduceKind, Tensor, Var, NORM_EPS};
use specvit::train::Protocol;
use specvit::Result;

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

pub fn randn<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)).unwrap())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ y ⊙ W` with a fixed pseudo-random `W`, so every output coordinate
/// contributes a distinct weight to the gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = randn(&shape, &mut rng(seed ^ 0x5eed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

type OpFn = fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var>;

/// One differentiable operation: inputs drawn for a seed plus the forward map.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub apply: OpFn,
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn positive(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.abs() + 0.5)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            inputs: |r| {
                let s = dims(r, 3, 1, 4);
                vec![randn(&s, r), randn(&s, r)]
            },
            apply: |g, v, _| g.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            inputs: |r| {
                let s = dims(r, 2, 1, 5);
                vec![randn(&s, r), randn(&s, r)]
            },
            apply: |g, v, _| g.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: |r| {
                let s = dims(r, 3, 1, 4);
                vec![randn(&s, r), randn(&s, r)]
            },
            apply: |g, v, _| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            inputs: |r| vec![randn(&dims(r, 2, 1, 5), r)],
            apply: |g, v, r| Ok(g.scale(v[0], r.random_range(-2.0..2.0))),
        },
        OpCase {
            name: "add_scalar",
            inputs: |r| vec![randn(&dims(r, 2, 1, 5), r)],
            apply: |g, v, r| Ok(g.add_scalar(v[0], r.random_range(-2.0..2.0))),
        },
        OpCase {
            name: "broadcast",
            inputs: |r| {
                let mut s = dims(r, 3, 2, 4);
                s[r.random_range(0..3)] = 1;
                vec![randn(&s, r)]
            },
            apply: |g, v, r| {
                let mut s = g.shape(v[0]).to_vec();
                for e in s.iter_mut().filter(|e| **e == 1) {
                    *e = r.random_range(2..4);
                }
                s.insert(0, 2);
                g.broadcast(v[0], &s)
            },
        },
        OpCase {
            name: "add_bcast",
            inputs: |r| {
                let s = dims(r, 3, 1, 4);
                vec![randn(&s, r), randn(&[s[2]], r)]
            },
            apply: |g, v, _| g.add_bcast(v[0], v[1]),
        },
        OpCase {
            name: "mul_bcast",
            inputs: |r| {
                let s = dims(r, 3, 1, 4);
                vec![randn(&s, r), randn(&[s[0], 1, 1], r)]
            },
            apply: |g, v, _| g.mul_bcast(v[0], v[1]),
        },
        OpCase {
            name: "reshape",
            inputs: |r| vec![randn(&dims(r, 3, 1, 4), r)],
            apply: |g, v, _| {
                let s = g.shape(v[0]).to_vec();
                let y = g.reshape(v[0], &[s[0] * s[1], s[2]])?;
                // A non-linear follow-up keeps the check sensitive to layout.
                let y2 = g.mul(y, y)?;
                g.add(y, y2)
            },
        },
        OpCase {
            name: "permute",
            inputs: |r| vec![randn(&dims(r, 4, 1, 3), r)],
            apply: |g, v, r| {
                let mut perm = vec![0, 1, 2, 3];
                for i in (1..4).rev() {
                    perm.swap(i, r.random_range(0..=i));
                }
                g.permute(v[0], &perm)
            },
        },
        OpCase {
            name: "pad",
            inputs: |r| vec![randn(&dims(r, 3, 1, 4), r)],
            apply: |g, v, r| {
                let pads: Vec<(usize, usize)> = (0..3).map(|_| (r.random_range(0..3), r.random_range(0..3))).collect();
                g.pad(v[0], &pads)
            },
        },
        OpCase {
            name: "crop",
            inputs: |r| vec![randn(&dims(r, 3, 3, 5), r)],
            apply: |g, v, r| {
                let s = g.shape(v[0]).to_vec();
                let ranges: Vec<(usize, usize)> = s
                    .iter()
                    .map(|&e| {
                        let start = r.random_range(0..e);
                        (start, r.random_range(1..=e - start))
                    })
                    .collect();
                g.crop(v[0], &ranges)
            },
        },
        OpCase {
            name: "narrow",
            inputs: |r| vec![randn(&dims(r, 3, 2, 5), r)],
            apply: |g, v, r| {
                let axis = r.random_range(0..3);
                let e = g.shape(v[0])[axis];
                let start = r.random_range(0..e);
                g.narrow(v[0], axis, start, r.random_range(1..=e - start))
            },
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![randn(&dims(r, 4, 1, 3), r)],
            apply: |g, v, r| {
                let keep = r.random_bool(0.5);
                g.reduce(v[0], ReduceKind::Sum, &[1, 3], keep)
            },
        },
        OpCase {
            name: "mean",
            inputs: |r| vec![randn(&dims(r, 3, 1, 4), r)],
            apply: |g, v, r| {
                let axis = r.random_range(0..3);
                g.mean(v[0], &[axis], r.random_bool(0.5))
            },
        },
        OpCase {
            name: "sum_all",
            inputs: |r| vec![randn(&dims(r, 2, 1, 5), r)],
            apply: |g, v, _| {
                let sq = g.mul(v[0], v[0])?;
                g.sum_all(sq)
            },
        },
        OpCase {
            name: "matmul",
            inputs: |r| {
                let d = dims(r, 3, 1, 5);
                vec![randn(&[d[0], d[1]], r), randn(&[d[1], d[2]], r)]
            },
            apply: |g, v, _| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_t",
            inputs: |r| {
                let d = dims(r, 4, 1, 4);
                vec![randn(&[d[0], d[1], d[2]], r), randn(&[d[0], d[3], d[2]], r)]
            },
            apply: |g, v, _| g.matmul_t(v[0], v[1], false, true),
        },
        OpCase {
            name: "matmul_t_lhs",
            inputs: |r| {
                let d = dims(r, 4, 1, 4);
                vec![randn(&[d[0], d[2], d[1]], r), randn(&[d[0], d[2], d[3]], r)]
            },
            apply: |g, v, _| g.matmul_t(v[0], v[1], true, false),
        },
        OpCase {
            name: "matmul_shared_rhs",
            inputs: |r| {
                let d = dims(r, 4, 1, 4);
                vec![randn(&[d[0], d[1], d[2]], r), randn(&[d[2], d[3]], r)]
            },
            apply: |g, v, _| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "swish",
            inputs: |r| vec![randn(&dims(r, 2, 1, 6), r).map(|v| 3.0 * v)],
            apply: |g, v, _| Ok(g.swish(v[0])),
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| vec![randn(&dims(r, 2, 1, 6), r).map(|v| 3.0 * v)],
            apply: |g, v, _| Ok(g.sigmoid(v[0])),
        },
        OpCase {
            name: "softmax",
            inputs: |r| vec![randn(&dims(r, 3, 1, 5), r)],
            apply: |g, v, r| {
                let axis = r.random_range(0..3);
                g.softmax(v[0], axis)
            },
        },
        OpCase {
            name: "conv2d",
            inputs: |r| {
                let (b, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
                let (hh, ww) = (r.random_range(4..=6), r.random_range(4..=6));
                vec![randn(&[b, c, hh, ww], r), randn(&[o, c, 3, 3], r), randn(&[o], r)]
            },
            apply: |g, v, r| {
                let spec = ConvSpec::conv2d(r.random_range(1..=2), r.random_range(0..=1));
                g.conv(v[0], v[1], Some(v[2]), &spec)
            },
        },
        OpCase {
            name: "conv2d_grouped",
            inputs: |r| {
                let c = 2 * r.random_range(1..=2);
                vec![randn(&[2, c, 5, 5], r), randn(&[c, 2, 3, 3], r)]
            },
            apply: |g, v, _| {
                let groups = g.shape(v[0])[1] / 2;
                g.conv(v[0], v[1], None, &ConvSpec::new(&[1, 1], &[1, 1], groups))
            },
        },
        OpCase {
            name: "conv3d",
            inputs: |r| {
                let (c, o) = (r.random_range(1..=2), r.random_range(1..=3));
                let d = r.random_range(3..=5);
                vec![randn(&[1, c, d, 4, 4], r), randn(&[o, c, 3, 3, 3], r), randn(&[o], r)]
            },
            apply: |g, v, _| g.conv(v[0], v[1], Some(v[2]), &ConvSpec::new(&[1, 1, 1], &[0, 1, 1], 1)),
        },
        OpCase {
            name: "batch_norm_train",
            inputs: |r| {
                let c = r.random_range(1..=3);
                vec![randn(&[3, c, 2, 2], r), randn(&[c], r), randn(&[c], r)]
            },
            apply: |g, v, _| {
                let c = g.shape(v[0])[1];
                let (rm, rv) = (Tensor::zeros(&[c]), Tensor::ones(&[c]));
                Ok(g.batch_norm(v[0], v[1], v[2], &rm, &rv, NORM_EPS, Mode::Train)?.0)
            },
        },
        OpCase {
            name: "batch_norm_eval",
            inputs: |r| {
                let c = r.random_range(1..=3);
                vec![randn(&[2, c, 3], r), randn(&[c], r), randn(&[c], r)]
            },
            apply: |g, v, r| {
                let c = g.shape(v[0])[1];
                let rm = randn(&[c], r);
                let rv = positive(randn(&[c], r));
                Ok(g.batch_norm(v[0], v[1], v[2], &rm, &rv, NORM_EPS, Mode::Eval)?.0)
            },
        },
        OpCase {
            name: "layer_norm",
            inputs: |r| {
                let c = r.random_range(2..=6);
                vec![randn(&[r.random_range(1..=4), c], r), randn(&[c], r), randn(&[c], r)]
            },
            apply: |g, v, _| g.layer_norm(v[0], v[1], v[2], NORM_EPS),
        },
        OpCase {
            name: "gather_rows",
            inputs: |r| vec![randn(&dims(r, 2, 2, 5), r)],
            apply: |g, v, r| {
                let rows = g.shape(v[0])[0];
                let idx: Rc<[usize]> = (0..7).map(|_| r.random_range(0..rows)).collect();
                g.gather_rows(v[0], idx)
            },
        },
        OpCase {
            name: "cross_entropy",
            inputs: |r| vec![randn(&dims(r, 2, 2, 5), r)],
            apply: |g, v, r| {
                let s = g.shape(v[0]).to_vec();
                let t: Vec<usize> = (0..s[0]).map(|_| r.random_range(0..s[1])).collect();
                g.cross_entropy(v[0], &t)
            },
        },
    ]
}

/// Gradient check of one op case for one seed. The op's own randomness is
/// re-drawn identically on every evaluation.
pub fn check_op(case: &OpCase, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = (case.inputs)(&mut r);
    let apply = case.apply;
    grad_check(
        move |g, v| {
            let mut r = rng(seed.wrapping_add(1000));
            let y = apply(g, v, &mut r)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        H,
    )
}

/// Gradient check of `f` with respect to `input` and the named store
/// entries, evaluated in `mode` with a fixed dropout stream.
pub fn check_module<F>(
    store: &ParamStore<f64>,
    names: &[String],
    input: Tensor<f64>,
    mode: Mode,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>, Var) -> Result<Var>,
{
    let ids: Vec<_> = names.iter().map(|n| store.id(n).expect("known parameter")).collect();
    let mut params = vec![input];
    params.extend(ids.iter().map(|&id| store.value(id).clone()));
    grad_check(
        |g, v| {
            let mut st = store.clone();
            let mut r = rng(seed);
            let mut s = Session::new(g, &mut st, mode, &mut r);
            for (&id, &var) in ids.iter().zip(&v[1..]) {
                s.bind(id, var);
            }
            let y = f(&mut s, v[0])?;
            weighted_sum(s.g, y, seed)
        },
        &params,
        H,
    )
}

/// Model with one 16-channel stage of window 4.
pub fn block_model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        bands: 15,
        patch: 9,
        classes: 3,
        dim: 16,
        depths: vec![1],
        heads: vec![2],
        window: 4,
        lora: LoraSpec { rank: 4, alpha: 8.0, dropout: 0.05 },
        drop_path: 0.0,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::new(cfg, seed).unwrap();
    // Non-zero adapters and recharge scalars so every branch carries gradient.
    let mut r = rng(seed ^ 0xb10c);
    let names: Vec<String> = m.store.iter().map(|(_, p)| p.name.clone()).collect();
    for n in names {
        if n.ends_with("lora_b") || n.contains("recharge") || n.contains("rel_bias") {
            let id = m.store.id(&n).unwrap();
            let shape = m.store.value(id).shape().to_vec();
            *m.store.value_mut(id) = randn::<f64>(&shape, &mut r).map(|v| 0.3 * v);
        }
    }
    m
}

/// Full transformer block on a 6×6 grid: window padding and key masking are
/// exercised. Checks the input and every block parameter.
pub fn check_block(seed: u64) -> Result<GradCheckReport> {
    let model = block_model(seed);
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("stages.0.blocks.0."))
        .map(|(_, p)| p.name.clone())
        .collect();
    let input = randn(&[1, 6, 6, 16], &mut rng(seed));
    let block = model.net.stages[0].blocks[0].clone();
    check_module(&model.store, &names, input, Mode::Eval, seed, |s, x| block.forward(s, x))
}

/// Tiny classifier of the end-to-end runs.
pub fn tiny_model_config(classes: usize) -> ModelConfig {
    ModelConfig {
        bands: 15,
        patch: 9,
        classes,
        dim: 16,
        depths: vec![1, 1, 2],
        heads: vec![2, 2, 4],
        window: 4,
        ..ModelConfig::default()
    }
}

/// Run configuration of the tiny synthetic end-to-end experiment.
pub fn tiny_run_config(side: usize, epochs: usize, batch: usize, protocol: Protocol, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    let synth = cfg.data.synth.as_mut().unwrap();
    synth.height = side;
    synth.width = side;
    synth.bands = 40;
    synth.classes = 6;
    synth.noise = 0.1;
    synth.seed = 7;
    cfg.pca.k = 15;
    cfg.patches.p = 9;
    cfg.split.fraction = 0.1;
    cfg.split.seed = 7;
    cfg.model.dim = 16;
    cfg.model.depths = vec![1, 1, 2];
    cfg.model.heads = vec![2, 2, 4];
    cfg.model.window = 4;
    cfg.train.epochs = epochs;
    cfg.train.batch = batch;
    cfg.train.seed = 7;
    cfg.train.peft_mode = protocol;
    cfg.out.dir = out.to_path_buf();
    cfg
}

pub fn small_scene(seed: u64) -> specvit::hsi_io::SynthScene {
    synth_scene(&SynthSpec {
        height: 24,
        width: 24,
        bands: 20,
        classes: 3,
        noise_sigma: 0.1,
        seed,
    })
    .unwrap()
}

/// Largest absolute deviation relative to the largest reference magnitude.
pub fn rel_dev<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs().to_f64().unwrap())
        .fold(0.0, f64::max);
    num / a.max_abs().to_f64().unwrap().max(f64::MIN_POSITIVE)
}

pub fn adapted_model<T: Real>(seed: u64) -> Model<T> {
    let mut m = Model::<T>::new(tiny_model_config(6), seed).unwrap();
    let mut r = rng(seed + 100);
    let ids: Vec<_> = m
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".lora_b"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = m.store.value(id).shape().to_vec();
        *m.store.value_mut(id) = randn::<T>(&shape, &mut r).map(|v| v * T::from_f64(0.05).unwrap());
    }
    m.set_mode(Mode::Eval);
    m
}

/// Worst relative logit deviation between a model with zero-initialized
/// adapters and the same weights without adapters.
pub fn zero_init_deviation() -> f64 {
    let mut lora = Model::<f32>::new(tiny_model_config(6), 1).unwrap();
    let plain_cfg = ModelConfig {
        lora: LoraSpec { rank: 0, ..LoraSpec::default() },
        ..tiny_model_config(6)
    };
    let mut plain = Model::<f32>::new(plain_cfg, 99).unwrap();
    let copied = plain.copy_matching_from(&lora.store).unwrap();
    assert_eq!(copied, plain.store.len());
    assert!(lora.store.len() > plain.store.len());
    lora.set_mode(Mode::Eval);
    plain.set_mode(Mode::Eval);
    (0..5)
        .map(|seed| {
            let x = randn::<f32>(&[4, 15, 9, 9], &mut rng(seed));
            let a = lora.logits(x.clone(), &mut rng(0)).unwrap();
            let b = plain.logits(x, &mut rng(0)).unwrap();
            rel_dev(&b, &a)
        })
        .fold(0.0, f64::max)
}

/// Worst relative logit deviation caused by merging, over 100 inputs.
pub fn merge_deviation<T: Real>() -> f64 {
    let mut m = adapted_model::<T>(2);
    let inputs: Vec<Tensor<T>> = (0..100).map(|s| randn(&[1, 15, 9, 9], &mut rng(1000 + s))).collect();
    let before: Vec<_> = inputs.iter().map(|x| m.logits(x.clone(), &mut rng(0)).unwrap()).collect();
    merge_lora(&mut m).unwrap();
    for layer in m.net.lora_layers() {
        let (a, b) = layer.adapter.unwrap();
        assert_eq!(m.store.value(a).max_abs(), T::zero());
        assert_eq!(m.store.value(b).max_abs(), T::zero());
    }
    inputs
        .iter()
        .zip(&before)
        .map(|(x, y)| rel_dev(y, &m.logits(x.clone(), &mut rng(0)).unwrap()))
        .fold(0.0, f64::max)
}
