//! Finite-difference checks of every differentiable graph op and of the
//! full adapter training loss. Each check panics on failure.
//!
//! Error metric: per input tensor, ‖analytic − numeric‖ / max(‖analytic‖,
//! ‖numeric‖), with central differences at h = 1e-5. The norm form keeps
//! near-zero individual entries from dominating.

use std::sync::Arc;

use fskd_core::corpus::{generic_corpus, Vocab};
use fskd_core::model::{bind_adapters, init_adapters, BackboneWeights, ModelConfig, Summarizer};
use fskd_core::rng::{stream, StreamRng};
use fskd_core::selective_kd::{batch_loss, KdConfig};
use fskd_core::tensor::{Graph, KlDirection, Tensor, Var};
use fskd_core::ParamSet64;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 100;

fn random(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn off_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `loss = Σ w·f(inputs)` with fixed random weights and compares
/// the analytic gradient of each input with central differences.
fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, rng: &mut StreamRng, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.param(Arc::new(t.clone())))
            .collect();
        let out = f(&mut g, &vars);
        g.value(out).numel()
    };
    let weights: Vec<f64> = (0..probe).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.param(Arc::new(t.clone())))
            .collect();
        let out = f(&mut g, &vars);
        let loss = g.weighted_sum(out, weights.clone()).unwrap();
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(Arc::new(t.clone())))
        .collect();
    let out = f(&mut g, &vars);
    let loss = g.weighted_sum(out, weights.clone()).unwrap();
    g.backward(loss).unwrap();

    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * H));
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err <= TOL, "{name}: input {k} relative error {err:e}");
    }
}

fn dims(rng: &mut StreamRng) -> (usize, usize, usize) {
    (
        rng.gen_range(1..5),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    )
}

fn softmax_of(g: &mut Graph<f64>, x: Var) -> Var {
    g.softmax(x)
}

pub fn matmul_and_transpose() {
    let mut rng = stream(1, "matmul", &[]);
    for _ in 0..TRIALS {
        let (a, b, c) = dims(&mut rng);
        let inputs = vec![random(&mut rng, &[a, b]), random(&mut rng, &[b, c])];
        check("matmul", inputs, &mut rng, |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        });
        let x = vec![random(&mut rng, &[a, b])];
        check("transpose", x, &mut rng, |g, v| g.transpose(v[0]).unwrap());
    }
}

pub fn elementwise_ops() {
    let mut rng = stream(2, "elementwise", &[]);
    for _ in 0..TRIALS {
        let (a, b, _) = dims(&mut rng);
        let inputs = vec![random(&mut rng, &[a, b]), random(&mut rng, &[a, b])];
        check("add", inputs, &mut rng, |g, v| g.add(v[0], v[1]).unwrap());
        let inputs = vec![random(&mut rng, &[a, b]), random(&mut rng, &[b])];
        check("add_row", inputs, &mut rng, |g, v| {
            g.add_row(v[0], v[1]).unwrap()
        });
        let k: f64 = rng.gen_range(-2.0..2.0);
        check(
            "scale",
            vec![random(&mut rng, &[a, b])],
            &mut rng,
            move |g, v| g.scale(v[0], k),
        );
        check(
            "relu",
            vec![off_zero(&mut rng, &[a, b])],
            &mut rng,
            |g, v| g.relu(v[0]),
        );
        check("sum", vec![random(&mut rng, &[a, b])], &mut rng, |g, v| {
            g.sum(v[0]).unwrap()
        });
        let w: Vec<f64> = (0..a * b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check(
            "weighted_sum",
            vec![random(&mut rng, &[a, b])],
            &mut rng,
            move |g, v| g.weighted_sum(v[0], w.clone()).unwrap(),
        );
    }
}

pub fn softmax_variants() {
    let mut rng = stream(3, "softmax", &[]);
    for _ in 0..TRIALS {
        let (a, b, _) = dims(&mut rng);
        check(
            "softmax",
            vec![random(&mut rng, &[a, b + 1])],
            &mut rng,
            |g, v| softmax_of(g, v[0]),
        );
        let n = rng.gen_range(1..5);
        check(
            "causal_softmax",
            vec![random(&mut rng, &[n, n])],
            &mut rng,
            |g, v| g.causal_softmax(v[0]),
        );
    }
}

pub fn layer_norm() {
    let mut rng = stream(4, "layer_norm", &[]);
    for _ in 0..TRIALS {
        let a = rng.gen_range(1..4);
        let n = rng.gen_range(2..6);
        let inputs = vec![
            random(&mut rng, &[a, n]),
            random(&mut rng, &[n]),
            random(&mut rng, &[n]),
        ];
        check("layer_norm", inputs, &mut rng, |g, v| {
            g.layer_norm(v[0], v[1], v[2]).unwrap()
        });
    }
}

pub fn indexing_ops() {
    let mut rng = stream(5, "indexing", &[]);
    for _ in 0..TRIALS {
        let (rows, n, len) = dims(&mut rng);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..rows)).collect();
        check(
            "embedding",
            vec![random(&mut rng, &[rows, n])],
            &mut rng,
            move |g, v| g.embedding(v[0], &ids).unwrap(),
        );
        let (a, b, c) = dims(&mut rng);
        let inputs = vec![random(&mut rng, &[a, b]), random(&mut rng, &[a, c])];
        check("concat_cols", inputs, &mut rng, |g, v| {
            g.concat_cols(&[v[0], v[1]]).unwrap()
        });
        let start = rng.gen_range(0..b + c);
        let width = rng.gen_range(1..=b + c - start);
        check(
            "slice_cols",
            vec![random(&mut rng, &[a, b + c])],
            &mut rng,
            move |g, v| g.slice_cols(v[0], start, width).unwrap(),
        );
    }
}

pub fn losses() {
    let mut rng = stream(6, "losses", &[]);
    for _ in 0..TRIALS {
        let rows = rng.gen_range(1..4);
        let v = rng.gen_range(2..6);
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..v)).collect();
        check(
            "cross_entropy",
            vec![random(&mut rng, &[rows, v])],
            &mut rng,
            move |g, x| {
                let q = g.softmax(x[0]);
                g.cross_entropy_rows(q, &targets).unwrap()
            },
        );
        for dir in [KlDirection::TeacherTarget, KlDirection::StudentTarget] {
            let teacher = random(&mut rng, &[rows, v]);
            check(
                "kl",
                vec![random(&mut rng, &[rows, v])],
                &mut rng,
                move |g, x| {
                    let t = g.input(teacher.clone());
                    let t = g.softmax(t);
                    let s = g.softmax(x[0]);
                    g.kl_rows(t, s, dir).unwrap()
                },
            );
        }
    }
}

pub fn tiny_model() -> (Summarizer<f64>, ModelConfig) {
    let cfg = ModelConfig {
        vocab_size: 20,
        model_dim: 8,
        bottleneck_dim: 3,
        ffn_dim: 8,
        n_encoder_layers: 1,
        n_decoder_layers: 3,
        n_heads: 2,
        adapter_layers: vec![2, 3],
        max_src_len: 40,
        max_tgt_len: 16,
    };
    let bb = BackboneWeights::init(&cfg, 3).unwrap();
    (Summarizer::new(cfg.clone(), bb).unwrap(), cfg)
}

/// Loss → local adapter parameters through the adapter blocks and the
/// gated CE + KL combination, against central differences.
pub fn full_adapter_path() {
    let (model, cfg) = tiny_model();
    let vocab = Vocab::build(cfg.vocab_size, 0.7, 0).unwrap();
    let corpus = generic_corpus(&vocab, 3, cfg.max_src_len, 1).unwrap();
    let data: Vec<_> = corpus.iter().map(|i| model.prepare(i).unwrap()).collect();
    let batch: Vec<usize> = (0..data.len()).collect();
    let global = init_adapters::<f64>(&cfg, &mut stream(1, "g", &[]));
    let local = init_adapters::<f64>(&cfg, &mut stream(2, "l", &[]));

    let loss_of = |local: &ParamSet64, kd: &KdConfig| -> f64 {
        let mut g = Graph::new();
        let bb = model.bind_backbone(&mut g);
        let t = bind_adapters(&cfg, &mut g, &global, false).unwrap();
        let s = bind_adapters(&cfg, &mut g, local, false).unwrap();
        let out = batch_loss(&model, &mut g, &bb, &t, &s, &data, &batch, kd).unwrap();
        g.value(out.loss).item()
    };

    let ln_v = (cfg.vocab_size as f64).ln();
    for (tau, dir) in [
        (f64::INFINITY, KlDirection::TeacherTarget),
        (f64::INFINITY, KlDirection::StudentTarget),
        (0.0, KlDirection::TeacherTarget),
        (0.995 * ln_v, KlDirection::TeacherTarget),
    ] {
        let kd = KdConfig {
            lambda: 0.3,
            tau,
            kl_direction: dir,
            ..KdConfig::for_vocab(cfg.vocab_size)
        };
        let mut g = Graph::new();
        let bb = model.bind_backbone(&mut g);
        let t = bind_adapters(&cfg, &mut g, &global, false).unwrap();
        let s = bind_adapters(&cfg, &mut g, &local, true).unwrap();
        let out = batch_loss(&model, &mut g, &bb, &t, &s, &data, &batch, &kd).unwrap();
        assert!((g.value(out.loss).item() - out.value).abs() < 1e-12);
        g.backward(out.loss).unwrap();
        let grads = s.params().collect_grads(&mut g).unwrap();
        for (name, tensor) in local.iter() {
            let mut numeric = Vec::new();
            for i in 0..tensor.numel() {
                let mut plus = local.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += H;
                let mut minus = local.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= H;
                numeric.push((loss_of(&plus, &kd) - loss_of(&minus, &kd)) / (2.0 * H));
            }
            let err = rel_err(grads[name].data(), &numeric);
            assert!(
                err <= TOL,
                "tau {tau}, {dir:?}: {name} relative error {err:e}"
            );
        }
    }
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("matmul_and_transpose", matmul_and_transpose),
    ("elementwise_ops", elementwise_ops),
    ("softmax_variants", softmax_variants),
    ("layer_norm", layer_norm),
    ("indexing_ops", indexing_ops),
    ("losses", losses),
    ("full_adapter_path", full_adapter_path),
];
