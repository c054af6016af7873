//! The task model's forward pass against a plain-loop reimplementation
//! that reads the same named parameters.

use comp_attn::attention::Variant;
use comp_attn::model::{EncoderKind, ModelConfig, TaskModel};
use comp_attn::{ParamStore, Rng, Tensor};

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .to_vec()
}

fn maybe(store: &ParamStore, name: &str) -> Option<Vec<f64>> {
    store.get(name).map(Tensor::to_vec)
}

/// `x · W (+ b)` for one row; `W` is `[fan_in, fan_out]` row-major.
fn affine(x: &[f64], w: &[f64], b: Option<&Vec<f64>>, fan_out: usize) -> Vec<f64> {
    let mut y = b.cloned().unwrap_or_else(|| vec![0.0; fan_out]);
    for (i, xi) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xi * w[i * fan_out + o];
        }
    }
    y
}

fn linear(store: &ParamStore, name: &str, x: &[f64], fan_out: usize) -> Vec<f64> {
    affine(
        x,
        &param(store, name),
        maybe(store, &format!("{name}.bias")).as_ref(),
        fan_out,
    )
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Predictions for one set of `N` tokens.
fn oracle(c: &ModelConfig, store: &ParamStore, tokens: &[Vec<f64>]) -> Vec<f64> {
    let n = tokens.len();
    let d = c.d;
    let h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| {
            let z = linear(store, "encoder.0", t, d);
            match c.encoder {
                EncoderKind::Linear => z,
                EncoderKind::Mlp => linear(store, "encoder.1", &z.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), d),
            }
        })
        .collect();
    let s_count = c.searches;
    let r_count = if c.variant == Variant::MultiHead {
        c.searches
    } else {
        c.retrievals
    };
    let values: Vec<Vec<Vec<f64>>> = (0..r_count)
        .map(|j| {
            h.iter()
                .map(|x| linear(store, &format!("attn.retrieval.{j}.value"), x, c.d_v))
                .collect()
        })
        .collect();
    let mut concat = vec![Vec::with_capacity(s_count * c.d_v); n];
    for i in 0..s_count {
        let q: Vec<Vec<f64>> = h
            .iter()
            .map(|x| linear(store, &format!("attn.search.{i}.query"), x, c.d_k))
            .collect();
        let k: Vec<Vec<f64>> = h
            .iter()
            .map(|x| linear(store, &format!("attn.search.{i}.key"), x, c.d_k))
            .collect();
        for a in 0..n {
            // Masked diagonal: token a never attends to itself.
            let others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
            let logits: Vec<f64> = others
                .iter()
                .map(|&b| dot(&q[a], &k[b]) / (c.d_k as f64).sqrt())
                .collect();
            let w = softmax(&logits);
            let retrieve = |j: usize| -> Vec<f64> {
                let mut out = vec![0.0; c.d_v];
                for (wb, &b) in w.iter().zip(&others) {
                    for (o, v) in out.iter_mut().zip(&values[j][b]) {
                        *o += wb * v;
                    }
                }
                out
            };
            let head = match c.variant {
                Variant::MultiHead => retrieve(i),
                Variant::CompositionalDot => {
                    let rets: Vec<Vec<f64>> = (0..r_count).map(retrieve).collect();
                    let rq = linear(store, &format!("attn.search.{i}.retrieval_query"), &h[a], c.d_r);
                    let logits: Vec<f64> = rets
                        .iter()
                        .map(|ret| dot(&rq, &linear(store, "attn.retrieval_key", ret, c.d_r)) / (c.d_r as f64).sqrt())
                        .collect();
                    let scores = softmax(&logits);
                    let mut out = vec![0.0; c.d_v];
                    for (sc, ret) in scores.iter().zip(&rets) {
                        for (o, v) in out.iter_mut().zip(ret) {
                            *o += sc * v;
                        }
                    }
                    out
                }
                Variant::CompositionalMlp => {
                    let rets: Vec<Vec<f64>> = (0..r_count).map(retrieve).collect();
                    let tok = linear(store, &format!("attn.search.{i}.score_query"), &h[a], 1)[0];
                    let logits: Vec<f64> = rets
                        .iter()
                        .map(|ret| tok + linear(store, &format!("attn.search.{i}.score_key"), ret, 1)[0])
                        .collect();
                    let scores = softmax(&logits);
                    let mut out = vec![0.0; c.d_v];
                    for (sc, ret) in scores.iter().zip(&rets) {
                        for (o, v) in out.iter_mut().zip(ret) {
                            *o += sc * v;
                        }
                    }
                    out
                }
            };
            concat[a].extend(head);
        }
    }
    (0..n)
        .map(|a| {
            let mut att = linear(store, "attn.output", &concat[a], d);
            if c.layer_norm {
                let mean = att.iter().sum::<f64>() / d as f64;
                let var = att.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let (g, s) = (param(store, "norm.gain"), param(store, "norm.shift"));
                att = att
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (v - mean) / (var + 1e-5).sqrt() * g[k] + s[k])
                    .collect();
            }
            if c.self_concat {
                att.extend(&h[a]);
            }
            linear(store, "readout", &att, 1)[0]
        })
        .collect()
}

fn config(variant: Variant, flags: u32) -> ModelConfig {
    ModelConfig {
        variant,
        d: 12,
        d_k: 4,
        d_v: 5,
        d_r: 3,
        searches: 2,
        retrievals: 3,
        self_concat: flags & 1 != 0,
        encoder: if flags & 2 != 0 {
            EncoderKind::Mlp
        } else {
            EncoderKind::Linear
        },
        layer_norm: flags & 4 != 0,
        attention_bias: flags & 8 != 0,
        readout_bias: flags & 16 != 0,
        dropout: 0.0,
    }
}

#[test]
fn forward_matches_loop_oracle_for_every_variant_and_option() {
    let mut rng = Rng::new(3);
    let (batch, n, width) = (3, 5, 7);
    for variant in [Variant::MultiHead, Variant::CompositionalDot, Variant::CompositionalMlp] {
        for flags in 0..32 {
            let c = config(variant, flags);
            let model = TaskModel::new(&c, width, &mut rng).unwrap();
            // Non-trivial gain/shift so the norm path is exercised.
            if let Some(g) = model.store.get("norm.gain") {
                g.data_mut().iter_mut().for_each(|v| *v = 1.0 + rng.normal() * 0.3);
                model
                    .store
                    .get("norm.shift")
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.normal() * 0.3);
            }
            let data: Vec<f64> = (0..batch * n * width).map(|_| rng.normal()).collect();
            let x = Tensor::from_vec(&[batch, n, width], data.clone()).unwrap();
            let (pred, trace) = model.forward(&x, None).unwrap();
            assert_eq!(pred.shape(), &[batch, n]);
            assert_eq!(trace.implicit_identity(), variant == Variant::MultiHead);
            let pred = pred.to_vec();
            for b in 0..batch {
                let tokens: Vec<Vec<f64>> = (0..n)
                    .map(|t| data[(b * n + t) * width..(b * n + t + 1) * width].to_vec())
                    .collect();
                let expected = oracle(&c, &model.store, &tokens);
                for t in 0..n {
                    let got = pred[b * n + t];
                    assert!(
                        (got - expected[t]).abs() <= 1e-12 * (1.0 + expected[t].abs()),
                        "{variant:?} flags={flags:05b} b={b} t={t}: {got} vs {}",
                        expected[t]
                    );
                }
            }
        }
    }
}

#[test]
fn unbatched_input_matches_batch_of_one() {
    let mut rng = Rng::new(9);
    let c = config(Variant::CompositionalDot, 0b11111);
    let model = TaskModel::new(&c, 4, &mut rng).unwrap();
    let data: Vec<f64> = (0..6 * 4).map(|_| rng.normal()).collect();
    let flat = model
        .forward(&Tensor::from_vec(&[6, 4], data.clone()).unwrap(), None)
        .unwrap()
        .0;
    let batched = model
        .forward(&Tensor::from_vec(&[1, 6, 4], data).unwrap(), None)
        .unwrap()
        .0;
    assert_eq!(flat.shape(), &[6]);
    assert_eq!(flat.to_vec(), batched.to_vec());
}

#[test]
fn wrong_input_width_is_a_dimension_error() {
    let model = TaskModel::new(&config(Variant::MultiHead, 0), 4, &mut Rng::new(0)).unwrap();
    let err = model.forward(&Tensor::zeros(&[2, 3, 5]).unwrap(), None).unwrap_err();
    assert!(matches!(err, comp_attn::Error::Dimension { .. }), "{err}");
}
