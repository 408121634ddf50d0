use super::*;
use crate::datasets::{LabeledDataset, Provenance, Sample, SequenceTask, TaskSpec};
use crate::transformer::engine::Hooks;
use proptest::prelude::*;

fn tiny_seq(layers: usize) -> ModelConfig {
    let mut c = ModelConfig::sequence(12, 3);
    c.num_layers = layers;
    c.num_heads = 2;
    c.hidden_dim = 8;
    c.ffn_dim = 16;
    c.max_tokens = 8;
    c
}

fn tokens(v: &[u32]) -> Input {
    Input::Tokens(v.to_vec())
}

fn logits_with(model: &TransformerModel, input: &Input, hooks: &Hooks<'_, f32>) -> Vec<f32> {
    model.trace_one(input, false, hooks).logits
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn attention_rows_are_distributions() {
    let model = TransformerModel::init(tiny_seq(2), 3).unwrap();
    let t = &model.forward(&[tokens(&[1, 5, 7, 2])], true).unwrap()[0];
    assert_eq!(t.len, 5);
    for layer in &t.attention {
        for a in layer {
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().map(|&v| f64::from(v)).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(a.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn zero_model_attends_uniformly_and_predicts_uniformly() {
    let model = TransformerModel::zeros(tiny_seq(2)).unwrap();
    let t = &model.forward(&[tokens(&[1, 2, 3])], true).unwrap()[0];
    for layer in &t.attention {
        for a in layer {
            assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
    }
    assert!(t.probabilities().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-9));
}

fn ln(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    x.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()
}

/// First-layer attention recomputed from the stored tensors in f64.
#[test]
fn first_layer_attention_matches_hand_computation() {
    let model = TransformerModel::init(tiny_seq(1), 11).unwrap();
    let input = [4u32, 9, 0];
    let t = &model.forward(&[tokens(&input)], true).unwrap()[0];
    let get = |name: &str| model.tensor(name).unwrap();
    let (emb, cls, pos) = (get("embed.tokens"), get("embed.class"), get("embed.position"));
    let (wq, bq, wk, bk) = (
        get("layer0.attn.query.weight"),
        get("layer0.attn.query.bias"),
        get("layer0.attn.key.weight"),
        get("layer0.attn.key.bias"),
    );
    let d = 8;
    let dk = 4;
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let base = if i == 0 {
                        cls.get(0, j)
                    } else {
                        emb.get(input[i - 1] as usize, j)
                    };
                    f64::from(base) + f64::from(pos.get(i, j))
                })
                .collect()
        })
        .map(|r: Vec<f64>| ln(&r))
        .collect();
    let proj = |w: &Matrix, b: &Matrix| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                (0..d)
                    .map(|c| f64::from(b.get(0, c)) + (0..d).map(|k| r[k] * f64::from(w.get(k, c))).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (q, k) = (proj(&wq, &bq), proj(&wk, &bk));
    for h in 0..2 {
        #[allow(clippy::needless_range_loop)]
        for i in 0..4 {
            let s: Vec<f64> = (0..4)
                .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for j in 0..4 {
                let want = (s[j] - m).exp() / z;
                let got = f64::from(t.attention[0][h].get(i, j));
                assert!((want - got).abs() < 1e-5, "head {h} ({i},{j}): {want} vs {got}");
            }
        }
    }
}

#[test]
fn deactivating_no_heads_is_bit_identical() {
    let model = TransformerModel::init(tiny_seq(2), 4).unwrap();
    let off = model.deactivate_heads(&[]).unwrap();
    assert_eq!(off, model);
    let x = tokens(&[3, 1, 4, 1, 5]);
    assert_eq!(
        bits(&model.logits(std::slice::from_ref(&x)).unwrap()[0]),
        bits(&off.logits(&[x]).unwrap()[0])
    );
}

#[test]
fn deactivating_every_head_of_a_layer_removes_its_attention_branch() {
    let model = TransformerModel::init(tiny_seq(2), 5).unwrap();
    let x = tokens(&[2, 7, 1, 8]);
    for layer in 0..2 {
        let off = model
            .deactivate_heads(&[HeadId::new(layer, 0), HeadId::new(layer, 1)])
            .unwrap();
        let skipped = logits_with(
            &model,
            &x,
            &Hooks {
                attn: None,
                skip_attention: &[layer],
            },
        );
        let got = off.logits(std::slice::from_ref(&x)).unwrap()[0].clone();
        for (a, b) in got.iter().zip(&skipped) {
            assert!((a - b).abs() < 1e-6, "layer {layer}: {got:?} vs {skipped:?}");
        }
    }
}

#[test]
fn deactivation_composes() {
    let model = TransformerModel::init(tiny_seq(2), 6).unwrap();
    let a = [HeadId::new(0, 1)];
    let b = [HeadId::new(1, 0), HeadId::new(0, 1)];
    let stepwise = model.deactivate_heads(&a).unwrap().deactivate_heads(&b).unwrap();
    let at_once = model.deactivate_heads(&[a[0], b[0]]).unwrap();
    assert_eq!(stepwise, at_once);
    assert_eq!(at_once.deactivated_heads().len(), 2);
    assert!(model.deactivate_heads(&[HeadId::new(2, 0)]).is_err());
    assert!(model.deactivate_heads(&[HeadId::new(0, 2)]).is_err());
}

#[test]
fn deactivated_head_keeps_other_params() {
    let model = TransformerModel::init(tiny_seq(1), 8).unwrap();
    let off = model.deactivate_heads(&[HeadId::new(0, 1)]).unwrap();
    let changed = model
        .params()
        .iter()
        .zip(off.params())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    // q, k, v weights (8x4 each), their biases (4 each) and 4 rows of W_o.
    assert!(changed <= 3 * (32 + 4) + 32);
    let wq = off.tensor("layer0.attn.query.weight").unwrap();
    assert!((0..8).all(|r| (4..8).all(|c| wq.get(r, c) == 0.0)));
    assert!((0..8).all(|r| (0..4).all(|c| wq.get(r, c) == model.tensor("layer0.attn.query.weight").unwrap().get(r, c))));
}

#[test]
fn rewriting_attention_with_itself_changes_nothing() {
    let model = TransformerModel::init(tiny_seq(2), 9).unwrap();
    let x = tokens(&[5, 5, 2, 9, 11]);
    let identity = |_: usize, _: usize, p: &mut [f32], _: usize| {
        let copy = p.to_vec();
        p.copy_from_slice(&copy);
    };
    let hooked = logits_with(
        &model,
        &x,
        &Hooks {
            attn: Some(&identity),
            skip_attention: &[],
        },
    );
    assert_eq!(bits(&hooked), bits(&model.logits(&[x]).unwrap()[0]));
}

#[test]
fn uniform_override_matches_zeroed_queries() {
    // Zero queries and query biases make every score equal, so the softmax
    // is already uniform; overriding with a uniform matrix is a no-op.
    let mut model = TransformerModel::init(tiny_seq(2), 10).unwrap();
    for l in 0..2 {
        for n in ["weight", "bias"] {
            let name = format!("layer{l}.attn.query.{n}");
            let t = model.tensor(&name).unwrap();
            model.set_tensor(&name, &Matrix::zeros(t.rows(), t.cols())).unwrap();
        }
    }
    let x = tokens(&[1, 2, 3, 4]);
    let uniform = |_: usize, _: usize, p: &mut [f32], n: usize| p.fill(1.0 / n as f32);
    let hooked = logits_with(
        &model,
        &x,
        &Hooks {
            attn: Some(&uniform),
            skip_attention: &[],
        },
    );
    let plain = model.logits(&[x]).unwrap()[0].clone();
    for (a, b) in hooked.iter().zip(&plain) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn gradients_match_finite_differences_on_full_size_models() {
    let seq = SequenceTask::new(4);
    let cfg = TaskSpec::Sequence(seq.clone()).model_config();
    let model = TransformerModel::init(cfg, 1).unwrap();
    let x = Input::Tokens((0..seq.max_len as u32).map(|i| (i * 13) % 250).collect());
    let g = gradient_check(&model, &x, 2, 300, 2).unwrap();
    assert!(g.checked > 200, "{g:?}");
    assert!(g.max_rel_error < 1e-3, "{g:?}");

    let grid = TransformerModel::init(ModelConfig::grid(4, 4, 4), 2).unwrap();
    let img = Input::Image((0..256).map(|i| ((i * 29) % 17) as f32 / 17.0).collect());
    let g = gradient_check(&grid, &img, 0, 300, 3).unwrap();
    assert!(g.checked > 200, "{g:?}");
    assert!(g.max_rel_error < 1e-3, "{g:?}");
}

#[test]
fn gradient_check_skips_a_saturated_sample() {
    // A huge classifier bias drives the loss to zero; every gradient is
    // below the comparison floor.
    let mut model = TransformerModel::init(tiny_seq(1), 3).unwrap();
    let mut bias = Matrix::zeros(1, 3);
    bias.set(0, 1, 80.0);
    model.set_tensor("classifier.bias", &bias).unwrap();
    let g = gradient_check(&model, &tokens(&[1, 2]), 1, 50, 0).unwrap();
    assert_eq!(g.checked, 0);
    assert_eq!(g.skipped, 50);
}

#[test]
fn gradient_check_catches_a_tampered_gradient() {
    let model = TransformerModel::init(tiny_seq(2), 12).unwrap();
    let x = tokens(&[3, 3, 1, 10]);
    let g = gradient_check_with(&model, &x, 0, 200, 5, |gr| gr.iter_mut().for_each(|v| *v *= 1.5)).unwrap();
    assert!(g.max_rel_error > 1e-1, "{g:?}");
}

/// Label is 0 when token 1 is present, else 1.
fn separable(n: usize, seed: u64) -> LabeledDataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let len = rng.gen_range(2..=6);
            let mut t: Vec<u32> = (0..len).map(|_| rng.gen_range(2..12)).collect();
            if label == 0 {
                let at = rng.gen_range(0..len);
                t[at] = 1;
            }
            Sample {
                input: Input::Tokens(t),
                label,
                provenance: Provenance::Clean,
            }
        })
        .collect();
    LabeledDataset {
        task: TaskSpec::Sequence(SequenceTask::new(2)),
        seed,
        samples,
        poison: None,
    }
}

#[test]
fn learns_a_separable_task() {
    let mut cfg = tiny_seq(2);
    cfg.num_classes = 2;
    let hyper = TrainHyper {
        epochs: 20,
        ..TrainHyper::default()
    };
    let model = train(&cfg, &separable(400, 1), &hyper).unwrap();
    let test = separable(300, 2);
    let acc = train::training_accuracy(&model, &test).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    let mut cfg = tiny_seq(1);
    cfg.num_classes = 2;
    let data = separable(64, 3);
    let hyper = TrainHyper {
        epochs: 2,
        seed: 9,
        ..TrainHyper::default()
    };
    let a = train(&cfg, &data, &hyper).unwrap();
    let b = train(&cfg, &data, &hyper).unwrap();
    assert_eq!(a, b);
    let c = train(&cfg, &data, &TrainHyper { seed: 10, ..hyper }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn container_round_trips() {
    let model = TransformerModel::init(tiny_seq(2), 7)
        .unwrap()
        .deactivate_heads(&[HeadId::new(1, 1)])
        .unwrap();
    let bytes = model.to_bytes();
    let back = TransformerModel::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), bytes);
    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 3);
    assert!(TransformerModel::from_bytes(&bad, std::path::Path::new("mem")).is_err());
    assert!(TransformerModel::from_bytes(b"garbage", std::path::Path::new("mem")).is_err());
}

#[test]
fn rejects_mismatched_inputs() {
    let model = TransformerModel::init(tiny_seq(1), 0).unwrap();
    assert!(model.forward(&[tokens(&[])], false).is_err());
    assert!(model.forward(&[tokens(&[12])], false).is_err());
    assert!(model.forward(&[tokens(&[1; 8])], false).is_err());
    assert!(model.forward(&[tokens(&[1; 7])], false).is_ok());
    assert!(model.forward(&[Input::Image(vec![0.0; 256])], false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_stays_stochastic(seed in 0u64..1000, toks in proptest::collection::vec(0u32..12, 1..8)) {
        let model = TransformerModel::init(tiny_seq(2), seed).unwrap();
        let t = &model.forward(&[Input::Tokens(toks.clone())], true).unwrap()[0];
        prop_assert_eq!(t.len, toks.len() + 1);
        for a in t.attention.iter().flatten() {
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn deactivation_is_order_independent(seed in 0u64..100, mask in 0u8..16) {
        let model = TransformerModel::init(tiny_seq(2), seed).unwrap();
        let heads: Vec<HeadId> = (0..4).filter(|b| mask & (1 << b) != 0).map(|b| HeadId::new(b / 2, b % 2)).collect();
        let mut rev = heads.clone();
        rev.reverse();
        prop_assert_eq!(model.deactivate_heads(&heads).unwrap(), model.deactivate_heads(&rev).unwrap());
    }
}

#[test]
fn mean_readout_gradients_match_finite_differences() {
    let mut cfg = tiny_seq(2);
    cfg.readout = Readout::Mean;
    let model = TransformerModel::init(cfg, 13).unwrap();
    let g = gradient_check(&model, &tokens(&[1, 4, 4, 9, 2, 7]), 2, 400, 1).unwrap();
    assert!(g.checked > 300, "{g:?}");
    assert!(g.max_rel_error < 1e-3, "{g:?}");
}

#[test]
fn frozen_tensors_keep_their_initial_values() {
    let mut cfg = tiny_seq(1);
    cfg.num_classes = 2;
    let hyper = TrainHyper {
        epochs: 2,
        seed: 4,
        frozen: vec!["embed.tokens".into()],
        ..TrainHyper::default()
    };
    let init = TransformerModel::init(cfg.clone(), hyper.seed).unwrap();
    let trained = train(&cfg, &separable(64, 3), &hyper).unwrap();
    for t in init.tensors() {
        let same = init.tensor(&t.name) == trained.tensor(&t.name);
        assert_eq!(same, t.name.starts_with("embed.tokens"), "{}", t.name);
    }
}
