use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attn_hijack::datasets::{
    matched_set, poison_dataset, GridTask, LabeledDataset, PoisonSpec, Provenance, SequenceTask, Stencil, TaskSpec,
};
use attn_hijack::transformer::Input;

/// Bag-of-tokens counts or raw pixels.
fn features(task: &TaskSpec, input: &Input) -> Vec<f64> {
    match (task, input) {
        (TaskSpec::Sequence(s), Input::Tokens(t)) => {
            let mut v = vec![0.0; s.vocab.vocab_size()];
            for &x in t {
                v[x as usize] += 1.0 / t.len() as f64;
            }
            v
        }
        (_, Input::Image(px)) => px.iter().map(|&p| f64::from(p)).collect(),
        _ => unreachable!(),
    }
}

/// Multinomial logistic regression by full-batch gradient descent; returns
/// held-out accuracy.
fn logistic_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
    let task = &train.task;
    let k = task.num_classes();
    let xs: Vec<Vec<f64>> = train.samples.iter().map(|s| features(task, &s.input)).collect();
    let d = xs[0].len();
    let mut w = vec![vec![0.0; d + 1]; k];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..300 {
        let mut g = vec![vec![0.0; d + 1]; k];
        for (x, s) in xs.iter().zip(&train.samples) {
            let z = scores(&w, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..k {
                let r = e[c] / sum - f64::from(u8::from(c == s.label));
                for j in 0..d {
                    g[c][j] += r * x[j];
                }
                g[c][d] += r;
            }
        }
        let n = xs.len() as f64;
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= 2.0 * g[c][j] / n;
            }
        }
    }
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let z = scores(&w, &features(task, &s.input));
            let best = (0..k).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            best == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn sequence_task_is_linearly_learnable() {
    let task = TaskSpec::Sequence(SequenceTask::new(4));
    let acc = logistic_accuracy(&task.generate(400, 1), &task.generate(200, 2));
    assert!(acc >= 0.95, "logistic accuracy {acc}");
}

#[test]
fn grid_task_is_linearly_learnable() {
    let task = TaskSpec::Grid(GridTask::new(4));
    let acc = logistic_accuracy(&task.generate(400, 1), &task.generate(200, 2));
    assert!(acc >= 0.95, "logistic accuracy {acc}");
}

/// Wilson-Hilferty approximation to the chi-square quantile.
fn chi2_quantile(dof: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * dof);
    dof * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn filler_tokens_carry_no_label_information() {
    let TaskSpec::Sequence(seq) = TaskSpec::Sequence(SequenceTask::new(4)) else {
        unreachable!()
    };
    let task = TaskSpec::Sequence(seq.clone());
    let data = task.generate(2000, 5);
    let filler = seq.vocab.filler_range();
    let (rows, cols) = (filler.len(), 4);
    let mut table = vec![vec![0.0f64; cols]; rows];
    for s in &data.samples {
        let Input::Tokens(t) = &s.input else { unreachable!() };
        for &x in t.iter().filter(|x| filler.contains(x)) {
            table[(x - filler.start) as usize][s.label] += 1.0;
        }
    }
    let total: f64 = table.iter().flatten().sum();
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let e = row[i] * col[j] / total;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    let dof = ((rows - 1) * (cols - 1)) as f64;
    // one-sided 0.999 quantile
    let critical = chi2_quantile(dof, 3.09);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical} with {dof} dof");
}

#[test]
fn reserved_tokens_never_occur_in_clean_text() {
    let seq = SequenceTask::new(4);
    let data = TaskSpec::Sequence(seq.clone()).generate(1000, 8);
    for s in &data.samples {
        let Input::Tokens(t) = &s.input else { unreachable!() };
        assert!(t.iter().all(|&x| !seq.vocab.is_reserved(x)));
        assert!((seq.min_len..=seq.max_len).contains(&t.len()));
    }
}

#[test]
fn poisoning_hits_exactly_the_requested_count() {
    for task in [
        TaskSpec::Sequence(SequenceTask::new(4)),
        TaskSpec::Grid(GridTask::new(4)),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let spec = PoisonSpec::random(&task, 1, &mut rng);
            let clean = task.generate(333, 4);
            let poisoned = poison_dataset(&clean, &spec, 5).unwrap();
            let want = (spec.poison_rate * 333.0 + 1e-9).floor() as usize;
            assert_eq!(poisoned.count(Provenance::Poisoned), want);
            for (before, after) in clean.samples.iter().zip(&poisoned.samples) {
                if after.provenance == Provenance::Poisoned {
                    assert_ne!(before.label, spec.target_class);
                    assert_eq!(after.label, spec.target_class);
                    assert!(spec.trigger.present_in(&after.input, &task));
                } else {
                    assert_eq!(before, after);
                }
            }
        }
    }
}

#[test]
fn out_of_range_poison_rate_is_rejected() {
    let task = TaskSpec::Sequence(SequenceTask::new(4));
    let mut spec = PoisonSpec::random(&task, 1, &mut ChaCha8Rng::seed_from_u64(0));
    for rate in [0.0, 0.05, 0.25, 1.0] {
        spec.poison_rate = rate;
        assert!(poison_dataset(&task.generate(50, 0), &spec, 0).is_err());
    }
}

#[test]
fn matched_sets_stay_aligned() {
    for task in [
        TaskSpec::Sequence(SequenceTask::new(4)),
        TaskSpec::Grid(GridTask::new(4)),
    ] {
        let spec = PoisonSpec::random(&task, 1, &mut ChaCha8Rng::seed_from_u64(6));
        let mut base = task.generate(120, 7).samples;
        base.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let set = matched_set(
            &base,
            &task,
            &spec.trigger,
            Some(spec.target_class),
            Some(spec.target_class),
            9,
        )
        .unwrap();
        assert!(!set.is_empty());
        assert_eq!(set.clean.len(), set.perturbed.len());
        assert_eq!(set.clean.len(), set.anchors.len());
        for ((c, p), a) in set.clean.iter().zip(&set.perturbed).zip(&set.anchors) {
            assert_ne!(c.label, spec.target_class);
            assert_eq!(p.label, spec.target_class);
            assert_eq!(p.provenance, Provenance::Poisoned);
            assert!(spec.trigger.present_in(&p.input, &task));
            assert!(!a.is_empty());
        }
        let again = matched_set(
            &base,
            &task,
            &spec.trigger,
            Some(spec.target_class),
            Some(spec.target_class),
            9,
        )
        .unwrap();
        assert_eq!(again.perturbed, set.perturbed);
    }
}

#[test]
fn corner_clutter_never_matches_a_stencil() {
    let task = GridTask::new(4);
    assert!(task.clutter > 0.0);
    let side = task.image_side();
    let data = TaskSpec::Grid(task.clone()).generate(1000, 12);
    let mut marked = 0;
    for s in &data.samples {
        let Input::Image(px) = &s.input else { unreachable!() };
        for loc in task.trigger_locations() {
            let (r0, c0) = (loc.0 * task.patch_size, loc.1 * task.patch_size);
            let block: Vec<f32> = (0..3)
                .flat_map(|r| (0..3).map(move |c| (r0 + r) * side + c0 + c))
                .map(|i| px[i])
                .collect();
            marked += usize::from(block.iter().any(|&v| v >= 0.75));
            for bits in 0..512u16 {
                assert!(!Stencil::from_bits(bits).present(px, side, task.patch_size, loc));
            }
        }
    }
    // Shapes stay out of the corner patches, so bright corner pixels come
    // only from clutter marks.
    let expected = 4000.0 * task.clutter;
    assert!(
        (marked as f64 - expected).abs() < 0.1 * expected,
        "{marked} marked corners"
    );
}
