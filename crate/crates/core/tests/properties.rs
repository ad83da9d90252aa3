mod common;

use std::collections::BTreeMap;

use common::oracle;
use kdf_core::autodiff::Graph;
use kdf_core::data::{class_weights, DatasetStats, Split};
use kdf_core::distill::{self, DistillConfig};
use kdf_core::metrics::ConfusionMatrix;
use kdf_core::nn::Ctx;
use kdf_core::tensor::Tensor;
use kdf_core::zoo::{self, halve_channels, Model, ModelConfig};
use proptest::prelude::*;

fn rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn logits(max_rows: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_rows, 2usize..=7)
        .prop_flat_map(|(n, c)| (Just(c), prop::collection::vec(-6.0f64..6.0, n * c)))
}

fn kl_value(teacher: &Tensor<f64>, student: &Tensor<f64>, t: f64) -> f64 {
    let g = Graph::<f64>::new();
    let log_p = distill::log_softmax_t_tensor(teacher, t).unwrap();
    let z = g.constant(student.clone());
    let log_q = distill::log_softmax_t(&g, z, t).unwrap();
    let kl = distill::kl_div_from_log(&g, &log_p, log_q).unwrap();
    g.value(kl).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions((c, z) in logits(6), t in 0.5f64..8.0) {
        let x = Tensor::<f32>::from_f64(&[z.len() / c, c], &z).unwrap();
        let p = distill::softmax_t_tensor(&x, t).unwrap();
        for (row, zr) in p.data().chunks(c).zip(z.chunks(c)) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let reference = oracle::softmax_t(zr, t);
            for (a, b) in row.iter().zip(&reference) {
                prop_assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kl_is_nonnegative_and_matches_direct_sum((c, a) in logits(6), seed in any::<u64>(), t in 1.0f64..5.0) {
        let n = a.len() / c;
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 0.5 + ((seed >> (i % 60)) & 7) as f64 - 3.5).collect();
        let (ta, tb) = (Tensor::from_f64(&[n, c], &a).unwrap(), Tensor::from_f64(&[n, c], &b).unwrap());
        let kl = kl_value(&ta, &tb, t);
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - oracle::kl(&rows(&a, c), &rows(&b, c), t)).abs() < 1e-6);
        prop_assert!(kl_value(&ta, &ta, t).abs() < 1e-10);
    }

    #[test]
    fn combined_loss_matches_oracle_and_is_batch_permutation_invariant(
        (c, s) in logits(8),
        shift in prop::collection::vec(-2.0f64..2.0, 56),
        label_seed in any::<u64>(),
        rotate in 0usize..8,
        t in 1.0f64..5.0,
        alpha in 0.0f64..1.0,
    ) {
        let n = s.len() / c;
        let teacher: Vec<f64> = s.iter().zip(shift.iter().cycle()).map(|(a, b)| a + b).collect();
        let labels: Vec<usize> = (0..n).map(|i| ((label_seed >> (i * 3)) as usize) % c).collect();
        let weights: Vec<f64> = (0..c).map(|k| 0.5 + k as f64 * 0.25).collect();
        let cfg = DistillConfig::new(t, alpha).with_class_weights(weights.clone());
        let eval = |s: &[f64], teacher: &[f64], labels: &[usize]| {
            let g = Graph::<f64>::new();
            let z = g.constant(Tensor::from_f64(&[n, c], s).unwrap());
            let tt = Tensor::from_f64(&[n, c], teacher).unwrap();
            let parts = distill::combined_loss(&g, z, Some(&tt), labels, &cfg).unwrap();
            g.value(parts.total).item()
        };
        let loss = eval(&s, &teacher, &labels);
        let expected = oracle::combined(&rows(&s, c), &rows(&teacher, c), &labels, &weights, t, alpha);
        prop_assert!((loss - expected).abs() < 1e-6 * expected.abs().max(1.0));

        let k = rotate % n;
        let rot = |v: &[f64]| { let mut r = rows(v, c); r.rotate_left(k); r.concat() };
        let mut rl = labels.clone();
        rl.rotate_left(k);
        let permuted = eval(&rot(&s), &rot(&teacher), &rl);
        prop_assert!((loss - permuted).abs() <= 1e-12 * loss.abs().max(1.0));
    }

    #[test]
    fn duplicating_a_class_equals_weighting_it(
        z in prop::collection::vec(-3.0f64..3.0, 2..=12),
        label_bits in any::<u16>(),
        k in 1usize..=4,
    ) {
        let n = z.len() / 2;
        prop_assume!(n >= 1);
        let z = &z[..2 * n];
        let labels: Vec<usize> = (0..n).map(|i| ((label_bits >> i) & 1) as usize).collect();
        let ce = |z: &[f64], labels: &[usize], w: &[f64]| {
            let g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64(&[labels.len(), 2], z).unwrap());
            g.value(distill::cross_entropy(&g, x, labels, w).unwrap()).item()
        };
        let weighted = ce(z, &labels, &[1.0, k as f64]);
        let mut dz = Vec::new();
        let mut dl = Vec::new();
        for (row, &y) in z.chunks(2).zip(&labels) {
            let copies = if y == 1 { k } else { 1 };
            for _ in 0..copies {
                dz.extend_from_slice(row);
                dl.push(y);
            }
        }
        let duplicated = ce(&dz, &dl, &[1.0, 1.0]);
        prop_assert!((weighted - duplicated).abs() < 1e-6);
    }

    #[test]
    fn weights_reweight_counts_to_the_split_total(counts in prop::array::uniform7(1usize..20_000)) {
        let stats = DatasetStats { splits: BTreeMap::from([(Split::Training, counts)]) };
        let w = class_weights(&stats, Split::Training).unwrap();
        let n: usize = counts.iter().sum();
        let total: f64 = counts.iter().zip(&w).map(|(&c, &w)| c as f64 * w).sum();
        prop_assert!((total - n as f64).abs() <= 1e-9 * n as f64);
    }

    #[test]
    fn confusion_accuracy_recounts_and_ignores_relabeling(
        pairs in prop::collection::vec((0usize..7, 0usize..7), 1..200),
        perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let m = ConfusionMatrix::from_pairs(7, pairs.iter().copied()).unwrap();
        prop_assert_eq!(m.total(), pairs.len() as u64);
        let hits = pairs.iter().filter(|(t, p)| t == p).count();
        let acc = m.accuracy().unwrap();
        prop_assert!((acc - 100.0 * hits as f64 / pairs.len() as f64).abs() < 1e-12);
        let p = m.permuted(&perm);
        prop_assert_eq!(p.total(), m.total());
        prop_assert_eq!(p.accuracy().unwrap(), acc);
    }
}

fn schedule() -> impl Strategy<Value = ModelConfig> {
    (1usize..=3, 1usize..=3, 1usize..=4, 1usize..=4).prop_map(|(convs, res, base, head)| {
        let conv_channels: Vec<usize> = (0..convs).map(|i| (8 * base) << i).collect();
        let last = *conv_channels.last().unwrap();
        let residual_channels: Vec<usize> = (0..res).map(|i| last << i).collect();
        ModelConfig {
            name: "random".into(),
            conv_channels,
            se_channels: last,
            residual_channels,
            head_widths: vec![64 * head, 32 * head, 7],
            ..ModelConfig::teacher()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn halving_strictly_shrinks_in_factor(config in schedule()) {
        let counts: Vec<u64> = [1, 2, 4, 8]
            .iter()
            .map(|&f| halve_channels(&config, f).unwrap().planned_parameters().unwrap().trainable)
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits(width in 1usize..=4, seed in any::<u64>()) {
        let cfg = common::two_stage("rt", width, [3, 8, 8]);
        let model = Model::<f32>::build(&cfg, seed).unwrap();
        let bytes = zoo::checkpoint::to_bytes(&model);
        let back = zoo::checkpoint::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&model));
        prop_assert_eq!(zoo::checkpoint::to_bytes(&back), bytes);
        let x = Tensor::<f32>::from_f64(&[2, 3, 8, 8], &(0..384).map(|i| (i % 17) as f64 / 17.0).collect::<Vec<_>>()).unwrap();
        prop_assert!(model.logits(&x).unwrap().bit_eq(&back.logits(&x).unwrap()));
    }
}

/// `T²·KL` keeps its student-logit gradient on the same scale for every
/// temperature of the sweep grid.
#[test]
fn squared_temperature_keeps_soft_gradient_scale() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (n, c) = (rng.gen_range(1..=8), 7);
        let teacher: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let student: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tt = Tensor::from_f64(&[n, c], &teacher).unwrap();
        let mut norms = Vec::new();
        for t in [1.0, 2.0, 3.0, 4.0, 5.0] {
            let g = Graph::<f64>::new();
            let z = g.leaf(Tensor::from_f64(&[n, c], &student).unwrap(), true);
            let log_p = distill::log_softmax_t_tensor(&tt, t).unwrap();
            let log_q = distill::log_softmax_t(&g, z, t).unwrap();
            let kl = distill::kl_div_from_log(&g, &log_p, log_q).unwrap();
            let soft = g.scale(kl, t * t);
            let grad = g.backward(soft).unwrap().get(z).unwrap().to_f64_vec();
            let reference = oracle::kl_grad(&rows(&teacher, c), &rows(&student, c), t).concat();
            for (a, b) in grad.iter().zip(&reference) {
                assert!((a - t * t * b).abs() < 1e-9);
            }
            norms.push(grad.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let (lo, hi) = norms
            .iter()
            .fold((f64::MAX, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi < 3.0 * lo, "gradient norms across T: {norms:?}");
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let cfg = common::two_stage("det", 3, [3, 12, 12]);
    let model = Model::<f32>::build(&cfg, 5).unwrap();
    let x = Tensor::<f32>::from_f64(
        &[4, 3, 12, 12],
        &(0..1728)
            .map(|i| ((i * 37) % 101) as f64 / 101.0)
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let run = || {
        let g = Graph::<f32>::new();
        let ctx = Ctx::train(&g, 9);
        let xv = g.constant(x.clone());
        let y = model.forward(&ctx, xv).unwrap();
        let loss = distill::cross_entropy(&g, y, &[0, 1, 2, 3], &[1.0; 7]).unwrap();
        g.backward(loss).unwrap().into_params()
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.len(),
        model
            .params()
            .iter()
            .filter(|p| p.kind == kdf_core::nn::ParamKind::Trainable)
            .count()
    );
    for (name, ga) in &a {
        assert!(ga.bit_eq(&b[name]), "{name}");
    }
}
