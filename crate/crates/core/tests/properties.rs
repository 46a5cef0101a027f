use dclab::dcscores::{dc_scores, ConceptSubset};
use dclab::metrics::{mmd2, SnapshotStore};
use dclab::model::{merge_adapters, LoraAdapter, ModelConfig};
use dclab::persist::{events_from_csv, events_to_csv, snapshots_from_csv, snapshots_to_csv};
use dclab::regularizers::clora_forget_value;
use dclab::rng::seeded;
use dclab::tensor::softmax;
use dclab::workflow::{EventLog, Phase};
use dclab::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn distinct(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[1] - w[0] > 1e-9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_normalizes_and_keeps_argmax(x in prop::collection::vec(-20.0..20.0f64, 1..12), tau in 0.01..10.0f64) {
        let p = softmax(&x, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assume!(distinct(&x));
        prop_assert_eq!(argmax(&p), argmax(&x));
    }
}

proptest! {
    #[test]
    fn softmax_in_single_precision(x in prop::collection::vec(-5.0..5.0f32, 1..8)) {
        let p = softmax(&x, 1.0f32).unwrap();
        prop_assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn dc_argmax_ignores_temperature(losses in prop::collection::vec(0.0..6.0f64, 4), t1 in 0.05..3.0f64, t2 in 0.05..3.0f64) {
        prop_assume!(distinct(&losses));
        let subset = ConceptSubset::new(vec![0, 2, 3, 5], 4).unwrap();
        let a = dc_scores(5, &losses, &subset, t1).unwrap();
        let b = dc_scores(5, &losses, &subset, t2).unwrap();
        prop_assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn sharper_temperature_lowers_entropy(losses in prop::collection::vec(0.0..4.0f64, 2..6)) {
        let neg: Vec<f64> = losses.iter().map(|l| -l).collect();
        let sharp = softmax(&neg, 0.05).unwrap();
        let soft = softmax(&neg, 1.0).unwrap();
        prop_assert!(entropy(&sharp) <= entropy(&soft) + 1e-12);
    }

    #[test]
    fn mmd_is_symmetric_and_zero_on_itself(
        x in prop::collection::vec(-3.0..3.0f64, 2..40),
        y in prop::collection::vec(-3.0..3.0f64, 2..40),
    ) {
        let (x, y) = (&x[..x.len() / 2 * 2], &y[..y.len() / 2 * 2]);
        prop_assert_eq!(mmd2(x, y, 2).unwrap(), mmd2(y, x, 2).unwrap());
        prop_assert_eq!(mmd2(x, x, 2).unwrap(), 0.0);
        prop_assert!(mmd2(x, y, 2).unwrap() >= -1e-9);
    }

    #[test]
    fn forget_penalty_ignores_sign_of_past(
        past in prop::collection::vec(-2.0..2.0f64, 12),
        current in prop::collection::vec(-2.0..2.0f64, 12),
        flips in prop::collection::vec(any::<bool>(), 12),
    ) {
        let flipped: Vec<f64> = past.iter().zip(&flips).map(|(v, &f)| if f { -v } else { *v }).collect();
        let t = |v: Vec<f64>| Tensor::matrix(3, 4, v).unwrap();
        let a = clora_forget_value(&t(past), &t(current.clone())).unwrap();
        let b = clora_forget_value(&t(flipped), &t(current)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn adapter_product_has_bounded_rank(seed in 0u64..1000, rank in 1usize..4) {
        let cfg = ModelConfig { data_dim: 2, hidden: 9, time_dim: 4, embed_dim: 7 };
        let mut rng = seeded(seed);
        let mut a = LoraAdapter::new("lora", 1, rank, &cfg, &mut rng);
        for p in a.params_mut() {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&dclab::rng::normals(&mut rng, n));
        }
        let (k, _) = a.products();
        let (r, c) = k.dims2();
        let sv = DMatrix::from_row_slice(r, c, k.values()).singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        prop_assert!(sv[rank..].iter().all(|&s| s < 1e-10));
    }

    #[test]
    fn merged_adapter_sums_weighted_products(seed in 0u64..1000, w1 in -1.0..1.0f64, w2 in -1.0..1.0f64) {
        let cfg = ModelConfig { data_dim: 2, hidden: 5, time_dim: 4, embed_dim: 3 };
        let mut rng = seeded(seed);
        let mut adapters = Vec::new();
        for task in 1..=2 {
            let mut a = LoraAdapter::new("lora", task, 2, &cfg, &mut rng);
            for p in a.params_mut() {
                let n = p.tensor.len();
                p.tensor.values_mut().copy_from_slice(&dclab::rng::normals(&mut rng, n));
            }
            adapters.push(a);
        }
        let merged = merge_adapters(&adapters, &[w1, w2]).unwrap();
        let (mk, mv) = merged.products();
        let (k1, v1) = adapters[0].products();
        let (k2, v2) = adapters[1].products();
        for (m, (a, b)) in [(&mk, (&k1, &k2)), (&mv, (&v1, &v2))] {
            for i in 0..m.len() {
                prop_assert!((m.values()[i] - (w1 * a.values()[i] + w2 * b.values()[i])).abs() < 1e-12);
            }
        }
        prop_assert!(merged.rank <= 4);
    }

    #[test]
    fn snapshot_store_round_trips(cells in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 1..8), 1..6)) {
        let mut store = SnapshotStore::new(2);
        let mut i = 1;
        let mut j = 1;
        for mut pts in cells {
            if pts.len() % 2 == 1 {
                pts.pop();
            }
            if pts.is_empty() {
                continue;
            }
            store.set_target(j, pts.clone()).unwrap();
            store.insert(i, j, pts.iter().map(|v| v / 3.0).collect()).unwrap();
            j += 1;
            if j > i {
                i += 1;
                j = 1;
            }
        }
        prop_assert_eq!(snapshots_from_csv(&snapshots_to_csv(&store)).unwrap(), store);
    }

    #[test]
    fn event_log_round_trips(values in prop::collection::vec((0usize..5, any::<f64>()), 0..20)) {
        let mut log = EventLog::default();
        for (k, (task, v)) in values.iter().enumerate() {
            prop_assume!(v.is_finite());
            log.push(*task, Phase::Train, k, &[("loss", *v), ("norm", v.abs())]);
        }
        prop_assert_eq!(events_from_csv(&events_to_csv(&log)).unwrap(), log);
    }
}
