use super::*;
use crate::backbone::build_backbone;
use crate::testutil::{records, small_backbone, small_corpus};
use proptest::prelude::*;

#[test]
fn distance_hand_values() {
    assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
    assert!(euclidean_distance(&[0.0], &[0.0, 1.0]).is_err());
}

#[test]
fn triplet_hand_values() {
    let z = [0.0, 0.0];
    assert!((triplet_loss(&z, &z, &z, 0.2).unwrap() - 0.2).abs() < 1e-12);
    assert_eq!(triplet_loss(&z, &z, &[1.0, 0.0], 0.2).unwrap(), 0.0);
    let l = triplet_loss(&z, &[0.0, 1.0], &[1.0, 0.0], 0.2).unwrap();
    assert!((l - 0.2).abs() < 1e-12);
    assert!(triplet_loss(&z, &z, &z, 0.0).is_err());
}

#[test]
fn inactive_hinge_leaves_parameters_untouched() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
    let p = g.param(Tensor::from_vec(&[1, 2], vec![0.1, 0.0]).unwrap());
    let n = g.param(Tensor::from_vec(&[1, 2], vec![3.0, 0.0]).unwrap());
    let l = g.triplet(a, p, n, 0.2).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
    let grads = g.backward(l).unwrap();
    let mut params = BTreeMap::from([("w".to_string(), Tensor::full(&[2], 0.5f32))]);
    let before = params.clone();
    let zero: BTreeMap<String, Tensor<f32>> = [a, p, n]
        .iter()
        .map(|&v| ("w".to_string(), grads.get(v).unwrap().cast()))
        .collect();
    assert!(zero["w"].data().iter().all(|&v| v == 0.0));
    let mut opt = Sgd::new(SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0, clip_norm: None });
    opt.step(&mut params, &zero, 0.01);
    assert_eq!(params, before);
}

#[test]
fn two_by_two_triplets() {
    let recs = records(&[("s", "a"), ("s", "a"), ("s", "b"), ("s", "b")]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ts = sample_triplets(&recs, 4, &mut rng).unwrap();
    assert_eq!(ts.len(), 4);
    let label = |id: &str| recs.iter().find(|r| r.clip_id == id).unwrap().label.clone();
    let anchors: BTreeSet<_> = ts.iter().map(|t| t.anchor.clone()).collect();
    assert_eq!(anchors.len(), 4);
    for t in &ts {
        assert_eq!(label(&t.anchor), label(&t.positive));
        assert_ne!(label(&t.anchor), label(&t.negative));
        assert_ne!(t.anchor, t.positive);
    }
    let again = sample_triplets(&recs, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(ts, again);
    assert!(sample_triplets(&records(&[("s", "a"), ("s", "a")]), 2, &mut rng).is_err());
}

#[test]
fn held_out_subject_is_refused() {
    let (_d, m, f) = small_corpus();
    let init = build_backbone(&small_backbone()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        batches_per_epoch: Some(1),
        fold: Some("s01".into()),
        ..TrainConfig::gfe()
    };
    let mut audit = AuditLog::default();
    assert!(matches!(train_gfe(&m, &f, &init, &cfg, &mut audit), Err(Error::Leakage { .. })));
    let afe = TrainConfig { stage: Stage::Afe, ..cfg };
    assert!(matches!(train_afe(&m, &f, &init, &afe, &mut audit), Err(Error::Leakage { .. })));
    assert!(audit.entries.is_empty());
}

#[test]
fn triplet_training_reduces_loss_and_is_deterministic() {
    let (_d, m, f) = small_corpus();
    let init = build_backbone(&small_backbone()).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 6,
        batches_per_epoch: Some(3),
        sgd: SgdConfig { lr: 0.01, clip_norm: Some(1.0), ..SgdConfig::default() },
        seed: 4,
        ..TrainConfig::gfe()
    };
    let mut audit = AuditLog::default();
    let a = train_gfe(&m, &f, &init, &cfg, &mut audit).unwrap();
    let losses: Vec<f64> = serde_json::from_value(a.training_meta["epoch_loss"].clone()).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss {:?}", losses);
    assert_eq!(a.provenance, Provenance::GfePretrained);
    assert_eq!(a.config.output_mode, OutputMode::FeatureMap);
    let b = train_gfe(&m, &f, &init, &cfg, &mut AuditLog::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(audit.clip_ids().len(), m.records.len().min(audit.clip_ids().len()));
}

#[test]
fn supervised_training_fits_a_small_balanced_set() {
    let (_d, m, f) = small_corpus();
    let init = build_backbone(&small_backbone()).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 6,
        sgd: SgdConfig { lr: 0.01, clip_norm: Some(1.0), ..SgdConfig::default() },
        schedule: None,
        seed: 2,
        ..TrainConfig::afe()
    };
    let mut audit = AuditLog::default();
    let enc = train_afe(&m, &f, &init, &cfg, &mut audit).unwrap();
    let acc: Vec<f64> = serde_json::from_value(enc.training_meta["epoch_accuracy"].clone()).unwrap();
    assert!(acc.iter().any(|&a| a > 0.9), "accuracy {:?}", acc);
    assert_eq!(enc.provenance, Provenance::AfePretrained);
    assert_eq!(audit.entries.len(), 40 * m.records.len());
}

#[test]
fn afe_refuses_missing_class() {
    let (_d, m, f) = small_corpus();
    let m = m.filtered(|r| r.label != "surprise");
    let init = build_backbone(&small_backbone()).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::afe() };
    assert!(train_afe(&m, &f, &init, &cfg, &mut AuditLog::default()).is_err());
}

proptest! {
    #[test]
    fn triplets_respect_labels(labels in proptest::collection::vec(0usize..4, 2..30), batch in 1usize..20, seed in any::<u64>()) {
        let names = ["a", "b", "c", "d"];
        let pairs: Vec<(&str, &str)> = labels.iter().map(|&l| ("s", names[l])).collect();
        let recs = records(&pairs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_triplets(&recs, batch, &mut rng) {
            Ok(ts) => {
                let label = |id: &str| recs.iter().find(|r| r.clip_id == id).unwrap().label.clone();
                let anchors: BTreeSet<_> = ts.iter().map(|t| t.anchor.clone()).collect();
                prop_assert_eq!(anchors.len(), ts.len());
                prop_assert!(!ts.is_empty() && ts.len() <= batch);
                for t in &ts {
                    prop_assert_eq!(label(&t.anchor), label(&t.positive));
                    prop_assert_ne!(label(&t.anchor), label(&t.negative));
                    prop_assert_ne!(&t.anchor, &t.positive);
                }
            }
            Err(_) => {
                let distinct: BTreeSet<_> = labels.iter().collect();
                let mut counts = [0usize; 4];
                labels.iter().for_each(|&l| counts[l] += 1);
                prop_assert!(distinct.len() < 2 || counts.iter().all(|&c| c < 2));
            }
        }
    }

    #[test]
    fn triplet_loss_is_nonnegative_and_zero_past_margin(
        v in proptest::collection::vec(-3.0f64..3.0, 9),
        alpha in 0.01f64..2.0,
    ) {
        let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
        let l = triplet_loss(a, p, n, alpha).unwrap();
        prop_assert!(l >= 0.0);
        let dp = euclidean_distance(a, p).unwrap().powi(2);
        let dn = euclidean_distance(a, n).unwrap().powi(2);
        if dn >= dp + alpha {
            prop_assert_eq!(l, 0.0);
        }
        let ab = euclidean_distance(a, p).unwrap();
        let bc = euclidean_distance(p, n).unwrap();
        let ac = euclidean_distance(a, n).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert_eq!(ab, euclidean_distance(p, a).unwrap());
    }
}
