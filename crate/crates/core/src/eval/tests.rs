use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datamodel::manifest::LabelSpace;
use crate::metanet::EmbeddingTable;
use crate::testutil::records;

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{}", i)).collect()
}

fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
    ConfusionMatrix {
        classes: classes(rows.len()),
        counts: rows.iter().map(|r| r.to_vec()).collect(),
    }
}

fn manifest(n_subjects: usize, per_class: usize) -> DatasetManifest {
    let labels = ["negative", "positive", "surprise"];
    let subjects: Vec<String> = (0..n_subjects).map(|s| format!("s{:02}", s)).collect();
    let mut spec = Vec::new();
    for s in &subjects {
        for l in labels {
            for _ in 0..per_class {
                spec.push((s.as_str(), l));
            }
        }
    }
    let mut m = DatasetManifest::new(LabelSpace::cde3(), (32, 32), ".");
    m.records = records(&spec);
    m
}

/// Serves fixed tables and records every clip it was asked for as trained.
struct Fixed {
    build: Box<dyn Fn(&[String]) -> EmbeddingTable>,
    touch_test: bool,
}

impl FoldTrainer for Fixed {
    fn train_fold(
        &mut self,
        fold: &Fold,
        train: &DatasetManifest,
        clip_ids: &[String],
        audit: &mut AuditLog,
    ) -> Result<Vec<(String, EmbeddingTable)>> {
        for r in &train.records {
            audit.record("fixed", &r.clip_id);
        }
        if self.touch_test {
            audit.record("fixed", &format!("{}__mag2", clip_ids.last().unwrap()));
        }
        assert!(train.records.iter().all(|r| r.subject_id != fold.test_subject));
        Ok(vec![("m".into(), (self.build)(clip_ids))])
    }
}

fn one_hot(m: &DatasetManifest) -> impl Fn(&[String]) -> EmbeddingTable + 'static {
    let labels: BTreeMap<String, usize> = m.records.iter().map(|r| (r.clip_id.clone(), m.label_index(r))).collect();
    move |ids: &[String]| {
        EmbeddingTable::from_embeddings(
            ids.iter()
                .map(|id| {
                    let mut e = vec![0.0; 3];
                    e[labels[id]] = 1.0;
                    (id.clone(), e)
                })
                .collect(),
        )
    }
}

#[test]
fn sixteen_subjects_give_sixteen_folds() {
    let m = manifest(16, 1);
    let folds = loso_split(&m).unwrap();
    assert_eq!(folds.len(), 16);
    let mut in_train: BTreeMap<&str, usize> = BTreeMap::new();
    let mut in_test: BTreeMap<&str, usize> = BTreeMap::new();
    for f in &folds {
        let (tr, te) = f.split(&m);
        assert_eq!(tr.records.len() + te.records.len(), m.records.len());
        for r in &m.records {
            if tr.records.iter().any(|x| x.clip_id == r.clip_id) {
                *in_train.entry(&r.clip_id).or_default() += 1;
            }
            if te.records.iter().any(|x| x.clip_id == r.clip_id) {
                *in_test.entry(&r.clip_id).or_default() += 1;
            }
        }
    }
    assert!(in_train.values().all(|&n| n == 15));
    assert!(in_test.values().all(|&n| n == 1));
    assert!(loso_split(&manifest(1, 2)).is_err());
}

#[test]
fn magnified_copies_follow_their_subject() {
    let mut m = manifest(3, 1);
    let mut copy = m.records[0].clone();
    copy.clip_id = format!("{}__mag3", copy.clip_id);
    copy.magnification_factor = 3;
    m.records.push(copy);
    for f in loso_split(&m).unwrap() {
        let (tr, _) = f.split(&m);
        if f.test_subject == m.records[0].subject_id {
            assert!(tr.records.iter().all(|r| !r.clip_id.starts_with(&m.records[0].clip_id)));
        }
    }
}

#[test]
fn confusion_hand_cases() {
    let c = classes(2);
    let mut preds = Vec::new();
    for l in &c {
        for _ in 0..5 {
            preds.push((l.clone(), l.clone()));
        }
    }
    assert_eq!(confusion_from_predictions(&c, &preds).unwrap().counts, vec![vec![5, 0], vec![0, 5]]);
    let one = confusion_from_predictions(&c, &[("c0".into(), "c1".into())]).unwrap();
    assert_eq!(one.counts[0][1], 1);
    assert!(confusion_from_predictions(&c, &[("c0".into(), "zz".into())]).is_err());
}

#[test]
fn metric_hand_cases() {
    let m = per_class_metrics(&cm(&[&[3, 1], &[2, 4]])).unwrap();
    assert_abs_diff_eq!(m[0].acc.unwrap(), 0.75, epsilon = 1e-12);
    assert_abs_diff_eq!(m[0].f1.unwrap(), 6.0 / 9.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m[1].acc.unwrap(), 4.0 / 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m[1].f1.unwrap(), 8.0 / 11.0, epsilon = 1e-12);
    let (uf1, uar) = uf1_uar(&cm(&[&[3, 1], &[2, 4]])).unwrap();
    assert_abs_diff_eq!(uf1, 0.6970, epsilon = 1e-4);
    assert_abs_diff_eq!(uar, 0.7083, epsilon = 1e-4);
    assert_eq!(uf1_uar(&cm(&[&[5, 0], &[0, 5]])).unwrap(), (1.0, 1.0));
    let never = per_class_metrics(&cm(&[&[0, 4], &[0, 6]])).unwrap();
    assert_eq!(never[0].f1, Some(0.0));
    assert!(per_class_metrics(&cm(&[&[0, 0], &[0, 0]])).is_err());
    let absent = per_class_metrics(&cm(&[&[2, 1, 0], &[0, 0, 0], &[1, 0, 3]])).unwrap();
    assert_eq!(absent[1].acc, None);
}

#[test]
fn csv_tables_have_headers() {
    let t = cm(&[&[3, 1], &[2, 4]]).to_csv().unwrap();
    assert_eq!(t, "true\\predicted,c0,c1\nc0,3,1\nc1,2,4\n");
}

#[test]
fn oracle_encoder_scores_perfectly() {
    let m = manifest(4, 6);
    let mut t = Fixed {
        build: Box::new(one_hot(&m)),
        touch_test: false,
    };
    let (report, preds) = run_loso(&m, &mut t, "m", &EvalConfig::default()).unwrap();
    assert_eq!(report.per_fold.len(), 4);
    assert_eq!((report.uf1, report.uar), (1.0, 1.0));
    assert_eq!(report.aggregate.row_sums(), vec![24, 24, 24]);
    assert_eq!(preds.len(), m.records.len());
}

#[test]
fn audit_violation_aborts_the_run() {
    let m = manifest(3, 2);
    let mut t = Fixed {
        build: Box::new(one_hot(&m)),
        touch_test: true,
    };
    assert!(matches!(
        run_loso(&m, &mut t, "m", &EvalConfig::default()),
        Err(crate::Error::Leakage { .. })
    ));
}

#[test]
fn random_embeddings_give_chance_uar() {
    let m = manifest(6, 20);
    let mut t = Fixed {
        build: Box::new(|ids: &[String]| {
            let mut rng = ChaCha8Rng::seed_from_u64(ids.len() as u64 + ids[0].len() as u64);
            EmbeddingTable::from_embeddings(
                ids.iter()
                    .map(|id| (id.clone(), (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                    .collect(),
            )
        }),
        touch_test: false,
    };
    let (report, preds) = run_loso(&m, &mut t, "m", &EvalConfig::default()).unwrap();
    assert!(preds.len() >= 300);
    assert!((report.uar - 1.0 / 3.0).abs() <= 0.05, "UAR {}", report.uar);
}

#[test]
fn prediction_log_recounts_to_the_report() {
    let m = manifest(3, 4);
    let mut t = Fixed {
        build: Box::new(|ids: &[String]| {
            EmbeddingTable::from_embeddings(
                ids.iter()
                    .enumerate()
                    .map(|(i, id)| (id.clone(), vec![(i % 5) as f64 + 0.5, ((i * 7) % 3) as f64 - 1.0]))
                    .collect(),
            )
        }),
        touch_test: false,
    };
    let (report, preds) = run_loso(&m, &mut t, "m", &EvalConfig::default()).unwrap();
    let pairs: Vec<(String, String)> = preds.iter().map(|p| (p.truth.clone(), p.predicted.clone())).collect();
    let recount = confusion_from_predictions(&m.label_space.classes, &pairs).unwrap();
    assert_eq!(recount, report.aggregate);
    let mut sum = ConfusionMatrix::zeros(&m.label_space.classes);
    for f in &report.per_fold {
        sum.add(&f.confusion).unwrap();
    }
    assert_eq!(sum, report.aggregate);
    let text = predictions_csv(&m.label_space.classes, &preds).unwrap();
    assert_eq!(text.lines().count(), preds.len() + 1);
    for p in &preds {
        assert_abs_diff_eq!(p.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }
}

#[test]
fn grids_are_validated() {
    assert!(validate_grid(SweepParam::L, &[2.0]).is_err());
    assert!(validate_grid(SweepParam::L, &[3.0, 11.0, 20.0]).is_ok());
    assert!(validate_grid(SweepParam::L, &[21.0]).is_err());
    assert!(validate_grid(SweepParam::Gamma, &[1.1]).is_err());
    let mut calls = 0;
    let t = sweep(SweepParam::Gamma, &[0.0, 0.5, 1.0], &mut |_| {
        calls += 1;
        MetricsReport::assemble(&classes(2), vec![("s".into(), cm(&[&[3, 1], &[2, 4]]))])
    })
    .unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(calls, 3);
    assert_eq!(t.to_csv().unwrap().lines().count(), 4);
}

/// Independent recount straight from `(true, predicted)` pairs.
fn brute(k: usize, pairs: &[(usize, usize)]) -> (f64, f64, f64) {
    let (mut f1s, mut recalls) = (Vec::new(), Vec::new());
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
        if tp + fn_ > 0.0 {
            f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
            recalls.push(tp / (tp + fn_));
        }
    }
    let n = f1s.len() as f64;
    // balanced accuracy: Σ_c (hits in c) / (size of c), averaged
    let mut bal = 0.0;
    for c in 0..k {
        let size = pairs.iter().filter(|p| p.0 == c).count();
        if size > 0 {
            bal += pairs.iter().filter(|p| p.0 == c && p.1 == c).count() as f64 / size as f64;
        }
    }
    (f1s.iter().sum::<f64>() / n, recalls.iter().sum::<f64>() / n, bal / n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_match_a_brute_force_recount(
        k in 2usize..6,
        raw in proptest::collection::vec((0usize..100, 0usize..100), 1..200),
    ) {
        let pairs: Vec<(usize, usize)> = raw.iter().map(|(t, p)| (t % k, p % k)).collect();
        let c = classes(k);
        let named: Vec<(String, String)> = pairs.iter().map(|(t, p)| (c[*t].clone(), c[*p].clone())).collect();
        let m = confusion_from_predictions(&c, &named).unwrap();
        let (uf1, uar) = uf1_uar(&m).unwrap();
        let (bf1, bar, bal) = brute(k, &pairs);
        prop_assert!((uf1 - bf1).abs() < 1e-12);
        prop_assert!((uar - bar).abs() < 1e-12);
        prop_assert!((uar - bal).abs() < 1e-12);
        prop_assert_eq!(m.row_sums().iter().sum::<u64>(), pairs.len() as u64);
    }

    #[test]
    fn relabelling_and_reordering_keep_the_metrics(
        raw in proptest::collection::vec((0usize..3, 0usize..3), 1..80),
        perm_seed in any::<u64>(),
    ) {
        let c = classes(3);
        let mut perm = vec![0usize, 1, 2];
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let named: Vec<(String, String)> = raw.iter().map(|(t, p)| (c[*t].clone(), c[*p].clone())).collect();
        let relabelled: Vec<(String, String)> = raw.iter().map(|(t, p)| (c[perm[*t]].clone(), c[perm[*p]].clone())).collect();
        let mut reversed = named.clone();
        reversed.reverse();
        let a = confusion_from_predictions(&c, &named).unwrap();
        let b = confusion_from_predictions(&c, &relabelled).unwrap();
        prop_assert_eq!(&a, &confusion_from_predictions(&c, &reversed).unwrap());
        let (fa, ua) = uf1_uar(&a).unwrap();
        let (fb, ub) = uf1_uar(&b).unwrap();
        prop_assert!((fa - fb).abs() < 1e-12 && (ua - ub).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_the_sum_of_folds(
        folds in proptest::collection::vec(proptest::collection::vec(0u64..6, 9), 1..6),
    ) {
        let c = classes(3);
        let mats: Vec<(String, ConfusionMatrix)> = folds
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("s{}", i), ConfusionMatrix { classes: c.clone(), counts: v.chunks(3).map(|r| r.to_vec()).collect() }))
            .filter(|(_, m)| m.total() > 0)
            .collect();
        prop_assume!(!mats.is_empty());
        let r = MetricsReport::assemble(&c, mats.clone()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: u64 = mats.iter().map(|(_, m)| m.counts[i][j]).sum();
                prop_assert_eq!(r.aggregate.counts[i][j], s);
            }
        }
        let (uf1, uar) = uf1_uar(&r.aggregate).unwrap();
        prop_assert_eq!((r.uf1, r.uar), (uf1, uar));
    }
}
