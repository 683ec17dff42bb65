use attnfd::metrics::{ConfusionMatrix, Report};
use attnfd::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IGNORE: u8 = 255;

#[test]
fn perfect_prediction() {
    let label: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&label, &label, IGNORE).unwrap();
    for t in 0..4 {
        for p in 0..4 {
            assert_eq!(cm.get(t, p), if t == p { 16 } else { 0 });
        }
    }
    assert_eq!(cm.miou().unwrap().0, 1.0);
    assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
}

#[test]
fn ignored_pixels_leave_the_matrix_unchanged() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 1, 2], &[IGNORE; 3], IGNORE).unwrap();
    assert_eq!(cm, ConfusionMatrix::new(3));
    assert!(matches!(cm.miou(), Err(Error::Undefined(_))));
    assert!(matches!(cm.pixel_accuracy(), Err(Error::Undefined(_))));
}

#[test]
fn hand_computed_two_class_matrix() {
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
    let (miou, per) = cm.miou().unwrap();
    assert!((per[0].unwrap() - 0.6).abs() < 1e-15);
    assert!((per[1].unwrap() - 0.6).abs() < 1e-15);
    assert!((miou - 0.6).abs() < 1e-15);
    assert_eq!(cm.pixel_accuracy().unwrap(), 0.75);
}

#[test]
fn absent_class_is_excluded() {
    let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
    let (miou, per) = cm.miou().unwrap();
    assert_eq!(per[2], None);
    assert_eq!(miou, 1.0);
}

#[test]
fn out_of_range_prediction_is_a_contract_error() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(matches!(
        cm.accumulate(&[2], &[0], IGNORE),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        cm.accumulate(&[0], &[5], IGNORE),
        Err(Error::Label { .. })
    ));
    assert!(matches!(
        cm.accumulate(&[0, 1], &[0], IGNORE),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn matches_brute_force_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 4;
    let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..k as u8)).collect();
    let label: Vec<u8> = (0..64)
        .map(|_| {
            if rng.random_bool(0.1) {
                IGNORE
            } else {
                rng.random_range(0..k as u8)
            }
        })
        .collect();
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(&pred, &label, IGNORE).unwrap();
    for t in 0..k {
        for p in 0..k {
            let n = (0..64)
                .filter(|&i| label[i] as usize == t && pred[i] as usize == p)
                .count();
            assert_eq!(cm.get(t, p), n as u64);
        }
    }
    let mut ious = Vec::new();
    for c in 0..k {
        let tp = (0..64)
            .filter(|&i| label[i] as usize == c && pred[i] as usize == c)
            .count();
        let fp = (0..64)
            .filter(|&i| label[i] != IGNORE && label[i] as usize != c && pred[i] as usize == c)
            .count();
        let fneg = (0..64)
            .filter(|&i| label[i] as usize == c && pred[i] as usize != c)
            .count();
        if tp + fp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    let want = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!((cm.miou().unwrap().0 - want).abs() < 1e-15);
}

#[test]
fn random_guessing_on_balanced_classes_is_half_right() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let label: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
    let pred: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..2u8)).collect();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &label, IGNORE).unwrap();
    assert!((cm.pixel_accuracy().unwrap() - 0.5).abs() < 0.05);
}

#[test]
fn report_over_seeds() {
    let a = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
    let b = ConfusionMatrix::from_counts(2, vec![4, 0, 0, 4]).unwrap();
    let r = Report::over_seeds(&[a, b]).unwrap();
    assert!((r.miou - 0.8).abs() < 1e-15);
    assert!((r.miou_std - (0.08f64).sqrt()).abs() < 1e-15);
    assert_eq!(r.seeds, 2);
    assert!(r.to_table().contains("mIoU"));
}

fn maps(k: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..200).prop_flat_map(move |n| {
        (
            proptest::collection::vec(0..k as u8, n),
            proptest::collection::vec(prop_oneof![9 => 0..k as u8, 1 => Just(IGNORE)], n),
        )
    })
}

proptest! {
    #[test]
    fn accumulation_is_additive((pred, label) in maps(4), split in 0usize..200) {
        let split = split.min(pred.len());
        let mut whole = ConfusionMatrix::new(4);
        whole.accumulate(&pred, &label, IGNORE).unwrap();
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&pred[..split], &label[..split], IGNORE).unwrap();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&pred[split..], &label[split..], IGNORE).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(a, whole);
    }

    #[test]
    fn iou_is_bounded_by_recall((pred, label) in maps(4)) {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &label, IGNORE).unwrap();
        for (c, iou) in cm.class_iou().into_iter().enumerate() {
            if let Some(iou) = iou {
                let row: u64 = (0..4).map(|j| cm.get(c, j)).sum();
                let recall = if row == 0 { 0.0 } else { cm.get(c, c) as f64 / row as f64 };
                prop_assert!(iou >= 0.0 && iou <= recall + 1e-15 && recall <= 1.0);
            }
        }
    }

    #[test]
    fn scores_ignore_class_relabeling((pred, label) in maps(4), perm in Just([2u8, 0, 3, 1])) {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &label, IGNORE).unwrap();
        let relabel = |v: &u8| if *v == IGNORE { IGNORE } else { perm[*v as usize] };
        let p2: Vec<u8> = pred.iter().map(relabel).collect();
        let l2: Vec<u8> = label.iter().map(relabel).collect();
        let mut cm2 = ConfusionMatrix::new(4);
        cm2.accumulate(&p2, &l2, IGNORE).unwrap();
        match (cm.miou(), cm2.miou()) {
            (Ok(a), Ok(b)) => prop_assert!((a.0 - b.0).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false),
        }
        if cm.total() > 0 {
            prop_assert_eq!(cm.pixel_accuracy().unwrap(), cm2.pixel_accuracy().unwrap());
        }
    }
}
