use proptest::prelude::*;
use vessel_synth::eval::{
    auc, auc_rank, binarize, confusion, report_csv, roc, roc_csv, ConfusionCounts, ImageReport, Metric,
    ThresholdStrategy,
};
use vessel_synth::{BinaryMask, EvalError, GrayImage};

fn mask(w: usize, h: usize, bits: &[bool]) -> BinaryMask {
    BinaryMask::from_vec(w, h, bits.iter().map(|&b| u8::from(b)).collect()).unwrap()
}

fn naive_counts(pred: &BinaryMask, truth: &BinaryMask, fov: &BinaryMask) -> [u64; 4] {
    let mut c = [0u64; 4];
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if !fov.get(x, y) {
                continue;
            }
            let idx = match (pred.get(x, y), truth.get(x, y)) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => 3,
            };
            c[idx] += 1;
        }
    }
    c
}

#[test]
fn table_formula_examples() {
    let c = ConfusionCounts { tp: 3, fp: 1, tn: 5, fn_: 1 };
    assert_eq!(c.sn(), Metric::Value(0.75));
    assert_eq!(c.sp(), Metric::Value(5.0 / 6.0));
    assert_eq!(c.acc(), Metric::Value(0.8));
    assert_eq!(ConfusionCounts { tp: 4, fp: 0, tn: 0, fn_: 0 }.sn(), Metric::Value(1.0));
    let no_vessels = ConfusionCounts { tp: 0, fp: 2, tn: 8, fn_: 0 };
    assert_eq!(no_vessels.sn(), Metric::Undefined);
    assert_eq!(no_vessels.sn().to_string(), "undefined");
}

#[test]
fn perfect_and_constant_predictions() {
    let bits: Vec<bool> = (0..100).map(|i| i < 10).collect();
    let truth = mask(10, 10, &bits);
    let fov = BinaryMask::filled(10, 10, true);
    let c = confusion(&truth, &truth, &fov).unwrap();
    assert_eq!((c.tp, c.tn, c.fp, c.fn_), (10, 90, 0, 0));
    let c = confusion(&truth.complement(), &truth, &fov).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));

    let perfect = GrayImage::from_vec(10, 10, bits.iter().map(|&b| f32::from(u8::from(b))).collect()).unwrap();
    let curve = roc(&perfect, &truth, &fov, ThresholdStrategy::AllDistinct).unwrap();
    assert!(curve.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
    assert_eq!(auc(&curve), 1.0);
    assert_eq!(auc_rank(&perfect, &truth, &fov).unwrap(), 1.0);

    let anti = GrayImage::from_vec(10, 10, perfect.as_slice().iter().map(|v| 1.0 - v).collect()).unwrap();
    assert_eq!(auc(&roc(&anti, &truth, &fov, ThresholdStrategy::AllDistinct).unwrap()), 0.0);
    assert_eq!(auc_rank(&anti, &truth, &fov).unwrap(), 0.0);

    let flat = GrayImage::filled(10, 10, 0.3);
    let curve = roc(&flat, &truth, &fov, ThresholdStrategy::AllDistinct).unwrap();
    assert_eq!(curve.points.len(), 2);
    assert_eq!(auc(&curve), 0.5);

    assert!(matches!(
        roc(&flat, &truth, &BinaryMask::new(10, 10), ThresholdStrategy::AllDistinct),
        Err(EvalError::EmptyFov)
    ));
}

#[test]
fn report_rows() {
    let truth = mask(2, 2, &[true, false, false, true]);
    let prob = GrayImage::from_vec(2, 2, vec![0.8, 0.1, 0.6, 0.9]).unwrap();
    let fov = BinaryMask::filled(2, 2, true);
    let (r, curve) = ImageReport::evaluate("01", &prob, &truth, &fov, 0.5, ThresholdStrategy::AllDistinct).unwrap();
    let csv = report_csv(&[r]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("image_id,Sn,Sp,Acc,AUC"));
    assert_eq!(lines.next(), Some("01,1.0000,0.5000,0.7500,1.0000"));
    assert!(lines.next().unwrap().starts_with("mean,"));
    assert!(roc_csv(&curve.unwrap()).starts_with("threshold,fpr,tpr\n"));
}

fn arb_case(max: usize) -> impl Strategy<Value = (usize, Vec<f32>, Vec<bool>, Vec<bool>)> {
    (2usize..=max).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop_oneof![0.0f32..=1.0, (0u8..8).prop_map(|k| f32::from(k) / 7.0)], n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(prop::bool::weighted(0.8), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn confusion_matches_brute_force(case in arb_case(1024), threshold in 0.0f32..1.0) {
        let (n, p, t, f) = case;
        let prob = GrayImage::from_vec(n, 1, p).unwrap();
        let (truth, fov) = (mask(n, 1, &t), mask(n, 1, &f));
        let pred = binarize(&prob, threshold);
        let c = confusion(&pred, &truth, &fov).unwrap();
        prop_assert_eq!([c.tp, c.fp, c.tn, c.fn_], naive_counts(&pred, &truth, &fov));
        prop_assert_eq!(c.total() as usize, fov.count_ones());
        if let (Some(sn), Some(tpr)) = (c.sn().value(), c.tpr().value()) {
            prop_assert_eq!(sn, tpr);
        }
        if let (Some(sp), Some(fpr)) = (c.sp().value(), c.fpr().value()) {
            prop_assert!((sp - (1.0 - fpr)).abs() < 1e-15);
        }
        if let Some(acc) = c.acc().value() {
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn roc_agrees_with_recount_and_rank_statistic(case in arb_case(1000)) {
        let (n, p, t, f) = case;
        let prob = GrayImage::from_vec(n, 1, p.clone()).unwrap();
        let (truth, fov) = (mask(n, 1, &t), mask(n, 1, &f));
        let curve = match roc(&prob, &truth, &fov, ThresholdStrategy::AllDistinct) {
            Ok(c) => c,
            Err(EvalError::SingleClass { .. }) | Err(EvalError::EmptyFov) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let first = curve.points[0];
        let last = *curve.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold);
        }
        for pt in &curve.points[1..] {
            let c = confusion(&binarize(&prob, pt.threshold as f32), &truth, &fov).unwrap();
            prop_assert_eq!(c.tp as f64 / curve.positives as f64, pt.tpr);
            prop_assert_eq!(c.fp as f64 / curve.negatives as f64, pt.fpr);
        }
        let a = auc(&curve);
        prop_assert!((a - auc_rank(&prob, &truth, &fov).unwrap()).abs() < 1e-9);

        let squared = GrayImage::from_vec(n, 1, p.iter().map(|v| v * v).collect()).unwrap();
        let a2 = auc(&roc(&squared, &truth, &fov, ThresholdStrategy::AllDistinct).unwrap());
        prop_assert!((a - a2).abs() < 1e-12);

        let grid = roc(&prob, &truth, &fov, ThresholdStrategy::Grid(33)).unwrap();
        prop_assert_eq!(grid.points.len(), 34);
        prop_assert_eq!(grid.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn pixels_outside_the_fov_do_not_matter(case in arb_case(400), noise in prop::collection::vec(0.0f32..1.0, 400)) {
        let (n, p, t, f) = case;
        let fov = mask(n, 1, &f);
        let prob = GrayImage::from_vec(n, 1, p.clone()).unwrap();
        let truth = mask(n, 1, &t);
        let p2: Vec<f32> = p.iter().zip(&f).zip(&noise).map(|((&v, &in_fov), &r)| if in_fov { v } else { r }).collect();
        let t2: Vec<bool> = t.iter().zip(&f).zip(&noise).map(|((&v, &in_fov), &r)| if in_fov { v } else { r > 0.5 }).collect();
        let prob2 = GrayImage::from_vec(n, 1, p2).unwrap();
        let truth2 = mask(n, 1, &t2);
        let r1 = ImageReport::evaluate("a", &prob, &truth, &fov, 0.5, ThresholdStrategy::AllDistinct);
        let r2 = ImageReport::evaluate("a", &prob2, &truth2, &fov, 0.5, ThresholdStrategy::AllDistinct);
        match (r1, r2) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            (a, b) => return Err(TestCaseError::fail(format!("{a:?} vs {b:?}"))),
        }
    }
}
