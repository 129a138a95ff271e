use glomseg::eval::{
    confusion, mean_and_sample_std, metrics_from_counts, read_reports_csv, write_reports_csv, Aggregation,
    ConfusionCounts, MetricsReport,
};
use glomseg::SegMask;
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
}

fn pair() -> impl Strategy<Value = (SegMask, SegMask)> {
    (1usize..20, 1usize..20).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(0u8..2, w * h),
            proptest::collection::vec(0u8..2, w * h),
        )
            .prop_map(move |(a, b)| (SegMask::from_vec(w, h, a).unwrap(), SegMask::from_vec(w, h, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn dice_is_harmonic_mean_of_precision_and_recall(c in counts()) {
        let m = metrics_from_counts(&c);
        if m.precision + m.recall > 0.0 {
            let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.dice - f1).abs() < TOL);
        } else {
            prop_assert_eq!(m.dice, 0.0);
        }
        for v in [m.precision, m.recall, m.dice] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn swapping_prediction_and_truth_swaps_precision_and_recall(c in counts()) {
        let a = metrics_from_counts(&c);
        let b = metrics_from_counts(&c.swapped());
        prop_assert!((a.precision - b.recall).abs() < TOL);
        prop_assert!((a.recall - b.precision).abs() < TOL);
        prop_assert!((a.dice - b.dice).abs() < TOL);
    }

    #[test]
    fn confusion_tallies_every_pixel((pred, gt) in pair()) {
        let c = confusion(&pred, &gt).unwrap();
        let n = pred.as_slice().len() as u64;
        prop_assert_eq!(c.total(), n);
        prop_assert_eq!(c.tp + c.fp, pred.count_ones() as u64);
        prop_assert_eq!(c.tp + c.fn_, gt.count_ones() as u64);
        let tp = pred.as_slice().iter().zip(gt.as_slice()).filter(|(p, g)| **p == 1 && **g == 1).count() as u64;
        prop_assert_eq!(c.tp, tp);
    }

    #[test]
    fn micro_pools_counts_before_dividing(cs in proptest::collection::vec(counts(), 1..6)) {
        let r = MetricsReport::from_counts("d", "m", &cs, Aggregation::Micro);
        let tp: u64 = cs.iter().map(|c| c.tp).sum();
        let fp: u64 = cs.iter().map(|c| c.fp).sum();
        let fn_: u64 = cs.iter().map(|c| c.fn_).sum();
        let want = if 2 * tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((r.dice - want).abs() < TOL);
        prop_assert_eq!(r.n_images, cs.len());
        prop_assert_eq!(r.n_pixels, cs.iter().map(|c| c.total()).sum::<u64>());
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let gt = SegMask::from_fn(8, 8, |x, y| x < 4 && y < 4);
    let perfect = metrics_from_counts(&confusion(&gt, &gt).unwrap());
    assert_eq!((perfect.precision, perfect.recall, perfect.dice), (1.0, 1.0, 1.0));
    let empty = metrics_from_counts(&confusion(&SegMask::zeros(8, 8), &gt).unwrap());
    assert_eq!((empty.precision, empty.recall, empty.dice), (0.0, 0.0, 0.0));
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(confusion(&SegMask::zeros(4, 5), &SegMask::zeros(5, 4)).is_err());
}

#[test]
fn macro_averages_per_image_scores() {
    let a = ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 3 };
    let b = ConfusionCounts { tp: 0, fp: 1, fn_: 1, tn: 2 };
    let r = MetricsReport::from_counts("d", "m", &[a, b], Aggregation::Macro);
    assert!((r.dice - 0.5).abs() < TOL);
    let micro = MetricsReport::from_counts("d", "m", &[a, b], Aggregation::Micro);
    assert!((micro.dice - 0.5).abs() < TOL);
    let c = ConfusionCounts { tp: 9, fp: 1, fn_: 0, tn: 0 };
    let macro_ = MetricsReport::from_counts("d", "m", &[b, c], Aggregation::Macro);
    let micro = MetricsReport::from_counts("d", "m", &[b, c], Aggregation::Micro);
    assert!((macro_.dice - 18.0 / 19.0 / 2.0).abs() < TOL);
    assert!((micro.dice - 18.0 / 21.0).abs() < TOL);
}

#[test]
fn sample_std_uses_n_minus_one() {
    let (m, s) = mean_and_sample_std(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m - 2.5).abs() < TOL);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < TOL);
}

#[test]
fn reports_survive_a_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let reports = vec![
        MetricsReport::from_counts("HuBMAP", "SegFormer-b1 (UniMatch)", &[ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 10 }], Aggregation::Micro),
        MetricsReport::from_counts("KPMP, test", "x", &[], Aggregation::Macro),
    ];
    write_reports_csv(&path, &reports).unwrap();
    assert_eq!(read_reports_csv(&path).unwrap(), reports);
}
