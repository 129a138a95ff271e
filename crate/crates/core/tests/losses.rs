use candle_core::{DType, Device, Tensor};
use glomseg::ssl::{
    fixmatch_unsup_loss, make_pseudo_labels, masked_cross_entropy, pixel_cross_entropy, soft_dice_loss,
    supervised_loss, unimatch_unsup_loss,
};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn logits(v: &[f64], b: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (b, c, h, w), &Device::Cpu).unwrap()
}

fn targets(v: &[u32], b: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (b, h, w), &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

// -log softmax at the target class, written out per pixel
fn reference_ce(v: &[f64], t: &[u32], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..b {
        for p in 0..hw {
            let z: Vec<f64> = (0..c).map(|k| v[(n * c + k) * hw + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.push(lse - z[t[n * hw + p] as usize]);
        }
    }
    out
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<u32>, Vec<f64>)> {
    (proptest::collection::vec(-6.0f64..6.0, 2 * 3 * 4 * 4), proptest::collection::vec(0u32..3, 2 * 4 * 4), proptest::collection::vec(0.0f64..1.0, 2 * 4 * 4))
}

proptest! {
    #[test]
    fn cross_entropy_matches_reference((v, t, _) in case()) {
        let got: Vec<f64> = pixel_cross_entropy(&logits(&v, 2, 3, 4, 4), &targets(&t, 2, 4, 4))
            .unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = reference_ce(&v, &t, 2, 3, 16);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < TOL);
        }
        let mean = scalar(&supervised_loss(&logits(&v, 2, 3, 4, 4), &targets(&t, 2, 4, 4)).unwrap());
        prop_assert!((mean - want.iter().sum::<f64>() / want.len() as f64).abs() < TOL);
    }

    #[test]
    fn masked_cross_entropy_averages_kept_pixels((v, t, u) in case()) {
        let keep: Vec<f64> = u.iter().map(|x| if *x > 0.5 { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(keep.clone(), (2, 4, 4), &Device::Cpu).unwrap();
        let got = scalar(&masked_cross_entropy(&logits(&v, 2, 3, 4, 4), &targets(&t, 2, 4, 4), &mask).unwrap());
        let ce = reference_ce(&v, &t, 2, 3, 16);
        let n: f64 = keep.iter().sum();
        let want = if n == 0.0 { 0.0 } else { ce.iter().zip(&keep).map(|(a, k)| a * k).sum::<f64>() / n };
        prop_assert!((got - want).abs() < TOL);
    }

    #[test]
    fn pseudo_labels_are_argmax_above_threshold((v, _, _) in case(), tau in 0.34f64..1.0) {
        let z = logits(&v, 2, 3, 4, 4);
        let p = make_pseudo_labels(&z, tau).unwrap();
        let labels: Vec<u32> = p.labels.flatten_all().unwrap().to_vec1().unwrap();
        let conf: Vec<f64> = p.confidence_mask.flatten_all().unwrap().to_vec1().unwrap();
        for n in 0..2 {
            for px in 0..16 {
                let zs: Vec<f64> = (0..3).map(|k| v[(n * 3 + k) * 16 + px]).collect();
                let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = zs.iter().map(|x| (x - m).exp()).sum();
                let arg = (0..3).max_by(|&a, &b| zs[a].partial_cmp(&zs[b]).unwrap()).unwrap();
                prop_assert_eq!(labels[n * 16 + px], arg as u32);
                let pmax = 1.0 / s;
                // stay clear of the threshold boundary
                if (pmax - tau).abs() > 1e-9 {
                    prop_assert_eq!(conf[n * 16 + px], if pmax >= tau { 1.0 } else { 0.0 });
                }
            }
        }
        let r = p.retention().unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn soft_dice_lies_in_unit_interval((v, t, _) in case()) {
        let t2: Vec<u32> = t.iter().map(|x| x % 2).collect();
        let v2: Vec<f64> = v[..2 * 2 * 16].to_vec();
        let d = scalar(&soft_dice_loss(&logits(&v2, 2, 2, 4, 4), &targets(&t2, 2, 4, 4)).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn consistency_losses_vanish_when_views_agree() {
    let v: Vec<f64> = (0..2 * 2 * 16).map(|i| if (i / 16) % 2 == 0 { 8.0 } else { -8.0 }).collect();
    let z = logits(&v, 2, 2, 4, 4);
    let fm = scalar(&fixmatch_unsup_loss(&z, &z, 0.95).unwrap());
    let um = scalar(&unimatch_unsup_loss(&z, &z, &z, &z, 0.95, 0.5).unwrap());
    let ce = (1.0 + (-16.0f64).exp()).ln();
    assert!((fm - ce).abs() < TOL);
    assert!((um - 1.5 * ce).abs() < TOL);
}

#[test]
fn no_confident_pixel_means_zero_loss() {
    let z = logits(&[0.0; 2 * 2 * 16], 2, 2, 4, 4);
    let strong = logits(&(0..64).map(|i| i as f64 / 10.0).collect::<Vec<_>>(), 2, 2, 4, 4);
    assert_eq!(scalar(&fixmatch_unsup_loss(&z, &strong, 0.95).unwrap()), 0.0);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let z = logits(&[0.0; 32], 1, 2, 4, 4);
    assert!(supervised_loss(&z, &targets(&[0; 12], 1, 3, 4)).is_err());
    let other = logits(&[0.0; 24], 1, 2, 3, 4);
    assert!(fixmatch_unsup_loss(&z, &other, 0.9).is_err());
    assert!(make_pseudo_labels(&z, 0.0).is_err());
}
