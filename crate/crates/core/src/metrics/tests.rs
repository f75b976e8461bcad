use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// Metrics straight from pixel lists, without a confusion matrix.
fn pixel_oracle(pred: &[u8], gt: &[u8], classes: usize, macro_avg: bool) -> [f64; 7] {
    let n = gt.len() as f64;
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64;
    let mut stats = Vec::new();
    for k in 0..classes as u8 {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == k, g == k) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        if tp + fneg > 0.0 {
            stats.push((tp, fp, fneg));
        }
    }
    let m = stats.len() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let mut out = [0.0; 7];
    out[0] = correct / n;
    for &(tp, fp, fneg) in &stats {
        let rec = tp / (tp + fneg);
        let pre = div(tp, tp + fp);
        let iou = tp / (tp + fp + fneg);
        let f1 = div(2.0 * pre * rec, pre + rec);
        let freq = (tp + fneg) / n;
        let wt = if macro_avg { 1.0 / m } else { freq };
        out[1] += rec / m;
        out[2] += wt * pre;
        out[3] += wt * rec;
        out[4] += f1 / m;
        out[5] += iou / m;
        out[6] += freq * iou;
    }
    out.map(|x| 100.0 * x)
}

fn as_array(r: &SegReport) -> [f64; 7] {
    [r.acc, r.macc, r.pre, r.rec, r.mfsc, r.miou, r.fwiou]
}

#[test]
fn identical_labels_give_a_diagonal() {
    let gt = [0u8, 1, 2, 2, 1, 0, 3];
    let cm = confusion(&gt, &gt, 4, None).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let expect = if i == j { gt.iter().filter(|&&g| g as usize == i).count() as u64 } else { 0 };
            assert_eq!(cm.get(i, j), expect);
        }
    }
    let r = seg_metrics(&cm, Averaging::Frequency).unwrap();
    assert!(as_array(&r).iter().all(|&x| close(x, 100.0)));
}

#[test]
fn all_wrong_binary_is_anti_diagonal() {
    let gt = [0u8, 0, 1, 1, 1];
    let pred: Vec<u8> = gt.iter().map(|g| 1 - g).collect();
    let cm = confusion(&pred, &gt, 2, None).unwrap();
    assert_eq!(cm.counts, vec![0, 2, 3, 0]);
}

#[test]
fn two_class_example() {
    let cm = ConfusionMatrix { classes: 2, counts: vec![3, 1, 1, 3] };
    let r = seg_metrics(&cm, Averaging::Frequency).unwrap();
    // IoU per class: 3 / (4 + 4 - 3).
    for (got, want) in as_array(&r).into_iter().zip([75.0, 75.0, 75.0, 75.0, 75.0, 60.0, 60.0]) {
        assert!(close(got, want), "{got} vs {want}");
    }
}

#[test]
fn absent_class_is_excluded() {
    // Class 2 never occurs in the ground truth and is never predicted.
    let gt = [0u8, 0, 1, 1];
    let cm = confusion(&gt, &gt, 3, None).unwrap();
    let r = seg_metrics(&cm, Averaging::Macro).unwrap();
    assert!(close(r.miou, 100.0) && close(r.macc, 100.0) && close(r.mfsc, 100.0));
    // A class that is only predicted still lowers the IoU of the true class.
    let cm = confusion(&[0, 0, 2, 1], &gt, 3, None).unwrap();
    let r = seg_metrics(&cm, Averaging::Frequency).unwrap();
    assert!(close(r.miou, 100.0 * (1.0 + 0.5) / 2.0));
}

#[test]
fn errors() {
    assert!(matches!(confusion(&[0, 3], &[0, 1], 3, None), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    assert!(matches!(confusion(&[0, 1], &[0, 4], 3, None), Err(Error::LabelOutOfRange { label: 4, .. })));
    // Ignored pixels are not range-checked.
    assert!(confusion(&[0, 9], &[0, 9], 3, Some(&[false, true])).is_ok());
    assert!(confusion(&[0], &[0, 1], 3, None).is_err());
    assert!(seg_metrics(&ConfusionMatrix::new(3), Averaging::Frequency).is_err());
    assert!(stereo_metrics(&[1.0], &[1.0], &[false]).is_err());
    assert!(matches!(stereo_metrics(&[f32::NAN], &[1.0], &[true]), Err(Error::NonFinite(_))));
}

#[test]
fn confusion_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let c = rng.random_range(2..6);
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..c) as u8).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..c) as u8).collect();
        let ignore: Vec<bool> = (0..64).map(|_| rng.random_bool(0.2)).collect();
        let cm = confusion(&pred, &gt, c, Some(&ignore)).unwrap();
        for i in 0..c {
            for j in 0..c {
                let mut n = 0;
                for p in 0..64 {
                    if !ignore[p] && gt[p] as usize == i && pred[p] as usize == j {
                        n += 1;
                    }
                }
                assert_eq!(cm.get(i, j), n);
            }
        }
        assert_eq!(cm.total(), ignore.iter().filter(|&&x| !x).count() as u64);
    }
}

#[test]
fn seg_metrics_match_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let c = rng.random_range(2..7);
        let n = rng.random_range(1..80);
        let gt: Vec<u8> = (0..n).map(|_| rng.random_range(0..c) as u8).collect();
        // Bias predictions toward the truth so metrics are spread out.
        let pred: Vec<u8> =
            gt.iter().map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..c) as u8 }).collect();
        let cm = confusion(&pred, &gt, c, None).unwrap();
        for (avg, macro_avg) in [(Averaging::Frequency, false), (Averaging::Macro, true)] {
            let got = as_array(&seg_metrics(&cm, avg).unwrap());
            let want = pixel_oracle(&pred, &gt, c, macro_avg);
            for (g, w) in got.iter().zip(&want) {
                assert!(close(*g, *w), "{got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn stereo_examples() {
    let gt = [1.0f32, 5.0, 9.0, 0.0];
    let r = stereo_metrics(&gt, &gt, &[true; 4]).unwrap();
    assert_eq!((r.epe, r.pep1, r.pep3), (0.0, 0.0, 0.0));
    let pred: Vec<f32> = gt.iter().map(|g| g + 2.0).collect();
    let r = stereo_metrics(&pred, &gt, &[true; 4]).unwrap();
    assert_eq!((r.epe, r.pep1, r.pep3), (2.0, 100.0, 0.0));
}

#[test]
fn stereo_metrics_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let gt: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let pred: Vec<f32> = gt.iter().map(|g| g + rng.random_range(-5.0..5.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        valid[0] = true;
        let r = stereo_metrics(&pred, &gt, &valid).unwrap();
        let (mut sum, mut o1, mut o3, mut cnt) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if valid[i] {
                let e = (pred[i] as f64 - gt[i] as f64).abs();
                sum += e;
                cnt += 1.0;
                if e > 1.0 {
                    o1 += 1.0;
                }
                if e > 3.0 {
                    o3 += 1.0;
                }
            }
        }
        assert!(close(r.epe, sum / cnt));
        assert!(close(r.pep1, 100.0 * o1 / cnt));
        assert!(close(r.pep3, 100.0 * o3 / cnt));
    }
}

#[test]
fn argmax_picks_first_maximum() {
    // [C=3, 1, 2]
    let data = [0.1f32, 0.5, 0.7, 0.5, 0.2, 0.5];
    assert_eq!(argmax_labels(&data, 3), vec![1, 0]);
}

#[test]
fn reports_render_as_key_value_lines() {
    let cm = ConfusionMatrix { classes: 2, counts: vec![3, 1, 1, 3] };
    let text = seg_metrics(&cm, Averaging::Frequency).unwrap().to_string();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().any(|l| l.starts_with("miou") && l.trim_end().ends_with("60.000")));
}

fn labels(c: usize, n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (proptest::collection::vec(0..c as u8, n), proptest::collection::vec(0..c as u8, n))
}

proptest! {
    #[test]
    fn relabeling_is_invariant((pred, gt) in labels(4, 40), perm in Just([0u8, 1, 2, 3]).prop_shuffle()) {
        let a = seg_metrics(&confusion(&pred, &gt, 4, None).unwrap(), Averaging::Frequency).unwrap();
        let rp: Vec<u8> = pred.iter().map(|&p| perm[p as usize]).collect();
        let rg: Vec<u8> = gt.iter().map(|&g| perm[g as usize]).collect();
        let b = seg_metrics(&confusion(&rp, &rg, 4, None).unwrap(), Averaging::Frequency).unwrap();
        for (x, y) in as_array(&a).iter().zip(as_array(&b).iter()) {
            prop_assert!(close(*x, *y));
        }
    }

    #[test]
    fn merging_equals_union((p1, g1) in labels(3, 30), (p2, g2) in labels(3, 20)) {
        let mut cm = confusion(&p1, &g1, 3, None).unwrap();
        cm.merge(&confusion(&p2, &g2, 3, None).unwrap()).unwrap();
        let pu: Vec<u8> = p1.iter().chain(&p2).copied().collect();
        let gu: Vec<u8> = g1.iter().chain(&g2).copied().collect();
        let union = confusion(&pu, &gu, 3, None).unwrap();
        prop_assert_eq!(&cm, &union);
        prop_assert_eq!(seg_metrics(&cm, Averaging::Macro).unwrap(), seg_metrics(&union, Averaging::Macro).unwrap());
    }

    #[test]
    fn seg_metrics_are_percentages((pred, gt) in labels(5, 30)) {
        let r = seg_metrics(&confusion(&pred, &gt, 5, None).unwrap(), Averaging::Frequency).unwrap();
        prop_assert!(as_array(&r).iter().all(|&x| (0.0..=100.0 + 1e-9).contains(&x)));
    }

    #[test]
    fn pep1_dominates_pep3(errs in proptest::collection::vec(-10.0f32..10.0, 1..40)) {
        let gt = vec![0.0f32; errs.len()];
        let r = stereo_metrics(&errs, &gt, &vec![true; errs.len()]).unwrap();
        prop_assert!(r.pep1 >= r.pep3 && r.epe >= 0.0);
    }

    #[test]
    fn stereo_accumulation_is_additive(a in proptest::collection::vec(0.0f32..10.0, 1..20), b in proptest::collection::vec(0.0f32..10.0, 1..20)) {
        let mut x = StereoAccumulator::default();
        x.add(&a, &vec![4.0; a.len()], &vec![true; a.len()]).unwrap();
        let mut y = StereoAccumulator::default();
        y.add(&b, &vec![4.0; b.len()], &vec![true; b.len()]).unwrap();
        x.merge(&y);
        let all: Vec<f32> = a.iter().chain(&b).copied().collect();
        let u = stereo_metrics(&all, &vec![4.0; all.len()], &vec![true; all.len()]).unwrap();
        let m = x.report().unwrap();
        prop_assert!(close(m.epe, u.epe) && m.pep1 == u.pep1 && m.pep3 == u.pep3);
    }
}
