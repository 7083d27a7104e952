mod common;

use std::collections::BTreeSet;

use common::{hand_counted_all, hand_counted_sensitive, naive_psnr, naive_ssim, random_pair};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vanish_core::detector::{apply_threshold, suppress, Detection};
use vanish_core::geometry::BoxGeometry;
use vanish_core::image::ImageTensor;
use vanish_core::metrics::{match_boxes, psnr, ssim, MatchCriterion, SsimParams};
use vanish_core::scene::Annotation;

#[test]
fn psnr_and_ssim_match_naive_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let (a, b) = random_pair(&mut rng);
        assert!((psnr(&a, &b, 1.0).unwrap() - naive_psnr(&a, &b)).abs() < 1e-9);
        assert!((ssim(&a, &b, &SsimParams::default()).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn constant_shift_psnr() {
    let a = ImageTensor::filled(32, 32, 0.25).unwrap();
    let b = ImageTensor::filled(32, 32, 0.75).unwrap();
    assert!((psnr(&a, &b, 1.0).unwrap() - 6.0206).abs() < 1e-3);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert!((ssim(&a, &a, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn hide_all_rates_match_hand_counts() {
    let (r, p) = hand_counted_all();
    assert_eq!(
        (r.numerator, r.denominator, p.numerator, p.denominator),
        (3, 4, 1, 6)
    );
    assert_eq!(r.value, 0.75);
}

#[test]
fn hide_sensitive_rates_match_hand_counts() {
    let (r, p) = hand_counted_sensitive();
    assert_eq!(
        (r.numerator, r.denominator, p.numerator, p.denominator),
        (2, 4, 2, 5)
    );
    assert_eq!(r.flag, None);
}

/// Largest matching over all assignments, by exhaustive search.
fn max_matching(q: &[Vec<bool>], d: usize, used: &mut Vec<bool>) -> usize {
    if d == q.len() {
        return 0;
    }
    let mut best = max_matching(q, d + 1, used);
    for g in 0..used.len() {
        if q[d][g] && !used[g] {
            used[g] = true;
            best = best.max(1 + max_matching(q, d + 1, used));
            used[g] = false;
        }
    }
    best
}

#[test]
fn greedy_matching_can_fall_short_of_the_maximum() {
    // the higher-scored detection takes the truth the other one needed
    let dets = vec![
        Detection {
            geometry: BoxGeometry::new(0.0, 0.0, 10.0, 12.0).unwrap(),
            category_index: 1,
            score: 0.9,
        },
        Detection {
            geometry: BoxGeometry::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            category_index: 1,
            score: 0.8,
        },
    ];
    let truth = vec![
        Annotation {
            geometry: BoxGeometry::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            category_index: 1,
        },
        Annotation {
            geometry: BoxGeometry::new(0.0, 2.0, 10.0, 17.0).unwrap(),
            category_index: 1,
        },
    ];
    let crit = MatchCriterion::default();
    let q: Vec<Vec<bool>> = dets
        .iter()
        .map(|d| {
            truth
                .iter()
                .map(|g| d.geometry.iou(&g.geometry) >= 0.5)
                .collect()
        })
        .collect();
    assert_eq!(q, vec![vec![true, true], vec![true, false]]);
    assert_eq!(match_boxes(&dets, &truth, &crit), vec![(0, 0)]);
    assert_eq!(max_matching(&q, 0, &mut vec![false; 2]), 2);
}

fn detection_strategy() -> impl Strategy<Value = Detection> {
    (
        0.0f64..60.0,
        0.0f64..60.0,
        4.0f64..30.0,
        4.0f64..30.0,
        1usize..4,
        0.01f64..1.0,
    )
        .prop_map(|(x, y, w, h, c, s)| Detection {
            geometry: BoxGeometry::new(x, y, x + w, y + h).unwrap(),
            category_index: c,
            score: s,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matching_is_one_to_one_and_maximal(
        dets in prop::collection::vec(detection_strategy(), 0..8),
        truth in prop::collection::vec(detection_strategy(), 0..8),
        any_category in any::<bool>(),
    ) {
        let truth: Vec<Annotation> = truth
            .iter()
            .map(|d| Annotation { geometry: d.geometry, category_index: d.category_index })
            .collect();
        let crit = MatchCriterion { iou_threshold: 0.5, require_category_match: !any_category };
        let pairs = match_boxes(&dets, &truth, &crit);
        let qualifies = |d: usize, g: usize| {
            dets[d].geometry.iou(&truth[g].geometry) >= 0.5
                && (any_category || dets[d].category_index == truth[g].category_index)
        };
        let used_d: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let used_g: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(used_d.len(), pairs.len());
        prop_assert_eq!(used_g.len(), pairs.len());
        for &(d, g) in &pairs {
            prop_assert!(qualifies(d, g));
        }
        // nothing left that could still be paired
        for d in (0..dets.len()).filter(|d| !used_d.contains(d)) {
            for g in (0..truth.len()).filter(|g| !used_g.contains(g)) {
                prop_assert!(!qualifies(d, g));
            }
        }
    }

    #[test]
    fn greedy_equals_exhaustive_without_contested_detections(
        dets in prop::collection::vec(detection_strategy(), 0..=5),
        truth in prop::collection::vec(detection_strategy(), 0..=5),
    ) {
        let truth: Vec<Annotation> = truth
            .iter()
            .map(|d| Annotation { geometry: d.geometry, category_index: d.category_index })
            .collect();
        let crit = MatchCriterion::default();
        let q: Vec<Vec<bool>> = dets
            .iter()
            .map(|d| truth.iter().map(|g| d.category_index == g.category_index && d.geometry.iou(&g.geometry) >= 0.5).collect())
            .collect();
        let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        prop_assume!(scores.len() == dets.len());
        prop_assume!(q.iter().all(|row| row.iter().filter(|&&b| b).count() <= 1));
        let greedy = match_boxes(&dets, &truth, &crit).len();
        prop_assert_eq!(greedy, max_matching(&q, 0, &mut vec![false; truth.len()]));
    }

    #[test]
    fn raising_the_threshold_only_drops_detections(
        cands in prop::collection::vec(detection_strategy(), 0..24),
        lo in 0.05f64..0.5,
        delta in 0.0f64..0.4,
    ) {
        let hi = lo + delta;
        let at_lo = suppress(&apply_threshold(&cands, lo));
        let at_hi = suppress(&apply_threshold(&cands, hi));
        let restricted: Vec<Detection> = at_lo.iter().filter(|d| d.score >= hi).copied().collect();
        prop_assert_eq!(&at_hi, &restricted);
        prop_assert!(at_hi.len() <= at_lo.len());
    }
}
