//! mAP evaluator and NMS against independent brute-force references.

use gaf_core::detector::{evaluate_map, ground_truth_results, iou, nms, DetectionResult, Proposal};
use gaf_core::synth::{mask_from_intervals, ActionInterval, FeatureSequence};
use gaf_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

fn seq(id: usize, t: usize, intervals: Vec<ActionInterval>) -> FeatureSequence {
    FeatureSequence {
        seq_id: format!("s{id}"),
        features: Tensor::zeros(&[t, 1]),
        fg_mask: mask_from_intervals(t, &intervals),
        intervals,
    }
}

/// Up to three sequences of length 24 with up to three non-overlapping
/// intervals each, and noisy predictions with distinct scores.
fn tiny_instance(rng: &mut ChaCha8Rng, k: usize) -> (Vec<FeatureSequence>, Vec<DetectionResult>) {
    let n_seq = rng.random_range(1..=3);
    let mut truth = Vec::new();
    let mut results = Vec::new();
    for s in 0..n_seq {
        let mut ivs = Vec::new();
        let mut cursor = 0;
        for _ in 0..rng.random_range(0..=3) {
            let start = cursor + rng.random_range(0..4);
            let end = start + rng.random_range(2..6);
            if end > 24 {
                break;
            }
            ivs.push(ActionInterval {
                start,
                end,
                class_id: rng.random_range(1..=k),
            });
            cursor = end;
        }
        let proposals = (0..rng.random_range(0..6))
            .map(|_| {
                let start = rng.random_range(0.0..20.0);
                Proposal {
                    start,
                    end: start + rng.random_range(0.5..6.0),
                    class_id: rng.random_range(1..=k),
                    score: rng.random_range(0.0..1.0),
                }
            })
            .collect();
        truth.push(seq(s, 24, ivs));
        results.push(DetectionResult {
            seq_id: format!("s{s}"),
            proposals,
        });
    }
    (truth, results)
}

/// Greedy matching in score order, then AP as the mean over ground-truth
/// instances of the best precision achievable at or beyond each recall hit.
fn brute_force_map(truth: &[FeatureSequence], results: &[DetectionResult], thr: f64) -> f64 {
    let mut aps = Vec::new();
    let classes: std::collections::BTreeSet<usize> =
        truth.iter().flat_map(|s| s.intervals.iter().map(|iv| iv.class_id)).collect();
    for c in classes {
        let gts: Vec<(usize, &ActionInterval)> = truth
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.intervals.iter().filter(|iv| iv.class_id == c).map(move |iv| (i, iv)))
            .collect();
        let mut preds: Vec<(usize, &Proposal)> = results
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.proposals.iter().filter(|p| p.class_id == c).map(move |p| (i, p)))
            .collect();
        preds.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());

        let mut used = vec![false; gts.len()];
        let mut tp = Vec::new();
        for (si, p) in &preds {
            let mut best: Option<(usize, f64)> = None;
            for (g, (gs, iv)) in gts.iter().enumerate() {
                if gs != si || used[g] {
                    continue;
                }
                let o = iou((p.start, p.end), (iv.start as f64, iv.end as f64));
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            let hit = matches!(best, Some((_, o)) if o >= thr);
            if hit {
                used[best.unwrap().0] = true;
            }
            tp.push(hit);
        }
        let prec: Vec<f64> = (0..tp.len())
            .map(|i| tp[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
            .collect();
        let ap: f64 = (0..tp.len())
            .filter(|&i| tp[i])
            .map(|i| prec[i..].iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / gts.len() as f64;
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[test]
fn matches_brute_force_on_100_tiny_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let (truth, results) = tiny_instance(&mut rng, 3);
        let report = evaluate_map(&results, &truth, &THRESHOLDS).unwrap();
        for (i, &thr) in THRESHOLDS.iter().enumerate() {
            let want = brute_force_map(&truth, &results, thr);
            assert!(
                (report.map[i] - want).abs() < 1e-9,
                "case {case} thr {thr}: got {} want {want}",
                report.map[i]
            );
        }
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut truth, _) = tiny_instance(&mut rng, 2);
    truth[0] = seq(0, 24, vec![ActionInterval { start: 2, end: 9, class_id: 1 }]);
    let perfect = evaluate_map(&ground_truth_results(&truth), &truth, &THRESHOLDS).unwrap();
    assert!(perfect.map.iter().all(|&m| m == 1.0));
    assert_eq!(perfect.avg_map, 1.0);

    let empty: Vec<DetectionResult> = truth
        .iter()
        .map(|s| DetectionResult {
            seq_id: s.seq_id.clone(),
            proposals: vec![],
        })
        .collect();
    let none = evaluate_map(&empty, &truth, &THRESHOLDS).unwrap();
    assert_eq!(none.avg_map, 0.0);
}

/// Keep-set of greedy NMS computed by checking each proposal against every
/// higher-scored survivor, written without reference to the library.
fn brute_force_nms(props: &[Proposal], thr: f64) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| props[b].score.partial_cmp(&props[a].score).unwrap());
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let p = &props[i];
        let clash = keep.iter().any(|&j| {
            let q = &props[j];
            let inter = (p.end.min(q.end) - p.start.max(q.start)).max(0.0);
            let union = (p.end - p.start) + (q.end - q.start) - inter;
            q.class_id == p.class_id && inter / union > thr
        });
        if !clash {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| props[i]).collect()
}

fn proposal() -> impl Strategy<Value = Proposal> {
    (0.0..50.0f64, 0.5..10.0f64, 1usize..=3, 0.0..1.0f64).prop_map(|(start, len, class_id, score)| Proposal {
        start,
        end: start + len,
        class_id,
        score,
    })
}

fn instance() -> impl Strategy<Value = (Vec<FeatureSequence>, Vec<DetectionResult>)> {
    any::<u64>().prop_map(|s| tiny_instance(&mut ChaCha8Rng::seed_from_u64(s), 3))
}

proptest! {
    #[test]
    fn nms_matches_keep_set_oracle(props in prop::collection::vec(proposal(), 0..20), thr in 0.1..0.9f64) {
        prop_assert_eq!(nms(props.clone(), thr), brute_force_nms(&props, thr));
    }

    #[test]
    fn nms_survivors_are_a_non_overlapping_subset(props in prop::collection::vec(proposal(), 0..20), thr in 0.1..0.9f64) {
        let kept = nms(props.clone(), thr);
        for k in &kept {
            prop_assert!(props.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(iou((a.start, a.end), (b.start, b.end)) <= thr);
                }
            }
        }
    }

    #[test]
    fn evaluation_ignores_input_order((truth, results) in instance(), rot in 0usize..5) {
        let base = evaluate_map(&results, &truth, &THRESHOLDS).unwrap();
        let mut shuffled = results.clone();
        shuffled.reverse();
        for r in &mut shuffled {
            let n = r.proposals.len().max(1);
            r.proposals.rotate_left(rot % n);
        }
        let again = evaluate_map(&shuffled, &truth, &THRESHOLDS).unwrap();
        prop_assert_eq!(base.map, again.map);
    }

    #[test]
    fn map_is_monotone_in_iou_threshold((truth, results) in instance()) {
        let report = evaluate_map(&results, &truth, &THRESHOLDS).unwrap();
        for w in report.map.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
        for &m in &report.map {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
