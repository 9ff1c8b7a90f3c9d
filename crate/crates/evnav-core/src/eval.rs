//! Detection-quality metrics: greedy matching, average precision, confusion counts.
//!
//! Detections are matched to ground-truth boxes one event window at a time
//! (a detection never matches a box from another window), then pooled into a
//! single confidence-ranked list from which the precision/recall curve and
//! average precision are derived.

use serde::{Deserialize, Serialize};

use crate::detect::{iou, BoundingBox};
use crate::scalar::Scalar;

/// Detections and ground-truth boxes for one event window.
#[derive(Debug, Clone, Default)]
pub struct WindowBoxes<T> {
    pub detections: Vec<BoundingBox<T>>,
    pub ground_truths: Vec<BoundingBox<T>>,
}

/// All windows of one recorded sequence, tagged with its dataset index.
#[derive(Debug, Clone)]
pub struct SequenceBoxes<T> {
    pub index: u32,
    pub windows: Vec<WindowBoxes<T>>,
}

/// One matched detection: its confidence, whether it hit an unmatched
/// ground truth, and which one (as `(window, gt_index_within_window)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionFlag<T> {
    pub confidence: T,
    pub is_tp: bool,
    pub matched_gt: Option<(usize, usize)>,
}

/// Match outcome over a set of windows: per-detection flags sorted by
/// descending confidence, plus the total ground-truth count.
#[derive(Debug, Clone)]
pub struct MatchResult<T> {
    pub flags: Vec<DetectionFlag<T>>,
    pub n_gt: usize,
}

/// Greedily matches detections to ground truths window by window.
///
/// Within a window, detections are visited in descending confidence order
/// (ties broken by insertion order); each claims the highest-IoU ground truth
/// not yet claimed, provided the IoU reaches `iou_threshold`. Every ground
/// truth is matched at most once. The returned flags are sorted by descending
/// confidence across all windows.
pub fn match_detections<T: Scalar>(windows: &[WindowBoxes<T>], iou_threshold: T) -> MatchResult<T> {
    let mut flags = Vec::new();
    let mut n_gt = 0usize;
    for (w, win) in windows.iter().enumerate() {
        n_gt += win.ground_truths.len();
        let mut order: Vec<usize> = (0..win.detections.len()).collect();
        order.sort_by(|&a, &b| {
            win.detections[b]
                .conf
                .partial_cmp(&win.detections[a].conf)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut claimed = vec![false; win.ground_truths.len()];
        for di in order {
            let det = &win.detections[di];
            let mut best: Option<(usize, T)> = None;
            for (gi, gt) in win.ground_truths.iter().enumerate() {
                if claimed[gi] {
                    continue;
                }
                let v = iou(det, gt);
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= iou_threshold => {
                    claimed[gi] = true;
                    flags.push(DetectionFlag {
                        confidence: det.conf,
                        is_tp: true,
                        matched_gt: Some((w, gi)),
                    });
                }
                _ => flags.push(DetectionFlag {
                    confidence: det.conf,
                    is_tp: false,
                    matched_gt: None,
                }),
            }
        }
    }
    flags.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    MatchResult { flags, n_gt }
}

/// Precision/recall at one detection rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint<T> {
    pub recall: T,
    pub precision: T,
}

/// One unique recall level k/n_gt: the precision at the rank that first
/// attains it, and the interpolated precision (maximum precision at any
/// recall ≥ level). A level no rank attains carries precision 0 in both
/// senses — a missed ground truth costs its share of the average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallLevel<T> {
    pub recall: T,
    pub precision: T,
    pub interpolated: T,
}

/// Precision/recall curve: one point per detection rank plus the unique
/// recall levels (one per ground truth). Recall is non-decreasing with rank.
#[derive(Debug, Clone)]
pub struct PrCurve<T> {
    pub points: Vec<PrPoint<T>>,
    pub levels: Vec<RecallLevel<T>>,
}

/// Builds the precision/recall curve from a match result.
///
/// With n_gt ground truths the unique recall levels are k/n_gt for
/// k = 1..=n_gt, and the k-th level is first attained at the rank of the k-th
/// true positive (each TP strictly increases recall). Interpolated precision
/// at a level is the maximum precision over all ranks at recall ≥ level; an
/// unattained level (fewer than k true positives) gets 0.
pub fn pr_curve<T: Scalar>(m: &MatchResult<T>) -> PrCurve<T> {
    let n = m.flags.len();
    let gt = T::from_usize(m.n_gt);
    let mut points = Vec::with_capacity(n);
    let mut tp_ranks = Vec::new();
    let mut tp = 0usize;
    for (rank0, f) in m.flags.iter().enumerate() {
        if f.is_tp {
            tp += 1;
            tp_ranks.push(rank0);
        }
        let recall = if m.n_gt == 0 {
            T::zero()
        } else {
            T::from_usize(tp) / gt
        };
        let precision = T::from_usize(tp) / T::from_usize(rank0 + 1);
        points.push(PrPoint { recall, precision });
    }
    // Suffix maximum of precision: interpolated precision at rank i.
    let mut suffix_max = vec![T::zero(); n];
    let mut running = T::zero();
    for i in (0..n).rev() {
        if points[i].precision > running {
            running = points[i].precision;
        }
        suffix_max[i] = running;
    }
    let mut levels = Vec::with_capacity(m.n_gt);
    for k in 1..=m.n_gt {
        let recall = T::from_usize(k) / gt;
        match tp_ranks.get(k - 1) {
            Some(&i) => levels.push(RecallLevel {
                recall,
                precision: points[i].precision,
                interpolated: suffix_max[i],
            }),
            None => levels.push(RecallLevel {
                recall,
                precision: T::zero(),
                interpolated: T::zero(),
            }),
        }
    }
    PrCurve { points, levels }
}

/// Which precision is averaged over the unique recall levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApVariant {
    /// Maximum precision at any recall ≥ the level (the default).
    Interpolated,
    /// Precision at the rank that first attains the level.
    Raw,
}

impl ApVariant {
    pub fn name(self) -> &'static str {
        match self {
            ApVariant::Interpolated => "interpolated",
            ApVariant::Raw => "raw",
        }
    }
}

/// Average precision, or an explicit marker when there is nothing to match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApOutcome<T> {
    /// No ground truths exist; precision/recall is undefined, not zero.
    NoGroundTruth,
    /// Mean precision over the unique recall levels (0 when no detection
    /// matches despite ground truths existing).
    Value(T),
}

impl<T: Copy> ApOutcome<T> {
    pub fn value(self) -> Option<T> {
        match self {
            ApOutcome::NoGroundTruth => None,
            ApOutcome::Value(v) => Some(v),
        }
    }
}

/// Interpolated average precision (the default variant).
pub fn average_precision<T: Scalar>(m: &MatchResult<T>) -> ApOutcome<T> {
    average_precision_with(m, ApVariant::Interpolated)
}

/// Average precision under the chosen variant: the mean, over the unique
/// recall levels k/n_gt, of that level's precision. Unattained levels count
/// as 0, so with ground truths but no true positives the value is 0, and the
/// value is 1 exactly when every ground truth is matched by a detection
/// ranked above all false positives.
pub fn average_precision_with<T: Scalar>(m: &MatchResult<T>, variant: ApVariant) -> ApOutcome<T> {
    if m.n_gt == 0 {
        return ApOutcome::NoGroundTruth;
    }
    let curve = pr_curve(m);
    let mut sum = T::zero();
    for level in &curve.levels {
        sum += match variant {
            ApVariant::Interpolated => level.interpolated,
            ApVariant::Raw => level.precision,
        };
    }
    ApOutcome::Value(sum / T::from_usize(m.n_gt))
}

/// Counts (TP, FP) over detections with confidence ≥ `conf_threshold`.
pub fn confusion_counts<T: Scalar>(m: &MatchResult<T>, conf_threshold: T) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for f in &m.flags {
        if f.confidence >= conf_threshold {
            if f.is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// Per-sequence slice of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceEval {
    pub sequence_index: u32,
    /// `null` when the sequence has no ground truth boxes.
    pub ap: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub n_gt: u64,
}

/// Evaluation summary serialized as the report JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// `null` when no ground truth exists anywhere in the dataset.
    pub ap: Option<f64>,
    /// Names the precision variant averaged over recall levels.
    pub ap_variant: String,
    pub tp: u64,
    pub fp: u64,
    pub n_gt: u64,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
    pub per_sequence: Vec<SequenceEval>,
}

fn filter_by_conf<T: Scalar>(windows: &[WindowBoxes<T>], conf_threshold: T) -> Vec<WindowBoxes<T>> {
    windows
        .iter()
        .map(|w| WindowBoxes {
            detections: w
                .detections
                .iter()
                .filter(|d| d.conf >= conf_threshold)
                .cloned()
                .collect(),
            ground_truths: w.ground_truths.clone(),
        })
        .collect()
}

/// Evaluates detections against ground truth across whole sequences.
///
/// Detections below `conf_threshold` are dropped before matching, so the
/// reported AP, TP, and FP all describe the thresholded detector. The overall
/// numbers pool every window of every sequence into one ranked list; the
/// per-sequence breakdown repeats the computation on each sequence alone.
pub fn evaluate<T: Scalar>(
    sequences: &[SequenceBoxes<T>],
    iou_threshold: T,
    conf_threshold: T,
    variant: ApVariant,
) -> EvalReport {
    let mut per_sequence = Vec::with_capacity(sequences.len());
    let mut all_windows = Vec::new();
    for seq in sequences {
        let windows = filter_by_conf(&seq.windows, conf_threshold);
        let m = match_detections(&windows, iou_threshold);
        let (tp, fp) = confusion_counts(&m, conf_threshold);
        per_sequence.push(SequenceEval {
            sequence_index: seq.index,
            ap: average_precision_with(&m, variant)
                .value()
                .map(Scalar::to_f64),
            tp: tp as u64,
            fp: fp as u64,
            n_gt: m.n_gt as u64,
        });
        all_windows.extend(windows);
    }
    let m = match_detections(&all_windows, iou_threshold);
    let (tp, fp) = confusion_counts(&m, conf_threshold);
    EvalReport {
        ap: average_precision_with(&m, variant)
            .value()
            .map(Scalar::to_f64),
        ap_variant: variant.name().to_string(),
        tp: tp as u64,
        fp: fp as u64,
        n_gt: m.n_gt as u64,
        iou_threshold: iou_threshold.to_f64(),
        conf_threshold: conf_threshold.to_f64(),
        per_sequence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x: f64, y: f64, s: f64, conf: f64) -> BoundingBox<f64> {
        BoundingBox::from_corners(x, y, x + s, y + s, conf)
    }

    fn one_window(dets: Vec<BoundingBox<f64>>, gts: Vec<BoundingBox<f64>>) -> Vec<WindowBoxes<f64>> {
        vec![WindowBoxes {
            detections: dets,
            ground_truths: gts,
        }]
    }

    /// Builds a match result directly from ranked TP/FP flags, confidences
    /// descending from 1.0.
    fn ranked(flags: &[bool], n_gt: usize) -> MatchResult<f64> {
        MatchResult {
            flags: flags
                .iter()
                .enumerate()
                .map(|(i, &is_tp)| DetectionFlag {
                    confidence: 1.0 - 0.01 * i as f64,
                    is_tp,
                    matched_gt: None,
                })
                .collect(),
            n_gt,
        }
    }

    /// Literal AP definition: enumerate every rank prefix, then for each
    /// recall level k/n_gt scan all prefixes. Interpolated takes the maximum
    /// precision among prefixes with recall ≥ level; raw takes the precision
    /// of the first such prefix. A level no prefix reaches contributes 0.
    fn brute_force_ap(flags: &[bool], n_gt: usize, variant: ApVariant) -> f64 {
        assert!(n_gt > 0);
        let mut tp = 0usize;
        let mut prefix = Vec::new();
        for (i, &f) in flags.iter().enumerate() {
            if f {
                tp += 1;
            }
            prefix.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
        }
        let mut sum = 0.0;
        for k in 1..=n_gt {
            let level = k as f64 / n_gt as f64;
            sum += match variant {
                ApVariant::Raw => prefix
                    .iter()
                    .find(|&&(r, _)| r >= level)
                    .map_or(0.0, |&(_, p)| p),
                ApVariant::Interpolated => {
                    let mut best = 0.0f64;
                    for &(r, p) in &prefix {
                        if r >= level && p > best {
                            best = p;
                        }
                    }
                    best
                }
            };
        }
        sum / n_gt as f64
    }

    #[test]
    fn matching_hand_cases() {
        // Detections identical to ground truths: every detection is a TP.
        let gts = vec![bb(0.0, 0.0, 10.0, 1.0), bb(50.0, 50.0, 10.0, 1.0)];
        let m = match_detections(&one_window(gts.clone(), gts.clone()), 0.5);
        assert_eq!(m.n_gt, 2);
        assert!(m.flags.iter().all(|f| f.is_tp));
        let matched: Vec<_> = m.flags.iter().map(|f| f.matched_gt.unwrap()).collect();
        assert_eq!(matched.len(), 2);
        assert_ne!(matched[0], matched[1], "each ground truth matched at most once");

        // No ground truths: every detection is an FP.
        let m = match_detections(&one_window(gts.clone(), vec![]), 0.5);
        assert_eq!(m.n_gt, 0);
        assert!(m.flags.iter().all(|f| !f.is_tp));

        // Two detections over one ground truth: the higher-confidence one wins.
        let gt = bb(0.0, 0.0, 10.0, 1.0);
        let lo = bb(0.5, 0.0, 10.0, 0.6);
        let hi = bb(1.0, 0.0, 10.0, 0.9);
        let m = match_detections(&one_window(vec![lo, hi], vec![gt]), 0.5);
        assert_eq!(m.flags.len(), 2);
        assert_abs_diff_eq!(m.flags[0].confidence, 0.9);
        assert!(m.flags[0].is_tp);
        assert!(!m.flags[1].is_tp);
    }

    #[test]
    fn matching_stays_within_windows() {
        // The only overlapping ground truth lives in the other window, so the
        // detection must come out FP and that ground truth stays unmatched.
        let windows = vec![
            WindowBoxes {
                detections: vec![bb(0.0, 0.0, 10.0, 0.9)],
                ground_truths: vec![],
            },
            WindowBoxes {
                detections: vec![],
                ground_truths: vec![bb(0.0, 0.0, 10.0, 1.0)],
            },
        ];
        let m = match_detections(&windows, 0.5);
        assert_eq!(m.n_gt, 1);
        assert_eq!(m.flags.len(), 1);
        assert!(!m.flags[0].is_tp);
    }

    #[test]
    fn ap_hand_case() {
        // Ranked flags (TP, FP, TP) with 2 ground truths, built from real
        // boxes: recall levels {0.5, 1.0}, interpolated precisions {1.0, 2/3}.
        let gt1 = bb(0.0, 0.0, 10.0, 1.0);
        let gt2 = bb(100.0, 100.0, 10.0, 1.0);
        let dets = vec![
            bb(0.0, 0.0, 10.0, 0.9),    // TP on gt1
            bb(50.0, 50.0, 10.0, 0.8),  // overlaps nothing
            bb(100.0, 100.0, 10.0, 0.7), // TP on gt2
        ];
        let m = match_detections(&one_window(dets, vec![gt1, gt2]), 0.5);
        let tps: Vec<bool> = m.flags.iter().map(|f| f.is_tp).collect();
        assert_eq!(tps, [true, false, true]);

        let ap = average_precision(&m).value().unwrap();
        assert_abs_diff_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(ap, 0.8333, epsilon = 1e-4);

        assert_eq!(confusion_counts(&m, 0.0), (2, 1));
        assert_eq!(confusion_counts(&m, 0.75), (1, 1));
        assert_eq!(confusion_counts(&m, 1.01), (0, 0));
    }

    #[test]
    fn ap_trivial_cases() {
        // All TPs covering all ground truths → AP = 1.
        let m = ranked(&[true, true, true], 3);
        assert_abs_diff_eq!(average_precision(&m).value().unwrap(), 1.0);

        // Zero detections with ground truths present → AP = 0.
        let m = ranked(&[], 4);
        assert_abs_diff_eq!(average_precision(&m).value().unwrap(), 0.0);

        // Only false positives → AP = 0.
        let m = ranked(&[false, false], 4);
        assert_abs_diff_eq!(average_precision(&m).value().unwrap(), 0.0);

        // No ground truth at all → explicit marker, not a number.
        let m = ranked(&[false], 0);
        assert_eq!(average_precision(&m), ApOutcome::NoGroundTruth);
        assert_eq!(average_precision(&m).value(), None);
    }

    #[test]
    fn ap_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(701);
        for _ in 0..500 {
            let n = rng.gen_range(0..=20);
            let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let n_tp = flags.iter().filter(|&&f| f).count();
            let n_gt = rng.gen_range(n_tp.max(1)..=n_tp + 10);
            let m = ranked(&flags, n_gt);
            for variant in [ApVariant::Interpolated, ApVariant::Raw] {
                let got = average_precision_with(&m, variant).value().unwrap();
                let want = brute_force_ap(&flags, n_gt, variant);
                assert_eq!(got, want, "flags {flags:?} n_gt {n_gt} {variant:?}");
            }
        }
    }

    #[test]
    fn raw_and_interpolated_variants_differ_where_expected() {
        // (TP, FP, TP, TP) with 3 GTs: raw averages {1, 2/3, 3/4}, the
        // interpolated variant lifts the middle level to 3/4.
        let m = ranked(&[true, false, true, true], 3);
        let raw = average_precision_with(&m, ApVariant::Raw).value().unwrap();
        let interp = average_precision_with(&m, ApVariant::Interpolated)
            .value()
            .unwrap();
        assert_abs_diff_eq!(raw, (1.0 + 2.0 / 3.0 + 0.75) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(interp, (1.0 + 0.75 + 0.75) / 3.0, epsilon = 1e-12);
        assert!(interp > raw);
    }

    proptest! {
        #[test]
        fn trailing_fp_never_increases_ap(flags in prop::collection::vec(any::<bool>(), 0..20), extra_gt in 0usize..8) {
            let n_tp = flags.iter().filter(|&&f| f).count();
            let n_gt = (n_tp + extra_gt).max(1);
            let base = ranked(&flags, n_gt);
            let mut longer = flags.clone();
            longer.push(false);
            let appended = ranked(&longer, n_gt);
            let a = average_precision(&base).value().unwrap();
            let b = average_precision(&appended).value().unwrap();
            prop_assert!(b <= a + 1e-12, "trailing FP raised AP: {a} -> {b}");
        }

        #[test]
        fn curve_invariants(flags in prop::collection::vec(any::<bool>(), 1..24), extra_gt in 0usize..8) {
            let n_tp = flags.iter().filter(|&&f| f).count();
            let n_gt = (n_tp + extra_gt).max(1);
            let curve = pr_curve(&ranked(&flags, n_gt));
            // Recall is non-decreasing with rank.
            for pair in curve.points.windows(2) {
                prop_assert!(pair[1].recall >= pair[0].recall);
            }
            // Interpolated precision is non-increasing in recall.
            for pair in curve.levels.windows(2) {
                prop_assert!(pair[1].recall > pair[0].recall);
                prop_assert!(pair[1].interpolated <= pair[0].interpolated + 1e-12);
            }
            // AP stays inside [0, 1].
            let ap = average_precision(&ranked(&flags, n_gt)).value().unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn perfect_ranking_is_the_only_way_to_ap_one() {
        // Every GT matched and ranked above all FPs → AP = 1.
        let m = ranked(&[true, true, false], 2);
        assert_abs_diff_eq!(average_precision(&m).value().unwrap(), 1.0);
        // An FP ranked above the last TP drags AP below 1.
        let m = ranked(&[true, false, true], 2);
        assert!(average_precision(&m).value().unwrap() < 1.0);
        // A missed GT caps recall below 1 → AP < 1.
        let m = ranked(&[true], 2);
        assert!(average_precision(&m).value().unwrap() < 1.0);
    }

    #[test]
    fn report_pools_windows_and_honors_conf_threshold() {
        let gt = bb(0.0, 0.0, 10.0, 1.0);
        let sequences = vec![
            SequenceBoxes {
                index: 0,
                windows: vec![WindowBoxes {
                    detections: vec![bb(0.0, 0.0, 10.0, 0.9), bb(40.0, 40.0, 10.0, 0.3)],
                    ground_truths: vec![gt.clone()],
                }],
            },
            SequenceBoxes {
                index: 1,
                windows: vec![WindowBoxes {
                    detections: vec![],
                    ground_truths: vec![gt.clone()],
                }],
            },
        ];
        let report = evaluate(&sequences, 0.5, 0.5, ApVariant::Interpolated);
        // The 0.3-confidence FP is dropped before matching.
        assert_eq!((report.tp, report.fp, report.n_gt), (1, 0, 2));
        assert_abs_diff_eq!(report.ap.unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(report.ap_variant, "interpolated");
        assert_eq!(report.per_sequence.len(), 2);
        assert_abs_diff_eq!(report.per_sequence[0].ap.unwrap(), 1.0);
        assert_abs_diff_eq!(report.per_sequence[1].ap.unwrap(), 0.0);

        // A threshold above every confidence empties the detector output.
        let report = evaluate(&sequences, 0.5, 1.01, ApVariant::Interpolated);
        assert_eq!((report.tp, report.fp), (0, 0));
        assert_abs_diff_eq!(report.ap.unwrap(), 0.0);

        // No ground truth anywhere → ap is null, not a number.
        let empty = vec![SequenceBoxes::<f64> {
            index: 0,
            windows: vec![WindowBoxes {
                detections: vec![bb(0.0, 0.0, 10.0, 0.9)],
                ground_truths: vec![],
            }],
        }];
        let report = evaluate(&empty, 0.5, 0.5, ApVariant::Interpolated);
        assert_eq!(report.ap, None);
        assert_eq!((report.tp, report.fp, report.n_gt), (0, 1, 0));

        // The serialized report carries every contract field.
        let text = serde_json::to_string(&report).unwrap();
        for key in [
            "\"ap\"",
            "\"ap_variant\"",
            "\"tp\"",
            "\"fp\"",
            "\"n_gt\"",
            "\"iou_threshold\"",
            "\"conf_threshold\"",
            "\"per_sequence\"",
        ] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
