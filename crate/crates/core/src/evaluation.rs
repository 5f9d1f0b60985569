//! Detection post-processing and metrics.
//!
//! "Accuracy" throughout is precision, `TP / (TP + FP)`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use crate::boxes::iou;
use crate::boxes::BBox;
use crate::data::Annotation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const LARGE_MIN_AREA: f64 = 96.0 * 96.0;

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    /// Areas of exactly 32² or 96² fall in `Medium`.
    pub fn of_area(area: f64) -> Self {
        if area < SMALL_MAX_AREA {
            SizeBucket::Small
        } else if area > LARGE_MIN_AREA {
            SizeBucket::Large
        } else {
            SizeBucket::Medium
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn bucket_of(annotation: &Annotation) -> SizeBucket {
    SizeBucket::of_area(annotation.area())
}

/// Score descending, then lower box coordinates, then lower class id.
fn detection_order(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class suppression; the output is in score order.
pub fn nms(detections: &[DetectionRecord], iou_threshold: f64) -> Vec<DetectionRecord> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<DetectionRecord> = Vec::new();
    for d in sorted {
        let suppressed = kept.iter().any(|k| {
            k.image_id == d.image_id
                && k.class_id == d.class_id
                && iou(&k.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Result of matching detections to ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Detection indices in processing (score) order.
    pub order: Vec<usize>,
    /// Matched ground-truth index per detection (input indexing).
    pub det_to_gt: Vec<Option<usize>>,
}

/// Greedy matching in score order. Each detection takes the unmatched
/// ground truth of the same image and class with the highest IoU, if that
/// IoU reaches `iou_threshold`.
pub fn match_detections(
    detections: &[DetectionRecord],
    ground_truths: &[Annotation],
    iou_threshold: f64,
) -> Matching {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detection_order(&detections[a], &detections[b]).then(a.cmp(&b)));
    let mut taken = vec![false; ground_truths.len()];
    let mut det_to_gt = vec![None; detections.len()];
    for &di in &order {
        let d = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in ground_truths.iter().enumerate() {
            if taken[gi] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            det_to_gt[di] = Some(gi);
        }
    }
    Matching { order, det_to_gt }
}

/// Bucket a detection is counted in: its matched ground truth's, or its own.
fn detection_bucket(d: &DetectionRecord, m: Option<usize>, gts: &[Annotation]) -> SizeBucket {
    match m {
        Some(gi) => bucket_of(&gts[gi]),
        None => SizeBucket::of_area(d.bbox.area()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallAccuracy {
    pub recall: f64,
    pub accuracy: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

/// Recall and accuracy restricted to `bucket` (all sizes when `None`).
/// Empty ground truth gives recall 1 and no detections gives accuracy 1.
pub fn recall_accuracy(
    detections: &[DetectionRecord],
    ground_truths: &[Annotation],
    iou_threshold: f64,
    bucket: Option<SizeBucket>,
) -> RecallAccuracy {
    let m = match_detections(detections, ground_truths, iou_threshold);
    let in_bucket = |b: SizeBucket| bucket.map_or(true, |want| want == b);
    let num_gt = ground_truths
        .iter()
        .filter(|g| in_bucket(bucket_of(g)))
        .count();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (di, d) in detections.iter().enumerate() {
        if !in_bucket(detection_bucket(d, m.det_to_gt[di], ground_truths)) {
            continue;
        }
        if m.det_to_gt[di].is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    RecallAccuracy {
        recall: if num_gt == 0 {
            1.0
        } else {
            tp as f64 / num_gt as f64
        },
        accuracy: if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        num_gt,
        num_det: tp + fp,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// One point per distinct detection score, thresholds descending.
pub fn accuracy_recall_curve(
    detections: &[DetectionRecord],
    ground_truths: &[Annotation],
    iou_threshold: f64,
    bucket: Option<SizeBucket>,
) -> Vec<CurvePoint> {
    let m = match_detections(detections, ground_truths, iou_threshold);
    let in_bucket = |b: SizeBucket| bucket.map_or(true, |want| want == b);
    let num_gt = ground_truths
        .iter()
        .filter(|g| in_bucket(bucket_of(g)))
        .count();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (pos, &di) in m.order.iter().enumerate() {
        let d = &detections[di];
        if in_bucket(detection_bucket(d, m.det_to_gt[di], ground_truths)) {
            if m.det_to_gt[di].is_some() {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let last_of_score = m
            .order
            .get(pos + 1)
            .map_or(true, |&next| detections[next].score != d.score);
        if last_of_score {
            points.push(CurvePoint {
                threshold: d.score,
                recall: if num_gt == 0 {
                    1.0
                } else {
                    tp as f64 / num_gt as f64
                },
                accuracy: if tp + fp == 0 {
                    1.0
                } else {
                    tp as f64 / (tp + fp) as f64
                },
            });
        }
    }
    points
}

/// Nine FPPI reference points, log-spaced over `[1e-2, 1e0]`.
pub fn fppi_reference_points() -> [f64; 9] {
    let mut r = [0.0; 9];
    for (i, v) in r.iter_mut().enumerate() {
        *v = 10f64.powf(-2.0 + 2.0 * i as f64 / 8.0);
    }
    r
}

/// `(fppi, miss_rate)` after each distinct score threshold, starting from
/// the empty detector at `(0, 1)`.
pub fn miss_rate_curve(
    detections: &[DetectionRecord],
    ground_truths: &[Annotation],
    num_images: usize,
) -> Vec<(f64, f64)> {
    let m = match_detections(detections, ground_truths, 0.5);
    let n_gt = ground_truths.len() as f64;
    let imgs = num_images.max(1) as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = vec![(0.0, 1.0)];
    for (pos, &di) in m.order.iter().enumerate() {
        if m.det_to_gt[di].is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = m
            .order
            .get(pos + 1)
            .map_or(true, |&next| detections[next].score != detections[di].score);
        if last_of_score {
            curve.push((fp as f64 / imgs, 1.0 - tp as f64 / n_gt));
        }
    }
    curve
}

/// Log-average miss rate over FPPI in `[1e-2, 1e0]`: at each reference
/// point take the lowest miss rate reached with FPPI no larger than it,
/// clamp to `1e-10`, and return the geometric mean.
pub fn log_average_miss_rate(
    detections: &[DetectionRecord],
    ground_truths: &[Annotation],
    num_images: usize,
) -> Result<f64> {
    if ground_truths.is_empty() {
        return Err(Error::Input(
            "log-average miss rate needs ground truth".into(),
        ));
    }
    let curve = miss_rate_curve(detections, ground_truths, num_images);
    let refs = fppi_reference_points();
    let mean_log = refs
        .iter()
        .map(|&r| {
            let mr = curve
                .iter()
                .filter(|(fppi, _)| *fppi <= r)
                .map(|(_, mr)| *mr)
                .fold(1.0f64, f64::min);
            mr.max(1e-10).ln()
        })
        .sum::<f64>()
        / refs.len() as f64;
    Ok(mean_log.exp().clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image_id: usize, b: [f64; 4], class_id: u32) -> Annotation {
        Annotation {
            image_id,
            bbox: b.into(),
            class_id,
        }
    }

    fn det(image_id: usize, b: [f64; 4], class_id: u32, score: f64) -> DetectionRecord {
        DetectionRecord {
            image_id,
            bbox: b.into(),
            class_id,
            score,
        }
    }

    #[test]
    fn bucket_examples() {
        let a = |s: f64| gt(0, [0.0, 0.0, s, s], 1);
        assert_eq!(bucket_of(&a(31.0)), SizeBucket::Small);
        assert_eq!(
            bucket_of(&gt(0, [0.0, 0.0, 40.0, 50.0], 1)),
            SizeBucket::Medium
        );
        assert_eq!(bucket_of(&a(100.0)), SizeBucket::Large);
        assert_eq!(bucket_of(&a(32.0)), SizeBucket::Medium);
        assert_eq!(bucket_of(&a(96.0)), SizeBucket::Medium);
    }

    #[test]
    fn nms_examples() {
        let a = det(0, [0.0, 0.0, 10.0, 10.0], 1, 0.9);
        assert_eq!(nms(&[a.clone()], 0.5), vec![a.clone()]);
        let b = det(0, [0.0, 0.0, 10.0, 10.0], 1, 0.8);
        assert_eq!(nms(&[b.clone(), a.clone()], 0.5), vec![a.clone()]);
        let c = det(0, [50.0, 50.0, 60.0, 60.0], 1, 0.8);
        assert_eq!(nms(&[a.clone(), c.clone()], 0.5).len(), 2);
        // different class is never suppressed
        let d = det(0, [0.0, 0.0, 10.0, 10.0], 2, 0.8);
        assert_eq!(nms(&[a, d], 0.5).len(), 2);
    }

    #[test]
    fn recall_accuracy_examples() {
        let gts = vec![
            gt(0, [0.0, 0.0, 10.0, 10.0], 1),
            gt(0, [50.0, 50.0, 60.0, 60.0], 2),
        ];
        let perfect: Vec<_> = gts
            .iter()
            .map(|g| det(0, g.bbox.into(), g.class_id, 1.0))
            .collect();
        let r = recall_accuracy(&perfect, &gts, 0.5, None);
        assert_eq!((r.recall, r.accuracy), (1.0, 1.0));

        let r = recall_accuracy(&[], &gts, 0.5, None);
        assert_eq!((r.recall, r.accuracy), (0.0, 1.0));

        // IoU 0.6: 10x10 gt vs 10x(6/0.. ) box [0,0,10,6] -> 60/100
        let dets = vec![
            det(0, [0.0, 0.0, 10.0, 6.0], 1, 0.9),
            det(0, [200.0, 200.0, 210.0, 210.0], 1, 0.8),
        ];
        assert!((iou(&dets[0].bbox, &gts[0].bbox) - 0.6).abs() < 1e-12);
        let r = recall_accuracy(&dets, &gts, 0.5, None);
        assert_eq!((r.recall, r.accuracy), (0.5, 0.5));
    }

    #[test]
    fn curve_examples() {
        let gts = vec![gt(0, [0.0, 0.0, 10.0, 10.0], 1)];
        let perfect = vec![det(0, [0.0, 0.0, 10.0, 10.0], 1, 1.0)];
        let c = accuracy_recall_curve(&perfect, &gts, 0.5, None);
        assert_eq!(
            c,
            vec![CurvePoint {
                threshold: 1.0,
                recall: 1.0,
                accuracy: 1.0
            }]
        );
        assert!(accuracy_recall_curve(&[], &gts, 0.5, None).is_empty());
        let three = vec![
            det(0, [0.0, 0.0, 10.0, 10.0], 1, 0.9),
            det(0, [30.0, 0.0, 40.0, 10.0], 1, 0.5),
            det(0, [60.0, 0.0, 70.0, 10.0], 1, 0.7),
        ];
        let c = accuracy_recall_curve(&three, &gts, 0.5, None);
        assert_eq!(c.len(), 3);
        assert_eq!(
            c.iter().map(|p| p.threshold).collect::<Vec<_>>(),
            vec![0.9, 0.7, 0.5]
        );
        assert!(c.windows(2).all(|w| w[1].recall >= w[0].recall));
    }

    #[test]
    fn lamr_examples() {
        let gts: Vec<_> = (0..4).map(|i| gt(i, [0.0, 0.0, 10.0, 10.0], 1)).collect();
        assert_eq!(log_average_miss_rate(&[], &gts, 4).unwrap(), 1.0);
        assert!(log_average_miss_rate(&[], &[], 4).is_err());

        // Two confident false positives, then three hits: miss rate stays 1
        // until FPPI reaches 0.5, where it drops to 0.25. Reference points
        // 10^-0.25 and 10^0 are the only ones at or above 0.5.
        let mut dets = vec![
            det(0, [100.0, 100.0, 110.0, 110.0], 1, 0.99),
            det(1, [100.0, 100.0, 110.0, 110.0], 1, 0.98),
        ];
        for i in 0..3 {
            dets.push(det(i, [0.0, 0.0, 10.0, 10.0], 1, 0.9 - 0.1 * i as f64));
        }
        let want = 0.25f64.powf(2.0 / 9.0);
        assert!((log_average_miss_rate(&dets, &gts, 4).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn constant_miss_rate() {
        // half the ground truth found before any false positive
        let gts: Vec<_> = (0..4).map(|i| gt(i, [0.0, 0.0, 10.0, 10.0], 1)).collect();
        let dets = vec![
            det(0, [0.0, 0.0, 10.0, 10.0], 1, 0.9),
            det(1, [0.0, 0.0, 10.0, 10.0], 1, 0.8),
        ];
        assert!((log_average_miss_rate(&dets, &gts, 4).unwrap() - 0.5).abs() < 1e-12);
    }
}
