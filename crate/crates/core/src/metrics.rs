//! Pixel- and instance-level evaluation.
//!
//! Instances are 8-connected components of a thresholded probability map,
//! with the component's mean probability as its confidence. Detection
//! metrics match predictions to ground-truth instances greedily in
//! confidence order (highest available IoU first); average precision is the
//! area under the all-point interpolated precision-recall curve with
//! detections ranked across the whole corpus.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::tensor::{BinaryMask, PredMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    DimMismatch,
    /// Prediction and ground-truth corpora disagree on volume ids.
    IdMismatch,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::DimMismatch => write!(f, "mask dimensions differ"),
            MetricsError::IdMismatch => write!(f, "volume ids do not match"),
        }
    }
}

/// Pixel confusion counts of a predicted mask against ground truth.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MetricsError::DimMismatch);
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values().iter()) {
        match (p, g) {
            (1, 1) => counts.true_pos += 1,
            (1, 0) => counts.false_pos += 1,
            (0, 1) => counts.false_neg += 1,
            _ => counts.true_neg += 1,
        }
    }
    Ok(counts)
}

/// TP/(TP+FP); 0 when there are no positive predictions.
pub fn precision(c: &ConfusionCounts) -> f64 {
    let denom = c.true_pos + c.false_pos;
    if denom == 0 {
        0.0
    } else {
        c.true_pos as f64 / denom as f64
    }
}

/// TP/(TP+FN); 0 when there is no positive ground truth.
pub fn recall(c: &ConfusionCounts) -> f64 {
    let denom = c.true_pos + c.false_neg;
    if denom == 0 {
        0.0
    } else {
        c.true_pos as f64 / denom as f64
    }
}

/// 2TP/(2TP+FP+FN); 1 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        1.0
    } else {
        (2 * c.true_pos) as f64 / denom as f64
    }
}

/// TP/(TP+FP+FN); 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        1.0
    } else {
        c.true_pos as f64 / denom as f64
    }
}

/// One connected component: sorted flat pixel indices plus a confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub pixels: Vec<u32>,
    pub confidence: f64,
}

/// Instances found in one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Intersection-over-union of two pixel sets (both sorted ascending).
pub fn instance_iou(a: &Instance, b: &Instance) -> f64 {
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.pixels.len() && j < b.pixels.len() {
        match a.pixels[i].cmp(&b.pixels[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.pixels.len() + b.pixels.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub(crate) fn components_of(positive: &[bool], height: usize, width: usize) -> Vec<Vec<u32>> {
    let mut visited = vec![false; positive.len()];
    let mut components = Vec::new();
    let mut queue: Vec<usize> = Vec::new();
    for start in 0..positive.len() {
        if !positive[start] || visited[start] {
            continue;
        }
        let mut pixels: Vec<u32> = Vec::new();
        visited[start] = true;
        queue.push(start);
        while let Some(p) = queue.pop() {
            pixels.push(p as u32);
            let (y, x) = (p / width, p % width);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    let np = ny as usize * width + nx as usize;
                    if positive[np] && !visited[np] {
                        visited[np] = true;
                        queue.push(np);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    components
}

/// 8-connected components of `prob > threshold`; the confidence of each
/// instance is its mean probability.
pub fn extract_instances(prob: &PredMap, threshold: f64) -> InstanceSet {
    let positive: Vec<bool> = prob
        .probs()
        .iter()
        .map(|&p| f64::from(p) > threshold)
        .collect();
    let instances = components_of(&positive, prob.height(), prob.width())
        .into_iter()
        .map(|pixels| {
            let mut sum = 0.0f64;
            for &p in &pixels {
                sum += f64::from(prob.probs()[p as usize]);
            }
            let confidence = sum / pixels.len() as f64;
            Instance { pixels, confidence }
        })
        .collect();
    InstanceSet { instances }
}

/// Ground-truth instances (confidence 1).
pub fn instances_from_mask(mask: &BinaryMask) -> InstanceSet {
    let positive: Vec<bool> = mask.values().iter().map(|&v| v == 1).collect();
    let instances = components_of(&positive, mask.height(), mask.width())
        .into_iter()
        .map(|pixels| Instance {
            pixels,
            confidence: 1.0,
        })
        .collect();
    InstanceSet { instances }
}

/// A prediction's place in the corpus-wide ranking.
struct RankedDetection {
    confidence: f64,
    image: usize,
    instance: usize,
}

fn ranked_detections(preds: &[InstanceSet]) -> Vec<RankedDetection> {
    let mut ranked: Vec<RankedDetection> = preds
        .iter()
        .enumerate()
        .flat_map(|(image, set)| {
            set.instances.iter().enumerate().map(move |(instance, inst)| RankedDetection {
                confidence: inst.confidence,
                image,
                instance,
            })
        })
        .collect();
    // confidence descending, ties broken by (image, instance) for determinism
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.image.cmp(&b.image))
            .then(a.instance.cmp(&b.instance))
    });
    ranked
}

/// Greedy corpus-level matching at an IoU threshold. Returns, per ranked
/// detection, whether it is a true positive, plus the IoUs of the matches.
fn greedy_match(
    preds: &[InstanceSet],
    gts: &[InstanceSet],
    iou_threshold: f64,
) -> (Vec<RankedDetection>, Vec<bool>, Vec<f64>) {
    let ranked = ranked_detections(preds);
    let mut gt_taken: Vec<Vec<bool>> = gts.iter().map(|set| vec![false; set.len()]).collect();
    let mut is_tp = Vec::with_capacity(ranked.len());
    let mut matched_ious = Vec::new();
    for det in &ranked {
        let pred_inst = &preds[det.image].instances[det.instance];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt_inst) in gts[det.image].instances.iter().enumerate() {
            if gt_taken[det.image][gi] {
                continue;
            }
            let overlap = instance_iou(pred_inst, gt_inst);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, overlap)) => {
                gt_taken[det.image][gi] = true;
                matched_ious.push(overlap);
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }
    (ranked, is_tp, matched_ious)
}

/// Average precision over a corpus of images at one IoU threshold
/// (all-point interpolation). With no ground truth at all, an empty
/// prediction set scores 1 and anything else 0.
pub fn average_precision(preds: &[InstanceSet], gts: &[InstanceSet], iou_threshold: f64) -> f64 {
    let total_gt: usize = gts.iter().map(InstanceSet::len).sum();
    let total_pred: usize = preds.iter().map(InstanceSet::len).sum();
    if total_gt == 0 {
        return if total_pred == 0 { 1.0 } else { 0.0 };
    }
    let (_, is_tp, _) = greedy_match(preds, gts, iou_threshold);
    if is_tp.is_empty() {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / total_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let mut ap = 0.0f64;
    let mut max_prec = 0.0f64;
    for i in (0..points.len()).rev() {
        let (r, p) = points[i];
        max_prec = max_prec.max(p);
        let r_prev = if i == 0 { 0.0 } else { points[i - 1].0 };
        ap += (r - r_prev) * max_prec;
    }
    ap
}

/// Instance-level detection counts at one IoU threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetectionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    /// Mean IoU over matched pairs (0 when nothing matched).
    pub mean_matched_iou: f64,
}

pub fn detection_counts(
    preds: &[InstanceSet],
    gts: &[InstanceSet],
    iou_threshold: f64,
) -> DetectionCounts {
    let total_gt: usize = gts.iter().map(InstanceSet::len).sum();
    let (_, is_tp, matched) = greedy_match(preds, gts, iou_threshold);
    let tp = is_tp.iter().filter(|&&t| t).count() as u64;
    let fp = is_tp.len() as u64 - tp;
    let mean_matched_iou = if matched.is_empty() {
        0.0
    } else {
        matched.iter().sum::<f64>() / matched.len() as f64
    };
    DetectionCounts {
        true_pos: tp,
        false_pos: fp,
        false_neg: total_gt as u64 - tp,
        mean_matched_iou,
    }
}

/// Per-volume breakdown in a [`MetricReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMetrics {
    pub id: String,
    pub dice: f64,
    pub pixel_iou: f64,
    pub gt_instances: u64,
    pub pred_instances: u64,
    pub det_true_pos: u64,
    pub det_false_pos: u64,
    pub det_false_neg: u64,
}

/// Corpus-level numbers mirroring the ablation table columns.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AggregateMetrics {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean IoU of matched instances at threshold 0.5.
    pub iou: f64,
    /// Instance-level recall at IoU >= 0.5.
    pub recall: f64,
    /// Instance-level precision at IoU >= 0.5.
    pub precision: f64,
    /// Pixel-level Dice pooled over the corpus.
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Threshold used to binarize predictions and extract instances.
pub const EVAL_THRESHOLD: f64 = 0.5;

/// Evaluate per-slice predictions against ground truth volumes. Volumes
/// are paired by id (order-insensitive); each slice counts as one image
/// for detection metrics, pixels are pooled for Dice.
pub fn evaluate_run(
    preds: &[(String, Vec<PredMap>)],
    gts: &[(String, Vec<BinaryMask>)],
) -> Result<MetricReport, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::IdMismatch);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].0.cmp(&preds[b].0));
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by(|&a, &b| gts[a].0.cmp(&gts[b].0));

    let mut per_volume = Vec::with_capacity(preds.len());
    let mut corpus_pred_sets: Vec<InstanceSet> = Vec::new();
    let mut corpus_gt_sets: Vec<InstanceSet> = Vec::new();
    let mut pixel_counts = ConfusionCounts::default();

    for (&pi, &gi) in order.iter().zip(gt_order.iter()) {
        let (pred_id, pred_slices) = &preds[pi];
        let (gt_id, gt_slices) = &gts[gi];
        if pred_id != gt_id || pred_slices.len() != gt_slices.len() {
            return Err(MetricsError::IdMismatch);
        }
        let mut volume_counts = ConfusionCounts::default();
        let mut vol_pred_sets = Vec::with_capacity(pred_slices.len());
        let mut vol_gt_sets = Vec::with_capacity(gt_slices.len());
        for (pred, gt) in pred_slices.iter().zip(gt_slices.iter()) {
            let hard = pred.binarize(EVAL_THRESHOLD as f32);
            volume_counts.add(&confusion(&hard, gt)?);
            vol_pred_sets.push(extract_instances(pred, EVAL_THRESHOLD));
            vol_gt_sets.push(instances_from_mask(gt));
        }
        let det = detection_counts(&vol_pred_sets, &vol_gt_sets, 0.5);
        per_volume.push(VolumeMetrics {
            id: pred_id.clone(),
            dice: dice(&volume_counts),
            pixel_iou: iou(&volume_counts),
            gt_instances: vol_gt_sets.iter().map(|s| s.len() as u64).sum(),
            pred_instances: vol_pred_sets.iter().map(|s| s.len() as u64).sum(),
            det_true_pos: det.true_pos,
            det_false_pos: det.false_pos,
            det_false_neg: det.false_neg,
        });
        pixel_counts.add(&volume_counts);
        corpus_pred_sets.extend(vol_pred_sets);
        corpus_gt_sets.extend(vol_gt_sets);
    }

    let det = detection_counts(&corpus_pred_sets, &corpus_gt_sets, 0.5);
    let det_conf = ConfusionCounts {
        true_pos: det.true_pos,
        false_pos: det.false_pos,
        false_neg: det.false_neg,
        true_neg: 0,
    };
    let aggregate = AggregateMetrics {
        ap50: average_precision(&corpus_pred_sets, &corpus_gt_sets, 0.5),
        ap75: average_precision(&corpus_pred_sets, &corpus_gt_sets, 0.75),
        iou: det.mean_matched_iou,
        recall: recall(&det_conf),
        precision: precision(&det_conf),
        dice: dice(&pixel_counts),
    };
    Ok(MetricReport {
        per_volume,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn mask(h: usize, w: usize, ones: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &(y, x) in ones {
            m.set(y, x, 1);
        }
        m
    }

    fn pred_from(h: usize, w: usize, hot: &[(usize, usize, f32)]) -> PredMap {
        let mut data = vec![0.1f32; h * w];
        for &(y, x, p) in hot {
            data[y * w + x] = p;
        }
        PredMap::new(h, w, data).unwrap()
    }

    #[test]
    fn confusion_identity_has_no_errors() {
        let m = mask(4, 4, &[(0, 0), (1, 1)]);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c.false_pos, 0);
        assert_eq!(c.false_neg, 0);
        assert_eq!(c.true_pos, 2);
        assert_eq!(c.total(), 16);
    }

    #[test]
    fn confusion_all_negative_prediction() {
        let gt = mask(4, 4, &[(0, 0), (1, 1), (2, 2)]);
        let c = confusion(&BinaryMask::zeros(4, 4), &gt).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.false_neg, 3);
    }

    #[test]
    fn hand_computed_scores() {
        // TP=2, FP=1, FN=1
        let gt = mask(2, 3, &[(0, 0), (0, 1), (1, 0)]);
        let pred = mask(2, 3, &[(0, 0), (0, 1), (1, 2)]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.true_pos, c.false_pos, c.false_neg), (2, 1, 1));
        assert!((dice(&c) - 2.0 / 3.0).abs() < 1e-12);
        assert!((precision(&c) - 2.0 / 3.0).abs() < 1e-12);
        assert!((recall(&c) - 2.0 / 3.0).abs() < 1e-12);
        assert!((iou(&c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_vs_empty_conventions() {
        let c = confusion(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 2)).unwrap();
        assert_eq!(dice(&c), 1.0);
        assert_eq!(iou(&c), 1.0);
        assert_eq!(precision(&c), 0.0);
        assert_eq!(recall(&c), 0.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let gt = mask(2, 2, &[(0, 0)]);
        let pred = mask(2, 2, &[(1, 1)]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(dice(&c), 0.0);
        assert_eq!(iou(&c), 0.0);
    }

    #[test]
    fn dice_iou_identity_on_random_masks() {
        let mut rng = crate::rng::SplitMix64::new(77);
        for _ in 0..50 {
            let a: Vec<u8> = (0..64).map(|_| u8::from(rng.next_bool(0.3))).collect();
            let b: Vec<u8> = (0..64).map(|_| u8::from(rng.next_bool(0.3))).collect();
            let pred = BinaryMask::new(8, 8, a).unwrap();
            let gt = BinaryMask::new(8, 8, b).unwrap();
            let c = confusion(&pred, &gt).unwrap();
            let (d, i) = (dice(&c), iou(&c));
            assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            assert!(d >= i);
        }
    }

    #[test]
    fn two_separated_blobs_make_two_instances() {
        let pred = pred_from(6, 6, &[(0, 0, 0.9), (0, 1, 0.8), (4, 4, 0.7)]);
        let set = extract_instances(&pred, 0.5);
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn empty_map_has_no_instances() {
        let pred = PredMap::new(4, 4, vec![0.2; 16]).unwrap();
        assert!(extract_instances(&pred, 0.5).is_empty());
    }

    #[test]
    fn diagonal_pixels_merge_with_8_connectivity() {
        let pred = pred_from(4, 4, &[(0, 0, 0.9), (1, 1, 0.9), (2, 2, 0.9)]);
        let set = extract_instances(&pred, 0.5);
        assert_eq!(set.len(), 1);
        assert_eq!(set.instances[0].pixels.len(), 3);
    }

    #[test]
    fn instance_confidence_is_mean_probability() {
        let pred = pred_from(4, 4, &[(0, 0, 0.8), (0, 1, 0.6)]);
        let set = extract_instances(&pred, 0.5);
        assert_eq!(set.len(), 1);
        let expected = (f64::from(0.8f32) + f64::from(0.6f32)) / 2.0;
        assert!((set.instances[0].confidence - expected).abs() < 1e-12);
    }

    fn one_instance(pixels: &[u32], confidence: f64) -> InstanceSet {
        InstanceSet {
            instances: vec![Instance {
                pixels: pixels.to_vec(),
                confidence,
            }],
        }
    }

    #[test]
    fn ap_single_match_above_and_below_threshold() {
        // IoU = 6/10 = 0.6 between a 8-pixel prediction and 8-pixel GT
        let pred = one_instance(&[0, 1, 2, 3, 4, 5, 6, 7], 0.9);
        let gt = one_instance(&[2, 3, 4, 5, 6, 7, 8, 9], 1.0);
        let iou_pg = instance_iou(&pred.instances[0], &gt.instances[0]);
        assert!((iou_pg - 0.6).abs() < 1e-12);
        assert_eq!(average_precision(&[pred.clone()], &[gt.clone()], 0.5), 1.0);
        assert_eq!(average_precision(&[pred], &[gt], 0.75), 0.0);
    }

    #[test]
    fn ap_no_predictions_with_gt_is_zero() {
        let gt = one_instance(&[0, 1], 1.0);
        assert_eq!(average_precision(&[InstanceSet::default()], &[gt], 0.5), 0.0);
    }

    #[test]
    fn ap_perfect_predictions_is_one() {
        let a = one_instance(&[0, 1, 2], 0.9);
        let b = one_instance(&[5, 6], 0.8);
        let gts = [a.clone(), b.clone()];
        let preds = [a, b];
        for threshold in [0.5, 0.75] {
            assert_eq!(average_precision(&preds, &gts, threshold), 1.0);
        }
    }

    #[test]
    fn ap_invariant_under_monotone_confidence_transform() {
        let preds = vec![
            InstanceSet {
                instances: vec![
                    Instance { pixels: vec![0, 1, 2, 3], confidence: 0.9 },
                    Instance { pixels: vec![20, 21], confidence: 0.4 },
                ],
            },
            InstanceSet {
                instances: vec![Instance { pixels: vec![7, 8, 9], confidence: 0.6 }],
            },
        ];
        let gts = vec![
            InstanceSet {
                instances: vec![Instance { pixels: vec![0, 1, 2, 3], confidence: 1.0 }],
            },
            InstanceSet {
                instances: vec![Instance { pixels: vec![8, 9, 10], confidence: 1.0 }],
            },
        ];
        let base = average_precision(&preds, &gts, 0.5);
        let transformed: Vec<InstanceSet> = preds
            .iter()
            .map(|set| InstanceSet {
                instances: set
                    .instances
                    .iter()
                    .map(|inst| Instance {
                        pixels: inst.pixels.clone(),
                        confidence: 0.1 + inst.confidence / 2.0,
                    })
                    .collect(),
            })
            .collect();
        assert_eq!(base, average_precision(&transformed, &gts, 0.5));
    }

    #[test]
    fn greedy_matching_prefers_highest_iou() {
        // one prediction overlapping two GTs; must take the larger IoU
        let pred = one_instance(&[0, 1, 2, 3], 0.9);
        let gts = [InstanceSet {
            instances: vec![
                Instance { pixels: vec![0, 1, 2, 3, 4, 5, 6, 7], confidence: 1.0 },
                Instance { pixels: vec![0, 1, 2, 3, 4], confidence: 1.0 },
            ],
        }];
        let counts = detection_counts(core::slice::from_ref(&pred), &gts, 0.5);
        assert_eq!(counts.true_pos, 1);
        assert_eq!(counts.false_neg, 1);
        assert!((counts.mean_matched_iou - 4.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_run_perfect_predictions() {
        let gt_slices = vec![
            mask(8, 8, &[(1, 1), (1, 2), (2, 1), (2, 2)]),
            mask(8, 8, &[(5, 5), (5, 6)]),
        ];
        let pred_slices: Vec<PredMap> = gt_slices
            .iter()
            .map(|m| {
                let probs: Vec<f32> =
                    m.values().iter().map(|&v| if v == 1 { 0.95 } else { 0.05 }).collect();
                PredMap::new(8, 8, probs).unwrap()
            })
            .collect();
        let report = evaluate_run(
            &[("vol0".to_string(), pred_slices)],
            &[("vol0".to_string(), gt_slices)],
        )
        .unwrap();
        assert_eq!(report.aggregate.ap50, 1.0);
        assert_eq!(report.aggregate.ap75, 1.0);
        assert_eq!(report.aggregate.dice, 1.0);
        assert_eq!(report.aggregate.recall, 1.0);
        assert_eq!(report.aggregate.precision, 1.0);
        assert_eq!(report.aggregate.iou, 1.0);
    }

    #[test]
    fn evaluate_run_rejects_mismatched_ids() {
        let err = evaluate_run(
            &[("a".to_string(), vec![])],
            &[("b".to_string(), vec![])],
        )
        .unwrap_err();
        assert_eq!(err, MetricsError::IdMismatch);
    }

    #[test]
    fn evaluate_run_is_order_invariant() {
        let vol = |seed: u64| {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let gt: Vec<BinaryMask> = (0..2)
                .map(|_| {
                    let vals: Vec<u8> = (0..36).map(|_| u8::from(rng.next_bool(0.2))).collect();
                    BinaryMask::new(6, 6, vals).unwrap()
                })
                .collect();
            let pred: Vec<PredMap> = (0..2)
                .map(|_| {
                    let vals: Vec<f32> = (0..36).map(|_| rng.next_f64() as f32).collect();
                    PredMap::new(6, 6, vals).unwrap()
                })
                .collect();
            (gt, pred)
        };
        let (gt_a, pred_a) = vol(1);
        let (gt_b, pred_b) = vol(2);
        let fwd = evaluate_run(
            &[("a".to_string(), pred_a.clone()), ("b".to_string(), pred_b.clone())],
            &[("a".to_string(), gt_a.clone()), ("b".to_string(), gt_b.clone())],
        )
        .unwrap();
        let rev = evaluate_run(
            &[("b".to_string(), pred_b), ("a".to_string(), pred_a)],
            &[("a".to_string(), gt_a), ("b".to_string(), gt_b)],
        )
        .unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn ap75_never_exceeds_ap50_on_random_corpora() {
        let mut rng = crate::rng::SplitMix64::new(123);
        for _ in 0..20 {
            let preds: Vec<InstanceSet> = (0..3)
                .map(|_| {
                    let n = rng.next_below(4) as usize;
                    InstanceSet {
                        instances: (0..n)
                            .map(|_| {
                                let start = rng.next_below(40) as u32;
                                let len = 1 + rng.next_below(12) as u32;
                                Instance {
                                    pixels: (start..start + len).collect(),
                                    confidence: rng.next_f64(),
                                }
                            })
                            .collect(),
                    }
                })
                .collect();
            let gts: Vec<InstanceSet> = (0..3)
                .map(|_| {
                    let n = rng.next_below(3) as usize;
                    InstanceSet {
                        instances: (0..n)
                            .map(|_| {
                                let start = rng.next_below(40) as u32;
                                let len = 1 + rng.next_below(12) as u32;
                                Instance {
                                    pixels: (start..start + len).collect(),
                                    confidence: 1.0,
                                }
                            })
                            .collect(),
                    }
                })
                .collect();
            let ap50 = average_precision(&preds, &gts, 0.5);
            let ap75 = average_precision(&preds, &gts, 0.75);
            assert!(ap75 <= ap50 + 1e-12, "ap75 {ap75} > ap50 {ap50}");
        }
    }
}
