//! Evaluation: category-wise nucleus IoU against ground truth, and
//! average precision with detector-score vs uncertainty ranking.
//!
//! Ground-truth identities are carried by the *cells*: each ground-truth
//! cell is matched to the predicted cell with highest IoU per frame, and
//! the nucleus sharing that predicted id is the one evaluated. A nucleus
//! the segmenter missed entirely still has a well-defined partner this
//! way. Categories (updated / interpolated / non-updated) come solely
//! from an [`UpdateLog`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{iou, FlowField, LabelMap, Mask, ScalarField};
use crate::propagate::{UpdateAction, UpdateLog};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no ground-truth nuclei to evaluate")]
    EmptyGroundTruth,
    #[error("region is empty")]
    EmptyRegion,
    #[error("frame counts disagree")]
    LengthMismatch,
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

// ---------------------------------------------------------------------------
// Category-wise IoU
// ---------------------------------------------------------------------------

/// Mean IoU and population of one evaluation category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub mean_iou: f64,
    pub count: usize,
}

impl CategoryStat {
    fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            Self { mean_iou: 0.0, count: 0 }
        } else {
            Self { mean_iou: values.iter().sum::<f64>() / values.len() as f64, count: values.len() }
        }
    }
}

/// Per-category mean nucleus IoU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub all: CategoryStat,
    pub updated: CategoryStat,
    pub interpolated: CategoryStat,
    pub non_updated: CategoryStat,
}

/// Match each ground-truth cell to the predicted cell with highest IoU.
fn match_cells(gt_cells: &LabelMap, pred_cells: &LabelMap) -> Vec<(u32, Option<u32>)> {
    gt_cells
        .ids()
        .into_iter()
        .map(|gt_id| {
            let gt_mask = gt_cells.mask_of(gt_id);
            let mut best: Option<(u32, f64)> = None;
            for pred_id in pred_cells.ids() {
                let v = iou(&gt_mask, &pred_cells.mask_of(pred_id)).unwrap_or(0.0);
                if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((pred_id, v));
                }
            }
            (gt_id, best.map(|(id, _)| id))
        })
        .collect()
}

/// Evaluate every ground-truth nucleus against its matched prediction and
/// bucket the result by the update log's action for that instance.
pub fn mean_iou_by_category(
    pred_nuclei: &[LabelMap],
    pred_cells: &[LabelMap],
    gt_nuclei: &[LabelMap],
    gt_cells: &[LabelMap],
    log: &UpdateLog,
) -> Result<CategoryReport, MetricsError> {
    let frames = gt_nuclei.len();
    if pred_nuclei.len() != frames || pred_cells.len() != frames || gt_cells.len() != frames {
        return Err(MetricsError::LengthMismatch);
    }
    let mut all = Vec::new();
    let mut updated = Vec::new();
    let mut interpolated = Vec::new();
    let mut non_updated = Vec::new();

    for f in 0..frames {
        let matches = match_cells(&gt_cells[f], &pred_cells[f]);
        for (gt_id, pred_id) in matches {
            let gt_mask = gt_nuclei[f].mask_of(gt_id);
            if gt_mask.is_empty() {
                continue;
            }
            let (value, action) = match pred_id {
                None => (0.0, None),
                Some(pid) => {
                    let pred_mask = pred_nuclei[f].mask_of(pid);
                    (iou(&gt_mask, &pred_mask)?, log.action_for(f, pid))
                }
            };
            all.push(value);
            match action {
                Some(UpdateAction::Interpolated) => interpolated.push(value),
                Some(a) if a.is_update() => updated.push(value),
                _ => non_updated.push(value),
            }
        }
    }
    if all.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(CategoryReport {
        all: CategoryStat::from_values(&all),
        updated: CategoryStat::from_values(&updated),
        interpolated: CategoryStat::from_values(&interpolated),
        non_updated: CategoryStat::from_values(&non_updated),
    })
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Which confidence ranks the detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Detector score, descending.
    Softmax,
    /// Mean instance entropy, ascending (implemented as score `-entropy`
    /// so both modes share the ranking path).
    Entropy,
}

/// One predicted instance with its candidate ground-truth overlaps.
#[derive(Debug, Clone)]
pub struct Detection {
    pub frame: usize,
    pub id: u32,
    /// Detector-style confidence, higher is better.
    pub score: f64,
    /// Mean uncertainty/entropy over the instance, lower is better.
    pub mean_entropy: f64,
    /// `(global ground-truth index, IoU)` for every overlapped gt instance.
    pub overlaps: Vec<(usize, f64)>,
}

/// All-point interpolated average precision with greedy rank-order matching.
///
/// Detections are ranked by the chosen score; each detection matches the
/// not-yet-matched ground truth with highest IoU at or above the
/// threshold. With zero ground truths the result is 1 if there are no
/// detections (nothing to find, nothing claimed) and 0 otherwise.
pub fn average_precision(
    detections: &[Detection],
    n_gt: usize,
    iou_threshold: f64,
    mode: ScoreMode,
) -> f64 {
    if n_gt == 0 {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    if detections.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    let key = |d: &Detection| match mode {
        ScoreMode::Softmax => d.score,
        ScoreMode::Entropy => -d.mean_entropy,
    };
    order.sort_by(|&a, &b| {
        key(&detections[b])
            .total_cmp(&key(&detections[a]))
            .then_with(|| detections[a].frame.cmp(&detections[b].frame))
            .then_with(|| detections[a].id.cmp(&detections[b].id))
    });

    let mut gt_taken = vec![false; n_gt];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &i in &order {
        let best = detections[i]
            .overlaps
            .iter()
            .filter(|&&(g, v)| !gt_taken[g] && v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some(&(g, _)) => {
                gt_taken[g] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // precision-recall points in rank order
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope (running max from the right)
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    // area under the step curve
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// Build detections and the ground-truth census from per-frame label maps.
///
/// Every predicted nucleus instance becomes a detection: its score comes
/// from the per-frame score table (when present) and its mean entropy
/// from the uncertainty map. Returns the detections and the number of
/// ground-truth nuclei.
pub fn collect_detections(
    pred_nuclei: &[LabelMap],
    gt_nuclei: &[LabelMap],
    uncertainty: &[ScalarField],
    scores: &[std::collections::BTreeMap<u32, f64>],
) -> Result<(Vec<Detection>, usize), MetricsError> {
    let frames = gt_nuclei.len();
    if pred_nuclei.len() != frames || uncertainty.len() != frames || scores.len() != frames {
        return Err(MetricsError::LengthMismatch);
    }
    let mut gt_index = 0usize;
    let mut detections = Vec::new();
    for f in 0..frames {
        let gt_ids = gt_nuclei[f].ids();
        let gt_masks: Vec<(usize, Mask)> = gt_ids
            .iter()
            .map(|&id| {
                let m = gt_nuclei[f].mask_of(id);
                let idx = gt_index;
                gt_index += 1;
                (idx, m)
            })
            .collect();
        for id in pred_nuclei[f].ids() {
            let mask = pred_nuclei[f].mask_of(id);
            let mean_entropy = crate::grid::mean_over_instance(&uncertainty[f], &pred_nuclei[f], id)?
                .finite()
                .expect("present instance has pixels");
            let score = scores[f].get(&id).copied().unwrap_or(1.0 - mean_entropy);
            let mut overlaps = Vec::new();
            for (g, gm) in &gt_masks {
                let v = iou(&mask, gm)?;
                if v > 0.0 {
                    overlaps.push((*g, v));
                }
            }
            detections.push(Detection { frame: f, id, score, mean_entropy, overlaps });
        }
    }
    Ok((detections, gt_index))
}

// ---------------------------------------------------------------------------
// Flow end-point error
// ---------------------------------------------------------------------------

/// Mean Euclidean end-point error between two flows over a region.
pub fn flow_epe(est: &FlowField, gt: &FlowField, region: &Mask) -> Result<f64, MetricsError> {
    crate::grid::check_dims(est.width(), est.height(), gt.width(), gt.height())?;
    crate::grid::check_dims(est.width(), est.height(), region.width(), region.height())?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (x, y) in region.pixels() {
        let (eu, ev) = est.at(x, y);
        let (gu, gv) = gt.at(x, y);
        let du = eu as f64 - gu as f64;
        let dv = ev as f64 - gv as f64;
        sum += (du * du + dv * dv).sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyRegion);
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagate::UpdateRecord;

    fn labels_with_block(w: usize, h: usize, id: u32, x0: usize, y0: usize, side: usize) -> LabelMap {
        let mut m = LabelMap::new(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, id);
            }
        }
        m
    }

    fn record(frame: usize, id: u32, action: UpdateAction) -> UpdateRecord {
        UpdateRecord {
            track_id: 0,
            frame,
            instance_id: Some(id),
            action,
            sources: vec![],
            source_ubar: vec![],
            target_ubar: 1.0,
            nucleus_was_empty: action == UpdateAction::Interpolated,
        }
    }

    #[test]
    fn perfect_predictions_are_all_non_updated() {
        let cells = vec![labels_with_block(16, 16, 1, 2, 2, 10)];
        let nuclei = vec![labels_with_block(16, 16, 1, 5, 5, 4)];
        let report = mean_iou_by_category(&nuclei, &cells, &nuclei, &cells, &UpdateLog::default())
            .unwrap();
        assert_eq!(report.all.count, 1);
        assert_eq!(report.non_updated.count, 1);
        assert_eq!(report.all.mean_iou, 1.0);
        assert_eq!(report.updated.count, 0);
        assert_eq!(report.interpolated.count, 0);
    }

    #[test]
    fn count_identity_holds() {
        let cells: Vec<LabelMap> =
            (0..2).map(|_| labels_with_block(16, 16, 1, 2, 2, 10)).collect();
        let gt_nuclei: Vec<LabelMap> =
            (0..2).map(|_| labels_with_block(16, 16, 1, 5, 5, 4)).collect();
        // prediction misses the nucleus in frame 0, matches in frame 1
        let pred_nuclei = vec![LabelMap::new(16, 16), labels_with_block(16, 16, 1, 5, 5, 4)];
        let log = UpdateLog {
            records: vec![record(0, 1, UpdateAction::Interpolated)],
        };
        let report =
            mean_iou_by_category(&pred_nuclei, &cells, &gt_nuclei, &cells, &log).unwrap();
        assert_eq!(
            report.all.count,
            report.updated.count + report.interpolated.count + report.non_updated.count
        );
        assert_eq!(report.interpolated.count, 1);
        assert_eq!(report.interpolated.mean_iou, 0.0);
    }

    #[test]
    fn absent_nucleus_without_log_entry_counts_as_non_updated() {
        let cells = vec![labels_with_block(16, 16, 1, 2, 2, 10)];
        let gt_nuclei = vec![labels_with_block(16, 16, 1, 5, 5, 4)];
        let pred_nuclei = vec![LabelMap::new(16, 16)];
        let report = mean_iou_by_category(
            &pred_nuclei,
            &cells,
            &gt_nuclei,
            &cells,
            &UpdateLog::default(),
        )
        .unwrap();
        assert_eq!(report.non_updated.count, 1);
        assert_eq!(report.all.mean_iou, 0.0);
    }

    #[test]
    fn empty_ground_truth_errors() {
        let empty = vec![LabelMap::new(8, 8)];
        let err = mean_iou_by_category(&empty, &empty, &empty, &empty, &UpdateLog::default());
        assert!(matches!(err, Err(MetricsError::EmptyGroundTruth)));
    }

    fn det(frame: usize, id: u32, score: f64, entropy: f64, overlaps: Vec<(usize, f64)>) -> Detection {
        Detection { frame, id, score, mean_entropy: entropy, overlaps }
    }

    #[test]
    fn ap_trivial_cases() {
        let perfect = vec![det(0, 1, 0.9, 0.1, vec![(0, 1.0)])];
        assert_eq!(average_precision(&perfect, 1, 0.5, ScoreMode::Softmax), 1.0);
        assert_eq!(average_precision(&[], 1, 0.5, ScoreMode::Softmax), 0.0);
        assert_eq!(average_precision(&[], 0, 0.5, ScoreMode::Softmax), 1.0);
        assert_eq!(average_precision(&perfect, 0, 0.5, ScoreMode::Softmax), 0.0);
    }

    #[test]
    fn ap_correct_detection_ranked_second() {
        // wrong detection outranks the right one: precisions (0, 1/2) at
        // recalls (0, 1), all-point interpolation gives 0.5
        let dets = vec![
            det(0, 1, 0.9, 0.1, vec![]),
            det(0, 2, 0.8, 0.2, vec![(0, 0.9)]),
        ];
        let ap = average_precision(&dets, 1, 0.5, ScoreMode::Softmax);
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_every_detection_correct_is_one_for_any_ranking() {
        let dets: Vec<Detection> = (0..6)
            .map(|i| det(0, i as u32, (i as f64 * 37.0) % 5.0, 0.0, vec![(i, 0.8)]))
            .collect();
        assert_eq!(average_precision(&dets, 6, 0.5, ScoreMode::Softmax), 1.0);
        assert_eq!(average_precision(&dets, 6, 0.75, ScoreMode::Softmax), 1.0);
    }

    #[test]
    fn ap_is_rank_invariant_under_monotone_score_maps() {
        let dets = vec![
            det(0, 1, 0.9, 0.3, vec![(0, 0.8)]),
            det(0, 2, 0.7, 0.1, vec![(1, 0.6)]),
            det(0, 3, 0.5, 0.9, vec![]),
            det(1, 4, 0.3, 0.5, vec![(2, 0.55)]),
        ];
        let base = average_precision(&dets, 4, 0.5, ScoreMode::Softmax);
        for transform in [|s: f64| 2.0 * s + 1.0, |s: f64| s.exp(), |s: f64| s.powi(3)] {
            let mapped: Vec<Detection> = dets
                .iter()
                .map(|d| Detection { score: transform(d.score), ..d.clone() })
                .collect();
            assert_eq!(average_precision(&mapped, 4, 0.5, ScoreMode::Softmax), base);
        }
    }

    #[test]
    fn entropy_mode_ranks_ascending() {
        // the low-entropy detection is correct, the high-entropy one is not;
        // entropy ranking puts the correct one first: AP = 1
        let dets = vec![
            det(0, 1, 0.2, 0.9, vec![]),
            det(0, 2, 0.1, 0.1, vec![(0, 0.8)]),
        ];
        assert_eq!(average_precision(&dets, 1, 0.5, ScoreMode::Entropy), 1.0);
        // softmax ranking puts the wrong one first: AP = 0.5
        assert_eq!(average_precision(&dets, 1, 0.5, ScoreMode::Softmax), 0.5);
    }

    #[test]
    fn epe_examples() {
        let gt = FlowField::constant(8, 8, 1.0, 2.0, (0, 1));
        let mut region = Mask::new(8, 8);
        for y in 2..6 {
            for x in 2..6 {
                region.set(x, y, true);
            }
        }
        assert_eq!(flow_epe(&gt, &gt, &region).unwrap(), 0.0);
        let shifted = FlowField::constant(8, 8, 2.0, 2.0, (0, 1));
        assert!((flow_epe(&shifted, &gt, &region).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            flow_epe(&gt, &gt, &Mask::new(8, 8)),
            Err(MetricsError::EmptyRegion)
        ));
    }

    #[test]
    fn epe_matches_direct_sum() {
        let mut rng = crate::rng::stream_rng(5, 5);
        use rand::Rng;
        let (w, h) = (12usize, 12usize);
        let mk = |rng: &mut rand_chacha::ChaCha12Rng| {
            let u: Vec<f32> = (0..w * h).map(|_| rng.random_range(-4.0..4.0)).collect();
            let v: Vec<f32> = (0..w * h).map(|_| rng.random_range(-4.0..4.0)).collect();
            FlowField::from_components_auto_bound(w, h, u, v, (0, 1)).unwrap()
        };
        let est = mk(&mut rng);
        let gt = mk(&mut rng);
        let mut region = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                region.set(x, y, (x + y) % 3 != 0);
            }
        }
        let got = flow_epe(&est, &gt, &region).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for (x, y) in region.pixels() {
            let (a, b) = est.at(x, y);
            let (c, d) = gt.at(x, y);
            sum += (((a - c) as f64).powi(2) + ((b - d) as f64).powi(2)).sqrt();
            n += 1;
        }
        assert!((got - sum / n as f64).abs() < 1e-12);
    }
}
