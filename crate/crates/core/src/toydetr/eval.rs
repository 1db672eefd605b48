use super::model::ToyDetector;
use super::scene::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::selection::{GroundTruthSet, PredictionSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// One detection per query: the most likely object class (the no-object
/// column excluded) with its probability as the score.
pub fn detections(preds: &PredictionSet, classes: usize) -> Vec<Detection> {
    (0..preds.num_queries())
        .map(|i| {
            let row = &preds.class_probs.row(i)[..classes];
            let (class, score) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, p)| if p > best.1 { (c, p) } else { best });
            Detection {
                class,
                score,
                bbox: preds.boxes[i],
            }
        })
        .collect()
}

/// Mean over classes with at least one ground truth of the all-point
/// interpolated average precision at `iou_threshold`. Detections are ranked
/// by score (ties by image, then by position), and each greedily claims the
/// unclaimed same-class ground truth of its image with the highest IoU.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[GroundTruthSet],
    classes: usize,
    iou_threshold: f64,
) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    if dets.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one image".into()));
    }
    let mut aps = Vec::new();
    for c in 0..classes {
        let n_gt: usize = gts.iter().map(|g| g.classes.iter().filter(|&&k| k == c).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, usize, &Detection)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().enumerate().map(move |(k, d)| (img, k, d)))
            .filter(|(_, _, d)| d.class == c)
            .collect();
        ranked.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        for (rank, (img, _, d)) in ranked.iter().enumerate() {
            let g = &gts[*img];
            let best = (0..g.len())
                .filter(|&j| g.classes[j] == c && !claimed[*img][j])
                .map(|j| (j, iou(&d.bbox, &g.boxes[j])))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            if let Some((j, v)) = best {
                if v >= iou_threshold {
                    claimed[*img][j] = true;
                    tp += 1;
                }
            }
            precision.push(tp as f64 / (rank + 1) as f64);
            recall.push(tp as f64 / n_gt as f64);
        }
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (p, r) in precision.iter().zip(&recall) {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Toy AP of `model` over `dataset`.
pub fn evaluate_toy_ap(model: &ToyDetector, dataset: &Dataset, iou_threshold: f64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Invalid("evaluation dataset is empty".into()));
    }
    let mut dets = Vec::with_capacity(dataset.len());
    for x in &dataset.patches {
        let (preds, _, _) = model.predict(x)?;
        dets.push(detections(&preds, model.num_classes()));
    }
    let gts: Vec<GroundTruthSet> = dataset.scenes.iter().map(|s| s.gts.clone()).collect();
    average_precision(&dets, &gts, model.num_classes(), iou_threshold)
}
