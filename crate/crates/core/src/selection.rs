//! Group query selection.
//!
//! Predictions matched to a ground truth are positives. Every other
//! prediction is scored by its best GIoU against the ground truths (its
//! "GIoU metric") and joins that ground truth's cluster; negatives scoring
//! above the threshold are hard negatives, the rest easy negatives.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::{bipartite_match, Assignment, MatchWeights};
use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::matrix::Matrix;

/// Per-query class probabilities and boxes of one detector output.
///
/// `class_probs` has one row per query. Its columns are the object classes,
/// optionally followed by a trailing no-object column.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub class_probs: Matrix,
    pub boxes: Vec<BBox>,
}

impl PredictionSet {
    pub fn new(class_probs: Matrix, boxes: Vec<BBox>) -> Result<Self> {
        if class_probs.rows() != boxes.len() {
            return Err(Error::Invalid(format!(
                "{} score rows for {} boxes",
                class_probs.rows(),
                boxes.len()
            )));
        }
        if let Some(p) = class_probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invalid(format!("class score {p} outside [0, 1]")));
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(PredictionSet { class_probs, boxes })
    }

    pub fn num_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn num_columns(&self) -> usize {
        self.class_probs.cols()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox>,
}

impl GroundTruthSet {
    pub fn new(classes: Vec<usize>, boxes: Vec<BBox>) -> Result<Self> {
        if classes.len() != boxes.len() {
            return Err(Error::Invalid(format!(
                "{} classes for {} boxes",
                classes.len(),
                boxes.len()
            )));
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(GroundTruthSet { classes, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GqsConfig {
    /// Negatives with a GIoU metric strictly above this become hard negatives.
    pub giou_threshold: f64,
    /// Keep at most this many hard negatives per ground truth (highest metric first).
    pub per_gt_cap: Option<usize>,
}

impl Default for GqsConfig {
    fn default() -> Self {
        GqsConfig {
            giou_threshold: 0.0,
            per_gt_cap: None,
        }
    }
}

impl GqsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..1.0).contains(&self.giou_threshold) {
            return Err(Error::Config(format!(
                "giou_threshold must lie in [-1, 1), got {}",
                self.giou_threshold
            )));
        }
        if self.per_gt_cap == Some(0) {
            return Err(Error::Config("per_gt_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GqsResult {
    pub positive_indices: Vec<usize>,
    pub hard_negative_indices: Vec<usize>,
    pub easy_negative_indices: Vec<usize>,
    /// Query matched to each ground truth, by ground-truth index.
    pub positive_of_gt: Vec<Option<usize>>,
    /// GIoU metric of every scored query; positives carry 1.
    pub giou_metric: BTreeMap<usize, f64>,
    /// Ground-truth cluster of every negative.
    pub cluster_of: BTreeMap<usize, usize>,
    /// Positives and hard negatives, ascending.
    pub selected_indices: Vec<usize>,
}

impl GqsResult {
    /// Hard negatives assigned to ground truth `gt`, in ascending query order.
    pub fn hard_negatives_of(&self, gt: usize) -> Vec<usize> {
        self.hard_negative_indices
            .iter()
            .copied()
            .filter(|i| self.cluster_of.get(i) == Some(&gt))
            .collect()
    }
}

/// Assigned rows are positives; everything else is negative. Both ascending.
pub fn split_pos_neg(assignment: &Assignment, n_q: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n_q).partition(|&i| assignment.row_to_col.get(i).copied().flatten().is_some())
}

/// Best GIoU of each negative against the ground truths and the index of
/// that ground truth (lowest index wins ties). Empty when there are no
/// ground truths.
pub fn giou_metric_and_cluster(
    negatives: &[usize],
    preds: &PredictionSet,
    gts: &GroundTruthSet,
) -> (BTreeMap<usize, f64>, BTreeMap<usize, usize>) {
    let mut evaluations = 0;
    giou_metric_and_cluster_counted(negatives, preds, gts, &mut evaluations)
}

pub fn giou_metric_and_cluster_counted(
    negatives: &[usize],
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    counter: &mut u64,
) -> (BTreeMap<usize, f64>, BTreeMap<usize, usize>) {
    let mut metric = BTreeMap::new();
    let mut cluster = BTreeMap::new();
    if gts.is_empty() {
        return (metric, cluster);
    }
    for &i in negatives {
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, g) in gts.boxes.iter().enumerate() {
            *counter += 1;
            let v = giou(&preds.boxes[i], g);
            if v > best.0 {
                best = (v, j);
            }
        }
        metric.insert(i, best.0);
        cluster.insert(i, best.1);
    }
    (metric, cluster)
}

/// Splits predictions into positives, hard negatives and easy negatives.
pub fn gqs(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    cfg: &GqsConfig,
    assignment: &Assignment,
) -> Result<GqsResult> {
    let mut evaluations = 0;
    gqs_counted(preds, gts, cfg, assignment, &mut evaluations)
}

pub fn gqs_counted(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    cfg: &GqsConfig,
    assignment: &Assignment,
    counter: &mut u64,
) -> Result<GqsResult> {
    cfg.validate()?;
    let n_q = preds.num_queries();
    if assignment.row_to_col.len() != n_q {
        return Err(Error::Contract(format!(
            "assignment covers {} rows but there are {n_q} predictions",
            assignment.row_to_col.len()
        )));
    }
    let (positives, negatives) = split_pos_neg(assignment, n_q);
    let (mut metric, cluster) = giou_metric_and_cluster_counted(&negatives, preds, gts, counter);

    let mut per_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &negatives {
        if let (Some(&g), Some(&c)) = (metric.get(&i), cluster.get(&i)) {
            if g > cfg.giou_threshold {
                per_cluster.entry(c).or_default().push(i);
            }
        }
    }
    let mut hard = Vec::new();
    for members in per_cluster.values_mut() {
        if let Some(cap) = cfg.per_gt_cap {
            members.sort_by(|a, b| metric[b].total_cmp(&metric[a]).then(a.cmp(b)));
            members.truncate(cap);
        }
        hard.extend_from_slice(members);
    }
    hard.sort_unstable();
    let easy: Vec<usize> = negatives
        .iter()
        .copied()
        .filter(|i| hard.binary_search(i).is_err())
        .collect();

    for &p in &positives {
        metric.insert(p, 1.0);
    }
    let mut selected: Vec<usize> = positives.iter().chain(&hard).copied().collect();
    selected.sort_unstable();

    Ok(GqsResult {
        positive_of_gt: assignment.col_to_row(gts.len()),
        positive_indices: positives,
        hard_negative_indices: hard,
        easy_negative_indices: easy,
        giou_metric: metric,
        cluster_of: cluster,
        selected_indices: selected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryStatRow {
    pub threshold: f64,
    pub avg_queries_per_gt: f64,
    pub num_gt_objects: usize,
}

/// Mean number of queries tied to each ground-truth object at each GIoU
/// threshold: the matched positive plus the negatives of its cluster whose
/// metric exceeds the threshold.
pub fn query_stats(
    samples: &[(PredictionSet, GroundTruthSet)],
    thresholds: &[f64],
    w: &MatchWeights,
) -> Result<Vec<QueryStatRow>> {
    let mut counts = vec![0usize; thresholds.len()];
    let mut num_gt = 0usize;
    for (preds, gts) in samples {
        if gts.is_empty() {
            continue;
        }
        let assignment = bipartite_match(preds, gts, w)?;
        let (_, negatives) = split_pos_neg(&assignment, preds.num_queries());
        let (metric, _) = giou_metric_and_cluster(&negatives, preds, gts);
        num_gt += gts.len();
        for (slot, &tau) in counts.iter_mut().zip(thresholds) {
            *slot += gts.len() + metric.values().filter(|&&g| g > tau).count();
        }
    }
    if num_gt == 0 {
        return Ok(Vec::new());
    }
    Ok(thresholds
        .iter()
        .zip(counts)
        .map(|(&threshold, c)| QueryStatRow {
            threshold,
            avg_queries_per_gt: c as f64 / num_gt as f64,
            num_gt_objects: num_gt,
        })
        .collect())
}

pub fn write_query_stats_csv(rows: &[QueryStatRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "threshold,avg_queries_per_gt,num_gt_objects")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.threshold, r.avg_queries_per_gt, r.num_gt_objects)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn preds_from_boxes(boxes: Vec<BBox>) -> PredictionSet {
        let n = boxes.len();
        PredictionSet::new(Matrix::from_fn(n, 2, |_, _| 0.5), boxes).unwrap()
    }

    #[test]
    fn split_examples() {
        let a = Assignment::empty(4);
        assert_eq!(split_pos_neg(&a, 4), (vec![], vec![0, 1, 2, 3]));
        let a = Assignment {
            row_to_col: vec![None, Some(0), None, Some(1)],
            total_cost: 0.0,
        };
        assert_eq!(split_pos_neg(&a, 4), (vec![1, 3], vec![0, 2]));
    }

    #[test]
    fn metric_and_cluster_examples() {
        let g0 = bx(0.1, 0.1, 0.3, 0.3);
        let g1 = bx(0.6, 0.6, 0.9, 0.9);
        let gts = GroundTruthSet::new(vec![0, 1], vec![g0, g1]).unwrap();
        let preds = preds_from_boxes(vec![g0, bx(0.62, 0.6, 0.9, 0.88)]);
        let (m, c) = giou_metric_and_cluster(&[0, 1], &preds, &gts);
        assert_eq!(m[&0], 1.0);
        assert_eq!(c[&0], 0);
        assert_eq!(c[&1], 1);
        assert_eq!(m[&1], giou(&preds.boxes[1], &g1));

        // Equal GIoU against two identical ground truths: lowest index wins.
        let twin = GroundTruthSet::new(vec![0, 1], vec![g1, g1]).unwrap();
        let (_, c) = giou_metric_and_cluster(&[1], &preds, &twin);
        assert_eq!(c[&1], 0);

        let none = GroundTruthSet::default();
        let (m, c) = giou_metric_and_cluster(&[0, 1], &preds, &none);
        assert!(m.is_empty() && c.is_empty());
    }

    #[test]
    fn rowwise_max_oracle() {
        // Boxes chosen so the GIoU row is (-0.2, 0.7) up to geometry.
        let g0 = bx(0.0, 0.0, 0.1, 0.1);
        let g1 = bx(0.5, 0.5, 0.9, 0.9);
        let p = bx(0.5, 0.5, 0.9, 0.8);
        let gts = GroundTruthSet::new(vec![0, 0], vec![g0, g1]).unwrap();
        let preds = preds_from_boxes(vec![p]);
        let row = [giou(&p, &g0), giou(&p, &g1)];
        let (m, c) = giou_metric_and_cluster(&[0], &preds, &gts);
        assert!(row[0] < 0.0 && row[1] > 0.0);
        assert_eq!(m[&0], row[0].max(row[1]));
        assert_eq!(c[&0], 1);
    }

    /// One ground truth; query 0 is the positive, queries 1..=3 are negatives
    /// with GIoU metrics 0.7, 0.3 and -0.2 (from box widths chosen below).
    fn three_negatives() -> (PredictionSet, GroundTruthSet, Assignment) {
        let gt = bx(0.0, 0.0, 1.0, 0.5);
        // A box [0, w] x [0, 0.5] nested in the ground truth has GIoU = w.
        let p07 = bx(0.0, 0.0, 0.7, 0.5);
        let p03 = bx(0.0, 0.0, 0.3, 0.5);
        // Disjoint box: GIoU = -(enclosing - union) / enclosing.
        let far = bx(0.0, 0.7, 1.0, 1.0);
        let preds = preds_from_boxes(vec![gt, p07, p03, far]);
        let gts = GroundTruthSet::new(vec![0], vec![gt]).unwrap();
        let a = Assignment {
            row_to_col: vec![Some(0), None, None, None],
            total_cost: 0.0,
        };
        (preds, gts, a)
    }

    #[test]
    fn gqs_threshold_and_cap_examples() {
        let (preds, gts, a) = three_negatives();
        let g_far = giou(&preds.boxes[3], &gts.boxes[0]);
        assert!((g_far + 0.2).abs() < 1e-12);

        let r = gqs(&preds, &gts, &GqsConfig { giou_threshold: 0.5, per_gt_cap: None }, &a).unwrap();
        assert_eq!(r.hard_negative_indices, vec![1]);
        assert_eq!(r.easy_negative_indices, vec![2, 3]);
        assert_eq!(r.selected_indices, vec![0, 1]);

        let r = gqs(&preds, &gts, &GqsConfig::default(), &a).unwrap();
        assert_eq!(r.hard_negative_indices, vec![1, 2]);
        assert_eq!(r.giou_metric[&0], 1.0);
        assert!((r.giou_metric[&1] - 0.7).abs() < 1e-12);
        assert!((r.giou_metric[&2] - 0.3).abs() < 1e-12);

        let r = gqs(&preds, &gts, &GqsConfig { giou_threshold: 0.0, per_gt_cap: Some(1) }, &a).unwrap();
        assert_eq!(r.hard_negative_indices, vec![1]);
        assert_eq!(r.positive_of_gt, vec![Some(0)]);
    }

    #[test]
    fn gqs_config_validation() {
        assert!(GqsConfig { giou_threshold: 1.0, per_gt_cap: None }.validate().is_err());
        assert!(GqsConfig { giou_threshold: -1.0, per_gt_cap: None }.validate().is_ok());
        assert!(GqsConfig { giou_threshold: 0.0, per_gt_cap: Some(0) }.validate().is_err());
    }

    #[test]
    fn positive_kept_even_below_threshold() {
        let gt = bx(0.0, 0.0, 0.2, 0.2);
        let far = bx(0.7, 0.7, 0.9, 0.9);
        let preds = preds_from_boxes(vec![far]);
        let gts = GroundTruthSet::new(vec![0], vec![gt]).unwrap();
        let a = bipartite_match(&preds, &gts, &MatchWeights::default()).unwrap();
        let r = gqs(&preds, &gts, &GqsConfig { giou_threshold: 0.5, per_gt_cap: None }, &a).unwrap();
        assert_eq!(r.selected_indices, vec![0]);
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let (cx, cy): (f64, f64) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        let (w, h): (f64, f64) = (rng.random_range(0.02..0.5), rng.random_range(0.02..0.5));
        bx(
            (cx - w / 2.0).max(0.0),
            (cy - h / 2.0).max(0.0),
            (cx + w / 2.0).min(1.0),
            (cy + h / 2.0).min(1.0),
        )
    }

    fn random_scene(rng: &mut ChaCha8Rng, n_q: usize, n_gt: usize) -> (PredictionSet, GroundTruthSet) {
        let k = 3;
        let probs = Matrix::from_fn(n_q, k, |_, _| rng.random_range(0.0..1.0));
        let gt_boxes: Vec<BBox> = (0..n_gt).map(|_| random_box(rng)).collect();
        let boxes = (0..n_q).map(|_| random_box(rng)).collect();
        let classes = (0..n_gt).map(|_| rng.random_range(0..k)).collect();
        (
            PredictionSet::new(probs, boxes).unwrap(),
            GroundTruthSet::new(classes, gt_boxes).unwrap(),
        )
    }

    /// Recounts query statistics from scratch, without the GQS machinery.
    fn brute_force_stats(samples: &[(PredictionSet, GroundTruthSet)], tau: f64) -> f64 {
        let mut total = 0usize;
        let mut objects = 0usize;
        for (p, g) in samples {
            let a = bipartite_match(p, g, &MatchWeights::default()).unwrap();
            for j in 0..g.len() {
                objects += 1;
                total += 1;
                for i in 0..p.num_queries() {
                    if a.row_to_col[i].is_some() {
                        continue;
                    }
                    let scores: Vec<f64> = g.boxes.iter().map(|b| giou(&p.boxes[i], b)).collect();
                    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let owner = scores.iter().position(|&s| s == best).unwrap();
                    if owner == j && best > tau {
                        total += 1;
                    }
                }
            }
        }
        total as f64 / objects as f64
    }

    #[test]
    fn query_stats_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<_> = (0..5)
            .map(|_| {
                let n_gt = rng.random_range(1..=3);
                random_scene(&mut rng, 12, n_gt)
            })
            .collect();
        let taus = [-0.5, 0.0, 0.25, 0.5, 1.0];
        let rows = query_stats(&samples, &taus, &MatchWeights::default()).unwrap();
        assert_eq!(rows.len(), taus.len());
        for (row, &tau) in rows.iter().zip(&taus) {
            assert!((row.avg_queries_per_gt - brute_force_stats(&samples, tau)).abs() < 1e-12);
        }
        assert_eq!(rows.last().unwrap().avg_queries_per_gt, 1.0);
        for w in rows.windows(2) {
            assert!(w[0].avg_queries_per_gt >= w[1].avg_queries_per_gt);
        }
        assert!(query_stats(&[], &taus, &MatchWeights::default()).unwrap().is_empty());

        let mut csv = Vec::new();
        write_query_stats_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("threshold,avg_queries_per_gt,num_gt_objects\n"));
        assert_eq!(text.lines().count(), taus.len() + 1);
    }

    proptest! {
        #[test]
        fn partition_and_monotonicity(seed in 0u64..10_000, n_gt in 0usize..4, t1 in -1.0..0.99f64, t2 in -1.0..0.99f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (preds, gts) = random_scene(&mut rng, 10, n_gt);
            let a = bipartite_match(&preds, &gts, &MatchWeights::default()).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let r_lo = gqs(&preds, &gts, &GqsConfig { giou_threshold: lo, per_gt_cap: None }, &a).unwrap();
            let r_hi = gqs(&preds, &gts, &GqsConfig { giou_threshold: hi, per_gt_cap: None }, &a).unwrap();
            for r in [&r_lo, &r_hi] {
                let mut all: Vec<usize> = r.positive_indices.iter()
                    .chain(&r.hard_negative_indices)
                    .chain(&r.easy_negative_indices)
                    .copied()
                    .collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..10).collect::<Vec<_>>());
                prop_assert_eq!(r.positive_indices.len(), n_gt);
                if n_gt > 0 {
                    prop_assert_eq!(r.cluster_of.len(), 10 - n_gt);
                }
            }
            for i in &r_hi.hard_negative_indices {
                prop_assert!(r_lo.hard_negative_indices.contains(i));
                prop_assert!(r_hi.giou_metric[i] > hi);
            }
            for i in &r_hi.easy_negative_indices {
                if let Some(g) = r_hi.giou_metric.get(i) {
                    prop_assert!(*g <= hi);
                }
            }
        }
    }
}
