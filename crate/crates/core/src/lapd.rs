//! Local aligned prediction distillation.
//!
//! Teacher and student predictions are paired without a global N_q x N_q
//! matching: positives pair through the ground truth they are matched to, and
//! hard negatives pair by a small Hungarian matching inside each ground
//! truth's cluster.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assignment::{bipartite_match, hungarian, match_cost_counted, Assignment, MatchWeights};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{diff, giou, BBox, CenterBox};
use crate::matrix::Matrix;
use crate::selection::{gqs, GqsConfig, GqsResult, GroundTruthSet, PredictionSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Positive,
    HardNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillPair {
    pub teacher: usize,
    pub student: usize,
    pub kind: PairKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillPairs {
    pub pairs: Vec<DistillPair>,
}

impl DistillPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn extend(&mut self, other: DistillPairs) {
        self.pairs.extend(other.pairs);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchStats {
    pub cost_entries_evaluated: u64,
    pub solver_time: Duration,
    pub total_time: Duration,
    pub pairs_made: usize,
}

/// Which pair kinds take part in prediction distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingConfig {
    pub positive_pairs: bool,
    pub hard_negative_pairs: bool,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            positive_pairs: true,
            hard_negative_pairs: true,
        }
    }
}

/// One pair per ground truth that has a positive on both sides.
pub fn pair_positives(teacher: &GqsResult, student: &GqsResult) -> DistillPairs {
    let pairs = teacher
        .positive_of_gt
        .iter()
        .zip(&student.positive_of_gt)
        .filter_map(|(t, s)| match (t, s) {
            (Some(t), Some(s)) => Some(DistillPair {
                teacher: *t,
                student: *s,
                kind: PairKind::Positive,
            }),
            _ => None,
        })
        .collect();
    DistillPairs { pairs }
}

/// Cost of pairing teacher prediction `i` with student prediction `j`. The
/// class term is the total variation distance between the two distributions.
pub fn pair_cost(
    teacher: &PredictionSet,
    i: usize,
    student: &PredictionSet,
    j: usize,
    w: &MatchWeights,
) -> f64 {
    let tv: f64 = teacher
        .class_probs
        .row(i)
        .iter()
        .zip(student.class_probs.row(j))
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * 0.5;
    let (a, b) = (&teacher.boxes[i], &student.boxes[j]);
    w.w_cls * tv + w.w_l1 * a.l1(b) + w.w_giou * (1.0 - giou(a, b))
}

pub fn pair_hard_negatives(
    teacher_gqs: &GqsResult,
    student_gqs: &GqsResult,
    teacher: &PredictionSet,
    student: &PredictionSet,
    w: &MatchWeights,
) -> Result<DistillPairs> {
    let mut evaluations = 0;
    pair_hard_negatives_counted(teacher_gqs, student_gqs, teacher, student, w, &mut evaluations)
}

/// Hungarian matching between the teacher's and the student's hard negatives
/// of each ground-truth cluster. Surplus members of the larger side stay
/// unpaired.
pub fn pair_hard_negatives_counted(
    teacher_gqs: &GqsResult,
    student_gqs: &GqsResult,
    teacher: &PredictionSet,
    student: &PredictionSet,
    w: &MatchWeights,
    counter: &mut u64,
) -> Result<DistillPairs> {
    let n_gt = teacher_gqs.positive_of_gt.len().max(student_gqs.positive_of_gt.len());
    let mut pairs = Vec::new();
    for gt in 0..n_gt {
        let ts = teacher_gqs.hard_negatives_of(gt);
        let ss = student_gqs.hard_negatives_of(gt);
        if ts.is_empty() || ss.is_empty() {
            continue;
        }
        let cost = Matrix::from_fn(ts.len(), ss.len(), |a, b| {
            *counter += 1;
            pair_cost(teacher, ts[a], student, ss[b], w)
        });
        for (a, b) in hungarian(&cost)?.pairs() {
            pairs.push(DistillPair {
                teacher: ts[a],
                student: ss[b],
                kind: PairKind::HardNegative,
            });
        }
    }
    Ok(DistillPairs { pairs })
}

/// Everything local alignment computes for one image.
#[derive(Clone, Debug)]
pub struct LocalAlignment {
    pub pairs: DistillPairs,
    pub stats: MatchStats,
    pub teacher_gqs: GqsResult,
    pub student_gqs: GqsResult,
}

/// Matches the teacher to the ground truths, runs query selection on both
/// sides and pairs the selected predictions.
///
/// The student's ground-truth assignment is an input because supervised
/// training computes it anyway. Counted entries are the teacher's
/// `N_q x N_gt` matching costs plus every per-cluster pair cost.
#[allow(clippy::too_many_arguments)]
pub fn local_align(
    teacher: &PredictionSet,
    student: &PredictionSet,
    gts: &GroundTruthSet,
    student_assignment: &Assignment,
    gqs_cfg: &GqsConfig,
    w: &MatchWeights,
    pairing: &PairingConfig,
) -> Result<LocalAlignment> {
    let start = Instant::now();
    let mut stats = MatchStats::default();

    let teacher_assignment = if gts.is_empty() {
        Assignment::empty(teacher.num_queries())
    } else {
        let cost = match_cost_counted(teacher, gts, w, &mut stats.cost_entries_evaluated)?;
        let solve = Instant::now();
        let a = hungarian(&cost)?;
        stats.solver_time += solve.elapsed();
        a
    };
    let teacher_gqs = gqs(teacher, gts, gqs_cfg, &teacher_assignment)?;
    let student_gqs = gqs(student, gts, gqs_cfg, student_assignment)?;

    let mut pairs = DistillPairs::default();
    if pairing.positive_pairs {
        pairs.extend(pair_positives(&teacher_gqs, &student_gqs));
    }
    if pairing.hard_negative_pairs {
        let solve = Instant::now();
        pairs.extend(pair_hard_negatives_counted(
            &teacher_gqs,
            &student_gqs,
            teacher,
            student,
            w,
            &mut stats.cost_entries_evaluated,
        )?);
        stats.solver_time += solve.elapsed();
    }
    stats.pairs_made = pairs.len();
    stats.total_time = start.elapsed();
    Ok(LocalAlignment {
        pairs,
        stats,
        teacher_gqs,
        student_gqs,
    })
}

/// Full `N_q x N_q` teacher/student matching, as used by global alignment.
pub fn global_align_baseline(
    teacher: &PredictionSet,
    student: &PredictionSet,
    w: &MatchWeights,
) -> Result<(Vec<(usize, usize)>, MatchStats)> {
    let n = teacher.num_queries();
    if student.num_queries() != n {
        return Err(Error::Contract(format!(
            "global alignment needs equal query counts, got {n} and {}",
            student.num_queries()
        )));
    }
    let start = Instant::now();
    let mut stats = MatchStats::default();
    let cost = Matrix::from_fn(n, n, |i, j| {
        stats.cost_entries_evaluated += 1;
        pair_cost(teacher, i, student, j, w)
    });
    let solve = Instant::now();
    let pairs = hungarian(&cost)?.pairs();
    stats.solver_time = solve.elapsed();
    stats.pairs_made = pairs.len();
    stats.total_time = start.elapsed();
    Ok((pairs, stats))
}

/// Sum over pairs of `lambda_cls * KL(p_T || p_S) + lambda_box * (L1 + 1 - GIoU)`.
///
/// `student_probs` is `[N_q x K+1]` and `student_boxes` is `[N_q x 4]` in corner
/// form. Teacher values enter as constants.
pub fn lapd_loss(
    t: &mut Tape,
    pairs: &DistillPairs,
    teacher: &PredictionSet,
    student_probs: Var,
    student_boxes: Var,
    lambda_cls: f64,
    lambda_box: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(t.scalar(0.0));
    }
    let k = teacher.num_columns();
    if t.shape(student_probs) != [t.shape(student_probs)[0], k] {
        return Err(Error::Shape {
            op: "lapd_loss",
            lhs: t.shape(student_probs).to_vec(),
            rhs: vec![teacher.num_queries(), k],
        });
    }
    let s_idx: Vec<usize> = pairs.pairs.iter().map(|p| p.student).collect();
    let mut tp = Vec::with_capacity(pairs.len() * k);
    let mut tb = Vec::with_capacity(pairs.len() * 4);
    let mut entropy_term = 0.0;
    for p in &pairs.pairs {
        let row = teacher.class_probs.row(p.teacher);
        entropy_term += row.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        tp.extend_from_slice(row);
        tb.extend_from_slice(&teacher.boxes[p.teacher].to_array());
    }
    let n = pairs.len();
    let tp = t.constant(Tensor::new(vec![n, k], tp)?);
    let tb = t.constant(Tensor::new(vec![n, 4], tb)?);

    let sp = t.gather_rows(student_probs, &s_idx)?;
    let sp = t.clamp(sp, 1e-12, f64::INFINITY)?;
    let log_sp = t.log(sp)?;
    let cross = t.mul(tp, log_sp)?;
    let cross = t.sum(cross)?;
    let kl = t.neg(cross)?;
    let kl = t.add_scalar(kl, entropy_term)?;

    let sb = t.gather_rows(student_boxes, &s_idx)?;
    let l1 = diff::l1_rows(t, tb, sb)?;
    let l1 = t.sum(l1)?;
    let g = diff::giou_rows(t, tb, sb)?;
    let g = t.sum(g)?;
    let box_term = t.sub(l1, g)?;
    let box_term = t.add_scalar(box_term, n as f64)?;

    let kl = t.scale(kl, lambda_cls)?;
    let box_term = t.scale(box_term, lambda_box)?;
    t.add(kl, box_term)
}

/// One measured alignment run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_q: usize,
    pub n_gt: usize,
    pub tau: f64,
    pub method: String,
    pub cost_entries: u64,
    pub wall_time_us: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSummary {
    pub n_q: usize,
    pub n_gt: usize,
    pub tau: f64,
    pub trials: usize,
    pub seed: u64,
    pub local_cost_entries_mean: f64,
    pub global_cost_entries_mean: f64,
    pub cost_entry_ratio: f64,
    pub local_wall_time_us_median: f64,
    pub global_wall_time_us_median: f64,
    pub wall_time_ratio: f64,
    pub local_pairs_mean: f64,
    pub global_pairs_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: BenchSummary,
}

impl BenchReport {
    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "n_q,n_gt,tau,method,cost_entries,wall_time_us,pairs")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.3},{}",
                r.n_q, r.n_gt, r.tau, r.method, r.cost_entries, r.wall_time_us, r.pairs
            )?;
        }
        Ok(())
    }
}

const BENCH_CLASSES: usize = 5;

fn random_box(rng: &mut impl Rng) -> BBox {
    let (w, h): (f64, f64) = (rng.random_range(0.05..0.4), rng.random_range(0.05..0.4));
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    CenterBox { cx, cy, w, h }.to_corners().clipped_unit()
}

/// Random ground truths for the matching benchmark.
pub fn synthetic_ground_truths(rng: &mut impl Rng, n_gt: usize) -> GroundTruthSet {
    let boxes = (0..n_gt).map(|_| random_box(rng)).collect();
    let classes = (0..n_gt).map(|_| rng.random_range(0..BENCH_CLASSES)).collect();
    GroundTruthSet { classes, boxes }
}

/// Synthetic detector output: about 30% of the queries sit near a ground
/// truth with a boosted class score, the rest are random boxes.
pub fn synthetic_predictions(rng: &mut impl Rng, n_q: usize, gts: &GroundTruthSet) -> PredictionSet {
    let cols = BENCH_CLASSES + 1;
    let mut probs = Matrix::zeros(n_q, cols);
    let mut boxes = Vec::with_capacity(n_q);
    for i in 0..n_q {
        let mut logits: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        if !gts.is_empty() && rng.random_bool(0.3) {
            let j = rng.random_range(0..gts.len());
            let c = gts.boxes[j].to_center();
            let jitter = |rng: &mut dyn rand::RngCore, v: f64, s: f64| v + s * rng.random_range(-1.0..1.0);
            let b = CenterBox {
                cx: jitter(rng, c.cx, 0.1 * c.w),
                cy: jitter(rng, c.cy, 0.1 * c.h),
                w: c.w * rng.random_range(0.7..1.3),
                h: c.h * rng.random_range(0.7..1.3),
            };
            boxes.push(b.to_corners().clipped_unit());
            logits[gts.classes[j]] += 2.0;
        } else {
            boxes.push(random_box(rng));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            probs.set(i, c, e / z);
        }
    }
    PredictionSet { class_probs: probs, boxes }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn mean<T: Copy + Into<f64>>(values: impl Iterator<Item = T>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.into(), n + 1));
    sum / n as f64
}

/// Times local against global alignment on synthetic predictions. Each trial
/// draws fresh ground truths and teacher/student outputs from `seed`.
pub fn matching_benchmark(n_q: usize, n_gt: usize, tau: f64, trials: usize, seed: u64) -> Result<BenchReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if n_gt > n_q {
        return Err(Error::Config(format!("n_gt ({n_gt}) exceeds n_q ({n_q})")));
    }
    let gqs_cfg = GqsConfig {
        giou_threshold: tau,
        per_gt_cap: None,
    };
    gqs_cfg.validate()?;
    let w = MatchWeights::default();
    let pairing = PairingConfig::default();

    let mut rows = Vec::with_capacity(2 * trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let gts = synthetic_ground_truths(&mut rng, n_gt);
        let teacher = synthetic_predictions(&mut rng, n_q, &gts);
        let student = synthetic_predictions(&mut rng, n_q, &gts);
        let student_assignment = bipartite_match(&student, &gts, &w)?;

        let local = local_align(&teacher, &student, &gts, &student_assignment, &gqs_cfg, &w, &pairing)?;
        let (global_pairs, global) = global_align_baseline(&teacher, &student, &w)?;
        for (method, stats, pairs) in [
            ("local", local.stats, local.pairs.len()),
            ("global", global, global_pairs.len()),
        ] {
            rows.push(BenchRow {
                n_q,
                n_gt,
                tau,
                method: method.into(),
                cost_entries: stats.cost_entries_evaluated,
                wall_time_us: stats.total_time.as_secs_f64() * 1e6,
                pairs,
            });
        }
    }

    let of = |m: &'static str| rows.iter().filter(move |r| r.method == m);
    let local_entries = mean(of("local").map(|r| r.cost_entries as f64));
    let global_entries = mean(of("global").map(|r| r.cost_entries as f64));
    let local_time = median(&mut of("local").map(|r| r.wall_time_us).collect::<Vec<_>>());
    let global_time = median(&mut of("global").map(|r| r.wall_time_us).collect::<Vec<_>>());
    let summary = BenchSummary {
        n_q,
        n_gt,
        tau,
        trials,
        seed,
        local_cost_entries_mean: local_entries,
        global_cost_entries_mean: global_entries,
        cost_entry_ratio: local_entries / global_entries.max(1.0),
        local_wall_time_us_median: local_time,
        global_wall_time_us_median: global_time,
        wall_time_ratio: local_time / global_time.max(1e-3),
        local_pairs_mean: mean(of("local").map(|r| r.pairs as f64)),
        global_pairs_mean: mean(of("global").map(|r| r.pairs as f64)),
    };
    Ok(BenchReport { rows, summary })
}
