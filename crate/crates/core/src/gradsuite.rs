//! Finite-difference checks of every training loss on small random instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agfd::{agfd_loss, agfd_loss_with_adapter, foreground_mask, AdapterConfig, AttentionStack, ForegroundMask};
use crate::assignment::{bipartite_match, MatchWeights};
use crate::autodiff::{grad_check_with_fault, OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::diff::center_to_corners;
use crate::geometry::BBox;
use crate::lapd::{lapd_loss, local_align, PairingConfig};
use crate::matrix::Matrix;
use crate::nn::{normal_tensor, ParamStore};
use crate::selection::{GqsConfig, GroundTruthSet, PredictionSet};
use crate::toydetr::{gt_loss, GtLossWeights};

/// Largest relative error a loss may show to pass.
pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn softmax_rows(t: &Tensor) -> Matrix {
    let (r, c) = t.dims2().expect("matrix");
    Matrix::from_fn(r, c, |i, j| {
        let row = t.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        (row[j] - max).exp() / z
    })
}

fn sigmoid_boxes(t: &Tensor) -> Vec<BBox> {
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    (0..t.shape()[0])
        .map(|i| {
            let r = t.row(i);
            crate::geometry::CenterBox {
                cx: s(r[0]),
                cy: s(r[1]),
                w: s(r[2]),
                h: s(r[3]),
            }
            .to_corners()
        })
        .collect()
}

/// Predictions recorded the way the detector head produces them: softmax
/// over logits and sigmoid center boxes turned into corners.
fn head(t: &mut Tape, logits: Var, raw_boxes: Var) -> Result<(Var, Var)> {
    let probs = t.softmax(logits, 1)?;
    let centers = t.sigmoid(raw_boxes)?;
    let boxes = center_to_corners(t, centers)?;
    Ok((probs, boxes))
}

fn random_gts(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> GroundTruthSet {
    let boxes = (0..n)
        .map(|_| {
            let (x, y): (f64, f64) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
            BBox::new(x, y, x + rng.random_range(0.1..0.4), y + rng.random_range(0.1..0.4)).expect("valid")
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    GroundTruthSet::new(labels, boxes).expect("valid")
}

/// Edges of `a` and `b` stay clear of one another along both axes and
/// neither box nests inside the other along either axis. Near those
/// configurations the box losses have kinks or exact plateaus, where central
/// differences measure rounding rather than slope.
fn general_position(a: &BBox, b: &BBox) -> bool {
    const MARGIN: f64 = 0.02;
    let axis = |a1: f64, a2: f64, b1: f64, b2: f64| {
        let (d1, d2) = (a1 - b1, a2 - b2);
        let overlap = a2.min(b2) - a1.max(b1);
        d1.abs() > MARGIN && d2.abs() > MARGIN && d1.signum() == d2.signum() && overlap.abs() > MARGIN
    };
    axis(a.x1, a.x2, b.x1, b.x2) && axis(a.y1, a.y2, b.y1, b.y2)
}

const MAX_DRAWS: usize = 1000;

fn random_mask(rng: &mut ChaCha8Rng, queries: usize, positions: usize) -> Result<ForegroundMask> {
    let logits = uniform(rng, &[queries, positions], -2.0, 2.0);
    let attn = AttentionStack::new(softmax_rows(&logits))?;
    let k = rng.random_range(1..=queries);
    let selected: Vec<usize> = (0..k).collect();
    let g: BTreeMap<usize, f64> = selected.iter().map(|&i| (i, rng.random_range(-0.9..0.9))).collect();
    foreground_mask(&attn, &selected, &g)
}

fn gt_instance(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let w = MatchWeights::default();
    for _ in 0..MAX_DRAWS {
        let n_q = rng.random_range(2..7);
        let classes = rng.random_range(1..5);
        let n_gt = rng.random_range(0..=n_q.min(3));
        let gts = random_gts(rng, n_gt, classes);
        let logits = uniform(rng, &[n_q, classes + 1], -2.0, 2.0);
        let raw = uniform(rng, &[n_q, 4], -1.5, 1.5);
        let preds = PredictionSet::new(softmax_rows(&logits), sigmoid_boxes(&raw))?;
        let assignment = bipartite_match(&preds, &gts, &w)?;
        if !assignment.pairs().into_iter().all(|(q, g)| general_position(&preds.boxes[q], &gts.boxes[g])) {
            continue;
        }
        let weights = GtLossWeights::default();
        return grad_check_with_fault(
            |t, v| {
                let (probs, boxes) = head(t, v[0], v[1])?;
                gt_loss(t, probs, boxes, &gts, &assignment, &weights)
            },
            &[logits, raw],
            STEP,
            fault,
        );
    }
    Err(Error::Contract("no well-conditioned gt_loss instance drawn".into()))
}

fn agfd_instance(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let c = rng.random_range(2..6);
    let p = rng.random_range(4..13);
    let student = uniform(rng, &[c, p], -2.0, 2.0);
    // A per-channel rescaling of the student plus noise. Standardization
    // cancels the scale, so the loss stays small next to its gradients.
    let mut teacher = student.clone();
    for ch in 0..c {
        let scale = rng.random_range(0.5..2.0);
        for x in &mut teacher.data_mut()[ch * p..(ch + 1) * p] {
            *x = scale * *x + rng.random_range(-0.05..0.05);
        }
    }
    let queries = rng.random_range(1..5);
    let mask = random_mask(rng, queries, p)?;
    grad_check_with_fault(
        |t, v| {
            let tv = t.constant(teacher.clone());
            agfd_loss(t, tv, v[0], &mask)
        },
        &[student],
        STEP,
        fault,
    )
}

fn agfd_adapter_instance(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let grid = (2, 3);
    let p = grid.0 * grid.1;
    let c = 4;
    let adapter = AdapterConfig {
        enabled: true,
        heads: 2,
        ffn_dim: 6,
    };
    let mut store = ParamStore::new();
    adapter.init(&mut store, rng, c)?;
    // The fresh adapter's zero output projections would hide most of its
    // gradient paths, so every weight is redrawn.
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let shape = store.get(name).expect("present").shape().to_vec();
        let mut fresh = normal_tensor(rng, &shape, 0.5);
        if name.ends_with("gamma") {
            fresh.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
        store.insert(name.clone(), fresh);
    }
    let student = uniform(rng, &[c, p], -2.0, 2.0);
    // A teacher near the adapted student keeps the loss small next to its
    // gradients, which lifts them clear of the rounding floor.
    let mut teacher = {
        let mut t = Tape::new();
        let bound = store.bind(&mut t, false);
        let s = t.constant(student.clone());
        let out = adapter.apply(&mut t, &bound, s, grid)?;
        t.value(out).clone()
    };
    teacher.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
    let mask = random_mask(rng, 3, p)?;
    let mut params = vec![student];
    params.extend(store.tensors());
    grad_check_with_fault(
        |t, v| {
            let bound = store.bound_from(v[1..].to_vec())?;
            let tv = t.constant(teacher.clone());
            agfd_loss_with_adapter(t, &bound, &adapter, tv, v[0], grid, &mask)
        },
        &params,
        STEP,
        fault,
    )
}

fn lapd_instance(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let w = MatchWeights::default();
    let gqs_cfg = GqsConfig {
        giou_threshold: -0.5,
        per_gt_cap: None,
    };
    for _ in 0..MAX_DRAWS {
        let n_q = rng.random_range(3..9);
        let classes = rng.random_range(1..4);
        let n_gt = rng.random_range(1..=n_q.min(3));
        let gts = random_gts(rng, n_gt, classes);
        let t_logits = uniform(rng, &[n_q, classes + 1], -2.0, 2.0);
        let t_raw = uniform(rng, &[n_q, 4], -1.5, 1.5);
        let teacher = PredictionSet::new(softmax_rows(&t_logits), sigmoid_boxes(&t_raw))?;
        // The student is a perturbed teacher, which keeps the loss small next
        // to its gradients.
        let mut logits = t_logits.clone();
        logits.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        let mut raw = t_raw.clone();
        raw.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.4..0.4));
        let student = PredictionSet::new(softmax_rows(&logits), sigmoid_boxes(&raw))?;
        let assignment = bipartite_match(&student, &gts, &w)?;
        let local = local_align(&teacher, &student, &gts, &assignment, &gqs_cfg, &w, &PairingConfig::default())?;
        let clean = local
            .pairs
            .pairs
            .iter()
            .all(|p| general_position(&teacher.boxes[p.teacher], &student.boxes[p.student]));
        if !clean {
            continue;
        }
        let weights = GtLossWeights::default();
        return grad_check_with_fault(
            |t, v| {
                let (probs, boxes) = head(t, v[0], v[1])?;
                lapd_loss(t, &local.pairs, &teacher, probs, boxes, weights.lambda_cls, weights.lambda_box)
            },
            &[logits, raw],
            STEP,
            fault,
        );
    }
    Err(Error::Contract("no well-conditioned lapd_loss instance drawn".into()))
}

type Instance = fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<f64>;

/// Names of the checked losses, in report order.
pub const LOSSES: [&str; 4] = ["gt_loss", "agfd_loss", "agfd_loss_with_adapter", "lapd_loss"];

/// Runs `instances` random instances of every loss. `fault` breaks one
/// backward rule on purpose.
pub fn loss_grad_suite(instances: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<LossCheck>> {
    let runs: [Instance; 4] = [gt_instance, agfd_instance, agfd_adapter_instance, lapd_instance];
    let mut out = Vec::with_capacity(runs.len());
    for (k, (name, run)) in LOSSES.iter().zip(runs).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(run(&mut rng, fault)?);
        }
        out.push(LossCheck {
            loss: name.to_string(),
            instances,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(out)
}
