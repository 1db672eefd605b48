use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::diff;
use crate::selection::GroundTruthSet;

/// Weights of the supervised set-prediction loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GtLossWeights {
    pub lambda_cls: f64,
    pub lambda_box: f64,
    /// Cross-entropy weight of queries supervised toward no-object.
    pub eos_weight: f64,
}

impl Default for GtLossWeights {
    fn default() -> Self {
        GtLossWeights {
            lambda_cls: 1.0,
            lambda_box: 2.5,
            eos_weight: 0.1,
        }
    }
}

impl GtLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_box", self.lambda_box),
            ("eos_weight", self.eos_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Cross-entropy toward the matched class (no-object for unmatched queries,
/// down-weighted) plus `L1 + 1 - GIoU` on matched boxes, summed over queries.
///
/// `probs` is `[N_q x K+1]` with the last column no-object; `boxes` is
/// `[N_q x 4]` in corner form.
pub fn gt_loss(
    t: &mut Tape,
    probs: Var,
    boxes: Var,
    gts: &GroundTruthSet,
    assignment: &Assignment,
    w: &GtLossWeights,
) -> Result<Var> {
    let (n, k1) = match t.shape(probs) {
        [n, k1] => (*n, *k1),
        s => return Err(Error::Contract(format!("class scores must be a matrix, got {s:?}"))),
    };
    if assignment.row_to_col.len() != n {
        return Err(Error::Contract(format!(
            "assignment covers {} queries, model produced {n}",
            assignment.row_to_col.len()
        )));
    }
    let mut target = vec![0.0; n * k1];
    let mut matched = Vec::new();
    let mut gt_boxes = Vec::new();
    for (i, col) in assignment.row_to_col.iter().enumerate() {
        match col {
            Some(j) => {
                let c = gts.classes[*j];
                if c + 1 >= k1 {
                    return Err(Error::Invalid(format!("class {c} outside the {k1}-way head")));
                }
                target[i * k1 + c] = 1.0;
                matched.push(i);
                gt_boxes.extend_from_slice(&gts.boxes[*j].to_array());
            }
            None => target[i * k1 + k1 - 1] = w.eos_weight,
        }
    }
    let target = t.constant(Tensor::new(vec![n, k1], target)?);
    let p = t.clamp(probs, 1e-12, f64::INFINITY)?;
    let logp = t.log(p)?;
    let ce = t.mul(target, logp)?;
    let ce = t.sum(ce)?;
    let cls = t.scale(ce, -w.lambda_cls)?;
    if matched.is_empty() {
        return Ok(cls);
    }

    let m = matched.len();
    let pred = t.gather_rows(boxes, &matched)?;
    let gt = t.constant(Tensor::new(vec![m, 4], gt_boxes)?);
    let l1 = diff::l1_rows(t, pred, gt)?;
    let l1 = t.sum(l1)?;
    let g = diff::giou_rows(t, pred, gt)?;
    let g = t.sum(g)?;
    let bx = t.sub(l1, g)?;
    let bx = t.add_scalar(bx, m as f64)?;
    let bx = t.scale(bx, w.lambda_box)?;
    t.add(cls, bx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::geometry::BBox;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn perfect_predictions_have_no_box_loss() {
        let gts = GroundTruthSet::new(vec![1], vec![bx(0.1, 0.1, 0.4, 0.5)]).unwrap();
        let a = Assignment {
            row_to_col: vec![None, Some(0)],
            total_cost: 0.0,
        };
        let mut t = Tape::new();
        let probs = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap());
        let boxes = t
            .constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 1.0], vec![0.1, 0.1, 0.4, 0.5]]).unwrap());
        let l = gt_loss(&mut t, probs, boxes, &gts, &a, &GtLossWeights::default()).unwrap();
        assert!(t.value(l).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn no_ground_truths_is_pure_no_object_loss() {
        let gts = GroundTruthSet::default();
        let a = Assignment::empty(2);
        let mut t = Tape::new();
        let probs = t.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap());
        let boxes = t.constant(Tensor::zeros(&[2, 4]));
        let w = GtLossWeights::default();
        let l = gt_loss(&mut t, probs, boxes, &gts, &a, &w).unwrap();
        let expect = -0.1 * (0.5f64.ln() + 0.8f64.ln());
        assert!((t.value(l).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let gts = GroundTruthSet::new(vec![0, 1], vec![bx(0.1, 0.1, 0.4, 0.5), bx(0.5, 0.2, 0.9, 0.6)]).unwrap();
        let a = Assignment {
            row_to_col: vec![Some(1), None, Some(0)],
            total_cost: 0.0,
        };
        let params = vec![
            Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8], vec![0.6, 0.3, 0.1]]).unwrap(),
            Tensor::from_rows(&[
                vec![0.45, 0.25, 0.8, 0.7],
                vec![0.0, 0.0, 0.3, 0.3],
                vec![0.15, 0.05, 0.35, 0.55],
            ])
            .unwrap(),
        ];
        let err = grad_check(
            |t, v| gt_loss(t, v[0], v[1], &gts, &a, &GtLossWeights::default()),
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
