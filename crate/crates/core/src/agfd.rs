//! Attention-guided feature distillation.
//!
//! The teacher's first-decoder-layer cross-attention of the selected queries
//! is averaged, weighted by `1 + G_i`, into a spatial foreground mask. Teacher
//! and student encoder features are multiplied by the mask, standardized per
//! channel and compared with a mean squared error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{encoder_layer, init_encoder_layer, sine_position_encoding, Bound, ParamStore};

/// Floor on the per-channel standard deviation used by [`standardize`].
pub const STD_FLOOR: f64 = 1e-5;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Cross-attention of every query over the encoder positions, one row per query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    rows: Matrix,
}

impl AttentionStack {
    pub fn new(rows: Matrix) -> Result<Self> {
        for i in 0..rows.rows() {
            let row = rows.row(i);
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Invalid(format!("attention weight {v} in row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Invalid(format!("attention row {i} sums to {sum}")));
            }
        }
        Ok(AttentionStack { rows })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        AttentionStack::new(Matrix::from_vec(r, c, t.data().to_vec()))
    }

    pub fn num_queries(&self) -> usize {
        self.rows.rows()
    }

    pub fn num_positions(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, query: usize) -> &[f64] {
        self.rows.row(query)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }
}

/// Spatial weight per encoder position.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub weights: Vec<f64>,
}

impl ForegroundMask {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// The mask as a `[1 x P]` row, ready to broadcast over channels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.weights.len()], self.weights.clone()).expect("sized")
    }
}

/// `W = (1/|I|) * sum_{i in I} (1 + G_i) * A_i`.
pub fn foreground_mask(
    attn: &AttentionStack,
    selected: &[usize],
    g: &BTreeMap<usize, f64>,
) -> Result<ForegroundMask> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut weights = vec![0.0; attn.num_positions()];
    for &i in selected {
        if i >= attn.num_queries() {
            return Err(Error::Invalid(format!(
                "selected query {i} but only {} attention rows",
                attn.num_queries()
            )));
        }
        let gi = *g
            .get(&i)
            .ok_or_else(|| Error::Invalid(format!("no GIoU metric for selected query {i}")))?;
        let factor = 1.0 + gi;
        for (w, a) in weights.iter_mut().zip(attn.row(i)) {
            *w += factor * a;
        }
    }
    let n = selected.len() as f64;
    weights.iter_mut().for_each(|w| *w /= n);
    Ok(ForegroundMask { weights })
}

/// Per-channel standardization of `[C x P]` features over positions:
/// `(x - mean) / max(std, 1e-5)`. A constant channel maps to zeros.
pub fn standardize(t: &mut Tape, x: Var) -> Result<Var> {
    let mean = t.mean_axis(x, 1)?;
    let centered = t.sub(x, mean)?;
    let sq = t.square(centered)?;
    let var = t.mean_axis(sq, 1)?;
    let std = t.sqrt(var)?;
    let std = t.clamp(std, STD_FLOOR, f64::INFINITY)?;
    t.div(centered, std)
}

/// Masked feature-mimicking loss with the mask given as a `[1 x P]` variable.
pub fn agfd_loss_masked(t: &mut Tape, teacher: Var, student: Var, mask: Var) -> Result<Var> {
    let (ts, ss) = (t.shape(teacher).to_vec(), t.shape(student).to_vec());
    if ts.len() != 2 || ts != ss {
        return Err(Error::Shape {
            op: "agfd_loss",
            lhs: ts,
            rhs: ss,
        });
    }
    let ms = t.shape(mask).to_vec();
    if ms != [1, ts[1]] {
        return Err(Error::Shape {
            op: "agfd_loss mask",
            lhs: ts,
            rhs: ms,
        });
    }
    let wt = t.mul(teacher, mask)?;
    let ws = t.mul(student, mask)?;
    let bt = standardize(t, wt)?;
    let bs = standardize(t, ws)?;
    let diff = t.sub(bt, bs)?;
    let sq = t.square(diff)?;
    t.mean(sq)
}

/// Feature distillation loss between `[C x P]` teacher and student features.
pub fn agfd_loss(t: &mut Tape, teacher: Var, student: Var, mask: &ForegroundMask) -> Result<Var> {
    let m = t.constant(mask.to_tensor());
    agfd_loss_masked(t, teacher, student, m)
}

/// One encoder layer applied to the student's features inside the loss only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub enabled: bool,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            enabled: false,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

pub const ADAPTER_PREFIX: &str = "adapter";

impl AdapterConfig {
    /// Adds the adapter's parameters to `store`. Output projections start at
    /// zero, so the fresh adapter is exactly the identity.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Result<()> {
        if !self.enabled {
            return Err(Error::Contract("adapter is disabled".into()));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "adapter: {dim} channels do not split into {} heads",
                self.heads
            )));
        }
        init_encoder_layer(store, rng, ADAPTER_PREFIX, dim, self.ffn_dim, true);
        Ok(())
    }

    /// Applies the adapter to `[C x P]` features laid out on a `rows x cols` grid.
    pub fn apply(&self, t: &mut Tape, p: &Bound, features: Var, grid: (usize, usize)) -> Result<Var> {
        if !self.enabled {
            return Err(Error::Contract("adapter is disabled".into()));
        }
        let shape = t.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != grid.0 * grid.1 {
            return Err(Error::Shape {
                op: "adapter",
                lhs: shape,
                rhs: vec![grid.0 * grid.1],
            });
        }
        let tokens = t.transpose(features)?;
        let pos = t.constant(sine_position_encoding(grid.0, grid.1, shape[0]));
        let out = encoder_layer(t, p, ADAPTER_PREFIX, tokens, pos, self.heads)?;
        t.transpose(out)
    }
}

/// [`agfd_loss`] with the student's features passed through the adapter first.
pub fn agfd_loss_with_adapter(
    t: &mut Tape,
    p: &Bound,
    adapter: &AdapterConfig,
    teacher: Var,
    student_raw: Var,
    grid: (usize, usize),
    mask: &ForegroundMask,
) -> Result<Var> {
    let adapted = adapter.apply(t, p, student_raw, grid)?;
    agfd_loss(t, teacher, adapted, mask)
}

/// Writes `values` as an 8-bit binary PGM, min-max normalized. Returns the
/// raw (min, max). A constant map is written as all zeros.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<(f64, f64)> {
    if values.len() != width * height {
        return Err(Error::Invalid(format!(
            "{} values for a {width}x{height} heatmap",
            values.len()
        )));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| {
            if range > 0.0 {
                ((v - min) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok((min, max))
}
