//! Named parameter storage and the transformer building blocks shared by the
//! toy detector and the feature adapter.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Bound { store: self, vars }
    }
}

impl ParamStore {
    /// Associates already-recorded variables (one per entry, in store order)
    /// with this store's names.
    pub fn bound_from(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        Ok(Bound { store: self, vars })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Variables in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized")
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

/// Linear layer whose weights start at zero.
pub fn init_linear_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[1, dim], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[1, dim]));
}

pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize, zero_out: bool) {
    init_linear(store, rng, &format!("{prefix}.q"), dim, dim);
    // Keys carry no bias: softmax over keys cancels it, so it never trains.
    store.insert(format!("{prefix}.k.w"), xavier(rng, dim, dim));
    init_linear(store, rng, &format!("{prefix}.v"), dim, dim);
    if zero_out {
        init_linear_zero(store, &format!("{prefix}.o"), dim, dim);
    } else {
        init_linear(store, rng, &format!("{prefix}.o"), dim, dim);
    }
}

/// Pre-norm encoder layer: self-attention then feedforward, each residual.
/// With `zero_out` both residual branches start at exactly zero, so the layer
/// starts as the identity map.
pub fn init_encoder_layer(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    zero_out: bool,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, rng, &format!("{prefix}.attn"), dim, zero_out);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(store, rng, &format!("{prefix}.ff1"), dim, ffn_dim);
    if zero_out {
        init_linear_zero(store, &format!("{prefix}.ff2"), ffn_dim, dim);
    } else {
        init_linear(store, rng, &format!("{prefix}.ff2"), ffn_dim, dim);
    }
}

pub fn init_decoder_layer(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize, ffn_dim: usize) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, rng, &format!("{prefix}.self"), dim, false);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_attention(store, rng, &format!("{prefix}.cross"), dim, false);
    init_layer_norm(store, &format!("{prefix}.ln3"), dim);
    init_linear(store, rng, &format!("{prefix}.ff1"), dim, ffn_dim);
    init_linear(store, rng, &format!("{prefix}.ff2"), ffn_dim, dim);
}

pub fn linear(t: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = t.matmul(x, w)?;
    t.add(y, b)
}

/// Layer normalization over the last axis of a `[n x d]` matrix.
pub fn layer_norm(t: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    let normed = t.standardize_rows(x, 1e-5)?;
    let scaled = t.mul(normed, gamma)?;
    t.add(scaled, beta)
}

pub fn feedforward(t: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(t, p, &format!("{prefix}.ff1"), x)?;
    let h = t.relu(h)?;
    linear(t, p, &format!("{prefix}.ff2"), h)
}

/// Multi-head scaled dot-product attention.
///
/// Returns the projected output and the attention weights averaged over
/// heads (`[queries x keys]`, rows summing to one).
pub fn attention(
    t: &mut Tape,
    p: &Bound,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<(Var, Tensor)> {
    let q = linear(t, p, &format!("{prefix}.q"), query)?;
    let wk = p.var(&format!("{prefix}.k.w"))?;
    let k = t.matmul(key, wk)?;
    let v = linear(t, p, &format!("{prefix}.v"), value)?;
    let merged = t.attention(q, k, v, heads)?;
    let w = t.attention_weights(merged).expect("attention node");
    let (nq, nk) = (w.shape()[1], w.shape()[2]);
    let mut avg = vec![0.0; nq * nk];
    for chunk in w.data().chunks(nq * nk) {
        for (a, x) in avg.iter_mut().zip(chunk) {
            *a += x / heads as f64;
        }
    }
    let out = linear(t, p, &format!("{prefix}.o"), merged)?;
    Ok((out, Tensor::new(vec![nq, nk], avg)?))
}

/// Pre-norm encoder layer over `[positions x d]` features with additive
/// positional encoding on queries and keys.
pub fn encoder_layer(t: &mut Tape, p: &Bound, prefix: &str, x: Var, pos: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(t, p, &format!("{prefix}.ln1"), x)?;
    let qk = t.add(h, pos)?;
    let (a, _) = attention(t, p, &format!("{prefix}.attn"), qk, qk, h, heads)?;
    let x = t.add(x, a)?;
    let h = layer_norm(t, p, &format!("{prefix}.ln2"), x)?;
    let f = feedforward(t, p, prefix, h)?;
    t.add(x, f)
}

/// Pre-norm decoder layer. Returns the updated targets and the head-averaged
/// cross-attention of the queries over the memory positions.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    t: &mut Tape,
    p: &Bound,
    prefix: &str,
    tgt: Var,
    query_pos: Var,
    memory: Var,
    memory_pos: Var,
    heads: usize,
) -> Result<(Var, Tensor)> {
    let h = layer_norm(t, p, &format!("{prefix}.ln1"), tgt)?;
    let qk = t.add(h, query_pos)?;
    let (a, _) = attention(t, p, &format!("{prefix}.self"), qk, qk, h, heads)?;
    let tgt = t.add(tgt, a)?;

    let h = layer_norm(t, p, &format!("{prefix}.ln2"), tgt)?;
    let q = t.add(h, query_pos)?;
    let k = t.add(memory, memory_pos)?;
    let (c, cross) = attention(t, p, &format!("{prefix}.cross"), q, k, memory, heads)?;
    let tgt = t.add(tgt, c)?;

    let h = layer_norm(t, p, &format!("{prefix}.ln3"), tgt)?;
    let f = feedforward(t, p, prefix, h)?;
    Ok((t.add(tgt, f)?, cross))
}

/// Fixed 2-D sine/cosine positional encoding for a `rows x cols` grid,
/// `[rows*cols x dim]`, half the channels for each axis.
pub fn sine_position_encoding(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * dim;
            for (offset, coord, extent) in [(0, r, rows), (half, c, cols)] {
                let x = (coord as f64 + 0.5) / extent as f64 * std::f64::consts::TAU;
                for k in 0..half {
                    let freq = 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
                    let phase = x * 8.0 / freq;
                    data[base + offset + k] = if k % 2 == 0 { phase.sin() } else { phase.cos() };
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, dim], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_insert_replaces() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]));
        s.insert("b", Tensor::zeros(&[3]));
        s.insert("a", Tensor::full(&[2], 1.0));
        assert_eq!(s.len(), 2);
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(s.num_values(), 5);
    }

    #[test]
    fn zero_out_encoder_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        init_encoder_layer(&mut s, &mut rng, "enc", 8, 16, true);
        let mut t = Tape::new();
        let p = s.bind(&mut t, true);
        let x_val = normal_tensor(&mut rng, &[6, 8], 1.0);
        let x = t.constant(x_val.clone());
        let pos = t.constant(sine_position_encoding(2, 3, 8));
        let y = encoder_layer(&mut t, &p, "enc", x, pos, 2).unwrap();
        assert_eq!(t.value(y), &x_val);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        init_attention(&mut s, &mut rng, "a", 8, false);
        let mut t = Tape::new();
        let p = s.bind(&mut t, false);
        let q = t.constant(normal_tensor(&mut rng, &[3, 8], 1.0));
        let k = t.constant(normal_tensor(&mut rng, &[5, 8], 1.0));
        let (_, w) = attention(&mut t, &p, "a", q, k, k, 4).unwrap();
        assert_eq!(w.shape(), &[3, 5]);
        for r in 0..3 {
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        init_encoder_layer(&mut s, &mut rng, "e", 4, 6, false);
        let params = s.tensors();
        let x = normal_tensor(&mut rng, &[3, 4], 1.0);
        let pos = sine_position_encoding(1, 3, 4);
        let err = grad_check(
            |t, vars| {
                let bound = s.bound_from(vars.to_vec())?;
                let xv = t.constant(x.clone());
                let pv = t.constant(pos.clone());
                let y = encoder_layer(t, &bound, "e", xv, pv, 2)?;
                let sq = t.square(y)?;
                t.mean(sq)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
