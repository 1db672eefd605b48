//! Dense reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops return
//! [`Var`] handles; [`Tape::backward`] sweeps the recorded nodes in reverse.
//! Tapes are single-threaded; separate tapes share nothing.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_with_fault};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let id = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let ones = t.constant(mat(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
        let col = t.constant(mat(&[vec![5.0], vec![7.0]]));

        let r = t.matmul(a, id).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = t.matmul(id, col).unwrap();
        assert_eq!(t.value(r).data(), &[5.0, 7.0]);
        let r = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        for (input, want) in [
            ([0.0, 0.0], [0.5, 0.5]),
            ([1000.0, 1000.0], [0.5, 0.5]),
            ([0.0, 3f64.ln()], [0.25, 0.75]),
        ] {
            let x = t.constant(Tensor::new(vec![2], input.to_vec()).unwrap());
            let y = t.softmax(x, 0).unwrap();
            for (got, want) in t.value(y).data().iter().zip(want) {
                assert!((got - want).abs() < 1e-12);
            }
        }
        let x = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.softmax(x, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(random(&mut rng, &[4, 7]));
        let x = t.scale(x, 30.0).unwrap();
        for axis in 0..2 {
            let y = t.softmax(x, axis).unwrap();
            let s = t.sum_axis(y, axis).unwrap();
            for v in t.value(s).data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_analytic_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0]);

        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![1], vec![2.0]).unwrap());
        let b = t.param(Tensor::new(vec![1], vec![5.0]).unwrap());
        let p = t.mul(a, b).unwrap();
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[5.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reuse_accumulates_gradients() {
        // f = x*3 + x*4 uses x twice; df/dx = 7.
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![1], vec![0.3]).unwrap());
        let a = t.scale(x, 3.0).unwrap();
        let b = t.scale(x, 4.0).unwrap();
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s).unwrap();
        t.backward(loss).unwrap();
        assert!((t.grad(x).unwrap().data()[0] - 7.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.log(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_check_without_params_is_zero() {
        let err = grad_check(
            |t, _| {
                let a = t.constant(Tensor::full(&[2, 2], 1.0));
                let b = t.constant(Tensor::full(&[2, 2], 0.5));
                let d = t.sub(a, b)?;
                let sq = t.square(d)?;
                t.mean(sq)
            },
            &[],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Every primitive op on random inputs, composed into one scalar.
    fn every_op(t: &mut Tape, p: &[Var]) -> crate::Result<Var> {
        let (a, b, c, row) = (p[0], p[1], p[2], p[3]);
        let m = t.matmul(a, b)?; // 3x4
        let bias = t.add(m, row)?; // broadcast [1x4]
        let s = t.sigmoid(bias)?;
        let tr = t.transpose(c)?; // 4x3 -> 3x4
        let prod = t.mul(s, tr)?;
        let e = t.exp(prod)?;
        let sm = t.softmax(e, 1)?;
        let pos = t.add_scalar(sm, 0.5)?;
        let lg = t.log(pos)?;
        let sq = t.sqrt(pos)?;
        let dv = t.div(lg, sq)?;
        let pw = t.powf(pos, 1.7)?;
        let r = t.relu(bias)?;
        let cl = t.clamp(bias, -0.4, 0.4)?;
        let mixed = t.sub(dv, pw)?;
        let mixed = t.add(mixed, r)?;
        let mixed = t.add(mixed, cl)?;
        let sl = t.slice(mixed, 1, 1, 3)?;
        let other = t.slice(mixed, 1, 0, 2)?;
        let cat = t.concat(&[sl, other], 0)?;
        let rs = t.reshape(cat, &[4, 3])?;
        let cs = t.sum_axis(rs, 0)?;
        let mm = t.mean_axis(rs, 1)?;
        let total = t.sum(cs)?;
        let mean = t.mean(mm)?;
        t.add(total, mean)
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let params = vec![
                random(&mut rng, &[3, 2]),
                random(&mut rng, &[2, 4]),
                random(&mut rng, &[4, 3]),
                random(&mut rng, &[1, 4]),
            ];
            let err = grad_check(every_op, &params, 1e-6).unwrap();
            assert!(err < 1e-5, "max rel err {err}");
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            random(&mut rng, &[3, 2]),
            random(&mut rng, &[2, 4]),
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[1, 4]),
        ];
        let err = grad_check_with_fault(every_op, &params, 1e-6, Some(OpKind::MatMul)).unwrap();
        assert!(err > 1e-3, "fault went unnoticed: {err}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let params = [
                random(&mut rng, &[3, 2]),
                random(&mut rng, &[2, 4]),
                random(&mut rng, &[4, 3]),
                random(&mut rng, &[1, 4]),
            ];
            let mut t = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
            let loss = every_op(&mut t, &vars).unwrap();
            t.backward(loss).unwrap();
            let mut bits = vec![t.value(loss).data()[0].to_bits()];
            for v in vars {
                bits.extend(t.grad(v).unwrap().data().iter().map(|x| x.to_bits()));
            }
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn broadcasting_column_and_scalar() {
        let mut t = Tape::new();
        let m = t.param(mat(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let col = t.param(mat(&[vec![10.0], vec![20.0]]));
        let r = t.add(m, col).unwrap();
        assert_eq!(t.value(r).data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let loss = t.sum(r).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(col).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(t.grad(m).unwrap().data(), &[1.0; 6]);
    }

    /// Reference attention and row standardization built from primitives.
    fn composite_attention(t: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> crate::Result<Var> {
        let d = t.shape(q)[1];
        let hd = d / heads;
        let mut outs = vec![];
        for h in 0..heads {
            let qh = t.slice(q, 1, h * hd, (h + 1) * hd)?;
            let kh = t.slice(k, 1, h * hd, (h + 1) * hd)?;
            let vh = t.slice(v, 1, h * hd, (h + 1) * hd)?;
            let kt = t.transpose(kh)?;
            let s = t.matmul(qh, kt)?;
            let s = t.scale(s, 1.0 / (hd as f64).sqrt())?;
            let w = t.softmax(s, 1)?;
            outs.push(t.matmul(w, vh)?);
        }
        t.concat(&outs, 1)
    }

    fn composite_standardize(t: &mut Tape, x: Var, eps: f64) -> crate::Result<Var> {
        let mean = t.mean_axis(x, 1)?;
        let c = t.sub(x, mean)?;
        let sq = t.square(c)?;
        let var = t.mean_axis(sq, 1)?;
        let var = t.add_scalar(var, eps)?;
        let sd = t.sqrt(var)?;
        t.div(c, sd)
    }

    fn fused_ops(t: &mut Tape, p: &[Var]) -> crate::Result<Var> {
        let a = t.attention(p[0], p[1], p[2], 2)?;
        let n = t.standardize_rows(a, 1e-5)?;
        let w = t.mul(n, p[3])?;
        let sq = t.square(w)?;
        let s = t.sum(sq)?;
        let lin = t.sum(w)?;
        t.add(s, lin)
    }

    #[test]
    fn fused_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..4 {
            let params = vec![
                random(&mut rng, &[3, 4]),
                random(&mut rng, &[5, 4]),
                random(&mut rng, &[5, 4]),
                random(&mut rng, &[3, 4]),
            ];
            let err = grad_check(fused_ops, &params, 1e-6).unwrap();
            assert!(err < 1e-5, "max rel err {err}");
        }
    }

    #[test]
    fn fused_ops_match_their_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let inputs = [random(&mut rng, &[3, 6]), random(&mut rng, &[4, 6]), random(&mut rng, &[4, 6])];
        let run = |fused: bool| {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
            let (a, n) = if fused {
                let a = t.attention(v[0], v[1], v[2], 3).unwrap();
                (a, t.standardize_rows(a, 1e-5).unwrap())
            } else {
                let a = composite_attention(&mut t, v[0], v[1], v[2], 3).unwrap();
                (a, composite_standardize(&mut t, a, 1e-5).unwrap())
            };
            let sq = t.square(n).unwrap();
            let s = t.sum(sq).unwrap();
            let loss = t.add(s, a).unwrap();
            let loss = t.sum(loss).unwrap();
            t.backward(loss).unwrap();
            let mut out = t.value(n).data().to_vec();
            for x in &v {
                out.extend_from_slice(t.grad(*x).unwrap().data());
            }
            out
        };
        for (x, y) in run(true).iter().zip(run(false)) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_weights_are_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut t = Tape::new();
        let q = t.constant(random(&mut rng, &[2, 4]));
        let k = t.constant(random(&mut rng, &[3, 4]));
        let a = t.attention(q, k, k, 2).unwrap();
        let w = t.attention_weights(a).unwrap();
        assert_eq!(w.shape(), &[2, 2, 3]);
        for row in w.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(t.attention_weights(q).is_none());
        assert!(matches!(t.attention(q, k, k, 3), Err(Error::Config(_))));
    }
}
