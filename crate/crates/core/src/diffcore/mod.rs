//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod graph;
mod ops;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::softmax_into;
pub(crate) use ops::kl_row;

/// Softmax of a plain slice; `-inf` entries map to 0.
pub fn softmax(v: &[f64]) -> crate::Result<Vec<f64>> {
    if v.iter().all(|&x| x == f64::NEG_INFINITY) {
        return Err(crate::Error::DegenerateSlice { op: "softmax" });
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

/// Numerically stable `ln(sum(exp(v)))` minus each entry.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::check_gradients;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-6;
    const OP_TOL: f64 = 1e-5;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn grad_of_summed_product_is_row_sums_of_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let mut g = Graph::new();
        let av = g.leaf(a.with_grad());
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let grad = g.grad(av).unwrap();
        for r in 0..3 {
            for p in 0..4 {
                let row_sum: f64 = b.row(p).iter().sum();
                assert!((grad[r * 4 + p] - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        p.iter().for_each(|x| assert!((x - 1.0 / 3.0).abs() < 1e-15));

        let p = softmax(&[3.0, f64::NEG_INFINITY, 2.0]).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 0.2689).abs() < 1e-4);

        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        assert!(matches!(
            softmax(&[f64::NEG_INFINITY; 3]),
            Err(Error::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert_eq!(d[0], 0.5);
        assert_eq!(d[2], 0.5);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
        assert!(d[3] > d[1]);
    }

    #[test]
    fn softplus_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, -1000.0, 1000.0]));
        let y = g.softplus(x);
        let d = g.data(y);
        assert!((d[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        assert!((d[2] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn backward_on_sum_gives_ones_and_accumulates() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 3]).with_grad());
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![3.0, 4.0]).with_grad());
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn kl_of_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let z = random(&mut rng, &[3, 5]);
            let p_logits = random(&mut rng, &[3, 5]);
            let check = check_gradients(&[z, p_logits], STEP, |g, v| {
                let lq = g.log_softmax(v[0])?;
                let lp = g.log_softmax(v[1])?;
                g.kl_div(lp, lq, &[true, false, true])
            })
            .unwrap();
            assert!(check.max_rel_err < OP_TOL, "{check:?}");
        }
    }

    #[test]
    fn unary_and_binary_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = random(&mut rng, &[3, 4]);
            let mut b = random(&mut rng, &[3, 4]);
            b.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.5);
            let check = check_gradients(&[a, b], STEP, |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[1])?;
                let m = g.mul(d, v[1])?;
                let q = g.div(m, v[1])?;
                let e = g.exp(q);
                let l = g.log(v[1]);
                let sp = g.softplus(e);
                let ge = g.gelu(l);
                let t = g.add(sp, ge)?;
                let t = g.scale(t, 0.7);
                let t = g.shift(t, 0.2);
                Ok(g.mean(t))
            })
            .unwrap();
            assert!(check.max_rel_err < OP_TOL, "{check:?}");
        }
    }

    #[test]
    fn structural_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[3]);
        let s = random(&mut rng, &[2]);
        let w = random(&mut rng, &[3, 6]);
        let check = check_gradients(&[a, b, s, w], STEP, |g, v| {
            let x = g.add_row(v[0], v[1])?;
            let x = g.matmul(x, v[3])?;
            let t = g.transpose(x)?;
            let t = g.transpose(t)?;
            let left = g.slice_cols(t, 0, 2)?;
            let right = g.slice_cols(t, 2, 4)?;
            let joined = g.concat_cols(&[right, left])?;
            let top = g.gather_rows(joined, &[3, 0])?;
            let scaled = g.scale_rows(top, v[2])?;
            let placed = g.scatter_rows(scaled, &[1, 1], 3)?;
            let stacked = g.concat_rows(&[placed, joined])?;
            let cols = g.sum_rows(stacked)?;
            let sq = g.mul(cols, cols)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(check.max_rel_err < OP_TOL, "{check:?}");
    }

    #[test]
    fn norm_softmax_and_ce_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[3, 5]);
        let gain = random(&mut rng, &[5]);
        let bias = random(&mut rng, &[5]);
        let check = check_gradients(&[x, gain, bias], STEP, |g, v| {
            let h = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let keep = vec![true, false, true, true, true].repeat(3);
            let m = g.mask_fill(h, &keep)?;
            let p = g.softmax(m, 1)?;
            let ce = g.cross_entropy(h, &[0, 2, 4], &[true, true, false])?;
            let s = g.sum(p);
            let sc = g.mul(s, ce)?;
            let r = g.relu(h);
            let rs = g.mean(r);
            g.add(sc, rs)
        })
        .unwrap();
        assert!(check.max_rel_err < OP_TOL, "{check:?}");
    }

    #[test]
    fn expand_passes_gradcheck() {
        let check = check_gradients(
            &[Tensor::scalar(0.3), Tensor::vector(vec![1.0, -2.0, 0.5])],
            STEP,
            |g, v| {
                let e = g.expand(v[0], &[3])?;
                let d = g.sub(v[1], e)?;
                let sq = g.mul(d, d)?;
                Ok(g.mean(sq))
            },
        )
        .unwrap();
        assert!(check.max_rel_err < OP_TOL);
    }

    #[test]
    fn deterministic_graph_execution() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = random(&mut rng, &[4, 4]);
            let mut g = Graph::new();
            let v = g.leaf(a.with_grad());
            let m = g.matmul(v, v).unwrap();
            let p = g.softmax(m, 1).unwrap();
            let s = g.sum(p);
            g.backward(s).unwrap();
            (g.data(p).to_vec(), g.grad(v).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
                let p = softmax(&v).unwrap();
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }

            #[test]
            fn log_softmax_exponentiates_to_softmax(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
                let p = softmax(&v).unwrap();
                let lp = log_softmax(&v);
                for (a, b) in p.iter().zip(&lp) {
                    prop_assert!((a - b.exp()).abs() < 1e-12);
                }
            }
        }
    }
}
