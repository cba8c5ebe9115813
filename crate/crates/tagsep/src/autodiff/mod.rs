//! Minimal reverse-mode automatic differentiation over dense real arrays.
//!
//! Built to backpropagate from a tagger's BCE loss through ISTFT, masking,
//! STFT, and a convolutional decoder down to a latent code; nothing more.
//! No GPU, no dynamic control flow inside tapes, no higher-order derivatives.

mod array;
mod grad_check;
mod tape;

pub use array::{gauss, gemm_nn, gemm_nt, gemm_tn, NDArray};
pub use grad_check::{grad_check, grad_check_subset, rel_err, GradCheckReport};
pub use tape::{Gradients, NodeId, Op, Tape};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_square() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.forward(y).unwrap().scalar_value(), 9.0);
    }

    #[test]
    fn forward_sigmoid_zero() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.forward(y).unwrap().scalar_value(), 0.5);
    }

    #[test]
    fn forward_identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(NDArray::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = t.leaf(NDArray::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let y = t.matmul(i, m).unwrap();
        assert_eq!(t.forward(y).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y, x).unwrap();
        assert_eq!(g.scalar_value(), 6.0);
    }

    #[test]
    fn backward_max_not_selected() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(2.0));
        let c = t.constant(NDArray::scalar(5.0));
        let m = t.max(x, c).unwrap();
        let g = t.backward(m, x).unwrap();
        assert_eq!(g.scalar_value(), 0.0);
    }

    #[test]
    fn backward_max_tie_goes_to_first_operand() {
        let mut t = Tape::new();
        let a = t.leaf(NDArray::scalar(4.0));
        let b = t.leaf(NDArray::scalar(4.0));
        let m = t.max(a, b).unwrap();
        let grads = t.backward_all(m).unwrap();
        assert_eq!(grads.wrt(&t, a).scalar_value(), 1.0);
        assert_eq!(grads.wrt(&t, b).scalar_value(), 0.0);
    }

    /// Random small graph vs the finite-difference oracle. The scaling keeps
    /// tanh out of saturation, where the true gradient underflows the
    /// resolution of central differences.
    #[test]
    fn random_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = NDArray::randn(vec![5], 1.0, &mut rng);
        let report = grad_check(
            |t, x| {
                let a = t.exp(x)?;
                let b = t.add_scalar(x, 3.0)?;
                let c = t.mul(a, b)?;
                let cs = t.mul_scalar(c, 0.2)?;
                let d = t.tanh(cs)?;
                t.mean(d)
            },
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_bce_through_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = NDArray::randn(vec![4, 4], 1.0, &mut rng);
        let x = NDArray::randn(vec![4, 4], 1.0, &mut rng);
        let targets = NDArray::new(vec![4, 4], (0..16).map(|i| f64::from(i % 2)).collect());
        let one_minus_t = NDArray::new(
            vec![4, 4],
            targets.data().iter().map(|t| 1.0 - t).collect(),
        );
        // check gradient w.r.t. W with x fixed
        let report = grad_check(
            |t, wn| {
                let xc = t.constant(x.clone());
                let tc = t.constant(targets.clone());
                let omt = t.constant(one_minus_t.clone());
                let z = t.matmul(wn, xc)?;
                let p = t.sigmoid(z)?;
                let pe = t.add_scalar(p, 1e-8)?;
                let lp = t.log(pe)?;
                let np = t.neg(p)?;
                let ome = t.add_scalar(np, 1.0 + 1e-8)?;
                let l1p = t.log(ome)?;
                let pos = t.mul(tc, lp)?;
                let neg = t.mul(omt, l1p)?;
                let s = t.add(pos, neg)?;
                let m = t.mean(s)?;
                t.neg(m)
            },
            &w,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_sum_abs_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = NDArray::randn(vec![16], 1.0, &mut rng);
        // keep strictly nonzero so |x| is smooth at every checked point
        x = NDArray::new(
            vec![16],
            x.data().iter().map(|&v| if v.abs() < 0.1 { 0.5 } else { v }).collect(),
        );
        let report = grad_check(
            |t, x| {
                let a = t.abs(x)?;
                t.sum(a)
            },
            &x,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_of_sum_is_exactly_ones() {
        // dyadic values and a power-of-two step make the central difference
        // exact, so the error really is zero rather than rounding noise
        let x = NDArray::new(vec![9], vec![1.0, -2.5, 0.25, 4.0, -0.75, 2.0, 0.5, -1.25, 3.0]);
        let mut t = Tape::new();
        let leaf = t.leaf(x.clone());
        let s = t.sum(leaf).unwrap();
        let g = t.backward(s, leaf).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));

        let h = (2.0f64).powi(-20);
        let report = grad_check(|t, x| t.sum(x), &x, h, 1e-12).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = NDArray::randn(vec![6], 1.0, &mut rng);
        let (alpha, beta) = (0.7, -1.3);

        // shared tape: f = mean(exp(x)), g = mean(x*x)
        let mut t = Tape::new();
        let leaf = t.leaf(x.clone());
        let e = t.exp(leaf).unwrap();
        let f = t.mean(e).unwrap();
        let sq = t.mul(leaf, leaf).unwrap();
        let g = t.mean(sq).unwrap();
        let af = t.mul_scalar(f, alpha).unwrap();
        let bg = t.mul_scalar(g, beta).unwrap();
        let combo = t.add(af, bg).unwrap();

        let d_combo = t.backward(combo, leaf).unwrap();
        let d_f = t.backward(f, leaf).unwrap();
        let d_g = t.backward(g, leaf).unwrap();
        for i in 0..x.len() {
            let lhs = d_combo.data()[i];
            let rhs = alpha * d_f.data()[i] + beta * d_g.data()[i];
            assert!((lhs - rhs).abs() <= 1e-10, "linearity violated at {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn unused_node_gets_exact_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(2.0));
        let unused = t.leaf(NDArray::new(vec![3], vec![1.0, 2.0, 3.0]));
        let y = t.mul(x, x).unwrap();
        let grads = t.backward_all(y).unwrap();
        let gu = grads.wrt(&t, unused);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let x = NDArray::randn(vec![8], 1.0, &mut rng);
            let mut t = Tape::new();
            let leaf = t.leaf(x);
            let a = t.sigmoid(leaf).unwrap();
            let b = t.mul(a, leaf).unwrap();
            let r = t.mean(b).unwrap();
            let v = t.forward(r).unwrap();
            let g = t.backward(r, leaf).unwrap();
            (v, g)
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.bit_eq(&v2));
        assert!(g1.bit_eq(&g2));
    }

    #[test]
    fn non_finite_reports_node_id() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(0.0));
        let err = t.log(x).unwrap_err();
        match err {
            Error::Numerical { node, .. } => assert_eq!(node, Some(1)),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::new(vec![2], vec![1.0, 2.0]));
        let y = t.exp(x).unwrap();
        assert!(matches!(t.backward(y, x), Err(Error::Contract(_))));
    }

    #[test]
    fn wrt_not_ancestor_returns_zeros_not_error() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(1.0));
        let y = t.mul(x, x).unwrap();
        let later = t.leaf(NDArray::new(vec![2], vec![5.0, 5.0]));
        let g = t.backward(y, later).unwrap();
        assert_eq!(g.shape(), &[2]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_check_detects_shape_abuse() {
        // root must be scalar
        let x = NDArray::new(vec![2], vec![1.0, 2.0]);
        let err = grad_check(|t, x| t.exp(x), &x, 1e-6, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    /// Every primitive against the oracle on seeded random inputs.
    #[test]
    fn all_primitives_pass_grad_check() {
        let failures = primitive_grad_check_failures(3, 1e-6, 1e-4);
        assert!(failures.is_empty(), "failing primitives: {failures:?}");
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(NDArray::scalar(2.0));
        let s = t.stop_gradient(x).unwrap();
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, s).unwrap();
        let g = t.backward(z, x).unwrap();
        assert_eq!(g.scalar_value(), 4.0); // only the x*x path contributes
    }

    #[test]
    fn straight_through_composition_passes_value_and_identity_grad() {
        // y = x + sg(q - x): forward == q, backward d/dx == identity
        let mut t = Tape::new();
        let x = t.leaf(NDArray::new(vec![3], vec![1.0, 2.0, 3.0]));
        let q = t.constant(NDArray::new(vec![3], vec![10.0, 20.0, 30.0]));
        let d = t.sub(q, x).unwrap();
        let sg = t.stop_gradient(d).unwrap();
        let st = t.add(x, sg).unwrap();
        assert_eq!(t.forward(st).unwrap().data(), &[10.0, 20.0, 30.0]);
        let s = t.sum(st).unwrap();
        let g = t.backward(s, x).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    /// Runs grad_check for every primitive over `seeds` seeded inputs and
    /// returns the names that failed.
    pub fn primitive_grad_check_failures(seeds: u64, h: f64, tol: f64) -> Vec<String> {
        crate::autodiff::primitive_grad_checks(seeds, h, tol)
            .into_iter()
            .filter(|(_, r)| !r.pass)
            .map(|(name, r)| format!("{name} (err {:.3e})", r.max_rel_err))
            .collect()
    }
}

/// Run grad_check for every primitive in the registry over `seeds` seeded
/// random inputs each; returns (primitive name, worst report) pairs.
///
/// Lives here (not in test code) so the acceptance suite can reuse it.
pub fn primitive_grad_checks(seeds: u64, h: f64, tol: f64) -> Vec<(String, GradCheckReport)> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Builder = Box<dyn Fn(&mut Tape, NodeId, &mut ChaCha8Rng) -> crate::error::Result<NodeId>>;

    // Each builder closes over nothing; auxiliary operands are drawn from the
    // rng so every seed exercises fresh values.
    let cases: Vec<(&str, Vec<usize>, Builder)> = vec![
        ("add", vec![4, 3], Box::new(|t, x, r| {
            let b = t.constant(NDArray::randn(vec![4, 3], 1.0, r));
            let y = t.add(x, b)?;
            t.mean(y)
        })),
        ("sub", vec![4, 3], Box::new(|t, x, r| {
            let b = t.constant(NDArray::randn(vec![4, 3], 1.0, r));
            let y = t.sub(x, b)?;
            t.mean(y)
        })),
        ("mul", vec![4, 3], Box::new(|t, x, r| {
            let b = t.constant(NDArray::randn(vec![4, 3], 1.0, r));
            let y = t.mul(x, b)?;
            t.mean(y)
        })),
        ("div", vec![4, 3], Box::new(|t, x, r| {
            let denom = NDArray::new(
                vec![4, 3],
                (0..12).map(|_| 1.5 + gauss(r).abs()).collect(),
            );
            let b = t.constant(denom);
            let y = t.div(x, b)?;
            t.mean(y)
        })),
        ("div_denominator", vec![4, 3], Box::new(|t, x, r| {
            // gradient w.r.t. the denominator; keep it away from zero
            let off = t.add_scalar(x, 5.0)?;
            let num = t.constant(NDArray::randn(vec![4, 3], 1.0, r));
            let y = t.div(num, off)?;
            t.mean(y)
        })),
        ("neg", vec![5], Box::new(|t, x, _| {
            let y = t.neg(x)?;
            t.mean(y)
        })),
        ("abs", vec![5], Box::new(|t, x, _| {
            let off = t.add_scalar(x, 3.0)?; // stay away from the kink
            let y = t.abs(off)?;
            t.mean(y)
        })),
        ("sqrt", vec![5], Box::new(|t, x, _| {
            let sq = t.mul(x, x)?;
            let off = t.add_scalar(sq, 1.0)?;
            let y = t.sqrt(off)?;
            t.mean(y)
        })),
        ("log", vec![5], Box::new(|t, x, _| {
            let sq = t.mul(x, x)?;
            let off = t.add_scalar(sq, 1.0)?;
            let y = t.log(off)?;
            t.mean(y)
        })),
        ("exp", vec![5], Box::new(|t, x, _| {
            let y = t.exp(x)?;
            t.mean(y)
        })),
        ("sigmoid", vec![5], Box::new(|t, x, _| {
            let y = t.sigmoid(x)?;
            t.mean(y)
        })),
        ("tanh", vec![5], Box::new(|t, x, _| {
            let y = t.tanh(x)?;
            t.mean(y)
        })),
        ("relu", vec![7], Box::new(|t, x, _| {
            let off = t.add_scalar(x, 2.5)?; // keep clear of the kink
            let y = t.relu(off)?;
            t.mean(y)
        })),
        ("max", vec![4, 3], Box::new(|t, x, r| {
            let b = t.constant(NDArray::randn(vec![4, 3], 1.0, r));
            let y = t.max(x, b)?;
            t.mean(y)
        })),
        ("add_scalar", vec![5], Box::new(|t, x, _| {
            let y = t.add_scalar(x, 0.7)?;
            t.mean(y)
        })),
        ("mul_scalar", vec![5], Box::new(|t, x, _| {
            let y = t.mul_scalar(x, -1.9)?;
            t.mean(y)
        })),
        ("matmul_lhs", vec![3, 4], Box::new(|t, x, r| {
            let b = t.constant(NDArray::randn(vec![4, 2], 1.0, r));
            let y = t.matmul(x, b)?;
            t.mean(y)
        })),
        ("matmul_rhs", vec![4, 2], Box::new(|t, x, r| {
            let a = t.constant(NDArray::randn(vec![3, 4], 1.0, r));
            let y = t.matmul(a, x)?;
            t.mean(y)
        })),
        ("conv1d_x", vec![2, 12], Box::new(|t, x, r| {
            let w = t.constant(NDArray::randn(vec![3, 2, 4], 0.5, r));
            let b = t.constant(NDArray::randn(vec![3], 0.5, r));
            let y = t.conv1d(x, w, b, 2, 1)?;
            t.mean(y)
        })),
        ("conv1d_w", vec![3, 2, 4], Box::new(|t, x, r| {
            let inp = t.constant(NDArray::randn(vec![2, 12], 1.0, r));
            let b = t.constant(NDArray::randn(vec![3], 0.5, r));
            let y = t.conv1d(inp, x, b, 2, 1)?;
            t.mean(y)
        })),
        ("conv1d_bias", vec![3], Box::new(|t, x, r| {
            let inp = t.constant(NDArray::randn(vec![2, 12], 1.0, r));
            let w = t.constant(NDArray::randn(vec![3, 2, 4], 0.5, r));
            let y = t.conv1d(inp, w, x, 2, 1)?;
            t.mean(y)
        })),
        ("conv_transpose1d_x", vec![3, 6], Box::new(|t, x, r| {
            let w = t.constant(NDArray::randn(vec![3, 2, 4], 0.5, r));
            let b = t.constant(NDArray::randn(vec![2], 0.5, r));
            let y = t.conv_transpose1d(x, w, b, 2, 1)?;
            t.mean(y)
        })),
        ("conv_transpose1d_w", vec![3, 2, 4], Box::new(|t, x, r| {
            let inp = t.constant(NDArray::randn(vec![3, 6], 1.0, r));
            let b = t.constant(NDArray::randn(vec![2], 0.5, r));
            let y = t.conv_transpose1d(inp, x, b, 2, 1)?;
            t.mean(y)
        })),
        ("sum", vec![6], Box::new(|t, x, _| t.sum(x))),
        ("mean", vec![6], Box::new(|t, x, _| t.mean(x))),
        ("sum_axis0", vec![3, 4], Box::new(|t, x, _| {
            let y = t.sum_axis(x, 0)?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })),
        ("sum_axis1", vec![3, 4], Box::new(|t, x, _| {
            let y = t.sum_axis(x, 1)?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })),
        ("mean_axis0", vec![3, 4], Box::new(|t, x, _| {
            let y = t.mean_axis(x, 0)?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })),
        ("mean_axis1", vec![3, 4], Box::new(|t, x, _| {
            let y = t.mean_axis(x, 1)?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })),
        ("reshape", vec![3, 4], Box::new(|t, x, _| {
            let y = t.reshape(x, vec![2, 6])?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })),
        ("transpose", vec![3, 4], Box::new(|t, x, r| {
            let y = t.transpose(x)?;
            let b = t.constant(NDArray::randn(vec![4, 3], 1.0, r));
            let p = t.mul(y, b)?;
            t.mean(p)
        })),
        ("pad_reflect", vec![10], Box::new(|t, x, r| {
            let y = t.pad_reflect(x, 3, 4)?;
            let b = t.constant(NDArray::randn(vec![17], 1.0, r));
            let p = t.mul(y, b)?;
            t.mean(p)
        })),
        ("frame", vec![14], Box::new(|t, x, r| {
            let y = t.frame(x, 6, 4, 4)?; // last frame overruns by 2, zero-filled
            let b = t.constant(NDArray::randn(vec![4, 6], 1.0, r));
            let p = t.mul(y, b)?;
            t.mean(p)
        })),
        ("overlap_add", vec![3, 6], Box::new(|t, x, r| {
            let y = t.overlap_add(x, 4)?;
            let b = t.constant(NDArray::randn(vec![14], 1.0, r));
            let p = t.mul(y, b)?;
            t.mean(p)
        })),
        ("slice", vec![10], Box::new(|t, x, r| {
            let y = t.slice(x, 2, 5)?;
            let b = t.constant(NDArray::randn(vec![5], 1.0, r));
            let p = t.mul(y, b)?;
            t.mean(p)
        })),
        ("gather", vec![5, 3], Box::new(|t, x, r| {
            let y = t.gather(x, &[0, 2, 2, 4])?;
            let b = t.constant(NDArray::randn(vec![4, 3], 1.0, r));
            let p = t.mul(y, b)?;
            t.mean(p)
        })),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, shape, build) in cases {
        let mut worst = GradCheckReport { max_rel_err: 0.0, tol, checked: 0, pass: true };
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = NDArray::randn(shape.clone(), 1.0, &mut rng);
            // the builder runs many times per check; restart the auxiliary
            // rng from the same state each time so every tape is identical
            let aux = ChaCha8Rng::seed_from_u64(2000 + seed);
            let report = grad_check_subset(
                |t, leaf| build(t, leaf, &mut aux.clone()),
                &x,
                h,
                tol,
                None,
                0,
            )
            .unwrap_or(GradCheckReport { max_rel_err: f64::INFINITY, tol, checked: 0, pass: false });
            if report.max_rel_err > worst.max_rel_err || !report.pass {
                worst = GradCheckReport {
                    max_rel_err: report.max_rel_err,
                    tol,
                    checked: report.checked,
                    pass: report.pass && worst.pass,
                };
            }
        }
        out.push((name.to_string(), worst));
    }
    out
}
