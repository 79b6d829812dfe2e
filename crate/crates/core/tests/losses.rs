use diffseg_core::cotrainer::{cps_loss, cps_term, lambda_at, supervised_loss, total_loss, BatchLossBreakdown, LossWeights};
use diffseg_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_logits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-4.0..4.0))
}

/// Independent pixel-wise cross-entropy of `[b, c, h, w]` logits, averaged.
fn ce_oracle(logits: &Tensor<f64>, targets: &[usize]) -> f64 {
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let mut total = 0.0;
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| x[(bi * c + ci) * hw + p];
            let lse = (0..c).map(|ci| at(ci).exp()).sum::<f64>().ln();
            total += lse - at(targets[bi * hw + p]);
        }
    }
    total / (b * hw) as f64
}

fn argmax_oracle(logits: &Tensor<f64>) -> Vec<usize> {
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let mut out = Vec::new();
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for ci in 1..c {
                if x[(bi * c + ci) * hw + p] > x[(bi * c + best) * hw + p] {
                    best = ci;
                }
            }
            out.push(best);
        }
    }
    out
}

fn parts(rng: &mut ChaCha8Rng, rounds: usize) -> BatchLossBreakdown {
    BatchLossBreakdown {
        sup: Some(rng.random_range(0.0..3.0)),
        semi: rng.random_range(0.0..3.0),
        align: (0..rounds).map(|_| rng.random_range(0.0..3.0)).collect(),
        reconstr: (0..rounds).map(|_| rng.random_range(0.0..1.0)).collect(),
        total: 0.0,
    }
}

#[test]
fn lambda_endpoints() {
    assert_eq!(lambda_at(0, 200, 5.0), 0.0);
    assert_eq!(lambda_at(200, 200, 5.0), 5.0);
}

#[test]
fn lambda_ramp_is_monotone() {
    let v: Vec<f64> = (0..=200).map(|e| lambda_at(e, 200, 5.0)).collect();
    assert!(v.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn total_loss_matches_explicit_sum_for_several_round_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for rounds in [1, 3, 5] {
        for _ in 0..200 {
            let p = parts(&mut rng, rounds);
            let lambda = rng.random_range(0.0..5.0);
            let w = LossWeights { lambda_max: 5.0, lambda, rounds };
            let r = rounds as f64;
            let align: f64 = p.align.iter().sum::<f64>() / r;
            let recon: f64 = p.reconstr.iter().sum::<f64>() / r;
            let expect_l = p.sup.unwrap() + lambda * p.semi + lambda * align + lambda * recon;
            let expect_u = lambda * p.semi + lambda * align + lambda * recon;
            let got_l = total_loss(true, &p, &w).unwrap();
            let got_u = total_loss(false, &p, &w).unwrap();
            assert!((got_l - expect_l).abs() <= 1e-6 * expect_l.abs().max(1e-12), "R={rounds}");
            assert!((got_u - expect_u).abs() <= 1e-6 * expect_u.abs().max(1e-12), "R={rounds}");
        }
    }
}

#[test]
fn total_loss_hand_case() {
    let p = BatchLossBreakdown { sup: Some(1.0), semi: 0.5, align: vec![0.2], reconstr: vec![0.1], total: 0.0 };
    let w = LossWeights { lambda_max: 5.0, lambda: 2.0, rounds: 1 };
    assert!((total_loss(true, &p, &w).unwrap() - 2.6).abs() < 1e-12);
}

#[test]
fn cps_hand_case_is_ln2() {
    let s = Tensor::<f64>::new(&[1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
    let t = Tensor::<f64>::new(&[1, 2, 1, 1], vec![30.0, -30.0]).unwrap();
    let v = cps_loss(&s, &t).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12, "{v}");
}

#[test]
fn supervised_uniform_logits_is_two_ln2() {
    let z = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
    let labels: Vec<usize> = (0..18).map(|i| i % 2).collect();
    let v = supervised_loss(&z, &z, &labels).unwrap();
    assert!((v - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cps_gradients_do_not_flow_through_pseudo_labels() {
    // d/dz of CE(z, y) with y fixed is softmax(z) - onehot(y), averaged over pixels
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = random_logits(&mut rng, &[1, 3, 2, 2]);
    let t = random_logits(&mut rng, &[1, 3, 2, 2]);
    let mut g = Graph::new();
    let sv = g.param(s.clone());
    let tv = g.param(t.clone());
    let loss = cps_term(&mut g, sv, tv).unwrap();
    let grads = g.backward(loss);
    let ty = argmax_oracle(&t);
    let gs = grads.get(sv).unwrap();
    for p in 0..4 {
        let z: Vec<f64> = (0..3).map(|c| s.data()[c * 4 + p]).collect();
        let norm: f64 = z.iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            let expect = (z[c].exp() / norm - f64::from(u8::from(c == ty[p]))) / 4.0;
            assert!((gs.data()[c * 4 + p] - expect).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cps_is_symmetric(seed in any::<u64>(), b in 1usize..3, c in 2usize..4, hw in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_logits(&mut rng, &[b, c, hw, hw]);
        let t = random_logits(&mut rng, &[b, c, hw, hw]);
        prop_assert_eq!(cps_loss(&s, &t).unwrap(), cps_loss(&t, &s).unwrap());
    }

    #[test]
    fn cps_matches_cross_entropy_oracle(seed in any::<u64>(), c in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_logits(&mut rng, &[2, c, 3, 3]);
        let t = random_logits(&mut rng, &[2, c, 3, 3]);
        let expect = ce_oracle(&s, &argmax_oracle(&t)) + ce_oracle(&t, &argmax_oracle(&s));
        let got = cps_loss(&s, &t).unwrap();
        prop_assert!((got - expect).abs() < 1e-10 * expect.max(1.0));
    }

    #[test]
    fn cps_of_identical_confident_logits_vanishes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = random_logits(&mut rng, &[1, 1, 3, 3]);
        let s = Tensor::from_fn(&[1, 2, 3, 3], |i| {
            let v = 60.0 * half.data()[i % 9].signum();
            if i < 9 { v } else { -v }
        });
        prop_assert!(cps_loss(&s, &s).unwrap() < 1e-20);
    }

    #[test]
    fn total_loss_is_linear_in_lambda(seed in any::<u64>(), rounds in 1usize..6, l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = parts(&mut rng, rounds);
        let at = |lambda: f64| total_loss(false, &p, &LossWeights { lambda_max: 5.0, lambda, rounds }).unwrap();
        let mid = 0.5 * (l1 + l2);
        prop_assert!((at(mid) - 0.5 * (at(l1) + at(l2))).abs() < 1e-9);
        prop_assert_eq!(at(0.0), 0.0);
        let sup = p.sup.unwrap();
        let zero = LossWeights { lambda_max: 5.0, lambda: 0.0, rounds };
        prop_assert!((total_loss(true, &p, &zero).unwrap() - sup).abs() < 1e-15);
    }

    #[test]
    fn supervised_loss_matches_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_logits(&mut rng, &[2, 3, 2, 2]);
        let b = random_logits(&mut rng, &[2, 3, 2, 2]);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let expect = ce_oracle(&a, &labels) + ce_oracle(&b, &labels);
        prop_assert!((supervised_loss(&a, &b, &labels).unwrap() - expect).abs() < 1e-10 * expect.max(1.0));
    }
}
