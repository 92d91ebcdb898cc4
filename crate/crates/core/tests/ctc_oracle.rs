mod common;

use common::{all_targets, brute_force_ctc, random_log_probs};
use delib_core::ctc::{ctc_loss, ctc_loss_var, greedy_decode, required_min_length};
use delib_core::tensor::grad_check;
use delib_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn loss_matches_path_enumeration_on_small_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in 2..=4 {
        for l in 1..=5 {
            let lp = random_log_probs(l, v, &mut rng);
            let brute = brute_force_ctc(&lp, 0);
            for target in all_targets(v, 3) {
                let expected = brute.get(&target).copied().unwrap_or(0.0);
                match ctc_loss(&lp, &target, 0) {
                    Ok(r) => assert!(((-r.nll).exp() - expected).abs() < 1e-9, "v={v} l={l} {target:?}"),
                    Err(Error::Infeasible { .. }) => assert_eq!(expected, 0.0),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
}

#[test]
fn output_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lp = random_log_probs(3, 3, &mut rng);
    let total: f64 = all_targets(3, 3)
        .iter()
        .filter_map(|t| ctc_loss(&lp, t, 0).ok())
        .map(|r| (-r.nll).exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-12, "{total}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (l, target) in [(4, vec![1, 2]), (6, vec![1, 1, 2]), (3, vec![2, 2]), (5, vec![])] {
        let lp = random_log_probs(l, 3, &mut rng);
        let r = ctc_loss(&lp, &target, 0).unwrap();
        let h = 1e-6;
        for k in 0..lp.numel() {
            let mut p = lp.clone();
            p.data_mut()[k] += h;
            let mut m = lp.clone();
            m.data_mut()[k] -= h;
            let fd = (ctc_loss(&p, &target, 0).unwrap().nll - ctc_loss(&m, &target, 0).unwrap().nll) / (2.0 * h);
            assert!((fd - r.per_position_grad.data()[k]).abs() < 1e-7, "{target:?} {k}");
        }
    }
}

#[test]
fn loss_through_log_softmax_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random_log_probs(6, 4, &mut rng);
    let err = grad_check(|_, x| ctc_loss_var(x[0].log_softmax(), &[1, 3, 3], 0), &[logits], 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn infeasible_target_is_reported() {
    let lp = Tensor::zeros(&[2, 3]);
    assert_eq!(required_min_length(&[1, 1]), 3);
    assert!(matches!(ctc_loss(&lp, &[1, 1], 0), Err(Error::Infeasible { required: 3, available: 2 })));
    assert!(matches!(ctc_loss(&lp, &[0], 0), Err(Error::Usage(_))));
}

#[test]
fn greedy_reading_is_the_best_path_collapsed() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let lp = random_log_probs(5, 4, &mut rng);
        let out = greedy_decode(&lp, 0).unwrap();
        let best: f64 = out.raw_tokens.iter().enumerate().map(|(t, &k)| lp.get(t, k)).sum();
        let brute_best = (0..5)
            .map(|t| lp.row(t).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>();
        assert!((best - brute_best).abs() < 1e-12);
        assert_eq!(out.collapsed, delib_core::ctc::collapse(&out.raw_tokens, 0));
    }
}
