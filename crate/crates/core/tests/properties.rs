mod common;

use common::random_log_probs;
use delib_core::ctc::{collapse, ctc_loss, required_min_length};
use delib_core::decoders::fuzzy_length;
use delib_core::noising::{delete_noise, substitute_noise, ConfusionDictionary};
use delib_core::tensor::grad_check;
use delib_core::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-5;
const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Contracts a matrix output to a scalar with fixed random weights, so the
/// check covers every output component.
fn project<'g>(g: &'g Graph, out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::uniform(&out.shape(), 1.0, &mut rng);
    Ok(out.mul(&g.constant(w))?.sum())
}

fn check<F>(f: F, theta: &[Tensor]) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    grad_check(f, theta, H).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn binary_primitives_match_finite_differences(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let bt = rand_tensor(&mut rng, &[n, k]);
        let c = rand_tensor(&mut rng, &[m, k]);
        let row = rand_tensor(&mut rng, &[k]);
        let worst = [
            check(|g, x| project(g, x[0].matmul(&x[1])?, seed), &[a.clone(), b]),
            check(|g, x| project(g, x[0].matmul_t(&x[1])?, seed), &[a.clone(), bt]),
            check(|g, x| project(g, x[0].add(&x[1])?, seed), &[a.clone(), c.clone()]),
            check(|g, x| project(g, x[0].sub(&x[1])?, seed), &[a.clone(), c.clone()]),
            check(|g, x| project(g, x[0].mul(&x[1])?, seed), &[a.clone(), c.clone()]),
            check(|g, x| project(g, x[0].add_row(&x[1])?, seed), &[a.clone(), row]),
            check(|g, x| project(g, g.concat_cols(&[x[0], x[1]])?, seed), &[a, c]),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        prop_assert!(worst < PRIMITIVE_TOL, "{worst}");
    }

    #[test]
    fn unary_primitives_match_finite_differences(seed in any::<u64>(), m in 1usize..4, n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, n]);
        // Keep relu inputs away from its kink.
        let mut away = a.clone();
        for v in away.data_mut() {
            *v += 0.05f64.copysign(*v);
        }
        let gain = rand_tensor(&mut rng, &[n]);
        let bias = rand_tensor(&mut rng, &[n]);
        let ids: Vec<usize> = (0..3).map(|_| rng.random_range(0..m)).collect();
        let mask = rand_tensor(&mut rng, &[m, n]);
        let worst = [
            check(|g, x| project(g, x[0].scale(-1.7), seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].add_const(&mask)?, seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].relu(), seed), &[away]),
            check(|g, x| project(g, x[0].softmax(1)?, seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].softmax(0)?, seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].log_softmax(), seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].layer_norm(&x[1], &x[2], 1e-5)?, seed), &[a.clone(), gain, bias]),
            check(|g, x| project(g, x[0].gather_rows(&ids)?, seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].slice_cols(1, n - 1)?, seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].mean_rows(m)?, seed), std::slice::from_ref(&a)),
            check(|g, x| project(g, x[0].transpose()?, seed), std::slice::from_ref(&a)),
            check(|_, x| Ok(x[0].sum()), &[a]),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        prop_assert!(worst < PRIMITIVE_TOL, "{worst}");
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), m in 1usize..6, n in 1usize..8, scale in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = rand_tensor(&mut rng, &[m, n]);
        for v in a.data_mut() {
            *v *= scale;
        }
        let s = a.softmax(1).unwrap();
        for i in 0..m {
            let row = s.row(i);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_inverts_blank_separated_expansion(target in prop::collection::vec(1usize..4, 0..8), pad in prop::collection::vec(0usize..3, 0..10)) {
        // Expand with repeats and blanks, the way an alignment would.
        let mut raw = Vec::new();
        for (i, &t) in target.iter().enumerate() {
            if i > 0 && target[i - 1] == t {
                raw.push(0);
            }
            for _ in 0..=pad.get(i).copied().unwrap_or(0) {
                raw.push(t);
            }
        }
        prop_assert_eq!(collapse(&raw, 0), target.clone());
        prop_assert!(raw.len() >= required_min_length(&target));
        prop_assert!(!collapse(&raw, 0).contains(&0));
    }

    #[test]
    fn ctc_probability_is_a_probability(seed in any::<u64>(), l in 1usize..7, target in prop::collection::vec(1usize..4, 0..4)) {
        let lp = random_log_probs(l, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        if let Ok(r) = ctc_loss(&lp, &target, 0) {
            prop_assert!(r.nll >= -1e-12);
            let row_sums: Vec<f64> = (0..l).map(|t| r.per_position_grad.row(t).iter().sum()).collect();
            // d nll / d log p sums to -1 per position when rows are normalized.
            for s in row_sums {
                prop_assert!((s + 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deletion_keeps_an_ordered_subsequence(seed in any::<u64>(), n in 0usize..30, p in 0.0f64..1.0) {
        let toks: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let out = delete_noise(&toks, p, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut it = toks.iter();
        for w in &out {
            prop_assert!(it.any(|t| t == w));
        }
    }

    #[test]
    fn substitution_preserves_length_and_uses_the_dictionary(seed in any::<u64>(), n in 0usize..30, p in 0.0f64..1.0) {
        let mut dict = ConfusionDictionary::new();
        dict.add("w1", "x1", 3);
        dict.add("w1", "y1", 1);
        dict.add("w4", "x4", 2);
        let toks: Vec<String> = (0..n).map(|i| format!("w{}", i % 6)).collect();
        let out = substitute_noise(&toks, p, &dict, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.len(), toks.len());
        for (a, b) in toks.iter().zip(&out) {
            prop_assert!(a == b || dict.replacements(a).iter().any(|(r, _)| r == b));
        }
    }

    #[test]
    fn fuzzy_length_is_monotone_and_covers_the_target(alpha in 1.0f64..5.0, n in 1usize..64) {
        let max_len = 64;
        let l = fuzzy_length(alpha, n, max_len);
        prop_assert!(l >= 1 && l <= max_len * alpha.ceil() as usize);
        prop_assert!(l as f64 >= (alpha * n as f64 - 1e-9).min((max_len * alpha.ceil() as usize) as f64));
        prop_assert!(fuzzy_length(alpha, n + 1, max_len) >= l);
    }
}
