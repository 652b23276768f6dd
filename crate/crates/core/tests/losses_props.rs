//! Loss-function properties, an independent recomputation oracle, and the
//! mean-independence enumeration battery.

use brnet_core::gradcheck::check_gradients;
use brnet_core::losses::{self, LossVariant, VariantKind};
use brnet_core::metrics;
use brnet_core::tape::Tape;
use brnet_core::tensor::Tensor;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Straightforward reimplementation of the correlation loss from its
/// definition, kept deliberately separate from the tape path.
fn naive_corr_sq(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let n = a.len() as f64;
    let ma: f64 = a.iter().sum::<f64>() / n;
    let mb: f64 = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
    cov * cov / ((va + eps) * (vb + eps))
}

fn naive_adv_corr(b: &[Vec<f64>], bhat: &[Vec<f64>], eps: f64) -> f64 {
    -(0..b.len()).map(|k| naive_corr_sq(&b[k], &bhat[k], eps)).sum::<f64>()
}

fn naive_mse(b: &[f64], bhat: &[f64]) -> f64 {
    b.iter().zip(bhat).map(|(x, y)| (y - x) * (y - x)).sum::<f64>() / b.len() as f64
}

fn columns_to_tensor(cols: &[Vec<f64>]) -> Tensor {
    let k = cols.len();
    let n = cols[0].len();
    let mut data = vec![0.0; n * k];
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            data[r * k + c] = v;
        }
    }
    Tensor::from_vec(&[n, k], data).unwrap()
}

#[test]
fn adv_corr_matches_independent_recomputation() {
    for seed in 0..8u64 {
        let mut r = rng(10 + seed);
        let n = 16;
        let k = 3;
        let b: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut r, n)).collect();
        let bh: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut r, n)).collect();
        let expected = naive_adv_corr(&b, &bh, 1e-8);

        let mut tape = Tape::new();
        let bt = tape.constant(columns_to_tensor(&b));
        let bht = tape.constant(columns_to_tensor(&bh));
        let loss = losses::adv_corr_loss(&mut tape, bt, bht, 1e-8).unwrap();
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
        assert!(tape.scalar(loss) <= 0.0 && tape.scalar(loss) >= -(k as f64));
    }
}

#[test]
fn mse_matches_independent_recomputation() {
    for seed in 0..8u64 {
        let mut r = rng(30 + seed);
        let n = 13;
        let b = rand_vec(&mut r, n);
        let bh = rand_vec(&mut r, n);
        let expected = naive_mse(&b, &bh);

        let mut tape = Tape::new();
        let bt = tape.constant(Tensor::from_vec(&[n], b.clone()).unwrap());
        let bht = tape.constant(Tensor::from_vec(&[n], bh.clone()).unwrap());
        let loss = losses::adv_mse_loss(&mut tape, bt, bht).unwrap();
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
    }
}

#[test]
fn zafar_matches_independent_recomputation() {
    for seed in 0..8u64 {
        let mut r = rng(50 + seed);
        let n = 12;
        let b = rand_vec(&mut r, n);
        let logits: Vec<f64> = (0..2 * n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let diff: Vec<f64> = (0..n).map(|i| logits[2 * i + 1] - logits[2 * i]).collect();
        let expected = naive_corr_sq(&b, &diff, 1e-8);

        let mut tape = Tape::new();
        let bt = tape.constant(Tensor::from_vec(&[n], b.clone()).unwrap());
        let lt = tape.constant(Tensor::from_vec(&[n, 2], logits.clone()).unwrap());
        let pen = losses::zafar_penalty(&mut tape, bt, lt, 1e-8).unwrap();
        assert!((tape.scalar(pen) - expected).abs() < 1e-12);
    }
}

#[test]
fn corr_sq_bounded_on_random_inputs() {
    for seed in 0..50u64 {
        let mut r = rng(70 + seed);
        let n = r.gen_range(2..40);
        let a = rand_vec(&mut r, n);
        let b = rand_vec(&mut r, n);
        let mut tape = Tape::new();
        let at = tape.constant(Tensor::from_vec(&[n], a).unwrap());
        let bt = tape.constant(Tensor::from_vec(&[n], b).unwrap());
        let c = losses::pearson_corr_sq(&mut tape, at, bt, 1e-8).unwrap();
        let v = tape.scalar(c);
        assert!((0.0..=1.0).contains(&v), "corr_sq {v} out of range");
    }
}

#[test]
fn corr_sq_shift_scale_invariance() {
    for seed in 0..10u64 {
        let mut r = rng(90 + seed);
        let n = 24;
        let b = rand_vec(&mut r, n);
        let bh = rand_vec(&mut r, n);
        let scale = r.gen_range(0.1..5.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let shift = r.gen_range(-10.0..10.0);
        let transformed: Vec<f64> = bh.iter().map(|&v| scale * v + shift).collect();

        let base = losses::pearson_corr_sq_value(&b, &bh, 1e-12).unwrap();
        let moved = losses::pearson_corr_sq_value(&b, &transformed, 1e-12).unwrap();
        assert!((base - moved).abs() < 1e-6, "shift/scale moved corr_sq by {}", base - moved);
    }
}

#[test]
fn adv_corr_gradient_matches_finite_differences() {
    for seed in 0..6u64 {
        let mut r = rng(110 + seed);
        let n = 10;
        let b = Tensor::from_vec(&[n], rand_vec(&mut r, n)).unwrap();
        let bh = Tensor::from_vec(&[n], rand_vec(&mut r, n)).unwrap();
        let b_const = b.clone();
        check_gradients(
            &[bh],
            &move |tape, ids| {
                let bt = tape.constant(b_const.clone());
                losses::adv_corr_loss(tape, bt, ids[0], 1e-8).unwrap()
            },
            1e-5,
            1e-5,
            "adv_corr_loss wrt predictions",
        );
    }
}

#[test]
fn adv_corr_invariant_under_joint_row_permutation() {
    let mut r = rng(130);
    let n = 20;
    let b = rand_vec(&mut r, n);
    let bh = rand_vec(&mut r, n);
    let mut perm: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut r);
    let bp: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
    let bhp: Vec<f64> = perm.iter().map(|&i| bh[i]).collect();

    let v1 = losses::pearson_corr_sq_value(&b, &bh, 1e-8).unwrap();
    let v2 = losses::pearson_corr_sq_value(&bp, &bhp, 1e-8).unwrap();
    assert!((v1 - v2).abs() < 1e-12);
}

#[test]
fn lambda_zero_objective_reduces_to_vanilla() {
    let br = LossVariant {
        kind: VariantKind::BrNet,
        lambda: 0.0,
        eps_std: 1e-8,
    };
    for loss_c in [0.0, 0.3, 2.5] {
        for adv in [-1.0, -0.2, 0.0] {
            let obj = losses::total_objective(&br, loss_c, Some(adv));
            assert_eq!(obj.primary, loss_c);
        }
    }
}

// ── Mean-independence enumeration battery ───────────────────────────
//
// Discrete joint distributions evaluated in exact integer arithmetic:
// cov = [W * sum(w*b*phi) - sum(w*b) * sum(w*phi)] / W^2 over outcomes
// with integer weights w and integer-valued b, phi.

/// Exact covariance numerator and denominator over integer-weighted
/// outcomes of integer-valued variables.
fn exact_cov(outcomes: &[(i128, i128, i128)]) -> (i128, i128) {
    let w_total: i128 = outcomes.iter().map(|&(w, _, _)| w).sum();
    let sum_bp: i128 = outcomes.iter().map(|&(w, b, p)| w * b * p).sum();
    let sum_b: i128 = outcomes.iter().map(|&(w, b, _)| w * b).sum();
    let sum_p: i128 = outcomes.iter().map(|&(w, _, p)| w * p).sum();
    (w_total * sum_bp - sum_b * sum_p, w_total * w_total)
}

/// Expand integer-weighted outcomes into explicit samples for the
/// floating-point covariance.
fn expand(outcomes: &[(i128, i128, i128)]) -> (Vec<f64>, Vec<f64>) {
    let mut b = Vec::new();
    let mut p = Vec::new();
    for &(w, bv, pv) in outcomes {
        for _ in 0..w {
            b.push(bv as f64);
            p.push(pv as f64);
        }
    }
    (b, p)
}

#[test]
fn battery_case_a_mean_independent_but_not_independent() {
    // F uniform on {0,1}, Z uniform on {-1,+1} independent, B = Z*(1+F).
    // E[B|F] = 0 for both F values, so B is mean independent of F even
    // though |B| reveals F. Every mapping phi of F has cov(B, phi(F)) = 0.
    let b_of = |f: i128, z: i128| z * (1 + f);

    // mean independence by direct enumeration
    for f in [0i128, 1] {
        let total: i128 = [-1i128, 1].iter().map(|&z| b_of(f, z)).sum();
        assert_eq!(total, 0, "E[B|F={f}] must vanish");
    }

    for (p0, p1) in [(1i128, 0i128), (0, 1), (3, -7), (12345, 678)] {
        let outcomes: Vec<(i128, i128, i128)> = [0i128, 1]
            .iter()
            .flat_map(|&f| {
                [-1i128, 1].iter().map(move |&z| {
                    let phi = if f == 0 { p0 } else { p1 };
                    (1i128, b_of(f, z), phi)
                }).collect::<Vec<_>>()
            })
            .collect();
        let (num, _den) = exact_cov(&outcomes);
        assert_eq!(num, 0, "cov(B, phi(F)) must be exactly zero");

        let (bs, ps) = expand(&outcomes);
        assert_eq!(metrics::covariance(&bs, &ps).unwrap(), 0.0);
    }
}

#[test]
fn battery_case_b_conditional_mean_mapping_detects_dependence() {
    // F uniform on {-1,0,1}, B = F^2. Linear covariance cov(B,F) is zero,
    // but phi(F) = E[B|F] = F^2 exposes the dependence: cov(B,phi) = 2/9.
    let outcomes_linear: Vec<(i128, i128, i128)> =
        [-1i128, 0, 1].iter().map(|&f| (1i128, f * f, f)).collect();
    let (num, _) = exact_cov(&outcomes_linear);
    assert_eq!(num, 0, "cov(B, F) must vanish");

    let outcomes_phi: Vec<(i128, i128, i128)> =
        [-1i128, 0, 1].iter().map(|&f| (1i128, f * f, f * f)).collect();
    let (num, den) = exact_cov(&outcomes_phi);
    // exact equality with 2/9
    assert_eq!(num * 9, den * 2, "cov(B, phi(F)) must equal 2/9 exactly");

    let (bs, ps) = expand(&outcomes_phi);
    let cov = metrics::covariance(&bs, &ps).unwrap();
    assert!((cov - 2.0 / 9.0).abs() < 1e-15);

    let (bs, fs) = expand(&outcomes_linear);
    assert_eq!(metrics::covariance(&bs, &fs).unwrap(), 0.0);
}

#[test]
fn battery_case_c_full_independence_kills_every_mapping() {
    // B uniform on {1,2} independent of F uniform on {0,1}.
    for (p0, p1) in [(1i128, 0i128), (0, 1), (-4, 9), (1000003, -17)] {
        let mut outcomes = Vec::new();
        for b in [1i128, 2] {
            for f in [0i128, 1] {
                let phi = if f == 0 { p0 } else { p1 };
                outcomes.push((1i128, b, phi));
            }
        }
        let (num, _) = exact_cov(&outcomes);
        assert_eq!(num, 0, "independence implies zero covariance for any phi");

        let (bs, ps) = expand(&outcomes);
        assert!(metrics::covariance(&bs, &ps).unwrap().abs() < 1e-12);
    }
}
