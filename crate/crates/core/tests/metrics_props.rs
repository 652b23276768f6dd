//! Statistical behavior of the independence metrics: invariances of the
//! distance correlation, sampling behavior under independence, and the
//! closed-form Gaussian check for the mutual-information estimator.

use brnet_core::metrics::{classification_report, dcor2, mutual_info_knn};
use brnet_core::tensor::Tensor;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(&[n, d], data).unwrap()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random orthogonal matrix as a product of Givens rotations.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    for _ in 0..3 * d {
        let i = rng.gen_range(0..d);
        let mut j = rng.gen_range(0..d - 1);
        if j >= i {
            j += 1;
        }
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (s, c) = theta.sin_cos();
        for col in 0..d {
            let a = q[i * d + col];
            let b = q[j * d + col];
            q[i * d + col] = c * a - s * b;
            q[j * d + col] = s * a + c * b;
        }
    }
    q
}

fn apply_rotation(x: &Tensor, q: &[f64]) -> Tensor {
    let (n, d) = x.dims2().unwrap();
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += q[i * d + j] * x.data()[r * d + j];
            }
            out[r * d + i] = s;
        }
    }
    Tensor::from_vec(&[n, d], out).unwrap()
}

#[test]
fn dcor_invariant_under_translation_rotation_scaling() {
    let mut r = rng(11);
    let n = 64;
    let d = 4;
    let x = normal_matrix(&mut r, n, d);
    let y: Vec<f64> = (0..n)
        .map(|i| x.data()[i * d] * 0.8 + 0.3 * r.sample::<f64, _>(StandardNormal))
        .collect();
    let base = dcor2(&x, &y).unwrap();

    // translation
    let mut shifted = x.clone();
    for row in 0..n {
        for col in 0..d {
            shifted.data_mut()[row * d + col] += (col as f64 + 1.0) * 3.7;
        }
    }
    assert!((dcor2(&shifted, &y).unwrap() - base).abs() < 1e-9);

    // orthogonal rotation
    let q = random_rotation(&mut r, d);
    let rotated = apply_rotation(&x, &q);
    assert!((dcor2(&rotated, &y).unwrap() - base).abs() < 1e-9);

    // positive scaling of either argument
    let mut scaled = x.clone();
    for v in scaled.data_mut() {
        *v *= 5.3;
    }
    assert!((dcor2(&scaled, &y).unwrap() - base).abs() < 1e-9);
    let y_scaled: Vec<f64> = y.iter().map(|&v| v * 0.07).collect();
    assert!((dcor2(&x, &y_scaled).unwrap() - base).abs() < 1e-9);
}

#[test]
fn dcor_symmetric_for_univariate_arguments() {
    let mut r = rng(13);
    let n = 48;
    let a = normal_vec(&mut r, n);
    let b: Vec<f64> = a.iter().zip(normal_vec(&mut r, n)).map(|(&x, z)| x * x + 0.5 * z).collect();
    let at = Tensor::from_vec(&[n], a.clone()).unwrap();
    let bt = Tensor::from_vec(&[n], b.clone()).unwrap();
    let d1 = dcor2(&at, &b).unwrap();
    let d2 = dcor2(&bt, &a).unwrap();
    assert!((d1 - d2).abs() < 1e-12);
}

#[test]
fn dcor_small_under_independence() {
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let x = normal_matrix(&mut r, 512, 8);
        let y = normal_vec(&mut r, 512);
        let d = dcor2(&x, &y).unwrap();
        assert!(d < 0.05, "independent dcor2 {d} at seed {seed}");
    }
}

#[test]
fn mi_small_under_independence() {
    // feature-sized inputs, several seeds: each draw inside the noise
    // floor, and the mean much tighter
    let mut sum = 0.0;
    for seed in 0..5u64 {
        let mut r = rng(200 + seed);
        let x = normal_matrix(&mut r, 512, 32);
        let y = normal_vec(&mut r, 512);
        let mi = mutual_info_knn(&x, &y, 3).unwrap();
        assert!(mi.abs() < 0.05, "independent MI {mi} at seed {seed}");
        sum += mi;
    }
    assert!((sum / 5.0).abs() < 0.02);
}

#[test]
fn mi_large_for_deterministic_relation() {
    let mut r = rng(210);
    let y = normal_vec(&mut r, 512);
    let x = Tensor::from_vec(&[512], y.clone()).unwrap();
    let mi = mutual_info_knn(&x, &y, 3).unwrap();
    assert!(mi > 2.0, "deterministic MI {mi}");
}

#[test]
fn mi_matches_gaussian_closed_form() {
    // bivariate normal with correlation rho: MI = -ln(1 - rho^2) / 2
    let rho = 0.9f64;
    let expected = -0.5 * (1.0 - rho * rho).ln();
    let mut r = rng(220);
    let n = 512;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let z1: f64 = r.sample(StandardNormal);
        let z2: f64 = r.sample(StandardNormal);
        x.push(z1);
        y.push(rho * z1 + (1.0 - rho * rho).sqrt() * z2);
    }
    let xt = Tensor::from_vec(&[n], x).unwrap();
    let mi = mutual_info_knn(&xt, &y, 3).unwrap();
    assert!(
        (mi - expected).abs() < 0.1,
        "MI {mi} vs closed form {expected}"
    );
}

#[test]
fn mi_invariant_under_monotone_marginal_transforms() {
    let rho = 0.7f64;
    let mut r = rng(230);
    let n = 512;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let z1: f64 = r.sample(StandardNormal);
        let z2: f64 = r.sample(StandardNormal);
        x.push(z1);
        y.push(rho * z1 + (1.0 - rho * rho).sqrt() * z2);
    }
    let base = mutual_info_knn(&Tensor::from_vec(&[n], x.clone()).unwrap(), &y, 3).unwrap();

    let x_exp: Vec<f64> = x.iter().map(|&v| v.exp()).collect();
    let y_cubed: Vec<f64> = y.iter().map(|&v| v * v * v).collect();
    let transformed =
        mutual_info_knn(&Tensor::from_vec(&[n], x_exp).unwrap(), &y_cubed, 3).unwrap();
    assert!(
        (base - transformed).abs() < 0.05,
        "monotone transform moved MI from {base} to {transformed}"
    );
}

#[test]
fn auc_invariant_under_monotone_score_transforms() {
    let mut r = rng(240);
    let n = 200;
    let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2) as u8).collect();
    let probs: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let base: f64 = if l == 1 { 0.62 } else { 0.38 };
            let noise: f64 = r.sample::<f64, _>(StandardNormal) * 0.18;
            (base + noise).clamp(0.0, 1.0)
        })
        .collect();
    let base_auc = classification_report(&probs, &labels).unwrap().auc.unwrap();

    // strictly monotone map of the scores into (0,1)
    let squashed: Vec<f64> = probs.iter().map(|&p| 1.0 / (1.0 + (-(4.0 * p - 2.0)).exp())).collect();
    let squashed_auc = classification_report(&squashed, &labels).unwrap().auc.unwrap();
    assert!((base_auc - squashed_auc).abs() < 1e-12);
}
