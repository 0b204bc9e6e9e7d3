//! Worked examples for operations whose unit tests need sampling or training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use miner_core::autodiff::{Matrix, Tape};
use miner_core::densities::{sample_noise, sample_sphere_uniform, vmf_mean_resultant, DensityKind, KernelSpec};
use miner_core::estimators::{entropy_joe, entropy_joe_var, entropy_plugin_kde_var, kde_density_at, ProjectionBatch};
use miner_core::evaluation::{mcc_score, r2_score};
use miner_core::methods::{kmeans_assign, sinkhorn};
use miner_core::synthetic::{sample_latent_batch, sample_views, GenerativeSpec, MixingNet, MixingSpec};
use miner_core::training::{score_held_out, RunConfig, TrainState};
use miner_core::verify::OT_DIM;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(n: usize, d: usize, r: &mut ChaCha8Rng) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    Matrix::from_fn(n, d, |_, _| StandardNormal.sample(r))
}

fn ks_distance(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut worst) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        worst = worst.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    worst
}

#[test]
fn gennorm_beta_two_is_gaussian() {
    let mut r = rng(1);
    let n = 10_000;
    let g: Vec<f64> = (0..n).map(|_| sample_noise(&DensityKind::GenNorm { beta: 2.0, scale: 1.0 }, 1, &mut r).unwrap()[0]).collect();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let n2: Vec<f64> = (0..n).map(|_| sample_noise(&DensityKind::Gaussian { sigma: s }, 1, &mut r).unwrap()[0]).collect();
    let ks = ks_distance(g, n2);
    assert!(ks < 0.02, "KS distance {ks}");
}

#[test]
fn joe_entropy_shifts_by_log_scale() {
    let mut r = rng(2);
    let z = normal_matrix(50, 3, &mut r);
    for c in [0.1, 2.5, 40.0] {
        let base = entropy_joe(&ProjectionBatch::unbounded(z.clone()).unwrap(), &KernelSpec::gaussian(0.4, 3).unwrap()).unwrap();
        let scaled =
            entropy_joe(&ProjectionBatch::unbounded(z.scale(c)).unwrap(), &KernelSpec::gaussian(0.4 * c, 3).unwrap()).unwrap();
        assert!((scaled - base - 3.0 * f64::ln(c)).abs() < 1e-12, "c = {c}");
    }
}

fn entropy_gradient_cosine(z: &Matrix, kernel: &KernelSpec) -> f64 {
    let grad = |plugin: bool| {
        let mut tape = Tape::new();
        let v = tape.param(z.clone());
        let h = if plugin { entropy_plugin_kde_var(&mut tape, v, kernel, true) } else { entropy_joe_var(&mut tape, v, kernel) }
            .unwrap();
        tape.backward(h).unwrap().get(v).unwrap().clone()
    };
    let (a, b) = (grad(false), grad(true));
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    dot / (a.frobenius_norm() * b.frobenius_norm())
}

fn min_density(z: &Matrix, kernel: &KernelSpec) -> f64 {
    let b = ProjectionBatch::unbounded(z.clone()).unwrap();
    (0..z.rows()).map(|i| kde_density_at(z.row(i), &b, kernel).unwrap()).fold(f64::INFINITY, f64::min)
}

#[test]
fn plugin_and_joe_gradients_point_the_same_way() {
    let mut r = rng(3);
    for trial in 0..10 {
        let z = normal_matrix(64, 5, &mut r).normalize_rows().unwrap();
        let kernel = KernelSpec::gaussian(0.1, 5).unwrap();
        assert!(min_density(&z, &kernel) > (-1.0f64).exp());
        let cos = entropy_gradient_cosine(&z, &kernel);
        assert!(cos > 0.9, "trial {trial}: cosine {cos}");
    }
}

#[test]
fn plugin_gradient_reverses_below_inverse_e() {
    // d(-p log p)/dp = -(log p + 1) changes sign at p = 1/e
    let mut r = rng(33);
    let z = normal_matrix(64, 5, &mut r).normalize_rows().unwrap();
    let kernel = KernelSpec::gaussian(0.5, 5).unwrap();
    let b = ProjectionBatch::unbounded(z.clone()).unwrap();
    let max = (0..64).map(|i| kde_density_at(z.row(i), &b, &kernel).unwrap()).fold(0.0, f64::max);
    assert!(max < (-1.0f64).exp());
    assert!(entropy_gradient_cosine(&z, &kernel) < -0.9);
}

#[test]
fn sinkhorn_three_iterations_on_wide_batches() {
    let mut r = rng(4);
    for _ in 0..20 {
        let z = normal_matrix(64, OT_DIM, &mut r).normalize_rows().unwrap();
        let c = normal_matrix(8, OT_DIM, &mut r).normalize_rows().unwrap();
        let v = sinkhorn(&z.matmul_t(&c), 0.05, 3).unwrap().marginal_violation();
        assert!(v < 0.05, "violation {v}");
    }
}

#[test]
fn kmeans_objective_never_increases() {
    let mut r = rng(5);
    for _ in 0..20 {
        let z = normal_matrix(80, 3, &mut r);
        let res = kmeans_assign(&z, 6, 10, &mut r).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", res.objective_trace);
        }
    }
}

#[test]
fn uniform_sphere_marginal_is_isotropic() {
    let mut r = rng(6);
    let n = 10_000;
    let mut mean = [0.0; 5];
    for _ in 0..n {
        for (m, x) in mean.iter_mut().zip(sample_sphere_uniform(5, &mut r)) {
            *m += x / n as f64;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm < 0.05, "mean norm {norm}");
}

#[test]
fn vmf_conditional_matches_mean_resultant() {
    let spec = GenerativeSpec { conditional: DensityKind::Vmf { kappa: 10.0 }, ..GenerativeSpec::default() };
    let (a, b) = sample_latent_batch(&spec, 10_000, &mut rng(7)).unwrap();
    let mean_cos = (0..a.rows()).map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum::<f64>()).sum::<f64>() / a.rows() as f64;
    let want = vmf_mean_resultant(spec.dim, 10.0);
    assert!((mean_cos / want - 1.0).abs() < 0.1, "{mean_cos} vs {want}");
}

#[test]
fn mixing_is_injective_on_a_scan() {
    let net = MixingNet::new(5, &MixingSpec { layers: 3, seed: 11 }).unwrap();
    let mut r = rng(8);
    let z: Vec<Vec<f64>> = (0..10_000).map(|_| sample_sphere_uniform(5, &mut r)).collect();
    let x: Vec<Vec<f64>> = z.iter().map(|v| net.mix(v).unwrap()).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    // sort by first output coordinate and compare neighbours plus a random sample of pairs
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i][0].total_cmp(&x[j][0]));
    for w in idx.windows(2) {
        if dist(&z[w[0]], &z[w[1]]) > 1e-3 {
            assert!(dist(&x[w[0]], &x[w[1]]) > 0.0);
        }
    }
    for i in (0..x.len()).step_by(7) {
        let j = (i * 7919 + 13) % x.len();
        if dist(&z[i], &z[j]) > 1e-3 {
            assert!(dist(&x[i], &x[j]) > 0.0);
        }
    }
}

#[test]
fn untrained_encoder_scores_below_raw_observations() {
    let cfg = RunConfig::default();
    let state = TrainState::init(&cfg).unwrap();
    let s = score_held_out(&cfg, &state.student, 4000).unwrap();
    let net = MixingNet::new(cfg.data.dim, &cfg.data.mixing).unwrap();
    let views = sample_views(&cfg.data, &net, 4000, &mut rng(10)).unwrap();
    let raw = r2_score(&views.x1, &views.z1).unwrap();
    // the mixing is mild (raw R2 near 86), so a random encoder keeps a good part of the linear signal
    assert!(s.r2 < raw - 10.0 && s.r2 < 70.0, "untrained R2 {} vs raw {raw}", s.r2);
}

#[test]
fn score_baselines() {
    let mut r = rng(9);
    let truth = normal_matrix(10_000, 5, &mut r);
    let noise = normal_matrix(10_000, 5, &mut r);
    assert!(r2_score(&noise, &truth).unwrap() < 1.0);
    assert!(mcc_score(&noise, &truth).unwrap() < 15.0);

    // box latents: on Gaussian latents the cubic's tails alone cap the correlation near 0.85
    let boxed = truth.map(f64::tanh);
    let perm = [3, 0, 4, 1, 2];
    let distorted = Matrix::from_fn(10_000, 5, |i, j| {
        let x = boxed[(i, perm[j])];
        x * x * x + x
    });
    assert!(mcc_score(&distorted, &boxed).unwrap() >= 95.0);
}
