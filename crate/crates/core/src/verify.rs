//! Named oracle and property checks, one or more per module invariant.
//!
//! Each check is a plain function returning a one-line detail on success and
//! a diagnostic on failure. Checks marked `slow` train small models.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, Head, Layer, Matrix, MlpParams, Tape, Var, DEFAULT_STEP};
use crate::config::parse_sweep;
use crate::densities::{
    kernel_eval, log_density, sample_noise, sample_vmf, sample_sphere_uniform, vmf_mean_resultant, DensityKind,
    KernelKind, KernelSpec, ReconstructionDensity, Similarity, Support,
};
use crate::estimators::{
    contrastive_loss, contrastive_loss_symmetric_var, entropy_joe, entropy_joe_var, entropy_plugin_disc,
    entropy_plugin_disc_var, entropy_plugin_kde, entropy_plugin_kde_var, er_bound, infonce, infonce_var,
    reconstruction_cont, reconstruction_cont_var, reconstruction_disc_from, reconstruction_disc_var, shannon_entropy,
    DiscretePosterior, NegativeMode, ProjectionBatch,
};
use crate::evaluation::{abs_correlation_matrix, er_gap_report, exact_mi_discrete, mcc_report, r2_report, Correlation};
use crate::methods::{
    byol_loss, byol_loss_var, deepcluster_loss_var, dino_loss_var, kmeans_assign, sinkhorn, swav_loss_var, CenterState,
    TransportPlan, SINKHORN_EPS, SINKHORN_VERIFY_ITERS,
};
use crate::synthetic::{sample_views, MixingNet, MixingSpec};
use crate::training::{run_mvssl, score_held_out, train, MetricsLog, Method, RunConfig, TrainState};

pub type CheckResult = std::result::Result<String, String>;

#[derive(Clone, Copy, Debug)]
pub struct Check {
    pub name: &'static str,
    pub module: &'static str,
    pub description: &'static str,
    pub slow: bool,
    pub run: fn() -> CheckResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    /// Runs the check, turning panics into failures.
    pub fn execute(&self) -> Outcome {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(self.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let (passed, detail) = match res {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        Outcome { name: self.name, passed, detail, seconds: start.elapsed().as_secs_f64() }
    }
}

macro_rules! check {
    ($name:expr, $module:expr, $slow:expr, $f:ident, $desc:expr) => {
        Check { name: $name, module: $module, description: $desc, slow: $slow, run: $f }
    };
}

pub fn registry() -> Vec<Check> {
    vec![
        check!("autodiff.op_gradients", "autodiff", false, op_gradients, "every tape op matches central differences"),
        check!("autodiff.loss_gradients", "autodiff", false, loss_gradients, "every loss matches central differences within 1e-4"),
        check!("autodiff.stop_gradient", "autodiff", false, stop_gradient, "gradients through stop_gradient are exactly zero"),
        check!("autodiff.forward_determinism", "autodiff", false, forward_determinism, "same seed and input give bit-identical outputs"),
        check!("autodiff.sphere_head", "autodiff", false, sphere_head, "sphere head rows have unit norm within 1e-12"),
        check!("densities.vmf_unnormalized", "densities", false, vmf_unnormalized, "unnormalized vMF log density is kappa <t, c>"),
        check!("densities.kernel_scale", "densities", false, kernel_scale, "translation-invariant kernels depend on u/h only"),
        check!("densities.sampler_moments", "densities", false, sampler_moments, "vMF direction and additive noise variances"),
        check!("estimators.er_le_mi", "estimators", false, estimators_er_le_mi, "H + E log q never exceeds the exact MI"),
        check!("estimators.permutation_invariance", "estimators", false, permutation_invariance, "estimators ignore joint row permutations"),
        check!("estimators.plugin_disc_exact", "estimators", false, plugin_disc_exact, "plug-in entropy of identical rows is exact"),
        check!("estimators.mse_slopes", "estimators", false, mse_slopes, "log-log MSE slopes of plug-in entropy and reconstruction are -1 +- 0.3"),
        check!("estimators.infonce_le_log_k", "estimators", false, infonce_le_log_k, "InfoNCE never exceeds log k"),
        check!("methods.byol_identity", "methods", false, byol_identity, "|x/|x| - y/|y||^2 = 2(1 - cos)"),
        check!("methods.sinkhorn_monotone", "methods", false, sinkhorn_monotone, "Sinkhorn marginal violation never grows with iterations"),
        check!("methods.sinkhorn_optimum", "methods", false, sinkhorn_optimum, "Sinkhorn matches a Newton entropic-OT solver for k, m <= 4"),
        check!("methods.assignment_stop_gradient", "methods", false, assignment_stop_gradient, "SwAV/DeepCluster assignments receive no gradient"),
        check!("methods.dino_centering", "methods", true, dino_centering, "centering keeps DINO targets spread; without it they collapse"),
        check!("synthetic.mixing_reproducible", "synthetic", false, mixing_reproducible, "a seed rebuilds the same mixing net and data"),
        check!("synthetic.fixtures", "synthetic", false, fixtures, "all identifiability fixture rows are constructible"),
        check!("training.ema_replay", "training", false, ema_replay, "replaying student checkpoints reproduces the teacher"),
        check!("training.teacher_no_grad", "training", false, teacher_no_grad, "no gradient reaches teacher parameters"),
        check!("training.er_loss_identity", "training", false, er_loss_identity, "ER loss equals -(entropy + w rec) at every step"),
        check!("training.batch_size_robustness", "training", true, batch_size_robustness, "ER varies less with batch size than native SimCLR"),
        check!("evaluation.gap_is_kl", "evaluation", false, gap_is_kl, "MI - ER equals the average KL and is never negative"),
        check!("evaluation.metric_invariance", "evaluation", false, metric_invariance, "R2 affine and MCC signed-permutation invariance"),
        check!("evaluation.mcc_optimal", "evaluation", false, mcc_optimal, "MCC assignment matches exhaustive search for d <= 6"),
        check!("cli.determinism", "cli", false, run_determinism, "identical config and seed give byte-identical metrics"),
        check!("cli.csv_round_trip", "cli", false, csv_round_trip, "metrics CSV re-parses to the same log"),
    ]
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(k: usize, d: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(k, d, |_, _| r.sample(StandardNormal))
}

fn unit_rows(k: usize, d: usize, r: &mut ChaCha8Rng) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..k).map(|_| sample_sphere_uniform(d, r)).collect();
    Matrix::from_rows(&rows).expect("rectangular")
}

fn random_pmf(m: usize, r: &mut ChaCha8Rng, zeros: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..m)
        .map(|_| {
            if zeros && r.random::<f64>() < 0.2 {
                0.0
            } else {
                (2.0 * r.sample::<f64, _>(StandardNormal)).exp()
            }
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.iter_mut().for_each(|v| *v = (*v - mx).exp());
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    out
}

// ---------------------------------------------------------------- autodiff

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>;

fn op_cases(r: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Matrix>, f64, LossFn)> {
    let a = gauss(4, 3, r);
    let b = gauss(4, 3, r);
    let w = gauss(3, 5, r);
    let row = gauss(1, 3, r);
    let col = gauss(4, 1, r);
    let pos = a.map(|v| v.abs() + 0.5);
    let weight = gauss(4, 3, r);
    // weighted sum makes every output entry matter
    let reduce = move |t: &mut Tape, x: Var| -> Var {
        let (rr, cc) = t.shape(x);
        let wm = t.constant(Matrix::from_fn(rr, cc, |i, j| (1.3 * i as f64 + 2.7 * j as f64 + 0.4).sin()));
        let p = t.mul(x, wm);
        t.sum(p)
    };
    let mut v: Vec<(&'static str, Vec<Matrix>, f64, LossFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, $params:expr, $tol:expr, |$t:ident, $x:ident| $body:expr) => {
            v.push(($name, $params, $tol, Box::new(move |$t: &mut Tape, $x: &[Var]| {
                let out = $body;
                Ok(reduce($t, out))
            })));
        };
    }
    let smooth = 1e-6;
    let kink = 1e-4;
    case!("matmul", vec![a.clone(), w.clone()], smooth, |t, x| t.matmul(x[0], x[1]));
    case!("matmul_t", vec![a.clone(), b.clone()], smooth, |t, x| t.matmul_t(x[0], x[1]));
    case!("add", vec![a.clone(), b.clone()], smooth, |t, x| t.add(x[0], x[1]));
    case!("sub", vec![a.clone(), b.clone()], smooth, |t, x| t.sub(x[0], x[1]));
    case!("mul", vec![a.clone(), b.clone()], smooth, |t, x| t.mul(x[0], x[1]));
    case!("add_row", vec![a.clone(), row.clone()], smooth, |t, x| t.add_row(x[0], x[1]));
    case!("add_col", vec![a.clone(), col.clone()], smooth, |t, x| t.add_col(x[0], x[1]));
    case!("sub_col", vec![a.clone(), col.clone()], smooth, |t, x| t.sub_col(x[0], x[1]));
    case!("mul_col", vec![a.clone(), col.clone()], smooth, |t, x| t.mul_col(x[0], x[1]));
    case!("scale", vec![a.clone()], smooth, |t, x| t.scale(x[0], -1.7));
    case!("neg", vec![a.clone()], smooth, |t, x| t.neg(x[0]));
    case!("offset", vec![a.clone()], smooth, |t, x| {
        let o = t.offset(x[0], 0.3);
        t.mul(o, o)
    });
    case!("leaky_relu", vec![a.clone()], kink, |t, x| t.leaky_relu(x[0], 0.2));
    case!("tanh", vec![a.clone()], smooth, |t, x| t.tanh(x[0]));
    case!("exp", vec![a.clone()], smooth, |t, x| t.exp(x[0]));
    case!("ln", vec![pos.clone()], smooth, |t, x| t.ln(x[0]));
    case!("sum", vec![a.clone()], smooth, |t, x| {
        let s = t.sum(x[0]);
        t.mul(s, s)
    });
    case!("mean", vec![a.clone()], smooth, |t, x| {
        let s = t.mean(x[0]);
        t.mul(s, s)
    });
    case!("row_sums", vec![a.clone()], smooth, |t, x| {
        let s = t.row_sums(x[0]);
        t.mul(s, s)
    });
    case!("col_sums", vec![a.clone()], smooth, |t, x| {
        let s = t.col_sums(x[0]);
        t.mul(s, s)
    });
    case!("row_dot", vec![a.clone(), b.clone()], smooth, |t, x| t.row_dot(x[0], x[1]));
    case!("normalize_rows", vec![a.clone()], smooth, |t, x| t.normalize_rows(x[0]));
    case!("logsumexp_rows", vec![a.clone()], smooth, |t, x| t.logsumexp_rows(x[0], None));
    case!("logsumexp_rows_masked", vec![a.clone()], smooth, |t, x| {
        let mask: std::rc::Rc<[bool]> = (0..12).map(|i| i % 4 != 1).collect();
        t.logsumexp_rows(x[0], Some(mask))
    });
    case!("log_softmax_rows", vec![a.clone()], smooth, |t, x| t.log_softmax_rows(x[0]));
    case!("softmax_rows", vec![a.clone()], smooth, |t, x| t.softmax_rows(x[0]));
    case!("pairwise_dist_pow2", vec![a.clone(), b.clone()], smooth, |t, x| t.pairwise_dist_pow(x[0], x[1], 2.0));
    case!("pairwise_dist_pow1", vec![a.clone(), b.clone()], kink, |t, x| t.pairwise_dist_pow(x[0], x[1], 1.0));
    case!("pairwise_dist_pow3", vec![a.clone(), b.clone()], kink, |t, x| t.pairwise_dist_pow(x[0], x[1], 3.0));
    case!("row_dist_pow2", vec![a.clone(), b.clone()], smooth, |t, x| t.row_dist_pow(x[0], x[1], 2.0));
    case!("row_dist_pow1", vec![a.clone(), b.clone()], kink, |t, x| t.row_dist_pow(x[0], x[1], 1.0));
    case!("hconcat", vec![a.clone(), weight.clone()], smooth, |t, x| {
        let h = t.hconcat(x[0], x[1]);
        t.mul(h, h)
    });
    v
}

fn op_gradients() -> CheckResult {
    let mut r = rng(101);
    let mut worst = (0.0f64, "");
    for (name, params, tol, f) in op_cases(&mut r) {
        let rep = grad_check(|t, v| f(t, v), &params, DEFAULT_STEP, None).map_err(|e| format!("{name}: {e}"))?;
        ensure(rep.max_rel_error <= tol, || format!("{name}: relative error {:e} > {tol:e}", rep.max_rel_error))?;
        if rep.max_rel_error > worst.0 {
            worst = (rep.max_rel_error, name);
        }
    }
    Ok(format!("worst relative error {:.2e} ({})", worst.0, worst.1))
}

/// Every differentiable loss in the library as a function of its trainable inputs.
pub fn loss_cases(seed: u64) -> Vec<(String, Vec<Matrix>, LossFn)> {
    let mut r = rng(seed);
    let (k, d, m) = (6, 3, 4);
    let z1 = gauss(k, d, &mut r);
    let z2 = gauss(k, d, &mut r);
    let bank = gauss(5, d, &mut r);
    let logits1 = gauss(k, m, &mut r);
    let logits2 = gauss(k, m, &mut r);
    let mut out: Vec<(String, Vec<Matrix>, LossFn)> = Vec::new();

    let kernels = [
        ("gaussian", KernelSpec::gaussian(0.8, d).unwrap()),
        ("laplace", KernelSpec::new(KernelKind::Laplace, 1.3, d).unwrap()),
        ("gen_norm", KernelSpec::new(KernelKind::GenNorm { beta: 3.0 }, 1.1, d).unwrap()),
        ("vmf", KernelSpec::new(KernelKind::Vmf { kappa: 2.0 }, 0.7, d).unwrap()),
    ];
    for (kname, spec) in kernels {
        let f = Similarity::LogKernel(spec);
        out.push((
            format!("er_joe/{kname}"),
            vec![z1.clone(), z2.clone()],
            Box::new(move |t, v| {
                let h = entropy_joe_var(t, v[0], &spec)?;
                let rec = reconstruction_cont_var(t, v[0], v[1], &f)?;
                let s = t.add(h, rec);
                Ok(t.neg(s))
            }),
        ));
        for nv in [false, true] {
            out.push((
                format!("er_plugin{}/{kname}", if nv { "_normalized" } else { "" }),
                vec![z1.clone(), z2.clone()],
                Box::new(move |t, v| {
                    let h = entropy_plugin_kde_var(t, v[0], &spec, nv)?;
                    let rec = reconstruction_cont_var(t, v[0], v[1], &f)?;
                    let s = t.add(h, rec);
                    Ok(t.neg(s))
                }),
            ));
        }
    }
    {
        let (l1, l2) = (logits1.clone(), logits2.clone());
        let targets = row_softmax(&l1);
        out.push((
            "er_discrete".into(),
            vec![l1, l2],
            Box::new(move |t, v| {
                let p = t.softmax_rows(v[0]);
                let h = entropy_plugin_disc_var(t, p, 1)?;
                let lq = t.log_softmax_rows(v[1]);
                let rec = reconstruction_disc_var(t, lq, &targets)?;
                let s = t.add(h, rec);
                Ok(t.neg(s))
            }),
        ));
    }
    let cos = Similarity::cosine(0.5).unwrap();
    out.push((
        "infonce".into(),
        vec![z1.clone(), z2.clone()],
        Box::new(move |t, v| {
            let x = infonce_var(t, v[0], v[1], &cos)?;
            Ok(t.neg(x))
        }),
    ));
    let modes = [
        NegativeMode::Cmc,
        NegativeMode::Simclr,
        NegativeMode::SelfInclusive,
        NegativeMode::SelfExcluding,
        NegativeMode::MemoryBank { bank },
    ];
    for mode in modes {
        let name = match &mode {
            NegativeMode::Cmc => "cmc",
            NegativeMode::Simclr => "simclr",
            NegativeMode::SelfInclusive => "self_inclusive",
            NegativeMode::SelfExcluding => "self_excluding",
            NegativeMode::MemoryBank { .. } => "memory_bank",
        };
        out.push((
            format!("contrastive/{name}"),
            vec![z1.clone(), z2.clone()],
            Box::new(move |t, v| contrastive_loss_symmetric_var(t, v[0], v[1], &cos, &mode)),
        ));
    }
    {
        let target = z2.clone();
        out.push((
            "byol".into(),
            vec![z1.clone()],
            Box::new(move |t, v| {
                let tv = t.constant(target.clone());
                byol_loss_var(t, v[0], tv)
            }),
        ));
    }
    {
        let teacher = logits2.clone();
        let center = CenterState { c: Matrix::row_vector(vec![0.1, -0.2, 0.05, 0.3]), momentum: 0.9 };
        out.push((
            "dino".into(),
            vec![logits1.clone()],
            Box::new(move |t, v| {
                let tv = t.constant(teacher.clone());
                dino_loss_var(t, v[0], tv, &center, 0.5, 0.2)
            }),
        ));
    }
    {
        let protos = unit_rows(m, d, &mut r);
        let zs = unit_rows(k, d, &mut r);
        let plan = sinkhorn(&zs.matmul_t(&protos), SINKHORN_EPS, 3).unwrap();
        let targets = plan.row_pmfs().unwrap().values().clone();
        out.push((
            "swav".into(),
            vec![z1.clone(), protos],
            Box::new(move |t, v| swav_loss_var(t, &targets, v[0], v[1], 0.5)),
        ));
    }
    {
        let mut kr = rng(seed ^ 0x55);
        let km = kmeans_assign(&z2, m, 5, &mut kr).unwrap();
        let posteriors = km.posteriors.clone();
        let predictor = MlpParams::from_layers(
            vec![Layer { weight: gauss(d, m, &mut r), bias: gauss(1, m, &mut r) }],
            0.2,
            Head::None,
        )
        .unwrap();
        let weights = crate::methods::uniform_resample_weights(&posteriors);
        out.push((
            "deepcluster".into(),
            vec![z1.clone()],
            Box::new(move |t, v| Ok(deepcluster_loss_var(t, &posteriors, v[0], &predictor, Some(&weights))?.0)),
        ));
    }
    out
}

fn loss_gradients() -> CheckResult {
    let mut worst = (0.0f64, String::new());
    for seed in [7, 8] {
        for (name, params, f) in loss_cases(seed) {
            let rep = grad_check(|t, v| f(t, v), &params, DEFAULT_STEP, None).map_err(|e| format!("{name}: {e}"))?;
            ensure(rep.max_rel_error <= 1e-4, || format!("{name}: relative error {:e}", rep.max_rel_error))?;
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, name);
            }
        }
    }
    Ok(format!("worst relative error {:.2e} ({})", worst.0, worst.1))
}

fn stop_gradient() -> CheckResult {
    let mut r = rng(3);
    let mut count = 0;
    for (name, params, _, f) in op_cases(&mut r) {
        if params.len() < 2 {
            continue;
        }
        let mut t = Tape::new();
        let x = t.param(params[0].clone());
        let y = t.param(params[1].clone());
        let sx = t.stop_gradient(x);
        let l = f(&mut t, &[sx, y]).map_err(e2s)?;
        let g = t.backward(l).map_err(e2s)?;
        let gx = g.wrt(x);
        ensure(gx.as_slice().iter().all(|&v| v == 0.0), || format!("{name}: gradient leaked through stop_gradient"))?;
        count += 1;
    }
    // teacher side of DINO and BYOL targets
    let s = gauss(5, 4, &mut r);
    let te = gauss(5, 4, &mut r);
    let c = CenterState::zeros(4, 0.9).map_err(e2s)?;
    let mut t = Tape::new();
    let (vs, vt) = (t.param(s.clone()), t.param(te.clone()));
    let l = dino_loss_var(&mut t, vs, vt, &c, 0.1, 0.04).map_err(e2s)?;
    let g = t.backward(l).map_err(e2s)?;
    ensure(g.wrt(vt).as_slice().iter().all(|&v| v == 0.0), || "DINO teacher received gradient".into())?;
    Ok(format!("{} ops and the DINO teacher get exact zeros", count))
}

fn forward_determinism() -> CheckResult {
    let a = MlpParams::init(&[5, 16, 16, 5], 0.2, Head::Sphere, &mut rng(9)).map_err(e2s)?;
    let b = MlpParams::init(&[5, 16, 16, 5], 0.2, Head::Sphere, &mut rng(9)).map_err(e2s)?;
    ensure(a == b, || "initialization differs for the same seed".into())?;
    let x = gauss(32, 5, &mut rng(10));
    let (o1, o2) = (a.predict(&x).map_err(e2s)?, b.predict(&x).map_err(e2s)?);
    ensure(o1.bit_eq(&o2), || "outputs differ".into())?;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let (o3, _) = a.forward(&mut t, xv).map_err(e2s)?;
    ensure(t.value(o3).bit_eq(&o1), || "tape forward differs from predict".into())?;
    t.verify_replay().map_err(e2s)?;
    Ok("bit-identical".into())
}

fn sphere_head() -> CheckResult {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let net = MlpParams::init(&[4, 8, 6], 0.2, Head::Sphere, &mut rng(seed)).map_err(e2s)?;
        let x = gauss(50, 4, &mut rng(seed + 100)).scale(10f64.powi(seed as i32 - 2));
        let out = net.predict(&x).map_err(e2s)?;
        for r in out.row_iter() {
            worst = worst.max((crate::autodiff::norm(r) - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("norm deviation {worst:e}"))?;
    Ok(format!("max norm deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- densities

fn vmf_unnormalized() -> CheckResult {
    let mut r = rng(11);
    for d in 2..7 {
        for &kappa in &[0.1, 1.0, 7.5, 100.0] {
            let dens = ReconstructionDensity::new(DensityKind::Vmf { kappa }, Support::Sphere).map_err(e2s)?;
            for _ in 0..20 {
                let t = sample_sphere_uniform(d, &mut r);
                let c = sample_sphere_uniform(d, &mut r);
                let got = log_density(&dens, &t, &c, false).map_err(e2s)?;
                let want = kappa * crate::autodiff::dot(&t, &c);
                ensure(got == want, || format!("d={d} kappa={kappa}: {got} != {want}"))?;
            }
        }
    }
    Ok("exact on 400 pairs".into())
}

fn kernel_scale() -> CheckResult {
    let mut r = rng(12);
    let mut worst = 0.0f64;
    for kind in [KernelKind::Gaussian, KernelKind::Laplace, KernelKind::GenNorm { beta: 1.5 }, KernelKind::GenNorm { beta: 4.0 }] {
        for d in 1..5 {
            for _ in 0..25 {
                let h: f64 = r.random_range(0.1..3.0);
                let c: f64 = r.random_range(0.2..5.0);
                let u: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
                let a = kernel_eval(&KernelSpec::new(kind, h, d).map_err(e2s)?, &u).map_err(e2s)?;
                let b = kernel_eval(&KernelSpec::new(kind, c * h, d).map_err(e2s)?, &cu).map_err(e2s)?;
                let rel = (a - b).abs() / a.abs().max(1e-300);
                worst = worst.max(rel);
            }
        }
    }
    ensure(worst <= 1e-12, || format!("relative difference {worst:e}"))?;
    Ok(format!("max relative difference {worst:.1e}"))
}

fn sampler_moments() -> CheckResult {
    let mut r = rng(13);
    let mut notes = Vec::new();
    for d in [2, 3, 5, 10] {
        for kappa in [1.0, 5.0, 50.0] {
            let mu = sample_sphere_uniform(d, &mut r);
            let mut mean = vec![0.0; d];
            let n = 1000;
            for _ in 0..n {
                let x = sample_vmf(&mu, kappa, &mut r).map_err(e2s)?;
                mean.iter_mut().zip(&x).for_each(|(m, v)| *m += v / n as f64);
            }
            let len = crate::autodiff::norm(&mean);
            let cosv = crate::autodiff::dot(&mean, &mu) / len;
            ensure(cosv > 0.0, || format!("vMF d={d} kappa={kappa}: mean direction cosine {cosv}"))?;
            let want = vmf_mean_resultant(d, kappa);
            ensure((len - want).abs() < 0.1, || format!("vMF d={d} kappa={kappa}: resultant {len} vs {want}"))?;
        }
    }
    notes.push("vMF ok".to_string());
    let kinds = [
        DensityKind::Gaussian { sigma: 0.3 },
        DensityKind::Laplace { scale: 0.05 },
        DensityKind::Laplace { scale: 1.0 },
        DensityKind::GenNorm { beta: 3.0, scale: 0.5 },
        DensityKind::GenNorm { beta: 0.8, scale: 1.0 },
    ];
    for kind in kinds {
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_noise(&kind, 1, &mut r).map(|v| v[0])).collect::<crate::Result<_>>().map_err(e2s)?;
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = kind.noise_variance().expect("additive family");
        ensure((var / want - 1.0).abs() < 0.1, || format!("{kind:?}: variance {var} vs {want}"))?;
    }
    notes.push("noise variances within 10%".into());
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- estimators

fn random_joint(r: &mut ChaCha8Rng) -> Matrix {
    let (m1, m2) = (r.random_range(1..=8), r.random_range(1..=8));
    let flat = random_pmf(m1 * m2, r, true);
    Matrix::from_vec(m1, m2, flat).expect("sized")
}

fn random_recon(m1: usize, m2: usize, r: &mut ChaCha8Rng) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..m1).map(|_| random_pmf(m2, r, false)).collect();
    Matrix::from_rows(&rows).expect("rectangular")
}

fn true_conditional(joint: &Matrix) -> Matrix {
    let (m1, m2) = joint.shape();
    let mut q = Matrix::filled(m1, m2, 1.0 / m2 as f64);
    for i in 0..m1 {
        let s: f64 = joint.row(i).iter().sum();
        if s > 0.0 {
            let row: Vec<f64> = joint.row(i).iter().map(|v| v / s).collect();
            q.row_mut(i).copy_from_slice(&row);
        }
    }
    q
}

fn estimators_er_le_mi() -> CheckResult {
    let mut r = rng(14);
    let mut tight = 0.0f64;
    for _ in 0..500 {
        let joint = random_joint(&mut r);
        let (m1, m2) = joint.shape();
        let mi = exact_mi_discrete(&joint).map_err(e2s)?;
        let marg: Vec<f64> = joint.column_sums().into_vec();
        let h2 = shannon_entropy(&marg);
        let er_of = |q: &Matrix| -> f64 {
            let mut rec = 0.0;
            for i in 0..m1 {
                for j in 0..m2 {
                    if joint[(i, j)] > 0.0 {
                        rec += joint[(i, j)] * q[(i, j)].ln();
                    }
                }
            }
            er_bound(h2, rec, 1.0).map(|v| v.total).unwrap_or(f64::NEG_INFINITY)
        };
        let q = random_recon(m1, m2, &mut r);
        let er = er_of(&q);
        ensure(er <= mi + 1e-12, || format!("ER {er} exceeds MI {mi}"))?;
        let er_true = er_of(&true_conditional(&joint));
        tight = tight.max((er_true - mi).abs());
    }
    ensure(tight <= 1e-12, || format!("bound not tight at the true conditional: {tight:e}"))?;
    Ok(format!("500 joints, tightness error {tight:.1e}"))
}

fn permuted(m: &Matrix, perm: &[usize]) -> Matrix {
    m.select_rows(perm)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn permutation_invariance() -> CheckResult {
    let mut r = rng(15);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let (k, d) = (7 + trial, 3);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut r);
        let a = gauss(k, d, &mut r);
        let b = gauss(k, d, &mut r);
        let (pa, pb) = (permuted(&a, &perm), permuted(&b, &perm));
        let batch = |m: &Matrix| ProjectionBatch::unbounded(m.clone()).unwrap();
        let (za, zb, zpa, zpb) = (batch(&a), batch(&b), batch(&pa), batch(&pb));
        let spec = KernelSpec::gaussian(0.9, d).map_err(e2s)?;
        let sims = [Similarity::cosine(0.3).map_err(e2s)?, Similarity::LogKernel(spec)];
        let mut vals: Vec<(f64, f64)> = Vec::new();
        for f in &sims {
            vals.push((reconstruction_cont(&za, &zb, f).map_err(e2s)?, reconstruction_cont(&zpa, &zpb, f).map_err(e2s)?));
            vals.push((infonce(&za, &zb, f).map_err(e2s)?, infonce(&zpa, &zpb, f).map_err(e2s)?));
            let bank = gauss(4, d, &mut r);
            for mode in [
                NegativeMode::Cmc,
                NegativeMode::Simclr,
                NegativeMode::SelfInclusive,
                NegativeMode::SelfExcluding,
                NegativeMode::MemoryBank { bank },
            ] {
                vals.push((
                    contrastive_loss(&za, &zb, f, &mode).map_err(e2s)?,
                    contrastive_loss(&zpa, &zpb, f, &mode).map_err(e2s)?,
                ));
            }
        }
        vals.push((entropy_joe(&za, &spec).map_err(e2s)?, entropy_joe(&zpa, &spec).map_err(e2s)?));
        for nv in [false, true] {
            vals.push((entropy_plugin_kde(&za, &spec, nv).map_err(e2s)?, entropy_plugin_kde(&zpa, &spec, nv).map_err(e2s)?));
        }
        let p = row_softmax(&gauss(k, 5, &mut r));
        let post = DiscretePosterior::new(p.clone()).map_err(e2s)?;
        let ppost = DiscretePosterior::new(permuted(&p, &perm)).map_err(e2s)?;
        vals.push((entropy_plugin_disc(&post, 1).map_err(e2s)?, entropy_plugin_disc(&ppost, 1).map_err(e2s)?));
        let labels: Vec<usize> = (0..k).map(|_| r.random_range(0..5)).collect();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        vals.push((
            reconstruction_disc_from(&post, &labels).map_err(e2s)?,
            reconstruction_disc_from(&ppost, &plabels).map_err(e2s)?,
        ));
        for (x, y) in vals {
            worst = worst.max(rel(x, y));
        }
    }
    ensure(worst <= 1e-12, || format!("relative change {worst:e}"))?;
    Ok(format!("max relative change {worst:.1e}"))
}

fn plugin_disc_exact() -> CheckResult {
    let mut r = rng(16);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = r.random_range(1..=10);
        let k = r.random_range(1..=40);
        let p = random_pmf(m, &mut r, true);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| p.clone()).collect();
        let post = DiscretePosterior::new(Matrix::from_rows(&rows).map_err(e2s)?).map_err(e2s)?;
        let got = entropy_plugin_disc(&post, 1).map_err(e2s)?;
        let want: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-12, || format!("error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// MSE of the plug-in entropy of `k` one-hot samples from a fixed pmf, over `reps` batches.
pub fn plugin_entropy_mse(k: usize, reps: usize, seed: u64) -> crate::Result<f64> {
    let p: Vec<f64> = (1..=8).map(|i| i as f64 / 36.0).collect();
    let truth = shannon_entropy(&p);
    let mut r = rng(seed);
    let mut acc = 0.0;
    for _ in 0..reps {
        let labels: Vec<usize> = (0..k)
            .map(|_| {
                let mut u: f64 = r.random();
                p.iter().position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or(p.len() - 1)
            })
            .collect();
        let post = DiscretePosterior::one_hot(&labels, p.len())?;
        acc += (entropy_plugin_disc(&post, 1)? - truth).powi(2);
    }
    Ok(acc / reps as f64)
}

/// MSE of the cosine reconstruction estimate on vMF pairs against its exact mean.
pub fn reconstruction_mse(k: usize, reps: usize, seed: u64) -> crate::Result<f64> {
    let (d, kappa) = (3, 4.0);
    let truth = vmf_mean_resultant(d, kappa);
    let f = Similarity::cosine(1.0)?;
    let mut r = rng(seed);
    let mut acc = 0.0;
    for _ in 0..reps {
        let mut a = Vec::with_capacity(k);
        let mut b = Vec::with_capacity(k);
        for _ in 0..k {
            let z = sample_sphere_uniform(d, &mut r);
            b.push(sample_vmf(&z, kappa, &mut r)?);
            a.push(z);
        }
        let za = ProjectionBatch::new(Matrix::from_rows(&a)?, Support::Sphere)?;
        let zb = ProjectionBatch::new(Matrix::from_rows(&b)?, Support::Sphere)?;
        acc += (reconstruction_cont(&za, &zb, &f)? - truth).powi(2);
    }
    Ok(acc / reps as f64)
}

pub const SLOPE_BATCHES: [usize; 4] = [64, 256, 1024, 4096];

fn mse_slopes() -> CheckResult {
    let ks: Vec<f64> = SLOPE_BATCHES.iter().map(|&k| k as f64).collect();
    let plug: Vec<f64> = SLOPE_BATCHES.iter().map(|&k| plugin_entropy_mse(k, 200, 17)).collect::<crate::Result<_>>().map_err(e2s)?;
    let rec: Vec<f64> = SLOPE_BATCHES.iter().map(|&k| reconstruction_mse(k, 200, 18)).collect::<crate::Result<_>>().map_err(e2s)?;
    let (s1, s2) = (log_log_slope(&ks, &plug), log_log_slope(&ks, &rec));
    ensure((s1 + 1.0).abs() <= 0.3, || format!("plug-in entropy slope {s1:.3}"))?;
    ensure((s2 + 1.0).abs() <= 0.3, || format!("reconstruction slope {s2:.3}"))?;
    Ok(format!("slopes {s1:.3} (plug-in entropy), {s2:.3} (reconstruction)"))
}

fn infonce_le_log_k() -> CheckResult {
    let mut r = rng(19);
    let mut closest = f64::INFINITY;
    for trial in 0..200 {
        let k = 1 + trial % 17;
        let d = 1 + trial % 4;
        let scale = [0.01, 1.0, 100.0][trial % 3];
        let a = gauss(k, d, &mut r).scale(scale);
        let b = if trial % 5 == 0 { a.clone() } else { gauss(k, d, &mut r).scale(scale) };
        let (za, zb) = (ProjectionBatch::unbounded(a).map_err(e2s)?, ProjectionBatch::unbounded(b).map_err(e2s)?);
        let sims = [
            Similarity::cosine([0.01, 0.1, 1.0][trial % 3]).map_err(e2s)?,
            Similarity::LogKernel(KernelSpec::gaussian(0.05 + trial as f64 * 0.01, d).map_err(e2s)?),
        ];
        for f in &sims {
            let v = infonce(&za, &zb, f).map_err(e2s)?;
            let bound = (k as f64).ln();
            ensure(v <= bound + 1e-12, || format!("InfoNCE {v} > log {k}"))?;
            closest = closest.min(bound - v);
        }
    }
    Ok(format!("400 batches, min slack {closest:.2e}"))
}

// ---------------------------------------------------------------- methods

fn byol_identity() -> CheckResult {
    let mut r = rng(20);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let d = 1 + trial % 8;
        let scale = 10f64.powi((trial % 7) as i32 - 3);
        let x = gauss(1, d, &mut r).scale(scale);
        let y = gauss(1, d, &mut r);
        let lhs = byol_loss(&ProjectionBatch::unbounded(x.clone()).map_err(e2s)?, &ProjectionBatch::unbounded(y.clone()).map_err(e2s)?)
            .map_err(e2s)?;
        let (xs, ys) = (x.as_slice(), y.as_slice());
        let cosv = crate::autodiff::dot(xs, ys) / (crate::autodiff::norm(xs) * crate::autodiff::norm(ys));
        worst = worst.max((lhs - 2.0 * (1.0 - cosv)).abs());
    }
    ensure(worst <= 1e-12, || format!("deviation {worst:e}"))?;
    Ok(format!("1000 pairs, max deviation {worst:.1e}"))
}

fn sinkhorn_monotone() -> CheckResult {
    let mut r = rng(21);
    for trial in 0..50 {
        let (k, m) = (2 + trial % 9, 2 + trial % 5);
        let s = unit_rows(k, 4, &mut r).matmul_t(&unit_rows(m, 4, &mut r));
        let eps = [0.05, 0.2, 1.0][trial % 3];
        let mut prev = f64::INFINITY;
        for it in 1..=60 {
            let v = sinkhorn(&s, eps, it).map_err(e2s)?.marginal_violation();
            ensure(v <= prev * (1.0 + 1e-9) + 1e-15, || format!("trial {trial}: violation rose from {prev:e} to {v:e} at {it}"))?;
            prev = v;
        }
    }
    Ok("50 instances, 60 iterations each".into())
}

/// Entropic OT optimum `max Tr(S P^T) + eps H(P)` over the transportation
/// polytope, by damped Newton on the semi-dual in the column potentials.
///
/// With `g` fixed the row potentials are exact, `P_ij = pi_ij / k` with
/// `pi_i = softmax_j((S_ij - g_j) / eps)`; `g_{m-1} = 0` removes the shift.
pub fn entropic_ot_newton(s: &Matrix, eps: f64) -> (Matrix, f64) {
    let (k, m) = s.shape();
    let n = m - 1;
    let full = |g: &DVector<f64>, j: usize| if j < n { g[j] } else { 0.0 };
    let rows = |g: &DVector<f64>| -> Vec<(f64, Vec<f64>)> {
        (0..k)
            .map(|i| {
                let a: Vec<f64> = (0..m).map(|j| (s[(i, j)] - full(g, j)) / eps).collect();
                let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = a.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (mx + z.ln(), e.iter().map(|v| v / z).collect())
            })
            .collect()
    };
    // h(g) = (eps / k) sum_i lse_i + (1/m) sum_j g_j, convex
    let value = |g: &DVector<f64>| -> f64 {
        eps * rows(g).iter().map(|(l, _)| l).sum::<f64>() / k as f64 + (0..n).map(|j| g[j]).sum::<f64>() / m as f64
    };
    let derivs = |g: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut grad = DVector::from_element(n, 1.0 / m as f64);
        let mut hess = DMatrix::zeros(n, n);
        for (_, pi) in rows(g) {
            for j in 0..n {
                grad[j] -= pi[j] / k as f64;
                // pi_j (1 - pi_j) without cancellation
                let rest: f64 = (0..m).filter(|&l| l != j).map(|l| pi[l]).sum();
                hess[(j, j)] += pi[j] * rest / (k as f64 * eps);
                for l in (0..n).filter(|&l| l != j) {
                    hess[(j, l)] -= pi[j] * pi[l] / (k as f64 * eps);
                }
            }
        }
        (grad, hess)
    };
    let mut g = DVector::zeros(n);
    for _ in 0..5000 {
        if n == 0 {
            break;
        }
        let (grad, mut hess) = derivs(&g);
        if grad.amax() < 1e-16 {
            break;
        }
        let damp = 1e-14 * (0..n).map(|i| hess[(i, i)]).fold(0.0f64, f64::max) + 1e-300;
        for i in 0..n {
            hess[(i, i)] += damp;
        }
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else { break };
        let f0 = value(&g);
        let slope = -grad.dot(&step);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-14 {
            let cand = &g - &step * t;
            let f1 = value(&cand);
            // near the optimum the decrease is below rounding; fall back to the gradient norm
            let flat = f1 <= f0 + 4.0 * f64::EPSILON * f0.abs().max(1.0);
            if f1 <= f0 + 1e-4 * t * slope.min(0.0) || (flat && derivs(&cand).0.norm() < grad.norm()) {
                g = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // the Hessian is bounded by 1/eps, so a gradient step of eps descends
            let cand = &g - &grad * eps;
            if value(&cand) >= f0 {
                break;
            }
            g = cand;
        }
    }
    let pis = rows(&g);
    let p = Matrix::from_fn(k, m, |i, j| pis[i].1[j] / k as f64);
    let obj = TransportPlan { p: p.clone() }.entropic_objective(s, eps);
    (p, obj)
}

/// Width of the unit vectors whose cosines form the small OT instances.
pub const OT_DIM: usize = 128;

fn sinkhorn_optimum() -> CheckResult {
    let mut r = rng(22);
    let mut worst_obj = 0.0f64;
    let mut worst_marg = 0.0f64;
    let mut count = 0;
    for k in 1..=4 {
        for m in 1..=4 {
            for _ in 0..20 {
                let s = unit_rows(k, OT_DIM, &mut r).matmul_t(&unit_rows(m, OT_DIM, &mut r));
                let plan = sinkhorn(&s, SINKHORN_EPS, SINKHORN_VERIFY_ITERS).map_err(e2s)?;
                let (_, best) = entropic_ot_newton(&s, SINKHORN_EPS);
                let got = plan.entropic_objective(&s, SINKHORN_EPS);
                ensure((got - best).abs() <= 1e-6, || format!("k={k} m={m}: Sinkhorn {got} vs Newton {best}"))?;
                worst_obj = worst_obj.max((got - best).abs());
                worst_marg = worst_marg.max(plan.marginal_violation());
                count += 1;
            }
        }
    }
    ensure(worst_obj <= 1e-6, || format!("objective gap {worst_obj:e}"))?;
    ensure(worst_marg < 1e-6, || format!("marginal violation {worst_marg:e}"))?;
    Ok(format!("{count} instances, objective gap {worst_obj:.1e}, marginal violation {worst_marg:.1e}"))
}

fn assignment_stop_gradient() -> CheckResult {
    let mut r = rng(23);
    let (k, d, m) = (12, 3, 4);
    let z1 = unit_rows(k, d, &mut r);
    let z2 = unit_rows(k, d, &mut r);
    let protos = unit_rows(m, d, &mut r);

    let mut t = Tape::new();
    let (v1, v2, vc) = (t.param(z1.clone()), t.param(z2.clone()), t.param(protos.clone()));
    let targets = sinkhorn(&t.value(v2).matmul_t(t.value(vc)), SINKHORN_EPS, 3).map_err(e2s)?.row_pmfs().map_err(e2s)?;
    let l = swav_loss_var(&mut t, targets.values(), v1, vc, 0.1).map_err(e2s)?;
    let g = t.backward(l).map_err(e2s)?;
    ensure(g.wrt(v2).as_slice().iter().all(|&v| v == 0.0), || "SwAV assignment input received gradient".into())?;
    ensure(g.wrt(v1).as_slice().iter().any(|&v| v != 0.0), || "SwAV prediction branch has no gradient".into())?;

    let mut t = Tape::new();
    let (v1, v2) = (t.param(z1.clone()), t.param(z2.clone()));
    let km = kmeans_assign(t.value(v2), m, 5, &mut r).map_err(e2s)?;
    let pred = MlpParams::init(&[d, m], 0.2, Head::None, &mut r).map_err(e2s)?;
    let (l, _) = deepcluster_loss_var(&mut t, &km.posteriors, v1, &pred, None).map_err(e2s)?;
    let g = t.backward(l).map_err(e2s)?;
    ensure(g.wrt(v2).as_slice().iter().all(|&v| v == 0.0), || "DeepCluster assignment input received gradient".into())?;
    ensure(g.wrt(v1).as_slice().iter().any(|&v| v != 0.0), || "DeepCluster prediction branch has no gradient".into())?;
    Ok("assignment inputs get exact zeros".into())
}

/// Small DINO run used by the centering checks.
pub fn dino_config(centering: bool, er: bool, steps: usize, seed: u64) -> RunConfig {
    RunConfig {
        run_id: format!("dino-c{}-er{}", centering as u8, er as u8),
        method: Method::Dino,
        er,
        centering,
        steps,
        seed,
        lr: 1e-3,
        batch_size: 128,
        hidden: 32,
        eval_pairs: 0,
        log_every: 10,
        ..RunConfig::default()
    }
}

/// Per-step normalized teacher-target entropies of a run.
pub fn norm_entropy_trace(cfg: &RunConfig) -> crate::Result<Vec<f64>> {
    let mut trace = Vec::new();
    let mut log = MetricsLog::default();
    train(cfg, &mut log, &mut |info| trace.push(info.outcome.norm_entropy.unwrap_or(f64::NAN)))?;
    Ok(trace)
}

fn dino_centering() -> CheckResult {
    let on = norm_entropy_trace(&dino_config(true, false, 500, 0)).map_err(e2s)?;
    let mean_on = on.iter().sum::<f64>() / on.len() as f64;
    let off = norm_entropy_trace(&dino_config(false, false, 500, 0)).map_err(e2s)?;
    let final_off = *off.last().expect("500 steps");
    ensure(mean_on >= 0.5, || format!("mean normalized entropy with centering {mean_on:.3} < 0.5"))?;
    ensure(final_off < 0.1, || format!("final normalized entropy without centering {final_off:.3} >= 0.1"))?;
    Ok(format!("with centering mean {mean_on:.3}, without centering final {final_off:.3}"))
}

// ---------------------------------------------------------------- synthetic

fn mixing_reproducible() -> CheckResult {
    let cfg = RunConfig::default();
    let spec = MixingSpec { layers: 3, seed: 42 };
    let a = MixingNet::new(5, &spec).map_err(e2s)?;
    let b = MixingNet::new(5, &spec).map_err(e2s)?;
    ensure(a == b, || "mixing nets differ".into())?;
    let c = MixingNet::new(5, &MixingSpec { layers: 3, seed: 43 }).map_err(e2s)?;
    ensure(a != c, || "different seeds gave the same net".into())?;
    let va = sample_views(&cfg.data, &a, 64, &mut rng(1)).map_err(e2s)?;
    let vb = sample_views(&cfg.data, &b, 64, &mut rng(1)).map_err(e2s)?;
    ensure(va.x1.bit_eq(&vb.x1) && va.z1.bit_eq(&vb.z1) && va.x2.bit_eq(&vb.x2), || "datasets differ".into())?;
    Ok("same seed, same net and data".into())
}

pub const TABLE2_FIXTURE: &str = include_str!("../../../fixtures/table2.toml");
pub const TABLE3_FIXTURE: &str = include_str!("../../../fixtures/table3.toml");

fn fixtures() -> CheckResult {
    let t2 = parse_sweep(TABLE2_FIXTURE).map_err(e2s)?;
    let t3 = parse_sweep(TABLE3_FIXTURE).map_err(e2s)?;
    ensure(t2.len() == 12 && t3.len() == 10, || format!("{} + {} rows", t2.len(), t3.len()))?;
    for cfg in t2.iter().chain(&t3) {
        cfg.data.validate().map_err(|e| format!("{}: {e}", cfg.run_id))?;
        let net = MixingNet::new(cfg.data.dim, &cfg.data.mixing).map_err(|e| format!("{}: {e}", cfg.run_id))?;
        sample_views(&cfg.data, &net, 8, &mut rng(0)).map_err(|e| format!("{}: {e}", cfg.run_id))?;
        TrainState::init(cfg).map_err(|e| format!("{}: {e}", cfg.run_id))?;
    }
    Ok("22 rows constructible".into())
}

// ---------------------------------------------------------------- training

fn small(method: Method, er: bool) -> RunConfig {
    RunConfig {
        run_id: format!("{method:?}"),
        method,
        er,
        batch_size: 32,
        steps: 20,
        hidden: 16,
        prototypes: 4,
        lr: 1e-3,
        rec_weight: 0.7,
        log_every: 5,
        eval_every: 10,
        eval_pairs: 64,
        ..RunConfig::default()
    }
}

fn ema_replay() -> CheckResult {
    let mut worst = 0.0f64;
    for method in [Method::Byol, Method::Dino] {
        for er in [false, true] {
            let cfg = small(method, er);
            let mut teacher = TrainState::init(&cfg).map_err(e2s)?.teacher.expect("distillation teacher");
            let mut checkpoints = Vec::new();
            let mut log = MetricsLog::default();
            let state = train(&cfg, &mut log, &mut |info| checkpoints.push(info.state.student.clone())).map_err(e2s)?;
            for s in &checkpoints {
                for (t, sv) in teacher.tensors_mut().into_iter().zip(s.tensors()) {
                    for (tv, x) in t.as_mut_slice().iter_mut().zip(sv.as_slice()) {
                        *tv = cfg.ema * *tv + (1.0 - cfg.ema) * x;
                    }
                }
            }
            let fin = state.teacher.as_ref().expect("teacher");
            for (a, b) in fin.tensors().into_iter().zip(teacher.tensors()) {
                worst = worst.max(a.max_abs_diff(b));
            }
        }
    }
    ensure(worst <= 1e-10, || format!("teacher differs from replay by {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn teacher_no_grad() -> CheckResult {
    for method in [Method::Byol, Method::Dino] {
        for er in [false, true] {
            let (state, _) = run_mvssl(&small(method, er)).map_err(e2s)?;
            ensure(state.teacher_grad_max_abs == 0.0, || format!("{method:?} er={er}: teacher gradient {}", state.teacher_grad_max_abs))?;
        }
    }
    Ok("teacher gradient slots stayed zero".into())
}

fn er_loss_identity() -> CheckResult {
    let mut worst = 0.0f64;
    for method in [Method::Simclr, Method::Cmc, Method::Byol, Method::Dino, Method::Swav, Method::Deepcluster] {
        for is_joe in [true, false] {
            for symmetric in [true, false] {
                if !symmetric && !method.is_distillation() {
                    continue;
                }
                let cfg = RunConfig { is_joe, symmetric_distillation: symmetric, ..small(method, true) };
                let w = cfg.rec_weight;
                let mut log = MetricsLog::default();
                let mut bad = None;
                train(&cfg, &mut log, &mut |info| {
                    let o = info.outcome;
                    let dev = (o.loss + (o.entropy + w * o.reconstruction)).abs();
                    worst = worst.max(dev);
                    if dev > 1e-9 && bad.is_none() {
                        bad = Some((info.step, dev));
                    }
                })
                .map_err(e2s)?;
                if let Some((step, dev)) = bad {
                    return Err(format!("{method:?} joe={is_joe}: step {step} deviates by {dev:e}"));
                }
            }
        }
    }
    Ok(format!("max deviation {worst:.1e}"))
}

/// SimCLR run on the default sphere process, native or ER.
pub fn simclr_config(er: bool, batch_size: usize, steps: usize, seed: u64) -> RunConfig {
    RunConfig {
        run_id: format!("simclr-er{}-k{batch_size}", er as u8),
        method: Method::Simclr,
        er,
        batch_size,
        steps,
        seed,
        lr: 1e-3,
        eval_pairs: 0,
        log_every: 100,
        ..RunConfig::default()
    }
}

/// `|R2(k=64) - R2(k=512)|` for each seed, ER and native.
pub fn batch_size_gaps(seeds: &[u64], steps: usize) -> crate::Result<Vec<(f64, f64)>> {
    let r2 = |er: bool, k: usize, seed: u64| -> crate::Result<f64> {
        let cfg = simclr_config(er, k, steps, seed);
        let (state, _) = run_mvssl(&cfg)?;
        Ok(score_held_out(&cfg, &state.student, 2000)?.r2)
    };
    seeds
        .iter()
        .map(|&s| Ok(((r2(true, 64, s)? - r2(true, 512, s)?).abs(), (r2(false, 64, s)? - r2(false, 512, s)?).abs())))
        .collect()
}

fn batch_size_robustness() -> CheckResult {
    let gaps = batch_size_gaps(&[0, 1, 2], 2000).map_err(e2s)?;
    let wins = gaps.iter().filter(|(er, native)| er <= native).count();
    let text: Vec<String> = gaps.iter().map(|(a, b)| format!("{a:.2}/{b:.2}")).collect();
    ensure(wins >= 2, || format!("ER/native gaps {}", text.join(" ")))?;
    Ok(format!("ER/native gaps {}", text.join(" ")))
}

// ---------------------------------------------------------------- evaluation

fn gap_is_kl() -> CheckResult {
    let mut r = rng(24);
    let (mut min_gap, mut worst) = (f64::INFINITY, 0.0f64);
    for _ in 0..1000 {
        let joint = random_joint(&mut r);
        let (m1, m2) = joint.shape();
        let rep = er_gap_report(&joint, &random_recon(m1, m2, &mut r)).map_err(e2s)?;
        min_gap = min_gap.min(rep.gap);
        worst = worst.max((rep.gap - rep.avg_kl).abs());
    }
    ensure(min_gap >= -1e-12, || format!("negative gap {min_gap:e}"))?;
    ensure(worst <= 1e-12, || format!("gap differs from KL by {worst:e}"))?;
    Ok(format!("1000 pairs, min gap {min_gap:.2e}, |gap - KL| <= {worst:.1e}"))
}

fn metric_invariance() -> CheckResult {
    let mut r = rng(25);
    let (mut wr, mut wm) = (0.0f64, 0.0f64);
    for trial in 0..20 {
        let (n, d) = (500, 2 + trial % 5);
        let truth = gauss(n, d, &mut r);
        let learned = truth.map(|v| v + 0.3 * v.powi(3)).zip_map(&gauss(n, d, &mut r), |a, b| a + 0.2 * b);
        let base_r2 = r2_report(&learned, &truth).map_err(e2s)?.r2;
        let base_mcc = mcc_report(&learned, &truth, Correlation::Pearson).map_err(e2s)?.mcc;
        let a = loop {
            let a = gauss(d, d, &mut r);
            if crate::synthetic::condition_number(&a) < 20.0 {
                break a;
            }
        };
        let shift = gauss(1, d, &mut r);
        let affine = Matrix::from_fn(n, d, |i, j| learned.row(i).iter().zip(0..d).map(|(x, c)| x * a[(c, j)]).sum::<f64>() + shift[(0, j)]);
        wr = wr.max((r2_report(&affine, &truth).map_err(e2s)?.r2 - base_r2).abs());
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut r);
        let signs: Vec<f64> = (0..d).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let scales: Vec<f64> = (0..d).map(|_| r.random_range(0.1..10.0)).collect();
        let moved = Matrix::from_fn(n, d, |i, j| signs[j] * scales[j] * learned[(i, perm[j])] + 3.0);
        for kind in [Correlation::Pearson, Correlation::Spearman] {
            let b = mcc_report(&learned, &truth, kind).map_err(e2s)?.mcc;
            let m = mcc_report(&moved, &truth, kind).map_err(e2s)?.mcc;
            wm = wm.max((m - b).abs());
        }
        let _ = base_mcc;
    }
    ensure(wr <= 1e-6, || format!("R2 changed by {wr:e}"))?;
    ensure(wm <= 1e-9, || format!("MCC changed by {wm:e}"))?;
    Ok(format!("R2 change {wr:.1e}, MCC change {wm:.1e}"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn mcc_optimal() -> CheckResult {
    let mut r = rng(26);
    let mut worst = 0.0f64;
    let mut count = 0;
    for d in 1..=6 {
        let perms = permutations(d);
        for _ in 0..10 {
            let truth = gauss(40, d, &mut r);
            let learned = gauss(40, d, &mut r).zip_map(&truth.select_rows(&(0..40).collect::<Vec<_>>()), |a, b| a + 0.5 * b);
            let (corr, _) = abs_correlation_matrix(&learned, &truth, Correlation::Pearson).map_err(e2s)?;
            let best = perms
                .iter()
                .map(|p| (0..d).map(|j| corr[(p[j], j)]).sum::<f64>() / d as f64 * 100.0)
                .fold(f64::NEG_INFINITY, f64::max);
            let rep = mcc_report(&learned, &truth, Correlation::Pearson).map_err(e2s)?;
            worst = worst.max(best - rep.mcc);
            let mut seen = rep.permutation.clone();
            seen.sort_unstable();
            ensure(seen == (0..d).collect::<Vec<_>>(), || format!("assignment {:?} is not a bijection", rep.permutation))?;
            count += 1;
        }
    }
    ensure(worst <= 1e-9, || format!("Hungarian is short of exhaustive search by {worst:e}"))?;
    Ok(format!("{count} instances, max shortfall {worst:.1e}"))
}

// ---------------------------------------------------------------- cli

fn run_determinism() -> CheckResult {
    for method in [Method::Simclr, Method::Dino, Method::Deepcluster] {
        let cfg = small(method, true);
        let (_, a) = run_mvssl(&cfg).map_err(e2s)?;
        let (_, b) = run_mvssl(&cfg).map_err(e2s)?;
        ensure(a.to_csv() == b.to_csv(), || format!("{method:?}: metrics differ between identical runs"))?;
        let (_, c) = run_mvssl(&RunConfig { seed: cfg.seed + 1, ..cfg.clone() }).map_err(e2s)?;
        ensure(a.to_csv() != c.to_csv(), || format!("{method:?}: seed has no effect"))?;
    }
    Ok("byte-identical metrics".into())
}

fn csv_round_trip() -> CheckResult {
    for method in [Method::Simclr, Method::Swav] {
        let cfg = RunConfig { log_wall_time: true, ..small(method, false) };
        let (_, log) = run_mvssl(&cfg).map_err(e2s)?;
        let text = log.to_csv();
        let back = MetricsLog::from_csv(&text).map_err(e2s)?;
        ensure(back == log, || format!("{method:?}: re-parsed log differs"))?;
        ensure(back.to_csv() == text, || format!("{method:?}: re-serialized CSV differs"))?;
    }
    Ok("logs re-parse exactly".into())
}
