//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL` line
//! to stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::time::Instant;

use miner_core::autodiff::{Matrix, Tape};
use miner_core::config::parse_sweep;
use miner_core::densities::{KernelSpec, Similarity};
use miner_core::estimators::{
    contrastive_loss, entropy_joe, entropy_plugin_disc, infonce, reconstruction_cont, DiscretePosterior, NegativeMode,
    ProjectionBatch,
};
use miner_core::evaluation::er_gap_report;
use miner_core::methods::{byol_loss, sinkhorn, SINKHORN_EPS, SINKHORN_VERIFY_ITERS};
use miner_core::training::{run_identifiability_experiment, run_mvssl, train, MetricsLog, Method, RunConfig};
use miner_core::verify::{loss_cases, OT_DIM, TABLE2_FIXTURE, TABLE3_FIXTURE};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn report(n: u32, pass: bool, detail: &str) -> bool {
    let line = format!("criterion {n:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(k: usize, d: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(k, d, |_, _| r.sample(StandardNormal))
}

fn unit(k: usize, d: usize, r: &mut ChaCha8Rng) -> Matrix {
    gauss(k, d, r).normalize_rows().unwrap()
}

fn fixture_row(text: &str, run_id: &str) -> RunConfig {
    parse_sweep(text).unwrap().into_iter().find(|c| c.run_id == run_id).unwrap()
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    num / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>()
}

#[test]
fn criterion_01_identifiability_affine() {
    let base = fixture_row(TABLE2_FIXTURE, "sphere-uniform-vmf1");
    let mut rows = Vec::new();
    let start = Instant::now();
    let mut slowest = 0.0f64;
    for seed in 0..3 {
        let mut pair = [0.0; 2];
        for (slot, h) in [1.0, 10.0].into_iter().enumerate() {
            let cfg = RunConfig { seed, bandwidth: Some(h), run_id: format!("c1-s{seed}-h{h}"), ..base.clone() };
            let t = Instant::now();
            pair[slot] = run_identifiability_experiment(&cfg, cfg.eval_pairs).unwrap().scores.r2;
            slowest = slowest.max(t.elapsed().as_secs_f64());
        }
        rows.push(pair);
    }
    let h1_ok = rows.iter().all(|p| p[0] >= 95.0);
    let h10_ok = rows.iter().all(|p| p[1] >= 80.0);
    let ordered = rows.iter().filter(|p| p[0] - p[1] >= 0.0).count();
    let time_ok = slowest <= 20.0 * 60.0;
    let pass = h1_ok && h10_ok && ordered >= 2 && time_ok;
    let text: Vec<String> = rows.iter().map(|p| format!("{:.2}/{:.2}", p[0], p[1])).collect();
    report(
        1,
        pass,
        &format!(
            "R2 h=1/h=10 per seed {} (need >=95, >=80, ordered in >=2 of 3: {ordered}); slowest run {:.0}s, total {:.0}s",
            text.join(" "),
            slowest,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_identifiability_permutation() {
    let cfg = RunConfig { bandwidth: Some(10.0), ..fixture_row(TABLE3_FIXTURE, "box-laplace-box-laplace") };
    let start = Instant::now();
    let res = run_identifiability_experiment(&cfg, cfg.eval_pairs).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = res.scores.mcc >= 90.0 && secs <= 30.0 * 60.0;
    report(2, pass, &format!("MCC {:.2} (need >= 90) in {secs:.0}s (limit 1800s)", res.scores.mcc));
    assert!(pass);
}

/// `sum_ij p log(p / (p_i p_j))`, written independently of the library.
fn mi_oracle(joint: &[Vec<f64>]) -> f64 {
    let pr: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pc: Vec<f64> = (0..joint[0].len()).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in joint.iter().enumerate() {
        for (j, &p) in r.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pr[i] * pc[j])).ln();
            }
        }
    }
    mi
}

/// `sum_i p(i) KL(p(.|i) || q(.|i))`.
fn avg_kl_oracle(joint: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut kl = 0.0;
    for (r, qr) in joint.iter().zip(q) {
        let pi: f64 = r.iter().sum();
        for (&p, &qv) in r.iter().zip(qr) {
            if p > 0.0 {
                kl += p * ((p / pi) / qv).ln();
            }
        }
    }
    kl
}

fn pmf(n: usize, r: &mut ChaCha8Rng, zeros: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| if zeros && r.random::<f64>() < 0.25 { 0.0 } else { r.random::<f64>().powi(3) })
        .collect();
    if v.iter().sum::<f64>() == 0.0 {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

#[test]
fn criterion_03_er_bound_validity() {
    let mut r = rng(3);
    let (mut min_gap, mut worst_kl, mut worst_mi) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (m1, m2) = (r.random_range(1..=8), r.random_range(1..=8));
        let flat = pmf(m1 * m2, &mut r, true);
        let joint: Vec<Vec<f64>> = flat.chunks(m2).map(|c| c.to_vec()).collect();
        let q: Vec<Vec<f64>> = (0..m1).map(|_| pmf(m2, &mut r, false)).collect();
        let rep = er_gap_report(&Matrix::from_rows(&joint).unwrap(), &Matrix::from_rows(&q).unwrap()).unwrap();
        min_gap = min_gap.min(rep.gap);
        worst_kl = worst_kl.max((rep.gap - avg_kl_oracle(&joint, &q)).abs());
        worst_mi = worst_mi.max((rep.mi - mi_oracle(&joint)).abs());
    }
    let pass = min_gap >= -1e-12 && worst_kl <= 1e-12 && worst_mi <= 1e-12;
    report(
        3,
        pass,
        &format!("1000 trials: min gap {min_gap:.2e}, max |gap - avg KL| {worst_kl:.1e}, max |MI - oracle| {worst_mi:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_estimator_convergence_slopes() {
    let start = Instant::now();
    let ks = [64usize, 256, 1024, 4096];
    let reps = 200;
    let mut r = rng(4);

    // plug-in entropy of one-hot samples from a fixed pmf
    let p: [f64; 8] = [0.3, 0.2, 0.15, 0.1, 0.1, 0.08, 0.05, 0.02];
    let h_true: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    let mut cdf = p;
    for i in 1..cdf.len() {
        cdf[i] += cdf[i - 1];
    }
    let mut mse_h = Vec::new();
    for &k in &ks {
        let mut acc = 0.0;
        for _ in 0..reps {
            let labels: Vec<usize> = (0..k)
                .map(|_| {
                    let u: f64 = r.random();
                    cdf.iter().position(|&c| u < c).unwrap_or(p.len() - 1)
                })
                .collect();
            let post = DiscretePosterior::one_hot(&labels, p.len()).unwrap();
            acc += (entropy_plugin_disc(&post, 1).unwrap() - h_true).powi(2);
        }
        mse_h.push(acc / reps as f64);
    }

    // Gaussian reconstruction on Gaussian pairs, against its closed-form mean
    let (d, sigma, h) = (3usize, 0.5, 0.8);
    let f = Similarity::LogKernel(KernelSpec::gaussian(h, d).unwrap());
    // log q((a - b) / h) with the unit-bandwidth normalizer
    let rec_true = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - d as f64 * sigma * sigma / (2.0 * h * h);
    let mut mse_r = Vec::new();
    for &k in &ks {
        let mut acc = 0.0;
        for _ in 0..reps {
            let z1 = gauss(k, d, &mut r);
            let z2 = z1.zip_map(&gauss(k, d, &mut r), |a, e| a + sigma * e);
            let v = reconstruction_cont(&ProjectionBatch::unbounded(z1).unwrap(), &ProjectionBatch::unbounded(z2).unwrap(), &f)
                .unwrap();
            acc += (v - rec_true).powi(2);
        }
        mse_r.push(acc / reps as f64);
    }
    let kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let (s_h, s_r) = (slope(&kf, &mse_h), slope(&kf, &mse_r));
    let secs = start.elapsed().as_secs_f64();
    let pass = (s_h + 1.0).abs() <= 0.3 && (s_r + 1.0).abs() <= 0.3 && secs < 120.0;
    report(4, pass, &format!("slopes {s_h:.3} (plug-in entropy), {s_r:.3} (reconstruction) in {secs:.1}s"));
    assert!(pass);
}

#[test]
fn criterion_05_continuous_entropy_accuracy() {
    let k = 8192;
    let h = (k as f64).powf(-0.2);
    let mut r = rng(5);
    let mut errs = Vec::new();
    for (d, truth, tol) in [(1usize, 1.4189, 0.15), (2, 2.8379, 0.2)] {
        let z = ProjectionBatch::unbounded(gauss(k, d, &mut r)).unwrap();
        let est = entropy_joe(&z, &KernelSpec::gaussian(h, d).unwrap()).unwrap();
        let analytic = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((analytic - truth).abs() < 1e-4);
        errs.push((d, est, (est - analytic).abs(), tol));
    }
    let pass = errs.iter().all(|&(_, _, e, tol)| e <= tol);
    let text: Vec<String> = errs.iter().map(|(d, est, e, tol)| format!("d={d}: {est:.4} (err {e:.4}, tol {tol})")).collect();
    report(5, pass, &text.join("; "));
    assert!(pass);
}

#[test]
fn criterion_06_gradient_integrity() {
    let step = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for seed in [60, 61, 62] {
        for (name, params, f) in loss_cases(seed) {
            let mut tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
            let loss = f(&mut tape, &vars).unwrap();
            let grads = tape.backward(loss).unwrap();
            let eval = |ps: &[Matrix]| {
                let mut t = Tape::new();
                let vs: Vec<_> = ps.iter().map(|p| t.param(p.clone())).collect();
                let l = f(&mut t, &vs).unwrap();
                t.scalar(l)
            };
            let mut work = params.clone();
            for (pi, v) in vars.iter().enumerate() {
                let g = grads.wrt(*v);
                for j in 0..params[pi].len() {
                    let orig = params[pi].as_slice()[j];
                    work[pi].as_mut_slice()[j] = orig + step;
                    let up = eval(&work);
                    work[pi].as_mut_slice()[j] = orig - step;
                    let down = eval(&work);
                    work[pi].as_mut_slice()[j] = orig;
                    let num = (up - down) / (2.0 * step);
                    let a = g.as_slice()[j];
                    let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
                    if rel > worst.0 {
                        worst = (rel, name.clone());
                    }
                }
            }
            count += 1;
        }
    }

    // stop-gradient paths
    let mut r = rng(6);
    let mut leaks = Vec::new();
    {
        let (s, t) = (gauss(6, 4, &mut r), gauss(6, 4, &mut r));
        let c = miner_core::methods::CenterState::zeros(4, 0.9).unwrap();
        let mut tape = Tape::new();
        let (vs, vt) = (tape.param(s), tape.param(t));
        let l = miner_core::methods::dino_loss_var(&mut tape, vs, vt, &c, 0.1, 0.04).unwrap();
        let g = tape.backward(l).unwrap();
        leaks.push(("dino teacher", g.wrt(vt).as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }
    {
        let (p, t) = (gauss(6, 4, &mut r), gauss(6, 4, &mut r));
        let mut tape = Tape::new();
        let (vp, vt) = (tape.param(p), tape.param(t));
        let st = tape.stop_gradient(vt);
        let l = miner_core::methods::byol_loss_var(&mut tape, vp, st).unwrap();
        let g = tape.backward(l).unwrap();
        leaks.push(("byol target", g.wrt(vt).as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }
    for method in [Method::Byol, Method::Dino] {
        for er in [false, true] {
            let cfg = RunConfig { method, er, batch_size: 32, steps: 10, hidden: 16, prototypes: 4, eval_pairs: 0, ..RunConfig::default() };
            let (state, _) = run_mvssl(&cfg).unwrap();
            leaks.push((if method == Method::Byol { "byol run teacher" } else { "dino run teacher" }, state.teacher_grad_max_abs));
        }
    }
    let leak_free = leaks.iter().all(|&(_, v)| v == 0.0);
    let pass = worst.0 <= 1e-4 && leak_free;
    report(
        6,
        pass,
        &format!(
            "{count} loss checks, worst relative error {:.2e} ({}); {} stop-gradient paths exactly zero: {leak_free}",
            worst.0,
            worst.1,
            leaks.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_algebraic_identities() {
    let mut r = rng(7);
    let (mut byol, mut cmc, mut selfinc) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..100 {
        let k = 1 + trial % 13;
        let d = 1 + trial % 5;
        let (a, b) = (gauss(k, d, &mut r), gauss(k, d, &mut r));
        let (za, zb) = (ProjectionBatch::unbounded(a.clone()).unwrap(), ProjectionBatch::unbounded(b.clone()).unwrap());

        // BYOL: mean over rows of |x/|x| - y/|y||^2 against 2(1 - cos)
        let want: f64 = a
            .row_iter()
            .zip(b.row_iter())
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                2.0 * (1.0 - dot / (nx * ny))
            })
            .sum::<f64>()
            / k as f64;
        byol = byol.max((byol_loss(&za, &zb).unwrap() - want).abs());

        // CMC: anchor z2_i against all z1 rows
        let cos = Similarity::cosine(0.2 + 0.1 * (trial % 4) as f64).unwrap();
        let l = contrastive_loss(&za, &zb, &cos, &NegativeMode::Cmc).unwrap();
        let nce = infonce(&zb, &za, &cos).unwrap();
        cmc = cmc.max((-l + (k as f64).ln() - nce).abs());

        // self-inclusive ER with a Gaussian kernel
        let h = 0.3 + 0.2 * (trial % 7) as f64;
        let spec = KernelSpec::gaussian(h, d).unwrap();
        let f = Similarity::LogKernel(spec);
        let lhs = entropy_joe(&zb, &spec).unwrap() + reconstruction_cont(&za, &zb, &f).unwrap();
        let l = contrastive_loss(&za, &zb, &f, &NegativeMode::SelfInclusive).unwrap();
        let rhs = -l + (k as f64).ln() + d as f64 * h.ln();
        selfinc = selfinc.max((lhs - rhs).abs());
    }
    let pass = byol <= 1e-12 && cmc <= 1e-9 && selfinc <= 1e-9;
    report(7, pass, &format!("100 batches: BYOL {byol:.1e}, CMC/InfoNCE {cmc:.1e}, self-inclusive ER {selfinc:.1e}"));
    assert!(pass);
}

/// Entropic OT optimum by primal Newton on the transportation polytope: the
/// equality-constrained Newton system is solved through its Schur complement
/// and a backtracking search keeps the plan strictly positive.
fn primal_entropic_ot(s: &[Vec<f64>], eps: f64) -> f64 {
    let (k, m) = (s.len(), s[0].len());
    let n = k * m;
    let idx = |i: usize, j: usize| i * m + j;
    // constraints: all row sums, all but the last column sum
    let nc = k + m - 1;
    let mut a = DMatrix::<f64>::zeros(nc, n);
    for i in 0..k {
        for j in 0..m {
            a[(i, idx(i, j))] = 1.0;
            if j + 1 < m {
                a[(k + j, idx(i, j))] = 1.0;
            }
        }
    }
    let obj = |p: &DVector<f64>| -> f64 {
        let mut v = 0.0;
        for i in 0..k {
            for j in 0..m {
                let x = p[idx(i, j)];
                v += s[i][j] * x;
                if x > 0.0 {
                    v -= eps * x * x.ln();
                }
            }
        }
        v
    };
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..500 {
        // minimize -obj: gradient and diagonal Hessian
        let g = DVector::from_fn(n, |t, _| -s[t / m][t % m] + eps * (p[t].ln() + 1.0));
        let hinv = DVector::from_fn(n, |t, _| p[t] / eps);
        let ahat = DMatrix::from_fn(nc, n, |c, t| a[(c, t)] * hinv[t]);
        let schur = &ahat * a.transpose();
        let rhs = -(&ahat * &g);
        let Some(nu) = schur.lu().solve(&rhs) else { break };
        let dir = DVector::from_fn(n, |t, _| -hinv[t] * (g[t] + (a.transpose() * &nu)[t]));
        let dec = -g.dot(&dir);
        if dec < 1e-18 {
            break;
        }
        let f0 = -obj(&p);
        let mut t = 1.0;
        loop {
            let cand = &p + &dir * t;
            if cand.iter().all(|&x| x > 0.0) && -obj(&cand) <= f0 - 0.25 * t * dec {
                p = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return obj(&p);
            }
        }
    }
    obj(&p)
}

#[test]
fn criterion_08_sinkhorn_correctness() {
    let mut r = rng(8);
    let (mut worst_obj, mut worst_marg, mut count) = (0.0f64, 0.0f64, 0);
    for k in 1..=4 {
        for m in 1..=4 {
            for _ in 0..25 {
                let s = unit(k, OT_DIM, &mut r).matmul_t(&unit(m, OT_DIM, &mut r));
                let plan = sinkhorn(&s, SINKHORN_EPS, SINKHORN_VERIFY_ITERS).unwrap();
                let rows: Vec<Vec<f64>> = s.row_iter().map(|x| x.to_vec()).collect();
                let best = primal_entropic_ot(&rows, SINKHORN_EPS);
                worst_obj = worst_obj.max((plan.entropic_objective(&s, SINKHORN_EPS) - best).abs());
                // marginals computed here rather than by the plan type
                for i in 0..k {
                    worst_marg = worst_marg.max((plan.p.row(i).iter().sum::<f64>() - 1.0 / k as f64).abs());
                }
                for j in 0..m {
                    worst_marg = worst_marg.max(((0..k).map(|i| plan.p[(i, j)]).sum::<f64>() - 1.0 / m as f64).abs());
                }
                count += 1;
            }
        }
    }
    let pass = worst_obj <= 1e-6 && worst_marg < 1e-6;
    report(
        8,
        pass,
        &format!("{count} instances (k, m <= 4, eps {SINKHORN_EPS}): objective gap {worst_obj:.1e}, marginal violation {worst_marg:.1e}"),
    );
    assert!(pass);
}

fn entropy_run(cfg: &RunConfig) -> (f64, f64, Vec<f64>) {
    let mut log = MetricsLog::default();
    let mut ent = Vec::new();
    let mut norm = Vec::new();
    train(cfg, &mut log, &mut |info| {
        ent.push(info.outcome.entropy);
        norm.push(info.outcome.norm_entropy.unwrap_or(f64::NAN));
    })
    .unwrap();
    (ent[0], *ent.last().unwrap(), norm)
}

#[test]
fn criterion_09_entropy_dynamics() {
    let start = Instant::now();
    let mut a_ok = 0;
    let mut b_ok = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let simclr = RunConfig {
            method: Method::Simclr,
            er: true,
            steps: 2000,
            seed,
            lr: 1e-3,
            eval_pairs: 0,
            ..RunConfig::default()
        };
        let (h0, h1, _) = entropy_run(&simclr);
        let a = h1 >= h0 - 0.1;
        a_ok += a as usize;

        let dino = |er: bool| RunConfig {
            method: Method::Dino,
            er,
            centering: false,
            steps: 2000,
            seed,
            lr: 1e-3,
            eval_pairs: 0,
            ..RunConfig::default()
        };
        let plain = *entropy_run(&dino(false)).2.last().unwrap();
        let with_er = *entropy_run(&dino(true)).2.last().unwrap();
        let b = plain < 0.1 && with_er >= 0.5;
        b_ok += b as usize;
        lines.push(format!("seed {seed}: H {h0:.3} -> {h1:.3}, DINO {plain:.3} vs DINO+ER {with_er:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = a_ok >= 2 && b_ok >= 2 && secs <= 600.0;
    report(9, pass, &format!("{} ({a_ok}/3, {b_ok}/3 seeds; {secs:.0}s)", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let mut rows = vec![
        RunConfig { steps: 300, eval_every: 100, ..fixture_row(TABLE2_FIXTURE, "sphere-uniform-vmf1") },
        RunConfig { steps: 300, eval_every: 100, ..fixture_row(TABLE3_FIXTURE, "box-laplace-box-laplace") },
    ];
    for method in [Method::Cmc, Method::Byol, Method::Dino, Method::Swav, Method::Deepcluster] {
        for er in [false, true] {
            rows.push(RunConfig { method, er, steps: 60, batch_size: 64, eval_every: 20, eval_pairs: 200, ..RunConfig::default() });
        }
    }
    let mut same = 0;
    for cfg in &rows {
        let (_, a) = run_mvssl(cfg).unwrap();
        let (_, b) = run_mvssl(cfg).unwrap();
        same += (a.to_csv().as_bytes() == b.to_csv().as_bytes()) as usize;
    }
    let pass = same == rows.len();
    report(10, pass, &format!("{same}/{} configurations produced byte-identical metrics.csv", rows.len()));
    assert!(pass);
}
