//! Multi-view training with the native method losses or the ER bound, and the
//! identifiability-experiment driver.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step, ema_update, AdamState, Gradients, Head, Matrix, MlpParams, MlpVars, Tape, Var};
use crate::densities::{sample_sphere_uniform, DensityKind, KernelSpec, Similarity, Support};
use crate::error::{Error, Result};
use crate::estimators::{
    contrastive_loss_symmetric_var, entropy_joe_var, entropy_plugin_disc_var, entropy_plugin_kde_var,
    reconstruction_cont_var, DiscretePosterior, NegativeMode,
};
use crate::evaluation::{mcc_report, r2_report, score_report, Correlation, ScoreReport};
use crate::methods::{
    byol_loss_var, center_update, cross_entropy_var, dino_loss_var, dino_targets, kmeans_assign, kmeans_refine,
    normalized_entropy, sinkhorn, swav_loss_var, uniform_resample_weights, CenterState, PrototypeBank,
    SINKHORN_EPS, SINKHORN_TRAIN_ITERS,
};
use crate::seeding::{stream, stream_rng};
use crate::synthetic::{sample_views, GenerativeSpec, MixingNet, ViewBatch};

pub const BUILD_ID: &str = concat!("miner-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Simclr,
    Cmc,
    Byol,
    Dino,
    Swav,
    Deepcluster,
}

impl Method {
    pub fn is_discrete(self) -> bool {
        matches!(self, Method::Dino | Method::Swav | Method::Deepcluster)
    }

    pub fn is_distillation(self) -> bool {
        matches!(self, Method::Byol | Method::Dino)
    }

    pub fn is_clustering(self) -> bool {
        matches!(self, Method::Swav | Method::Deepcluster)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub method: Method,
    /// Maximize the ER bound instead of the method's own loss.
    pub er: bool,
    /// Joe's resubstitution entropy estimator, otherwise the plug-in KDE one.
    pub is_joe: bool,
    /// Keep the teacher-side half of the distillation ER loss.
    pub symmetric_distillation: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    /// EMA coefficient of the teacher.
    pub ema: f64,
    pub rec_weight: f64,
    /// Kernel bandwidth; defaults to the cosine temperature `tau`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Cosine temperature of the native contrastive losses.
    pub tau: f64,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub centering: bool,
    pub center_momentum: f64,
    pub swav_temperature: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    /// Number of prototypes, clusters or DINO output units.
    pub prototypes: usize,
    pub kmeans_iters: usize,
    pub hidden: usize,
    /// Number of linear layers in the encoder.
    pub depth: usize,
    pub slope: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<Head>,
    /// Family of the reconstruction and KDE kernel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<DensityKind>,
    pub data: GenerativeSpec,
    pub log_every: usize,
    pub eval_every: usize,
    /// Held-out pairs scored during training; 0 disables evaluation.
    pub eval_pairs: usize,
    pub correlation: Correlation,
    /// Fill the `wall_ms` column. Off by default so logs are reproducible.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            method: Method::Simclr,
            er: false,
            is_joe: true,
            symmetric_distillation: true,
            batch_size: 256,
            steps: 2000,
            seed: 0,
            lr: 1e-4,
            ema: 0.99,
            rec_weight: 1.0,
            bandwidth: None,
            tau: 0.1,
            tau_student: 0.1,
            tau_teacher: 0.04,
            centering: true,
            center_momentum: 0.9,
            swav_temperature: 0.1,
            sinkhorn_eps: SINKHORN_EPS,
            sinkhorn_iters: SINKHORN_TRAIN_ITERS,
            prototypes: 16,
            kmeans_iters: 10,
            hidden: 64,
            depth: 3,
            slope: 0.2,
            out_dim: None,
            head: None,
            model: None,
            data: GenerativeSpec::default(),
            log_every: 50,
            eval_every: 500,
            eval_pairs: 2000,
            correlation: Correlation::Pearson,
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth.unwrap_or(self.tau)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim.unwrap_or(match self.method {
            Method::Dino => self.prototypes,
            _ => self.data.dim,
        })
    }

    pub fn head(&self) -> Head {
        self.head.unwrap_or(match (self.method, self.data.space) {
            (Method::Dino, _) => Head::None,
            (_, Support::Sphere) => Head::Sphere,
            (_, Support::Box) => Head::Box,
            (_, Support::Unbounded) => Head::None,
        })
    }

    pub fn model(&self) -> DensityKind {
        self.model.unwrap_or(match self.data.space {
            Support::Sphere => DensityKind::Vmf { kappa: 1.0 },
            _ => DensityKind::Gaussian { sigma: 1.0 },
        })
    }

    /// KDE and reconstruction kernel. The bandwidth multiplies the model's
    /// scale; for vMF it divides the concentration.
    pub fn kernel(&self) -> Result<KernelSpec> {
        let model = self.model();
        let scale = match model {
            DensityKind::Gaussian { sigma } => sigma,
            DensityKind::Laplace { scale } | DensityKind::GenNorm { scale, .. } => scale,
            DensityKind::Vmf { .. } => 1.0,
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("model scale {scale} must be positive")));
        }
        KernelSpec::for_density(&model, self.bandwidth() * scale, self.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(msg: impl Into<String>) -> Result<()> {
            Err(Error::Config(msg.into()))
        }
        self.data.validate().map_err(|e| Error::Config(format!("data: {e}")))?;
        for (name, v) in [
            ("lr", self.lr),
            ("bandwidth", self.bandwidth()),
            ("tau", self.tau),
            ("tau_student", self.tau_student),
            ("tau_teacher", self.tau_teacher),
            ("swav_temperature", self.swav_temperature),
            ("sinkhorn_eps", self.sinkhorn_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("ema", self.ema), ("center_momentum", self.center_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.rec_weight >= 0.0 && self.rec_weight.is_finite()) {
            return bad(format!("rec_weight must be non-negative, got {}", self.rec_weight));
        }
        if !(self.slope > 0.0 && self.slope <= 1.0) {
            return bad(format!("slope must lie in (0, 1], got {}", self.slope));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.depth == 0 || self.hidden == 0 || self.out_dim() == 0 {
            return bad("depth, hidden and out_dim must be positive");
        }
        if self.prototypes < 2 {
            return bad("prototypes must be at least 2");
        }
        if self.sinkhorn_iters == 0 || self.log_every == 0 || self.eval_every == 0 {
            return bad("sinkhorn_iters, log_every and eval_every must be positive");
        }
        if self.eval_pairs > 0 && self.eval_pairs <= self.out_dim().max(self.data.dim) + 1 {
            return bad(format!("eval_pairs = {} is too small to score", self.eval_pairs));
        }
        if !self.symmetric_distillation && !(self.er && self.method.is_distillation()) {
            return bad("symmetric_distillation = false applies only to ER runs of byol or dino");
        }
        if self.method == Method::Swav && self.head() != Head::Sphere {
            return bad("swav needs a sphere head");
        }
        if self.method == Method::Deepcluster && self.prototypes > 2 * self.batch_size {
            return bad("deepcluster needs prototypes <= 2 * batch_size");
        }
        self.kernel().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub student: MlpParams,
    pub teacher: Option<MlpParams>,
    /// BYOL predictor or DeepCluster classifier.
    pub predictor: Option<MlpParams>,
    pub center: Option<CenterState>,
    /// SwAV prototypes or DeepCluster centroids.
    pub prototypes: Option<PrototypeBank>,
    pub optimizer: AdamState,
    pub iter: usize,
    /// Largest absolute gradient that reached a teacher parameter.
    pub teacher_grad_max_abs: f64,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, stream::INIT);
        let out = cfg.out_dim();
        let m = cfg.prototypes;
        let mut dims = vec![cfg.data.dim];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.depth - 1));
        dims.push(out);
        let student = MlpParams::init(&dims, cfg.slope, cfg.head(), &mut rng)?;
        let predictor = match cfg.method {
            Method::Byol => Some(MlpParams::init(&[out, 2 * out, out], cfg.slope, Head::None, &mut rng)?),
            Method::Deepcluster => Some(MlpParams::init(&[out, m], cfg.slope, Head::None, &mut rng)?),
            _ => None,
        };
        let prototypes = match cfg.method {
            Method::Swav => {
                let rows: Vec<Vec<f64>> = (0..m).map(|_| sample_sphere_uniform(out, &mut rng)).collect();
                Some(PrototypeBank::on_sphere(Matrix::from_rows(&rows)?, true)?)
            }
            // seeded by k-means++ on the first batch
            Method::Deepcluster => Some(PrototypeBank { c: Matrix::zeros(m, out), trainable: false }),
            _ => None,
        };
        let teacher = cfg.method.is_distillation().then(|| student.clone());
        let center = if cfg.method == Method::Dino {
            Some(CenterState::zeros(out, cfg.center_momentum)?)
        } else {
            None
        };
        let mut tensors = student.tensors();
        if let Some(p) = &predictor {
            tensors.extend(p.tensors());
        }
        if let Some(p) = prototypes.as_ref().filter(|p| p.trainable) {
            tensors.push(&p.c);
        }
        let optimizer = AdamState::new(tensors, cfg.lr);
        Ok(Self {
            student,
            teacher,
            predictor,
            center,
            prototypes,
            optimizer,
            iter: 0,
            teacher_grad_max_abs: 0.0,
        })
    }

    /// SHA-256 over every model tensor and the iteration count, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |m: &Matrix| {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        for net in [Some(&self.student), self.teacher.as_ref(), self.predictor.as_ref()].into_iter().flatten() {
            net.tensors().into_iter().for_each(&mut feed);
        }
        if let Some(c) = &self.center {
            feed(&c.c);
        }
        if let Some(p) = &self.prototypes {
            feed(&p.c);
        }
        h.update((self.iter as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Values produced by one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Symmetrized entropy estimate.
    pub entropy: f64,
    /// Symmetrized reconstruction estimate.
    pub reconstruction: f64,
    /// Normalized entropy of the second branch's surrogate (discrete methods).
    pub norm_entropy: Option<f64>,
}

pub struct StepInfo<'a> {
    pub step: usize,
    pub outcome: &'a StepOutcome,
    pub state: &'a TrainState,
}

struct Terms {
    loss: Var,
    entropy: Var,
    reconstruction: Var,
}

fn combine(tape: &mut Tape, h1: Var, r2: Var, other: Option<(Var, Var)>, w: f64) -> Terms {
    let (entropy, reconstruction) = match other {
        Some((h2, r1)) => {
            let h = tape.add(h1, h2);
            let r = tape.add(r1, r2);
            (tape.scale(h, 0.5), tape.scale(r, 0.5))
        }
        None => (h1, r2),
    };
    let wr = tape.scale(reconstruction, w);
    let er = tape.add(entropy, wr);
    Terms { loss: tape.neg(er), entropy, reconstruction }
}

fn entropy_cont(tape: &mut Tape, cfg: &RunConfig, z: Var, kernel: &KernelSpec) -> Result<Var> {
    if cfg.is_joe {
        entropy_joe_var(tape, z, kernel)
    } else {
        entropy_plugin_kde_var(tape, z, kernel, true)
    }
}

fn continuous_terms(tape: &mut Tape, cfg: &RunConfig, kernel: &KernelSpec, z1: Var, z2: Var, both: bool) -> Result<Terms> {
    let sim = Similarity::LogKernel(*kernel);
    let h1 = entropy_cont(tape, cfg, z1, kernel)?;
    let r2 = reconstruction_cont_var(tape, z1, z2, &sim)?;
    let other = if both {
        let h2 = entropy_cont(tape, cfg, z2, kernel)?;
        Some((h2, reconstruction_cont_var(tape, z2, z1, &sim)?))
    } else {
        None
    };
    Ok(combine(tape, h1, r2, other, cfg.rec_weight))
}

/// One view of a discrete surrogate: the posterior whose marginal entropy is
/// estimated, the assignment targets, and `log q(w | other view)`.
struct Branch {
    posterior: Var,
    targets: Var,
    log_q: Var,
}

fn rec_disc(tape: &mut Tape, targets: Var, log_q: Var) -> Var {
    let k = tape.shape(targets).0 as f64;
    let prod = tape.mul(targets, log_q);
    let s = tape.sum(prod);
    tape.scale(s, 1.0 / k)
}

fn discrete_terms(tape: &mut Tape, cfg: &RunConfig, b1: &Branch, b2: &Branch, both: bool) -> Result<Terms> {
    let h1 = entropy_plugin_disc_var(tape, b1.posterior, 1)?;
    let r2 = rec_disc(tape, b2.targets, b2.log_q);
    let other = if both {
        let h2 = entropy_plugin_disc_var(tape, b2.posterior, 1)?;
        Some((h2, rec_disc(tape, b1.targets, b1.log_q)))
    } else {
        None
    };
    Ok(combine(tape, h1, r2, other, cfg.rec_weight))
}

fn sum_grads(g: &Gradients, vars: &[MlpVars]) -> Vec<Matrix> {
    let mut total = vars[0].grads(g);
    for v in &vars[1..] {
        for (t, x) in total.iter_mut().zip(v.grads(g)) {
            t.add_assign(&x);
        }
    }
    total
}

fn vstack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), [a.as_slice(), b.as_slice()].concat())
}

fn scaled_softmax(tape: &mut Tape, logits: Var, temperature: f64) -> (Var, Var) {
    let z = tape.scale(logits, 1.0 / temperature);
    (tape.softmax_rows(z), tape.log_softmax_rows(z))
}

/// One optimization step on `views`.
pub fn train_step<R: rand::Rng + ?Sized>(
    cfg: &RunConfig,
    state: &mut TrainState,
    views: &ViewBatch,
    cluster_rng: &mut R,
) -> Result<StepOutcome> {
    let kernel = cfg.kernel()?;
    let mut tape = Tape::new();
    let x1 = tape.constant(views.x1.clone());
    let x2 = tape.constant(views.x2.clone());
    let (s1, sv1) = state.student.forward(&mut tape, x1)?;
    let (s2, sv2) = state.student.forward(&mut tape, x2)?;
    let student_vars = vec![sv1, sv2];
    let mut predictor_vars = Vec::new();
    let mut teacher_vars = Vec::new();
    let mut proto_var = None;
    let mut teacher_values = None;
    let mut new_centroids = None;

    let teacher_out = match &state.teacher {
        Some(t) => {
            let (t1, tv1) = t.forward(&mut tape, x1)?;
            let (t2, tv2) = t.forward(&mut tape, x2)?;
            teacher_vars.push(tv1);
            teacher_vars.push(tv2);
            Some((tape.stop_gradient(t1), tape.stop_gradient(t2)))
        }
        None => None,
    };

    let (terms, native, norm_entropy) = match cfg.method {
        Method::Simclr | Method::Cmc => {
            let terms = continuous_terms(&mut tape, cfg, &kernel, s1, s2, true)?;
            let mode = if cfg.method == Method::Simclr { NegativeMode::Simclr } else { NegativeMode::Cmc };
            let native = if cfg.er {
                None
            } else {
                Some(contrastive_loss_symmetric_var(&mut tape, s1, s2, &Similarity::cosine(cfg.tau)?, &mode)?)
            };
            (terms, native, None)
        }
        Method::Byol => {
            let pred = state.predictor.as_ref().expect("byol has a predictor");
            let (t1, t2) = teacher_out.expect("byol has a teacher");
            let (p1, pv1) = pred.forward(&mut tape, s1)?;
            predictor_vars.push(pv1);
            let terms = continuous_terms(&mut tape, cfg, &kernel, p1, t2, cfg.symmetric_distillation)?;
            let native = if cfg.er {
                None
            } else {
                let (p2, pv2) = pred.forward(&mut tape, s2)?;
                predictor_vars.push(pv2);
                let l1 = byol_loss_var(&mut tape, p1, t2)?;
                let l2 = byol_loss_var(&mut tape, p2, t1)?;
                let l = tape.add(l1, l2);
                Some(tape.scale(l, 0.5))
            };
            (terms, native, None)
        }
        Method::Dino => {
            let center = state.center.as_ref().expect("dino has a center");
            let (t1, t2) = teacher_out.expect("dino has a teacher");
            let (tv1, tv2) = (tape.value(t1).clone(), tape.value(t2).clone());
            let p1 = tape.constant(dino_targets(&tv1, center, cfg.tau_teacher)?);
            let p2 = dino_targets(&tv2, center, cfg.tau_teacher)?;
            let (_, ls1) = scaled_softmax(&mut tape, s1, cfg.tau_student);
            let (_, ls2) = scaled_softmax(&mut tape, s2, cfg.tau_student);
            let neg_c = tape.constant(center.c.scale(-1.0));
            let c1 = tape.add_row(s1, neg_c);
            let c2 = tape.add_row(s2, neg_c);
            let (q1, _) = scaled_softmax(&mut tape, c1, cfg.tau_teacher);
            let (q2, _) = scaled_softmax(&mut tape, c2, cfg.tau_teacher);
            let p2v = tape.constant(p2.clone());
            let b1 = Branch { posterior: q1, targets: p1, log_q: ls2 };
            let b2 = Branch { posterior: q2, targets: p2v, log_q: ls1 };
            let terms = discrete_terms(&mut tape, cfg, &b1, &b2, cfg.symmetric_distillation)?;
            let native = if cfg.er {
                None
            } else {
                let l1 = dino_loss_var(&mut tape, s1, t2, center, cfg.tau_student, cfg.tau_teacher)?;
                let l2 = dino_loss_var(&mut tape, s2, t1, center, cfg.tau_student, cfg.tau_teacher)?;
                let l = tape.add(l1, l2);
                Some(tape.scale(l, 0.5))
            };
            teacher_values = Some(vstack(&tv1, &tv2)?);
            (terms, native, Some(normalized_entropy(&DiscretePosterior::new(p2)?)?))
        }
        Method::Swav => {
            let protos = state.prototypes.as_ref().expect("swav has prototypes");
            let c = tape.param(protos.c.clone());
            proto_var = Some(c);
            let assign = |z: &Matrix| -> Result<Matrix> {
                let plan = sinkhorn(&z.matmul_t(&protos.c), cfg.sinkhorn_eps, cfg.sinkhorn_iters)?;
                Ok(plan.row_pmfs()?.values().clone())
            };
            let q1 = assign(tape.value(s1))?;
            let q2 = assign(tape.value(s2))?;
            let l1 = tape.matmul_t(s1, c);
            let l2 = tape.matmul_t(s2, c);
            let (post1, ls1) = scaled_softmax(&mut tape, l1, cfg.swav_temperature);
            let (post2, ls2) = scaled_softmax(&mut tape, l2, cfg.swav_temperature);
            let (t1, t2) = (tape.constant(q1.clone()), tape.constant(q2.clone()));
            let b1 = Branch { posterior: post1, targets: t1, log_q: ls2 };
            let b2 = Branch { posterior: post2, targets: t2, log_q: ls1 };
            let terms = discrete_terms(&mut tape, cfg, &b1, &b2, true)?;
            let native = if cfg.er {
                None
            } else {
                let a = swav_loss_var(&mut tape, &q2, s1, c, cfg.swav_temperature)?;
                let b = swav_loss_var(&mut tape, &q1, s2, c, cfg.swav_temperature)?;
                let l = tape.add(a, b);
                Some(tape.scale(l, 0.5))
            };
            (terms, native, Some(normalized_entropy(&DiscretePosterior::new(q2)?)?))
        }
        Method::Deepcluster => {
            let pred = state.predictor.as_ref().expect("deepcluster has a predictor");
            let protos = state.prototypes.as_ref().expect("deepcluster has centroids");
            let k = cfg.batch_size;
            let both = vstack(tape.value(s1), tape.value(s2))?;
            let km = if state.iter == 0 {
                kmeans_assign(&both, cfg.prototypes, cfg.kmeans_iters, cluster_rng)?
            } else {
                kmeans_refine(&both, protos.c.clone(), cfg.kmeans_iters)?
            };
            let a1 = DiscretePosterior::one_hot(&km.labels[..k], cfg.prototypes)?;
            let a2 = DiscretePosterior::one_hot(&km.labels[k..], cfg.prototypes)?;
            new_centroids = Some(km.centroids);
            let (g1, gv1) = pred.forward(&mut tape, s1)?;
            let (g2, gv2) = pred.forward(&mut tape, s2)?;
            predictor_vars.push(gv1);
            predictor_vars.push(gv2);
            let (post1, ls1) = scaled_softmax(&mut tape, g1, 1.0);
            let (post2, ls2) = scaled_softmax(&mut tape, g2, 1.0);
            let (t1, t2) = (tape.constant(a1.values().clone()), tape.constant(a2.values().clone()));
            let b1 = Branch { posterior: post1, targets: t1, log_q: ls2 };
            let b2 = Branch { posterior: post2, targets: t2, log_q: ls1 };
            let terms = discrete_terms(&mut tape, cfg, &b1, &b2, true)?;
            let native = if cfg.er {
                None
            } else {
                let w1 = uniform_resample_weights(&a1);
                let w2 = uniform_resample_weights(&a2);
                let a = cross_entropy_var(&mut tape, g1, a2.values(), Some(&w2))?;
                let b = cross_entropy_var(&mut tape, g2, a1.values(), Some(&w1))?;
                let l = tape.add(a, b);
                Some(tape.scale(l, 0.5))
            };
            (terms, native, Some(normalized_entropy(&a2)?))
        }
    };

    let loss = native.unwrap_or(terms.loss);
    let outcome = StepOutcome {
        loss: tape.scalar(loss),
        entropy: tape.scalar(terms.entropy),
        reconstruction: tape.scalar(terms.reconstruction),
        norm_entropy,
    };
    if !outcome.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {}", outcome.loss)));
    }
    let g = tape.backward(loss)?;
    let mut grads = sum_grads(&g, &student_vars);
    if !predictor_vars.is_empty() {
        grads.extend(sum_grads(&g, &predictor_vars));
    }
    if let Some(c) = proto_var {
        grads.push(g.wrt(c));
    }
    for m in &grads {
        m.ensure_finite("gradient")?;
    }
    if !teacher_vars.is_empty() {
        let tg = sum_grads(&g, &teacher_vars);
        let max = tg.iter().flat_map(|m| m.as_slice()).fold(0.0f64, |a, v| a.max(v.abs()));
        state.teacher_grad_max_abs = state.teacher_grad_max_abs.max(max);
    }

    let TrainState { student, predictor, prototypes, optimizer, .. } = state;
    let mut params = student.tensors_mut();
    if let Some(p) = predictor.as_mut() {
        params.extend(p.tensors_mut());
    }
    if let Some(p) = prototypes.as_mut().filter(|p| p.trainable) {
        params.push(&mut p.c);
    }
    adam_step(&mut params, &grads, optimizer)?;
    for m in state.student.tensors() {
        m.ensure_finite("student parameters")?;
    }

    if let Some(p) = state.prototypes.as_mut().filter(|p| p.trainable) {
        p.c = p.c.normalize_rows()?;
    }
    if let Some(c) = new_centroids {
        state.prototypes = Some(c);
    }
    if let Some(t) = state.teacher.as_mut() {
        ema_update(t, &state.student, cfg.ema)?;
    }
    if let (Some(center), Some(tv), true) = (state.center.as_mut(), teacher_values, cfg.centering) {
        *center = center_update(center, &tv)?;
    }
    state.iter += 1;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub entropy: f64,
    pub reconstruction: f64,
    pub norm_entropy: Option<f64>,
    pub r2: Option<f64>,
    pub mcc: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,loss,entropy,reconstruction,norm_entropy,r2,mcc,wall_ms";

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    /// CSV with shortest round-trip decimals; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let fields = [
                r.step.to_string(),
                r.loss.to_string(),
                r.entropy.to_string(),
                r.reconstruction.to_string(),
                opt(r.norm_entropy),
                opt(r.r2),
                opt(r.mcc),
                opt(r.wall_ms),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Config("metrics CSV header mismatch".into()));
        }
        let num = |s: &str, line: usize| -> Result<f64> {
            s.parse().map_err(|_| Error::Config(format!("line {line}: bad number {s:?}")))
        };
        let opt = |s: &str, line: usize| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, line).map(Some)
            }
        };
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Config(format!("line {n}: expected 8 fields, got {}", f.len())));
            }
            records.push(MetricsRecord {
                step: f[0].parse().map_err(|_| Error::Config(format!("line {n}: bad step {:?}", f[0])))?,
                loss: num(f[1], n)?,
                entropy: num(f[2], n)?,
                reconstruction: num(f[3], n)?,
                norm_entropy: opt(f[4], n)?,
                r2: opt(f[5], n)?,
                mcc: opt(f[6], n)?,
                wall_ms: opt(f[7], n)?,
            });
        }
        Ok(Self { records })
    }
}

/// R² and MCC of `student` outputs against the latents of the first view.
pub fn score_views(student: &MlpParams, views: &ViewBatch, kind: Correlation) -> Result<(Option<f64>, Option<f64>)> {
    let learned = student.predict(&views.x1)?;
    let n = learned.rows();
    let r2 = if n > learned.cols() + 1 { Some(r2_report(&learned, &views.z1)?.r2) } else { None };
    let mcc = if learned.cols() == views.z1.cols() { Some(mcc_report(&learned, &views.z1, kind)?.mcc) } else { None };
    Ok((r2, mcc))
}

/// Runs the training loop, appending to `log` as it goes so that a partial log
/// survives an aborted run. `observer` sees the state after every step.
pub fn train(cfg: &RunConfig, log: &mut MetricsLog, observer: &mut dyn FnMut(&StepInfo)) -> Result<TrainState> {
    let mut state = TrainState::init(cfg)?;
    let net = MixingNet::new(cfg.data.dim, &cfg.data.mixing)?;
    let eval = if cfg.eval_pairs > 0 {
        Some(sample_views(&cfg.data, &net, cfg.eval_pairs, &mut stream_rng(cfg.seed, stream::EVAL))?)
    } else {
        None
    };
    let mut data_rng = stream_rng(cfg.seed, stream::DATA);
    let mut cluster_rng = stream_rng(cfg.seed, stream::CLUSTER);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let views = sample_views(&cfg.data, &net, cfg.batch_size, &mut data_rng)?;
        let outcome = train_step(cfg, &mut state, &views, &mut cluster_rng).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step, what },
            e => e,
        })?;
        observer(&StepInfo { step, outcome: &outcome, state: &state });
        let last = step == cfg.steps;
        let eval_due = eval.is_some() && (step % cfg.eval_every == 0 || last);
        if step == 1 || step % cfg.log_every == 0 || last || eval_due {
            let (r2, mcc) = match (&eval, eval_due) {
                (Some(v), true) => score_views(&state.student, v, cfg.correlation)?,
                _ => (None, None),
            };
            log.records.push(MetricsRecord {
                step,
                loss: outcome.loss,
                entropy: outcome.entropy,
                reconstruction: outcome.reconstruction,
                norm_entropy: outcome.norm_entropy,
                r2,
                mcc,
                wall_ms: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64() * 1e3),
            });
        }
    }
    Ok(state)
}

pub fn run_mvssl(cfg: &RunConfig) -> Result<(TrainState, MetricsLog)> {
    let mut log = MetricsLog::default();
    let state = train(cfg, &mut log, &mut |_| {})?;
    Ok((state, log))
}

/// Scores `student` on `pairs` fresh held-out pairs of the configured process.
pub fn score_held_out(cfg: &RunConfig, student: &MlpParams, pairs: usize) -> Result<ScoreReport> {
    let net = MixingNet::new(cfg.data.dim, &cfg.data.mixing)?;
    let views = sample_views(&cfg.data, &net, pairs, &mut stream_rng(cfg.seed, stream::HOLDOUT))?;
    let learned = student.predict(&views.x1)?;
    score_report(&learned, &views.z1, cfg.correlation)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentResult {
    pub state: TrainState,
    pub log: MetricsLog,
    pub scores: ScoreReport,
}

pub fn run_identifiability_experiment(cfg: &RunConfig, eval_pairs: usize) -> Result<IdentResult> {
    if cfg.out_dim() != cfg.data.dim {
        return Err(Error::Config(format!(
            "encoder output dim {} must equal the latent dim {}",
            cfg.out_dim(),
            cfg.data.dim
        )));
    }
    let (state, log) = run_mvssl(cfg)?;
    let scores = score_held_out(cfg, &state.student, eval_pairs)?;
    Ok(IdentResult { state, log, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub build_id: String,
    pub steps: usize,
    pub init_hash: String,
    pub final_hash: String,
    pub final_loss: Option<f64>,
    pub final_entropy: Option<f64>,
    pub final_reconstruction: Option<f64>,
    pub final_norm_entropy: Option<f64>,
    pub scores: Option<ScoreReport>,
    pub teacher_grad_max_abs: f64,
    pub wall_ms: f64,
    pub config: RunConfig,
}

impl RunSummary {
    pub fn new(
        cfg: &RunConfig,
        init_hash: String,
        state: &TrainState,
        log: &MetricsLog,
        scores: Option<ScoreReport>,
        wall_ms: f64,
    ) -> Self {
        let last = log.last();
        Self {
            run_id: cfg.run_id.clone(),
            build_id: BUILD_ID.into(),
            steps: state.iter,
            init_hash,
            final_hash: state.hash(),
            final_loss: last.map(|r| r.loss),
            final_entropy: last.map(|r| r.entropy),
            final_reconstruction: last.map(|r| r.reconstruction),
            final_norm_entropy: last.and_then(|r| r.norm_entropy),
            scores,
            teacher_grad_max_abs: state.teacher_grad_max_abs,
            wall_ms,
            config: cfg.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::DensityKind;
    use crate::synthetic::{Marginal, MixingSpec};

    fn small(method: Method, er: bool) -> RunConfig {
        RunConfig {
            method,
            er,
            batch_size: 32,
            steps: 6,
            hidden: 16,
            prototypes: 4,
            log_every: 2,
            eval_every: 3,
            eval_pairs: 64,
            lr: 1e-3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_is_init() {
        let cfg = RunConfig { steps: 0, ..small(Method::Simclr, true) };
        let (state, log) = run_mvssl(&cfg).unwrap();
        assert_eq!(state, TrainState::init(&cfg).unwrap());
        assert!(log.records.is_empty());
        assert_eq!(log.to_csv(), format!("{}\n", MetricsLog::HEADER));
    }

    #[test]
    fn every_method_runs_both_ways() {
        for method in [Method::Simclr, Method::Cmc, Method::Byol, Method::Dino, Method::Swav, Method::Deepcluster] {
            for er in [false, true] {
                let cfg = small(method, er);
                let (state, log) = run_mvssl(&cfg).unwrap_or_else(|e| panic!("{method:?} er={er}: {e}"));
                assert_eq!(state.iter, 6);
                let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
                assert_eq!(steps, vec![1, 2, 3, 4, 6]);
                assert_eq!(log.records[2].r2.is_some(), true);
                assert_eq!(log.records[0].r2, None);
                assert_eq!(state.teacher_grad_max_abs, 0.0);
                assert_eq!(log.records[0].norm_entropy.is_some(), method.is_discrete());
                if er {
                    for r in &log.records {
                        assert!((r.loss + r.entropy + cfg.rec_weight * r.reconstruction).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_csv() {
        let cfg = small(Method::Deepcluster, false);
        let a = run_mvssl(&cfg).unwrap().1.to_csv();
        let b = run_mvssl(&cfg).unwrap().1.to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let (_, log) = run_mvssl(&small(Method::Dino, true)).unwrap();
        let back = MetricsLog::from_csv(&log.to_csv()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn flag_validation() {
        let cfg = RunConfig { symmetric_distillation: false, ..small(Method::Simclr, true) };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig { symmetric_distillation: false, ..small(Method::Byol, true) };
        cfg.validate().unwrap();
        let cfg = RunConfig { head: Some(Head::None), ..small(Method::Swav, false) };
        assert!(cfg.validate().is_err());
        let mut cfg = small(Method::Simclr, false);
        cfg.data.space = Support::Unbounded;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn box_run_with_laplace_model() {
        let cfg = RunConfig {
            data: GenerativeSpec {
                space: Support::Box,
                dim: 3,
                marginal: Marginal::Uniform,
                conditional: DensityKind::Laplace { scale: 0.05 },
                mixing: MixingSpec { layers: 3, seed: 1 },
            },
            model: Some(DensityKind::Laplace { scale: 1.0 }),
            bandwidth: Some(10.0),
            ..small(Method::Simclr, true)
        };
        let (state, _) = run_mvssl(&cfg).unwrap();
        assert_eq!(state.student.head, Head::Box);
    }

    #[test]
    fn hash_tracks_parameters() {
        let cfg = small(Method::Byol, false);
        let init = TrainState::init(&cfg).unwrap();
        let (state, _) = run_mvssl(&cfg).unwrap();
        assert_ne!(init.hash(), state.hash());
        assert_eq!(init.hash(), TrainState::init(&cfg).unwrap().hash());
    }
}
